//! Self-distillation trainer: student/teacher parameter pairs, masked
//! nucleotide reconstruction, temperature-softmax contrastive loss over
//! appended CLS tokens with teacher centering, EMA teacher updates, and the
//! cosine learning-rate / momentum schedules.
//!
//! The student learns by backpropagation on one augmented view of each
//! sequence; the teacher — an exponential moving average of the student —
//! processes a second view and its CLS outputs supervise the student's
//! contrastive branch. Teacher activations never live on a gradient tape:
//! they are computed on a throwaway forward pass and enter the student's
//! loss only as constants, so detachment holds by construction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{splitmix64, AugmentError, EncodedView, ViewPipeline};
use crate::mixer::{mixer_forward, ForwardCtx, MixerConfig, MixerError};
use crate::ndiff::tensor::for_each_lane;
use crate::ndiff::{AdamW, NdiffError, NodeId, ParamStore, Tape, Tensor};
use crate::seqcore::{NucleotideSequence, ONE_HOT_WIDTH};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("invalid distillation config: {0}")]
    BadConfig(String),
    #[error("schedule step {step} out of range for {total} total steps")]
    StepOutOfRange { step: usize, total: usize },
    #[error("training batch is empty")]
    EmptyBatch,
    #[error("ragged batch: expected sequence length {expected}, got {got}")]
    RaggedBatch { expected: usize, got: usize },
    #[error("shape mismatch in {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Mixer(#[from] MixerError),
    #[error(transparent)]
    Ndiff(#[from] NdiffError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

/// Which axis the contrastive softmax normalizes over. `Tokens` matches the
/// written objective (each channel's distribution runs across the K CLS
/// tokens); `Channels` is the more common per-token convention, kept as an
/// escape hatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClSoftmaxAxis {
    #[default]
    Tokens,
    Channels,
}

/// Per-sequence reduction of the masked-reconstruction loss. `Sum` is the
/// objective as written; `Mean` divides by the number of masked positions.
/// Either way the batch dimension is averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MnmReduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    /// Tradeoff between the reconstruction term (weight `alpha`) and the
    /// contrastive term (weight `1 - alpha`).
    pub alpha: f64,
    /// Student softmax temperature.
    pub tau_s: f64,
    /// Teacher softmax temperature; must be below `tau_s`.
    pub tau_t: f64,
    /// Number of blank CLS tokens appended to every sequence.
    pub cls_tokens: usize,
    /// Momentum of the teacher-output center.
    pub beta: f64,
    /// EMA momentum schedule endpoints.
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub epochs: usize,
    /// Fraction of total steps spent in linear learning-rate warmup.
    pub warmup_fraction: f64,
    pub base_lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub cl_softmax_axis: ClSoftmaxAxis,
    pub mnm_reduction: MnmReduction,
    /// Include masked positions whose original base is N in the loss.
    pub include_n_targets: bool,
    /// Subtract the running center from teacher CLS outputs (collapse guard).
    pub centering: bool,
    /// When false the teacher/contrastive branch is skipped entirely
    /// (reconstruction-only baseline); `alpha` should then be 1.
    pub contrastive: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self::reference_default()
    }
}

impl DistillConfig {
    pub fn reference_default() -> Self {
        Self {
            alpha: 0.5,
            tau_s: 0.1,
            tau_t: 0.04,
            cls_tokens: 10,
            beta: 0.996,
            lambda_start: 0.996,
            lambda_end: 1.0,
            epochs: 50,
            warmup_fraction: 0.3,
            base_lr: 5e-4,
            batch_size: 32,
            weight_decay: 0.04,
            seed: 0,
            cl_softmax_axis: ClSoftmaxAxis::Tokens,
            mnm_reduction: MnmReduction::Sum,
            include_n_targets: true,
            centering: true,
            contrastive: true,
        }
    }

    /// Reconstruction-only preset: the contrastive branch (teacher forward,
    /// EMA, centering) is disabled so its overhead can be measured against
    /// the full objective on identical code paths.
    pub fn mnm_only() -> Self {
        Self {
            alpha: 1.0,
            contrastive: false,
            ..Self::reference_default()
        }
    }

    pub fn validate(&self) -> Result<(), DistillError> {
        let bad = |msg: String| Err(DistillError::BadConfig(msg));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if self.contrastive && self.alpha >= 1.0 {
            return bad("alpha = 1 leaves no contrastive weight; disable the \
                        contrastive branch instead"
                .into());
        }
        if self.tau_s <= 0.0 || self.tau_t <= 0.0 {
            return bad(format!(
                "temperatures must be positive, got tau_s={} tau_t={}",
                self.tau_s, self.tau_t
            ));
        }
        if self.tau_t >= self.tau_s {
            return bad(format!(
                "teacher temperature {} must be below student temperature {}",
                self.tau_t, self.tau_s
            ));
        }
        if self.cls_tokens == 0 {
            return bad("at least one CLS token is required".into());
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad(format!("beta must lie in (0, 1), got {}", self.beta));
        }
        for (name, l) in [("lambda_start", self.lambda_start), ("lambda_end", self.lambda_end)] {
            if !(l > 0.0 && l <= 1.0) {
                return bad(format!("{name} must lie in (0, 1], got {l}"));
            }
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!(
                "warmup_fraction must lie in [0, 1), got {}",
                self.warmup_fraction
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }
}

/// Student and teacher parameter sets: identical names and shapes, the
/// teacher updated only by EMA, never by backward.
#[derive(Debug, Clone)]
pub struct StudentTeacherState {
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub step: usize,
}

impl StudentTeacherState {
    /// Initialize the mixer body plus the per-position reconstruction head,
    /// then copy the student into the teacher.
    pub fn init(mixer_cfg: &MixerConfig, seed: u64) -> Result<Self, DistillError> {
        let mut student = crate::mixer::init_params(mixer_cfg, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x6865_6164)); // "head"
        let fan_in = mixer_cfg.channels as f64;
        let normal = Normal::new(0.0, 1.0 / fan_in.sqrt()).expect("valid std");
        let n = mixer_cfg.channels * ONE_HOT_WIDTH;
        student.insert(
            "head.mnm.w",
            Tensor::new(
                vec![mixer_cfg.channels, ONE_HOT_WIDTH],
                (0..n).map(|_| normal.sample(&mut rng)).collect(),
            ),
        );
        student.insert("head.mnm.b", Tensor::zeros(vec![ONE_HOT_WIDTH]));
        let teacher = student.clone();
        Ok(Self {
            student,
            teacher,
            step: 0,
        })
    }
}

/// Moving-average center subtracted from teacher CLS outputs before their
/// softmax, preventing the teacher distribution from collapsing onto one
/// token.
#[derive(Debug, Clone)]
pub struct CenterState {
    /// K x I.
    pub xi: Tensor,
    pub beta: f64,
}

impl CenterState {
    pub fn zeros(cls_tokens: usize, channels: usize, beta: f64) -> Self {
        Self {
            xi: Tensor::zeros(vec![cls_tokens, channels]),
            beta,
        }
    }
}

/// Append `k` all-zero (blank) token rows after the L sequence rows.
pub fn append_cls(view: &EncodedView, k: usize) -> Tensor {
    let l = view.matrix.len();
    let mut data = Vec::with_capacity((l + k) * ONE_HOT_WIDTH);
    data.extend_from_slice(view.matrix.data());
    data.resize((l + k) * ONE_HOT_WIDTH, 0.0);
    Tensor::new(vec![l + k, ONE_HOT_WIDTH], data)
}

fn is_n_target(t: &[f64; ONE_HOT_WIDTH]) -> bool {
    t[ONE_HOT_WIDTH - 1] == 1.0
}

/// Cross-entropy over a set of already-gathered masked rows. `flat` is
/// [R, I]; `rows` index into it; `weighted_targets` is [M, D] with each
/// one-hot target row pre-multiplied by its per-row weight.
fn masked_rows_ce(
    tape: &mut Tape,
    flat: NodeId,
    rows: &[usize],
    weighted_targets: Tensor,
    params: &ParamStore,
) -> Result<NodeId, DistillError> {
    let picked = tape.gather_rows(flat, rows)?;
    let w = tape.param(params, "head.mnm.w")?;
    let b = tape.param(params, "head.mnm.b")?;
    let logits = tape.linear(picked, w, b)?;
    let probs = tape.softmax(logits, 1)?;
    let logp = tape.log(probs);
    let t = tape.constant(weighted_targets);
    let prod = tape.mul(logp, t)?;
    let s = tape.sum_all(prod);
    Ok(tape.scale(s, -1.0))
}

/// Per-row loss weights and surviving (row, target) pairs for one view.
fn mnm_rows(
    view: &EncodedView,
    reduction: MnmReduction,
    include_n: bool,
) -> (Vec<usize>, Vec<[f64; ONE_HOT_WIDTH]>, f64) {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (pos, target) in view.masked_positions.iter().zip(&view.mnm_targets) {
        if include_n || !is_n_target(target) {
            rows.push(*pos);
            targets.push(*target);
        }
    }
    let weight = match reduction {
        MnmReduction::Sum => 1.0,
        MnmReduction::Mean => {
            if rows.is_empty() {
                0.0
            } else {
                1.0 / rows.len() as f64
            }
        }
    };
    (rows, targets, weight)
}

/// Masked-reconstruction cross-entropy for one sequence. `u` holds the L
/// position outputs ([L, I]); masked rows are projected to base logits by
/// the reconstruction head and scored against the stored pre-mask targets.
/// Returns 0 when nothing is masked.
pub fn mnm_loss(
    tape: &mut Tape,
    u: NodeId,
    view: &EncodedView,
    params: &ParamStore,
    reduction: MnmReduction,
    include_n_targets: bool,
) -> Result<NodeId, DistillError> {
    let shape = tape.shape(u);
    if shape.len() != 2 || shape[0] < view.matrix.len() {
        return Err(DistillError::ShapeMismatch(format!(
            "mnm_loss expects [L, I] with L >= {}, got {shape:?}",
            view.matrix.len()
        )));
    }
    let (rows, targets, weight) = mnm_rows(view, reduction, include_n_targets);
    if rows.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let m = rows.len();
    let mut data = Vec::with_capacity(m * ONE_HOT_WIDTH);
    for t in &targets {
        data.extend(t.iter().map(|x| x * weight));
    }
    let wt = Tensor::new(vec![m, ONE_HOT_WIDTH], data);
    masked_rows_ce(tape, u, &rows, wt, params)
}

fn axis_index(shape: &[usize], axis: ClSoftmaxAxis) -> usize {
    match axis {
        ClSoftmaxAxis::Tokens => shape.len() - 2,
        ClSoftmaxAxis::Channels => shape.len() - 1,
    }
}

/// Sharpened student distribution over the CLS block: softmax of P / tau_s,
/// normalized across tokens (or channels, per the flag). Differentiable.
pub fn student_cls_softmax(
    tape: &mut Tape,
    p: NodeId,
    tau_s: f64,
    axis: ClSoftmaxAxis,
) -> Result<NodeId, DistillError> {
    let ax = axis_index(tape.shape(p), axis);
    let scaled = tape.scale(p, 1.0 / tau_s);
    Ok(tape.softmax(scaled, ax)?)
}

/// Stable softmax over one axis of a plain tensor.
fn tensor_softmax(t: &Tensor, axis: usize) -> Tensor {
    let shape = t.shape().to_vec();
    let n = shape[axis];
    let mut out = t.clone();
    let src = t.data();
    let dst = out.data_mut();
    for_each_lane(&shape, axis, |base, stride| {
        let mut hi = f64::NEG_INFINITY;
        for j in 0..n {
            hi = hi.max(src[base + j * stride]);
        }
        let mut z = 0.0;
        for j in 0..n {
            let e = (src[base + j * stride] - hi).exp();
            dst[base + j * stride] = e;
            z += e;
        }
        for j in 0..n {
            dst[base + j * stride] /= z;
        }
    });
    out
}

/// Centered, sharpened teacher distribution: softmax of (Q - xi) / tau_t.
/// Operates on plain tensors — the result is a constant from the student
/// tape's point of view, so no gradient can reach Q or the center.
pub fn teacher_cls_softmax(
    q: &Tensor,
    center: &CenterState,
    tau_t: f64,
    axis: ClSoftmaxAxis,
) -> Result<Tensor, DistillError> {
    if q.shape() != center.xi.shape() {
        return Err(DistillError::ShapeMismatch(format!(
            "teacher CLS {:?} vs center {:?}",
            q.shape(),
            center.xi.shape()
        )));
    }
    let xi = center.xi.data();
    let mut shifted = q.clone();
    for (v, c) in shifted.data_mut().iter_mut().zip(xi) {
        *v = (*v - c) / tau_t;
    }
    Ok(tensor_softmax(&shifted, axis_index(q.shape(), axis)))
}

/// Fold this batch's teacher CLS outputs into the running center:
/// xi <- beta * xi + (1 - beta) * mean(Q_batch).
pub fn update_center(center: &mut CenterState, q_batch: &[Tensor]) -> Result<(), DistillError> {
    if q_batch.is_empty() {
        return Err(DistillError::EmptyBatch);
    }
    for q in q_batch {
        if q.shape() != center.xi.shape() {
            return Err(DistillError::ShapeMismatch(format!(
                "center {:?} vs batch item {:?}",
                center.xi.shape(),
                q.shape()
            )));
        }
    }
    let scale = (1.0 - center.beta) / q_batch.len() as f64;
    let beta = center.beta;
    let xi = center.xi.data_mut();
    for v in xi.iter_mut() {
        *v *= beta;
    }
    for q in q_batch {
        for (v, qv) in xi.iter_mut().zip(q.data()) {
            *v += scale * qv;
        }
    }
    Ok(())
}

/// Cross-entropy of the student distribution against the (constant) teacher
/// distribution, summed over all CLS tokens and channels. Gradient flows
/// only through `p_hat`.
pub fn cl_loss(tape: &mut Tape, p_hat: NodeId, q_hat: &Tensor) -> Result<NodeId, DistillError> {
    if tape.shape(p_hat) != q_hat.shape() {
        return Err(DistillError::ShapeMismatch(format!(
            "student {:?} vs teacher {:?}",
            tape.shape(p_hat),
            q_hat.shape()
        )));
    }
    let logp = tape.log(p_hat);
    let q = tape.constant(q_hat.clone());
    let prod = tape.mul(logp, q)?;
    let s = tape.sum_all(prod);
    Ok(tape.scale(s, -1.0))
}

/// alpha * mnm + (1 - alpha) * cl.
pub fn total_loss(
    tape: &mut Tape,
    mnm: NodeId,
    cl: NodeId,
    alpha: f64,
) -> Result<NodeId, DistillError> {
    let a = tape.scale(mnm, alpha);
    let b = tape.scale(cl, 1.0 - alpha);
    Ok(tape.add(a, b)?)
}

/// theta_t <- lambda * theta_t + (1 - lambda) * theta_s, elementwise over
/// every named parameter including the heads.
pub fn ema_update(state: &mut StudentTeacherState, lambda: f64) -> Result<(), DistillError> {
    if !state.student.same_structure(&state.teacher) {
        return Err(DistillError::ShapeMismatch(
            "student/teacher parameter structures differ".into(),
        ));
    }
    if lambda == 1.0 {
        return Ok(());
    }
    for idx in 0..state.student.len() {
        let s = state.student.value(idx).data().to_vec();
        let t = state.teacher.value_mut(idx);
        for (tv, sv) in t.data_mut().iter_mut().zip(&s) {
            *tv = lambda * *tv + (1.0 - lambda) * sv;
        }
    }
    Ok(())
}

/// Linear warmup from zero to `base` over the first `warmup_fraction` of
/// steps, then cosine decay back to zero. Shared by pretraining and the
/// downstream trainers.
pub fn warmup_cosine_lr(step: usize, total_steps: usize, base: f64, warmup_fraction: f64) -> f64 {
    let warmup = (warmup_fraction * total_steps as f64).floor() as usize;
    if step < warmup {
        base * step as f64 / warmup as f64
    } else {
        let span = (total_steps - warmup).max(1) as f64;
        let t = (step - warmup) as f64 / span;
        base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Learning rate (linear warmup, then cosine decay to zero) and EMA momentum
/// (cosine from lambda_start to lambda_end) at a given step.
pub fn cosine_schedules(
    step: usize,
    total_steps: usize,
    cfg: &DistillConfig,
) -> Result<(f64, f64), DistillError> {
    if step >= total_steps {
        return Err(DistillError::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    let lr = warmup_cosine_lr(step, total_steps, cfg.base_lr, cfg.warmup_fraction);
    let c = (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos()) / 2.0;
    let lambda = cfg.lambda_end + (cfg.lambda_start - cfg.lambda_end) * c;
    Ok((lr, lambda))
}

/// Loss record for one optimizer step (one CSV row).
#[derive(Debug, Clone, Serialize)]
pub struct StepLosses {
    pub step: usize,
    pub lr: f64,
    pub lambda: f64,
    pub mnm: f64,
    pub cl: f64,
    pub total: f64,
    /// Across-batch standard deviation of the teacher's CLS output
    /// distributions (post centering and sharpening), averaged over
    /// (token, channel) entries. A collapse indicator, not a loss: when the
    /// teacher degenerates to an input-independent distribution this drops
    /// to zero while the raw activations can still vary through the
    /// residual stream.
    pub teacher_cls_std: f64,
}

/// Stack per-sequence [N, D] tensors into [B, N, D].
fn stack(items: &[Tensor]) -> Tensor {
    let inner = items[0].shape().to_vec();
    let mut shape = vec![items.len()];
    shape.extend_from_slice(&inner);
    let mut data = Vec::with_capacity(items.len() * items[0].numel());
    for t in items {
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data)
}

fn batch_std(q_batch: &[Tensor]) -> f64 {
    if q_batch.len() < 2 {
        return 0.0;
    }
    let n = q_batch[0].numel();
    let b = q_batch.len() as f64;
    let mut acc = 0.0;
    for e in 0..n {
        let mean: f64 = q_batch.iter().map(|q| q.data()[e]).sum::<f64>() / b;
        let var: f64 = q_batch
            .iter()
            .map(|q| (q.data()[e] - mean).powi(2))
            .sum::<f64>()
            / b;
        acc += var.sqrt();
    }
    acc / n as f64
}

/// Run the teacher body in inference mode on a scratch tape and return the
/// raw per-sequence CLS outputs ([K, I] each). The tape is dropped without
/// backward, so nothing here can receive gradient.
fn teacher_cls_outputs(
    input: &Tensor,
    params: &ParamStore,
    mixer_cfg: &MixerConfig,
    l: usize,
    k: usize,
) -> Result<Vec<Tensor>, DistillError> {
    let batch = input.shape()[0];
    let n = l + k;
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let mut ctx = ForwardCtx::inference();
    let out = mixer_forward(&mut tape, params, mixer_cfg, x, &mut ctx)?;
    let channels = *tape.shape(out).last().unwrap();
    let data = tape.value(out).data();
    let mut per_seq = Vec::with_capacity(batch);
    for b in 0..batch {
        let start = (b * n + l) * channels;
        per_seq.push(Tensor::new(
            vec![k, channels],
            data[start..start + k * channels].to_vec(),
        ));
    }
    Ok(per_seq)
}

/// Materialized views and stacked inputs for one batch, reusable across the
/// trainer and its gradient checks.
pub struct BatchViews {
    pub u_views: Vec<EncodedView>,
    /// [B, L+K, D] student input.
    pub u_input: Tensor,
    /// [B, L+K, D] teacher input; absent when the contrastive branch is off.
    pub v_input: Option<Tensor>,
    pub seq_len: usize,
}

/// Build both augmented views for every sequence in the batch and stack them
/// with blank CLS rows appended. The per-sample randomness is derived from
/// each pipeline's seed and the step index, so repeated epochs see fresh
/// augmentations while the whole run stays reproducible.
pub fn build_batch_views(
    batch: &[NucleotideSequence],
    u_pipeline: &ViewPipeline,
    v_pipeline: &ViewPipeline,
    cfg: &DistillConfig,
    step: usize,
) -> Result<BatchViews, DistillError> {
    if batch.is_empty() {
        return Err(DistillError::EmptyBatch);
    }
    let seq_len = batch[0].len();
    for seq in batch {
        if seq.len() != seq_len {
            return Err(DistillError::RaggedBatch {
                expected: seq_len,
                got: seq.len(),
            });
        }
    }
    let k = cfg.cls_tokens;
    let salt = splitmix64(step as u64 ^ 0x7374_6570); // "step"
    let mut u_views = Vec::with_capacity(batch.len());
    let mut u_stack = Vec::with_capacity(batch.len());
    let mut v_stack = Vec::with_capacity(batch.len());
    for seq in batch {
        let u = u_pipeline.apply_seeded(seq, u_pipeline.seed ^ salt)?;
        u_stack.push(append_cls(&u, k));
        u_views.push(u);
        if cfg.contrastive {
            let v = v_pipeline.apply_seeded(seq, v_pipeline.seed ^ salt)?;
            v_stack.push(append_cls(&v, k));
        }
    }
    Ok(BatchViews {
        u_views,
        u_input: stack(&u_stack),
        v_input: if cfg.contrastive {
            Some(stack(&v_stack))
        } else {
            None
        },
        seq_len,
    })
}

/// Student forward + combined loss for prepared views, on the caller's tape.
/// `q_hats` are the (already centered and softmaxed) teacher targets, one
/// [K, I] tensor per sequence; pass an empty slice when the contrastive
/// branch is off. Returns (mnm, cl, total) nodes.
pub fn student_loss(
    tape: &mut Tape,
    views: &BatchViews,
    q_hats: &[Tensor],
    params: &ParamStore,
    mixer_cfg: &MixerConfig,
    cfg: &DistillConfig,
    ctx: &mut ForwardCtx,
) -> Result<(NodeId, NodeId, NodeId), DistillError> {
    let batch = views.u_views.len();
    let l = views.seq_len;
    let k = cfg.cls_tokens;
    let n = l + k;
    let inv_b = 1.0 / batch as f64;

    let x = tape.constant(views.u_input.clone());
    let out = mixer_forward(tape, params, mixer_cfg, x, ctx)?;
    let channels = *tape.shape(out).last().unwrap();
    let flat = tape.reshape(out, vec![batch * n, channels])?;

    // Reconstruction term: gather every surviving masked row across the
    // batch in one pass; per-row weights fold the per-sequence reduction in.
    let mut rows = Vec::new();
    let mut target_data = Vec::new();
    for (b, view) in views.u_views.iter().enumerate() {
        let (vrows, targets, weight) =
            mnm_rows(view, cfg.mnm_reduction, cfg.include_n_targets);
        for (r, t) in vrows.iter().zip(&targets) {
            rows.push(b * n + r);
            target_data.extend(t.iter().map(|x| x * weight * inv_b));
        }
    }
    let mnm = if rows.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let wt = Tensor::new(vec![rows.len(), ONE_HOT_WIDTH], target_data);
        masked_rows_ce(tape, flat, &rows, wt, params)?
    };

    // Contrastive term: CLS rows only, student sharpened and scored against
    // the constant teacher targets, averaged over the batch.
    let cl = if cfg.contrastive {
        let mut cls_rows = Vec::with_capacity(batch * k);
        for b in 0..batch {
            cls_rows.extend((0..k).map(|j| b * n + l + j));
        }
        let p = tape.gather_rows(flat, &cls_rows)?;
        let p = tape.reshape(p, vec![batch, k, channels])?;
        let p_hat = student_cls_softmax(tape, p, cfg.tau_s, cfg.cl_softmax_axis)?;
        let q = stack(q_hats);
        let raw = cl_loss(tape, p_hat, &q)?;
        tape.scale(raw, inv_b)
    } else {
        tape.constant(Tensor::scalar(0.0))
    };

    total_loss(tape, mnm, cl, cfg.alpha).map(|t| (mnm, cl, t))
}

/// One full optimizer step: augment, forward both networks, combined loss,
/// backprop into the student only, optimizer update, EMA teacher update,
/// center update. `total_steps` drives the schedules; the state's own step
/// counter picks the position on them.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    batch: &[NucleotideSequence],
    u_pipeline: &ViewPipeline,
    v_pipeline: &ViewPipeline,
    state: &mut StudentTeacherState,
    center: &mut CenterState,
    optimizer: &mut AdamW,
    mixer_cfg: &MixerConfig,
    cfg: &DistillConfig,
    total_steps: usize,
) -> Result<StepLosses, DistillError> {
    cfg.validate()?;
    let step = state.step;
    let (lr, lambda) = cosine_schedules(step, total_steps, cfg)?;
    let views = build_batch_views(batch, u_pipeline, v_pipeline, cfg, step)?;

    // Teacher pass first: its CLS outputs become constants for the student.
    let mut q_raw = Vec::new();
    let mut q_hats = Vec::new();
    if let Some(v_input) = &views.v_input {
        q_raw = teacher_cls_outputs(
            v_input,
            &state.teacher,
            mixer_cfg,
            views.seq_len,
            cfg.cls_tokens,
        )?;
        let zero_center;
        let effective = if cfg.centering {
            &*center
        } else {
            zero_center = CenterState {
                xi: Tensor::zeros(center.xi.shape().to_vec()),
                beta: center.beta,
            };
            &zero_center
        };
        for q in &q_raw {
            q_hats.push(teacher_cls_softmax(q, effective, cfg.tau_t, cfg.cl_softmax_axis)?);
        }
    }

    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::training(splitmix64(cfg.seed ^ (step as u64).wrapping_mul(0x9e3779b1)));
    let (mnm, cl, total) = student_loss(
        &mut tape,
        &views,
        &q_hats,
        &state.student,
        mixer_cfg,
        cfg,
        &mut ctx,
    )?;
    let mnm_v = tape.value(mnm).item();
    let cl_v = tape.value(cl).item();
    let total_v = tape.value(total).item();

    state.student.zero_grads();
    tape.backward(total, &mut state.student)?;
    optimizer.step(&mut state.student, lr);
    ema_update(state, lambda)?;
    if cfg.contrastive && cfg.centering {
        update_center(center, &q_raw)?;
    }
    state.step += 1;

    Ok(StepLosses {
        step,
        lr,
        lambda,
        mnm: mnm_v,
        cl: cl_v,
        total: total_v,
        teacher_cls_std: batch_std(&q_hats),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{mask_random, standard_u_pipeline, standard_v_pipeline};
    use crate::ndiff::grad_check;
    use crate::seqcore::encode_one_hot;

    fn seq(id: &str, bases: &str) -> NucleotideSequence {
        NucleotideSequence::new(id, bases).unwrap()
    }

    fn toy_mixer(max_tokens: usize) -> MixerConfig {
        MixerConfig {
            channels: 8,
            hidden: 16,
            num_layers: 1,
            max_tokens,
            dropout: 0.0,
            layer_norm: true,
        }
    }

    fn toy_cfg(k: usize) -> DistillConfig {
        DistillConfig {
            cls_tokens: k,
            base_lr: 1e-3,
            batch_size: 4,
            ..DistillConfig::reference_default()
        }
    }

    /// A parameter store holding only an identity reconstruction head, so
    /// hand-set "outputs" pass through to the logits unchanged.
    fn identity_head() -> ParamStore {
        let mut store = ParamStore::new();
        let mut eye = Tensor::zeros(vec![ONE_HOT_WIDTH, ONE_HOT_WIDTH]);
        for d in 0..ONE_HOT_WIDTH {
            eye.data_mut()[d * ONE_HOT_WIDTH + d] = 1.0;
        }
        store.insert("head.mnm.w", eye);
        store.insert("head.mnm.b", Tensor::zeros(vec![ONE_HOT_WIDTH]));
        store
    }

    #[test]
    fn append_cls_blank_rows() {
        let view = EncodedView::unmasked(encode_one_hot(&seq("s", "ACGT")));
        let x = append_cls(&view, 3);
        assert_eq!(x.shape(), &[7, 5]);
        // First L rows unchanged, appended rows all zero.
        assert_eq!(&x.data()[..20], view.matrix.data());
        assert!(x.data()[20..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mnm_loss_matches_hand_computed_cross_entropy() {
        // Two masked positions with hand-set logits routed through an
        // identity head: CE_j = logsumexp(z_j) - z_j[target].
        let m = encode_one_hot(&seq("s", "ACGT"));
        let mut view = mask_random(&m, 0.5, 7).unwrap();
        view.masked_positions = vec![0, 2];
        view.mnm_targets = vec![[1.0, 0.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0, 0.0]];
        let store = identity_head();
        let z = vec![
            1.0, 0.0, 0.0, 0.0, 0.0, // row 0 (masked, target A)
            9.0, 9.0, 9.0, 9.0, 9.0, // row 1 (unmasked, ignored)
            0.0, 2.0, 0.0, 0.0, 0.0, // row 2 (masked, target C)
            9.0, 9.0, 9.0, 9.0, 9.0, // row 3 (unmasked, ignored)
        ];
        let mut tape = Tape::new();
        let u = tape.leaf(Tensor::new(vec![4, 5], z));
        let loss = mnm_loss(&mut tape, u, &view, &store, MnmReduction::Sum, true).unwrap();
        let lse1 = (1f64.exp() + 4.0).ln();
        let lse2 = (2f64.exp() + 4.0).ln();
        let expected = (lse1 - 1.0) + (lse2 - 2.0);
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn mnm_mean_reduction_divides_by_mask_count() {
        let m = encode_one_hot(&seq("s", "ACGT"));
        let mut view = mask_random(&m, 0.5, 7).unwrap();
        view.masked_positions = vec![0, 2];
        view.mnm_targets = vec![[1.0, 0.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0, 0.0]];
        let store = identity_head();
        let z = Tensor::zeros(vec![4, 5]);
        let mut t1 = Tape::new();
        let u1 = t1.leaf(z.clone());
        let sum = mnm_loss(&mut t1, u1, &view, &store, MnmReduction::Sum, true).unwrap();
        let mut t2 = Tape::new();
        let u2 = t2.leaf(z);
        let mean = mnm_loss(&mut t2, u2, &view, &store, MnmReduction::Mean, true).unwrap();
        assert!((t1.value(sum).item() / 2.0 - t2.value(mean).item()).abs() < 1e-12);
    }

    #[test]
    fn mnm_empty_mask_and_n_exclusion() {
        let m = encode_one_hot(&seq("s", "ACGN"));
        let view = EncodedView::unmasked(m.clone());
        let store = identity_head();
        let mut tape = Tape::new();
        let u = tape.leaf(Tensor::zeros(vec![4, 5]));
        let loss = mnm_loss(&mut tape, u, &view, &store, MnmReduction::Sum, true).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);

        // One masked N position contributes iff N targets are included.
        let mut view = mask_random(&m, 0.25, 1).unwrap();
        view.masked_positions = vec![3];
        view.mnm_targets = vec![[0.0, 0.0, 0.0, 0.0, 1.0]];
        let mut t1 = Tape::new();
        let u1 = t1.leaf(Tensor::zeros(vec![4, 5]));
        let with_n = mnm_loss(&mut t1, u1, &view, &store, MnmReduction::Sum, true).unwrap();
        assert!((t1.value(with_n).item() - 5f64.ln()).abs() < 1e-12);
        let mut t2 = Tape::new();
        let u2 = t2.leaf(Tensor::zeros(vec![4, 5]));
        let without_n = mnm_loss(&mut t2, u2, &view, &store, MnmReduction::Sum, false).unwrap();
        assert_eq!(t2.value(without_n).item(), 0.0);
    }

    #[test]
    fn student_softmax_closed_form_and_normalization() {
        let tau_s = 0.1;
        // K=2, I=2; first channel equal logits -> uniform, second channel
        // (0, tau_s * ln 3) -> (0.25, 0.75).
        let p = Tensor::new(vec![2, 2], vec![0.3, 0.0, 0.3, tau_s * 3f64.ln()]);
        let mut tape = Tape::new();
        let pn = tape.leaf(p);
        let p_hat = student_cls_softmax(&mut tape, pn, tau_s, ClSoftmaxAxis::Tokens).unwrap();
        let v = tape.value(p_hat).data();
        assert!((v[0] - 0.5).abs() < 1e-12 && (v[2] - 0.5).abs() < 1e-12);
        assert!((v[1] - 0.25).abs() < 1e-12 && (v[3] - 0.75).abs() < 1e-12);
        // Each channel's column sums to 1.
        assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
        assert!((v[1] + v[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn teacher_softmax_centering_and_shift_invariance() {
        let tau_t = 0.04;
        let q = Tensor::new(vec![2, 2], vec![0.1, 0.4, 0.3, 0.2]);
        // Zero center reduces to a plain temperature softmax.
        let zero = CenterState::zeros(2, 2, 0.9);
        let q_hat = teacher_cls_softmax(&q, &zero, tau_t, ClSoftmaxAxis::Tokens).unwrap();
        for i in 0..2 {
            let a = q.data()[i] / tau_t;
            let b = q.data()[2 + i] / tau_t;
            let z = a.exp() + b.exp();
            assert!((q_hat.data()[i] - a.exp() / z).abs() < 1e-12);
            assert!((q_hat.data()[2 + i] - b.exp() / z).abs() < 1e-12);
        }
        // Adding the same per-channel constant to Q and the center together
        // leaves the result unchanged.
        let mut q2 = q.clone();
        let mut center = CenterState::zeros(2, 2, 0.9);
        for k in 0..2 {
            for i in 0..2 {
                q2.data_mut()[k * 2 + i] += 7.0 * (i as f64 + 1.0);
                center.xi.data_mut()[k * 2 + i] = 7.0 * (i as f64 + 1.0);
            }
        }
        let shifted = teacher_cls_softmax(&q2, &center, tau_t, ClSoftmaxAxis::Tokens).unwrap();
        for (a, b) in shifted.data().iter().zip(q_hat.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn center_update_edge_momenta_and_closed_form() {
        // beta ~ 1 keeps xi; beta = tiny jumps to the batch mean. The
        // recursion under a constant batch matches its geometric closed form
        // to machine precision over 100 steps.
        let qs = vec![
            Tensor::new(vec![1, 2], vec![2.0, -4.0]),
            Tensor::new(vec![1, 2], vec![4.0, 0.0]),
        ];
        let c_star = [3.0, -2.0];

        let mut c = CenterState {
            xi: Tensor::new(vec![1, 2], vec![10.0, 5.0]),
            beta: 0.9,
        };
        let xi0 = [10.0, 5.0];
        for n in 1..=100 {
            update_center(&mut c, &qs).unwrap();
            let b = 0.9f64.powi(n);
            for e in 0..2 {
                let expected = c_star[e] + b * (xi0[e] - c_star[e]);
                assert!((c.xi.data()[e] - expected).abs() < 1e-12);
            }
        }

        let mut jump = CenterState {
            xi: Tensor::new(vec![1, 2], vec![10.0, 5.0]),
            beta: 1e-300,
        };
        update_center(&mut jump, &qs).unwrap();
        for e in 0..2 {
            assert!((jump.xi.data()[e] - c_star[e]).abs() < 1e-12);
        }

        assert!(matches!(
            update_center(&mut c, &[]),
            Err(DistillError::EmptyBatch)
        ));
    }

    #[test]
    fn cl_loss_oracles() {
        // q one-hot per channel, p uniform over K -> I * ln K.
        let k = 4;
        let i = 3;
        let q = Tensor::new(
            vec![k, i],
            (0..k * i)
                .map(|e| if e / i == e % i { 1.0 } else { 0.0 })
                .collect(),
        );
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(vec![k, i], vec![1.0 / k as f64; k * i]));
        let loss = cl_loss(&mut tape, p, &q).unwrap();
        let expected = i as f64 * (k as f64).ln();
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);

        // p = q -> cross-entropy equals the entropy of q.
        let soft = tensor_softmax(&Tensor::new(vec![2, 2], vec![0.3, 1.0, -0.5, 0.2]), 0);
        let entropy: f64 = -soft.data().iter().map(|&v| v * v.ln()).sum::<f64>();
        let mut tape = Tape::new();
        let p = tape.leaf(soft.clone());
        let loss = cl_loss(&mut tape, p, &soft).unwrap();
        assert!((tape.value(loss).item() - entropy).abs() < 1e-12);
    }

    #[test]
    fn total_loss_is_linear_in_both_terms() {
        let eval = |m: f64, c: f64, a: f64| {
            let mut tape = Tape::new();
            let mn = tape.constant(Tensor::scalar(m));
            let cn = tape.constant(Tensor::scalar(c));
            let t = total_loss(&mut tape, mn, cn, a).unwrap();
            tape.value(t).item()
        };
        assert_eq!(eval(3.0, 5.0, 1.0), 3.0);
        assert_eq!(eval(3.0, 5.0, 0.0), 5.0);
        assert!((eval(3.0, 5.0, 0.5) - 4.0).abs() < 1e-15);
        // Linearity: L(2m, 2c) = 2 L(m, c).
        assert!((eval(6.0, 10.0, 0.3) - 2.0 * eval(3.0, 5.0, 0.3)).abs() < 1e-12);
    }

    #[test]
    fn ema_endpoints_and_convexity() {
        let cfg = toy_mixer(16);
        let mut state = StudentTeacherState::init(&cfg, 11).unwrap();
        // Perturb the student so the two sets differ.
        for idx in 0..state.student.len() {
            for v in state.student.value_mut(idx).data_mut() {
                *v += 0.5;
            }
        }
        let before = state.teacher.entries();

        ema_update(&mut state, 1.0).unwrap();
        for (idx, (_, t)) in before.iter().enumerate() {
            assert_eq!(state.teacher.value(idx).data(), t.data());
        }

        let mut half = state.clone();
        ema_update(&mut half, 0.7).unwrap();
        for idx in 0..half.teacher.len() {
            let t0 = before[idx].1.data();
            let s = half.student.value(idx).data();
            for (e, tv) in half.teacher.value(idx).data().iter().enumerate() {
                let (lo, hi) = if t0[e] <= s[e] { (t0[e], s[e]) } else { (s[e], t0[e]) };
                assert!(*tv >= lo - 1e-15 && *tv <= hi + 1e-15);
                assert!((tv - (0.7 * t0[e] + 0.3 * s[e])).abs() < 1e-15);
            }
        }

        ema_update(&mut state, 0.0).unwrap();
        for idx in 0..state.teacher.len() {
            assert_eq!(state.teacher.value(idx).data(), state.student.value(idx).data());
        }
    }

    #[test]
    fn schedule_endpoints_and_monotone_momentum() {
        let cfg = toy_cfg(2);
        let total = 1000;
        let (lr0, l0) = cosine_schedules(0, total, &cfg).unwrap();
        assert_eq!(lr0, 0.0);
        assert_eq!(l0, cfg.lambda_start);
        let (_, l_last) = cosine_schedules(total - 1, total, &cfg).unwrap();
        assert!((l_last - cfg.lambda_end).abs() < 1e-4);
        // LR peaks at the end of warmup, momentum rises monotonically.
        let warmup = (cfg.warmup_fraction * total as f64) as usize;
        let (peak, _) = cosine_schedules(warmup, total, &cfg).unwrap();
        assert!((peak - cfg.base_lr).abs() < 1e-15);
        let mut prev = l0;
        for step in 1..total {
            let (lr, l) = cosine_schedules(step, total, &cfg).unwrap();
            assert!(l >= prev);
            assert!(lr >= 0.0 && lr <= cfg.base_lr + 1e-15);
            prev = l;
        }
        assert!(matches!(
            cosine_schedules(total, total, &cfg),
            Err(DistillError::StepOutOfRange { .. })
        ));
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let good = DistillConfig::reference_default();
        good.validate().unwrap();
        for bad in [
            DistillConfig { alpha: 0.0, ..good.clone() },
            DistillConfig { alpha: 1.0, ..good.clone() }, // contrastive still on
            DistillConfig { tau_t: 0.2, ..good.clone() }, // not below tau_s
            DistillConfig { cls_tokens: 0, ..good.clone() },
            DistillConfig { beta: 1.0, ..good.clone() },
            DistillConfig { lambda_start: 0.0, ..good.clone() },
            DistillConfig { warmup_fraction: 1.0, ..good.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
        DistillConfig::mnm_only().validate().unwrap();
    }

    fn toy_batch(l: usize, count: usize) -> Vec<NucleotideSequence> {
        let bases = ["ACGT", "TTAG", "GGCA", "CATG"];
        (0..count)
            .map(|i| {
                let b: String = (0..l).map(|j| {
                    bases[i % 4].as_bytes()[j % 4] as char
                }).collect();
                seq(&format!("s{i}"), &b)
            })
            .collect()
    }

    #[test]
    fn lambda_one_leaves_teacher_bitwise_unchanged() {
        let mixer_cfg = toy_mixer(12);
        let cfg = DistillConfig {
            lambda_start: 1.0,
            lambda_end: 1.0,
            ..toy_cfg(2)
        };
        let mut state = StudentTeacherState::init(&mixer_cfg, 3).unwrap();
        let mut center = CenterState::zeros(2, mixer_cfg.channels, cfg.beta);
        let mut opt = AdamW::new(&state.student, cfg.weight_decay);
        let before = state.teacher.entries();
        train_step(
            &toy_batch(8, 4),
            &standard_u_pipeline(1),
            &standard_v_pipeline(2),
            &mut state,
            &mut center,
            &mut opt,
            &mixer_cfg,
            &cfg,
            100,
        )
        .unwrap();
        for (idx, (_, t)) in before.iter().enumerate() {
            assert_eq!(state.teacher.value(idx).data(), t.data());
        }
    }

    #[test]
    fn no_gradient_reaches_the_teacher() {
        let mixer_cfg = toy_mixer(12);
        let cfg = toy_cfg(2);
        let mut state = StudentTeacherState::init(&mixer_cfg, 4).unwrap();
        let mut center = CenterState::zeros(2, mixer_cfg.channels, cfg.beta);
        let mut opt = AdamW::new(&state.student, cfg.weight_decay);
        state.teacher.zero_grads();
        for _ in 0..3 {
            train_step(
                &toy_batch(8, 4),
                &standard_u_pipeline(1),
                &standard_v_pipeline(2),
                &mut state,
                &mut center,
                &mut opt,
                &mixer_cfg,
                &cfg,
                100,
            )
            .unwrap();
        }
        // The student accumulated real gradient; the teacher recorded
        // exactly zero everywhere.
        let student_norm: f64 = (0..state.student.len())
            .flat_map(|i| state.student.grad(i).data().to_vec())
            .map(|g| g * g)
            .sum();
        assert!(student_norm > 0.0);
        for idx in 0..state.teacher.len() {
            assert!(state.teacher.grad(idx).data().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn teacher_tracks_student_as_convex_combination() {
        let mixer_cfg = toy_mixer(12);
        let cfg = DistillConfig {
            lambda_start: 0.5,
            lambda_end: 0.5,
            ..toy_cfg(2)
        };
        let mut state = StudentTeacherState::init(&mixer_cfg, 5).unwrap();
        let mut center = CenterState::zeros(2, mixer_cfg.channels, cfg.beta);
        let mut opt = AdamW::new(&state.student, cfg.weight_decay);
        let before = state.teacher.entries();
        train_step(
            &toy_batch(8, 4),
            &standard_u_pipeline(1),
            &standard_v_pipeline(2),
            &mut state,
            &mut center,
            &mut opt,
            &mixer_cfg,
            &cfg,
            100,
        )
        .unwrap();
        for idx in 0..state.teacher.len() {
            let t0 = before[idx].1.data();
            let s = state.student.value(idx).data();
            for (e, tv) in state.teacher.value(idx).data().iter().enumerate() {
                let (lo, hi) = if t0[e] <= s[e] { (t0[e], s[e]) } else { (s[e], t0[e]) };
                assert!(*tv >= lo - 1e-12 && *tv <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn loss_decreases_on_a_fixed_micro_batch() {
        let mixer_cfg = MixerConfig {
            channels: 8,
            hidden: 16,
            num_layers: 1,
            max_tokens: 40,
            dropout: 0.0,
            layer_norm: true,
        };
        let cfg = DistillConfig {
            base_lr: 1e-3,
            warmup_fraction: 0.0,
            ..toy_cfg(2)
        };
        let mut state = StudentTeacherState::init(&mixer_cfg, 6).unwrap();
        let mut center = CenterState::zeros(2, mixer_cfg.channels, cfg.beta);
        let mut opt = AdamW::new(&state.student, cfg.weight_decay);
        let batch = toy_batch(32, 4);
        let mut losses = Vec::new();
        for _ in 0..50 {
            // Freeze the augmentation draw by resetting the step the view
            // builder sees; schedules still need a fresh step, so run them
            // on a long horizon where LR is near-constant.
            let rec = train_step(
                &batch,
                &standard_u_pipeline(1),
                &standard_v_pipeline(2),
                &mut state,
                &mut center,
                &mut opt,
                &mixer_cfg,
                &cfg,
                100_000,
            )
            .unwrap();
            losses.push(rec.total);
        }
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[40..].iter().sum::<f64>() / 10.0;
        assert!(
            tail < head,
            "smoothed loss did not decrease: head {head:.4} tail {tail:.4}"
        );
    }

    #[test]
    fn student_gradients_match_finite_differences() {
        let mixer_cfg = MixerConfig {
            channels: 6,
            hidden: 6,
            num_layers: 1,
            max_tokens: 10,
            dropout: 0.0,
            layer_norm: true,
        };
        let cfg = toy_cfg(2);
        let state = StudentTeacherState::init(&mixer_cfg, 7).unwrap();
        let center = CenterState::zeros(2, mixer_cfg.channels, cfg.beta);
        let batch = toy_batch(8, 2);
        let views = build_batch_views(
            &batch,
            &standard_u_pipeline(1),
            &standard_v_pipeline(2),
            &cfg,
            0,
        )
        .unwrap();
        let q_raw = teacher_cls_outputs(
            views.v_input.as_ref().unwrap(),
            &state.teacher,
            &mixer_cfg,
            8,
            2,
        )
        .unwrap();
        let q_hats: Vec<Tensor> = q_raw
            .iter()
            .map(|q| teacher_cls_softmax(q, &center, cfg.tau_t, cfg.cl_softmax_axis).unwrap())
            .collect();

        let mut params = state.student.clone();
        let report = grad_check(
            &mut params,
            |p, tape| {
                let mut ctx = ForwardCtx::inference();
                let (_, _, total) =
                    student_loss(tape, &views, &q_hats, p, &mixer_cfg, &cfg, &mut ctx)
                        .map_err(|e| NdiffError::ShapeMismatch {
                            primitive: "student_loss",
                            detail: e.to_string(),
                        })?;
                Ok(total)
            },
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(
            report.passed,
            "worst mismatch: {:?}",
            report.worst()
        );
    }
}
