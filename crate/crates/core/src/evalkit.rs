//! Downstream evaluation of a pretrained backbone: linear probing with
//! frozen parameters, full fine-tuning with a lightweight head, seeded
//! dataset splits, and the reported metrics (top-1 accuracy, Matthews
//! correlation, macro F1).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::{append_cls, warmup_cosine_lr, DistillError};
use crate::augment::EncodedView;
use crate::mixer::{mixer_forward, ForwardCtx, MixerConfig, MixerError};
use crate::ndiff::{AdamW, NdiffError, NodeId, ParamStore, Tape, Tensor};
use crate::seqcore::{encode_one_hot, LabeledDataset, NucleotideSequence};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid probe config: {0}")]
    BadConfig(String),
    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),
    #[error("empty confusion matrix")]
    EmptyConfusion,
    #[error("split file {path}: {msg}")]
    SplitFile { path: String, msg: String },
    #[error(transparent)]
    Mixer(#[from] MixerError),
    #[error(transparent)]
    Ndiff(#[from] NdiffError),
    #[error(transparent)]
    Distill(#[from] DistillError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    #[default]
    LinearProbe,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    #[default]
    Linear,
    Mlp2,
}

/// Which pooled output feeds the classifier: mean of the K CLS rows, mean
/// of the L position rows, or both concatenated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    #[default]
    ClsMean,
    PosMean,
    ConcatBoth,
}

/// Which half of the pretrained pair serves downstream tasks. The teacher
/// is the default; it averages the student's trajectory and evaluates
/// slightly better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Network {
    #[default]
    Teacher,
    Student,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub mode: ProbeMode,
    pub head: HeadKind,
    pub mlp_hidden: usize,
    pub representation: Representation,
    pub network: Network,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            mode: ProbeMode::LinearProbe,
            head: HeadKind::Linear,
            mlp_hidden: 64,
            representation: Representation::ClsMean,
            network: Network::Teacher,
            epochs: 20,
            batch_size: 32,
            lr: 1e-2,
            weight_decay: 0.1,
            warmup_fraction: 0.3,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.mlp_hidden == 0 {
            return Err(EvalError::BadConfig("mlp_hidden must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(EvalError::BadConfig("batch_size must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(EvalError::BadConfig(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(EvalError::BadConfig(format!(
                "warmup_fraction must lie in [0, 1), got {}",
                self.warmup_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub mode: ProbeMode,
    pub network: Network,
    pub representation: Representation,
    pub top1_accuracy: f64,
    pub mcc: f64,
    pub f1_macro: f64,
    /// Accuracy of always predicting the test split's most common class.
    pub majority_baseline: f64,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<u64>>,
}

/// Seeded, persisted 80/10/10 index partition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn seeded_split(n: usize, seed: u64) -> DatasetSplit {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_train = (n as f64 * 0.8).round() as usize;
    let n_val = (n as f64 * 0.1).round() as usize;
    DatasetSplit {
        seed,
        train: idx[..n_train].to_vec(),
        val: idx[n_train..n_train + n_val].to_vec(),
        test: idx[n_train + n_val..].to_vec(),
    }
}

/// Reload a previously persisted split, or create and persist one. Keeps
/// repeated runs over the same data file comparable.
pub fn load_or_create_split(
    path: impl AsRef<Path>,
    n: usize,
    seed: u64,
) -> Result<DatasetSplit, EvalError> {
    let path = path.as_ref();
    let err = |msg: String| EvalError::SplitFile {
        path: path.display().to_string(),
        msg,
    };
    if path.exists() {
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let split: DatasetSplit =
            serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if split.train.len() + split.val.len() + split.test.len() != n {
            return Err(err(format!(
                "split covers {} records but the dataset has {n}",
                split.train.len() + split.val.len() + split.test.len()
            )));
        }
        return Ok(split);
    }
    let split = seeded_split(n, seed);
    let text = serde_json::to_string_pretty(&split).expect("serializable split");
    std::fs::write(path, text).map_err(|e| err(e.to_string()))?;
    Ok(split)
}

fn feature_width(channels: usize, repr: Representation) -> usize {
    match repr {
        Representation::ClsMean | Representation::PosMean => channels,
        Representation::ConcatBoth => 2 * channels,
    }
}

fn pool_rows(out: &[f64], base: usize, count: usize, channels: usize) -> Vec<f64> {
    let mut acc = vec![0.0; channels];
    for r in 0..count {
        let start = (base + r) * channels;
        for (a, v) in acc.iter_mut().zip(&out[start..start + channels]) {
            *a += v;
        }
    }
    for a in &mut acc {
        *a /= count as f64;
    }
    acc
}

/// Forward a batch of unaugmented sequences through the chosen network in
/// inference mode and pool per the representation. Returns [B, F].
pub fn extract_representations(
    seqs: &[&NucleotideSequence],
    params: &ParamStore,
    mixer_cfg: &MixerConfig,
    cls_tokens: usize,
    repr: Representation,
) -> Result<Tensor, EvalError> {
    let b = seqs.len();
    let l = seqs[0].len();
    let n = l + cls_tokens;
    let width = feature_width(mixer_cfg.channels, repr);
    let mut features = Vec::with_capacity(b * width);
    // Bounded scratch-tape chunks keep activation memory flat.
    for chunk in seqs.chunks(16) {
        let mut data = Vec::with_capacity(chunk.len() * n * 5);
        for s in chunk {
            if s.len() != l {
                return Err(EvalError::DegenerateDataset(format!(
                    "mixed sequence lengths {l} and {} in one batch",
                    s.len()
                )));
            }
            let x = append_cls(&EncodedView::unmasked(encode_one_hot(s)), cls_tokens);
            data.extend_from_slice(x.data());
        }
        let input = Tensor::new(vec![chunk.len(), n, 5], data);
        let mut tape = Tape::new();
        let xn = tape.constant(input);
        let mut ctx = ForwardCtx::inference();
        let out = mixer_forward(&mut tape, params, mixer_cfg, xn, &mut ctx)?;
        let channels = *tape.shape(out).last().unwrap();
        let val = tape.value(out).data();
        for i in 0..chunk.len() {
            match repr {
                Representation::ClsMean => {
                    features.extend(pool_rows(val, i * n + l, cls_tokens, channels))
                }
                Representation::PosMean => features.extend(pool_rows(val, i * n, l, channels)),
                Representation::ConcatBoth => {
                    features.extend(pool_rows(val, i * n + l, cls_tokens, channels));
                    features.extend(pool_rows(val, i * n, l, channels));
                }
            }
        }
    }
    Ok(Tensor::new(vec![b, width], features))
}

/// Single-sequence convenience wrapper.
pub fn extract_representation(
    seq: &NucleotideSequence,
    params: &ParamStore,
    mixer_cfg: &MixerConfig,
    cls_tokens: usize,
    repr: Representation,
) -> Result<Vec<f64>, EvalError> {
    let t = extract_representations(&[seq], params, mixer_cfg, cls_tokens, repr)?;
    Ok(t.data().to_vec())
}

/// Classifier head parameters. The final layer starts at zero so an
/// untrained head is the uniform-logit predictor, which makes the
/// zero-epoch baseline well defined.
pub fn init_head(
    kind: HeadKind,
    in_dim: usize,
    num_classes: usize,
    hidden: usize,
    seed: u64,
) -> ParamStore {
    let mut store = ParamStore::new();
    match kind {
        HeadKind::Linear => {
            store.insert("probe.w", Tensor::zeros(vec![in_dim, num_classes]));
            store.insert("probe.b", Tensor::zeros(vec![num_classes]));
        }
        HeadKind::Mlp2 => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, 1.0 / (in_dim as f64).sqrt()).expect("valid std");
            store.insert(
                "probe.w1",
                Tensor::new(
                    vec![in_dim, hidden],
                    (0..in_dim * hidden).map(|_| normal.sample(&mut rng)).collect(),
                ),
            );
            store.insert("probe.b1", Tensor::zeros(vec![hidden]));
            store.insert("probe.w2", Tensor::zeros(vec![hidden, num_classes]));
            store.insert("probe.b2", Tensor::zeros(vec![num_classes]));
        }
    }
    store
}

fn head_forward(
    tape: &mut Tape,
    params: &ParamStore,
    kind: HeadKind,
    x: NodeId,
) -> Result<NodeId, EvalError> {
    match kind {
        HeadKind::Linear => {
            let w = tape.param(params, "probe.w")?;
            let b = tape.param(params, "probe.b")?;
            Ok(tape.linear(x, w, b)?)
        }
        HeadKind::Mlp2 => {
            let w1 = tape.param(params, "probe.w1")?;
            let b1 = tape.param(params, "probe.b1")?;
            let w2 = tape.param(params, "probe.w2")?;
            let b2 = tape.param(params, "probe.b2")?;
            let h = tape.linear(x, w1, b1)?;
            let h = tape.relu(h);
            Ok(tape.linear(h, w2, b2)?)
        }
    }
}

/// Mean cross-entropy of logits [B, C] against integer labels.
fn ce_loss(
    tape: &mut Tape,
    logits: NodeId,
    labels: &[usize],
    num_classes: usize,
) -> Result<NodeId, EvalError> {
    let b = labels.len();
    let probs = tape.softmax(logits, 1)?;
    let logp = tape.log(probs);
    let mut onehot = Tensor::zeros(vec![b, num_classes]);
    for (i, &y) in labels.iter().enumerate() {
        onehot.data_mut()[i * num_classes + y] = 1.0 / b as f64;
    }
    let t = tape.constant(onehot);
    let prod = tape.mul(logp, t)?;
    let s = tape.sum_all(prod);
    Ok(tape.scale(s, -1.0))
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = *logits.shape().last().unwrap();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            // Ties resolve to the lowest class index.
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Train a classifier head on fixed feature vectors ([N, F]) with AdamW and
/// the usual warmup/cosine schedule. Returns the trained head.
#[allow(clippy::too_many_arguments)]
pub fn train_classifier(
    features: &Tensor,
    labels: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<ParamStore, EvalError> {
    cfg.validate()?;
    let n = labels.len();
    let f = *features.shape().last().unwrap();
    let mut head = init_head(cfg.head, f, num_classes, cfg.mlp_hidden, cfg.seed);
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    if total_steps == 0 {
        return Ok(head);
    }
    let mut opt = AdamW::new(&head, cfg.weight_decay);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut step = 0;
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let lr = warmup_cosine_lr(step, total_steps, cfg.lr, cfg.warmup_fraction);
            let mut x = Vec::with_capacity(chunk.len() * f);
            let mut y = Vec::with_capacity(chunk.len());
            for &i in chunk {
                x.extend_from_slice(&features.data()[i * f..(i + 1) * f]);
                y.push(labels[i]);
            }
            let mut tape = Tape::new();
            let xn = tape.constant(Tensor::new(vec![chunk.len(), f], x));
            let logits = head_forward(&mut tape, &head, cfg.head, xn)?;
            let loss = ce_loss(&mut tape, logits, &y, num_classes)?;
            head.zero_grads();
            tape.backward(loss, &mut head)?;
            opt.step(&mut head, lr);
            step += 1;
        }
    }
    Ok(head)
}

/// Head predictions for fixed feature vectors.
pub fn classify(
    features: &Tensor,
    head: &ParamStore,
    kind: HeadKind,
) -> Result<Vec<usize>, EvalError> {
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let logits = head_forward(&mut tape, head, kind, x)?;
    Ok(argmax_rows(tape.value(logits)))
}

/// Rows = true class, columns = predicted class.
pub fn confusion_matrix(
    predictions: &[usize],
    targets: &[usize],
    num_classes: usize,
) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &t) in predictions.iter().zip(targets) {
        m[t][p] += 1;
    }
    m
}

/// Top-1 accuracy, multiclass Matthews correlation (covariance form), and
/// macro-averaged F1 (a class with undefined F1 scores 0).
pub fn metrics(confusion: &[Vec<u64>]) -> Result<(f64, f64, f64), EvalError> {
    let c = confusion.len();
    if c == 0 || confusion.iter().all(|row| row.iter().all(|&v| v == 0)) {
        return Err(EvalError::EmptyConfusion);
    }
    let total: u64 = confusion.iter().flatten().sum();
    let trace: u64 = (0..c).map(|k| confusion[k][k]).sum();
    let true_counts: Vec<u64> = confusion.iter().map(|row| row.iter().sum()).collect();
    let pred_counts: Vec<u64> = (0..c)
        .map(|j| confusion.iter().map(|row| row[j]).sum())
        .collect();

    let top1 = trace as f64 / total as f64;

    let s = total as f64;
    let cov_tp: f64 = trace as f64 * s
        - true_counts
            .iter()
            .zip(&pred_counts)
            .map(|(&t, &p)| t as f64 * p as f64)
            .sum::<f64>();
    let var_p = s * s - pred_counts.iter().map(|&p| (p as f64).powi(2)).sum::<f64>();
    let var_t = s * s - true_counts.iter().map(|&t| (t as f64).powi(2)).sum::<f64>();
    let mcc = if var_p <= 0.0 || var_t <= 0.0 {
        0.0
    } else {
        cov_tp / (var_p * var_t).sqrt()
    };

    let f1_macro = (0..c)
        .map(|k| {
            let tp = confusion[k][k] as f64;
            let denom = 2.0 * tp + (pred_counts[k] as f64 - tp) + (true_counts[k] as f64 - tp);
            if denom == 0.0 {
                0.0
            } else {
                2.0 * tp / denom
            }
        })
        .sum::<f64>()
        / c as f64;

    Ok((top1, mcc, f1_macro))
}

fn check_classes(dataset: &LabeledDataset, idx: &[usize]) -> Result<(), EvalError> {
    let mut seen = vec![false; dataset.num_classes];
    for &i in idx {
        seen[dataset.records[i].1] = true;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(EvalError::DegenerateDataset(
            "training split contains fewer than two classes".into(),
        ));
    }
    Ok(())
}

fn report_from_predictions(
    predictions: &[usize],
    targets: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeReport, EvalError> {
    let confusion = confusion_matrix(predictions, targets, num_classes);
    let (top1, mcc, f1) = metrics(&confusion)?;
    let mut counts = vec![0usize; num_classes];
    for &t in targets {
        counts[t] += 1;
    }
    let majority = *counts.iter().max().unwrap() as f64 / targets.len() as f64;
    Ok(ProbeReport {
        mode: cfg.mode,
        network: cfg.network,
        representation: cfg.representation,
        top1_accuracy: top1,
        mcc,
        f1_macro: f1,
        majority_baseline: majority,
        confusion,
    })
}

/// Linear probing: the backbone is borrowed immutably and used only to
/// extract features, so it is frozen by construction; only the head trains.
pub fn linear_probe(
    dataset: &LabeledDataset,
    split: &DatasetSplit,
    backbone: &ParamStore,
    mixer_cfg: &MixerConfig,
    cls_tokens: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeReport, EvalError> {
    check_classes(dataset, &split.train)?;
    let all: Vec<&NucleotideSequence> = dataset.records.iter().map(|(s, _)| s).collect();
    let features =
        extract_representations(&all, backbone, mixer_cfg, cls_tokens, cfg.representation)?;
    let f = *features.shape().last().unwrap();

    let gather = |idx: &[usize]| -> (Tensor, Vec<usize>) {
        let mut x = Vec::with_capacity(idx.len() * f);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(&features.data()[i * f..(i + 1) * f]);
            y.push(dataset.records[i].1);
        }
        (Tensor::new(vec![idx.len(), f], x), y)
    };

    let (train_x, train_y) = gather(&split.train);
    let head = train_classifier(&train_x, &train_y, dataset.num_classes, cfg)?;
    let (test_x, test_y) = gather(&split.test);
    let predictions = classify(&test_x, &head, cfg.head)?;
    report_from_predictions(&predictions, &test_y, dataset.num_classes, cfg)
}

/// On-tape mean pooling: multiply the flattened [B*N, I] activations by a
/// constant [B, B*N] averaging matrix, keeping the pooling differentiable
/// for fine-tuning.
fn pooled_on_tape(
    tape: &mut Tape,
    flat: NodeId,
    batch: usize,
    l: usize,
    k: usize,
    repr: Representation,
) -> Result<NodeId, EvalError> {
    let n = l + k;
    let selector = |offset: usize, count: usize| {
        let mut s = Tensor::zeros(vec![batch, batch * n]);
        for b in 0..batch {
            for r in 0..count {
                s.data_mut()[b * batch * n + b * n + offset + r] = 1.0 / count as f64;
            }
        }
        s
    };
    match repr {
        Representation::ClsMean => {
            let s = tape.constant(selector(l, k));
            Ok(tape.matmul(s, flat)?)
        }
        Representation::PosMean => {
            let s = tape.constant(selector(0, l));
            Ok(tape.matmul(s, flat)?)
        }
        Representation::ConcatBoth => {
            let sc = tape.constant(selector(l, k));
            let sp = tape.constant(selector(0, l));
            let cls = tape.matmul(sc, flat)?;
            let pos = tape.matmul(sp, flat)?;
            Ok(tape.concat(1, &[cls, pos])?)
        }
    }
}

/// Full fine-tuning: backbone and head share one parameter store and train
/// jointly. Returns the report and the tuned parameters.
pub fn finetune(
    dataset: &LabeledDataset,
    split: &DatasetSplit,
    backbone: &ParamStore,
    mixer_cfg: &MixerConfig,
    cls_tokens: usize,
    cfg: &ProbeConfig,
) -> Result<(ProbeReport, ParamStore), EvalError> {
    cfg.validate()?;
    check_classes(dataset, &split.train)?;
    let l = dataset.records[0].0.len();
    let n = l + cls_tokens;
    let f = feature_width(mixer_cfg.channels, cfg.representation);

    let mut params = backbone.clone();
    for (name, value) in init_head(cfg.head, f, dataset.num_classes, cfg.mlp_hidden, cfg.seed)
        .entries()
    {
        params.insert(name, value);
    }

    let encode_batch = |idx: &[usize]| -> Result<(Tensor, Vec<usize>), EvalError> {
        let mut data = Vec::with_capacity(idx.len() * n * 5);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            let (seq, label) = &dataset.records[i];
            if seq.len() != l {
                return Err(EvalError::DegenerateDataset(format!(
                    "mixed sequence lengths {l} and {}",
                    seq.len()
                )));
            }
            let x = append_cls(&EncodedView::unmasked(encode_one_hot(seq)), cls_tokens);
            data.extend_from_slice(x.data());
            y.push(*label);
        }
        Ok((Tensor::new(vec![idx.len(), n, 5], data), y))
    };

    let batches_per_epoch = split.train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    if total_steps > 0 {
        let mut opt = AdamW::new(&params, cfg.weight_decay);
        let mut order = split.train.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut step = 0;
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                let lr = warmup_cosine_lr(step, total_steps, cfg.lr, cfg.warmup_fraction);
                let (input, y) = encode_batch(chunk)?;
                let mut tape = Tape::new();
                let xn = tape.constant(input);
                let mut ctx =
                    ForwardCtx::training(cfg.seed ^ (epoch as u64) << 32 ^ step as u64);
                let out = mixer_forward(&mut tape, &params, mixer_cfg, xn, &mut ctx)?;
                let channels = *tape.shape(out).last().unwrap();
                let flat = tape.reshape(out, vec![chunk.len() * n, channels])?;
                let pooled =
                    pooled_on_tape(&mut tape, flat, chunk.len(), l, cls_tokens, cfg.representation)?;
                let logits = head_forward(&mut tape, &params, cfg.head, pooled)?;
                let loss = ce_loss(&mut tape, logits, &y, dataset.num_classes)?;
                params.zero_grads();
                tape.backward(loss, &mut params)?;
                opt.step(&mut params, lr);
                step += 1;
            }
        }
    }

    // Evaluate on the test split with the tuned backbone + head.
    let test_seqs: Vec<&NucleotideSequence> =
        split.test.iter().map(|&i| &dataset.records[i].0).collect();
    let test_y: Vec<usize> = split.test.iter().map(|&i| dataset.records[i].1).collect();
    let test_features =
        extract_representations(&test_seqs, &params, mixer_cfg, cls_tokens, cfg.representation)?;
    let predictions = classify(&test_features, &params, cfg.head)?;
    let report = report_from_predictions(&predictions, &test_y, dataset.num_classes, cfg)?;
    Ok((report, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::StudentTeacherState;

    fn seq(id: &str, bases: &str) -> NucleotideSequence {
        NucleotideSequence::new(id, bases).unwrap()
    }

    fn toy_mixer() -> MixerConfig {
        MixerConfig {
            channels: 8,
            hidden: 16,
            num_layers: 1,
            max_tokens: 20,
            dropout: 0.0,
            layer_norm: true,
        }
    }

    #[test]
    fn metrics_on_a_perfect_diagonal() {
        let m = vec![vec![7, 0, 0], vec![0, 3, 0], vec![0, 0, 5]];
        let (top1, mcc, f1) = metrics(&m).unwrap();
        assert_eq!((top1, mcc, f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn metrics_match_hand_computed_binary_case() {
        // [[45, 5], [10, 40]]: 85 correct of 100.
        // MCC = (85*100 - (50*55 + 50*45)) / sqrt((100^2 - (55^2+45^2)) * (100^2 - (50^2+50^2)))
        //     = 3500 / sqrt(4950 * 5000) = 0.70352647...
        // F1 per class: 2*45/(90+10+5) = 0.857142857, 2*40/(80+5+10) = 0.842105263;
        // macro = 0.849624060.
        let m = vec![vec![45, 5], vec![10, 40]];
        let (top1, mcc, f1) = metrics(&m).unwrap();
        assert!((top1 - 0.85).abs() < 1e-12);
        assert!((mcc - 3500.0 / (4950.0f64 * 5000.0).sqrt()).abs() < 1e-12);
        assert!((mcc - 0.7035264706814485).abs() < 1e-10);
        assert!((f1 - 0.8496240601503761).abs() < 1e-10);
    }

    #[test]
    fn all_one_class_predictions_have_zero_mcc() {
        let m = vec![vec![50, 0], vec![50, 0]];
        let (top1, mcc, _) = metrics(&m).unwrap();
        assert_eq!(top1, 0.5);
        assert_eq!(mcc, 0.0);
        assert!(metrics(&[]).is_err());
    }

    #[test]
    fn metrics_are_invariant_under_label_permutation() {
        let m = vec![vec![12, 3, 1], vec![2, 20, 4], vec![0, 5, 9]];
        let base = metrics(&m).unwrap();
        // Apply the permutation (0 1 2) -> (2 0 1) to rows and columns.
        let perm = [2usize, 0, 1];
        let mut pm = vec![vec![0u64; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                pm[perm[i]][perm[j]] = m[i][j];
            }
        }
        let permuted = metrics(&pm).unwrap();
        assert!((base.0 - permuted.0).abs() < 1e-15);
        assert!((base.1 - permuted.1).abs() < 1e-15);
        assert!((base.2 - permuted.2).abs() < 1e-15);
    }

    #[test]
    fn representation_widths_and_determinism() {
        let cfg = toy_mixer();
        let state = StudentTeacherState::init(&cfg, 3).unwrap();
        let s = seq("s", "ACGTACGTACGT");
        for (repr, width) in [
            (Representation::ClsMean, 8),
            (Representation::PosMean, 8),
            (Representation::ConcatBoth, 16),
        ] {
            let a = extract_representation(&s, &state.teacher, &cfg, 2, repr).unwrap();
            let b = extract_representation(&s, &state.teacher, &cfg, 2, repr).unwrap();
            assert_eq!(a.len(), width);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn split_is_a_disjoint_80_10_10_partition() {
        let split = seeded_split(200, 9);
        assert_eq!(split.train.len(), 160);
        assert_eq!(split.val.len(), 20);
        assert_eq!(split.test.len(), 20);
        let mut all: Vec<usize> = split
            .train
            .iter()
            .chain(&split.val)
            .chain(&split.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
        // Same seed reproduces, different seed differs.
        assert_eq!(seeded_split(200, 9).train, split.train);
        assert_ne!(seeded_split(200, 10).train, split.train);
    }

    #[test]
    fn split_file_roundtrip_and_size_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.json");
        let first = load_or_create_split(&path, 50, 1).unwrap();
        let again = load_or_create_split(&path, 50, 999).unwrap();
        assert_eq!(first.train, again.train); // persisted, seed ignored on reload
        assert!(load_or_create_split(&path, 49, 1).is_err());
    }

    #[test]
    fn separable_features_reach_perfect_accuracy() {
        // Two well-separated Gaussian blobs in 2-D.
        let n = 40;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let (cx, y) = if i % 2 == 0 { (3.0, 0) } else { (-3.0, 1) };
            data.extend([cx + 0.1 * (i as f64 % 7.0 - 3.0), 0.05 * i as f64 % 1.0]);
            labels.push(y);
        }
        let features = Tensor::new(vec![n, 2], data);
        let cfg = ProbeConfig {
            epochs: 50,
            lr: 0.1,
            weight_decay: 0.0,
            ..ProbeConfig::default()
        };
        let head = train_classifier(&features, &labels, 2, &cfg).unwrap();
        let preds = classify(&features, &head, cfg.head).unwrap();
        assert_eq!(preds, labels);
    }

    fn toy_dataset() -> LabeledDataset {
        // Class 0 sequences are AT-rich, class 1 GC-rich: trivially separable
        // even through a random backbone's pooled features.
        let mut records = Vec::new();
        for i in 0..40 {
            let (body, label) = if i % 2 == 0 {
                ("ATATATATTAAT", 0)
            } else {
                ("GCGCGCGCCGGC", 1)
            };
            records.push((seq(&format!("s{i}"), body), label));
        }
        LabeledDataset {
            records,
            num_classes: 2,
        }
    }

    #[test]
    fn probing_never_mutates_the_backbone() {
        let cfg = toy_mixer();
        let state = StudentTeacherState::init(&cfg, 5).unwrap();
        let before = state.teacher.entries();
        let data = toy_dataset();
        let split = seeded_split(data.records.len(), 2);
        let probe_cfg = ProbeConfig {
            epochs: 10,
            ..ProbeConfig::default()
        };
        let report =
            linear_probe(&data, &split, &state.teacher, &cfg, 2, &probe_cfg).unwrap();
        for (idx, (name, t)) in before.iter().enumerate() {
            assert_eq!(
                state.teacher.value(idx).data(),
                t.data(),
                "backbone parameter {name} changed during probing"
            );
        }
        assert!(report.top1_accuracy > report.majority_baseline - 1e-9);
        // Row sums of the confusion matrix equal the test-split class counts.
        let total: u64 = report.confusion.iter().flatten().sum();
        assert_eq!(total as usize, split.test.len());
    }

    #[test]
    fn probe_reports_are_bitwise_reproducible() {
        let cfg = toy_mixer();
        let state = StudentTeacherState::init(&cfg, 5).unwrap();
        let data = toy_dataset();
        let split = seeded_split(data.records.len(), 2);
        let probe_cfg = ProbeConfig {
            epochs: 5,
            ..ProbeConfig::default()
        };
        let a = linear_probe(&data, &split, &state.teacher, &cfg, 2, &probe_cfg).unwrap();
        let b = linear_probe(&data, &split, &state.teacher, &cfg, 2, &probe_cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn degenerate_single_class_split_is_rejected() {
        let cfg = toy_mixer();
        let state = StudentTeacherState::init(&cfg, 5).unwrap();
        let mut data = toy_dataset();
        for rec in &mut data.records {
            rec.1 = 0;
        }
        let split = seeded_split(data.records.len(), 2);
        let err = linear_probe(&data, &split, &state.teacher, &cfg, 2, &ProbeConfig::default());
        assert!(matches!(err, Err(EvalError::DegenerateDataset(_))));
    }

    #[test]
    fn zero_epoch_finetune_is_the_untrained_head_baseline() {
        let cfg = toy_mixer();
        let state = StudentTeacherState::init(&cfg, 5).unwrap();
        let data = toy_dataset();
        let split = seeded_split(data.records.len(), 2);
        let probe_cfg = ProbeConfig {
            mode: ProbeMode::Finetune,
            epochs: 0,
            ..ProbeConfig::default()
        };
        let (report, params) =
            finetune(&data, &split, &state.teacher, &cfg, 2, &probe_cfg).unwrap();
        // The backbone is untouched and the zero-initialized head predicts
        // class 0 everywhere.
        for (idx, (name, t)) in state.teacher.entries().iter().enumerate() {
            assert_eq!(params.value(idx).data(), t.data(), "{name} drifted");
        }
        for row in &report.confusion {
            assert_eq!(row.iter().skip(1).sum::<u64>(), 0);
        }
    }

    #[test]
    fn finetune_learns_the_toy_task() {
        let cfg = toy_mixer();
        let state = StudentTeacherState::init(&cfg, 5).unwrap();
        let data = toy_dataset();
        let split = seeded_split(data.records.len(), 2);
        let probe_cfg = ProbeConfig {
            mode: ProbeMode::Finetune,
            epochs: 8,
            lr: 3e-3,
            ..ProbeConfig::default()
        };
        let (report, _) = finetune(&data, &split, &state.teacher, &cfg, 2, &probe_cfg).unwrap();
        assert!(
            report.top1_accuracy >= 0.9,
            "finetune accuracy {}",
            report.top1_accuracy
        );
    }
}
