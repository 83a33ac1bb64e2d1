//! The six sequence augmentation operators, deterministic view pipelines,
//! and the row-softmax KL view-dissimilarity metric.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::seqcore::{encode_one_hot, NucleotideSequence, OneHotMatrix, ONE_HOT_WIDTH};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("breakpoint {breakpoint} out of range for length {len}")]
    BreakpointOutOfRange { breakpoint: usize, len: usize },
    #[error("position {pos} out of range for length {len}")]
    PositionOutOfRange { pos: usize, len: usize },
    #[error("insertion fragment must be nonempty")]
    EmptyFragment,
    #[error("deletion [{start}, {start}+{dlen}) exceeds length {len}")]
    DeletionOutOfRange {
        start: usize,
        dlen: usize,
        len: usize,
    },
    #[error("pad length {pad} does not match deletion length {dlen}")]
    PadLengthMismatch { pad: usize, dlen: usize },
    #[error("reverse-complement requires clean one-hot rows (row {row} is not); noisy input needs permutation mode")]
    NoisyReverseComplement { row: usize },
    #[error("invalid pipeline: {0}")]
    BadPipeline(String),
    #[error("shape mismatch: {0} vs {1} rows")]
    ShapeMismatch(usize, usize),
    #[error("invalid parameter: {0}")]
    BadParam(String),
}

/// One augmentation operator with its per-kind parameters.
///
/// Length ranges are in base pairs; `None` means the default range
/// `[1, max(1, L/20)]` derived from the sequence length at application time.
#[derive(Debug, Clone, PartialEq)]
pub enum AugmentationSpec {
    Translocation,
    Insertion { len_range: Option<(usize, usize)> },
    Deletion { len_range: Option<(usize, usize)> },
    ReverseComplement { probability: f64 },
    GaussianNoise { mean: f64, std: f64 },
    Masking { ratio: f64 },
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<(), AugmentError> {
        match self {
            Self::Insertion {
                len_range: Some((lo, hi)),
            }
            | Self::Deletion {
                len_range: Some((lo, hi)),
            } => {
                if *lo == 0 || hi < lo {
                    return Err(AugmentError::BadParam(format!(
                        "length range [{lo}, {hi}] must be nonempty and positive"
                    )));
                }
            }
            Self::ReverseComplement { probability } => {
                if !(0.0..=1.0).contains(probability) {
                    return Err(AugmentError::BadParam(format!(
                        "rc probability {probability} not in [0, 1]"
                    )));
                }
            }
            Self::GaussianNoise { std, .. } => {
                if *std < 0.0 {
                    return Err(AugmentError::BadParam(format!("noise std {std} < 0")));
                }
            }
            Self::Masking { ratio } => {
                if !(0.0..1.0).contains(ratio) {
                    return Err(AugmentError::BadParam(format!(
                        "mask ratio {ratio} not in [0, 1)"
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn kind_tag(&self) -> u64 {
        match self {
            Self::Translocation => 1,
            Self::Insertion { .. } => 2,
            Self::Deletion { .. } => 3,
            Self::ReverseComplement { .. } => 4,
            Self::GaussianNoise { .. } => 5,
            Self::Masking { .. } => 6,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Translocation => "translocation",
            Self::Insertion { .. } => "insertion",
            Self::Deletion { .. } => "deletion",
            Self::ReverseComplement { .. } => "reverse_complement",
            Self::GaussianNoise { .. } => "gaussian_noise",
            Self::Masking { .. } => "masking",
        }
    }
}

/// An encoded view: length-preserved matrix plus the masked positions and
/// their pre-mask one-hot targets.
#[derive(Debug, Clone)]
pub struct EncodedView {
    pub matrix: OneHotMatrix,
    pub masked_positions: Vec<usize>,
    pub mnm_targets: Vec<[f64; ONE_HOT_WIDTH]>,
}

impl EncodedView {
    pub fn unmasked(matrix: OneHotMatrix) -> Self {
        Self {
            matrix,
            masked_positions: Vec::new(),
            mnm_targets: Vec::new(),
        }
    }

    pub fn mask_count(&self) -> usize {
        self.masked_positions.len()
    }
}

/// Swap the two segments around `breakpoint`: output = m[bp..] ++ m[..bp].
pub fn translocate(m: &OneHotMatrix, breakpoint: usize) -> Result<OneHotMatrix, AugmentError> {
    let len = m.len();
    if breakpoint > len {
        return Err(AugmentError::BreakpointOutOfRange { breakpoint, len });
    }
    let split = breakpoint * ONE_HOT_WIDTH;
    let mut data = Vec::with_capacity(m.data().len());
    data.extend_from_slice(&m.data()[split..]);
    data.extend_from_slice(&m.data()[..split]);
    Ok(OneHotMatrix::from_rows(data))
}

/// Splice `fragment` in at `pos`, then truncate back to the original length
/// by dropping the trailing rows.
pub fn insert_fragment(
    m: &OneHotMatrix,
    pos: usize,
    fragment: &OneHotMatrix,
) -> Result<OneHotMatrix, AugmentError> {
    let len = m.len();
    if pos > len {
        return Err(AugmentError::PositionOutOfRange { pos, len });
    }
    if fragment.is_empty() {
        return Err(AugmentError::EmptyFragment);
    }
    let split = pos * ONE_HOT_WIDTH;
    let total = len * ONE_HOT_WIDTH;
    let mut data = Vec::with_capacity(total + fragment.data().len());
    data.extend_from_slice(&m.data()[..split]);
    data.extend_from_slice(fragment.data());
    data.extend_from_slice(&m.data()[split..]);
    data.truncate(total);
    Ok(OneHotMatrix::from_rows(data))
}

/// Remove `[start, start+dlen)` and append `pad` at the tail so the length
/// stays exactly L.
pub fn delete_segment(
    m: &OneHotMatrix,
    start: usize,
    dlen: usize,
    pad: &OneHotMatrix,
) -> Result<OneHotMatrix, AugmentError> {
    let len = m.len();
    if start + dlen > len {
        return Err(AugmentError::DeletionOutOfRange { start, dlen, len });
    }
    if pad.len() != dlen {
        return Err(AugmentError::PadLengthMismatch {
            pad: pad.len(),
            dlen,
        });
    }
    let mut data = Vec::with_capacity(len * ONE_HOT_WIDTH);
    data.extend_from_slice(&m.data()[..start * ONE_HOT_WIDTH]);
    data.extend_from_slice(&m.data()[(start + dlen) * ONE_HOT_WIDTH..]);
    data.extend_from_slice(pad.data());
    Ok(OneHotMatrix::from_rows(data))
}

/// Reverse row order and swap columns A<->T, C<->G. N and mask rows map to
/// themselves. With `allow_noisy` the same permutation is applied to
/// arbitrary real rows (strict-order mode); otherwise non-clean rows
/// are an error.
pub fn reverse_complement(
    m: &OneHotMatrix,
    apply: bool,
    allow_noisy: bool,
) -> Result<OneHotMatrix, AugmentError> {
    if !apply {
        return Ok(m.clone());
    }
    if !allow_noisy {
        if let Some(row) = (0..m.len()).find(|&j| !row_is_clean(m.row(j))) {
            return Err(AugmentError::NoisyReverseComplement { row });
        }
    }
    let mut out = OneHotMatrix::zeros(m.len());
    for j in 0..m.len() {
        let src = m.row(m.len() - 1 - j);
        let dst = out.row_mut(j);
        dst[0] = src[3]; // A <- T
        dst[1] = src[2]; // C <- G
        dst[2] = src[1]; // G <- C
        dst[3] = src[0]; // T <- A
        dst[4] = src[4]; // N unchanged
    }
    Ok(out)
}

fn row_is_clean(row: &[f64]) -> bool {
    let mut hot = 0usize;
    for &x in row {
        if x == 1.0 {
            hot += 1;
        } else if x != 0.0 {
            return false;
        }
    }
    hot <= 1
}

/// Add i.i.d. Normal(mean, std) noise to every entry, deterministic under seed.
pub fn add_gaussian_noise(
    m: &OneHotMatrix,
    mean: f64,
    std: f64,
    seed: u64,
) -> Result<OneHotMatrix, AugmentError> {
    if std < 0.0 {
        return Err(AugmentError::BadParam(format!("noise std {std} < 0")));
    }
    let mut out = m.clone();
    if std == 0.0 && mean == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(mean, std)
        .map_err(|e| AugmentError::BadParam(format!("noise params: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for x in out.data_mut() {
        *x += normal.sample(&mut rng);
    }
    Ok(out)
}

/// Zero out floor(ratio * L) rows chosen uniformly without replacement,
/// snapshotting the pre-mask rows as MNM targets.
pub fn mask_random(m: &OneHotMatrix, ratio: f64, seed: u64) -> Result<EncodedView, AugmentError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(AugmentError::BadParam(format!(
            "mask ratio {ratio} not in [0, 1)"
        )));
    }
    let count = (ratio * m.len() as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // partial Fisher-Yates for a uniform sample without replacement
    let mut indices: Vec<usize> = (0..m.len()).collect();
    for i in 0..count {
        let j = rng.gen_range(i..indices.len());
        indices.swap(i, j);
    }
    let mut positions: Vec<usize> = indices[..count].to_vec();
    positions.sort_unstable();

    let mut matrix = m.clone();
    let mut targets = Vec::with_capacity(count);
    for &p in &positions {
        let mut row = [0.0; ONE_HOT_WIDTH];
        row.copy_from_slice(matrix.row(p));
        targets.push(row);
        matrix.row_mut(p).fill(0.0);
    }
    Ok(EncodedView {
        matrix,
        masked_positions: positions,
        mnm_targets: targets,
    })
}

/// Draw a clean random sequence over {A,C,G,T} (never N).
fn random_acgt(len: usize, rng: &mut ChaCha8Rng) -> OneHotMatrix {
    let mut m = OneHotMatrix::zeros(len);
    for j in 0..len {
        let d = rng.gen_range(0..4);
        m.row_mut(j)[d] = 1.0;
    }
    m
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn hash_sequence(seq: &NucleotideSequence) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in seq.id().bytes().chain(seq.bases().bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Ordered augmentation composition producing one view, deterministic under
/// (input sequence, seed).
#[derive(Debug, Clone)]
pub struct ViewPipeline {
    pub ops: Vec<AugmentationSpec>,
    pub seed: u64,
    /// Execute operators literally in the configured order, applying
    /// reverse-complement as a pure permutation even on noisy rows.
    pub strict_op_order: bool,
}

impl ViewPipeline {
    pub fn new(ops: Vec<AugmentationSpec>, seed: u64) -> Result<Self, AugmentError> {
        let p = Self {
            ops,
            seed,
            strict_op_order: false,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_strict_op_order(mut self) -> Result<Self, AugmentError> {
        self.strict_op_order = true;
        self.validate()?;
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Masking must be last; after Gaussian noise only Masking may follow
    /// (strict-order mode additionally allows reverse-complement, which
    /// acts as a pure permutation there).
    pub fn validate(&self) -> Result<(), AugmentError> {
        for op in &self.ops {
            op.validate()?;
        }
        let mut seen_mask = false;
        let mut seen_noise = false;
        for op in &self.ops {
            if seen_mask {
                return Err(AugmentError::BadPipeline(
                    "masking must be the last operator".into(),
                ));
            }
            if seen_noise {
                let allowed = matches!(op, AugmentationSpec::Masking { .. })
                    || (self.strict_op_order
                        && matches!(op, AugmentationSpec::ReverseComplement { .. }));
                if !allowed {
                    return Err(AugmentError::BadPipeline(format!(
                        "'{}' cannot follow gaussian_noise (rows are no longer clean)",
                        op.name()
                    )));
                }
            }
            match op {
                AugmentationSpec::Masking { .. } => seen_mask = true,
                AugmentationSpec::GaussianNoise { .. } => seen_noise = true,
                _ => {}
            }
        }
        Ok(())
    }

    pub fn apply(&self, seq: &NucleotideSequence) -> Result<EncodedView, AugmentError> {
        self.apply_seeded(seq, self.seed)
    }

    /// Apply with an explicit seed (the trainer varies this per sample).
    /// Per-op streams are derived from (seed, sequence hash, op kind,
    /// occurrence index), so adding an operator of a different kind does not
    /// perturb the draws of the others.
    pub fn apply_seeded(
        &self,
        seq: &NucleotideSequence,
        seed: u64,
    ) -> Result<EncodedView, AugmentError> {
        self.validate()?;
        let seq_hash = hash_sequence(seq);
        let mut matrix = encode_one_hot(seq);
        let mut view: Option<EncodedView> = None;
        let mut occurrence = [0u64; 7];

        for op in &self.ops {
            let tag = op.kind_tag();
            let occ = occurrence[tag as usize];
            occurrence[tag as usize] += 1;
            let op_seed = splitmix64(
                seed ^ splitmix64(tag.wrapping_mul(0x51ed).wrapping_add(occ)) ^ seq_hash,
            );
            let mut rng = ChaCha8Rng::seed_from_u64(op_seed);
            let l = matrix.len();
            match op {
                AugmentationSpec::Translocation => {
                    let breakpoint = rng.gen_range(0..=l);
                    matrix = translocate(&matrix, breakpoint)?;
                }
                AugmentationSpec::Insertion { len_range } => {
                    let (lo, hi) = resolve_len_range(*len_range, l);
                    let flen = rng.gen_range(lo..=hi).min(l);
                    let pos = rng.gen_range(0..=l);
                    let fragment = random_acgt(flen, &mut rng);
                    matrix = insert_fragment(&matrix, pos, &fragment)?;
                }
                AugmentationSpec::Deletion { len_range } => {
                    let (lo, hi) = resolve_len_range(*len_range, l);
                    let dlen = rng.gen_range(lo..=hi).min(l);
                    let start = rng.gen_range(0..=l - dlen);
                    let pad = random_acgt(dlen, &mut rng);
                    matrix = delete_segment(&matrix, start, dlen, &pad)?;
                }
                AugmentationSpec::ReverseComplement { probability } => {
                    let apply = rng.gen::<f64>() < *probability;
                    matrix = reverse_complement(&matrix, apply, self.strict_op_order)?;
                }
                AugmentationSpec::GaussianNoise { mean, std } => {
                    matrix = add_gaussian_noise(&matrix, *mean, *std, rng.gen())?;
                }
                AugmentationSpec::Masking { ratio } => {
                    view = Some(mask_random(&matrix, *ratio, rng.gen())?);
                }
            }
        }
        Ok(view.unwrap_or_else(|| EncodedView::unmasked(matrix)))
    }
}

fn resolve_len_range(range: Option<(usize, usize)>, l: usize) -> (usize, usize) {
    range.unwrap_or((1, (l / 20).max(1)))
}

/// Row-softmax KL divergence between two equal-shape views (Gibbs-nonnegative;
/// zero iff the softmaxed rows coincide). Mask rows softmax to uniform.
pub fn kl_dissimilarity(u: &OneHotMatrix, v: &OneHotMatrix) -> Result<f64, AugmentError> {
    if u.len() != v.len() {
        return Err(AugmentError::ShapeMismatch(u.len(), v.len()));
    }
    let mut total = 0.0;
    let mut pu = [0.0; ONE_HOT_WIDTH];
    let mut pv = [0.0; ONE_HOT_WIDTH];
    for j in 0..u.len() {
        row_softmax(u.row(j), &mut pu);
        row_softmax(v.row(j), &mut pv);
        for d in 0..ONE_HOT_WIDTH {
            total += pu[d] * (pu[d] / pv[d]).ln();
        }
    }
    Ok(total)
}

fn row_softmax(row: &[f64], out: &mut [f64; ONE_HOT_WIDTH]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for d in 0..ONE_HOT_WIDTH {
        out[d] = (row[d] - max).exp();
        sum += out[d];
    }
    for x in out.iter_mut() {
        *x /= sum;
    }
}

/// Standard student-view pipeline: deletion, insertion, translocation, then
/// masking.
pub fn standard_u_pipeline(seed: u64) -> ViewPipeline {
    ViewPipeline::new(
        vec![
            AugmentationSpec::Deletion { len_range: None },
            AugmentationSpec::Insertion { len_range: None },
            AugmentationSpec::Translocation,
            AugmentationSpec::Masking { ratio: 0.3 },
        ],
        seed,
    )
    .expect("static pipeline is valid")
}

/// Standard teacher-view pipeline. Default order runs reverse-complement before the
/// noise so RC sees clean rows; strict op order is available through
/// [`ViewPipeline::with_strict_op_order`].
pub fn standard_v_pipeline(seed: u64) -> ViewPipeline {
    ViewPipeline::new(
        vec![
            AugmentationSpec::ReverseComplement { probability: 0.5 },
            AugmentationSpec::GaussianNoise {
                mean: 0.0,
                std: 0.2,
            },
        ],
        seed,
    )
    .expect("static pipeline is valid")
}

/// The four augmentation pairs compared in the ablation: (name, u, v).
pub fn ablation_pairs(seed: u64) -> Vec<(String, ViewPipeline, ViewPipeline)> {
    let mask = AugmentationSpec::Masking { ratio: 0.3 };
    let del = AugmentationSpec::Deletion { len_range: None };
    let ins = AugmentationSpec::Insertion { len_range: None };
    let tr = AugmentationSpec::Translocation;
    let rc = AugmentationSpec::ReverseComplement { probability: 0.5 };
    let noise = AugmentationSpec::GaussianNoise {
        mean: 0.0,
        std: 0.2,
    };
    let pipe = |ops: Vec<AugmentationSpec>, s: u64| ViewPipeline::new(ops, s).unwrap();
    vec![
        (
            "M+NoAug".into(),
            pipe(vec![mask.clone()], seed),
            pipe(vec![], seed ^ 1),
        ),
        (
            "M+DIT".into(),
            pipe(vec![mask.clone()], seed),
            pipe(vec![del.clone(), ins.clone(), tr.clone()], seed ^ 1),
        ),
        (
            "MDT+DIT".into(),
            pipe(vec![del.clone(), tr.clone(), mask.clone()], seed),
            pipe(vec![del.clone(), ins, tr.clone()], seed ^ 1),
        ),
        (
            "MDT+NR".into(),
            pipe(vec![del, tr, mask], seed),
            pipe(vec![rc, noise], seed ^ 1),
        ),
    ]
}
