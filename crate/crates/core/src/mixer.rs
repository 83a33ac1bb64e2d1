//! The shared student/teacher network body: a linear projector from the
//! 5-wide one-hot space to I channels followed by stacked mixer layers.
//!
//! Each block rotates contiguous channel tracks along the token axis by
//! powers of two and applies a per-token MLP with a residual connection;
//! ceil(log2 N) blocks give every output token a full receptive field.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::ndiff::{NdiffError, NodeId, ParamStore, Tape, Tensor};
use crate::seqcore::ONE_HOT_WIDTH;

#[derive(Debug, Error)]
pub enum MixerError {
    #[error(transparent)]
    Ndiff(#[from] NdiffError),
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("input has {tokens} tokens but the model was sized for at most {max}")]
    TooManyTokens { tokens: usize, max: usize },
}

/// Architecture hyperparameters. `max_tokens` is the largest padded token
/// count (sequence length + CLS count) the parameter set supports.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct MixerConfig {
    pub channels: usize,
    pub hidden: usize,
    pub num_layers: usize,
    pub max_tokens: usize,
    pub dropout: f64,
    pub layer_norm: bool,
}

impl Default for MixerConfig {
    fn default() -> Self {
        Self::reference_default(1010)
    }
}

impl MixerConfig {
    /// Published configuration: four layers, 308 channels, 512 hidden.
    pub fn reference_default(max_tokens: usize) -> Self {
        Self {
            channels: 308,
            hidden: 512,
            num_layers: 4,
            max_tokens,
            dropout: 0.1,
            layer_norm: true,
        }
    }

    pub fn validate(&self) -> Result<(), MixerError> {
        if self.hidden == 0 || self.channels == 0 || self.max_tokens < 2 {
            return Err(MixerError::BadConfig(
                "channels, hidden and max_tokens must be positive (max_tokens >= 2)".into(),
            ));
        }
        let tracks = track_count(self.max_tokens);
        if self.channels < tracks {
            return Err(MixerError::BadConfig(format!(
                "channels = {} must be >= {} rotation tracks for max_tokens = {}",
                self.channels, tracks, self.max_tokens
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(MixerError::BadConfig(format!(
                "dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn blocks_per_layer(&self) -> usize {
        n_blocks(self.max_tokens)
    }
}

/// ceil(log2 n): blocks per layer for an n-token input.
pub fn n_blocks(tokens: usize) -> usize {
    assert!(tokens >= 1);
    (usize::BITS - (tokens - 1).leading_zeros()) as usize
}

/// ceil(log2 n) + 1 rotation tracks. The extra unshifted track keeps the
/// largest offset at 2^(ceil(log2 n) - 1), so every displacement below n is
/// a binary sum reachable within one layer's blocks; with one fewer track
/// the receptive field cannot cover all tokens.
pub fn track_count(tokens: usize) -> usize {
    if tokens < 2 {
        1
    } else {
        n_blocks(tokens) + 1
    }
}

/// Rotation offset per track: {0, 1, 2, 4, ..., 2^(T-2)}.
pub fn track_offsets(tokens: usize) -> Vec<i64> {
    (0..track_count(tokens))
        .map(|t| if t == 0 { 0 } else { 1i64 << (t - 1) })
        .collect()
}

/// Contiguous channel group sizes: floor(I/T) each, remainder spread over
/// the first I mod T groups.
pub fn track_sizes(channels: usize, tracks: usize) -> Vec<usize> {
    let base = channels / tracks;
    let rem = channels % tracks;
    (0..tracks)
        .map(|t| base + usize::from(t < rem))
        .collect()
}

/// Dropout seed stream for one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCtx {
    pub training: bool,
    seed: u64,
    counter: u64,
}

impl ForwardCtx {
    pub fn inference() -> Self {
        Self {
            training: false,
            seed: 0,
            counter: 0,
        }
    }

    pub fn training(seed: u64) -> Self {
        Self {
            training: true,
            seed,
            counter: 0,
        }
    }

    fn next_seed(&mut self) -> u64 {
        self.counter += 1;
        self.seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(self.counter)
    }
}

/// Initialize projector and per-(layer, block) MLP parameters.
pub fn init_params(cfg: &MixerConfig, seed: u64) -> Result<ParamStore, MixerError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    store.insert(
        "mixer.proj.w",
        random_init(&mut rng, &[ONE_HOT_WIDTH, cfg.channels]),
    );
    store.insert("mixer.proj.b", Tensor::zeros(vec![cfg.channels]));
    for layer in 0..cfg.num_layers {
        for block in 0..cfg.blocks_per_layer() {
            let p = format!("mixer.layer{layer}.block{block}");
            store.insert(
                format!("{p}.w1"),
                random_init(&mut rng, &[cfg.channels, cfg.hidden]),
            );
            store.insert(format!("{p}.b1"), Tensor::zeros(vec![cfg.hidden]));
            store.insert(
                format!("{p}.w2"),
                random_init(&mut rng, &[cfg.hidden, cfg.channels]),
            );
            store.insert(format!("{p}.b2"), Tensor::zeros(vec![cfg.channels]));
        }
    }
    Ok(store)
}

fn random_init(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let fan_in = shape[0] as f64;
    let normal = Normal::new(0.0, 1.0 / fan_in.sqrt()).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
}

fn token_axis(shape: &[usize]) -> usize {
    shape.len() - 2
}

/// Per-token affine map from the one-hot width to I channels.
pub fn project(
    tape: &mut Tape,
    store: &ParamStore,
    x: NodeId,
) -> Result<NodeId, MixerError> {
    let w = tape.param(store, "mixer.proj.w")?;
    let b = tape.param(store, "mixer.proj.b")?;
    Ok(tape.linear(x, w, b)?)
}

/// Circularly shift each channel track along the token axis by its offset.
/// A pure permutation of matrix entries; every block shares the pattern.
pub fn rotate_tracks(tape: &mut Tape, x: NodeId) -> Result<NodeId, MixerError> {
    let shape = tape.shape(x).to_vec();
    let tokens = shape[token_axis(&shape)];
    let channels = *shape.last().unwrap();
    let tracks = track_count(tokens);
    if channels < tracks {
        return Err(MixerError::BadConfig(format!(
            "{channels} channels < {tracks} tracks for {tokens} tokens"
        )));
    }
    let offsets = track_offsets(tokens);
    let sizes = track_sizes(channels, tracks);
    let segments: Vec<(usize, i64)> = sizes.into_iter().zip(offsets).collect();
    Ok(tape.track_shift(x, &segments)?)
}

/// Inverse of [`rotate_tracks`] (shift each track back).
pub fn rotate_tracks_inverse(tape: &mut Tape, x: NodeId) -> Result<NodeId, MixerError> {
    let shape = tape.shape(x).to_vec();
    let tokens = shape[token_axis(&shape)];
    let channels = *shape.last().unwrap();
    let tracks = track_count(tokens);
    let offsets = track_offsets(tokens);
    let sizes = track_sizes(channels, tracks);
    let segments: Vec<(usize, i64)> = sizes
        .into_iter()
        .zip(offsets.into_iter().map(|o| -o))
        .collect();
    Ok(tape.track_shift(x, &segments)?)
}

/// rotate -> (layer norm) -> per-token MLP -> residual add of the block input.
#[allow(clippy::too_many_arguments)]
pub fn chordmixer_block(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &MixerConfig,
    x: NodeId,
    layer: usize,
    block: usize,
    ctx: &mut ForwardCtx,
) -> Result<NodeId, MixerError> {
    let p = format!("mixer.layer{layer}.block{block}");
    let w1 = tape.param(store, &format!("{p}.w1"))?;
    let b1 = tape.param(store, &format!("{p}.b1"))?;
    let w2 = tape.param(store, &format!("{p}.w2"))?;
    let b2 = tape.param(store, &format!("{p}.b2"))?;

    let rot = rotate_tracks(tape, x)?;
    let h = if cfg.layer_norm {
        tape.layer_norm(rot, 1e-5)?
    } else {
        rot
    };
    let h = tape.dropout(h, cfg.dropout, ctx.next_seed(), ctx.training)?;
    let h1 = tape.linear(h, w1, b1)?;
    let h1 = tape.gelu(h1);
    let h1 = tape.dropout(h1, cfg.dropout, ctx.next_seed(), ctx.training)?;
    let h2 = tape.linear(h1, w2, b2)?;
    Ok(tape.add(x, h2)?)
}

/// ceil(log2 N) blocks applied sequentially; N is the actual token count,
/// so variable-length inputs get the track pattern they need.
pub fn chordmixer_layer(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &MixerConfig,
    x: NodeId,
    layer: usize,
    ctx: &mut ForwardCtx,
) -> Result<NodeId, MixerError> {
    let shape = tape.shape(x).to_vec();
    let tokens = shape[token_axis(&shape)];
    if tokens > cfg.max_tokens {
        return Err(MixerError::TooManyTokens {
            tokens,
            max: cfg.max_tokens,
        });
    }
    let mut h = x;
    for block in 0..n_blocks(tokens) {
        h = chordmixer_block(tape, store, cfg, h, layer, block, ctx)?;
    }
    Ok(h)
}

/// Full body: projection then `num_layers` mixer layers. Input is the
/// encoded view with CLS rows already appended ([B, N, 5] or [N, 5]);
/// output keeps the token layout with I channels.
pub fn mixer_forward(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &MixerConfig,
    x: NodeId,
    ctx: &mut ForwardCtx,
) -> Result<NodeId, MixerError> {
    let mut h = project(tape, store, x)?;
    for layer in 0..cfg.num_layers {
        h = chordmixer_layer(tape, store, cfg, h, layer, ctx)?;
    }
    Ok(h)
}
