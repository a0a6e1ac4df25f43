//! Toy differentiable cross-attention model.
//!
//! Stands in for a latent diffusion U-Net: the latent is projected to
//! queries, fixed synthetic text embeddings to keys, and each layer yields a
//! row-stochastic attention map `softmax(Q K^T / sqrt(d))`. The whole path
//! from latent to map is on-tape, so losses over the maps differentiate back
//! to the latent. The bundled denoiser is an off-tape contraction toward a
//! seeded drift field.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Grid2D, GridError, Tape};
use crate::rng::{stream_seed, SplitMix64};
use crate::MAP_SIZE;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttentionError {
    #[error("prompt must contain at least one token")]
    EmptyPrompt,
    #[error("embedding dimension must be positive")]
    ZeroEmbedDim,
    #[error("invalid engine geometry: {0}")]
    BadGeometry(String),
    #[error("token index {index} out of range for prompt of length {len}")]
    TokenIndexOutOfRange { index: usize, len: usize },
    #[error("layer {layer}: resolution {layer_h}x{layer_w} does not divide latent {latent_h}x{latent_w}")]
    ResolutionMismatch {
        layer: usize,
        layer_h: usize,
        layer_w: usize,
        latent_h: usize,
        latent_w: usize,
    },
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Geometry and dynamics of the toy model. Small enough that every loss can
/// be finite-difference checked, large enough that distinct boxes resolve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub latent_height: usize,
    pub latent_width: usize,
    pub latent_channels: usize,
    /// Text embedding dimension.
    pub embed_dim: usize,
    /// Shared query/key projection dimension.
    pub proj_dim: usize,
    /// Per-layer attention resolutions; each must divide the latent size.
    pub layer_resolutions: Vec<[usize; 2]>,
    /// Denoiser contraction factor.
    pub gamma: f64,
    /// Std of the initial latent.
    pub init_scale: f64,
    /// Std of the denoiser drift field.
    pub drift_scale: f64,
    /// Multiplier on the 1/sqrt(fan-in) projection coefficient scale.
    pub proj_scale: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            latent_height: 16,
            latent_width: 16,
            latent_channels: 4,
            embed_dim: 16,
            proj_dim: 8,
            layer_resolutions: alloc::vec![[8, 8], [16, 16]],
            gamma: 0.98,
            init_scale: 1.0,
            drift_scale: 1.0,
            proj_scale: 1.0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), AttentionError> {
        if self.latent_height == 0
            || self.latent_width == 0
            || self.latent_channels == 0
            || self.proj_dim == 0
        {
            return Err(AttentionError::BadGeometry(format!(
                "latent {}x{}x{}, proj_dim {}",
                self.latent_height, self.latent_width, self.latent_channels, self.proj_dim
            )));
        }
        if self.embed_dim == 0 {
            return Err(AttentionError::ZeroEmbedDim);
        }
        if self.layer_resolutions.is_empty() {
            return Err(AttentionError::BadGeometry("no attention layers".into()));
        }
        for (i, [h, w]) in self.layer_resolutions.iter().enumerate() {
            if *h == 0 || *w == 0 || self.latent_height % h != 0 || self.latent_width % w != 0 {
                return Err(AttentionError::ResolutionMismatch {
                    layer: i,
                    layer_h: *h,
                    layer_w: *w,
                    latent_h: self.latent_height,
                    latent_w: self.latent_width,
                });
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(AttentionError::BadGeometry(format!("gamma {}", self.gamma)));
        }
        Ok(())
    }
}

/// Fixed synthetic text embedding: one deterministic unit-norm row per token,
/// keyed by (token label, seed) so repeated tokens share a row.
#[derive(Debug, Clone)]
pub struct TextEmbedding {
    tokens: Vec<String>,
    dim: usize,
    /// N x dim, row-major.
    matrix: Vec<f64>,
}

impl TextEmbedding {
    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }
}

/// Deterministic stand-in for a text encoder.
pub fn encode_prompt(
    prompt: &[String],
    embed_dim: usize,
    seed: u64,
) -> Result<TextEmbedding, AttentionError> {
    if prompt.is_empty() {
        return Err(AttentionError::EmptyPrompt);
    }
    if embed_dim == 0 {
        return Err(AttentionError::ZeroEmbedDim);
    }
    let mut matrix = Vec::with_capacity(prompt.len() * embed_dim);
    for token in prompt {
        let mut rng = SplitMix64::new(stream_seed(seed, token));
        let mut row: Vec<f64> = (0..embed_dim).map(|_| rng.next_gaussian()).collect();
        let mut norm = libm::sqrt(row.iter().map(|v| v * v).sum());
        if norm == 0.0 {
            row[0] = 1.0;
            norm = 1.0;
        }
        matrix.extend(row.iter().map(|v| v / norm));
    }
    Ok(TextEmbedding {
        tokens: prompt.to_vec(),
        dim: embed_dim,
        matrix,
    })
}

/// One cross-attention layer: resolution plus fixed linear projections.
#[derive(Debug, Clone)]
pub struct AttentionLayerSpec {
    pub layer_id: usize,
    pub height: usize,
    pub width: usize,
    /// channels x proj_dim, row-major.
    pub proj_q: Vec<f64>,
    /// embed_dim x proj_dim, row-major.
    pub proj_k: Vec<f64>,
    pub proj_dim: usize,
}

/// Latent features: a stack of same-shape channel grids. Plain data; each
/// guided step attaches fresh gradient-requiring leaves to its own tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    height: usize,
    width: usize,
    channels: Vec<Vec<f64>>,
}

impl Latent {
    pub fn new(height: usize, width: usize, channels: Vec<Vec<f64>>) -> Result<Self, AttentionError> {
        if height == 0 || width == 0 || channels.is_empty() {
            return Err(AttentionError::BadGeometry("empty latent".into()));
        }
        for ch in &channels {
            if ch.len() != height * width {
                return Err(AttentionError::BadGeometry("channel size mismatch".into()));
            }
            if !ch.iter().all(|v| v.is_finite()) {
                return Err(AttentionError::Grid(GridError::NonFinite { op: "latent" }));
            }
        }
        Ok(Latent {
            height,
            width,
            channels,
        })
    }

    pub fn random(
        height: usize,
        width: usize,
        num_channels: usize,
        scale: f64,
        rng: &mut SplitMix64,
    ) -> Self {
        let channels = (0..num_channels)
            .map(|_| (0..height * width).map(|_| scale * rng.next_gaussian()).collect())
            .collect();
        Latent {
            height,
            width,
            channels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.channels[c]
    }

    /// Channel grids as plain constants (no tape involvement).
    pub fn to_grids(&self) -> Vec<Grid2D> {
        self.channels
            .iter()
            .map(|ch| Grid2D::from_vec(self.height, self.width, ch.clone()).expect("finite latent"))
            .collect()
    }

    /// Attach every channel to `tape` as a gradient-requiring leaf.
    pub fn attach(&self, tape: &mut Tape) -> Vec<Grid2D> {
        self.channels
            .iter()
            .map(|ch| {
                tape.leaf(self.height, self.width, ch.clone())
                    .expect("finite latent")
            })
            .collect()
    }

    /// In-place `z <- z - alpha * grad`, one gradient grid per channel.
    pub fn gradient_step(&mut self, alpha: f64, grads: &[Grid2D]) {
        debug_assert_eq!(grads.len(), self.channels.len());
        for (ch, g) in self.channels.iter_mut().zip(grads) {
            debug_assert_eq!(g.shape(), (self.height, self.width));
            for (z, d) in ch.iter_mut().zip(g.data()) {
                *z -= alpha * d;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.channels
            .iter()
            .all(|ch| ch.iter().all(|v| v.is_finite()))
    }

    /// Euclidean norm over all channels.
    pub fn norm(&self) -> f64 {
        libm::sqrt(
            self.channels
                .iter()
                .map(|ch| ch.iter().map(|v| v * v).sum::<f64>())
                .sum(),
        )
    }
}

/// A denoising-model step applied after guidance, off-tape.
pub trait Denoiser {
    fn step(&self, latent: &mut Latent, t: usize);
}

/// Contraction toward a seeded drift field: `z <- gamma*z + (1-gamma)*drift`.
/// The drift is the unique fixed point of the step.
#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    gamma: f64,
    drift: Vec<Vec<f64>>,
}

impl ToyDenoiser {
    pub fn new(
        height: usize,
        width: usize,
        num_channels: usize,
        gamma: f64,
        drift_scale: f64,
        rng: &mut SplitMix64,
    ) -> Self {
        let drift = (0..num_channels)
            .map(|_| {
                (0..height * width)
                    .map(|_| drift_scale * rng.next_gaussian())
                    .collect()
            })
            .collect();
        ToyDenoiser { gamma, drift }
    }

    pub fn drift(&self) -> &[Vec<f64>] {
        &self.drift
    }
}

impl Denoiser for ToyDenoiser {
    fn step(&self, latent: &mut Latent, _t: usize) {
        for (ch, drift) in latent.channels.iter_mut().zip(&self.drift) {
            for (z, d) in ch.iter_mut().zip(drift) {
                *z = self.gamma * *z + (1.0 - self.gamma) * d;
            }
        }
    }
}

fn transpose(data: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = alloc::vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            out[j * h + i] = data[i * w + j];
        }
    }
    out
}

/// The toy attention model: fixed projections per layer, derived from the
/// run seed's `projections` sub-stream.
#[derive(Debug, Clone)]
pub struct AttentionEngine {
    config: EngineConfig,
    layers: Vec<AttentionLayerSpec>,
    seed: u64,
}

impl AttentionEngine {
    pub fn new(config: EngineConfig, seed: u64) -> Result<Self, AttentionError> {
        config.validate()?;
        let mut rng = SplitMix64::stream(seed, "projections");
        let q_scale = config.proj_scale / libm::sqrt(config.latent_channels as f64);
        let k_scale = config.proj_scale / libm::sqrt(config.embed_dim as f64);
        let layers = config
            .layer_resolutions
            .iter()
            .enumerate()
            .map(|(layer_id, [h, w])| AttentionLayerSpec {
                layer_id,
                height: *h,
                width: *w,
                proj_q: (0..config.latent_channels * config.proj_dim)
                    .map(|_| q_scale * rng.next_gaussian())
                    .collect(),
                proj_k: (0..config.embed_dim * config.proj_dim)
                    .map(|_| k_scale * rng.next_gaussian())
                    .collect(),
                proj_dim: config.proj_dim,
            })
            .collect();
        Ok(AttentionEngine {
            config,
            layers,
            seed,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn layers(&self) -> &[AttentionLayerSpec] {
        &self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Embedding for `prompt` from this engine's `embeddings` sub-stream.
    pub fn encode_prompt(&self, prompt: &[String]) -> Result<TextEmbedding, AttentionError> {
        encode_prompt(
            prompt,
            self.config.embed_dim,
            stream_seed(self.seed, "embeddings"),
        )
    }

    /// Fresh latent from the `init` sub-stream.
    pub fn initial_latent(&self) -> Latent {
        let mut rng = SplitMix64::stream(self.seed, "init");
        Latent::random(
            self.config.latent_height,
            self.config.latent_width,
            self.config.latent_channels,
            self.config.init_scale,
            &mut rng,
        )
    }

    /// Denoiser with its drift drawn from the `drift` sub-stream.
    pub fn denoiser(&self) -> ToyDenoiser {
        let mut rng = SplitMix64::stream(self.seed, "drift");
        ToyDenoiser::new(
            self.config.latent_height,
            self.config.latent_width,
            self.config.latent_channels,
            self.config.gamma,
            self.config.drift_scale,
            &mut rng,
        )
    }

    /// One layer's attention map: (h_l * w_l) x N, rows summing to one, with
    /// gradients flowing back to the latent channels.
    pub fn compute_attention(
        &self,
        tape: &mut Tape,
        latent_channels: &[Grid2D],
        embedding: &TextEmbedding,
        layer: &AttentionLayerSpec,
    ) -> Result<Grid2D, AttentionError> {
        let pooled: Vec<Grid2D> = latent_channels
            .iter()
            .map(|ch| tape.avg_pool(ch, layer.height, layer.width))
            .collect::<Result<_, _>>()?;
        let stacked = tape.stack_channels(&pooled)?;
        let wq = Grid2D::from_vec(latent_channels.len(), layer.proj_dim, layer.proj_q.clone())?;
        let q = tape.matmul(&stacked, &wq)?;

        let emb = Grid2D::from_vec(
            embedding.num_tokens(),
            embedding.dim(),
            embedding.matrix().to_vec(),
        )?;
        let wk = Grid2D::from_vec(embedding.dim(), layer.proj_dim, layer.proj_k.clone())?;
        let mut scratch = Tape::new();
        let k = scratch.matmul(&emb, &wk)?; // constants: nothing recorded
        let kt = Grid2D::from_vec(
            layer.proj_dim,
            embedding.num_tokens(),
            transpose(k.data(), k.height(), k.width()),
        )?;

        let logits = tape.matmul(&q, &kt)?;
        let scaled = tape.scale(&logits, 1.0 / libm::sqrt(layer.proj_dim as f64));
        Ok(tape.softmax_rows(&scaled))
    }

    /// Attention maps for every layer, in layer order.
    pub fn attention_stack(
        &self,
        tape: &mut Tape,
        latent_channels: &[Grid2D],
        embedding: &TextEmbedding,
    ) -> Result<Vec<Grid2D>, AttentionError> {
        self.layers
            .iter()
            .map(|layer| self.compute_attention(tape, latent_channels, embedding, layer))
            .collect()
    }

    /// Per-concept aggregated maps: sum each concept's token columns at layer
    /// resolution, upsample to the unified size, then average over layers.
    pub fn aggregate_concept_maps(
        &self,
        tape: &mut Tape,
        stack: &[Grid2D],
        concepts: &[Vec<usize>],
        num_tokens: usize,
    ) -> Result<Vec<Grid2D>, AttentionError> {
        debug_assert_eq!(stack.len(), self.layers.len());
        let mut maps = Vec::with_capacity(concepts.len());
        for tokens in concepts {
            for &j in tokens {
                if j >= num_tokens {
                    return Err(AttentionError::TokenIndexOutOfRange {
                        index: j,
                        len: num_tokens,
                    });
                }
            }
            let mut acc: Option<Grid2D> = None;
            for (layer, a_l) in self.layers.iter().zip(stack) {
                let mut col_sum: Option<Grid2D> = None;
                for &j in tokens {
                    let col = tape.attention_column(a_l, j, layer.height, layer.width)?;
                    col_sum = Some(match col_sum {
                        None => col,
                        Some(prev) => tape.add(&prev, &col)?,
                    });
                }
                let col_sum = col_sum.expect("concepts are non-empty");
                let up = tape.upsample_bilinear(&col_sum, MAP_SIZE, MAP_SIZE)?;
                acc = Some(match acc {
                    None => up,
                    Some(prev) => tape.add(&prev, &up)?,
                });
            }
            let acc = acc.expect("layers are non-empty");
            maps.push(tape.scale(&acc, 1.0 / self.layers.len() as f64));
        }
        Ok(maps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn prompt(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn encode_prompt_is_deterministic_and_keyed_by_token() {
        let p = prompt(&["a", "red", "apple", "red"]);
        let e1 = encode_prompt(&p, 8, 42).unwrap();
        let e2 = encode_prompt(&p, 8, 42).unwrap();
        assert_eq!(e1.matrix(), e2.matrix());
        // Same token at positions 1 and 3 -> identical rows.
        assert_eq!(e1.row(1), e1.row(3));
        assert_ne!(e1.row(0), e1.row(1));
        for i in 0..4 {
            let n: f64 = e1.row(i).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_prompt_rejects_bad_input() {
        assert!(matches!(
            encode_prompt(&[], 8, 0),
            Err(AttentionError::EmptyPrompt)
        ));
        assert!(matches!(
            encode_prompt(&prompt(&["a"]), 0, 0),
            Err(AttentionError::ZeroEmbedDim)
        ));
    }

    #[test]
    fn zero_query_projection_gives_uniform_attention() {
        let engine = AttentionEngine::new(EngineConfig::default(), 1).unwrap();
        let emb = engine.encode_prompt(&prompt(&["a", "b", "c"])).unwrap();
        let mut layer = engine.layers()[0].clone();
        layer.proj_q.iter_mut().for_each(|v| *v = 0.0);

        let mut tape = Tape::new();
        let latent = engine.initial_latent();
        let channels = latent.attach(&mut tape);
        let a = engine
            .compute_attention(&mut tape, &channels, &emb, &layer)
            .unwrap();
        for &v in a.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_token_attention_is_exactly_one() {
        let engine = AttentionEngine::new(EngineConfig::default(), 5).unwrap();
        let emb = engine.encode_prompt(&prompt(&["solo"])).unwrap();
        let mut tape = Tape::new();
        let latent = engine.initial_latent();
        let channels = latent.attach(&mut tape);
        let layer = engine.layers()[1].clone();
        let a = engine
            .compute_attention(&mut tape, &channels, &emb, &layer)
            .unwrap();
        assert!(a.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let engine = AttentionEngine::new(EngineConfig::default(), 9).unwrap();
        let emb = engine.encode_prompt(&prompt(&["x", "y", "z", "w"])).unwrap();
        let mut tape = Tape::new();
        let latent = engine.initial_latent();
        let channels = latent.attach(&mut tape);
        for a in engine.attention_stack(&mut tape, &channels, &emb).unwrap() {
            for r in 0..a.height() {
                let sum: f64 = a.data()[r * a.width()..(r + 1) * a.width()].iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn aggregate_single_layer_single_token_is_identity() {
        // One 64x64 layer, one-token concept: the map is that token's column.
        let config = EngineConfig {
            latent_height: 64,
            latent_width: 64,
            layer_resolutions: vec![[64, 64]],
            ..EngineConfig::default()
        };
        let engine = AttentionEngine::new(config, 3).unwrap();
        let emb = engine.encode_prompt(&prompt(&["a", "b"])).unwrap();
        let mut tape = Tape::new();
        let latent = engine.initial_latent();
        let channels = latent.attach(&mut tape);
        let stack = engine.attention_stack(&mut tape, &channels, &emb).unwrap();
        let maps = engine
            .aggregate_concept_maps(&mut tape, &stack, &[vec![1]], 2)
            .unwrap();
        let expected = tape.attention_column(&stack[0], 1, 64, 64).unwrap();
        assert_eq!(maps[0].data(), expected.data());
    }

    #[test]
    fn aggregate_sums_tokens_and_averages_layers() {
        // Two tokens with identical columns double the map.
        let config = EngineConfig {
            latent_height: 4,
            latent_width: 4,
            layer_resolutions: vec![[4, 4]],
            ..EngineConfig::default()
        };
        let engine = AttentionEngine::new(config, 0).unwrap();
        let mut tape = Tape::new();
        let a = Grid2D::constant(16, 2, 0.5);
        let maps = engine
            .aggregate_concept_maps(&mut tape, &[a], &[vec![0, 1]], 2)
            .unwrap();
        assert_eq!(maps[0].shape(), (MAP_SIZE, MAP_SIZE));
        assert!(maps[0].data().iter().all(|&v| (v - 1.0).abs() < 1e-12));

        // Two layers with constant maps u and v average to (u + v) / 2.
        let config2 = EngineConfig {
            latent_height: 4,
            latent_width: 4,
            layer_resolutions: vec![[4, 4], [4, 4]],
            ..EngineConfig::default()
        };
        let engine2 = AttentionEngine::new(config2, 0).unwrap();
        let u = Grid2D::constant(16, 1, 0.25);
        let v = Grid2D::constant(16, 1, 0.75);
        let maps = engine2
            .aggregate_concept_maps(&mut tape, &[u, v], &[vec![0]], 1)
            .unwrap();
        assert!(maps[0].data().iter().all(|&x| (x - 0.5).abs() < 1e-12));
    }

    #[test]
    fn aggregate_rejects_out_of_range_tokens() {
        let engine = AttentionEngine::new(EngineConfig::default(), 0).unwrap();
        let mut tape = Tape::new();
        let a = Grid2D::constant(64, 2, 0.5);
        let b = Grid2D::constant(256, 2, 0.5);
        let err = engine
            .aggregate_concept_maps(&mut tape, &[a, b], &[vec![2]], 2)
            .unwrap_err();
        assert!(matches!(
            err,
            AttentionError::TokenIndexOutOfRange { index: 2, len: 2 }
        ));
    }

    #[test]
    fn denoiser_fixed_point_and_determinism() {
        let mut rng = SplitMix64::stream(11, "drift");
        let den = ToyDenoiser::new(4, 4, 2, 0.98, 1.0, &mut rng);
        let mut z = Latent::new(4, 4, den.drift().to_vec()).unwrap();
        let before = z.clone();
        den.step(&mut z, 10);
        assert_eq!(z, before);

        let mut a = Latent::random(4, 4, 2, 1.0, &mut SplitMix64::stream(7, "init"));
        let mut b = a.clone();
        for t in (1..=25).rev() {
            den.step(&mut a, t);
            den.step(&mut b, t);
        }
        assert_eq!(a, b);
    }

    #[test]
    fn denoiser_trajectories_stay_bounded() {
        let mut rng = SplitMix64::stream(2, "drift");
        let den = ToyDenoiser::new(8, 8, 3, 0.98, 1.0, &mut rng);
        let drift_norm = libm::sqrt(
            den.drift()
                .iter()
                .map(|ch| ch.iter().map(|v| v * v).sum::<f64>())
                .sum(),
        );
        let mut z = Latent::random(8, 8, 3, 5.0, &mut SplitMix64::stream(2, "init"));
        for t in (1..=50).rev() {
            let before = z.norm();
            den.step(&mut z, t);
            assert!(z.norm() <= 0.98 * before + 0.02 * drift_norm + 1e-9);
        }
        assert!(z.is_finite());
    }
}
