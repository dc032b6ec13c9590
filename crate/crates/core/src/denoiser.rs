//! The slice-wise denoising network.
//!
//! The noisy sequence is cut into K slices that are denoised in order. Each
//! slice attends over a context built from the previous slice's clean
//! estimate and the next slice's noisy input, is decoded by FiLM-modulated
//! residual layers, and the joined slices are refined by a residual
//! convolution stack.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::conditioning::{partition, Condition};
use crate::diffusion::Denoise;
use crate::error::{Error, Result};
use crate::motion::{CONTACT_DIM, CONTACT_OFFSET, FRAME_DIM};
use crate::nn::layers::{
    conv1d, cross_attention, film, init_attention, init_conv1d, init_linear, linear, timestep_embedding,
};
use crate::nn::{BoundParams, Graph, ParamStore, Tensor, Var};
use crate::rng::Rng;

/// Shortest slice the network accepts.
pub const MIN_SLICE_FRAMES: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub slices: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub decoder_layers: usize,
    pub conv_layers: usize,
    pub kernel_size: usize,
    pub feature_dim: usize,
    pub bidirectional: bool,
    pub use_beat: bool,
    pub use_local_decoder: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            slices: 6,
            hidden_dim: 128,
            heads: 4,
            decoder_layers: 2,
            conv_layers: 2,
            kernel_size: 5,
            feature_dim: 35,
            bidirectional: true,
            use_beat: true,
            use_local_decoder: true,
        }
    }
}

fn linear_count(d_in: usize, d_out: usize) -> usize {
    d_in * d_out + d_out
}

impl DenoiserConfig {
    /// Checks the fields that do not depend on sequence length.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.slices == 0 {
            return bad("slices must be at least 1".into());
        }
        if self.hidden_dim < 2 || self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return bad(format!(
                "hidden_dim {} must be a positive multiple of heads {}",
                self.hidden_dim, self.heads
            ));
        }
        if self.kernel_size % 2 == 0 {
            return bad(format!("kernel_size {} must be odd", self.kernel_size));
        }
        if self.conv_layers == 0 {
            return bad("conv_layers must be at least 1".into());
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be at least 1".into());
        }
        Ok(())
    }

    /// Checks the config against a sequence of `n_frames` frames.
    pub fn validate_for(&self, n_frames: usize) -> Result<()> {
        self.validate()?;
        if n_frames % self.slices != 0 {
            return Err(Error::NotDivisible {
                len: n_frames,
                parts: self.slices,
            });
        }
        if n_frames / self.slices < MIN_SLICE_FRAMES {
            return Err(Error::InvalidConfig(format!(
                "{} slices of {n_frames} frames are shorter than {MIN_SLICE_FRAMES} frames",
                self.slices
            )));
        }
        Ok(())
    }

    fn frame_cond_dim(&self) -> usize {
        self.feature_dim + self.use_beat as usize
    }

    fn lid_channels(&self) -> Vec<usize> {
        let mut c = vec![FRAME_DIM];
        c.extend(std::iter::repeat(self.hidden_dim).take(self.conv_layers - 1));
        c.push(FRAME_DIM);
        c
    }

    /// Number of scalar parameters, with `H` hidden width, `F` feature width,
    /// `L` decoder layers, `B = use_beat as usize` and `lin(a, b) = a·b + b`:
    ///
    /// ```text
    ///   2·lin(151, H)            input and context projections
    /// + 4·lin(H, H)              attention q, k, v, o
    /// + lin(F + B, H)            per-frame condition embedding
    /// + 2·lin(H, H)              time token MLP
    /// + lin(F, H) + B·lin(1, H)  pooled music and beat tokens
    /// + lin((2 + B)·H, H) + lin(H, 2·H·L)   FiLM generator
    /// + L·lin(H, H)              decoder layers
    /// + lin(H, 151)              output projection
    /// + Σ k·c_i·c_{i+1} + c_{i+1} over channels [151, H, …, H, 151]
    ///                            local decoder, when enabled
    /// ```
    pub fn param_count(&self) -> usize {
        let h = self.hidden_dim;
        let f = self.feature_dim;
        let l = self.decoder_layers;
        let b = self.use_beat as usize;
        let mut n = 2 * linear_count(FRAME_DIM, h)
            + 4 * linear_count(h, h)
            + linear_count(f + b, h)
            + 2 * linear_count(h, h)
            + linear_count(f, h)
            + b * linear_count(1, h)
            + linear_count((2 + b) * h, h)
            + linear_count(h, 2 * h * l)
            + l * linear_count(h, h)
            + linear_count(h, FRAME_DIM);
        if self.use_local_decoder {
            let c = self.lid_channels();
            n += c
                .windows(2)
                .map(|w| self.kernel_size * w[0] * w[1] + w[1])
                .sum::<usize>();
        }
        n
    }
}

/// Allocates and initialises every parameter for `config`.
pub fn init_params(config: &DenoiserConfig, rng: &mut Rng) -> Result<ParamStore> {
    config.validate()?;
    let h = config.hidden_dim;
    let mut p = ParamStore::new();
    init_linear(&mut p, rng, "in_proj", FRAME_DIM, h);
    init_linear(&mut p, rng, "ctx_proj", FRAME_DIM, h);
    init_attention(&mut p, rng, "attn", h);
    init_linear(&mut p, rng, "frame_cond", config.frame_cond_dim(), h);
    init_linear(&mut p, rng, "time.0", h, h);
    init_linear(&mut p, rng, "time.1", h, h);
    init_linear(&mut p, rng, "music_pool", config.feature_dim, h);
    if config.use_beat {
        init_linear(&mut p, rng, "beat_pool", 1, h);
    }
    init_linear(&mut p, rng, "fuse.0", (2 + config.use_beat as usize) * h, h);
    init_linear(&mut p, rng, "fuse.1", h, 2 * h * config.decoder_layers);
    for l in 0..config.decoder_layers {
        init_linear(&mut p, rng, &format!("decoder.{l}"), h, h);
    }
    init_linear(&mut p, rng, "out_proj", h, FRAME_DIM);
    if config.use_local_decoder {
        let c = config.lid_channels();
        for (i, w) in c.windows(2).enumerate() {
            init_conv1d(&mut p, rng, &format!("lid.{i}"), config.kernel_size, w[0], w[1]);
        }
    }
    Ok(p)
}

/// Contiguous equal row ranges of an `n_frames`-row sequence.
pub fn slice_ranges(n_frames: usize, k: usize) -> Result<Vec<Range<usize>>> {
    partition(n_frames, k)
}

/// Splits a row-major `N × dim` buffer into `k` contiguous slices.
pub fn slice_sequence(seq: &[f64], dim: usize, k: usize) -> Result<Vec<Vec<f64>>> {
    if dim == 0 || seq.len() % dim != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} values are not rows of {dim}",
            seq.len()
        )));
    }
    Ok(partition(seq.len() / dim, k)?
        .into_iter()
        .map(|r| seq[r.start * dim..r.end * dim].to_vec())
        .collect())
}

/// Context tokens for one slice: `[prev; next]` along time, with absent
/// sides replaced by zeros, or `prev` alone when not bidirectional.
pub fn bidirectional_context(
    g: &mut Graph,
    prev: Option<Var>,
    next: Option<Var>,
    slice_len: usize,
    config: &DenoiserConfig,
) -> Result<Var> {
    let h = config.hidden_dim;
    for v in [prev, next].into_iter().flatten() {
        if g.shape(v) != [slice_len, h] {
            return Err(Error::ShapeMismatch(format!(
                "context part {:?}, expected [{slice_len}, {h}]",
                g.shape(v)
            )));
        }
    }
    let mut zeros = || g.constant(Tensor::zeros(vec![slice_len, h]));
    let prev = prev.unwrap_or_else(&mut zeros);
    if !config.bidirectional {
        return Ok(prev);
    }
    let next = next.unwrap_or_else(&mut zeros);
    g.concat_rows(&[prev, next])
}

/// Per-frame condition inputs for one slice.
#[derive(Clone, Copy, Debug)]
pub struct SliceCondition {
    /// `[n, F]` music features.
    pub music: Var,
    /// `[n, 1]` beat indicator.
    pub beat: Var,
}

/// `[1, H]` embedding of the diffusion step.
pub fn time_token(g: &mut Graph, p: &BoundParams, t: usize, config: &DenoiserConfig) -> Result<Var> {
    let e = g.constant(timestep_embedding(t, config.hidden_dim));
    let a = linear(g, p, "time.0", e)?;
    let a = g.gelu(a);
    linear(g, p, "time.1", a)
}

/// Denoises one slice `z_k: [n, 151]` given its context `[m, H]`.
pub fn denoise_slice(
    g: &mut Graph,
    p: &BoundParams,
    config: &DenoiserConfig,
    z_k: Var,
    context: Var,
    cond: SliceCondition,
    t_token: Var,
) -> Result<Var> {
    let h_dim = config.hidden_dim;
    let n = g.value(z_k).rows();
    if g.shape(z_k) != [n, FRAME_DIM] || g.shape(cond.music) != [n, config.feature_dim] || g.shape(cond.beat) != [n, 1]
    {
        return Err(Error::ShapeMismatch(format!(
            "slice {:?}, music {:?}, beat {:?}",
            g.shape(z_k),
            g.shape(cond.music),
            g.shape(cond.beat)
        )));
    }
    let mut h = linear(g, p, "in_proj", z_k)?;
    let frame_in = if config.use_beat {
        g.concat_cols(&[cond.music, cond.beat])?
    } else {
        cond.music
    };
    let frame_tok = linear(g, p, "frame_cond", frame_in)?;
    h = g.add(h, frame_tok)?;
    let attended = cross_attention(g, p, "attn", h, context, context, config.heads)?;
    h = g.add(h, attended)?;

    let pooled_music = g.mean_rows(cond.music);
    let mut tokens = vec![linear(g, p, "music_pool", pooled_music)?];
    if config.use_beat {
        let pooled_beat = g.mean_rows(cond.beat);
        tokens.push(linear(g, p, "beat_pool", pooled_beat)?);
    }
    tokens.push(t_token);
    let fused = g.concat_cols(&tokens)?;
    let fused = linear(g, p, "fuse.0", fused)?;
    let fused = g.gelu(fused);
    let film_params = linear(g, p, "fuse.1", fused)?;

    for l in 0..config.decoder_layers {
        let base = 2 * h_dim * l;
        let gamma = g.slice_cols(film_params, base, base + h_dim)?;
        let gamma = g.add_scalar(gamma, 1.0);
        let beta = g.slice_cols(film_params, base + h_dim, base + 2 * h_dim)?;
        let u = linear(g, p, &format!("decoder.{l}"), h)?;
        let u = film(g, u, gamma, beta)?;
        let u = g.gelu(u);
        h = g.add(h, u)?;
    }
    linear(g, p, "out_proj", h)
}

/// Residual convolution stack over the joined slices; identity when disabled.
pub fn local_info_decode(g: &mut Graph, p: &BoundParams, config: &DenoiserConfig, x: Var) -> Result<Var> {
    if g.value(x).cols() != FRAME_DIM {
        return Err(Error::ShapeMismatch(format!("local decoder input {:?}", g.shape(x))));
    }
    if !config.use_local_decoder {
        return Ok(x);
    }
    let mut y = x;
    for i in 0..config.conv_layers {
        if i > 0 {
            y = g.gelu(y);
        }
        y = conv1d(g, p, &format!("lid.{i}"), y)?;
    }
    g.add(x, y)
}

/// Full network on a graph: `z: [N, 151]` to `x̂: [N, 151]`.
pub fn forward_graph(
    g: &mut Graph,
    p: &BoundParams,
    config: &DenoiserConfig,
    z: Var,
    t: usize,
    cond: &Condition,
) -> Result<Var> {
    let n = g.value(z).rows();
    if g.shape(z) != [n, FRAME_DIM] {
        return Err(Error::ShapeMismatch(format!("noisy input {:?}", g.shape(z))));
    }
    if cond.n_frames != n || cond.feature_dim != config.feature_dim {
        return Err(Error::ShapeMismatch(format!(
            "condition {}×{} for {n} frames of width {}",
            cond.n_frames, cond.feature_dim, config.feature_dim
        )));
    }
    config.validate_for(n)?;
    let music = g.constant(Tensor::matrix(n, cond.feature_dim, cond.music.clone())?);
    let beat = g.constant(Tensor::matrix(n, 1, cond.beat.clone())?);
    let t_tok = time_token(g, p, t, config)?;
    let ranges = slice_ranges(n, config.slices)?;
    let z_slices = ranges
        .iter()
        .map(|r| g.slice_rows(z, r.start, r.end))
        .collect::<Result<Vec<_>>>()?;

    let mut outputs: Vec<Var> = Vec::with_capacity(ranges.len());
    for (k, r) in ranges.iter().enumerate() {
        let prev = match outputs.last() {
            Some(&x_prev) => Some(linear(g, p, "ctx_proj", x_prev)?),
            None => None,
        };
        let next = match z_slices.get(k + 1) {
            Some(&z_next) if config.bidirectional => Some(linear(g, p, "in_proj", z_next)?),
            _ => None,
        };
        let context = bidirectional_context(g, prev, next, r.len(), config)?;
        let sc = SliceCondition {
            music: g.slice_rows(music, r.start, r.end)?,
            beat: g.slice_rows(beat, r.start, r.end)?,
        };
        outputs.push(denoise_slice(g, p, config, z_slices[k], context, sc, t_tok)?);
    }
    let joined = if outputs.len() == 1 {
        outputs[0]
    } else {
        g.concat_rows(&outputs)?
    };
    let refined = local_info_decode(g, p, config, joined)?;
    g.sigmoid_cols(refined, CONTACT_OFFSET, CONTACT_OFFSET + CONTACT_DIM)
}

/// A network with its weights, usable as a sampler model.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamStore,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, &mut Rng::new(seed))?;
        Ok(Self { config, params })
    }

    /// Wraps existing weights after checking them against `config`.
    pub fn from_params(config: DenoiserConfig, params: ParamStore) -> Result<Self> {
        let expected = init_params(&config, &mut Rng::new(0))?;
        if expected.names() != params.names() {
            return Err(Error::ShapeMismatch("parameter names do not match the config".into()));
        }
        for ((name, a), b) in expected.iter().zip(params.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {name}: {:?}, expected {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        if !params.all_finite() {
            return Err(Error::NumericFailure("non-finite parameter".into()));
        }
        Ok(Self { config, params })
    }

    /// `x̂` for a flat `N × 151` noisy input.
    pub fn forward(&self, z: &[f64], t: usize, cond: &Condition) -> Result<Vec<f64>> {
        if z.len() % FRAME_DIM != 0 {
            return Err(Error::ShapeMismatch(format!("{} values are not whole frames", z.len())));
        }
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let zv = g.constant(Tensor::matrix(z.len() / FRAME_DIM, FRAME_DIM, z.to_vec())?);
        let out = forward_graph(&mut g, &p, &self.config, zv, t, cond)?;
        Ok(g.value(out).data().to_vec())
    }
}

impl Denoise for Denoiser {
    fn predict(&self, z_t: &[f64], t: usize, cond: &Condition) -> Result<Vec<f64>> {
        self.forward(z_t, t, cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;

    fn small_config() -> DenoiserConfig {
        DenoiserConfig {
            slices: 3,
            hidden_dim: 8,
            heads: 2,
            decoder_layers: 2,
            conv_layers: 2,
            kernel_size: 3,
            feature_dim: 4,
            ..DenoiserConfig::default()
        }
    }

    fn random_condition(rng: &mut Rng, n: usize, f: usize) -> Condition {
        let beat = (0..n).map(|i| (i % 5 == 0) as u8 as f64).collect();
        Condition::new(n, f, rng.normal_vec(n * f), beat).unwrap()
    }

    #[test]
    fn slicing_cases() {
        let seq: Vec<f64> = (0..150 * 2).map(|v| v as f64).collect();
        let parts = slice_sequence(&seq, 2, 6).unwrap();
        assert_eq!(parts.len(), 6);
        assert!(parts.iter().all(|p| p.len() == 25 * 2));
        assert_eq!(parts.concat(), seq);
        assert_eq!(slice_sequence(&seq, 2, 1).unwrap(), vec![seq.clone()]);
        assert!(matches!(slice_sequence(&seq, 2, 7), Err(Error::NotDivisible { .. })));
    }

    #[test]
    fn config_validation() {
        let c = DenoiserConfig::default();
        c.validate_for(150).unwrap();
        assert!(matches!(c.validate_for(151), Err(Error::NotDivisible { .. })));
        let tiny = DenoiserConfig {
            slices: 50,
            ..c.clone()
        };
        assert!(tiny.validate_for(150).is_err());
        assert!(DenoiserConfig {
            kernel_size: 4,
            ..c.clone()
        }
        .validate()
        .is_err());
        assert!(DenoiserConfig { heads: 3, ..c.clone() }.validate().is_err());
        assert!(DenoiserConfig { slices: 0, ..c }.validate().is_err());
    }

    #[test]
    fn param_count_matches_allocation() {
        for bidirectional in [false, true] {
            for use_beat in [false, true] {
                for use_local_decoder in [false, true] {
                    for (conv_layers, decoder_layers) in [(1, 0), (2, 2), (3, 1)] {
                        let c = DenoiserConfig {
                            bidirectional,
                            use_beat,
                            use_local_decoder,
                            conv_layers,
                            decoder_layers,
                            ..small_config()
                        };
                        let p = init_params(&c, &mut Rng::new(0)).unwrap();
                        assert_eq!(p.count(), c.param_count());
                    }
                }
            }
        }
        let d = DenoiserConfig::default();
        // H=128, F=35, L=2, k=5, all flags on
        let by_hand = 2 * (151 * 128 + 128)
            + 6 * (128 * 128 + 128)
            + (36 * 128 + 128)
            + (35 * 128 + 128)
            + (128 + 128)
            + (384 * 128 + 128)
            + (128 * 512 + 512)
            + 2 * (128 * 128 + 128)
            + (128 * 151 + 151)
            + (5 * 151 * 128 + 128)
            + (5 * 128 * 151 + 151);
        assert_eq!(d.param_count(), by_hand);
    }

    #[test]
    fn context_shapes() {
        let c = small_config();
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(vec![5, 8], 1.0));
        let first = bidirectional_context(&mut g, None, Some(a), 5, &c).unwrap();
        assert_eq!(g.shape(first), [10, 8]);
        assert!(g.value(first).data()[..40].iter().all(|&v| v == 0.0));
        let last = bidirectional_context(&mut g, Some(a), None, 5, &c).unwrap();
        assert!(g.value(last).data()[40..].iter().all(|&v| v == 0.0));
        assert!(g.value(last).data()[..40].iter().all(|&v| v == 1.0));
        let uni = DenoiserConfig {
            bidirectional: false,
            ..c.clone()
        };
        let half = bidirectional_context(&mut g, Some(a), Some(a), 5, &uni).unwrap();
        assert_eq!(g.shape(half), [5, 8]);
        assert!(bidirectional_context(&mut g, Some(a), None, 4, &c).is_err());
    }

    #[test]
    fn zero_params_give_output_bias() {
        let c = small_config();
        let mut store = init_params(&c, &mut Rng::new(1)).unwrap();
        for t in store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let bias: Vec<f64> = (0..FRAME_DIM).map(|i| i as f64 * 0.01 - 0.7).collect();
        store
            .get_mut("out_proj.bias")
            .unwrap()
            .data_mut()
            .copy_from_slice(&bias);
        let mut rng = Rng::new(2);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let z = g.constant(Tensor::matrix(5, FRAME_DIM, rng.normal_vec(5 * FRAME_DIM)).unwrap());
        let ctx = g.constant(Tensor::matrix(10, 8, rng.normal_vec(80)).unwrap());
        let sc = SliceCondition {
            music: g.constant(Tensor::matrix(5, 4, rng.normal_vec(20)).unwrap()),
            beat: g.constant(Tensor::full(vec![5, 1], 1.0)),
        };
        let tt = time_token(&mut g, &p, 17, &c).unwrap();
        let out = denoise_slice(&mut g, &p, &c, z, ctx, sc, tt).unwrap();
        assert_eq!(g.shape(out), [5, FRAME_DIM]);
        for r in 0..5 {
            assert_eq!(g.value(out).row(r), &bias[..]);
        }
    }

    #[test]
    fn slice_gradients_match_finite_differences() {
        let c = DenoiserConfig {
            hidden_dim: 4,
            feature_dim: 2,
            ..small_config()
        };
        let mut rng = Rng::new(3);
        let store = init_params(&c, &mut rng).unwrap();
        let z = Tensor::matrix(4, FRAME_DIM, rng.normal_vec(4 * FRAME_DIM)).unwrap();
        let ctx = Tensor::matrix(8, 4, rng.normal_vec(32)).unwrap();
        let music = Tensor::matrix(4, 2, rng.normal_vec(8)).unwrap();
        let mut inputs = vec![z, ctx];
        let names: Vec<String> = store.names().to_vec();
        inputs.extend(store.tensors().iter().cloned());
        let err = grad_check(
            |g, v| {
                let bound = BoundParams::from_parts(&names, &v[2..]);
                let sc = SliceCondition {
                    music: g.constant(music.clone()),
                    beat: g.constant(Tensor::matrix(4, 1, vec![1.0, 0.0, 0.0, 1.0]).unwrap()),
                };
                let tt = time_token(g, &bound, 9, &c)?;
                let out = denoise_slice(g, &bound, &c, v[0], v[1], sc, tt)?;
                let sq = g.mul(out, out)?;
                Ok(g.mean(sq))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn local_decoder_cases() {
        let c = small_config();
        let mut rng = Rng::new(4);
        let x = Tensor::matrix(12, FRAME_DIM, rng.normal_vec(12 * FRAME_DIM)).unwrap();
        let mut store = init_params(&c, &mut rng).unwrap();

        let off = DenoiserConfig {
            use_local_decoder: false,
            ..c.clone()
        };
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let y = local_info_decode(&mut g, &p, &off, xv).unwrap();
        assert_eq!(g.value(y), &x);

        // receptive field 2·(3−1)+1 = 5 frames: frame 6 sees frames 4..=8
        let yb = local_info_decode(&mut g, &p, &c, xv).unwrap();
        let base = g.value(yb).clone();
        for (frame, changes) in [(3, false), (4, true), (8, true), (9, false)] {
            let mut x2 = x.clone();
            x2.data_mut()[frame * FRAME_DIM + 3] += 1.0;
            let xv2 = g.constant(x2);
            let y2 = local_info_decode(&mut g, &p, &c, xv2).unwrap();
            let moved = g.value(y2).row(6) != base.row(6);
            assert_eq!(moved, changes, "frame {frame}");
        }

        for name in store.names().to_vec() {
            if name.starts_with("lid.") {
                store
                    .get_mut(&name)
                    .unwrap()
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = 0.0);
            }
        }
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let y = local_info_decode(&mut g, &p, &c, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn forward_shape_contacts_and_determinism() {
        let c = small_config();
        let model = Denoiser::new(c.clone(), 5).unwrap();
        let mut rng = Rng::new(6);
        let z = rng.normal_vec(12 * FRAME_DIM);
        let cond = random_condition(&mut rng, 12, 4);
        let a = model.forward(&z, 300, &cond).unwrap();
        assert_eq!(a.len(), 12 * FRAME_DIM);
        for f in 0..12 {
            for j in CONTACT_OFFSET..FRAME_DIM {
                let v = a[f * FRAME_DIM + j];
                assert!((0.0..=1.0).contains(&v));
            }
        }
        assert_eq!(a, model.forward(&z, 300, &cond).unwrap());
        assert!(model.forward(&z[..11 * FRAME_DIM], 300, &cond).is_err());
    }

    #[test]
    fn single_slice_has_zero_context() {
        let c = DenoiserConfig {
            slices: 1,
            use_local_decoder: false,
            ..small_config()
        };
        let model = Denoiser::new(c.clone(), 7).unwrap();
        let mut rng = Rng::new(8);
        let z = rng.normal_vec(6 * FRAME_DIM);
        let cond = random_condition(&mut rng, 6, 4);
        let out = model.forward(&z, 10, &cond).unwrap();

        let mut g = Graph::new();
        let p = model.params.bind_frozen(&mut g);
        let zv = g.constant(Tensor::matrix(6, FRAME_DIM, z).unwrap());
        let ctx = g.constant(Tensor::zeros(vec![12, 8]));
        let sc = SliceCondition {
            music: g.constant(Tensor::matrix(6, 4, cond.music.clone()).unwrap()),
            beat: g.constant(Tensor::matrix(6, 1, cond.beat.clone()).unwrap()),
        };
        let tt = time_token(&mut g, &p, 10, &c).unwrap();
        let y = denoise_slice(&mut g, &p, &c, zv, ctx, sc, tt).unwrap();
        let y = g.sigmoid_cols(y, CONTACT_OFFSET, FRAME_DIM).unwrap();
        assert_eq!(g.value(y).data(), &out[..]);
    }

    #[test]
    fn sequential_dependence() {
        let c = DenoiserConfig {
            use_local_decoder: false,
            ..small_config()
        };
        let model = Denoiser::new(c, 9).unwrap();
        let mut rng = Rng::new(10);
        let n = 12;
        let z = rng.normal_vec(n * FRAME_DIM);
        let cond = random_condition(&mut rng, n, 4);
        let base = model.forward(&z, 50, &cond).unwrap();
        let changed_slices = |frame: usize| {
            let mut z2 = z.clone();
            z2[frame * FRAME_DIM] += 0.5;
            let out = model.forward(&z2, 50, &cond).unwrap();
            (0..3)
                .map(|k| {
                    let r = k * 4 * FRAME_DIM..(k + 1) * 4 * FRAME_DIM;
                    out[r.clone()] != base[r]
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(changed_slices(1), vec![true, true, true]);
        assert_eq!(changed_slices(10), vec![false, true, true]);
    }

    #[test]
    fn all_flag_combinations_run() {
        let mut rng = Rng::new(11);
        let z = rng.normal_vec(12 * FRAME_DIM);
        let cond = random_condition(&mut rng, 12, 4);
        for mask in 0..8u8 {
            let c = DenoiserConfig {
                bidirectional: mask & 1 != 0,
                use_beat: mask & 2 != 0,
                use_local_decoder: mask & 4 != 0,
                ..small_config()
            };
            let out = Denoiser::new(c, 12).unwrap().forward(&z, 1, &cond).unwrap();
            assert_eq!(out.len(), 12 * FRAME_DIM);
            assert!(out.iter().all(|v| v.is_finite()));
        }
    }
}
