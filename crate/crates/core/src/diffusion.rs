//! Noise schedule, forward noising, samplers, guidance, masked editing and
//! long-form stitching.
//!
//! The model predicts clean motion directly (x-parameterisation). Reverse
//! steps either re-noise the prediction to the previous level or take a
//! deterministic DDIM step through the implied noise.

use serde::{Deserialize, Serialize};

use crate::conditioning::Condition;
use crate::error::{Error, Result};
use crate::motion::{MotionSequence, FRAME_DIM};
use crate::rng::Rng;

const COSINE_OFFSET: f64 = 0.008;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Cosine,
    Linear,
}

/// Cumulative signal levels `alpha_bar[0..=T]`, `alpha_bar[0] = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub steps: usize,
    pub alpha_bar: Vec<f64>,
}

pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::BadT(steps));
    }
    let t_max = steps as f64;
    let alpha_bar: Vec<f64> = match kind {
        ScheduleKind::Cosine => {
            let f = |t: f64| {
                let a = ((t / t_max + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)) * std::f64::consts::FRAC_PI_2;
                a.cos().powi(2)
            };
            let f0 = f(0.0);
            (0..=steps)
                .map(|t| if t == 0 { 1.0 } else { (f(t as f64) / f0).max(1e-12) })
                .collect()
        }
        ScheduleKind::Linear => {
            // betas 1e-4..0.02 at T=1000, rescaled for other T
            let scale = 1000.0 / t_max;
            let (lo, hi) = (1e-4 * scale, 0.02 * scale);
            let mut acc = 1.0;
            let mut out = vec![1.0];
            for t in 1..=steps {
                let frac = if steps == 1 {
                    1.0
                } else {
                    (t - 1) as f64 / (t_max - 1.0)
                };
                let beta = (lo + (hi - lo) * frac).min(0.9999);
                acc *= 1.0 - beta;
                out.push(acc);
            }
            out
        }
    };
    let sched = DiffusionSchedule { steps, alpha_bar };
    sched.validate()?;
    Ok(sched)
}

impl DiffusionSchedule {
    pub fn validate(&self) -> Result<()> {
        let a = &self.alpha_bar;
        if a.len() != self.steps + 1 || a[0] != 1.0 {
            return Err(Error::BadT(self.steps));
        }
        if a.windows(2).any(|w| w[1] >= w[0] || w[1] <= 0.0) || a[self.steps] >= 1e-3 {
            return Err(Error::BadT(self.steps));
        }
        Ok(())
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::StepOutOfRange {
                step: t,
                max: self.steps,
            });
        }
        Ok(())
    }
}

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("{what}: {a} vs {b} values")));
    }
    Ok(())
}

/// `z_t = √ᾱ_t · x + √(1 − ᾱ_t) · noise`.
pub fn q_sample(x: &[f64], t: usize, noise: &[f64], sched: &DiffusionSchedule) -> Result<Vec<f64>> {
    sched.check(t)?;
    same_len(x.len(), noise.len(), "q_sample")?;
    let a = sched.alpha_bar[t];
    let (s, n) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(x.iter().zip(noise).map(|(x, e)| s * x + n * e).collect())
}

/// Re-noises a clean prediction to level `t - 1`.
pub fn reverse_step(x_hat: &[f64], t: usize, sched: &DiffusionSchedule, rng: &mut Rng) -> Result<Vec<f64>> {
    if t == 0 {
        return Err(Error::StepOutOfRange {
            step: t,
            max: sched.steps,
        });
    }
    sched.check(t)?;
    let noise = rng.normal_vec(x_hat.len());
    q_sample(x_hat, t - 1, &noise, sched)
}

/// Deterministic DDIM update from level `t` to `t_prev` (η = 0).
pub fn ddim_step(x_hat: &[f64], z_t: &[f64], t: usize, t_prev: usize, sched: &DiffusionSchedule) -> Result<Vec<f64>> {
    sched.check(t)?;
    if t_prev >= t {
        return Err(Error::StepOutOfRange {
            step: t_prev,
            max: t.saturating_sub(1),
        });
    }
    same_len(x_hat.len(), z_t.len(), "ddim_step")?;
    let a_t = sched.alpha_bar[t];
    let a_p = sched.alpha_bar[t_prev];
    let (sa_t, sn_t) = (a_t.sqrt(), (1.0 - a_t).sqrt());
    let (sa_p, sn_p) = (a_p.sqrt(), (1.0 - a_p).sqrt());
    Ok(x_hat
        .iter()
        .zip(z_t)
        .map(|(x, z)| {
            let eps = (z - sa_t * x) / sn_t;
            sa_p * x + sn_p * eps
        })
        .collect())
}

/// Guidance blend `w · x_cond + (1 − w) · x_uncond`.
pub fn cfg_blend(x_cond: &[f64], x_uncond: &[f64], w: f64) -> Result<Vec<f64>> {
    same_len(x_cond.len(), x_uncond.len(), "cfg_blend")?;
    Ok(x_cond
        .iter()
        .zip(x_uncond)
        .map(|(c, u)| w * c + (1.0 - w) * u)
        .collect())
}

/// Region held to known values during sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct EditMask {
    /// `N × 151` entries, each 0 or 1.
    pub mask: Vec<f64>,
    /// Known motion, flat `N × 151`.
    pub known: Vec<f64>,
}

impl EditMask {
    pub fn new(mask: Vec<f64>, known: Vec<f64>) -> Result<Self> {
        same_len(mask.len(), known.len(), "edit mask")?;
        if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::MaskOutOfRange("mask entries must be 0 or 1".into()));
        }
        Ok(Self { mask, known })
    }

    pub fn full(known: Vec<f64>) -> Self {
        Self {
            mask: vec![1.0; known.len()],
            known,
        }
    }
}

/// Overwrites masked entries of `z_prev` with the known motion diffused to
/// level `t - 1`.
pub fn apply_edit_mask(
    z_prev: &[f64],
    mask: &EditMask,
    t: usize,
    sched: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if t == 0 {
        return Err(Error::StepOutOfRange {
            step: 0,
            max: sched.steps,
        });
    }
    apply_edit_mask_at(z_prev, mask, t - 1, sched, rng)
}

/// As [`apply_edit_mask`] with the target level given directly.
pub fn apply_edit_mask_at(
    z_prev: &[f64],
    mask: &EditMask,
    level: usize,
    sched: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    same_len(z_prev.len(), mask.mask.len(), "apply_edit_mask")?;
    let noise = rng.normal_vec(z_prev.len());
    let known = q_sample(&mask.known, level, &noise, sched)?;
    Ok(z_prev
        .iter()
        .zip(&known)
        .zip(&mask.mask)
        .map(|((z, k), m)| m * k + (1.0 - m) * z)
        .collect())
}

/// A clean-motion predictor `x̂(z_t, t, condition)`.
pub trait Denoise {
    fn predict(&self, z_t: &[f64], t: usize, cond: &Condition) -> Result<Vec<f64>>;
}

impl<F> Denoise for F
where
    F: Fn(&[f64], usize, &Condition) -> Result<Vec<f64>>,
{
    fn predict(&self, z_t: &[f64], t: usize, cond: &Condition) -> Result<Vec<f64>> {
        self(z_t, t, cond)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleConfig {
    pub guidance: f64,
    /// Number of retained steps. Equal to T selects the re-noising sampler.
    pub ddim_steps: usize,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            guidance: 2.0,
            ddim_steps: 50,
            seed: 0,
        }
    }
}

/// Retained levels `[0, …, T]` with uniform stride.
pub fn sampling_levels(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::InvalidConfig(format!(
            "sampling steps must be in 1..={total}, got {steps}"
        )));
    }
    Ok((0..=steps).map(|i| i * total / steps).collect())
}

enum Guidance {
    Blend(f64),
    ConditionalOnly,
}

/// Full reverse process with classifier-free guidance.
pub fn sample<M: Denoise + ?Sized>(
    model: &M,
    cond: &Condition,
    sched: &DiffusionSchedule,
    cfg: &SampleConfig,
    edit: Option<&EditMask>,
    fps: u32,
) -> Result<MotionSequence> {
    run_sampler(model, cond, sched, cfg, edit, fps, Guidance::Blend(cfg.guidance))
}

/// Reverse process that only queries the conditional branch.
pub fn sample_conditional_only<M: Denoise + ?Sized>(
    model: &M,
    cond: &Condition,
    sched: &DiffusionSchedule,
    cfg: &SampleConfig,
    edit: Option<&EditMask>,
    fps: u32,
) -> Result<MotionSequence> {
    run_sampler(model, cond, sched, cfg, edit, fps, Guidance::ConditionalOnly)
}

fn run_sampler<M: Denoise + ?Sized>(
    model: &M,
    cond: &Condition,
    sched: &DiffusionSchedule,
    cfg: &SampleConfig,
    edit: Option<&EditMask>,
    fps: u32,
    guidance: Guidance,
) -> Result<MotionSequence> {
    let len = cond.n_frames * FRAME_DIM;
    if let Some(e) = edit {
        same_len(e.mask.len(), len, "edit mask vs condition")?;
    }
    let levels = sampling_levels(sched.steps, cfg.ddim_steps)?;
    let renoise = cfg.ddim_steps == sched.steps;
    let null = cond.to_null();
    let mut rng = Rng::new(cfg.seed);
    let mut z = rng.normal_vec(len);
    for i in (1..levels.len()).rev() {
        let (t, t_prev) = (levels[i], levels[i - 1]);
        let x_cond = model.predict(&z, t, cond)?;
        same_len(x_cond.len(), len, "model output")?;
        let x_hat = match guidance {
            Guidance::ConditionalOnly => x_cond,
            Guidance::Blend(w) => {
                let x_uncond = model.predict(&z, t, &null)?;
                cfg_blend(&x_cond, &x_uncond, w)?
            }
        };
        z = if renoise {
            reverse_step(&x_hat, t, sched, &mut rng)?
        } else {
            ddim_step(&x_hat, &z, t, t_prev, sched)?
        };
        if let Some(e) = edit {
            z = apply_edit_mask_at(&z, e, t_prev, sched, &mut rng)?;
        }
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericFailure("sampled motion".into()));
    }
    MotionSequence::from_flat(fps, &z)
}

/// Blend contributions for one output frame: `(chunk, frame in chunk, weight)`.
pub type FrameBlend = Vec<(usize, usize, f64)>;

/// Per-frame blend weights for `n_chunks` windows of `chunk_len` frames
/// placed at stride `chunk_len / 2`. In each overlap the incoming chunk's
/// weight rises linearly from 0 to 1.
pub fn stitch_weights(n_chunks: usize, chunk_len: usize) -> Result<Vec<FrameBlend>> {
    if n_chunks == 0 {
        return Err(Error::BadChunkLength("no chunks".into()));
    }
    if chunk_len < 4 || chunk_len % 2 != 0 {
        return Err(Error::BadChunkLength(format!(
            "chunk length {chunk_len} must be even and at least 4"
        )));
    }
    let half = chunk_len / 2;
    let total = chunk_len + (n_chunks - 1) * half;
    let mut out = Vec::with_capacity(total);
    for f in 0..total {
        // chunk c covers [c·half, c·half + chunk_len)
        let last = (f / half).min(n_chunks - 1);
        let first = if f >= chunk_len { (f - chunk_len) / half + 1 } else { 0 };
        let entry = if first == last {
            vec![(last, f - last * half, 1.0)]
        } else {
            let j = f - last * half;
            let lambda = j as f64 / (half - 1) as f64;
            vec![(first, f - first * half, 1.0 - lambda), (last, j, lambda)]
        };
        out.push(entry);
    }
    Ok(out)
}

/// Joins overlapping windows with a linear cross-fade.
pub fn long_form_stitch(chunks: &[MotionSequence]) -> Result<MotionSequence> {
    let first = chunks
        .first()
        .ok_or_else(|| Error::BadChunkLength("no chunks".into()))?;
    let n = first.len();
    if chunks.iter().any(|c| c.len() != n) {
        return Err(Error::BadChunkLength("chunks differ in length".into()));
    }
    if chunks.len() == 1 {
        return Ok(first.clone());
    }
    let weights = stitch_weights(chunks.len(), n)?;
    let flats: Vec<Vec<f64>> = chunks.iter().map(MotionSequence::to_flat).collect();
    let mut out = vec![0.0; weights.len() * FRAME_DIM];
    for (f, blend) in weights.iter().enumerate() {
        let dst = &mut out[f * FRAME_DIM..(f + 1) * FRAME_DIM];
        for &(c, local, w) in blend {
            let src = &flats[c][local * FRAME_DIM..(local + 1) * FRAME_DIM];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
    MotionSequence::from_flat(first.fps, &out)
}

/// Frames covered by `n_chunks` windows of `window` frames at stride `window / 2`.
pub fn long_form_len(n_chunks: usize, window: usize) -> usize {
    if n_chunks == 0 {
        0
    } else {
        window + (n_chunks - 1) * (window / 2)
    }
}

/// Smallest chunk count whose stitched length reaches `frames`.
pub fn chunks_needed(frames: usize, window: usize) -> usize {
    let half = (window / 2).max(1);
    1 + frames.saturating_sub(window).div_ceil(half)
}

/// Stitched output plus the chunks it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct LongForm {
    pub motion: MotionSequence,
    pub chunks: Vec<MotionSequence>,
}

/// Samples windows of `window` frames at stride `window / 2`, each under its
/// own slice of `cond` and seed `cfg.seed + chunk`, stitches them and keeps
/// the first `frames` frames.
pub fn generate_long<M: Denoise + ?Sized>(
    model: &M,
    cond: &Condition,
    sched: &DiffusionSchedule,
    cfg: &SampleConfig,
    window: usize,
    frames: usize,
    fps: u32,
) -> Result<LongForm> {
    if frames == 0 {
        return Err(Error::BadChunkLength("requested zero frames".into()));
    }
    let n_chunks = chunks_needed(frames, window);
    let covered = long_form_len(n_chunks, window);
    if cond.n_frames < covered {
        return Err(Error::FeatureTooShort {
            needed: covered,
            got: cond.n_frames,
        });
    }
    if n_chunks > 1 {
        stitch_weights(n_chunks, window)?;
    }
    let chunks = (0..n_chunks)
        .map(|c| {
            let start = c * (window / 2);
            let sub = cond.window(start..start + window)?;
            let chunk_cfg = SampleConfig {
                seed: cfg.seed.wrapping_add(c as u64),
                ..*cfg
            };
            sample(model, &sub, sched, &chunk_cfg, None, fps)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut motion = long_form_stitch(&chunks)?;
    motion.frames.truncate(frames);
    Ok(LongForm { motion, chunks })
}
