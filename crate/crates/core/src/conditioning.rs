//! Music and beat conditions.
//!
//! A [`Condition`] carries a per-frame music feature matrix and a one-hot beat
//! track of the same length. The null condition stands for "no music": its
//! contents are zeros and the denoiser sees nothing but the noisy motion.

use std::ops::Range;

use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Analysis window of the onset envelope, in samples.
pub const ONSET_WINDOW: usize = 1024;
/// Half-width (frames) of the local statistics used for peak picking.
pub const PEAK_STATS_RADIUS: usize = 7;
/// Peaks must exceed local mean + this many local standard deviations.
pub const PEAK_STD_FACTOR: f64 = 1.0;
/// Minimum spacing between picked beats, seconds.
pub const MIN_BEAT_GAP_SECONDS: f64 = 0.25;

/// Time constant (frames) of the beat envelope used by [`synth_features`].
pub const BEAT_ENVELOPE_DECAY: f64 = 4.0;
/// Sinusoid frequencies (Hz) used by [`synth_features`].
pub const RAMP_FREQUENCIES: [f64; 4] = [0.25, 0.5, 1.0, 2.0];

#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub n_frames: usize,
    pub feature_dim: usize,
    /// Row-major `n_frames × feature_dim`.
    pub music: Vec<f64>,
    /// One value per frame, each 0 or 1.
    pub beat: Vec<f64>,
    pub is_null: bool,
}

impl Condition {
    pub fn new(n_frames: usize, feature_dim: usize, music: Vec<f64>, beat: Vec<f64>) -> Result<Self> {
        if music.len() != n_frames * feature_dim {
            return Err(Error::ShapeMismatch(format!(
                "music features have {} values, expected {n_frames}×{feature_dim}",
                music.len()
            )));
        }
        if beat.len() != n_frames {
            return Err(Error::ShapeMismatch(format!(
                "beat vector has {} frames, expected {n_frames}",
                beat.len()
            )));
        }
        Ok(Self {
            n_frames,
            feature_dim,
            music,
            beat,
            is_null: false,
        })
    }

    pub fn null(n_frames: usize, feature_dim: usize) -> Self {
        Self {
            n_frames,
            feature_dim,
            music: vec![0.0; n_frames * feature_dim],
            beat: vec![0.0; n_frames],
            is_null: true,
        }
    }

    /// Same shape, contents dropped.
    pub fn to_null(&self) -> Self {
        Self::null(self.n_frames, self.feature_dim)
    }

    /// Frames `range` of this condition.
    pub fn window(&self, range: Range<usize>) -> Result<Self> {
        if range.end > self.n_frames || range.start > range.end {
            return Err(Error::FeatureTooShort {
                needed: range.end,
                got: self.n_frames,
            });
        }
        let f = self.feature_dim;
        Ok(Self {
            n_frames: range.len(),
            feature_dim: f,
            music: self.music[range.start * f..range.end * f].to_vec(),
            beat: self.beat[range].to_vec(),
            is_null: self.is_null,
        })
    }

    /// Indices of frames with a beat.
    pub fn beat_frames(&self) -> Vec<usize> {
        beat_indices(&self.beat)
    }
}

pub fn beat_indices(beat: &[f64]) -> Vec<usize> {
    beat.iter()
        .enumerate()
        .filter(|(_, &b)| b > 0.5)
        .map(|(i, _)| i)
        .collect()
}

pub fn beats_to_vector(frames: &[usize], n_frames: usize) -> Result<Vec<f64>> {
    let mut v = vec![0.0; n_frames];
    for &f in frames {
        if f >= n_frames {
            return Err(Error::ShapeMismatch(format!(
                "beat at frame {f} outside {n_frames} frames"
            )));
        }
        v[f] = 1.0;
    }
    Ok(v)
}

/// Contiguous equal partition of `len` frames into `parts` slices. Noise
/// slicing and condition slicing both go through here.
pub fn partition(len: usize, parts: usize) -> Result<Vec<Range<usize>>> {
    if parts == 0 || len % parts != 0 {
        return Err(Error::NotDivisible { len, parts });
    }
    let step = len / parts;
    Ok((0..parts).map(|k| k * step..(k + 1) * step).collect())
}

/// Per-slice conditions aligned with the noise slices.
pub fn slice_conditions(cond: &Condition, k: usize) -> Result<Vec<Condition>> {
    partition(cond.n_frames, k)?
        .into_iter()
        .map(|r| cond.window(r))
        .collect()
}

/// Replaces the condition with the null condition with probability `p`.
/// Music and beat are dropped together.
pub fn condition_dropout(cond: &Condition, p: f64, rng: &mut Rng) -> Result<Condition> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::BadProbability(p));
    }
    if rng.uniform() < p {
        Ok(cond.to_null())
    } else {
        Ok(cond.clone())
    }
}

/// Positive spectral flux, one value per video frame. Frame `i` analyses a
/// Hann-windowed block of [`ONSET_WINDOW`] samples centred on sample
/// `round(i · sample_rate / fps)`; samples outside the signal are zero.
pub fn onset_envelope(pcm: &[f64], sample_rate: u32, fps: u32, n_frames: usize) -> Result<Vec<f64>> {
    if sample_rate == 0 || fps == 0 || sample_rate < fps {
        return Err(Error::BadSampleRate(sample_rate));
    }
    let hop = sample_rate as f64 / fps as f64;
    let needed = (n_frames as f64 * hop).ceil() as usize;
    if pcm.len() < needed {
        return Err(Error::AudioTooShort { needed, got: pcm.len() });
    }
    let window: Vec<f64> = (0..ONSET_WINDOW)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / ONSET_WINDOW as f64).cos())
        .collect();
    let fft = FftPlanner::new().plan_fft_forward(ONSET_WINDOW);
    let bins = ONSET_WINDOW / 2 + 1;
    let mut prev = vec![0.0; bins];
    let mut env = Vec::with_capacity(n_frames);
    let mut buf = vec![Complex::new(0.0, 0.0); ONSET_WINDOW];
    for i in 0..n_frames {
        let centre = (i as f64 * hop).round() as isize;
        let start = centre - (ONSET_WINDOW / 2) as isize;
        for (j, b) in buf.iter_mut().enumerate() {
            let s = start + j as isize;
            let x = if s >= 0 && (s as usize) < pcm.len() {
                pcm[s as usize]
            } else {
                0.0
            };
            *b = Complex::new(x * window[j], 0.0);
        }
        fft.process(&mut buf);
        let mut flux = 0.0;
        for (k, p) in prev.iter_mut().enumerate() {
            let mag = buf[k].norm();
            flux += (mag - *p).max(0.0);
            *p = mag;
        }
        env.push(flux);
    }
    Ok(env)
}

/// Frames whose onset strength is a local maximum above the local
/// mean + std, spaced at least [`MIN_BEAT_GAP_SECONDS`] apart.
pub fn pick_peaks(env: &[f64], fps: u32) -> Vec<usize> {
    let n = env.len();
    let mut picked: Vec<usize> = Vec::new();
    for i in 0..n {
        let v = env[i];
        if v <= 0.0 {
            continue;
        }
        if (i > 0 && env[i - 1] > v) || (i + 1 < n && env[i + 1] > v) {
            continue;
        }
        let lo = i.saturating_sub(PEAK_STATS_RADIUS);
        let hi = (i + PEAK_STATS_RADIUS + 1).min(n);
        let w = &env[lo..hi];
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64;
        if v <= mean + PEAK_STD_FACTOR * var.sqrt() {
            continue;
        }
        if let Some(&last) = picked.last() {
            if ((i - last) as f64) / (fps as f64) < MIN_BEAT_GAP_SECONDS {
                continue;
            }
        }
        picked.push(i);
    }
    picked
}

/// One-hot beat track for `n_frames` video frames from mono audio.
pub fn extract_beats(pcm: &[f64], sample_rate: u32, fps: u32, n_frames: usize) -> Result<Vec<f64>> {
    let env = onset_envelope(pcm, sample_rate, fps, n_frames)?;
    beats_to_vector(&pick_peaks(&env, fps), n_frames)
}

/// Settings for procedural music features.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureSpec {
    pub dim: usize,
    pub seed: u64,
    pub fps: u32,
}

/// Causal beat envelope: each beat starts an exponential decay.
pub fn beat_envelope(beat: &[f64]) -> Vec<f64> {
    let decay = (-1.0 / BEAT_ENVELOPE_DECAY).exp();
    let mut acc = 0.0;
    beat.iter()
        .map(|b| {
            acc = acc * decay + b;
            acc
        })
        .collect()
}

/// Deterministic stand-in for learned audio features.
///
/// Nine base signals are built per frame: the beat envelope and sin/cos of
/// time at each of [`RAMP_FREQUENCIES`]. They are mixed into `dim` channels by
/// a seeded uniform(-1, 1) matrix. Channel 0 is pinned to
/// `envelope + 0.1 · (seeded mix of the sinusoids)`, so it tracks the beat.
pub fn synth_features(spec: &FeatureSpec, beat: &[f64]) -> Result<Vec<f64>> {
    if spec.dim == 0 || spec.fps == 0 {
        return Err(Error::BadSpec("feature dim and fps must be positive".into()));
    }
    let n = beat.len();
    let env = beat_envelope(beat);
    let n_base = 1 + 2 * RAMP_FREQUENCIES.len();
    let mut rng = Rng::new(spec.seed);
    let mut proj = vec![0.0; n_base * spec.dim];
    for v in proj.iter_mut() {
        *v = rng.uniform_range(-1.0, 1.0);
    }
    proj[0] = 1.0;
    for s in 1..n_base {
        proj[s * spec.dim] *= 0.1;
    }
    let mut out = vec![0.0; n * spec.dim];
    let mut base = vec![0.0; n_base];
    for i in 0..n {
        let t = i as f64 / spec.fps as f64;
        base[0] = env[i];
        for (k, f) in RAMP_FREQUENCIES.iter().enumerate() {
            let a = 2.0 * std::f64::consts::PI * f * t;
            base[1 + 2 * k] = a.sin();
            base[2 + 2 * k] = a.cos();
        }
        let row = &mut out[i * spec.dim..(i + 1) * spec.dim];
        for (s, b) in base.iter().enumerate() {
            for (c, r) in row.iter_mut().enumerate() {
                *r += b * proj[s * spec.dim + c];
            }
        }
    }
    Ok(out)
}
