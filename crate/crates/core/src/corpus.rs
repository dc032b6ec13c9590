//! Synthetic beat-locked dance corpus.
//!
//! Every item draws a tempo and a phase offset. Limbs swing back and forth
//! once per beat along `g(u) = u − sin(2πu)/2π`, which has zero velocity at
//! each beat, so the body comes to rest exactly on the music beats. Legs lift
//! on alternate beats and the root bobs with the same phase.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::conditioning::{beats_to_vector, synth_features, Condition, FeatureSpec};
use crate::error::{Error, Result};
use crate::motion::{
    axis_angle, compute_contact_labels, default_contact_threshold, mat_mul, matrix_to_rot6d, Mat3, MotionSequence,
    PoseFrame, Skeleton,
};
use crate::rng::Rng;

/// Root height at which the rest-pose toes touch the ground.
pub const STANDING_HEIGHT: f64 = 0.93;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub count: usize,
    pub n_frames: usize,
    pub fps: u32,
    pub bpm_min: f64,
    pub bpm_max: f64,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            count: 64,
            n_frames: 150,
            fps: 30,
            bpm_min: 90.0,
            bpm_max: 140.0,
            feature_dim: 35,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadSpec(m));
        if self.count == 0 {
            return bad("count must be at least 1".into());
        }
        if self.n_frames < 3 {
            return bad(format!("n_frames {} is below 3", self.n_frames));
        }
        if self.fps == 0 {
            return bad("fps must be positive".into());
        }
        if !(self.bpm_min > 0.0 && self.bpm_min <= self.bpm_max && self.bpm_max.is_finite()) {
            return bad(format!("bpm range [{}, {}] is invalid", self.bpm_min, self.bpm_max));
        }
        // at least two frames per beat so that beats stay distinct
        if 60.0 * self.fps as f64 / self.bpm_max < 2.0 {
            return bad(format!("bpm {} is too fast for {} fps", self.bpm_max, self.fps));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be at least 1".into());
        }
        Ok(())
    }
}

/// One motion with its music condition.
#[derive(Clone, Debug, PartialEq)]
pub struct DanceItem {
    pub motion: MotionSequence,
    pub condition: Condition,
}

impl DanceItem {
    pub fn beat_frames(&self) -> Vec<usize> {
        self.condition.beat_frames()
    }
}

/// Per-item movement style.
struct Style {
    period: f64,
    offset: f64,
    arm: f64,
    torso: f64,
    kick: f64,
    bob: f64,
    first_leg_left: bool,
}

/// Phase within the current beat and the beat index.
fn beat_phase(t: f64, style: &Style) -> (i64, f64) {
    let s = (t - style.offset) / style.period;
    let k = s.floor();
    (k as i64, s - k)
}

fn ease(u: f64) -> f64 {
    u - (TAU * u).sin() / TAU
}

fn lift(u: f64) -> f64 {
    0.5 * (1.0 - (TAU * u).cos())
}

fn rot(axis: [f64; 3], angle: f64) -> [f64; 6] {
    matrix_to_rot6d(&axis_angle(axis, angle)).expect("axis-angle matrices are rotations")
}

fn rot_mat(m: &Mat3) -> [f64; 6] {
    matrix_to_rot6d(m).expect("products of rotations are rotations")
}

fn pose_at(t: f64, style: &Style) -> PoseFrame {
    const X: [f64; 3] = [1.0, 0.0, 0.0];
    const Y: [f64; 3] = [0.0, 1.0, 0.0];
    const Z: [f64; 3] = [0.0, 0.0, 1.0];
    let (k, u) = beat_phase(t, style);
    let sign = if k.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
    // sway in [-1, 1], travelling one way per beat
    let w = sign * (2.0 * ease(u) - 1.0);
    let h = lift(u);

    let mut f = PoseFrame::identity([0.0, STANDING_HEIGHT + style.bob * h, 0.0]);
    f.rotations[0] = rot(Y, 0.05 * w);
    f.rotations[3] = rot(Z, style.torso * w);
    f.rotations[6] = rot(X, 0.5 * style.torso * w);
    f.rotations[15] = rot(Y, -0.3 * w);
    // arms lowered from the rest T-pose, swinging up and down
    f.rotations[16] = rot_mat(&mat_mul(&axis_angle(Z, -1.0 + style.arm * w), &axis_angle(Y, 0.2 * w)));
    f.rotations[17] = rot(Z, 1.0 + style.arm * w);
    f.rotations[18] = rot(Y, 0.4 + 0.3 * w);
    f.rotations[19] = rot(Y, -0.4 + 0.3 * w);

    let left_lifts = (k.rem_euclid(2) == 0) == style.first_leg_left;
    let (hip, knee) = if left_lifts { (1, 4) } else { (2, 5) };
    f.rotations[hip] = rot(X, -style.kick * h);
    f.rotations[knee] = rot(X, 1.6 * style.kick * h);
    f
}

fn make_item(spec: &CorpusSpec, index: usize, skeleton: &Skeleton) -> Result<DanceItem> {
    let mut rng = Rng::with_stream(spec.seed, index as u64);
    let bpm = rng.uniform_range(spec.bpm_min, spec.bpm_max);
    let fps = spec.fps as f64;
    let period = 60.0 * fps / bpm;
    let style = Style {
        period,
        offset: rng.uniform_range(0.0, period),
        arm: rng.uniform_range(0.3, 0.6),
        torso: rng.uniform_range(0.05, 0.15),
        kick: rng.uniform_range(0.3, 0.6),
        bob: rng.uniform_range(0.02, 0.05),
        first_leg_left: rng.uniform() < 0.5,
    };
    let mut beats = Vec::new();
    let mut b = style.offset;
    while b.round() < spec.n_frames as f64 {
        beats.push(b.round() as usize);
        b += period;
    }
    let frames = (0..spec.n_frames).map(|i| pose_at(i as f64, &style)).collect();
    let mut motion = MotionSequence { fps: spec.fps, frames };
    let labels = compute_contact_labels(&motion, skeleton, default_contact_threshold(spec.fps))?;
    for (f, c) in motion.frames.iter_mut().zip(labels) {
        f.contacts = c;
    }
    let beat = beats_to_vector(&beats, spec.n_frames)?;
    let feature_spec = FeatureSpec {
        dim: spec.feature_dim,
        seed: spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64),
        fps: spec.fps,
    };
    let music = synth_features(&feature_spec, &beat)?;
    let condition = Condition::new(spec.n_frames, spec.feature_dim, music, beat)?;
    Ok(DanceItem { motion, condition })
}

/// Deterministic corpus of `spec.count` beat-locked items.
pub fn make_synthetic_corpus(spec: &CorpusSpec, skeleton: &Skeleton) -> Result<Vec<DanceItem>> {
    spec.validate()?;
    (0..spec.count).map(|i| make_item(spec, i, skeleton)).collect()
}

/// Shifts every beat by `shift` frames (dropping those that leave the
/// sequence) and rebuilds the features, leaving the motion untouched.
pub fn shift_beats(item: &DanceItem, shift: i64, feature_seed: u64) -> Result<DanceItem> {
    let n = item.condition.n_frames as i64;
    let beats: Vec<usize> = item
        .beat_frames()
        .iter()
        .map(|&b| b as i64 + shift)
        .filter(|&b| (0..n).contains(&b))
        .map(|b| b as usize)
        .collect();
    let beat = beats_to_vector(&beats, n as usize)?;
    let spec = FeatureSpec {
        dim: item.condition.feature_dim,
        seed: feature_seed,
        fps: item.motion.fps,
    };
    let music = synth_features(&spec, &beat)?;
    Ok(DanceItem {
        motion: item.motion.clone(),
        condition: Condition::new(n as usize, spec.dim, music, beat)?,
    })
}

/// Half a beat period in frames, from the mean spacing of `beats`.
pub fn half_period(beats: &[usize]) -> Option<i64> {
    if beats.len() < 2 {
        return None;
    }
    let span = (beats[beats.len() - 1] - beats[0]) as f64 / (beats.len() - 1) as f64;
    Some((span / 2.0).round() as i64)
}
