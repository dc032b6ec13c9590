//! Browser bindings: a synthetic beat-locked dance to animate, beat alignment
//! under a music shift, and the long-form blend weights.

use std::sync::Arc;

use badm::corpus::{make_synthetic_corpus, CorpusSpec, DanceItem};
use badm::diffusion::stitch_weights;
use badm::metrics::{beat_align_frames, motion_beats, BEAT_ALIGN_SIGMA};
use badm::motion::{sequence_positions, Skeleton};
use wasm_bindgen::prelude::*;

fn js(e: badm::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Dance {
    item: DanceItem,
    positions: Vec<f64>,
    motion_beats: Vec<usize>,
}

#[wasm_bindgen]
impl Dance {
    /// One corpus item at a fixed tempo.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, bpm: f64, frames: u32) -> Result<Dance, JsError> {
        Dance::build(seed as u64, bpm, frames as usize).map_err(js)
    }

    pub fn frames(&self) -> u32 {
        self.item.motion.len() as u32
    }

    pub fn fps(&self) -> u32 {
        self.item.motion.fps
    }

    /// Joint positions, `frames × 24 × 3`, y up.
    pub fn positions(&self) -> Vec<f64> {
        self.positions.clone()
    }

    pub fn music_beats(&self) -> Vec<u32> {
        self.item.beat_frames().iter().map(|&b| b as u32).collect()
    }

    /// Local minima of the smoothed mean joint speed.
    pub fn motion_beats(&self) -> Vec<u32> {
        self.motion_beats.iter().map(|&b| b as u32).collect()
    }

    /// Beat alignment after moving the music beats by `shift` frames.
    pub fn beat_alignment(&self, shift: i32) -> Result<f64, JsError> {
        self.alignment(shift as i64).map_err(js)
    }
}

impl Dance {
    pub fn build(seed: u64, bpm: f64, frames: usize) -> badm::Result<Dance> {
        let skeleton = Arc::new(Skeleton::smpl24());
        let spec = CorpusSpec {
            count: 1,
            n_frames: frames,
            bpm_min: bpm,
            bpm_max: bpm,
            seed,
            ..CorpusSpec::default()
        };
        let item = make_synthetic_corpus(&spec, &skeleton)?.remove(0);
        let positions = sequence_positions(&item.motion, &skeleton)?
            .iter()
            .flat_map(|p| p.iter().flatten().copied().collect::<Vec<_>>())
            .collect();
        let motion_beats = motion_beats(&item.motion, &skeleton)?;
        Ok(Dance {
            item,
            positions,
            motion_beats,
        })
    }

    pub fn alignment(&self, shift: i64) -> badm::Result<f64> {
        let n = self.item.motion.len() as i64;
        let music: Vec<usize> = self
            .item
            .beat_frames()
            .iter()
            .map(|&b| b as i64 + shift)
            .filter(|b| (0..n).contains(b))
            .map(|b| b as usize)
            .collect();
        beat_align_frames(&music, &self.motion_beats, BEAT_ALIGN_SIGMA)
    }
}

/// Parent index of each joint, `-1` for the root.
#[wasm_bindgen]
pub fn parents() -> Vec<i32> {
    Skeleton::smpl24().parents.iter().map(|&p| p as i32).collect()
}

/// Weight of each chunk at each output frame, `frames × chunks`.
#[wasm_bindgen]
pub fn blend_weights(chunks: u32, window: u32) -> Result<Vec<f64>, JsError> {
    weight_table(chunks as usize, window as usize).map_err(js)
}

pub fn weight_table(chunks: usize, window: usize) -> badm::Result<Vec<f64>> {
    let blends = stitch_weights(chunks, window)?;
    let mut out = vec![0.0; blends.len() * chunks];
    for (f, blend) in blends.iter().enumerate() {
        for &(c, _, w) in blend {
            out[f * chunks + c] = w;
        }
    }
    Ok(out)
}
