//! File formats: the `.bdt` tensor container, checkpoints, motion, feature,
//! beat and mask JSON, dataset directories and WAV input.
//!
//! `.bdt` layout: `"BADM"`, then little-endian `u32` version (1), rows and
//! cols, then `rows × cols` little-endian `f32` values in row-major order.
//!
//! Checkpoint layout: `"BDCK"`, `u32` version (1), `u32` header length, the
//! header JSON, then one block per tensor in header order: `u32` name length,
//! the UTF-8 name, and a `.bdt` block holding the tensor as
//! `shape[0] × (product of the remaining dims)`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::conditioning::{beats_to_vector, Condition};
use crate::corpus::DanceItem;
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::motion::{MotionSequence, CONTACT_DIM, CONTACT_OFFSET, FRAME_DIM, JOINT_COUNT, ROOT_OFFSET};
use crate::nn::{ParamStore, Tensor};

pub const BDT_MAGIC: &[u8; 4] = b"BADM";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BDCK";
pub const FORMAT_VERSION: u32 = 1;

/// Embedded in every output so a file records how it was made.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
}

impl Provenance {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            tool: "badm".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            config,
        }
    }
}

// --- raw helpers -------------------------------------------------------------

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!("truncated: need {n} bytes at offset {}", self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let found = self.take(4.min(self.bytes.len() - self.pos))?;
        if found != expected {
            return Err(Error::BadMagic {
                path: self.path.to_path_buf(),
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                path: self.path.to_path_buf(),
                version,
            });
        }
        Ok(())
    }
}

// --- .bdt --------------------------------------------------------------------

/// Row-major matrix as stored in a `.bdt` block.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

fn push_bdt(out: &mut Vec<u8>, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    if rows * cols != data.len() {
        return Err(Error::ShapeMismatch(format!(
            "{rows}×{cols} block with {} values",
            data.len()
        )));
    }
    let dim = |v: usize| u32::try_from(v).map_err(|_| Error::ShapeMismatch(format!("dimension {v} too large")));
    out.extend_from_slice(BDT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&dim(rows)?.to_le_bytes());
    out.extend_from_slice(&dim(cols)?.to_le_bytes());
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(())
}

fn read_bdt_block(r: &mut Reader) -> Result<Matrix> {
    r.magic(BDT_MAGIC)?;
    r.version()?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::format(r.path, "block dimensions overflow"))?;
    let raw = r.take(
        n.checked_mul(4)
            .ok_or_else(|| Error::format(r.path, "block too large"))?,
    )?;
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(Matrix { rows, cols, data })
}

pub fn encode_bdt(rows: usize, cols: usize, data: &[f64]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 4 * data.len());
    push_bdt(&mut out, rows, cols, data)?;
    Ok(out)
}

/// Decodes a complete `.bdt` file; `path` is used in error messages only.
pub fn decode_bdt(bytes: &[u8], path: &Path) -> Result<Matrix> {
    let mut r = Reader { bytes, pos: 0, path };
    let m = read_bdt_block(&mut r)?;
    if r.pos != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(m)
}

pub fn save_bdt(path: &Path, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    write_bytes(path, &encode_bdt(rows, cols, data)?)
}

pub fn load_bdt(path: &Path) -> Result<Matrix> {
    decode_bdt(&read_bytes(path)?, path)
}

// --- checkpoints -------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    model: DenoiserConfig,
    tensors: Vec<TensorEntry>,
    provenance: Provenance,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Denoiser,
    pub provenance: Provenance,
}

impl Checkpoint {
    /// Parameters are stored as `f32`.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let params = &self.model.params;
        let header = CheckpointHeader {
            model: self.model.config.clone(),
            tensors: params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            provenance: self.provenance.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::format("<checkpoint>", e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (name, t) in params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rows = t.shape().first().copied().unwrap_or(1);
            let cols = if rows == 0 { 0 } else { t.len() / rows };
            push_bdt(&mut out, rows, cols, t.data())?;
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        r.magic(CHECKPOINT_MAGIC)?;
        r.version()?;
        let len = r.u32()? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::format(path, format!("header: {e}")))?;
        let mut store = ParamStore::new();
        for entry in &header.tensors {
            let name_len = r.u32()? as usize;
            let name =
                std::str::from_utf8(r.take(name_len)?).map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
            if name != entry.name {
                return Err(Error::format(
                    path,
                    format!("tensor block {name:?} where header lists {:?}", entry.name),
                ));
            }
            let m = read_bdt_block(&mut r)?;
            let tensor = Tensor::new(entry.shape.clone(), m.data)
                .map_err(|e| Error::format(path, format!("tensor {name}: {e}")))?;
            store.insert(name, tensor);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let model = Denoiser::from_params(header.model, store).map_err(|e| Error::format(path, e.to_string()))?;
        Ok(Self {
            model,
            provenance: header.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_bytes(path)?, path)
    }
}

// --- motion, features, beats ------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionFile {
    pub fps: u32,
    pub frames: usize,
    pub dim: usize,
    pub data: Vec<Vec<f64>>,
    #[serde(default)]
    pub provenance: Option<Provenance>,
}

impl MotionFile {
    pub fn from_motion(motion: &MotionSequence, provenance: Option<Provenance>) -> Self {
        Self {
            fps: motion.fps,
            frames: motion.len(),
            dim: FRAME_DIM,
            data: motion.frames.iter().map(|f| f.pack()).collect(),
            provenance,
        }
    }

    pub fn to_motion(&self, path: &Path) -> Result<MotionSequence> {
        if self.dim != FRAME_DIM || self.frames != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{}: header says {}×{}, expected {FRAME_DIM} columns and {} rows",
                path.display(),
                self.frames,
                self.dim,
                self.data.len()
            )));
        }
        if let Some(i) = self.data.iter().position(|row| row.len() != FRAME_DIM) {
            return Err(Error::ShapeMismatch(format!(
                "{}: row {i} has {} values, expected {FRAME_DIM}",
                path.display(),
                self.data[i].len()
            )));
        }
        let flat: Vec<f64> = self.data.concat();
        MotionSequence::from_flat(self.fps, &flat)
    }
}

pub fn save_motion(path: &Path, motion: &MotionSequence, provenance: Option<Provenance>) -> Result<()> {
    write_json(path, &MotionFile::from_motion(motion, provenance))
}

pub fn load_motion(path: &Path) -> Result<MotionSequence> {
    read_json::<MotionFile>(path)?.to_motion(path)
}

/// Writes the motion as an `N × 151` `.bdt` block.
pub fn save_motion_bdt(path: &Path, motion: &MotionSequence) -> Result<()> {
    save_bdt(path, motion.len(), FRAME_DIM, &motion.to_flat())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturesFile {
    pub fps: u32,
    pub frames: usize,
    pub dim: usize,
    /// Row-major `frames × dim`.
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeatsFile {
    pub fps: u32,
    pub frames: usize,
    pub beats: Vec<usize>,
}

/// Per-frame music features with the frame rate they were computed at.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub fps: u32,
    pub frames: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

pub fn save_features(path: &Path, cond: &Condition, fps: u32) -> Result<()> {
    write_json(
        path,
        &FeaturesFile {
            fps,
            frames: cond.n_frames,
            dim: cond.feature_dim,
            data: cond.music.clone(),
        },
    )
}

/// Reads JSON features, or a `.bdt` block (recognised by its magic bytes),
/// in which case `bdt_fps` supplies the frame rate.
pub fn load_features(path: &Path, bdt_fps: u32) -> Result<Features> {
    let bytes = read_bytes(path)?;
    if bytes.starts_with(BDT_MAGIC) {
        let m = decode_bdt(&bytes, path)?;
        return Ok(Features {
            fps: bdt_fps,
            frames: m.rows,
            dim: m.cols,
            data: m.data,
        });
    }
    let f: FeaturesFile = serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    if f.frames * f.dim != f.data.len() {
        return Err(Error::ShapeMismatch(format!(
            "{}: {}×{} features but {} values",
            path.display(),
            f.frames,
            f.dim,
            f.data.len()
        )));
    }
    Ok(Features {
        fps: f.fps,
        frames: f.frames,
        dim: f.dim,
        data: f.data,
    })
}

pub fn save_beats(path: &Path, beats: &[usize], frames: usize, fps: u32) -> Result<()> {
    write_json(
        path,
        &BeatsFile {
            fps,
            frames,
            beats: beats.to_vec(),
        },
    )
}

pub fn load_beats(path: &Path) -> Result<BeatsFile> {
    let b: BeatsFile = read_json(path)?;
    if let Some(&f) = b.beats.iter().find(|&&f| f >= b.frames) {
        return Err(Error::ShapeMismatch(format!(
            "{}: beat frame {f} outside 0..{}",
            path.display(),
            b.frames
        )));
    }
    Ok(b)
}

/// Builds a condition from a feature file and a beat file, checking that
/// they agree on frame count and rate.
pub fn load_condition(features: &Path, beats: &Path, fps: u32) -> Result<Condition> {
    let f = load_features(features, fps)?;
    let b = load_beats(beats)?;
    if f.frames != b.frames || f.fps != b.fps {
        return Err(Error::ShapeMismatch(format!(
            "{} has {} frames at {} fps but {} has {} frames at {} fps",
            features.display(),
            f.frames,
            f.fps,
            beats.display(),
            b.frames,
            b.fps
        )));
    }
    Condition::new(f.frames, f.dim, f.data, beats_to_vector(&b.beats, b.frames)?)
}

// --- dataset directories ----------------------------------------------------

pub fn item_paths(dir: &Path, index: usize) -> (PathBuf, PathBuf, PathBuf) {
    let stem = format!("item_{index:04}");
    (
        dir.join(format!("{stem}.motion.json")),
        dir.join(format!("{stem}.features.json")),
        dir.join(format!("{stem}.beats.json")),
    )
}

pub fn write_dataset(dir: &Path, items: &[DanceItem], provenance: &Provenance) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, item) in items.iter().enumerate() {
        let (m, f, b) = item_paths(dir, i);
        let fps = item.motion.fps;
        save_motion(&m, &item.motion, Some(provenance.clone()))?;
        save_features(&f, &item.condition, fps)?;
        save_beats(&b, &item.beat_frames(), item.condition.n_frames, fps)?;
    }
    Ok(())
}

/// Reads every `item_XXXX` triple in `dir`, in index order.
pub fn read_dataset(dir: &Path) -> Result<Vec<DanceItem>> {
    let mut indices = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(i) = name
            .strip_prefix("item_")
            .and_then(|s| s.strip_suffix(".motion.json"))
            .and_then(|s| s.parse::<usize>().ok())
        {
            indices.push(i);
        }
    }
    indices.sort_unstable();
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    indices
        .into_iter()
        .map(|i| {
            let (m, f, b) = item_paths(dir, i);
            let motion = load_motion(&m)?;
            let condition = load_condition(&f, &b, motion.fps)?;
            if condition.n_frames != motion.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} has {} frames but its condition has {}",
                    m.display(),
                    motion.len(),
                    condition.n_frames
                )));
            }
            Ok(DanceItem { motion, condition })
        })
        .collect()
}

/// Reads every `*.motion.json` in `dir`, sorted by file name.
pub fn read_motion_dir(dir: &Path) -> Result<Vec<(String, MotionSequence)>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".motion.json") {
            names.push(name);
        }
    }
    names.sort();
    names
        .into_iter()
        .map(|n| {
            let m = load_motion(&dir.join(&n))?;
            Ok((n, m))
        })
        .collect()
}

// --- audio -------------------------------------------------------------------

/// Mono PCM in [-1, 1]; stereo channels are averaged. Only 16-bit integer
/// WAV is accepted.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::format(
            path,
            format!(
                "expected 16-bit PCM, got {} bits {:?}",
                spec.bits_per_sample, spec.sample_format
            ),
        ));
    }
    let channels = spec.channels.max(1) as usize;
    let samples = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let pcm = samples
        .chunks(channels)
        .map(|c| c.iter().map(|&s| s as f64 / 32768.0).sum::<f64>() / c.len() as f64)
        .collect();
    Ok((pcm, spec.sample_rate))
}

pub fn write_wav(path: &Path, pcm: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in pcm {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)
            .map_err(wrap)?;
    }
    w.finalize().map_err(wrap)
}

// --- edit masks --------------------------------------------------------------

/// JSON edit-mask description.
///
/// Frames: the listed half-open ranges; if none are listed, every frame when
/// any column selection is present, otherwise no frame. Columns: the six
/// rotation values of each listed joint plus the root translation and/or
/// contacts when requested; if nothing column-wise is requested, the whole
/// frame.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSpec {
    pub frames: Vec<[usize; 2]>,
    pub joints: Vec<usize>,
    pub include_root: bool,
    pub include_contacts: bool,
}

impl MaskSpec {
    /// Row-major `n_frames × 151` 0/1 mask.
    pub fn expand(&self, n_frames: usize) -> Result<Vec<f64>> {
        let mut rows = vec![false; n_frames];
        for &[start, end] in &self.frames {
            if start >= end || end > n_frames {
                return Err(Error::MaskOutOfRange(format!(
                    "frame range [{start}, {end}) invalid for {n_frames} frames"
                )));
            }
            rows[start..end].iter_mut().for_each(|r| *r = true);
        }
        let column_wise = !self.joints.is_empty() || self.include_root || self.include_contacts;
        if self.frames.is_empty() && column_wise {
            rows.iter_mut().for_each(|r| *r = true);
        }
        let mut cols = vec![!column_wise; FRAME_DIM];
        for &j in &self.joints {
            if j >= JOINT_COUNT {
                return Err(Error::MaskOutOfRange(format!("joint {j} outside 0..{JOINT_COUNT}")));
            }
            cols[j * 6..j * 6 + 6].iter_mut().for_each(|c| *c = true);
        }
        if self.include_root {
            cols[ROOT_OFFSET..ROOT_OFFSET + 3].iter_mut().for_each(|c| *c = true);
        }
        if self.include_contacts {
            cols[CONTACT_OFFSET..CONTACT_OFFSET + CONTACT_DIM]
                .iter_mut()
                .for_each(|c| *c = true);
        }
        let mut out = vec![0.0; n_frames * FRAME_DIM];
        for (row, chunk) in rows.iter().zip(out.chunks_exact_mut(FRAME_DIM)) {
            if *row {
                for (v, &c) in chunk.iter_mut().zip(&cols) {
                    *v = if c { 1.0 } else { 0.0 };
                }
            }
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_synthetic_corpus, CorpusSpec};
    use crate::motion::Skeleton;

    #[test]
    fn bdt_round_trip_and_layout() {
        let data = [1.0, -2.5, 0.125, 3.0, 0.0, 7.0];
        let bytes = encode_bdt(2, 3, &data).unwrap();
        assert_eq!(&bytes[..4], b"BADM");
        assert_eq!(&bytes[4..16], &[1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 24);
        let m = decode_bdt(&bytes, Path::new("x")).unwrap();
        assert_eq!((m.rows, m.cols), (2, 3));
        assert_eq!(m.data, data);
    }

    #[test]
    fn bdt_rejects_bad_headers() {
        let good = encode_bdt(1, 2, &[1.0, 2.0]).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_bdt(&bad, Path::new("x")), Err(Error::BadMagic { .. })));
        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(matches!(
            decode_bdt(&v2, Path::new("x")),
            Err(Error::UnsupportedVersion { version: 2, .. })
        ));
        assert!(matches!(
            decode_bdt(&good[..10], Path::new("x")),
            Err(Error::Format { .. })
        ));
        assert!(matches!(decode_bdt(b"BA", Path::new("x")), Err(Error::BadMagic { .. })));
        assert!(matches!(decode_bdt(&[], Path::new("x")), Err(Error::BadMagic { .. })));
    }

    fn small_model() -> Denoiser {
        Denoiser::new(
            DenoiserConfig {
                slices: 2,
                hidden_dim: 8,
                heads: 2,
                decoder_layers: 1,
                conv_layers: 2,
                kernel_size: 3,
                feature_dim: 4,
                ..DenoiserConfig::default()
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn checkpoint_save_load_save_is_byte_identical() {
        let ck = Checkpoint {
            model: small_model(),
            provenance: Provenance::new("train", 5, serde_json::json!({"epochs": 3})),
        };
        let a = ck.encode().unwrap();
        let back = Checkpoint::decode(&a, Path::new("m.bdck")).unwrap();
        let b = back.encode().unwrap();
        assert_eq!(a, b);
        assert_eq!(back.provenance, ck.provenance);
        assert_eq!(back.model.config, ck.model.config);
        for ((n1, t1), (n2, t2)) in ck.model.params.iter().zip(back.model.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            for (x, y) in t1.data().iter().zip(t2.data()) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        let mut bad = a.clone();
        bad[3] = b'X';
        assert!(matches!(
            Checkpoint::decode(&bad, Path::new("m")),
            Err(Error::BadMagic { .. })
        ));
        assert!(Checkpoint::decode(&a[..a.len() - 3], Path::new("m")).is_err());
    }

    #[test]
    fn mask_expansion() {
        let n = 10;
        let at = |m: &[f64], f: usize, c: usize| m[f * FRAME_DIM + c];
        assert!(MaskSpec::default().expand(n).unwrap().iter().all(|&v| v == 0.0));

        let between = MaskSpec {
            frames: vec![[0, 2], [8, 10]],
            ..MaskSpec::default()
        }
        .expand(n)
        .unwrap();
        for f in 0..n {
            let want = if f < 2 || f >= 8 { 1.0 } else { 0.0 };
            assert!((0..FRAME_DIM).all(|c| at(&between, f, c) == want));
        }

        let legs = MaskSpec {
            joints: vec![1, 4],
            include_root: true,
            ..MaskSpec::default()
        }
        .expand(n)
        .unwrap();
        for f in 0..n {
            for c in 0..FRAME_DIM {
                let want = (6..12).contains(&c) || (24..30).contains(&c) || (144..147).contains(&c);
                assert_eq!(at(&legs, f, c), if want { 1.0 } else { 0.0 });
            }
        }

        let contacts = MaskSpec {
            frames: vec![[3, 4]],
            include_contacts: true,
            ..MaskSpec::default()
        }
        .expand(n)
        .unwrap();
        assert_eq!(contacts.iter().sum::<f64>(), 4.0);
        assert_eq!(at(&contacts, 3, 150), 1.0);

        for bad in [
            MaskSpec {
                frames: vec![[5, 11]],
                ..MaskSpec::default()
            },
            MaskSpec {
                frames: vec![[4, 4]],
                ..MaskSpec::default()
            },
            MaskSpec {
                joints: vec![24],
                ..MaskSpec::default()
            },
        ] {
            assert!(matches!(bad.expand(n), Err(Error::MaskOutOfRange(_))));
        }
        let parsed: std::result::Result<MaskSpec, _> = serde_json::from_str(r#"{"frames": [[0, 1]], "bogus": 1}"#);
        assert!(parsed.is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec {
            count: 3,
            n_frames: 24,
            feature_dim: 5,
            ..CorpusSpec::default()
        };
        let items = make_synthetic_corpus(&spec, &Skeleton::smpl24()).unwrap();
        let prov = Provenance::new("make-data", 0, serde_json::json!({}));
        write_dataset(dir.path(), &items, &prov).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, items);
        let motions = read_motion_dir(dir.path()).unwrap();
        assert_eq!(motions.len(), 3);
        assert_eq!(motions[2].0, "item_0002.motion.json");
    }

    #[test]
    fn condition_files_must_agree() {
        let dir = tempfile::tempdir().unwrap();
        let cond = Condition::new(4, 1, vec![0.0; 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let f = dir.path().join("f.json");
        let b = dir.path().join("b.json");
        save_features(&f, &cond, 30).unwrap();
        save_beats(&b, &[0], 5, 30).unwrap();
        let err = load_condition(&f, &b, 30).unwrap_err();
        assert!(matches!(&err, Error::ShapeMismatch(m) if m.contains("f.json")), "{err}");
        save_beats(&b, &[0], 4, 30).unwrap();
        assert_eq!(load_condition(&f, &b, 30).unwrap(), cond);
        save_bdt(&f, 4, 1, &[0.0; 4]).unwrap();
        assert_eq!(load_condition(&f, &b, 30).unwrap(), cond);
    }

    #[test]
    fn wav_round_trip_and_stereo_average() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_wav(&p, &[0.0, 0.5, -0.5], 8000).unwrap();
        let (pcm, sr) = read_wav(&p).unwrap();
        assert_eq!(sr, 8000);
        assert_eq!(pcm.len(), 3);
        assert!((pcm[1] - 0.5).abs() < 1e-4);

        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 100,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let s = dir.path().join("s.wav");
        let mut w = hound::WavWriter::create(&s, spec).unwrap();
        for v in [1000i16, 3000, -200, 200] {
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();
        let (pcm, _) = read_wav(&s).unwrap();
        assert_eq!(pcm, vec![2000.0 / 32768.0, 0.0]);
        assert!(matches!(
            read_wav(&dir.path().join("missing.wav")),
            Err(Error::Io { .. })
        ));
    }
}
