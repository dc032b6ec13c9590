//! Evaluation metrics: kinetic and geometric features, diversity, beat
//! alignment, foot-contact plausibility and Fréchet distance.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{dot, forward_kinematics_full, norm, sub, MotionSequence, Skeleton, Vec3, JOINT_COUNT};

pub const KINETIC_DIM: usize = JOINT_COUNT;
pub const GEOMETRIC_DIM: usize = 12;
/// Default Beat Align kernel width, in frames.
pub const BEAT_ALIGN_SIGMA: f64 = 3.0;
const SMOOTH_RADIUS: usize = 2;
const PFC_EPS: f64 = 1e-8;
const NEGATIVE_EIGEN_TOLERANCE: f64 = 1e-6;

/// Named joints of the shipped 24-joint skeleton used by the predicates.
mod joint {
    pub const ROOT: usize = 0;
    pub const L_HIP: usize = 1;
    pub const R_HIP: usize = 2;
    pub const L_KNEE: usize = 4;
    pub const R_KNEE: usize = 5;
    pub const L_ANKLE: usize = 7;
    pub const R_ANKLE: usize = 8;
    pub const L_TOE: usize = 10;
    pub const R_TOE: usize = 11;
    pub const HEAD: usize = 15;
    pub const L_SHOULDER: usize = 16;
    pub const R_SHOULDER: usize = 17;
    pub const L_ELBOW: usize = 18;
    pub const R_ELBOW: usize = 19;
    pub const L_WRIST: usize = 20;
    pub const R_WRIST: usize = 21;
    pub const L_HAND: usize = 22;
    pub const R_HAND: usize = 23;
}

/// Thresholds of the geometric predicates (metres, degrees).
pub const TOE_HEIGHT_GAP: f64 = 0.05;
pub const BEND_DEGREES: f64 = 30.0;
pub const FORWARD_REACH: f64 = 0.1;
pub const ROOT_CLEARANCE: f64 = 0.2;

struct FramePose {
    p: [Vec3; JOINT_COUNT],
    /// Root facing direction (third column of the root rotation).
    forward: Vec3,
}

fn poses(motion: &MotionSequence, skeleton: &Skeleton) -> Result<Vec<FramePose>> {
    motion
        .frames
        .iter()
        .map(|f| {
            let fk = forward_kinematics_full(skeleton, f)?;
            let r = fk.globals[0];
            Ok(FramePose {
                p: fk.positions,
                forward: [r[0][2], r[1][2], r[2][2]],
            })
        })
        .collect()
}

fn positions(motion: &MotionSequence, skeleton: &Skeleton) -> Result<Vec<[Vec3; JOINT_COUNT]>> {
    crate::motion::sequence_positions(motion, skeleton)
}

/// Per joint, the mean over frame pairs of `½‖v‖²` with `v = Δp · fps`.
pub fn kinetic_features(motion: &MotionSequence, skeleton: &Skeleton) -> Result<Vec<f64>> {
    let n = motion.len();
    if n < 2 {
        return Err(Error::SequenceTooShort { needed: 2, got: n });
    }
    let p = positions(motion, skeleton)?;
    let fps = motion.fps as f64;
    let mut out = vec![0.0; KINETIC_DIM];
    for i in 0..n - 1 {
        for (j, o) in out.iter_mut().enumerate() {
            let v = norm(sub(p[i + 1][j], p[i][j])) * fps;
            *o += 0.5 * v * v;
        }
    }
    out.iter_mut().for_each(|v| *v /= (n - 1) as f64);
    Ok(out)
}

fn bend_degrees(a: Vec3, b: Vec3, c: Vec3) -> f64 {
    let u = sub(b, a);
    let v = sub(c, b);
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    let cos = (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0);
    cos.acos().to_degrees()
}

/// The twelve relational tests for one frame, in order:
///
/// 0. left toe higher than right toe by more than 5 cm
/// 1. right toe higher than left toe by more than 5 cm
/// 2. left hand above the head
/// 3. right hand above the head
/// 4. hands closer together than the shoulders
/// 5. left knee bent more than 30°
/// 6. right knee bent more than 30°
/// 7. left elbow bent more than 30°
/// 8. right elbow bent more than 30°
/// 9. left ankle more than 10 cm in front of the hip plane
/// 10. right ankle more than 10 cm in front of the hip plane
/// 11. root more than 20 cm above both knees
///
/// "Bent" is the angle between the upper and lower limb segments; the hip
/// plane passes through the root with normal along the root's facing axis.
fn predicates(f: &FramePose) -> [bool; GEOMETRIC_DIM] {
    use joint::*;
    let p = &f.p;
    let y = |j: usize| p[j][1];
    let ahead = |j: usize| dot(sub(p[j], p[ROOT]), f.forward);
    [
        y(L_TOE) > y(R_TOE) + TOE_HEIGHT_GAP,
        y(R_TOE) > y(L_TOE) + TOE_HEIGHT_GAP,
        y(L_HAND) > y(HEAD),
        y(R_HAND) > y(HEAD),
        norm(sub(p[L_HAND], p[R_HAND])) < norm(sub(p[L_SHOULDER], p[R_SHOULDER])),
        bend_degrees(p[L_HIP], p[L_KNEE], p[L_ANKLE]) > BEND_DEGREES,
        bend_degrees(p[R_HIP], p[R_KNEE], p[R_ANKLE]) > BEND_DEGREES,
        bend_degrees(p[L_SHOULDER], p[L_ELBOW], p[L_WRIST]) > BEND_DEGREES,
        bend_degrees(p[R_SHOULDER], p[R_ELBOW], p[R_WRIST]) > BEND_DEGREES,
        ahead(L_ANKLE) > FORWARD_REACH,
        ahead(R_ANKLE) > FORWARD_REACH,
        y(ROOT) > y(L_KNEE).max(y(R_KNEE)) + ROOT_CLEARANCE,
    ]
}

/// Fraction of frames on which each predicate holds (see [`predicates`]).
pub fn geometric_features(motion: &MotionSequence, skeleton: &Skeleton) -> Result<Vec<f64>> {
    let n = motion.len();
    if n == 0 {
        return Err(Error::SequenceTooShort { needed: 1, got: 0 });
    }
    let mut out = vec![0.0; GEOMETRIC_DIM];
    for f in poses(motion, skeleton)? {
        for (o, b) in out.iter_mut().zip(predicates(&f)) {
            *o += b as u8 as f64;
        }
    }
    out.iter_mut().for_each(|v| *v /= n as f64);
    Ok(out)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean Euclidean distance over all unordered pairs.
pub fn diversity(features: &[Vec<f64>]) -> Result<f64> {
    let m = features.len();
    if m < 2 {
        return Err(Error::NeedTwoItems(m));
    }
    let d = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != d) {
        return Err(Error::DimMismatch(d, bad.len()));
    }
    let mut total = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            total += distance(&features[i], &features[j]);
        }
    }
    Ok(total / (m * (m - 1) / 2) as f64)
}

/// Mean joint speed per frame (central differences, one-sided at the ends).
pub fn mean_joint_speed(motion: &MotionSequence, skeleton: &Skeleton) -> Result<Vec<f64>> {
    let n = motion.len();
    if n < 3 {
        return Err(Error::SequenceTooShort { needed: 3, got: n });
    }
    let p = positions(motion, skeleton)?;
    let fps = motion.fps as f64;
    Ok((0..n)
        .map(|i| {
            let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
            let dt = (b - a) as f64 / fps;
            (0..JOINT_COUNT).map(|j| norm(sub(p[b][j], p[a][j]))).sum::<f64>() / (JOINT_COUNT as f64 * dt)
        })
        .collect())
}

/// Largest joint displacement (meters) between each pair of consecutive frames.
pub fn frame_deltas(motion: &MotionSequence, skeleton: &Skeleton) -> Result<Vec<f64>> {
    let p = positions(motion, skeleton)?;
    Ok(p.windows(2)
        .map(|w| {
            (0..JOINT_COUNT)
                .map(|j| norm(sub(w[1][j], w[0][j])))
                .fold(0.0, f64::max)
        })
        .collect())
}

/// Seam check for a stitched sequence: the largest frame delta at any chunk
/// boundary (every multiple of `window / 2`) and the largest frame delta
/// inside any single chunk.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeamReport {
    pub max_seam_delta: f64,
    pub max_intra_delta: f64,
}

impl SeamReport {
    pub fn ratio(&self) -> f64 {
        self.max_seam_delta / self.max_intra_delta
    }
}

pub fn seam_report(
    stitched: &MotionSequence,
    chunks: &[MotionSequence],
    window: usize,
    skeleton: &Skeleton,
) -> Result<SeamReport> {
    let half = window / 2;
    if half == 0 {
        return Err(Error::BadChunkLength(format!("window {window}")));
    }
    let d = frame_deltas(stitched, skeleton)?;
    let max_seam_delta = (1..)
        .map(|c| c * half)
        .take_while(|&s| s < stitched.len())
        .map(|s| d[s - 1])
        .fold(0.0, f64::max);
    let mut max_intra_delta: f64 = 0.0;
    for c in chunks {
        max_intra_delta = frame_deltas(c, skeleton)?.into_iter().fold(max_intra_delta, f64::max);
    }
    Ok(SeamReport {
        max_seam_delta,
        max_intra_delta,
    })
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Kinematic beats of a speed curve: strict local minima of its 5-frame
/// moving average that lie below the smoothed curve's median. Frames whose
/// window would leave the sequence (the first and last two) are never chosen.
/// Differences below 1e−9 of the curve's peak count as ties.
pub fn beats_from_speed(speed: &[f64]) -> Vec<usize> {
    let n = speed.len();
    let w = SMOOTH_RADIUS;
    if n < 2 * w + 3 {
        return Vec::new();
    }
    let smooth: Vec<f64> = (0..n)
        .map(|i| {
            let (a, b) = (i.saturating_sub(w), (i + w).min(n - 1));
            speed[a..=b].iter().sum::<f64>() / (b - a + 1) as f64
        })
        .collect();
    let med = median(&smooth);
    let tol = 1e-9 * smooth.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (w..n - w)
        .filter(|&i| {
            let v = smooth[i] + tol;
            v < smooth[i - 1] && v < smooth[i + 1] && v < med
        })
        .collect()
}

pub fn motion_beats(motion: &MotionSequence, skeleton: &Skeleton) -> Result<Vec<usize>> {
    Ok(beats_from_speed(&mean_joint_speed(motion, skeleton)?))
}

/// `(1/|B_m|) Σ_b exp(−min_{b'} (b − b')² / (2σ²))` over music beats `b`.
pub fn beat_align_frames(music_beats: &[usize], dance_beats: &[usize], sigma: f64) -> Result<f64> {
    if music_beats.is_empty() {
        return Err(Error::NoMusicBeats);
    }
    if dance_beats.is_empty() {
        return Err(Error::NoMotionBeats);
    }
    let two_s2 = 2.0 * sigma * sigma;
    let total: f64 = music_beats
        .iter()
        .map(|&b| {
            let d = dance_beats
                .iter()
                .map(|&d| (b as f64 - d as f64).abs())
                .fold(f64::INFINITY, f64::min);
            (-d * d / two_s2).exp()
        })
        .sum();
    Ok(total / music_beats.len() as f64)
}

pub fn beat_align(music_beats: &[usize], motion: &MotionSequence, skeleton: &Skeleton, sigma: f64) -> Result<f64> {
    if music_beats.is_empty() {
        return Err(Error::NoMusicBeats);
    }
    beat_align_frames(music_beats, &motion_beats(motion, skeleton)?, sigma)
}

/// Physical foot contact score. Per frame `i < N − 2`,
/// `āᵢ = ‖a_rootⁱ‖ · v̄_leftⁱ · v̄_rightⁱ`, with `a_root` the root's second
/// difference times fps², and `v̄_side` that side's heel/toe mean speed
/// divided by its maximum over the sequence. The score is
/// `Σ āᵢ / (N · maxᵢ ‖a_rootⁱ‖ + 1e−8)`.
pub fn pfc(motion: &MotionSequence, skeleton: &Skeleton) -> Result<f64> {
    let n = motion.len();
    if n < 3 {
        return Err(Error::SequenceTooShort { needed: 3, got: n });
    }
    let p = positions(motion, skeleton)?;
    let fps = motion.fps as f64;
    let [lh, lt, rh, rt] = skeleton.foot_points;
    let side_speed = |heel: usize, toe: usize| -> Vec<f64> {
        let raw: Vec<f64> = (0..n - 1)
            .map(|i| 0.5 * (norm(sub(p[i + 1][heel], p[i][heel])) + norm(sub(p[i + 1][toe], p[i][toe]))) * fps)
            .collect();
        let max = raw.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            raw.iter().map(|v| v / max).collect()
        } else {
            raw
        }
    };
    let left = side_speed(lh, lt);
    let right = side_speed(rh, rt);
    let accel: Vec<f64> = (0..n - 2)
        .map(|i| {
            let r = |k: usize| p[k][0];
            let a: Vec3 = std::array::from_fn(|d| (r(i + 2)[d] - 2.0 * r(i + 1)[d] + r(i)[d]) * fps * fps);
            norm(a)
        })
        .collect();
    let max_a = accel.iter().cloned().fold(0.0, f64::max);
    let total: f64 = (0..n - 2).map(|i| accel[i] * left[i] * right[i]).sum();
    Ok(total / (n as f64 * max_a + PFC_EPS))
}

/// Gaussian fit of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `d × d`.
    pub cov: Vec<f64>,
    pub count: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased, symmetrised covariance.
pub fn fit_stats(features: &[Vec<f64>]) -> Result<FeatureStats> {
    let m = features.len();
    if m < 2 {
        return Err(Error::NeedTwoItems(m));
    }
    let d = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != d) {
        return Err(Error::DimMismatch(d, bad.len()));
    }
    let mut mean = vec![0.0; d];
    for f in features {
        for (a, b) in mean.iter_mut().zip(f) {
            *a += b;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let mut cov = vec![0.0; d * d];
    for f in features {
        for i in 0..d {
            let di = f[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += di * (f[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in 0..d {
            cov[i * d + j] /= (m - 1) as f64;
        }
    }
    for i in 0..d {
        for j in i + 1..d {
            let s = 0.5 * (cov[i * d + j] + cov[j * d + i]);
            cov[i * d + j] = s;
            cov[j * d + i] = s;
        }
    }
    Ok(FeatureStats { mean, cov, count: m })
}

fn symmetric_eigen(a: &[f64], d: usize) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let m = DMatrix::from_row_slice(d, d, a);
    SymmetricEigen::new((&m + m.transpose()) * 0.5)
}

/// Principal square root of a symmetric PSD matrix (row-major). Eigenvalues
/// down to −1e−6 are clamped to zero; anything more negative is rejected.
pub fn psd_sqrt(a: &[f64], d: usize) -> Result<Vec<f64>> {
    if a.len() != d * d {
        return Err(Error::DimMismatch(d * d, a.len()));
    }
    let eig = symmetric_eigen(a, d);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&l| l < -NEGATIVE_EIGEN_TOLERANCE * scale) {
        return Err(Error::NonPsd(bad));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let r = v * DMatrix::from_diagonal(&roots) * v.transpose();
    let mut out = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            out.push(r[(i, j)]);
        }
    }
    Ok(out)
}

/// `Tr((Σ_a Σ_b)^{1/2})`, via the eigenvalues of `Σ_a^{1/2} Σ_b Σ_a^{1/2}`.
pub fn trace_sqrt_product(a: &[f64], b: &[f64], d: usize) -> Result<f64> {
    let sa = DMatrix::from_row_slice(d, d, &psd_sqrt(a, d)?);
    psd_sqrt(b, d)?;
    let mb = DMatrix::from_row_slice(d, d, b);
    let inner = &sa * mb * &sa;
    let sym: Vec<f64> = inner.transpose().iter().cloned().collect();
    let eig = symmetric_eigen(&sym, d);
    Ok(eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum())
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^{1/2})`, floored at 0.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d {
        return Err(Error::DimMismatch(d, b.dim()));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let trace = |c: &[f64]| (0..d).map(|i| c[i * d + i]).sum::<f64>();
    let cross = trace_sqrt_product(&a.cov, &b.cov, d)?;
    Ok((mean_term + trace(&a.cov) + trace(&b.cov) - 2.0 * cross).max(0.0))
}

/// Maps `f` over `items` on up to `jobs` threads, keeping input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                s.spawn(move || c.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("metric worker panicked"))
            .collect()
    })
}

/// Evaluation summary. Metrics that could not be computed are `None`, with
/// the reason in `errors`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub div_k: Option<f64>,
    pub div_g: Option<f64>,
    pub beat_align: Option<f64>,
    pub pfc_mean: Option<f64>,
    pub fid_k: Option<f64>,
    pub fid_g: Option<f64>,
    pub n_generated: usize,
    pub n_reference: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub errors: BTreeMap<String, String>,
}

type Features = std::result::Result<Vec<Vec<f64>>, String>;

struct ItemFeatures {
    kinetic: std::result::Result<Vec<f64>, String>,
    geometric: std::result::Result<Vec<f64>, String>,
}

fn item_features(m: &MotionSequence, skeleton: &Skeleton) -> ItemFeatures {
    ItemFeatures {
        kinetic: kinetic_features(m, skeleton).map_err(|e| e.to_string()),
        geometric: geometric_features(m, skeleton).map_err(|e| e.to_string()),
    }
}

fn collect(items: &[ItemFeatures], pick: impl Fn(&ItemFeatures) -> &std::result::Result<Vec<f64>, String>) -> Features {
    items.iter().map(|i| pick(i).clone()).collect()
}

fn record(report: &mut EvalReport, name: &str, r: std::result::Result<f64, String>) -> Option<f64> {
    match r {
        Ok(v) => Some(v),
        Err(e) => {
            report.errors.insert(name.to_string(), e);
            None
        }
    }
}

fn mean_of(v: Result<Vec<f64>>) -> std::result::Result<f64, String> {
    let v = v.map_err(|e| e.to_string())?;
    if v.is_empty() {
        return Err(Error::NeedTwoItems(0).to_string());
    }
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Full metric battery. `music_beats[i]` are the beat frames for
/// `generated[i]`; BA and PFC are averaged over generated items.
pub fn evaluate_sets(
    generated: &[MotionSequence],
    music_beats: &[Vec<usize>],
    reference: &[MotionSequence],
    skeleton: &Skeleton,
    sigma: f64,
    jobs: usize,
) -> Result<EvalReport> {
    if music_beats.len() != generated.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} beat lists for {} generated motions",
            music_beats.len(),
            generated.len()
        )));
    }
    let gen_feats = par_map(generated, jobs, |m| item_features(m, skeleton));
    let ref_feats = par_map(reference, jobs, |m| item_features(m, skeleton));
    let mut report = EvalReport {
        n_generated: generated.len(),
        n_reference: reference.len(),
        ..EvalReport::default()
    };

    let gk = collect(&gen_feats, |i| &i.kinetic);
    let gg = collect(&gen_feats, |i| &i.geometric);
    let rk = collect(&ref_feats, |i| &i.kinetic);
    let rg = collect(&ref_feats, |i| &i.geometric);
    let div = |f: &Features| f.clone().and_then(|f| diversity(&f).map_err(|e| e.to_string()));
    report.div_k = record(&mut report, "div_k", div(&gk));
    report.div_g = record(&mut report, "div_g", div(&gg));

    let pairs: Vec<(&MotionSequence, &Vec<usize>)> = generated.iter().zip(music_beats).collect();
    let ba: Result<Vec<f64>> = par_map(&pairs, jobs, |(m, b)| beat_align(b, m, skeleton, sigma))
        .into_iter()
        .collect();
    report.beat_align = record(&mut report, "beat_align", mean_of(ba));
    let pf: Result<Vec<f64>> = par_map(generated, jobs, |m| pfc(m, skeleton)).into_iter().collect();
    report.pfc_mean = record(&mut report, "pfc_mean", mean_of(pf));

    let fid = |a: Features, b: Features| -> std::result::Result<f64, String> {
        let (a, b) = (a?, b?);
        let run = || frechet_distance(&fit_stats(&a)?, &fit_stats(&b)?);
        run().map_err(|e| e.to_string())
    };
    report.fid_k = record(&mut report, "fid_k", fid(gk, rk));
    report.fid_g = record(&mut report, "fid_g", fid(gg, rg));
    Ok(report)
}
