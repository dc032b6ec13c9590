//! Skeleton, pose frames, 6-D rotations and forward kinematics.
//!
//! A frame packs into 151 values:
//!
//! | range     | content                                        |
//! |-----------|------------------------------------------------|
//! | 0..144    | 24 joint rotations, 6 values each (two columns)|
//! | 144..147  | root translation (meters)                      |
//! | 147..151  | contacts: left heel, left toe, right heel, right toe |
//!
//! The canonical skeleton is the 24-joint SMPL-style tree shipped in
//! `data/skeleton_smpl24_v1.json`. Foot points map heels to the ankle joints
//! (7, 8) and toes to the foot-end joints (10, 11).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const JOINT_COUNT: usize = 24;
pub const ROT_DIM: usize = JOINT_COUNT * 6;
pub const ROOT_OFFSET: usize = ROT_DIM;
pub const CONTACT_OFFSET: usize = ROT_DIM + 3;
pub const CONTACT_DIM: usize = 4;
pub const FRAME_DIM: usize = CONTACT_OFFSET + CONTACT_DIM;

/// Default contact speed threshold, in meters per frame.
pub const CONTACT_METERS_PER_FRAME: f64 = 0.01;

pub type Vec3 = [f64; 3];
/// Row-major 3×3 matrix, `m[row][col]`.
pub type Mat3 = [[f64; 3]; 3];

const SKELETON_JSON: &str = include_str!("../data/skeleton_smpl24_v1.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    #[serde(default)]
    pub version: u32,
    pub joint_count: usize,
    #[serde(default)]
    pub joint_names: Vec<String>,
    pub parents: Vec<i64>,
    pub rest_offsets: Vec<Vec3>,
    pub foot_points: [usize; 4],
}

impl Skeleton {
    /// The shipped 24-joint skeleton.
    pub fn smpl24() -> Self {
        let skel: Skeleton = serde_json::from_str(SKELETON_JSON).expect("bundled skeleton file is valid JSON");
        skel.validate().expect("bundled skeleton is valid");
        skel
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let skel: Skeleton = serde_json::from_str(text).map_err(|e| Error::BadSpec(format!("skeleton JSON: {e}")))?;
        skel.validate()?;
        Ok(skel)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadSpec(m));
        if self.joint_count != JOINT_COUNT {
            return bad(format!("joint_count must be {JOINT_COUNT}, got {}", self.joint_count));
        }
        if self.parents.len() != JOINT_COUNT || self.rest_offsets.len() != JOINT_COUNT {
            return bad("parents and rest_offsets must have 24 entries".into());
        }
        if self.parents[0] != -1 {
            return bad("joint 0 must be the root".into());
        }
        for j in 1..JOINT_COUNT {
            let p = self.parents[j];
            if p < 0 || p as usize >= j {
                return bad(format!("joint {j} has parent {p}; parents must precede children"));
            }
            if norm(self.rest_offsets[j]) <= 0.0 {
                return bad(format!("joint {j} has a zero-length rest offset"));
            }
        }
        if self.foot_points.iter().any(|&f| f >= JOINT_COUNT) {
            return bad("foot point index out of range".into());
        }
        Ok(())
    }

    /// Parent of a non-root joint.
    #[inline]
    pub fn parent(&self, j: usize) -> usize {
        self.parents[j] as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseFrame {
    pub rotations: [[f64; 6]; JOINT_COUNT],
    pub root_translation: Vec3,
    pub contacts: [f64; CONTACT_DIM],
}

impl Default for PoseFrame {
    fn default() -> Self {
        Self::identity([0.0; 3])
    }
}

impl PoseFrame {
    /// All joints at identity rotation.
    pub fn identity(root_translation: Vec3) -> Self {
        Self {
            rotations: [[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]; JOINT_COUNT],
            root_translation,
            contacts: [0.0; CONTACT_DIM],
        }
    }

    pub fn pack_into(&self, out: &mut [f64]) {
        assert_eq!(out.len(), FRAME_DIM);
        for (j, r) in self.rotations.iter().enumerate() {
            out[j * 6..j * 6 + 6].copy_from_slice(r);
        }
        out[ROOT_OFFSET..ROOT_OFFSET + 3].copy_from_slice(&self.root_translation);
        out[CONTACT_OFFSET..].copy_from_slice(&self.contacts);
    }

    pub fn pack(&self) -> Vec<f64> {
        let mut v = vec![0.0; FRAME_DIM];
        self.pack_into(&mut v);
        v
    }

    pub fn unpack(v: &[f64]) -> Result<Self> {
        if v.len() != FRAME_DIM {
            return Err(Error::ShapeMismatch(format!(
                "frame has {} values, expected {FRAME_DIM}",
                v.len()
            )));
        }
        let mut rotations = [[0.0; 6]; JOINT_COUNT];
        for (j, r) in rotations.iter_mut().enumerate() {
            r.copy_from_slice(&v[j * 6..j * 6 + 6]);
        }
        let mut root_translation = [0.0; 3];
        root_translation.copy_from_slice(&v[ROOT_OFFSET..ROOT_OFFSET + 3]);
        let mut contacts = [0.0; CONTACT_DIM];
        contacts.copy_from_slice(&v[CONTACT_OFFSET..]);
        Ok(Self {
            rotations,
            root_translation,
            contacts,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    pub fps: u32,
    pub frames: Vec<PoseFrame>,
}

impl MotionSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Row-major N×151 values.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.frames.len() * FRAME_DIM];
        for (f, chunk) in self.frames.iter().zip(out.chunks_exact_mut(FRAME_DIM)) {
            f.pack_into(chunk);
        }
        out
    }

    pub fn from_flat(fps: u32, data: &[f64]) -> Result<Self> {
        if data.len() % FRAME_DIM != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} values is not a multiple of {FRAME_DIM}",
                data.len()
            )));
        }
        let frames = data
            .chunks_exact(FRAME_DIM)
            .map(PoseFrame::unpack)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { fps, frames })
    }
}

// --- small vector helpers ---------------------------------------------------

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

#[inline]
pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = a[r][0] * b[0][c] + a[r][1] * b[1][c] + a[r][2] * b[2][c];
        }
    }
    out
}

#[inline]
pub fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = a[c][r];
        }
    }
    out
}

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Rotation of `angle` radians about a unit `axis` (Rodrigues).
pub fn axis_angle(axis: Vec3, angle: f64) -> Mat3 {
    let n = norm(axis);
    let [x, y, z] = scale(axis, 1.0 / n);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

const DEGENERATE_EPS: f64 = 1e-8;

/// Gram–Schmidt reconstruction of a rotation from its first two columns.
pub fn rot6d_to_matrix(r6: &[f64; 6]) -> Result<Mat3> {
    let a1 = [r6[0], r6[1], r6[2]];
    let a2 = [r6[3], r6[4], r6[5]];
    let n1 = norm(a1);
    if n1 < DEGENERATE_EPS {
        return Err(Error::DegenerateRotation(n1));
    }
    let b1 = scale(a1, 1.0 / n1);
    let u = sub(a2, scale(b1, dot(b1, a2)));
    let n2 = norm(u);
    if n2 < DEGENERATE_EPS {
        return Err(Error::DegenerateRotation(n2));
    }
    let b2 = scale(u, 1.0 / n2);
    let b3 = cross(b1, b2);
    Ok([[b1[0], b2[0], b3[0]], [b1[1], b2[1], b3[1]], [b1[2], b2[2], b3[2]]])
}

/// Vector-Jacobian product of [`rot6d_to_matrix`]: maps dL/dR to dL/d(r6).
pub fn rot6d_vjp(r6: &[f64; 6], d_rot: &Mat3) -> Result<[f64; 6]> {
    let a1 = [r6[0], r6[1], r6[2]];
    let a2 = [r6[3], r6[4], r6[5]];
    let n1 = norm(a1);
    if n1 < DEGENERATE_EPS {
        return Err(Error::DegenerateRotation(n1));
    }
    let b1 = scale(a1, 1.0 / n1);
    let d = dot(b1, a2);
    let u = sub(a2, scale(b1, d));
    let n2 = norm(u);
    if n2 < DEGENERATE_EPS {
        return Err(Error::DegenerateRotation(n2));
    }
    let b2 = scale(u, 1.0 / n2);

    let col = |c: usize| [d_rot[0][c], d_rot[1][c], d_rot[2][c]];
    let mut db1 = col(0);
    let mut db2 = col(1);
    let db3 = col(2);
    // b3 = b1 x b2
    db1 = add(db1, cross(b2, db3));
    db2 = add(db2, cross(db3, b1));
    // b2 = u / |u|
    let du = scale(sub(db2, scale(b2, dot(b2, db2))), 1.0 / n2);
    // u = a2 - (b1.a2) b1
    let b1_du = dot(b1, du);
    let da2 = sub(du, scale(b1, b1_du));
    db1 = sub(db1, add(scale(du, d), scale(a2, b1_du)));
    // b1 = a1 / |a1|
    let da1 = scale(sub(db1, scale(b1, dot(b1, db1))), 1.0 / n1);
    Ok([da1[0], da1[1], da1[2], da2[0], da2[1], da2[2]])
}

/// First two columns of a proper rotation.
pub fn matrix_to_rot6d(r: &Mat3) -> Result<[f64; 6]> {
    let rtr = mat_mul(&transpose(r), r);
    let mut residual: f64 = 0.0;
    for (i, row) in rtr.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            residual = residual.max((v - IDENTITY[i][j]).abs());
        }
    }
    residual = residual.max((det(r) - 1.0).abs());
    if residual > 1e-6 || !residual.is_finite() {
        return Err(Error::NotARotation(residual));
    }
    Ok([r[0][0], r[1][0], r[2][0], r[0][1], r[1][1], r[2][1]])
}

pub fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Joint positions plus the global rotation of every joint.
#[derive(Clone, Debug)]
pub struct FkPose {
    pub positions: [Vec3; JOINT_COUNT],
    pub globals: [Mat3; JOINT_COUNT],
    pub locals: [Mat3; JOINT_COUNT],
}

pub fn forward_kinematics_full(skeleton: &Skeleton, frame: &PoseFrame) -> Result<FkPose> {
    let mut locals = [IDENTITY; JOINT_COUNT];
    for (j, r6) in frame.rotations.iter().enumerate() {
        locals[j] = rot6d_to_matrix(r6)?;
    }
    let mut globals = [IDENTITY; JOINT_COUNT];
    let mut positions = [[0.0; 3]; JOINT_COUNT];
    globals[0] = locals[0];
    positions[0] = frame.root_translation;
    for j in 1..JOINT_COUNT {
        let p = skeleton.parent(j);
        positions[j] = add(positions[p], mat_vec(&globals[p], skeleton.rest_offsets[j]));
        globals[j] = mat_mul(&globals[p], &locals[j]);
    }
    Ok(FkPose {
        positions,
        globals,
        locals,
    })
}

pub fn forward_kinematics(skeleton: &Skeleton, frame: &PoseFrame) -> Result<[Vec3; JOINT_COUNT]> {
    Ok(forward_kinematics_full(skeleton, frame)?.positions)
}

/// FK on a packed 151-vector.
pub fn forward_kinematics_packed(skeleton: &Skeleton, packed: &[f64]) -> Result<FkPose> {
    forward_kinematics_full(skeleton, &PoseFrame::unpack(packed)?)
}

/// Backpropagates dL/d(positions) (72 values) through FK of one packed frame,
/// adding into `grad_packed` (151 values). Contact dims receive nothing.
pub fn fk_vjp_packed(skeleton: &Skeleton, packed: &[f64], d_positions: &[f64], grad_packed: &mut [f64]) -> Result<()> {
    let frame = PoseFrame::unpack(packed)?;
    let pose = forward_kinematics_full(skeleton, &frame)?;
    let mut dp = [[0.0; 3]; JOINT_COUNT];
    for (j, d) in dp.iter_mut().enumerate() {
        d.copy_from_slice(&d_positions[j * 3..j * 3 + 3]);
    }
    let mut dg = [[[0.0; 3]; 3]; JOINT_COUNT];
    for j in (1..JOINT_COUNT).rev() {
        let p = skeleton.parent(j);
        let off = skeleton.rest_offsets[j];
        dp[p] = add(dp[p], dp[j]);
        for r in 0..3 {
            for c in 0..3 {
                dg[p][r][c] += dp[j][r] * off[c];
            }
        }
        // G_j = G_p R_j
        let d_from_child = mat_mul(&dg[j], &transpose(&pose.locals[j]));
        let d_local = mat_mul(&transpose(&pose.globals[p]), &dg[j]);
        for r in 0..3 {
            for c in 0..3 {
                dg[p][r][c] += d_from_child[r][c];
            }
        }
        let d6 = rot6d_vjp(&frame.rotations[j], &d_local)?;
        for k in 0..6 {
            grad_packed[j * 6 + k] += d6[k];
        }
    }
    let d6 = rot6d_vjp(&frame.rotations[0], &dg[0])?;
    for k in 0..6 {
        grad_packed[k] += d6[k];
    }
    for k in 0..3 {
        grad_packed[ROOT_OFFSET + k] += dp[0][k];
    }
    Ok(())
}

/// Distance from every non-root joint to its parent (23 values).
pub fn bone_lengths(positions: &[Vec3; JOINT_COUNT], skeleton: &Skeleton) -> Vec<f64> {
    (1..JOINT_COUNT)
        .map(|j| norm(sub(positions[j], positions[skeleton.parent(j)])))
        .collect()
}

/// FK positions for every frame of a sequence.
pub fn sequence_positions(motion: &MotionSequence, skeleton: &Skeleton) -> Result<Vec<[Vec3; JOINT_COUNT]>> {
    motion.frames.iter().map(|f| forward_kinematics(skeleton, f)).collect()
}

/// Binary contact labels from foot-point speed: 1 where the speed between a
/// frame and its successor is below `speed_threshold` (m/s). The last frame
/// repeats the labels of the one before it.
pub fn compute_contact_labels(
    motion: &MotionSequence,
    skeleton: &Skeleton,
    speed_threshold: f64,
) -> Result<Vec<[f64; CONTACT_DIM]>> {
    let n = motion.len();
    if n < 2 {
        return Err(Error::SequenceTooShort { needed: 2, got: n });
    }
    let positions = sequence_positions(motion, skeleton)?;
    let fps = motion.fps as f64;
    let mut labels = Vec::with_capacity(n);
    for i in 0..n - 1 {
        let mut l = [0.0; CONTACT_DIM];
        for (k, &joint) in skeleton.foot_points.iter().enumerate() {
            let speed = norm(sub(positions[i + 1][joint], positions[i][joint])) * fps;
            l[k] = if speed < speed_threshold { 1.0 } else { 0.0 };
        }
        labels.push(l);
    }
    labels.push(labels[n - 2]);
    Ok(labels)
}

/// Default threshold in m/s for a given frame rate.
pub fn default_contact_threshold(fps: u32) -> f64 {
    CONTACT_METERS_PER_FRAME * fps as f64
}
