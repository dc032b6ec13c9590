//! Reconstruction and geometric training losses, built on the autodiff graph.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{Skeleton, CONTACT_DIM, CONTACT_OFFSET, FRAME_DIM};
use crate::nn::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_pos: f64,
    pub lambda_vel: f64,
    pub lambda_foot: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_pos: 1.0,
            lambda_vel: 1.0,
            lambda_foot: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_pos", self.lambda_pos),
            ("lambda_vel", self.lambda_vel),
            ("lambda_foot", self.lambda_foot),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be a finite value ≥ 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

fn frames(g: &Graph, x: Var) -> Result<usize> {
    if g.value(x).cols() != FRAME_DIM || g.shape(x).len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "motion {:?}, expected [N, {FRAME_DIM}]",
            g.shape(x)
        )));
    }
    Ok(g.value(x).rows())
}

fn same_shape(g: &Graph, a: Var, b: Var) -> Result<usize> {
    let n = frames(g, a)?;
    if g.shape(a) != g.shape(b) {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    Ok(n)
}

/// Mean squared error over every entry.
pub fn loss_simple(g: &mut Graph, x: Var, x_hat: Var) -> Result<Var> {
    same_shape(g, x, x_hat)?;
    let d = g.sub(x, x_hat)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// `(1/N) Σᵢ ‖FK(xⁱ) − FK(x̂ⁱ)‖²` over all joint positions.
pub fn loss_pos(g: &mut Graph, x: Var, x_hat: Var, skeleton: &Arc<Skeleton>) -> Result<Var> {
    let n = same_shape(g, x, x_hat)?;
    if n == 0 {
        return Err(Error::SequenceTooShort { needed: 1, got: 0 });
    }
    let p = g.forward_kinematics(x, skeleton.clone())?;
    let p_hat = g.forward_kinematics(x_hat, skeleton.clone())?;
    let d = g.sub(p, p_hat)?;
    let s = g.sum_squares(d);
    Ok(g.scale(s, 1.0 / n as f64))
}

/// `(1/(N−1)) Σᵢ ‖Δxⁱ − Δx̂ⁱ‖²` over consecutive frame deltas.
pub fn loss_vel(g: &mut Graph, x: Var, x_hat: Var) -> Result<Var> {
    let n = same_shape(g, x, x_hat)?;
    if n < 2 {
        return Err(Error::SequenceTooShort { needed: 2, got: n });
    }
    let dx = g.diff_rows(x)?;
    let dh = g.diff_rows(x_hat)?;
    let d = g.sub(dx, dh)?;
    let s = g.sum_squares(d);
    Ok(g.scale(s, 1.0 / (n - 1) as f64))
}

/// `[N, 12]` positions of the four foot points.
fn foot_positions(g: &mut Graph, positions: Var, skeleton: &Skeleton) -> Result<Var> {
    let cols = skeleton
        .foot_points
        .iter()
        .map(|&j| g.slice_cols(positions, 3 * j, 3 * j + 3))
        .collect::<Result<Vec<_>>>()?;
    g.concat_cols(&cols)
}

/// `(1/(N−1)) Σᵢ ‖(FK_feet(x̂ⁱ⁺¹) − FK_feet(x̂ⁱ)) ⊙ fᵢ‖²`, with `fᵢ` the
/// predicted contact of each foot point in frame `i`. Gradients flow through
/// both the foot motion and the contacts.
pub fn loss_foot(g: &mut Graph, x_hat: Var, skeleton: &Arc<Skeleton>) -> Result<Var> {
    let n = frames(g, x_hat)?;
    if n < 2 {
        return Err(Error::SequenceTooShort { needed: 2, got: n });
    }
    let pos = g.forward_kinematics(x_hat, skeleton.clone())?;
    let feet = foot_positions(g, pos, skeleton)?;
    let vel = g.diff_rows(feet)?;
    let contacts = g.slice_cols(x_hat, CONTACT_OFFSET, CONTACT_OFFSET + CONTACT_DIM)?;
    let contacts = g.slice_rows(contacts, 0, n - 1)?;
    let gate = g.repeat_cols(contacts, 3);
    let gated = g.mul(vel, gate)?;
    let s = g.sum_squares(gated);
    Ok(g.scale(s, 1.0 / (n - 1) as f64))
}

/// Handles to every loss term on one graph.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub simple: Var,
    pub pos: Var,
    pub vel: Var,
    pub foot: Var,
    pub total: Var,
}

/// Evaluated loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub simple: f64,
    pub pos: f64,
    pub vel: f64,
    pub foot: f64,
    pub total: f64,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossTerms {
        let v = |x: Var| g.value(x).data()[0];
        LossTerms {
            simple: v(self.simple),
            pos: v(self.pos),
            vel: v(self.vel),
            foot: v(self.foot),
            total: v(self.total),
        }
    }
}

/// `L_simple + λ_pos·L_pos + λ_vel·L_vel + λ_foot·L_foot`.
pub fn total_loss(
    g: &mut Graph,
    x: Var,
    x_hat: Var,
    weights: &LossWeights,
    skeleton: &Arc<Skeleton>,
) -> Result<LossVars> {
    weights.validate()?;
    let simple = loss_simple(g, x, x_hat)?;
    let pos = loss_pos(g, x, x_hat, skeleton)?;
    let vel = loss_vel(g, x, x_hat)?;
    let foot = loss_foot(g, x_hat, skeleton)?;
    let a = g.scale(pos, weights.lambda_pos);
    let b = g.scale(vel, weights.lambda_vel);
    let c = g.scale(foot, weights.lambda_foot);
    let mut total = g.add(simple, a)?;
    total = g.add(total, b)?;
    total = g.add(total, c)?;
    Ok(LossVars {
        simple,
        pos,
        vel,
        foot,
        total,
    })
}

/// Evaluates every term on flat `N × 151` buffers.
pub fn evaluate_losses(x: &[f64], x_hat: &[f64], weights: &LossWeights, skeleton: &Arc<Skeleton>) -> Result<LossTerms> {
    let mut g = Graph::new();
    let n = x.len() / FRAME_DIM;
    let xv = g.constant(Tensor::matrix(n, FRAME_DIM, x.to_vec())?);
    let hv = g.constant(Tensor::matrix(x_hat.len() / FRAME_DIM, FRAME_DIM, x_hat.to_vec())?);
    let vars = total_loss(&mut g, xv, hv, weights, skeleton)?;
    Ok(vars.values(&g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{axis_angle, matrix_to_rot6d, sequence_positions, MotionSequence, PoseFrame};
    use crate::nn::grad_check;
    use crate::rng::Rng;

    fn skel() -> Arc<Skeleton> {
        Arc::new(Skeleton::smpl24())
    }

    fn random_motion(rng: &mut Rng, n: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n * FRAME_DIM);
        for _ in 0..n {
            let mut f = PoseFrame::identity([rng.normal(), 0.9 + 0.1 * rng.normal(), rng.normal()]);
            for r in f.rotations.iter_mut() {
                let axis = [rng.normal(), rng.normal(), rng.normal()];
                *r = matrix_to_rot6d(&axis_angle(axis, rng.uniform_range(-1.0, 1.0))).unwrap();
                for v in r.iter_mut() {
                    *v += 0.05 * rng.normal();
                }
            }
            for c in f.contacts.iter_mut() {
                *c = rng.uniform();
            }
            out.extend(f.pack());
        }
        out
    }

    fn var(g: &mut Graph, data: &[f64]) -> Var {
        g.constant(Tensor::matrix(data.len() / FRAME_DIM, FRAME_DIM, data.to_vec()).unwrap())
    }

    fn eval<F: Fn(&mut Graph, Var, Var) -> Result<Var>>(f: F, x: &[f64], h: &[f64]) -> f64 {
        let mut g = Graph::new();
        let (a, b) = (var(&mut g, x), var(&mut g, h));
        let out = f(&mut g, a, b).unwrap();
        g.value(out).data()[0]
    }

    #[test]
    fn simple_cases() {
        let mut rng = Rng::new(1);
        let x = rng.normal_vec(3 * FRAME_DIM);
        let h = rng.normal_vec(3 * FRAME_DIM);
        assert_eq!(eval(loss_simple, &x, &x), 0.0);
        assert_eq!(eval(loss_simple, &vec![0.0; FRAME_DIM], &vec![1.0; FRAME_DIM]), 1.0);
        let oracle = x.iter().zip(&h).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64;
        assert!((eval(loss_simple, &x, &h) - oracle).abs() <= 1e-12);
        let mut g = Graph::new();
        let a = var(&mut g, &x);
        let b = var(&mut g, &x[..2 * FRAME_DIM]);
        assert!(matches!(loss_simple(&mut g, a, b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn pos_cases() {
        let s = skel();
        let mut rng = Rng::new(2);
        let x = random_motion(&mut rng, 4);
        let pos = |g: &mut Graph, a, b| loss_pos(g, a, b, &s);
        assert_eq!(eval(pos, &x, &x), 0.0);
        let mut shifted = x.clone();
        for f in 0..4 {
            shifted[f * FRAME_DIM + 144] += 1.0;
        }
        assert!((eval(pos, &x, &shifted) - 24.0).abs() < 1e-10);
    }

    #[test]
    fn vel_cases() {
        let mut rng = Rng::new(3);
        let constant: Vec<f64> = rng.normal_vec(FRAME_DIM).repeat(5);
        assert_eq!(eval(loss_vel, &constant, &constant), 0.0);
        let x = rng.normal_vec(5 * FRAME_DIM);
        let offset: Vec<f64> = x.iter().map(|v| v + 3.25).collect();
        assert!(eval(loss_vel, &x, &offset).abs() < 1e-20);
        let h = rng.normal_vec(5 * FRAME_DIM);
        let mut oracle = 0.0;
        for i in 0..4 {
            for d in 0..FRAME_DIM {
                let dx = x[(i + 1) * FRAME_DIM + d] - x[i * FRAME_DIM + d];
                let dh = h[(i + 1) * FRAME_DIM + d] - h[i * FRAME_DIM + d];
                oracle += (dx - dh).powi(2);
            }
        }
        oracle /= 4.0;
        assert!((eval(loss_vel, &x, &h) - oracle).abs() <= 1e-12 * oracle.max(1.0));
        let mut g = Graph::new();
        let one = var(&mut g, &x[..FRAME_DIM]);
        assert!(matches!(
            loss_vel(&mut g, one, one),
            Err(Error::SequenceTooShort { .. })
        ));
    }

    #[test]
    fn foot_cases() {
        let s = skel();
        let foot = |g: &mut Graph, _x, h| loss_foot(g, h, &s);
        let mut rng = Rng::new(4);
        let mut moving = random_motion(&mut rng, 3);
        for f in 0..3 {
            for c in 0..4 {
                moving[f * FRAME_DIM + CONTACT_OFFSET + c] = 0.0;
            }
        }
        assert_eq!(eval(foot, &moving, &moving), 0.0);

        let mut still = PoseFrame::identity([0.0, 0.93, 0.0]);
        still.contacts = [1.0; 4];
        let still: Vec<f64> = still.pack().repeat(3);
        assert_eq!(eval(foot, &still, &still), 0.0);

        // rigid translation by (1,1,1) per frame moves every foot point by
        // the same vector; contacts weight each point
        let mut two = Vec::new();
        let weights = [1.0, 0.5, 0.0, 0.25];
        for i in 0..2 {
            let mut f = PoseFrame::identity([i as f64, 0.93 + i as f64, i as f64]);
            f.contacts = weights;
            two.extend(f.pack());
        }
        let want: f64 = weights.iter().map(|w| 3.0 * w * w).sum();
        assert!((eval(foot, &two, &two) - want).abs() < 1e-12);

        // direct oracle on random motion
        let x = random_motion(&mut rng, 4);
        let seq = MotionSequence::from_flat(30, &x).unwrap();
        let p = sequence_positions(&seq, &s).unwrap();
        let mut oracle = 0.0;
        for i in 0..3 {
            for (k, &j) in s.foot_points.iter().enumerate() {
                let c = x[i * FRAME_DIM + CONTACT_OFFSET + k];
                for a in 0..3 {
                    oracle += ((p[i + 1][j][a] - p[i][j][a]) * c).powi(2);
                }
            }
        }
        oracle /= 3.0;
        assert!((eval(foot, &x, &x) - oracle).abs() < 1e-12);
    }

    #[test]
    fn total_cases() {
        let s = skel();
        let mut rng = Rng::new(5);
        let mut x = random_motion(&mut rng, 4);
        for f in 0..4 {
            for c in 0..4 {
                x[f * FRAME_DIM + CONTACT_OFFSET + c] = 0.0;
            }
        }
        let w = LossWeights::default();
        assert_eq!(evaluate_losses(&x, &x, &w, &s).unwrap().total, 0.0);

        let h = random_motion(&mut rng, 4);
        let zero = LossWeights {
            lambda_pos: 0.0,
            lambda_vel: 0.0,
            lambda_foot: 0.0,
        };
        let t = evaluate_losses(&x, &h, &zero, &s).unwrap();
        assert_eq!(t.total, t.simple);

        let w = LossWeights {
            lambda_pos: 0.7,
            lambda_vel: 1.3,
            lambda_foot: 0.4,
        };
        let t = evaluate_losses(&x, &h, &w, &s).unwrap();
        let parts = |f: &dyn Fn(&mut Graph, Var, Var) -> Result<Var>| eval(f, &x, &h);
        let simple = parts(&loss_simple);
        let pos = parts(&|g: &mut Graph, a, b| loss_pos(g, a, b, &s));
        let vel = parts(&loss_vel);
        let foot = parts(&|g: &mut Graph, _a, b| loss_foot(g, b, &s));
        let want = simple + 0.7 * pos + 1.3 * vel + 0.4 * foot;
        assert!((t.total - want).abs() <= 1e-12 * want.max(1.0));
        assert!(t.simple >= 0.0 && t.pos >= 0.0 && t.vel >= 0.0 && t.foot >= 0.0);

        let bad = LossWeights { lambda_vel: -1.0, ..w };
        assert!(evaluate_losses(&x, &h, &bad, &s).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let s = skel();
        let mut rng = Rng::new(6);
        let x = Tensor::matrix(3, FRAME_DIM, random_motion(&mut rng, 3)).unwrap();
        let h = Tensor::matrix(3, FRAME_DIM, random_motion(&mut rng, 3)).unwrap();
        let w = LossWeights::default();
        type LossFn<'a> = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a>;
        let cases: Vec<(&str, LossFn)> = vec![
            ("simple", Box::new(|g, v| loss_simple(g, v[0], v[1]))),
            ("pos", Box::new(|g, v| loss_pos(g, v[0], v[1], &s))),
            ("vel", Box::new(|g, v| loss_vel(g, v[0], v[1]))),
            ("foot", Box::new(|g, v| loss_foot(g, v[1], &s))),
            ("total", Box::new(|g, v| Ok(total_loss(g, v[0], v[1], &w, &s)?.total))),
        ];
        for (name, f) in cases {
            let err = grad_check(|g, v| f(g, v), &[x.clone(), h.clone()], 1e-6).unwrap();
            assert!(err <= 1e-4, "{name}: {err}");
        }
    }
}
