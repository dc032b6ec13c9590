//! Layers used by the denoiser, written against [`Graph`].

use std::collections::BTreeMap;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = tensor;
            return;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Adds every tensor to `graph` as a trainable leaf.
    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        let vars = self.tensors.iter().map(|t| graph.param(t.clone())).collect();
        BoundParams {
            vars,
            index: self.index.clone(),
        }
    }

    /// Adds every tensor to `graph` as a constant (inference).
    pub fn bind_frozen(&self, graph: &mut Graph) -> BoundParams {
        let vars = self.tensors.iter().map(|t| graph.constant(t.clone())).collect();
        BoundParams {
            vars,
            index: self.index.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Graph handles for a [`ParamStore`], in the store's order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
    index: BTreeMap<String, usize>,
}

impl BoundParams {
    /// Binds existing graph leaves to parameter names, in order.
    pub fn from_parts(names: &[String], vars: &[Var]) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self {
            vars: vars.to_vec(),
            index,
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::ShapeMismatch(format!("missing parameter {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Uniform ±√(1/fan_in) weights.
pub fn init_uniform(rng: &mut Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// Registers `{prefix}.weight [d_in, d_out]` and `{prefix}.bias [d_out]`.
pub fn init_linear(store: &mut ParamStore, rng: &mut Rng, prefix: &str, d_in: usize, d_out: usize) {
    store.insert(format!("{prefix}.weight"), init_uniform(rng, vec![d_in, d_out], d_in));
    store.insert(format!("{prefix}.bias"), Tensor::zeros(vec![d_out]));
}

/// Registers `{prefix}.weight [k, c_in, c_out]` and `{prefix}.bias [c_out]`.
pub fn init_conv1d(store: &mut ParamStore, rng: &mut Rng, prefix: &str, k: usize, c_in: usize, c_out: usize) {
    store.insert(
        format!("{prefix}.weight"),
        init_uniform(rng, vec![k, c_in, c_out], k * c_in),
    );
    store.insert(format!("{prefix}.bias"), Tensor::zeros(vec![c_out]));
}

/// Registers query/key/value/output projections for [`cross_attention`].
pub fn init_attention(store: &mut ParamStore, rng: &mut Rng, prefix: &str, dim: usize) {
    for p in ["q", "k", "v", "o"] {
        init_linear(store, rng, &format!("{prefix}.{p}"), dim, dim);
    }
}

/// `y = x·W + b` over the last dimension.
pub fn linear_forward(g: &mut Graph, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = g.matmul(x, weight)?;
    g.add_row(y, bias)
}

pub fn linear(g: &mut Graph, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    linear_forward(g, x, w, b)
}

/// Same-padded temporal convolution plus bias.
pub fn conv1d_forward(g: &mut Graph, x: Var, kernels: Var, bias: Var) -> Result<Var> {
    let y = g.conv1d(x, kernels)?;
    g.add_row(y, bias)
}

pub fn conv1d(g: &mut Graph, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    conv1d_forward(g, x, w, b)
}

/// Feature-wise linear modulation: `gamma ⊙ h + beta`, broadcast over rows.
pub fn film(g: &mut Graph, h: Var, gamma: Var, beta: Var) -> Result<Var> {
    let scaled = g.mul_row(h, gamma)?;
    g.add_row(scaled, beta)
}

/// Multi-head scaled dot-product attention.
///
/// `query: [Lq, D]` attends over `keys`/`values: [Lk, D]`; each head uses a
/// contiguous `D / heads` block of the projected features.
pub fn cross_attention(
    g: &mut Graph,
    p: &BoundParams,
    prefix: &str,
    query: Var,
    keys: Var,
    values: Var,
    heads: usize,
) -> Result<Var> {
    let (_, d) = (g.value(query).rows(), g.value(query).cols());
    let lk = g.value(keys).rows();
    if lk == 0 {
        return Err(Error::EmptyContext);
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::ShapeMismatch(format!(
            "width {d} not divisible by {heads} heads"
        )));
    }
    if g.value(keys).cols() != d || g.value(values).cols() != d || g.value(values).rows() != lk {
        return Err(Error::ShapeMismatch(format!(
            "attention query {:?}, keys {:?}, values {:?}",
            g.shape(query),
            g.shape(keys),
            g.shape(values)
        )));
    }
    let q = linear(g, p, &format!("{prefix}.q"), query)?;
    let k = linear(g, p, &format!("{prefix}.k"), keys)?;
    let v = linear(g, p, &format!("{prefix}.v"), values)?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, (h + 1) * dh)?;
        let kh = g.slice_cols(k, h * dh, (h + 1) * dh)?;
        let vh = g.slice_cols(v, h * dh, (h + 1) * dh)?;
        let scores = g.matmul_t(qh, kh)?;
        let scores = g.scale(scores, scale);
        let weights = g.softmax_rows(scores);
        outs.push(g.matmul(weights, vh)?);
    }
    let joined = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    linear(g, p, &format!("{prefix}.o"), joined)
}

/// Sinusoidal encoding of a diffusion step into `dim` values
/// (`sin` in the first half, `cos` in the second).
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Tensor::matrix(1, dim, out).expect("dim matches")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::grad_check;

    fn rand_tensor(rng: &mut Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, rng.normal_vec(n)).unwrap()
    }

    #[test]
    fn linear_identity_and_zero_input() {
        let mut g = Graph::new();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let x = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let w = g.constant(Tensor::matrix(3, 3, eye).unwrap());
        let b0 = g.constant(Tensor::zeros(vec![3]));
        let y = linear_forward(&mut g, x, w, b0).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        let zero = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let y = linear_forward(&mut g, zero, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn linear_matches_triple_loop() {
        let mut rng = Rng::new(1);
        let x = rand_tensor(&mut rng, vec![3, 4, 5]);
        let w = rand_tensor(&mut rng, vec![5, 6]);
        let b = rand_tensor(&mut rng, vec![6]);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = linear_forward(&mut g, xv, wv, bv).unwrap();
        assert_eq!(g.shape(y), &[3, 4, 6]);
        for r in 0..12 {
            for o in 0..6 {
                let mut acc = b.data()[o];
                for i in 0..5 {
                    acc += x.data()[r * 5 + i] * w.data()[i * 6 + o];
                }
                assert!((g.value(y).data()[r * 6 + o] - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn conv1d_identity_and_constant() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(4, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap());
        let k1 = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = g.conv1d(x, k1).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        let c = g.constant(Tensor::full(vec![7, 1], 3.0));
        let avg = g.constant(Tensor::full(vec![3, 1, 1], 1.0 / 3.0));
        let y = g.conv1d(c, avg).unwrap();
        let d = g.value(y).data();
        for v in &d[1..6] {
            assert!((v - 3.0).abs() < 1e-15);
        }
        // zero padding at the edges
        assert!((d[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn conv1d_matches_sliding_window() {
        let mut rng = Rng::new(2);
        let (len, ci, co, k) = (9, 3, 4, 5);
        let x = rand_tensor(&mut rng, vec![len, ci]);
        let w = rand_tensor(&mut rng, vec![k, ci, co]);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv1d(xv, wv).unwrap();
        let pad = (k / 2) as isize;
        for i in 0..len as isize {
            for o in 0..co {
                let mut acc = 0.0;
                for d in 0..k as isize {
                    let s = i + d - pad;
                    if s < 0 || s >= len as isize {
                        continue;
                    }
                    for c in 0..ci {
                        acc += x.data()[s as usize * ci + c] * w.data()[(d as usize * ci + c) * co + o];
                    }
                }
                assert!((g.value(y).data()[i as usize * co + o] - acc).abs() <= 1e-12);
            }
        }
    }

    fn attention_store(rng: &mut Rng, d: usize) -> ParamStore {
        let mut s = ParamStore::new();
        init_attention(&mut s, rng, "att", d);
        // nonzero biases so the oracle checks them too
        for name in ["att.q.bias", "att.k.bias", "att.v.bias", "att.o.bias"] {
            let t = s.get_mut(name).unwrap();
            for v in t.data_mut() {
                *v = rng.normal() * 0.1;
            }
        }
        s
    }

    fn lin(x: &[f64], rows: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
        let (din, dout) = (w.shape()[0], w.shape()[1]);
        let mut out = vec![0.0; rows * dout];
        for r in 0..rows {
            for o in 0..dout {
                out[r * dout + o] =
                    b.data()[o] + (0..din).map(|i| x[r * din + i] * w.data()[i * dout + o]).sum::<f64>();
            }
        }
        out
    }

    /// Explicit per-head softmax attention.
    fn attention_oracle(s: &ParamStore, q_in: &Tensor, kv: &Tensor, heads: usize) -> Vec<f64> {
        let p = |n: &str| s.get(n).unwrap();
        let (lq, d) = (q_in.rows(), q_in.cols());
        let lk = kv.rows();
        let q = lin(q_in.data(), lq, p("att.q.weight"), p("att.q.bias"));
        let k = lin(kv.data(), lk, p("att.k.weight"), p("att.k.bias"));
        let v = lin(kv.data(), lk, p("att.v.weight"), p("att.v.bias"));
        let dh = d / heads;
        let mut joined = vec![0.0; lq * d];
        for h in 0..heads {
            for i in 0..lq {
                let scores: Vec<f64> = (0..lk)
                    .map(|j| {
                        (0..dh)
                            .map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c])
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dh {
                    joined[i * d + h * dh + c] = (0..lk).map(|j| e[j] / z * v[j * d + h * dh + c]).sum();
                }
            }
        }
        lin(&joined, lq, p("att.o.weight"), p("att.o.bias"))
    }

    #[test]
    fn attention_matches_naive_oracle() {
        let mut rng = Rng::new(3);
        let s = attention_store(&mut rng, 8);
        let q = rand_tensor(&mut rng, vec![4, 8]);
        let kv = rand_tensor(&mut rng, vec![6, 8]);
        let mut g = Graph::new();
        let p = s.bind_frozen(&mut g);
        let (qv, kvv) = (g.constant(q.clone()), g.constant(kv.clone()));
        let y = cross_attention(&mut g, &p, "att", qv, kvv, kvv, 2).unwrap();
        let want = attention_oracle(&s, &q, &kv, 2);
        for (a, b) in g.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn attention_single_key_and_identical_keys() {
        let mut rng = Rng::new(4);
        let s = attention_store(&mut rng, 8);
        let q = rand_tensor(&mut rng, vec![3, 8]);
        let one = rand_tensor(&mut rng, vec![1, 8]);
        let proj = |rows: &[f64]| {
            let v = lin(rows, 1, s.get("att.v.weight").unwrap(), s.get("att.v.bias").unwrap());
            lin(&v, 1, s.get("att.o.weight").unwrap(), s.get("att.o.bias").unwrap())
        };
        let mut g = Graph::new();
        let p = s.bind_frozen(&mut g);
        let qv = g.constant(q.clone());
        let ov = g.constant(one.clone());
        let y = cross_attention(&mut g, &p, "att", qv, ov, ov, 2).unwrap();
        let want = proj(one.data());
        for r in 0..3 {
            for (a, b) in g.value(y).row(r).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }

        // identical keys, distinct values -> projection of the mean value row
        let keys = Tensor::new(vec![3, 8], one.data().repeat(3)).unwrap();
        let vals = rand_tensor(&mut rng, vec![3, 8]);
        let mean: Vec<f64> = (0..8)
            .map(|c| (0..3).map(|r| vals.data()[r * 8 + c]).sum::<f64>() / 3.0)
            .collect();
        let kv = g.constant(keys);
        let vv = g.constant(vals);
        let y = cross_attention(&mut g, &p, "att", qv, kv, vv, 2).unwrap();
        let want = proj(&mean);
        for r in 0..3 {
            for (a, b) in g.value(y).row(r).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }

        let empty = g.constant(Tensor::zeros(vec![0, 8]));
        assert!(matches!(
            cross_attention(&mut g, &p, "att", qv, empty, empty, 2),
            Err(Error::EmptyContext)
        ));
        assert!(cross_attention(&mut g, &p, "att", qv, ov, ov, 3).is_err());
    }

    #[test]
    fn film_cases() {
        let mut rng = Rng::new(5);
        let h = rand_tensor(&mut rng, vec![4, 3]);
        let gamma = rand_tensor(&mut rng, vec![3]);
        let beta = rand_tensor(&mut rng, vec![3]);
        let mut g = Graph::new();
        let hv = g.constant(h.clone());
        let ones = g.constant(Tensor::full(vec![3], 1.0));
        let zeros = g.constant(Tensor::zeros(vec![3]));
        let y = film(&mut g, hv, ones, zeros).unwrap();
        assert_eq!(g.value(y).data(), h.data());
        let bv = g.constant(beta.clone());
        let y = film(&mut g, hv, zeros, bv).unwrap();
        assert_eq!(g.value(y).data(), beta.data().repeat(4).as_slice());
        let gv = g.constant(gamma.clone());
        let y = film(&mut g, hv, gv, bv).unwrap();
        for r in 0..4 {
            for c in 0..3 {
                let want = gamma.data()[c] * h.data()[r * 3 + c] + beta.data()[c];
                assert!((g.value(y).data()[r * 3 + c] - want).abs() <= 1e-12);
            }
        }
        let bad = g.constant(Tensor::zeros(vec![4]));
        assert!(film(&mut g, hv, bad, bv).is_err());
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = Rng::new(6);
        let s = attention_store(&mut rng, 8);
        let q = rand_tensor(&mut rng, vec![5, 8]);
        let run = || {
            let mut g = Graph::new();
            let p = s.bind_frozen(&mut g);
            let qv = g.constant(q.clone());
            let y = cross_attention(&mut g, &p, "att", qv, qv, qv, 4).unwrap();
            g.value(y).clone()
        };
        let (a, b) = (run(), run());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let mut rng = Rng::new(7);
        // linear
        let w = rand_tensor(&mut rng, vec![5, 3]);
        let b = rand_tensor(&mut rng, vec![3]);
        let x = rand_tensor(&mut rng, vec![4, 5]);
        let err = grad_check(
            |g, v| {
                let wv = g.param(w.clone());
                let bv = g.param(b.clone());
                let y = linear_forward(g, v[0], wv, bv)?;
                let y = g.gelu(y);
                Ok(g.sum_squares(y))
            },
            &[x.clone()],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "linear {err}");

        // conv1d, gradient w.r.t. both input and kernels
        let xk = rand_tensor(&mut rng, vec![7, 3]);
        let k = rand_tensor(&mut rng, vec![3, 3, 2]);
        let bias = rand_tensor(&mut rng, vec![2]);
        let err = grad_check(
            |g, v| {
                let bv = g.param(bias.clone());
                let y = conv1d_forward(g, v[0], v[1], bv)?;
                Ok(g.sum_squares(y))
            },
            &[xk, k],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "conv1d {err}");

        // attention block w.r.t. query and context
        let s = attention_store(&mut rng, 8);
        let q = rand_tensor(&mut rng, vec![3, 8]);
        let kv = rand_tensor(&mut rng, vec![5, 8]);
        let err = grad_check(
            |g, v| {
                let p = s.bind(g);
                let y = cross_attention(g, &p, "att", v[0], v[1], v[1], 2)?;
                Ok(g.sum_squares(y))
            },
            &[q, kv],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "attention {err}");

        // FiLM block w.r.t. h, gamma, beta
        let h = rand_tensor(&mut rng, vec![4, 3]);
        let gamma = rand_tensor(&mut rng, vec![3]);
        let beta = rand_tensor(&mut rng, vec![3]);
        let err = grad_check(
            |g, v| {
                let y = film(g, v[0], v[1], v[2])?;
                let y = g.gelu(y);
                Ok(g.sum_squares(y))
            },
            &[h, gamma, beta],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "film {err}");
    }

    #[test]
    fn timestep_embedding_shape() {
        let e = timestep_embedding(0, 8);
        assert_eq!(e.shape(), &[1, 8]);
        assert_eq!(&e.data()[..4], &[0.0; 4]);
        assert_eq!(&e.data()[4..], &[1.0; 4]);
        assert_ne!(timestep_embedding(10, 8), timestep_embedding(11, 8));
    }
}
