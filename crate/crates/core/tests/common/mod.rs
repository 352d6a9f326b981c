//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use erasehash::backbone::ArchDescriptor;
use erasehash::dataset::SimilarityMatrix;
use erasehash::hash::BitCodeMatrix;
use erasehash::model::Model;
use erasehash::objective::{loss_total, ObjectiveWeights};
use erasehash::ops;
use erasehash::srem::AttentionMask;
use erasehash::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn signs(rng: &mut ChaCha8Rng, n: usize) -> Vec<i8> {
    (0..n).map(|_| if rng.random_bool(0.5) { 1 } else { -1 }).collect()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + FD_STEP;
            let up = f(&x);
            x[i] = orig - FD_STEP;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn with(t: &Tensor, data: &[f64]) -> Tensor {
    Tensor::new(t.shape().to_vec(), data.to_vec()).unwrap()
}

fn dot(a: &Tensor, w: &Tensor) -> f64 {
    a.data().iter().zip(w.data()).map(|(x, y)| x * y).sum()
}

/// Relative gradient error of every differentiable op on random shapes.
/// Each op is reduced to a scalar by a random linear read-out.
pub fn op_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut out = Vec::new();

    let (a, b) = (randn(&mut r, &[3, 4]), randn(&mut r, &[4, 2]));
    let w = randn(&mut r, &[3, 2]);
    let (mut ga, mut gb) = (a.clone().with_grad(), b.clone().with_grad());
    ops::matmul_backward(&mut ga, &mut gb, w.data()).unwrap();
    let na = numeric_grad(a.data(), |d| dot(&ops::matmul(&with(&a, d), &b).unwrap(), &w));
    let nb = numeric_grad(b.data(), |d| dot(&ops::matmul(&a, &with(&b, d)).unwrap(), &w));
    out.push(("matmul", rel_err(ga.grad().unwrap(), &na).max(rel_err(gb.grad().unwrap(), &nb))));

    let (a, b, w) = (randn(&mut r, &[2, 5]), randn(&mut r, &[2, 5]), randn(&mut r, &[2, 5]));
    let (mut ga, mut gb) = (a.clone().with_grad(), b.clone().with_grad());
    ops::add_backward(&mut ga, &mut gb, w.data()).unwrap();
    let na = numeric_grad(a.data(), |d| dot(&ops::add(&with(&a, d), &b).unwrap(), &w));
    out.push(("add", rel_err(ga.grad().unwrap(), &na).max(rel_err(gb.grad().unwrap(), w.data()))));

    for (stride, pad) in [(1, 1), (2, 1), (2, 0)] {
        let x = randn(&mut r, &[2, 7, 6]);
        let k = randn(&mut r, &[3, 2, 3, 3]);
        let y = ops::conv2d(&x, &k, stride, pad).unwrap();
        let w = randn(&mut r, y.shape());
        let (mut gx, mut gk) = (x.clone().with_grad(), k.clone().with_grad());
        ops::conv2d_backward(&mut gx, &mut gk, stride, pad, w.data()).unwrap();
        let nx = numeric_grad(x.data(), |d| dot(&ops::conv2d(&with(&x, d), &k, stride, pad).unwrap(), &w));
        let nk = numeric_grad(k.data(), |d| dot(&ops::conv2d(&x, &with(&k, d), stride, pad).unwrap(), &w));
        out.push(("conv2d", rel_err(gx.grad().unwrap(), &nx).max(rel_err(gk.grad().unwrap(), &nk))));
    }

    let (x, bias) = (randn(&mut r, &[3, 4, 5]), randn(&mut r, &[3]));
    let w = randn(&mut r, &[3, 4, 5]);
    let mut gb = bias.clone().with_grad();
    ops::add_channel_bias_backward(&mut gb, w.data()).unwrap();
    let nb = numeric_grad(bias.data(), |d| {
        let mut y = x.clone();
        ops::add_channel_bias(&mut y, &with(&bias, d)).unwrap();
        dot(&y, &w)
    });
    out.push(("channel_bias", rel_err(gb.grad().unwrap(), &nb)));

    let (a, w) = (randn(&mut r, &[4, 3, 5]), randn(&mut r, &[4]));
    let mut ga = a.clone().with_grad();
    ops::global_avg_pool_backward(&mut ga, w.data()).unwrap();
    let na = numeric_grad(a.data(), |d| dot(&ops::global_avg_pool(&with(&a, d)).unwrap(), &w));
    out.push(("global_avg_pool", rel_err(ga.grad().unwrap(), &na)));

    let (x, w) = (randn(&mut r, &[3, 4]), randn(&mut r, &[3, 4]));
    let y = ops::tanh_act(&x);
    let mut gx = x.clone().with_grad();
    ops::tanh_backward(&mut gx, &y, w.data()).unwrap();
    let nx = numeric_grad(x.data(), |d| dot(&ops::tanh_act(&with(&x, d)), &w));
    out.push(("tanh", rel_err(gx.grad().unwrap(), &nx)));

    let (x, w) = (randn(&mut r, &[3, 4]), randn(&mut r, &[3, 4]));
    let mut gx = x.clone().with_grad();
    ops::relu_backward(&mut gx, w.data()).unwrap();
    let nx = numeric_grad(x.data(), |d| dot(&ops::relu_act(&with(&x, d)), &w));
    out.push(("relu", rel_err(gx.grad().unwrap(), &nx)));

    let (x, w) = (randn(&mut r, &[2, 6, 4]), randn(&mut r, &[2, 3, 2]));
    let mut gx = x.clone().with_grad();
    ops::maxpool2_backward(&mut gx, w.data()).unwrap();
    let nx = numeric_grad(x.data(), |d| dot(&ops::maxpool2(&with(&x, d)).unwrap(), &w));
    out.push(("maxpool2", rel_err(gx.grad().unwrap(), &nx)));

    let (a, w) = (randn(&mut r, &[3, 4]), randn(&mut r, &[7, 5]));
    let mut ga = a.clone().with_grad();
    ops::bilinear_resize_backward(&mut ga, 7, 5, w.data()).unwrap();
    let na = numeric_grad(a.data(), |d| dot(&ops::bilinear_resize(&with(&a, d), 7, 5).unwrap(), &w));
    out.push(("bilinear_resize", rel_err(ga.grad().unwrap(), &na)));

    out
}

/// A small random problem for the full objective through the network.
pub struct ChainCase {
    pub model: Model,
    pub anchors: Vec<Tensor>,
    pub erased: Vec<Tensor>,
    pub positives: Vec<Tensor>,
    pub v: BitCodeMatrix,
    pub s: SimilarityMatrix,
    pub weights: ObjectiveWeights,
}

impl ChainCase {
    pub fn random(seed: u64) -> Self {
        let mut r = rng(seed);
        let arch = ArchDescriptor::with_channels(8, 8, &[3, 4]);
        let (k, rows, n) = (5, 3, 4);
        let mut model = Model::init(&arch, k, seed).unwrap();
        // nonzero biases so every parameter sees a generic point
        for t in model.tensors_mut() {
            if t.rank() == 1 {
                t.data_mut().iter_mut().for_each(|b| *b = r.random_range(-0.2..0.2));
            }
        }
        let img = |r: &mut ChaCha8Rng| Tensor::from_fn(&[3, 8, 8], |_| r.random_range(0.0..1.0));
        let anchors = (0..rows).map(|_| img(&mut r)).collect();
        let erased = (0..rows).map(|_| img(&mut r)).collect();
        let positives = (0..rows).map(|_| img(&mut r)).collect();
        let v = BitCodeMatrix::from_signs(n, k, &signs(&mut r, n * k)).unwrap();
        let s = SimilarityMatrix::from_entries((0..rows).collect(), n, signs(&mut r, rows * n)).unwrap();
        let weights = ObjectiveWeights {
            alpha: r.random_range(0.1..2.0),
            beta: r.random_range(0.1..2.0),
            normalized: seed % 2 == 1,
        };
        Self { model, anchors, erased, positives, v, s, weights }
    }

    fn codes(model: &Model, images: &[Tensor]) -> Tensor {
        let k = model.code_length();
        let data: Vec<f64> = images.iter().flat_map(|x| model.encode(x).unwrap().into_data()).collect();
        Tensor::new(vec![images.len(), k], data).unwrap()
    }

    pub fn loss(&self, model: &Model) -> f64 {
        let u = Self::codes(model, &self.anchors);
        let e = Self::codes(model, &self.erased);
        let p = Self::codes(model, &self.positives);
        loss_total(&u, &e, &p, &self.v, &self.s, self.weights).unwrap().0.total
    }

    pub fn analytic(&self) -> Vec<Vec<f64>> {
        let k = self.model.code_length();
        let u = Self::codes(&self.model, &self.anchors);
        let e = Self::codes(&self.model, &self.erased);
        let p = Self::codes(&self.model, &self.positives);
        let (_, g) = loss_total(&u, &e, &p, &self.v, &self.s, self.weights).unwrap();
        let mut model = self.model.clone();
        model.enable_grads();
        for (images, grads) in [(&self.anchors, &g.anchor), (&self.erased, &g.erased), (&self.positives, &g.positive)] {
            for (b, x) in images.iter().enumerate() {
                let trace = self.model.forward(x.clone()).unwrap();
                trace.backward(&mut model, &grads.data()[b * k..(b + 1) * k]).unwrap();
            }
        }
        model.grads()
    }

    /// Relative error per parameter tensor.
    pub fn errors(&self) -> Vec<f64> {
        let analytic = self.analytic();
        let count = self.model.tensors().len();
        (0..count)
            .map(|t| {
                let base = self.model.tensors()[t].data().to_vec();
                let numeric = numeric_grad(&base, |d| {
                    let mut m = self.model.clone();
                    m.tensors_mut()[t].data_mut().copy_from_slice(d);
                    self.loss(&m)
                });
                rel_err(&analytic[t], &numeric)
            })
            .collect()
    }
}

/// Sorts every `(value, position)` pair and stamps blocks directly.
pub fn select_erase_oracle(mask: &AttentionMask, n_e: usize, l: usize) -> Vec<f64> {
    let (h, w) = (mask.values.shape()[0], mask.values.shape()[1]);
    let vals = mask.values.data();
    let mut pairs: Vec<(f64, usize, usize)> = (0..h).flat_map(|y| (0..w).map(move |x| (vals[y * w + x], y, x))).collect();
    // larger value first, then earlier row, then earlier column
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![1.0; h * w];
    for &(_, y, x) in &pairs[..n_e] {
        for yy in 0..h {
            for xx in 0..w {
                if yy >= y && yy < y + l && xx >= x && xx < x + l {
                    out[yy * w + xx] = 0.0;
                }
            }
        }
    }
    out
}

/// `Σᵢⱼ (uᵢ·vⱼ − k·sᵢⱼ)²` by direct loops.
pub fn loss_v_oracle(v: &[Vec<i8>], u: &Tensor, s: &SimilarityMatrix) -> f64 {
    let k = u.shape()[1];
    let mut total = 0.0;
    for i in 0..u.shape()[0] {
        for (j, vj) in v.iter().enumerate() {
            let ip: f64 = (0..k).map(|b| u.data()[i * k + b] * f64::from(vj[b])).sum();
            total += (ip - k as f64 * f64::from(s.get(i, j))).powi(2);
        }
    }
    total
}

/// Best column `m` over all 2ⁿ assignments, other columns fixed; the
/// first minimiser in enumeration order wins, with `+1` enumerated first.
pub fn best_column_oracle(v: &[Vec<i8>], u: &Tensor, s: &SimilarityMatrix, m: usize) -> (Vec<i8>, f64) {
    let n = v.len();
    let mut best: Option<(Vec<i8>, f64)> = None;
    for mask in 0..(1u32 << n) {
        let column: Vec<i8> = (0..n).map(|j| if mask >> j & 1 == 0 { 1 } else { -1 }).collect();
        let mut trial = v.to_vec();
        for (row, &b) in trial.iter_mut().zip(&column) {
            row[m] = b;
        }
        let loss = loss_v_oracle(&trial, u, s);
        if best.as_ref().is_none_or(|(_, l)| loss < *l) {
            best = Some((column, loss));
        }
    }
    best.unwrap()
}

/// AP written from the definition: precision at each relevant rank, averaged.
pub fn ap_oracle(flags: &[bool]) -> f64 {
    let relevant: Vec<usize> = (0..flags.len()).filter(|&j| flags[j]).collect();
    if relevant.is_empty() {
        return 0.0;
    }
    let precisions: Vec<f64> = relevant
        .iter()
        .map(|&j| flags[..=j].iter().filter(|&&f| f).count() as f64 / (j + 1) as f64)
        .collect();
    precisions.iter().sum::<f64>() / relevant.len() as f64
}

/// Hamming distance from ±1 codes via the inner product.
pub fn hamming_oracle(a: &[i8], b: &[i8]) -> u32 {
    let dot: i32 = a.iter().zip(b).map(|(&x, &y)| i32::from(x) * i32::from(y)).sum();
    ((a.len() as i32 - dot) / 2) as u32
}

/// Full sort by `(distance, id)`.
pub fn topk_oracle(db: &[Vec<i8>], q: &[i8], top: usize) -> Vec<(usize, u32)> {
    let mut all: Vec<(usize, u32)> = db.iter().enumerate().map(|(i, c)| (i, hamming_oracle(c, q))).collect();
    all.sort_by_key(|&(i, d)| (d, i));
    all.truncate(top);
    all
}
