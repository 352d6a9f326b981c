//! Training objective over relaxed codes.
//!
//! `L = L_sq + α·L_self + β·L_others`, where
//! `L_sq = Σᵢ Σⱼ (uᵢᵀvⱼ − k·sᵢⱼ)²` ties anchor codes to the database codes,
//! `L_self = Σ ‖uᵢ − ũᵢ‖²` ties each anchor to its erased view and
//! `L_others = Σ ‖uᵢ − uᵢᵖ‖²` to its similarity-positive partner.
//! Gradients are taken with respect to the relaxed codes only; database codes
//! are constants here.

use serde::{Deserialize, Serialize};

use crate::dataset::SimilarityMatrix;
use crate::error::{Error, Result};
use crate::hash::BitCodeMatrix;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_sq: f64,
    pub l_self: f64,
    pub l_others: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossTerms {
    pub fn zero(alpha: f64, beta: f64) -> Self {
        Self {
            l_sq: 0.0,
            l_self: 0.0,
            l_others: 0.0,
            total: 0.0,
            alpha,
            beta,
        }
    }

    /// Sums term by term, recomputing the total.
    pub fn accumulate(&mut self, other: &LossTerms) {
        self.l_sq += other.l_sq;
        self.l_self += other.l_self;
        self.l_others += other.l_others;
        self.total = self.l_sq + self.alpha * self.l_self + self.beta * self.l_others;
    }
}

/// Gradients of the combined loss with respect to each batch of codes.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeGrads {
    pub anchor: Tensor,
    pub erased: Tensor,
    pub positive: Tensor,
}

fn expect_codes(u: &Tensor, what: &str) -> Result<(usize, usize)> {
    if u.rank() != 2 {
        return Err(Error::dim(format!("{what} must be r×k, got {:?}", u.shape())));
    }
    Ok((u.shape()[0], u.shape()[1]))
}

/// Database codes as a dense row-major `n×k` matrix of ±1.
pub fn dense_codes(v: &BitCodeMatrix) -> Vec<f64> {
    v.to_signs().into_iter().map(f64::from).collect()
}

/// One row of `L_sq`: value and gradient with respect to `uᵢ`.
pub(crate) fn sq_row(u: &[f64], v_dense: &[f64], s_row: &[i8], grad: &mut [f64]) -> f64 {
    let k = u.len();
    let kf = k as f64;
    let mut loss = 0.0;
    for (vj, &s) in v_dense.chunks_exact(k).zip(s_row) {
        let dot: f64 = u.iter().zip(vj).map(|(a, b)| a * b).sum();
        let resid = dot - kf * f64::from(s);
        loss += resid * resid;
        for (g, b) in grad.iter_mut().zip(vj) {
            *g += 2.0 * resid * b;
        }
    }
    loss
}

/// `Σᵢ Σⱼ (uᵢᵀvⱼ − k·sᵢⱼ)²` and its gradient with respect to `U`.
pub fn loss_sq(u: &Tensor, v: &BitCodeMatrix, s: &SimilarityMatrix) -> Result<(f64, Tensor)> {
    let (r, k) = expect_codes(u, "U")?;
    if v.code_length() != k {
        return Err(Error::dim(format!("U has {k} bits, V has {}", v.code_length())));
    }
    if s.n_rows() != r || s.n_cols() != v.n_codes() {
        return Err(Error::dim(format!(
            "S is {}×{}, expected {r}×{}",
            s.n_rows(),
            s.n_cols(),
            v.n_codes()
        )));
    }
    let vd = dense_codes(v);
    let mut grad = Tensor::zeros(&[r, k]);
    let mut loss = 0.0;
    for i in 0..r {
        loss += sq_row(
            &u.data()[i * k..(i + 1) * k],
            &vd,
            s.row(i),
            &mut grad.data_mut()[i * k..(i + 1) * k],
        );
    }
    Ok((loss, grad))
}

fn pair_distance(a: &Tensor, b: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "code batches differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut loss = 0.0;
    let mut ga = Vec::with_capacity(a.len());
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = x - y;
        loss += d * d;
        ga.push(2.0 * d);
    }
    let gb = ga.iter().map(|g| -g).collect();
    Ok((
        loss,
        Tensor::new(a.shape().to_vec(), ga)?,
        Tensor::new(a.shape().to_vec(), gb)?,
    ))
}

/// `Σ ‖uᵢ − ũᵢ‖²` with gradients for `U` and `Ũ`.
pub fn loss_self(u: &Tensor, erased: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    pair_distance(u, erased)
}

/// `Σ ‖uᵢ − uᵢᵖ‖²` with gradients for `U` and `Uᴾ`.
pub fn loss_others(u: &Tensor, positive: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    pair_distance(u, positive)
}

fn check_weights(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::config("alpha", "must be finite and non-negative"));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::config("beta", "must be finite and non-negative"));
    }
    Ok(())
}

/// `α·L_self + β·L_others`.
pub fn esrl(u: &Tensor, erased: &Tensor, positive: &Tensor, alpha: f64, beta: f64) -> Result<f64> {
    check_weights(alpha, beta)?;
    let (ls, _, _) = loss_self(u, erased)?;
    let (lo, _, _) = loss_others(u, positive)?;
    Ok(alpha * ls + beta * lo)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveWeights {
    pub alpha: f64,
    pub beta: f64,
    /// Divide each term by its number of summands (`r·n` for `L_sq`, `r·k`
    /// for the pair terms).
    pub normalized: bool,
}

/// Combined loss and gradients with respect to all three code batches.
pub fn loss_total(
    u: &Tensor,
    erased: &Tensor,
    positive: &Tensor,
    v: &BitCodeMatrix,
    s: &SimilarityMatrix,
    weights: ObjectiveWeights,
) -> Result<(LossTerms, CodeGrads)> {
    let ObjectiveWeights { alpha, beta, normalized } = weights;
    check_weights(alpha, beta)?;
    let (r, k) = expect_codes(u, "U")?;
    let (l_sq, mut g_sq) = loss_sq(u, v, s)?;
    let (l_self, g_u_self, mut g_erased) = loss_self(u, erased)?;
    let (l_others, g_u_others, mut g_positive) = loss_others(u, positive)?;

    let (sq_scale, pair_scale) = if normalized {
        let pairs = (r * k).max(1) as f64;
        (1.0 / (r * v.n_codes()).max(1) as f64, 1.0 / pairs)
    } else {
        (1.0, 1.0)
    };
    let l_sq = l_sq * sq_scale;
    let l_self = l_self * pair_scale;
    let l_others = l_others * pair_scale;

    let ga = alpha * pair_scale;
    let gb = beta * pair_scale;
    for ((g, gs), go) in g_sq.data_mut().iter_mut().zip(g_u_self.data()).zip(g_u_others.data()) {
        *g = *g * sq_scale + ga * gs + gb * go;
    }
    g_erased.data_mut().iter_mut().for_each(|g| *g *= ga);
    g_positive.data_mut().iter_mut().for_each(|g| *g *= gb);

    let terms = LossTerms {
        l_sq,
        l_self,
        l_others,
        total: l_sq + alpha * l_self + beta * l_others,
        alpha,
        beta,
    };
    Ok((
        terms,
        CodeGrads {
            anchor: g_sq,
            erased: g_erased,
            positive: g_positive,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::similarity_matrix;

    fn codes(r: usize, k: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![r, k], data.to_vec()).unwrap()
    }

    #[test]
    fn loss_sq_hand_cases() {
        let u = codes(1, 2, &[1.0, 1.0]);
        let v = BitCodeMatrix::from_signs(1, 2, &[1, 1]).unwrap();
        let same = SimilarityMatrix::from_entries(vec![0], 1, vec![1]).unwrap();
        assert_eq!(loss_sq(&u, &v, &same).unwrap().0, 0.0);
        assert_eq!(loss_sq(&u, &v, &same.negated()).unwrap().0, 16.0);
    }

    #[test]
    fn pair_losses_hand_cases() {
        let u = codes(1, 2, &[1.0, -1.0]);
        assert_eq!(loss_self(&u, &u).unwrap().0, 0.0);
        assert_eq!(loss_self(&u, &codes(1, 2, &[-1.0, 1.0])).unwrap().0, 8.0);
        assert_eq!(loss_others(&u, &codes(1, 2, &[1.0, 1.0])).unwrap().0, 4.0);
        assert!(loss_self(&u, &codes(2, 1, &[0.0, 0.0])).is_err());
    }

    #[test]
    fn esrl_weights() {
        let u = codes(1, 2, &[0.5, -0.2]);
        let e = codes(1, 2, &[0.1, 0.3]);
        let p = codes(1, 2, &[-0.4, 0.9]);
        assert_eq!(esrl(&u, &e, &p, 0.0, 0.0).unwrap(), 0.0);
        assert_eq!(esrl(&u, &e, &p, 1.0, 0.0).unwrap(), loss_self(&u, &e).unwrap().0);
        assert!(esrl(&u, &e, &p, -1.0, 0.0).is_err());
    }

    #[test]
    fn saturated_consistent_codes_reach_zero() {
        let u = codes(2, 3, &[1.0, -1.0, 1.0, -1.0, 1.0, 1.0]);
        let v = BitCodeMatrix::from_signs(2, 3, &[1, -1, 1, -1, 1, 1]).unwrap();
        // perfectly consistent needs u·v = ±k for every pair: use one class
        let s = similarity_matrix(&[0, 1], &[0, 1]).unwrap();
        let (terms, _) = loss_total(&u, &u, &u, &v, &s, ObjectiveWeights { alpha: 1.0, beta: 1.0, normalized: false }).unwrap();
        // cross terms are (−1 − (−3))² = 4 each
        assert_eq!(terms.l_self + terms.l_others, 0.0);
        assert_eq!(terms.l_sq, 8.0);

        let u1 = codes(1, 3, &[1.0, -1.0, 1.0]);
        let v1 = BitCodeMatrix::from_signs(2, 3, &[1, -1, 1, -1, 1, -1]).unwrap();
        let s1 = similarity_matrix(&[0], &[0, 1]).unwrap();
        let (terms, _) = loss_total(&u1, &u1, &u1, &v1, &s1, ObjectiveWeights { alpha: 1.0, beta: 1.0, normalized: false }).unwrap();
        assert_eq!(terms.total, 0.0);
    }

    #[test]
    fn zero_weights_recover_sq() {
        let u = codes(1, 2, &[0.3, -0.7]);
        let e = codes(1, 2, &[0.0, 0.1]);
        let v = BitCodeMatrix::from_signs(2, 2, &[1, 1, -1, 1]).unwrap();
        let s = similarity_matrix(&[0], &[3, 4]).unwrap();
        let (terms, g) = loss_total(&u, &e, &e, &v, &s, ObjectiveWeights { alpha: 0.0, beta: 0.0, normalized: false }).unwrap();
        assert_eq!(terms.total, loss_sq(&u, &v, &s).unwrap().0);
        assert!(g.erased.data().iter().all(|&x| x == 0.0));
    }
}
