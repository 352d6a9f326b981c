//! Closed-form bit-column updates of the database codes `V` with the network
//! fixed.
//!
//! With `U` fixed, `L(V) = ‖UVᵀ‖²_F − 2k·⟨Q, V⟩ + const` where `Q = SᵀU`.
//! Because `v_jm² = 1`, the part of `L` that depends on column `m` is
//! `2·Σⱼ v_jm·t_j` with `t = V̂ₘÛₘᵀU₊ₘ − k·Q₊ₘ`, so each bit of the column is
//! minimised independently by `v_jm = −sign(t_j)`.

use serde::{Deserialize, Serialize};

use crate::dataset::SimilarityMatrix;
use crate::error::{Error, Result};
use crate::hash::BitCodeMatrix;
use crate::objective::loss_sq;
use crate::tensor::Tensor;

/// Coefficient applied to `Q` in the column update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QFactor {
    /// `k`, the exact minimiser of the column subproblem.
    #[default]
    Exact,
    /// `2k`, kept for comparison with the published form; not guaranteed to
    /// decrease `L(V)`.
    Doubled,
}

/// `Q = SᵀU`, shape `n×k`.
pub fn compute_q(s: &SimilarityMatrix, u: &Tensor) -> Result<Tensor> {
    if u.rank() != 2 || u.shape()[0] != s.n_rows() {
        return Err(Error::dim(format!(
            "U {:?} does not match S with {} rows",
            u.shape(),
            s.n_rows()
        )));
    }
    let (r, k, n) = (s.n_rows(), u.shape()[1], s.n_cols());
    let mut q = vec![0.0; n * k];
    for i in 0..r {
        let ui = &u.data()[i * k..(i + 1) * k];
        for (j, &sij) in s.row(i).iter().enumerate() {
            let sij = f64::from(sij);
            for (qv, uv) in q[j * k..(j + 1) * k].iter_mut().zip(ui) {
                *qv += sij * uv;
            }
        }
    }
    Tensor::new(vec![n, k], q)
}

/// `L(V) = Σᵢ Σⱼ (uᵢᵀvⱼ − k·sᵢⱼ)²`, evaluated directly.
pub fn loss_v(v: &BitCodeMatrix, u: &Tensor, s: &SimilarityMatrix) -> Result<f64> {
    Ok(loss_sq(u, v, s)?.0)
}

fn gram(u: &Tensor) -> Vec<f64> {
    let (r, k) = (u.shape()[0], u.shape()[1]);
    let mut g = vec![0.0; k * k];
    for i in 0..r {
        let row = &u.data()[i * k..(i + 1) * k];
        for a in 0..k {
            for b in 0..k {
                g[a * k + b] += row[a] * row[b];
            }
        }
    }
    g
}

fn check_column_inputs(v: &BitCodeMatrix, u: &Tensor, q: &Tensor, m: usize) -> Result<usize> {
    let k = v.code_length();
    if m >= k {
        return Err(Error::dim(format!("column {m} out of range for {k} bits")));
    }
    if u.rank() != 2 || u.shape()[1] != k {
        return Err(Error::dim(format!("U {:?} does not have {k} bits", u.shape())));
    }
    if q.shape() != [v.n_codes(), k] {
        return Err(Error::dim(format!("Q {:?} should be {}×{k}", q.shape(), v.n_codes())));
    }
    Ok(k)
}

fn column_scores(v: &BitCodeMatrix, g: &[f64], q: &Tensor, m: usize, factor: QFactor) -> Vec<f64> {
    let k = v.code_length();
    let coef = match factor {
        QFactor::Exact => k as f64,
        QFactor::Doubled => 2.0 * k as f64,
    };
    (0..v.n_codes())
        .map(|j| {
            let mut t = -coef * q.data()[j * k + m];
            for mm in (0..k).filter(|&mm| mm != m) {
                t += f64::from(v.get(j, mm)) * g[mm * k + m];
            }
            t
        })
        .collect()
}

fn assign_column(v: &mut BitCodeMatrix, m: usize, bits: impl Iterator<Item = (usize, i8)>) -> usize {
    let mut changed = 0;
    for (j, bit) in bits {
        if v.get(j, m) != bit {
            v.set(j, m, bit);
            changed += 1;
        }
    }
    changed
}

fn update_column_with_gram(
    v: &mut BitCodeMatrix,
    g: &[f64],
    q: &Tensor,
    m: usize,
    factor: QFactor,
    balanced: bool,
) -> usize {
    let t = column_scores(v, g, q, m, factor);
    if balanced {
        // the ⌈n/2⌉ smallest scores take +1; ties keep the lower row index
        let mut order: Vec<usize> = (0..t.len()).collect();
        order.sort_by(|&a, &b| t[a].total_cmp(&t[b]));
        let plus = t.len().div_ceil(2);
        let bits = order.into_iter().enumerate().map(|(rank, j)| (j, if rank < plus { 1 } else { -1 }));
        assign_column(v, m, bits)
    } else {
        // −sign(t) with ties resolved towards +1
        let bits = t.iter().enumerate().map(|(j, &tj)| (j, if tj <= 0.0 { 1 } else { -1 }));
        assign_column(v, m, bits)
    }
}

/// Replaces column `m` of `V` by its closed-form minimiser, all other
/// columns fixed. Returns how many bits flipped.
pub fn update_v_column(v: &mut BitCodeMatrix, u: &Tensor, q: &Tensor, m: usize, factor: QFactor) -> Result<usize> {
    check_column_inputs(v, u, q, m)?;
    Ok(update_column_with_gram(v, &gram(u), q, m, factor, false))
}

/// Like [`update_v_column`] but constrained to exactly `⌈n/2⌉` entries of
/// `+1` in the column.
pub fn update_v_column_balanced(v: &mut BitCodeMatrix, u: &Tensor, q: &Tensor, m: usize) -> Result<usize> {
    check_column_inputs(v, u, q, m)?;
    Ok(update_column_with_gram(v, &gram(u), q, m, QFactor::Exact, true))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    /// Bits flipped in each pass.
    pub flips: Vec<usize>,
    /// `L(V)` before the first pass and after each pass.
    pub losses: Vec<f64>,
}

/// Sweeps columns `0..k` in order, `passes` times.
pub fn update_v(
    v: &mut BitCodeMatrix,
    u: &Tensor,
    s: &SimilarityMatrix,
    passes: usize,
    factor: QFactor,
) -> Result<SweepReport> {
    sweep(v, u, s, passes, factor, false)
}

/// Column sweeps under the bit-balance constraint. `L(V)` is non-increasing
/// once every column holds `⌈n/2⌉` entries of `+1`.
pub fn update_v_balanced(v: &mut BitCodeMatrix, u: &Tensor, s: &SimilarityMatrix, passes: usize) -> Result<SweepReport> {
    sweep(v, u, s, passes, QFactor::Exact, true)
}

fn sweep(
    v: &mut BitCodeMatrix,
    u: &Tensor,
    s: &SimilarityMatrix,
    passes: usize,
    factor: QFactor,
    balanced: bool,
) -> Result<SweepReport> {
    let q = compute_q(s, u)?;
    check_column_inputs(v, u, &q, 0)?;
    if s.n_cols() != v.n_codes() {
        return Err(Error::dim("S columns do not match the database size"));
    }
    let g = gram(u);
    let mut report = SweepReport {
        flips: Vec::with_capacity(passes),
        losses: vec![loss_v(v, u, s)?],
    };
    for _ in 0..passes {
        let flips = (0..v.code_length())
            .map(|m| update_column_with_gram(v, &g, &q, m, factor, balanced))
            .sum();
        let loss = loss_v(v, u, s)?;
        if factor == QFactor::Exact && !balanced {
            let prev = *report.losses.last().unwrap();
            debug_assert!(
                loss <= prev + 1e-9 * prev.abs().max(1.0),
                "column sweep increased L(V): {prev} -> {loss}"
            );
        }
        report.flips.push(flips);
        report.losses.push(loss);
    }
    Ok(report)
}

/// Sweeps until a pass flips nothing (or `max_passes` is reached).
pub fn update_v_to_convergence(
    v: &mut BitCodeMatrix,
    u: &Tensor,
    s: &SimilarityMatrix,
    max_passes: usize,
) -> Result<SweepReport> {
    let mut all = SweepReport {
        flips: Vec::new(),
        losses: vec![loss_v(v, u, s)?],
    };
    for _ in 0..max_passes {
        let r = update_v(v, u, s, 1, QFactor::Exact)?;
        all.flips.push(r.flips[0]);
        all.losses.push(r.losses[1]);
        if r.flips[0] == 0 {
            break;
        }
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::similarity_matrix;

    fn t(r: usize, k: usize, d: &[f64]) -> Tensor {
        Tensor::new(vec![r, k], d.to_vec()).unwrap()
    }

    #[test]
    fn q_with_all_positive_similarity_repeats_u() {
        let s = similarity_matrix(&[0], &[1, 1, 1]).unwrap();
        let u = t(1, 2, &[0.4, -0.9]);
        let q = compute_q(&s, &u).unwrap();
        for j in 0..3 {
            assert_eq!(&q.data()[j * 2..j * 2 + 2], u.data());
        }
        let qn = compute_q(&s.negated(), &u).unwrap();
        assert!(q.data().iter().zip(qn.data()).all(|(a, b)| *a == -b));
    }

    #[test]
    fn single_bit_follows_similarity() {
        let s = similarity_matrix(&[0], &[0]).unwrap();
        let u = t(1, 1, &[1.0]);
        let mut v = BitCodeMatrix::from_signs(1, 1, &[-1]).unwrap();
        let q = compute_q(&s, &u).unwrap();
        update_v_column(&mut v, &u, &q, 0, QFactor::Exact).unwrap();
        assert_eq!(v.get(0, 0), 1);
    }

    #[test]
    fn one_bit_codes_take_sign_of_q() {
        let s = similarity_matrix(&[0, 2], &[0, 1, 0, 1]).unwrap();
        let u = t(2, 1, &[0.3, -0.8]);
        let q = compute_q(&s, &u).unwrap();
        let mut v = BitCodeMatrix::from_signs(4, 1, &[1, 1, 1, 1]).unwrap();
        update_v_column(&mut v, &u, &q, 0, QFactor::Exact).unwrap();
        for j in 0..4 {
            let expect = if q.data()[j] >= 0.0 { 1 } else { -1 };
            assert_eq!(v.get(j, 0), expect);
        }
    }

    #[test]
    fn column_index_checked() {
        let s = similarity_matrix(&[0], &[0]).unwrap();
        let u = t(1, 2, &[0.1, 0.2]);
        let q = compute_q(&s, &u).unwrap();
        let mut v = BitCodeMatrix::from_signs(1, 2, &[1, 1]).unwrap();
        assert!(update_v_column(&mut v, &u, &q, 2, QFactor::Exact).is_err());
    }

    #[test]
    fn balanced_column_splits_evenly() {
        let s = similarity_matrix(&[0, 3], &[0, 0, 1, 1, 1]).unwrap();
        let u = t(2, 2, &[0.9, -0.3, -0.5, 0.8]);
        let q = compute_q(&s, &u).unwrap();
        let mut v = BitCodeMatrix::from_signs(5, 2, &[1, 1, 1, 1, 1, 1, 1, 1, 1, 1]).unwrap();
        for m in 0..2 {
            update_v_column_balanced(&mut v, &u, &q, m).unwrap();
            let plus = (0..5).filter(|&j| v.get(j, m) == 1).count();
            assert_eq!(plus, 3);
        }
    }

    #[test]
    fn fixed_point_is_unchanged() {
        let s = similarity_matrix(&[0, 1], &[0, 1, 0]).unwrap();
        let u = t(2, 3, &[0.9, -0.2, 0.4, -0.7, 0.5, 0.1]);
        let mut v = BitCodeMatrix::from_signs(3, 3, &[1, 1, 1, -1, -1, 1, 1, -1, -1]).unwrap();
        update_v_to_convergence(&mut v, &u, &s, 50).unwrap();
        let before = v.clone();
        let r = update_v(&mut v, &u, &s, 1, QFactor::Exact).unwrap();
        assert_eq!(r.flips, vec![0]);
        assert_eq!(v, before);
    }
}
