//! Attention-guided selective region erasing.
//!
//! The channel mean of a feature map is resized to image resolution and
//! normalised into `(ε, 1+ε]`. The `n_e` hottest positions then anchor
//! `l×l` zero blocks in a binary mask, and the mask multiplies the image.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Normalised attention, values in `[ε, 1+ε]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub values: Tensor,
    pub epsilon: f64,
}

impl AttentionMask {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    /// True when the source map had no spread (every entry equals ε).
    pub fn is_constant(&self) -> bool {
        self.values.data().iter().all(|&v| v == self.epsilon)
    }
}

/// Entries exactly 0 or 1; `anchors` are the chosen `(row, col)` positions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinaryMask {
    #[serde(skip)]
    pub values: Tensor,
    pub anchors: Vec<(usize, usize)>,
}

impl BinaryMask {
    pub fn zero_count(&self) -> usize {
        self.values.data().iter().filter(|&&v| v == 0.0).count()
    }

    /// Binary PGM (P5) rendering, erased cells black.
    pub fn to_pgm(&self) -> Vec<u8> {
        let (h, w) = (self.values.shape()[0], self.values.shape()[1]);
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        out.extend(self.values.data().iter().map(|&v| if v == 0.0 { 0u8 } else { 255 }));
        out
    }
}

/// Mean over channels of `A[c×h×w]`.
pub fn channel_mean(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 3 || a.shape()[0] == 0 {
        return Err(Error::dim(format!("channel_mean needs c×h×w with c ≥ 1, got {:?}", a.shape())));
    }
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let plane = h * w;
    let mut out = vec![0.0; plane];
    for ch in a.data().chunks(plane) {
        for (o, v) in out.iter_mut().zip(ch) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= c as f64);
    Tensor::new(vec![h, w], out)
}

/// Min-max normalisation shifted by `ε`. A constant map becomes all `ε`.
pub fn normalize_mask(a: &Tensor, epsilon: f64) -> Result<AttentionMask> {
    if a.rank() != 2 || a.is_empty() {
        return Err(Error::dim("normalize_mask needs a nonempty h×w tensor"));
    }
    if !a.is_finite() {
        return Err(Error::dim("normalize_mask input must be finite"));
    }
    let (lo, hi) = a
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    let data = a
        .data()
        .iter()
        .map(|&v| {
            if span > 0.0 {
                // pin the extremes so min and max land exactly on ε and 1+ε
                let t = if v == hi { 1.0 } else { (v - lo) / span };
                t + epsilon
            } else {
                epsilon
            }
        })
        .collect();
    Ok(AttentionMask {
        values: Tensor::new(a.shape().to_vec(), data)?,
        epsilon,
    })
}

/// Zeroes an `l×l` block anchored (top-left) at each of the `n_e` largest
/// mask positions. Ties go to the earlier row-major position. Blocks that
/// run past the bottom/right edge are cropped.
pub fn select_erase(mask: &AttentionMask, n_e: usize, l: usize) -> Result<BinaryMask> {
    let (h, w) = (mask.height(), mask.width());
    if l == 0 || l > h.min(w) {
        return Err(Error::config("l", format!("eraser size {l} must be in [1, {}]", h.min(w))));
    }
    if n_e == 0 || n_e > h * w {
        return Err(Error::config("n_e", format!("eraser count {n_e} must be in [1, {}]", h * w)));
    }
    let vals = mask.values.data();
    let mut order: Vec<usize> = (0..h * w).collect();
    // stable sort keeps row-major order among equal values
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));

    let mut out = vec![1.0; h * w];
    let mut anchors = Vec::with_capacity(n_e);
    for &pos in &order[..n_e] {
        let (y, x) = (pos / w, pos % w);
        anchors.push((y, x));
        for yy in y..(y + l).min(h) {
            out[yy * w + x..yy * w + (x + l).min(w)].fill(0.0);
        }
    }
    Ok(BinaryMask {
        values: Tensor::new(vec![h, w], out)?,
        anchors,
    })
}

/// Multiplies every channel of `x[c×h×w]` by the binary mask.
pub fn apply_mask(x: &Tensor, mask: &BinaryMask) -> Result<Tensor> {
    if x.rank() != 3 || x.shape()[1..] != *mask.values.shape() {
        return Err(Error::dim(format!(
            "mask {:?} does not match image {:?}",
            mask.values.shape(),
            x.shape()
        )));
    }
    let plane = mask.values.len();
    let m = mask.values.data();
    let data = x
        .data()
        .chunks(plane)
        .flat_map(|ch| ch.iter().zip(m).map(|(v, k)| v * k))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EraseConfig {
    pub n_e: usize,
    pub l: usize,
    pub epsilon: f64,
}

/// Attention mask for image `x` given its feature map `A` (no gradient).
pub fn attention_for(x: &Tensor, a: &Tensor, epsilon: f64) -> Result<AttentionMask> {
    if x.rank() != 3 {
        return Err(Error::dim("image must be c×h×w"));
    }
    let mean = channel_mean(a)?;
    let resized = ops::bilinear_resize(&mean, x.shape()[1], x.shape()[2])?;
    normalize_mask(&resized, epsilon)
}

/// Full erasing pipeline; returns the erased image and the mask used.
///
/// A constant attention map whose blocks could cover the whole image
/// (`n_e·l² ≥ h·w`) leaves the image untouched.
pub fn make_erased(x: &Tensor, a: &Tensor, cfg: EraseConfig) -> Result<(Tensor, BinaryMask)> {
    let attention = attention_for(x, a, cfg.epsilon)?;
    let (h, w) = (attention.height(), attention.width());
    if attention.is_constant() && cfg.n_e * cfg.l * cfg.l >= h * w {
        let mask = BinaryMask {
            values: Tensor::full(&[h, w], 1.0),
            anchors: Vec::new(),
        };
        return Ok((x.clone(), mask));
    }
    let mask = select_erase(&attention, cfg.n_e, cfg.l)?;
    Ok((apply_mask(x, &mask)?, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(h: usize, w: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![h, w], data.to_vec()).unwrap()
    }

    #[test]
    fn channel_mean_cases() {
        let a = Tensor::from_fn(&[1, 2, 3], |i| i as f64);
        assert_eq!(channel_mean(&a).unwrap().data(), a.data());
        let mut data = vec![2.0; 4];
        data.extend([4.0; 4]);
        let a = Tensor::new(vec![2, 2, 2], data).unwrap();
        assert_eq!(channel_mean(&a).unwrap().data(), &[3.0; 4]);
    }

    #[test]
    fn normalize_hand_case() {
        let eps = 1e-6;
        let m = normalize_mask(&t2(2, 2, &[0.0, 2.0, 4.0, 8.0]), eps).unwrap();
        assert_eq!(m.values.data(), &[eps, 0.25 + eps, 0.5 + eps, 1.0 + eps]);
        let c = normalize_mask(&Tensor::full(&[3, 3], 7.0), eps).unwrap();
        assert!(c.values.data().iter().all(|&v| v == eps));
        assert!(c.is_constant());
    }

    #[test]
    fn erase_everything_with_unit_blocks() {
        let m = normalize_mask(&Tensor::from_fn(&[3, 4], |i| (i * 7 % 5) as f64), 1e-6).unwrap();
        let b = select_erase(&m, 12, 1).unwrap();
        assert_eq!(b.zero_count(), 12);
    }

    #[test]
    fn single_block_at_unique_max() {
        let mut data = vec![0.1; 16];
        data[0] = 5.0;
        let m = normalize_mask(&t2(4, 4, &data), 1e-6).unwrap();
        let b = select_erase(&m, 1, 2).unwrap();
        let zeros: Vec<usize> = (0..16).filter(|&i| b.values.data()[i] == 0.0).collect();
        assert_eq!(zeros, vec![0, 1, 4, 5]);
        assert_eq!(b.anchors, vec![(0, 0)]);
    }

    #[test]
    fn blocks_are_cropped_at_edges() {
        let mut data = vec![0.0; 9];
        data[8] = 1.0;
        let m = normalize_mask(&t2(3, 3, &data), 1e-6).unwrap();
        let b = select_erase(&m, 1, 2).unwrap();
        assert_eq!(b.zero_count(), 1);
        assert_eq!(b.values.data()[8], 0.0);
    }

    #[test]
    fn invalid_eraser_params() {
        let m = normalize_mask(&Tensor::from_fn(&[4, 4], |i| i as f64), 1e-6).unwrap();
        assert!(select_erase(&m, 0, 1).is_err());
        assert!(select_erase(&m, 17, 1).is_err());
        assert!(select_erase(&m, 1, 0).is_err());
        assert!(select_erase(&m, 1, 5).is_err());
    }

    #[test]
    fn apply_mask_identity_and_zero() {
        let x = Tensor::from_fn(&[3, 2, 2], |i| i as f64 + 1.0);
        let ones = BinaryMask { values: Tensor::full(&[2, 2], 1.0), anchors: vec![] };
        assert_eq!(apply_mask(&x, &ones).unwrap(), x);
        let zeros = BinaryMask { values: Tensor::zeros(&[2, 2]), anchors: vec![] };
        assert!(apply_mask(&x, &zeros).unwrap().data().iter().all(|&v| v == 0.0));
        let wrong = BinaryMask { values: Tensor::zeros(&[3, 2]), anchors: vec![] };
        assert!(apply_mask(&x, &wrong).is_err());
    }

    #[test]
    fn minimal_erase_removes_one_pixel_stack() {
        let x = Tensor::full(&[3, 8, 8], 1.0);
        let a = Tensor::from_fn(&[2, 2, 2], |i| i as f64);
        let cfg = EraseConfig { n_e: 1, l: 1, epsilon: 1e-6 };
        let (erased, mask) = make_erased(&x, &a, cfg).unwrap();
        assert_eq!(mask.zero_count(), 1);
        assert_eq!(erased.data().iter().filter(|&&v| v == 0.0).count(), 3);
        let (again, _) = make_erased(&x, &a, cfg).unwrap();
        assert_eq!(erased, again);
    }

    #[test]
    fn constant_attention_policy() {
        let x = Tensor::full(&[3, 4, 4], 1.0);
        let a = Tensor::full(&[2, 2, 2], 3.0);
        // blocks could blank the image: skip erasing
        let cfg = EraseConfig { n_e: 4, l: 2, epsilon: 1e-6 };
        let (erased, mask) = make_erased(&x, &a, cfg).unwrap();
        assert_eq!(erased, x);
        assert!(mask.anchors.is_empty());
        // otherwise anchors are the first row-major positions
        let cfg = EraseConfig { n_e: 2, l: 1, epsilon: 1e-6 };
        let (_, mask) = make_erased(&x, &a, cfg).unwrap();
        assert_eq!(mask.anchors, vec![(0, 0), (0, 1)]);
    }

    #[test]
    fn pgm_header() {
        let b = BinaryMask { values: Tensor::full(&[2, 3], 1.0), anchors: vec![] };
        let pgm = b.to_pgm();
        assert!(pgm.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(pgm.len(), 11 + 6);
    }
}
