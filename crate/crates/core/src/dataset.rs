//! Deterministic synthetic fine-grained dataset.
//!
//! Every class is identified by a small coloured motif. Backgrounds come from
//! a pool shared by all classes, and the motif lands at a random offset, so
//! two images of one class usually differ more than two classes' motifs do.
//! The query split is held out; the train split is the retrieval database.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FGHD";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    /// Fraction of each class held out as queries (largest-remainder rounding).
    pub query_fraction: f64,
    pub motif_size: usize,
    pub backgrounds: usize,
    pub noise: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 64,
            height: 32,
            width: 32,
            query_fraction: 0.2,
            motif_size: 8,
            backgrounds: 12,
            noise: 0.05,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("classes", "need at least 2 classes"));
        }
        if self.per_class < 4 {
            return Err(Error::config("per_class", "need at least 4 images per class"));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::config("height", "images must be at least 16x16"));
        }
        if !(self.query_fraction > 0.0 && self.query_fraction < 1.0) {
            return Err(Error::config("query_fraction", "must lie strictly inside (0, 1)"));
        }
        if self.motif_size < 2 || self.motif_size > self.height.min(self.width) / 2 {
            return Err(Error::config("motif_size", "must be in [2, min(h, w)/2]"));
        }
        if self.backgrounds == 0 {
            return Err(Error::config("backgrounds", "need a nonempty background pool"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise", "must be finite and non-negative"));
        }
        let counts = self.query_counts();
        if counts.iter().any(|&q| q == 0 || q >= self.per_class) {
            return Err(Error::config(
                "query_fraction",
                "every class needs at least one query and one database image",
            ));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.classes * self.per_class
    }

    /// Per-class query counts summing to `round(total · fraction)`.
    pub fn query_counts(&self) -> Vec<usize> {
        let target = (self.total() as f64 * self.query_fraction).round() as usize;
        let exact = self.per_class as f64 * self.query_fraction;
        let base = exact.floor() as usize;
        let mut counts = vec![base; self.classes];
        let mut extra = target.saturating_sub(base * self.classes);
        for c in counts.iter_mut() {
            if extra == 0 {
                break;
            }
            *c += 1;
            extra -= 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Query,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub seed: u64,
    /// `N×3×h×w`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: Vec<Split>,
}

struct ClassMotif {
    pattern: Vec<bool>,
    primary: [f64; 3],
    secondary: [f64; 3],
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h6 as usize {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Class hues are evenly spaced from a random offset; the secondary colour
/// is a dark complement so the pattern itself is visible.
fn draw_motifs(rng: &mut ChaCha8Rng, cfg: &GenConfig) -> Vec<ClassMotif> {
    let m = cfg.motif_size;
    let offset: f64 = rng.random();
    (0..cfg.classes)
        .map(|c| {
            let hue = offset + c as f64 / cfg.classes as f64;
            ClassMotif {
                pattern: (0..m * m).map(|_| rng.random_bool(0.5)).collect(),
                primary: hsv(hue, 0.9, 0.95),
                secondary: hsv(hue + 0.5, 0.7, 0.3),
            }
        })
        .collect()
}

/// Low-saturation backdrop: grey base with a faint tint, a gradient and
/// three soft blobs.
fn draw_background(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let grey = rng.random_range(0.3..0.7);
    let base: [f64; 3] = std::array::from_fn(|_| grey + rng.random_range(-0.08..0.08));
    let slope: [(f64, f64); 3] =
        std::array::from_fn(|_| (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15)));
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            let shade = rng.random_range(-0.15..0.15);
            (
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
                rng.random_range(3.0..(h.min(w) as f64 / 2.5)),
                std::array::from_fn(|_| shade + rng.random_range(-0.04..0.04)),
            )
        })
        .collect();
    let mut out = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let (fy, fx) = (y as f64 / h as f64 - 0.5, x as f64 / w as f64 - 0.5);
                let mut v = base[c] + slope[c].0 * fy + slope[c].1 * fx;
                for (by, bx, r, col) in &blobs {
                    let d2 = (y as f64 - by).powi(2) + (x as f64 - bx).powi(2);
                    v += col[c] * (-d2 / (2.0 * r * r)).exp();
                }
                out[(c * h + y) * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn stamp(canvas: &mut [f64], h: usize, w: usize, motif: &ClassMotif, m: usize, ty: usize, tx: usize) {
    for y in 0..m {
        for x in 0..m {
            let col = if motif.pattern[y * m + x] {
                motif.primary
            } else {
                motif.secondary
            };
            for (c, v) in col.iter().enumerate() {
                canvas[(c * h + ty + y) * w + tx + x] = *v;
            }
        }
    }
}

/// Builds the dataset; a pure function of `(config, seed)`.
pub fn generate(config: &GenConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let (h, w, m) = (config.height, config.width, config.motif_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let motifs = draw_motifs(&mut rng, config);
    let pool: Vec<Vec<f64>> = (0..config.backgrounds)
        .map(|_| draw_background(&mut rng, h, w))
        .collect();
    let noise = Normal::new(0.0, config.noise).map_err(|e| Error::config("noise", e.to_string()))?;

    let n = config.total();
    let plane = 3 * h * w;
    let mut data = Vec::with_capacity(n * plane);
    let mut labels = Vec::with_capacity(n);
    for (class, motif) in motifs.iter().enumerate() {
        for _ in 0..config.per_class {
            let mut img = pool[rng.random_range(0..pool.len())].clone();
            let gain = rng.random_range(0.85..1.15);
            img.iter_mut().for_each(|v| *v *= gain);
            let ty = rng.random_range(0..=h - m);
            let tx = rng.random_range(0..=w - m);
            stamp(&mut img, h, w, motif, m, ty, tx);
            for v in img.iter_mut() {
                *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
            data.extend_from_slice(&img);
            labels.push(class);
        }
    }

    let mut split = vec![Split::Train; n];
    for (class, q) in config.query_counts().into_iter().enumerate() {
        let start = class * config.per_class;
        for i in index::sample(&mut rng, config.per_class, q) {
            split[start + i] = Split::Query;
        }
    }

    Ok(Dataset {
        config: config.clone(),
        seed,
        images: Tensor::new(vec![n, 3, h, w], data)?,
        labels,
        split,
    })
}

/// Each class's motif alone, centred on a black canvas. Used to measure the
/// inter-class pixel distance the generator builds in.
pub fn motif_images(config: &GenConfig, seed: u64) -> Result<Vec<Tensor>> {
    config.validate()?;
    let (h, w, m) = (config.height, config.width, config.motif_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let motifs = draw_motifs(&mut rng, config);
    motifs
        .iter()
        .map(|motif| {
            let mut canvas = vec![0.0; 3 * h * w];
            stamp(&mut canvas, h, w, motif, m, (h - m) / 2, (w - m) / 2);
            Tensor::new(vec![3, h, w], canvas)
        })
        .collect()
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.config.classes
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [3, self.config.height, self.config.width]
    }

    /// Copy of image `id` as a `3×h×w` tensor.
    pub fn image(&self, id: usize) -> Tensor {
        let plane = 3 * self.config.height * self.config.width;
        let data = self.images.data()[id * plane..(id + 1) * plane].to_vec();
        Tensor::new(self.image_shape().to_vec(), data).unwrap()
    }

    /// Dataset ids of the train split, in order; position `j` is database id `j`.
    pub fn train_ids(&self) -> Vec<usize> {
        self.ids_of(Split::Train)
    }

    pub fn query_ids(&self) -> Vec<usize> {
        self.ids_of(Split::Query)
    }

    fn ids_of(&self, s: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == s).collect()
    }

    pub fn database_labels(&self) -> Vec<usize> {
        self.train_ids().into_iter().map(|i| self.labels[i]).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        #[derive(Serialize)]
        struct Header<'a> {
            config: &'a GenConfig,
            seed: u64,
            class_count: usize,
        }
        let header = serde_json::to_vec(&Header {
            config: &self.config,
            seed: self.seed,
            class_count: self.class_count(),
        })?;
        let mut w = Writer::new(MAGIC);
        w.u32(VERSION).block(&header)?;
        w.len_u32(self.len())?;
        for &l in &self.labels {
            w.len_u32(l)?;
        }
        let split: Vec<u8> = self
            .split
            .iter()
            .map(|s| match s {
                Split::Train => 0,
                Split::Query => 1,
            })
            .collect();
        w.bytes(&split).tensor(&self.images)?;
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            config: GenConfig,
            seed: u64,
            class_count: usize,
        }
        let mut r = Reader::new(bytes, MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Malformed(format!("unsupported dataset version {version}")));
        }
        let header: Header = serde_json::from_slice(r.block()?)
            .map_err(|e| Error::Malformed(format!("dataset header: {e}")))?;
        let n = r.u32()? as usize;
        let mut labels = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            labels.push(r.u32()? as usize);
        }
        let split = r
            .take(n)?
            .iter()
            .map(|b| match b {
                0 => Ok(Split::Train),
                1 => Ok(Split::Query),
                other => Err(Error::Malformed(format!("bad split flag {other}"))),
            })
            .collect::<Result<Vec<_>>>();
        let images = r.tensor()?;
        r.finish()?;
        let split = split?;
        let cfg = header.config;
        if images.shape() != [n, 3, cfg.height, cfg.width] {
            return Err(Error::Malformed(format!(
                "image tensor shape {:?} disagrees with header",
                images.shape()
            )));
        }
        if header.class_count != cfg.classes || labels.iter().any(|&l| l >= cfg.classes) {
            return Err(Error::Malformed("labels out of range".into()));
        }
        Ok(Dataset {
            config: cfg,
            seed: header.seed,
            images,
            labels,
            split,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// `S ∈ {−1,+1}^{r×n}`: rows are sampled database ids, columns all database ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimilarityMatrix {
    rows: Vec<usize>,
    cols: usize,
    entries: Vec<i8>,
}

impl SimilarityMatrix {
    pub fn row_ids(&self) -> &[usize] {
        &self.rows
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> i8 {
        self.entries[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[i8] {
        &self.entries[i * self.cols..(i + 1) * self.cols]
    }

    /// Builds a matrix directly from entries (values must be ±1).
    pub fn from_entries(rows: Vec<usize>, cols: usize, entries: Vec<i8>) -> Result<Self> {
        if entries.len() != rows.len() * cols {
            return Err(Error::dim("similarity entries do not match r×n"));
        }
        if entries.iter().any(|&e| e != 1 && e != -1) {
            return Err(Error::Supervision("similarity entries must be ±1".into()));
        }
        Ok(Self { rows, cols, entries })
    }

    /// Sub-matrix made of the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let mut entries = Vec::with_capacity(rows.len() * self.cols);
        let mut ids = Vec::with_capacity(rows.len());
        for &i in rows {
            if i >= self.rows.len() {
                return Err(Error::dim(format!("row {i} out of range")));
            }
            entries.extend_from_slice(self.row(i));
            ids.push(self.rows[i]);
        }
        Ok(Self {
            rows: ids,
            cols: self.cols,
            entries,
        })
    }

    /// Sign-flipped copy.
    pub fn negated(&self) -> Self {
        Self {
            rows: self.rows.clone(),
            cols: self.cols,
            entries: self.entries.iter().map(|e| -e).collect(),
        }
    }

    /// A database id `p` with `s_ip = +1`, drawn uniformly, excluding the
    /// row's own id unless it is the only candidate.
    pub fn pick_positive<R: Rng + ?Sized>(&self, row: usize, rng: &mut R) -> Result<usize> {
        let own = self.rows[row];
        let positives: Vec<usize> = self
            .row(row)
            .iter()
            .enumerate()
            .filter(|&(_, &s)| s == 1)
            .map(|(j, _)| j)
            .collect();
        if positives.is_empty() {
            return Err(Error::Supervision(format!("row {row} has no positive entry")));
        }
        let others: Vec<usize> = positives.iter().copied().filter(|&j| j != own).collect();
        if others.is_empty() {
            return Ok(own);
        }
        Ok(others[rng.random_range(0..others.len())])
    }
}

pub fn similarity_matrix(sample_ids: &[usize], db_labels: &[usize]) -> Result<SimilarityMatrix> {
    let n = db_labels.len();
    if let Some(&bad) = sample_ids.iter().find(|&&i| i >= n) {
        return Err(Error::dim(format!("sample id {bad} outside database of {n}")));
    }
    let mut entries = Vec::with_capacity(sample_ids.len() * n);
    for &i in sample_ids {
        let li = db_labels[i];
        entries.extend(db_labels.iter().map(|&lj| if lj == li { 1 } else { -1 }));
    }
    Ok(SimilarityMatrix {
        rows: sample_ids.to_vec(),
        cols: n,
        entries,
    })
}

/// Samples `r` database ids uniformly without replacement.
pub fn sample_round<R: Rng + ?Sized>(
    db_labels: &[usize],
    r: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, SimilarityMatrix)> {
    if r > db_labels.len() {
        return Err(Error::config(
            "r",
            format!("cannot sample {r} of {} training images", db_labels.len()),
        ));
    }
    let ids = index::sample(rng, db_labels.len(), r).into_vec();
    let s = similarity_matrix(&ids, db_labels)?;
    Ok((ids, s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            classes: 3,
            per_class: 6,
            height: 16,
            width: 16,
            motif_size: 4,
            backgrounds: 3,
            ..GenConfig::default()
        }
    }

    #[test]
    fn default_split_is_stratified() {
        let ds = generate(&GenConfig::default(), 1).unwrap();
        assert_eq!(ds.len(), 640);
        assert_eq!(ds.train_ids().len(), 512);
        assert_eq!(ds.query_ids().len(), 128);
        for c in 0..10 {
            let q = ds.query_ids().iter().filter(|&&i| ds.labels[i] == c).count();
            assert!(q == 12 || q == 13, "class {c} has {q} queries");
        }
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let a = generate(&small(), 9).unwrap();
        let b = generate(&small(), 9).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let c = generate(&small(), 10).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            GenConfig { classes: 1, ..small() },
            GenConfig { per_class: 3, ..small() },
            GenConfig { height: 8, ..small() },
        ] {
            assert!(matches!(generate(&cfg, 0), Err(Error::Config { .. })));
        }
    }

    #[test]
    fn similarity_cases() {
        let s = similarity_matrix(&[0], &[2, 2, 2]).unwrap();
        assert_eq!(s.row(0), &[1, 1, 1]);
        let s = similarity_matrix(&[0, 1], &[0, 1]).unwrap();
        assert_eq!(s.row(0), &[1, -1]);
        assert_eq!(s.row(1), &[-1, 1]);
    }

    #[test]
    fn row_sums_follow_class_sizes() {
        let labels = [0, 1, 1, 2, 2, 2, 0, 1];
        let ids: Vec<usize> = (0..labels.len()).collect();
        let s = similarity_matrix(&ids, &labels).unwrap();
        for (i, &l) in labels.iter().enumerate() {
            let size = labels.iter().filter(|&&x| x == l).count() as i64;
            let sum: i64 = s.row(i).iter().map(|&e| e as i64).sum();
            assert_eq!(sum, size - (labels.len() as i64 - size));
        }
    }

    #[test]
    fn full_round_covers_everything() {
        let labels = vec![0, 1, 0, 1, 2];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut ids, _) = sample_round(&labels, 5, &mut rng).unwrap();
        ids.sort();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
        assert!(sample_round(&labels, 6, &mut rng).is_err());
    }

    #[test]
    fn positive_picking_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = similarity_matrix(&[1], &[0, 1, 0]).unwrap();
        assert_eq!(s.pick_positive(0, &mut rng).unwrap(), 1);
        let s = similarity_matrix(&[0], &[5, 5, 3]).unwrap();
        for _ in 0..20 {
            assert_eq!(s.pick_positive(0, &mut rng).unwrap(), 1);
        }
        let no_pos = SimilarityMatrix::from_entries(vec![0], 2, vec![-1, -1]).unwrap();
        assert!(matches!(no_pos.pick_positive(0, &mut rng), Err(Error::Supervision(_))));
    }

    #[test]
    fn truncated_and_corrupted_files() {
        let ds = generate(&small(), 2).unwrap();
        let bytes = ds.to_bytes().unwrap();
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), ds);
        let cut = &bytes[..bytes.len() - 10];
        assert!(matches!(Dataset::from_bytes(cut), Err(Error::Malformed(_))));
        let mut bad = bytes.clone();
        let k = bad.len() - 100;
        bad[k] ^= 0x40;
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Checksum { .. })));
    }
}
