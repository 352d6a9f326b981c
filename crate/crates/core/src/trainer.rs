//! Alternating optimisation: gradient epochs over the network with the
//! database codes fixed, then closed-form column sweeps of the database codes
//! with the network fixed.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::ArchDescriptor;
use crate::dataset::{sample_round, Dataset, SimilarityMatrix};
use crate::discrete::{update_v, update_v_balanced, QFactor, SweepReport};
use crate::error::{Error, Result};
use crate::hash::{check_code_length, BitCodeMatrix};
use crate::model::Model;
use crate::objective::{loss_total, LossTerms, ObjectiveWeights};
use crate::optim::SgdState;
use crate::srem::{self, EraseConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub k: usize,
    pub r: usize,
    pub iterations: usize,
    pub epochs_per_iteration: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Iterations at whose start the learning rate is divided by 10.
    pub lr_milestones: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub beta: f64,
    pub n_e: usize,
    pub l: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub v_passes: usize,
    /// Build erased views; when off the erased view is the anchor itself.
    pub srem: bool,
    /// Divide each loss term by its number of summands.
    pub normalized: bool,
    pub q_factor: QFactor,
    pub backbone_channels: Vec<usize>,
    /// Global gradient-norm ceiling per batch; 0 disables clipping.
    pub grad_clip: f64,
    /// Zero the mean hash pre-activation over the training images at init.
    pub center_hash: bool,
    /// Draw the initial `V` with every bit column half `+1`, half `−1`.
    pub balanced_init: bool,
    /// Keep every bit column of `V` half `+1`, half `−1` in the discrete
    /// step (`q_factor` is then ignored).
    pub balanced_v: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 16,
            r: 256,
            iterations: 10,
            epochs_per_iteration: 5,
            batch_size: 8,
            lr: 1e-2,
            lr_milestones: vec![5, 8],
            momentum: 0.9,
            weight_decay: 1e-5,
            alpha: 1.0,
            beta: 1.0,
            n_e: 8,
            l: 5,
            epsilon: srem::DEFAULT_EPSILON,
            seed: 0,
            v_passes: 1,
            srem: true,
            normalized: true,
            q_factor: QFactor::Exact,
            backbone_channels: vec![16, 32, 64],
            grad_clip: 5.0,
            center_hash: true,
            balanced_init: true,
            balanced_v: true,
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule for 224×224 inputs and 12/24-bit codes.
    pub fn full_scale() -> Self {
        Self {
            k: 12,
            r: 2000,
            iterations: 40,
            epochs_per_iteration: 20,
            batch_size: 64,
            lr: 1e-3,
            normalized: false,
            lr_milestones: vec![20, 30],
            n_e: 50,
            l: 32,
            ..Self::default()
        }
    }

    /// Pure asymmetric-hashing baseline: no erased views, no pair terms.
    pub fn baseline(mut self) -> Self {
        self.srem = false;
        self.alpha = 0.0;
        self.beta = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_code_length(self.k)?;
        let positive = [
            ("r", self.r),
            ("batch_size", self.batch_size),
            ("epochs_per_iteration", self.epochs_per_iteration),
            ("v_passes", self.v_passes),
            ("n_e", self.n_e),
            ("l", self.l),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        let nonneg = [
            ("lr", self.lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("grad_clip", self.grad_clip),
        ];
        for (key, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be finite and non-negative"));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("epsilon", "must be a small positive number"));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("lr_milestones", "must be strictly increasing"));
        }
        if self.lr_milestones.last().is_some_and(|&m| m >= self.iterations) && self.iterations > 0 {
            return Err(Error::config("lr_milestones", "must be below the iteration count"));
        }
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            return Err(Error::config("backbone_channels", "need at least one positive channel count"));
        }
        Ok(())
    }

    pub fn weights(&self) -> ObjectiveWeights {
        ObjectiveWeights {
            alpha: self.alpha,
            beta: self.beta,
            normalized: self.normalized,
        }
    }

    pub fn erase(&self) -> EraseConfig {
        EraseConfig {
            n_e: self.n_e,
            l: self.l,
            epsilon: self.epsilon,
        }
    }

    /// Whether the erased-view branch contributes anything.
    fn uses_erased(&self) -> bool {
        self.srem && self.alpha > 0.0
    }

    fn uses_positive(&self) -> bool {
        self.beta > 0.0
    }
}

/// Anchor, similarity-positive partner and (optionally) erased anchor view.
/// `row` indexes the round's similarity matrix; ids are database ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub row: usize,
    pub anchor: usize,
    pub positive: usize,
    pub erased: Option<Tensor>,
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRow {
    pub iteration: usize,
    pub epoch: usize,
    pub l_sq: f64,
    pub l_self: f64,
    pub l_others: f64,
    pub total: f64,
}

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("iteration,epoch,l_sq,l_self,l_others,total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iteration, r.epoch, r.l_sq, r.l_self, r.l_others, r.total
        ));
    }
    out
}

pub struct TrainState {
    pub model: Model,
    pub v: BitCodeMatrix,
    pub sgd: SgdState,
    pub iteration: usize,
    pub rng: ChaCha8Rng,
    pub log: Vec<LogRow>,
    pub sweeps: Vec<SweepReport>,
}

impl TrainState {
    pub fn new(dataset: &Dataset, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let arch = ArchDescriptor::with_channels(dataset.config.height, dataset.config.width, &config.backbone_channels);
        let mut model = Model::init(&arch, config.k, config.seed)?;
        if config.center_hash {
            let images: Vec<Tensor> = dataset.train_ids().into_iter().map(|i| dataset.image(i)).collect();
            model.center_hash(&images)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n = dataset.train_ids().len();
        let v = if config.balanced_init {
            BitCodeMatrix::random_balanced(n, config.k, &mut rng)?
        } else {
            BitCodeMatrix::random(n, config.k, &mut rng)?
        };
        let sgd = SgdState::new(&model.tensors(), config.lr, config.momentum, config.weight_decay)?;
        Ok(Self {
            model,
            v,
            sgd,
            iteration: 0,
            rng,
            log: Vec::new(),
            sweeps: Vec::new(),
        })
    }
}

struct Forwarded {
    anchor: crate::model::ModelTrace,
    erased: Option<crate::model::ModelTrace>,
    positive: Option<crate::model::ModelTrace>,
}

fn stack(rows: &[&Tensor], k: usize) -> Tensor {
    let data = rows.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(vec![rows.len(), k], data).unwrap()
}

/// One epoch of mini-batch SGD over `triplets` with `V` fixed. Returns the
/// loss terms summed over batches (each evaluated before its update).
///
/// A branch whose weight is zero (or the erased branch when SREM is off)
/// reuses the anchor code, so its term is exactly zero and no forward pass
/// is spent on it.
#[allow(clippy::too_many_arguments)]
pub fn theta_step<R: rand::Rng + ?Sized>(
    model: &mut Model,
    sgd: &mut SgdState,
    triplets: &[Triplet],
    db_images: &[Tensor],
    v: &BitCodeMatrix,
    s: &SimilarityMatrix,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<LossTerms> {
    let k = config.k;
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    order.shuffle(rng);
    let mut epoch = LossTerms::zero(config.alpha, config.beta);
    let (use_erased, use_positive) = (config.uses_erased(), config.uses_positive());

    for batch in order.chunks(config.batch_size) {
        let frozen: &Model = model;
        let traces: Vec<Forwarded> = batch
            .par_iter()
            .map(|&t| {
                let tri = &triplets[t];
                let anchor = frozen.forward(db_images[tri.anchor].clone())?;
                let erased = match (&tri.erased, use_erased) {
                    (Some(x), true) => Some(frozen.forward(x.clone())?),
                    _ => None,
                };
                let positive = if use_positive {
                    Some(frozen.forward(db_images[tri.positive].clone())?)
                } else {
                    None
                };
                Ok(Forwarded { anchor, erased, positive })
            })
            .collect::<Result<_>>()?;

        let anchors: Vec<&Tensor> = traces.iter().map(|f| f.anchor.codes()).collect();
        let erased: Vec<&Tensor> = traces
            .iter()
            .map(|f| f.erased.as_ref().unwrap_or(&f.anchor).codes())
            .collect();
        let positives: Vec<&Tensor> = traces
            .iter()
            .map(|f| f.positive.as_ref().unwrap_or(&f.anchor).codes())
            .collect();
        let rows: Vec<usize> = batch.iter().map(|&t| triplets[t].row).collect();
        let s_batch = s.select_rows(&rows)?;
        let (terms, grads) = loss_total(
            &stack(&anchors, k),
            &stack(&erased, k),
            &stack(&positives, k),
            v,
            &s_batch,
            config.weights(),
        )?;
        epoch.accumulate(&terms);

        let per_sample: Vec<Vec<Vec<f64>>> = traces
            .into_par_iter()
            .enumerate()
            .map(|(b, f)| {
                let mut local = frozen.clone();
                local.enable_grads();
                let row = |g: &Tensor| g.data()[b * k..(b + 1) * k].to_vec();
                let mut du = row(&grads.anchor);
                // reused branches fold their gradient into the anchor's
                if f.erased.is_none() {
                    du.iter_mut().zip(row(&grads.erased)).for_each(|(a, e)| *a += e);
                }
                if f.positive.is_none() {
                    du.iter_mut().zip(row(&grads.positive)).for_each(|(a, p)| *a += p);
                }
                f.anchor.backward(&mut local, &du)?;
                if let Some(e) = f.erased {
                    e.backward(&mut local, &row(&grads.erased))?;
                }
                if let Some(p) = f.positive {
                    p.backward(&mut local, &row(&grads.positive))?;
                }
                Ok(local.grads())
            })
            .collect::<Result<_>>()?;

        let mut total: Vec<Vec<f64>> = model.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        for sample in &per_sample {
            for (acc, g) in total.iter_mut().zip(sample) {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        if config.grad_clip > 0.0 {
            let norm = total.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
            if norm > config.grad_clip {
                let scale = config.grad_clip / norm;
                total.iter_mut().flatten().for_each(|g| *g *= scale);
            }
        }
        let grad_refs: Vec<&[f64]> = total.iter().map(Vec::as_slice).collect();
        sgd.step(&mut model.tensors_mut(), &grad_refs)?;
    }
    Ok(epoch)
}

/// Builds this round's triplets: positive partners and, when SREM is active,
/// erased views from the current network's feature maps.
pub fn build_triplets<R: rand::Rng + ?Sized>(
    model: &Model,
    sample_ids: &[usize],
    s: &SimilarityMatrix,
    db_images: &[Tensor],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<(Vec<Triplet>, Vec<srem::BinaryMask>)> {
    let positives = (0..sample_ids.len())
        .map(|row| s.pick_positive(row, rng))
        .collect::<Result<Vec<_>>>()?;
    let erased: Vec<Option<(Tensor, srem::BinaryMask)>> = if config.uses_erased() {
        sample_ids
            .par_iter()
            .map(|&id| {
                let x = &db_images[id];
                let a = model.feature_map(x)?;
                srem::make_erased(x, &a, config.erase()).map(Some)
            })
            .collect::<Result<_>>()?
    } else {
        vec![None; sample_ids.len()]
    };
    let mut masks = Vec::new();
    let triplets = sample_ids
        .iter()
        .zip(positives)
        .zip(erased)
        .enumerate()
        .map(|(row, ((&anchor, positive), erased))| {
            let erased = erased.map(|(x, m)| {
                masks.push(m);
                x
            });
            Triplet { row, anchor, positive, erased }
        })
        .collect();
    Ok((triplets, masks))
}

/// Relaxed codes for a list of images, stacked as `len×k`.
pub fn encode_all(model: &Model, images: &[&Tensor]) -> Result<Tensor> {
    let k = model.code_length();
    let codes: Vec<Tensor> = images.par_iter().map(|x| model.encode(x)).collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = codes.iter().collect();
    Ok(stack(&refs, k))
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Write the first iteration's erasing masks (PGM + anchor JSON) here.
    pub mask_dump: Option<(PathBuf, usize)>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub v: BitCodeMatrix,
    pub log: Vec<LogRow>,
    pub sweeps: Vec<SweepReport>,
}

fn dump_masks(dir: &PathBuf, count: usize, sample_ids: &[usize], masks: &[srem::BinaryMask]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    #[derive(Serialize)]
    struct Entry<'a> {
        database_id: usize,
        file: String,
        anchors: &'a [(usize, usize)],
    }
    let mut entries = Vec::new();
    for (id, mask) in sample_ids.iter().zip(masks).take(count) {
        let file = format!("mask_{id:05}.pgm");
        std::fs::write(dir.join(&file), mask.to_pgm())?;
        entries.push(Entry {
            database_id: *id,
            file,
            anchors: &mask.anchors,
        });
    }
    std::fs::write(dir.join("masks.json"), serde_json::to_vec_pretty(&entries)?)?;
    Ok(())
}

/// Runs one full iteration: sample, build triplets, gradient epochs, V sweep.
pub fn run_iteration(
    state: &mut TrainState,
    db_images: &[Tensor],
    db_labels: &[usize],
    config: &TrainConfig,
    options: &TrainOptions,
) -> Result<()> {
    let it = state.iteration;
    if config.lr_milestones.contains(&it) {
        let lr = state.sgd.learning_rate() / 10.0;
        state.sgd.set_learning_rate(lr);
    }
    let r = config.r.min(db_labels.len());
    let (sample_ids, s) = sample_round(db_labels, r, &mut state.rng)?;
    let (triplets, masks) = build_triplets(&state.model, &sample_ids, &s, db_images, config, &mut state.rng)?;
    if it == 0 {
        if let Some((dir, count)) = &options.mask_dump {
            dump_masks(dir, *count, &sample_ids, &masks)?;
        }
    }
    for epoch in 0..config.epochs_per_iteration {
        let terms = theta_step(
            &mut state.model,
            &mut state.sgd,
            &triplets,
            db_images,
            &state.v,
            &s,
            config,
            &mut state.rng,
        )?;
        state.log.push(LogRow {
            iteration: it,
            epoch,
            l_sq: terms.l_sq,
            l_self: terms.l_self,
            l_others: terms.l_others,
            total: terms.total,
        });
    }
    let anchors: Vec<&Tensor> = sample_ids.iter().map(|&i| &db_images[i]).collect();
    let u = encode_all(&state.model, &anchors)?;
    let report = if config.balanced_v {
        update_v_balanced(&mut state.v, &u, &s, config.v_passes)?
    } else {
        update_v(&mut state.v, &u, &s, config.v_passes, config.q_factor)?
    };
    state.sweeps.push(report);
    state.iteration += 1;
    Ok(())
}

/// Trains the network and learns database codes; deterministic in
/// `(dataset, config)`.
pub fn train(dataset: &Dataset, config: &TrainConfig, options: &TrainOptions) -> Result<TrainOutcome> {
    let mut state = TrainState::new(dataset, config)?;
    if config.r > state.v.n_codes() {
        return Err(Error::config(
            "r",
            format!("cannot sample {} of {} training images", config.r, state.v.n_codes()),
        ));
    }
    let db_images: Vec<Tensor> = dataset.train_ids().into_iter().map(|i| dataset.image(i)).collect();
    let db_labels = dataset.database_labels();
    for _ in 0..config.iterations {
        run_iteration(&mut state, &db_images, &db_labels, config, options)?;
    }
    Ok(TrainOutcome {
        model: state.model,
        v: state.v,
        log: state.log,
        sweeps: state.sweeps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, GenConfig};

    fn tiny_data() -> Dataset {
        generate(
            &GenConfig {
                classes: 3,
                per_class: 6,
                height: 16,
                width: 16,
                motif_size: 4,
                backgrounds: 3,
                ..GenConfig::default()
            },
            4,
        )
        .unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            k: 8,
            r: 6,
            iterations: 2,
            epochs_per_iteration: 2,
            batch_size: 4,
            lr_milestones: vec![1],
            n_e: 2,
            l: 3,
            backbone_channels: vec![4, 8],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
        TrainConfig::full_scale().validate().unwrap();
        let bad = TrainConfig { lr_milestones: vec![3, 3], ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { k: 0, ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config { key, .. }) if key == "k"));
    }

    #[test]
    fn zero_iterations_returns_initial_state() {
        let ds = tiny_data();
        let cfg = TrainConfig { iterations: 0, lr_milestones: vec![], ..tiny_config() };
        let out = train(&ds, &cfg, &TrainOptions::default()).unwrap();
        let init = TrainState::new(&ds, &cfg).unwrap();
        assert_eq!(out.model, init.model);
        assert_eq!(out.v, init.v);
        assert!(out.log.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny_data();
        let cfg = tiny_config();
        let a = train(&ds, &cfg, &TrainOptions::default()).unwrap();
        let b = train(&ds, &cfg, &TrainOptions::default()).unwrap();
        assert_eq!(a.v, b.v);
        assert_eq!(log_to_csv(&a.log), log_to_csv(&b.log));
        assert_eq!(a.model, b.model);
        assert_eq!(a.log.len(), 4);
    }

    #[test]
    fn zero_learning_rate_freezes_network() {
        let ds = tiny_data();
        let cfg = TrainConfig { lr: 0.0, ..tiny_config() };
        let mut state = TrainState::new(&ds, &cfg).unwrap();
        let before = state.model.clone();
        let db: Vec<Tensor> = ds.train_ids().into_iter().map(|i| ds.image(i)).collect();
        run_iteration(&mut state, &db, &ds.database_labels(), &cfg, &TrainOptions::default()).unwrap();
        assert_eq!(state.model, before);
    }

    #[test]
    fn baseline_has_no_pair_terms() {
        let ds = tiny_data();
        let cfg = tiny_config().baseline();
        let out = train(&ds, &cfg, &TrainOptions::default()).unwrap();
        assert!(out.log.iter().all(|r| r.l_self == 0.0 && r.l_others == 0.0 && r.total == r.l_sq));
    }
}
