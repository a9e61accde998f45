//! Momentum SGD over the batch objective with alternating updates: each
//! batch first takes an ascent step on the discriminators, then a descent
//! step on every other parameter.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{mine_triplets, DatasetBundle};
use crate::encoders::{DimensionSpec, ModelParams};
use crate::error::{Error, Result};
use crate::graph::{build_adjacency, GammaMode, SemanticGraph};
use crate::losses::{LossBreakdown, LossConfig, Term, TermFlags};
use crate::model::{is_discriminator_param, GradMode, Objective};
use crate::rng::{derive_seed, stream, TAG_AUDIT, TAG_MINE, TAG_MONITOR, TAG_NOISE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub triplets_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub loss: LossConfig,
    pub flags: TermFlags,
    pub use_gcn: bool,
    pub gamma_mode: GammaMode,
    pub dims: DimensionSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            triplets_per_epoch: 200,
            batch_size: 32,
            learning_rate: 1e-3,
            momentum: 0.9,
            loss: LossConfig::default(),
            flags: TermFlags::full(),
            use_gcn: true,
            gamma_mode: GammaMode::Dissimilarity,
            dims: DimensionSpec::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.triplets_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "triplets_per_epoch and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must lie in [0, 1)".into()));
        }
        self.loss.validate()?;
        self.dims.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config: TrainConfig,
    pub epoch: usize,
    /// Per-epoch loss breakdown at the end-of-epoch parameters.
    pub history: Vec<LossBreakdown>,
}

pub fn seen_graph(bundle: &DatasetBundle, mode: GammaMode) -> Result<SemanticGraph> {
    if bundle.split.seen_classes.is_empty() {
        return Err(Error::Empty("seen classes"));
    }
    build_adjacency(&bundle.prototypes.select(&bundle.split.seen_classes), mode)
}

/// Triplets of one epoch.
pub fn epoch_triplets(bundle: &DatasetBundle, config: &TrainConfig, epoch: usize) -> Result<Vec<crate::data::Triplet>> {
    mine_triplets(
        bundle,
        config.triplets_per_epoch,
        derive_seed(config.seed, &[TAG_MINE, epoch as u64]),
    )
}

/// Noise seed of the monitoring pass that fills the loss history.
pub fn monitor_seed(config: &TrainConfig, epoch: usize) -> u64 {
    derive_seed(config.seed, &[TAG_MONITOR, epoch as u64])
}

fn check_finite(b: &LossBreakdown, epoch: usize) -> Result<()> {
    match b.first_non_finite() {
        Some(t) => Err(Error::Divergence {
            epoch,
            term: t.name().to_string(),
        }),
        None => Ok(()),
    }
}

/// Optimizer state for one run.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub velocity: ModelParams,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Sgd {
    pub fn new(params: &ModelParams, learning_rate: f64, momentum: f64) -> Self {
        Self {
            velocity: params.zeros_like(),
            learning_rate,
            momentum,
        }
    }

    /// `v = m v + g; p -= lr v` (or `+=` when `ascend`) on the parameters
    /// selected by `select`.
    fn apply(&mut self, params: &mut ModelParams, grads: &ModelParams, ascend: bool, select: impl Fn(&str) -> bool) {
        let sign = if ascend { 1.0 } else { -1.0 };
        for (name, p) in params.tensors.iter_mut() {
            if !select(name) {
                continue;
            }
            let v = self.velocity.get_mut(name);
            for ((pi, vi), gi) in p.data.iter_mut().zip(v.iter_mut()).zip(grads.get(name)) {
                *vi = self.momentum * *vi + gi;
                *pi += sign * self.learning_rate * *vi;
            }
        }
    }

    /// Ascent on the adversarial terms w.r.t. the discriminators only.
    pub fn discriminator_step(
        &mut self,
        obj: &Objective<'_>,
        params: &mut ModelParams,
        batch: &[crate::data::Triplet],
        noise_seed: u64,
        epoch: usize,
    ) -> Result<LossBreakdown> {
        let mut grads = params.zeros_like();
        let b = obj.evaluate_with_grad(params, batch, noise_seed, GradMode::Discriminator, &mut grads)?;
        check_finite(&b, epoch)?;
        self.apply(params, &grads, true, is_discriminator_param);
        Ok(b)
    }

    /// Descent on the enabled total w.r.t. every non-discriminator parameter.
    pub fn feature_step(
        &mut self,
        obj: &Objective<'_>,
        params: &mut ModelParams,
        batch: &[crate::data::Triplet],
        noise_seed: u64,
        epoch: usize,
    ) -> Result<LossBreakdown> {
        let mut grads = params.zeros_like();
        let b = obj.evaluate_with_grad(params, batch, noise_seed, GradMode::Full, &mut grads)?;
        check_finite(&b, epoch)?;
        self.apply(params, &grads, false, |n| !is_discriminator_param(n));
        Ok(b)
    }
}

pub fn train(bundle: &DatasetBundle, config: &TrainConfig) -> Result<Checkpoint> {
    train_with(bundle, config, |_, _, _| {})
}

/// As [`train`], calling `on_epoch(epoch, params, breakdown)` after every
/// epoch with the end-of-epoch parameters.
pub fn train_with(
    bundle: &DatasetBundle,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &ModelParams, &LossBreakdown),
) -> Result<Checkpoint> {
    config.validate()?;
    let graph = seen_graph(bundle, config.gamma_mode)?;
    let obj = Objective::new(bundle, &graph, &config.dims, &config.loss, config.flags, config.use_gcn)?;
    let mut params = ModelParams::init(&config.dims, config.seed)?;
    let mut sgd = Sgd::new(&params, config.learning_rate, config.momentum);
    let adversarial = obj.flags().contains(Term::LocalAdv) || obj.flags().contains(Term::GlobalAdv);
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let triplets = epoch_triplets(bundle, config, epoch)?;
        for (b, batch) in triplets.chunks(config.batch_size).enumerate() {
            let noise_seed = derive_seed(config.seed, &[TAG_NOISE, epoch as u64, b as u64]);
            if adversarial {
                sgd.discriminator_step(&obj, &mut params, batch, noise_seed, epoch)?;
            }
            sgd.feature_step(&obj, &mut params, batch, noise_seed, epoch)?;
        }
        if !params.is_finite() {
            return Err(Error::Divergence {
                epoch,
                term: "parameters".into(),
            });
        }
        let monitored = obj.evaluate(&params, &triplets, monitor_seed(config, epoch))?;
        check_finite(&monitored, epoch)?;
        on_epoch(epoch, &params, &monitored);
        history.push(monitored);
    }
    Ok(Checkpoint {
        params,
        config: config.clone(),
        epoch: config.epochs,
        history,
    })
}

/// Central-difference check of the analytic gradient of the enabled total
/// at the initial parameters, on `probes` randomly chosen coordinates.
/// Returns the largest relative error.
pub fn finite_difference_audit(bundle: &DatasetBundle, config: &TrainConfig, probes: usize) -> Result<f64> {
    config.validate()?;
    let graph = seen_graph(bundle, config.gamma_mode)?;
    let obj = Objective::new(bundle, &graph, &config.dims, &config.loss, config.flags, config.use_gcn)?;
    let params = ModelParams::init(&config.dims, config.seed)?;
    let batch = mine_triplets(
        bundle,
        config.batch_size,
        derive_seed(config.seed, &[TAG_AUDIT, TAG_MINE]),
    )?;
    let noise_seed = derive_seed(config.seed, &[TAG_AUDIT, TAG_NOISE]);
    let mut grads = params.zeros_like();
    obj.evaluate_with_grad(&params, &batch, noise_seed, GradMode::Full, &mut grads)?;

    let names: Vec<String> = params.names().cloned().collect();
    let sizes: Vec<usize> = names.iter().map(|n| params.get(n).len()).collect();
    let total_size: usize = sizes.iter().sum();
    let mut rng = stream(config.seed, &[TAG_AUDIT]);
    let loss_at = |p: &ModelParams| -> Result<f64> {
        Ok(obj.evaluate(p, &batch, noise_seed)?.total(obj.flags()))
    };
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let mut flat = rng.random_range(0..total_size);
        let mut k = 0;
        while flat >= sizes[k] {
            flat -= sizes[k];
            k += 1;
        }
        let name = &names[k];
        let analytic = grads.get(name)[flat];
        let numeric = |h: f64| -> Result<f64> {
            let mut plus = params.clone();
            plus.get_mut(name)[flat] += h;
            let mut minus = params.clone();
            minus.get_mut(name)[flat] -= h;
            Ok((loss_at(&plus)? - loss_at(&minus)?) / (2.0 * h))
        };
        let err = relative_error(analytic, numeric(AUDIT_STEP)?);
        worst = worst.max(err);
    }
    Ok(worst)
}

pub const AUDIT_STEP: f64 = 1e-5;
pub const AUDIT_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(AUDIT_FLOOR)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, GeneratorSpec};

    fn bundle() -> DatasetBundle {
        generate_synthetic_dataset(&GeneratorSpec::default()).unwrap()
    }

    fn short(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            triplets_per_epoch: 64,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let b = bundle();
        let c = short(0);
        let ck = train(&b, &c).unwrap();
        assert_eq!(ck.epoch, 0);
        assert!(ck.history.is_empty());
        assert_eq!(ck.params, ModelParams::init(&c.dims, c.seed).unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let b = bundle();
        let c = short(2);
        let x = train(&b, &c).unwrap();
        let y = train(&b, &c).unwrap();
        assert_eq!(x, y);
        assert_eq!(x.history.len(), 2);
        let other = train(&b, &TrainConfig { seed: 1, ..c }).unwrap();
        assert_ne!(x.params, other.params);
    }

    #[test]
    fn invalid_configs_rejected() {
        let b = bundle();
        for c in [
            TrainConfig { learning_rate: 0.0, ..short(1) },
            TrainConfig { momentum: 1.0, ..short(1) },
            TrainConfig { batch_size: 0, ..short(1) },
        ] {
            assert!(matches!(train(&b, &c), Err(Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn divergence_names_the_term() {
        let b = bundle();
        let c = TrainConfig {
            learning_rate: 1e200,
            ..short(3)
        };
        match train(&b, &c) {
            Err(Error::Divergence { term, .. }) => assert!(!term.is_empty()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn updates_respect_the_partition() {
        let b = bundle();
        let c = TrainConfig {
            loss: LossConfig {
                enable_global_adversarial: true,
                ..LossConfig::default()
            },
            flags: TermFlags::all(),
            ..short(1)
        };
        let graph = seen_graph(&b, c.gamma_mode).unwrap();
        let obj = Objective::new(&b, &graph, &c.dims, &c.loss, c.flags, true).unwrap();
        let mut params = ModelParams::init(&c.dims, 0).unwrap();
        let mut sgd = Sgd::new(&params, 0.01, 0.9);
        let batch = epoch_triplets(&b, &c, 0).unwrap();
        for round in 0..2 {
            let before = params.clone();
            sgd.discriminator_step(&obj, &mut params, &batch[..16], round, 0).unwrap();
            for name in params.names() {
                let moved = params.get(name) != before.get(name);
                assert_eq!(moved, is_discriminator_param(name), "{name}");
            }
            let before = params.clone();
            sgd.feature_step(&obj, &mut params, &batch[..16], round, 0).unwrap();
            for name in params.names() {
                if is_discriminator_param(name) {
                    assert_eq!(params.get(name), before.get(name), "{name}");
                }
            }
        }
    }

    #[test]
    fn baseline_flags_leave_adversarial_and_codec_params_alone() {
        let b = bundle();
        let c = TrainConfig {
            flags: TermFlags::of(&[Term::Triplet, Term::Semantic, Term::Class]),
            ..short(2)
        };
        let init = ModelParams::init(&c.dims, c.seed).unwrap();
        let ck = train(&b, &c).unwrap();
        for name in init.names() {
            let untouched = name.starts_with("local_disc.")
                || name.starts_with("global_disc.")
                || name.starts_with("codec_");
            if untouched {
                assert_eq!(ck.params.get(name), init.get(name), "{name}");
            }
        }
        for h in &ck.history {
            for t in [Term::TSkl, Term::LocalAdv, Term::Recon, Term::GlobalAdv] {
                assert_eq!(h.get(t), 0.0);
            }
        }
    }

    #[test]
    fn history_matches_recomputation() {
        let b = bundle();
        let c = short(2);
        let mut snapshots = Vec::new();
        let ck = train_with(&b, &c, |_, p, _| snapshots.push(p.clone())).unwrap();
        let graph = seen_graph(&b, c.gamma_mode).unwrap();
        let obj = Objective::new(&b, &graph, &c.dims, &c.loss, c.flags, c.use_gcn).unwrap();
        for (epoch, p) in snapshots.iter().enumerate() {
            let triplets = epoch_triplets(&b, &c, epoch).unwrap();
            let again = obj.evaluate(p, &triplets, monitor_seed(&c, epoch)).unwrap();
            for t in Term::ALL {
                assert!((again.get(t) - ck.history[epoch].get(t)).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn audit_is_deterministic_and_zero_for_empty_objective() {
        let b = bundle();
        let c = TrainConfig {
            batch_size: 4,
            ..TrainConfig::default()
        };
        let a = finite_difference_audit(&b, &c, 12).unwrap();
        assert_eq!(a, finite_difference_audit(&b, &c, 12).unwrap());
        assert!(a < 1e-4, "{a}");
        let none = TrainConfig {
            flags: TermFlags::NONE,
            ..c
        };
        assert_eq!(finite_difference_audit(&b, &none, 12).unwrap(), 0.0);
    }
}
