//! Flat `key = value` experiment configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use sketret_core::data::{generate_synthetic_dataset, DatasetBundle, GeneratorSpec};
use sketret_core::eval::EvalMode;
use sketret_core::graph::GammaMode;
use sketret_core::losses::{Term, TermFlags};
use sketret_core::trainer::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub generator: GeneratorSpec,
    /// Read the dataset from this `bundle.json` instead of generating it.
    pub bundle: Option<PathBuf>,
    /// Data-dependent dims (grid, channels, semantic, num_seen) are filled in
    /// from the bundle by `prepare`.
    pub train: TrainConfig,
    pub modes: Vec<EvalMode>,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorSpec::default(),
            bundle: None,
            train: TrainConfig::default(),
            modes: vec![EvalMode::Zs, EvalMode::Gzs],
            seeds: vec![0],
            out: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| CliError::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

pub fn parse_seeds(value: &str) -> Result<Vec<u64>, CliError> {
    let seeds: Vec<u64> = value
        .split(',')
        .map(|s| parse("seeds", s.trim()))
        .collect::<Result<_, _>>()?;
    if seeds.is_empty() {
        return Err(CliError::Config("empty seed list".into()));
    }
    Ok(seeds)
}

pub fn parse_modes(value: &str) -> Result<Vec<EvalMode>, CliError> {
    match value.to_ascii_lowercase().as_str() {
        "both" => Ok(vec![EvalMode::Zs, EvalMode::Gzs]),
        list => {
            let mut modes: Vec<EvalMode> = list
                .split(',')
                .map(|m| parse("mode", m.trim()))
                .collect::<Result<_, _>>()?;
            modes.dedup();
            Ok(modes)
        }
    }
}

fn parse_terms(value: &str) -> Result<TermFlags, CliError> {
    match value.trim() {
        "full" => Ok(TermFlags::full()),
        "all" => Ok(TermFlags::all()),
        list => {
            let terms: Vec<Term> = list
                .split(',')
                .map(|t| parse("loss.terms", t.trim()))
                .collect::<Result<_, _>>()?;
            Ok(TermFlags::of(&terms))
        }
    }
}

fn format_terms(flags: TermFlags) -> String {
    flags.terms().map(|t| t.name()).collect::<Vec<_>>().join(",")
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        let g = &mut self.generator;
        let t = &mut self.train;
        match key {
            "data.num_classes" => g.num_classes = parse(key, v)?,
            "data.images_per_class" => g.images_per_class = parse(key, v)?,
            "data.sketches_per_class" => g.sketches_per_class = parse(key, v)?,
            "data.grid" => g.grid = parse(key, v)?,
            "data.channels" => g.channels = parse(key, v)?,
            "data.raw_dim" => g.raw_dim = parse(key, v)?,
            "data.semantic_dim" => g.semantic_dim = parse(key, v)?,
            "data.class_latent_dim" => g.class_latent_dim = parse(key, v)?,
            "data.super_clusters" => g.super_clusters = parse(key, v)?,
            "data.image_noise" => g.image_noise = parse(key, v)?,
            "data.sketch_noise" => g.sketch_noise = parse(key, v)?,
            "data.clutter" => g.clutter = parse(key, v)?,
            "data.sketch_threshold" => g.sketch_threshold = parse(key, v)?,
            "data.semantic_noise" => g.semantic_noise = parse(key, v)?,
            "data.unseen_fraction" => g.unseen_fraction = parse(key, v)?,
            "data.seed" => g.seed = parse(key, v)?,
            "data.bundle" => self.bundle = (!v.is_empty()).then(|| PathBuf::from(v)),
            "model.hidden" => t.dims.hidden = parse(key, v)?,
            "model.latent" => t.dims.latent = parse(key, v)?,
            "model.codec" => t.dims.codec = parse(key, v)?,
            "model.semantic_hidden" => t.dims.semantic_hidden = parse(key, v)?,
            "model.gcn_hidden" => t.dims.gcn_hidden = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.triplets_per_epoch" => t.triplets_per_epoch = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.learning_rate" => t.learning_rate = parse(key, v)?,
            "train.momentum" => t.momentum = parse(key, v)?,
            "train.use_gcn" => t.use_gcn = parse(key, v)?,
            "train.gamma_mode" => t.gamma_mode = parse::<GammaMode>(key, v)?,
            "loss.beta" => t.loss.beta = parse(key, v)?,
            "loss.lambda" => t.loss.lambda = parse(key, v)?,
            "loss.mu" => t.loss.mu = parse(key, v)?,
            "loss.t_pos" => t.loss.t_pos = parse(key, v)?,
            "loss.t_neg" => t.loss.t_neg = parse(key, v)?,
            "loss.global_adversarial" => t.loss.enable_global_adversarial = parse(key, v)?,
            "loss.terms" => t.flags = parse_terms(v)?,
            "eval.mode" => self.modes = parse_modes(v)?,
            "run.seeds" => self.seeds = parse_seeds(v)?,
            "run.out" => self.out = (!v.is_empty()).then(|| PathBuf::from(v)),
            _ => return Err(CliError::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a config file: one `key = value` per line, `#` comments.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| CliError::Config(format!("line {}: {}", i + 1, e.message())))?;
        }
        Ok(())
    }

    pub fn apply_override(&mut self, kv: &str) -> Result<(), CliError> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{kv}`")))?;
        self.set(k.trim(), v)
    }

    /// Every key with its resolved value, sorted; the output directory is
    /// left out because it does not change results.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let g = &self.generator;
        let t = &self.train;
        let mut p: Vec<(&str, String)> = vec![
            ("data.num_classes", g.num_classes.to_string()),
            ("data.images_per_class", g.images_per_class.to_string()),
            ("data.sketches_per_class", g.sketches_per_class.to_string()),
            ("data.grid", g.grid.to_string()),
            ("data.channels", g.channels.to_string()),
            ("data.raw_dim", g.raw_dim.to_string()),
            ("data.semantic_dim", g.semantic_dim.to_string()),
            ("data.class_latent_dim", g.class_latent_dim.to_string()),
            ("data.super_clusters", g.super_clusters.to_string()),
            ("data.image_noise", g.image_noise.to_string()),
            ("data.sketch_noise", g.sketch_noise.to_string()),
            ("data.clutter", g.clutter.to_string()),
            ("data.sketch_threshold", g.sketch_threshold.to_string()),
            ("data.semantic_noise", g.semantic_noise.to_string()),
            ("data.unseen_fraction", g.unseen_fraction.to_string()),
            ("data.seed", g.seed.to_string()),
            (
                "data.bundle",
                self.bundle.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
            ("model.hidden", t.dims.hidden.to_string()),
            ("model.latent", t.dims.latent.to_string()),
            ("model.codec", t.dims.codec.to_string()),
            ("model.semantic_hidden", t.dims.semantic_hidden.to_string()),
            ("model.gcn_hidden", t.dims.gcn_hidden.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.triplets_per_epoch", t.triplets_per_epoch.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.learning_rate", t.learning_rate.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.use_gcn", t.use_gcn.to_string()),
            ("train.gamma_mode", t.gamma_mode.to_string()),
            ("loss.beta", t.loss.beta.to_string()),
            ("loss.lambda", t.loss.lambda.to_string()),
            ("loss.mu", t.loss.mu.to_string()),
            ("loss.t_pos", t.loss.t_pos.to_string()),
            ("loss.t_neg", t.loss.t_neg.to_string()),
            ("loss.global_adversarial", t.loss.enable_global_adversarial.to_string()),
            ("loss.terms", format_terms(t.flags)),
            ("eval.mode", join(&self.modes)),
            ("run.seeds", join(&self.seeds)),
        ];
        p.sort();
        p.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.pairs() {
            h.update(format!("{k}={v}\n"));
        }
        hex::encode(h.finalize())
    }

    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.out.clone())
            .or_else(|| std::env::var_os("SKETRET_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("sketret-out"))
    }

    /// Loads or generates the dataset and completes the training config.
    /// Everything that fails here is a configuration problem, except I/O on
    /// a named bundle file.
    pub fn prepare(&self) -> Result<(DatasetBundle, TrainConfig), CliError> {
        let bundle = match &self.bundle {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?
            }
            None => generate_synthetic_dataset(&self.generator).map_err(|e| CliError::Config(e.to_string()))?,
        };
        let mut train = self.train.clone();
        train.dims.grid = bundle.grid;
        train.dims.channels = bundle.channels;
        train.dims.semantic = bundle.prototypes.dim();
        train.dims.num_seen = bundle.split.seen_classes.len();
        train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if train.flags.is_empty() {
            return Err(CliError::Config("`loss.terms` selects no terms".into()));
        }
        Ok((bundle, train))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_cover_every_key_and_round_trip() {
        let mut c = ExperimentConfig::default();
        c.apply_text("train.epochs = 3\nloss.terms = semantic,triplet # baseline\n\nrun.seeds=4,5\n")
            .unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.seeds, vec![4, 5]);
        let mut again = ExperimentConfig::default();
        for (k, v) in c.pairs() {
            again.set(&k, &v).unwrap();
        }
        assert_eq!(again, c);
        assert_eq!(again.hash(), c.hash());
    }

    #[test]
    fn unknown_and_malformed_keys_are_config_errors() {
        let mut c = ExperimentConfig::default();
        assert!(matches!(c.set("train.epoch", "3"), Err(CliError::Config(_))));
        assert!(matches!(c.set("train.epochs", "three"), Err(CliError::Config(_))));
        assert!(matches!(c.apply_text("just words"), Err(CliError::Config(_))));
        assert!(matches!(c.apply_override("loss.terms=bogus"), Err(CliError::Config(_))));
    }

    #[test]
    fn hash_tracks_results_not_output_location() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.set("run.out", "/tmp/elsewhere").unwrap();
        assert_eq!(a.hash(), b.hash());
        b.set("loss.mu", "0.2").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn prepare_fills_data_dims() {
        let (bundle, train) = ExperimentConfig::default().prepare().unwrap();
        assert_eq!(train.dims.num_seen, bundle.split.seen_classes.len());
        assert_eq!(train.dims.semantic, bundle.prototypes.dim());
    }
}
