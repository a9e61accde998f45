//! Loss and component ablations over several seeds.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DatasetBundle;
use crate::eval::{evaluate, EvalMode, MetricsReport};
use crate::graph::{semantic_project, topology_preservation_score};
use crate::losses::{Term, TermFlags};
use crate::error::Result;
use crate::trainer::{seen_graph, train, Checkpoint, TrainConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub flags: TermFlags,
    pub use_gcn: bool,
}

impl Variant {
    pub fn new(name: &str, flags: TermFlags, use_gcn: bool) -> Self {
        Self {
            name: name.to_string(),
            flags,
            use_gcn,
        }
    }
}

/// The nine loss combinations, each on top of `semantic + triplet`.
pub fn loss_ablation_rows() -> Vec<Variant> {
    use Term::*;
    let base = [Semantic, Triplet];
    let row = |name: &str, extra: &[Term]| {
        let terms: Vec<Term> = base.iter().chain(extra).copied().collect();
        Variant::new(name, TermFlags::of(&terms), true)
    };
    vec![
        row("sem+tri", &[]),
        row("sem+tri+tskl", &[TSkl]),
        row("sem+tri+tskl+class", &[TSkl, Class]),
        row("sem+tri+tskl+class+L2", &[TSkl, Class, LocalAdv]),
        row("sem+tri+tskl+class+L3", &[TSkl, Class, Recon]),
        row("sem+tri+L2", &[LocalAdv]),
        row("sem+tri+L3", &[Recon]),
        row("sem+tri+L2+L3", &[LocalAdv, Recon]),
        row("full", &[TSkl, Class, LocalAdv, Recon]),
    ]
}

pub fn full_variant() -> Variant {
    Variant::new("full", TermFlags::full(), true)
}

pub fn no_gcn_variant() -> Variant {
    Variant::new("full w/o gcn", TermFlags::full(), false)
}

/// Full model without local adaptation and reconstruction.
pub fn no_l2_l3_variant() -> Variant {
    Variant::new(
        "full w/o L2,L3",
        TermFlags::full().without(Term::LocalAdv).without(Term::Recon),
        true,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub variant: String,
    pub seed: u64,
    pub zs: MetricsReport,
    pub gzs: MetricsReport,
    pub topology: f64,
    pub final_loss: f64,
}

pub fn variant_config(base: &TrainConfig, variant: &Variant, seed: u64) -> TrainConfig {
    TrainConfig {
        flags: variant.flags,
        use_gcn: variant.use_gcn,
        seed,
        ..base.clone()
    }
}

/// Topology score of the seen-class projection against the prototypes.
pub fn topology_of(bundle: &DatasetBundle, ck: &Checkpoint) -> Result<f64> {
    let graph = seen_graph(bundle, ck.config.gamma_mode)?;
    let projected = semantic_project(&graph, &ck.params, ck.config.use_gcn)?;
    topology_preservation_score(&graph.prototypes, &projected)
}

pub fn run_variant(bundle: &DatasetBundle, base: &TrainConfig, variant: &Variant, seed: u64) -> Result<RunOutcome> {
    let config = variant_config(base, variant, seed);
    let ck = train(bundle, &config)?;
    let effective = config.flags.effective(&config.loss);
    Ok(RunOutcome {
        variant: variant.name.clone(),
        seed,
        zs: evaluate(&ck.params, &config.dims, bundle, EvalMode::Zs)?,
        gzs: evaluate(&ck.params, &config.dims, bundle, EvalMode::Gzs)?,
        topology: topology_of(bundle, &ck)?,
        final_loss: ck.history.last().map_or(f64::NAN, |h| h.total(effective)),
    })
}

/// Every variant under every seed, in parallel; results in variant-major,
/// seed-minor order.
pub fn run_grid(
    bundle: &DatasetBundle,
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<Vec<RunOutcome>> {
    let jobs: Vec<(&Variant, u64)> = variants
        .iter()
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    jobs.par_iter()
        .map(|(v, s)| run_variant(bundle, base, v, *s))
        .collect()
}

pub fn mean_by_variant(results: &[RunOutcome], name: &str, metric: impl Fn(&RunOutcome) -> f64) -> Option<f64> {
    let v: Vec<f64> = results.iter().filter(|r| r.variant == name).map(metric).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn ablation_csv(results: &[RunOutcome]) -> String {
    let mut out = String::from(
        "variant,seed,zs_map_all,zs_map_at_200,zs_p_at_100,zs_p_at_200,gzs_map_all,zs_skewness,topology\n",
    );
    for r in results {
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.variant,
            r.seed,
            r.zs.map_all,
            r.zs.map_at_200,
            r.zs.p_at_100,
            r.zs.p_at_200,
            r.gzs.map_all,
            r.zs.hubness.skewness,
            r.topology
        )
        .expect("string write");
    }
    out
}

/// Mean ZS `map_all` per variant, in first-seen order.
pub fn ablation_table(results: &[RunOutcome]) -> Vec<(String, f64)> {
    let mut names: Vec<&str> = Vec::new();
    for r in results {
        if !names.contains(&r.variant.as_str()) {
            names.push(&r.variant);
        }
    }
    names
        .into_iter()
        .map(|n| {
            let m = mean_by_variant(results, n, |r| r.zs.map_all).expect("name came from results");
            (n.to_string(), m)
        })
        .collect()
}
