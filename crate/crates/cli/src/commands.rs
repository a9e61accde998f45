use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::json;

use sketret_core::checkpoint::{load_checkpoint, save_checkpoint};
use sketret_core::data::format_semantic_embeddings;
use sketret_core::eval::{evaluate_detailed, hubness_csv, rankings_csv};
use sketret_core::experiment::{ablation_csv, ablation_table, loss_ablation_rows, no_gcn_variant, run_grid};
use sketret_core::graph::{semantic_project, similarity_matrix};
use sketret_core::losses::Term;
use sketret_core::tensor::Matrix;
use sketret_core::theory::{bound_report, BoundReport};
use sketret_core::trainer::{seen_graph, train, Checkpoint, TrainConfig};

use crate::config::ExperimentConfig;
use crate::CliError;

pub struct Context {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub force: bool,
    pub checkpoint: Option<PathBuf>,
}

impl Context {
    fn hash(&self) -> String {
        self.config.hash()
    }

    fn dir(&self, sub: &str) -> Result<PathBuf, CliError> {
        let d = self.out.join(sub);
        fs::create_dir_all(&d).map_err(|e| io_error(&d, e))?;
        Ok(d)
    }

    fn seed_dir(&self, sub: &str, seed: u64) -> Result<PathBuf, CliError> {
        self.dir(&format!("{sub}/seed-{seed}"))
    }

    fn checkpoint_path(&self, seed: u64) -> PathBuf {
        self.out.join(format!("train/seed-{seed}/checkpoint.bdas"))
    }

    /// `(seed, path)` pairs to read: the explicit `--checkpoint`, or one per
    /// configured seed under `train/`.
    fn checkpoints(&self) -> Vec<(Option<u64>, PathBuf)> {
        match &self.checkpoint {
            Some(p) => vec![(None, p.clone())],
            None => self.config.seeds.iter().map(|&s| (Some(s), self.checkpoint_path(s))).collect(),
        }
    }

    fn csv(&self, body: &str) -> String {
        format!("# config_hash={}\n{body}", self.hash())
    }

    fn write_meta(&self, dir: &Path, command: &str) -> Result<(), CliError> {
        let config: serde_json::Map<String, serde_json::Value> = self
            .config
            .pairs()
            .into_iter()
            .map(|(k, v)| (k, serde_json::Value::String(v)))
            .collect();
        let meta = json!({
            "command": command,
            "config_hash": self.hash(),
            "config": config,
        });
        write(&dir.join("run_meta.json"), &pretty(&meta)?)
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn pretty<T: serde::Serialize>(v: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn load(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::Runtime(format!(
            "checkpoint {} not found; run `sketret train` first",
            path.display()
        )));
    }
    load_checkpoint(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn matrix_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for i in 0..m.rows {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:.6}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn generate(ctx: &Context) -> Result<(), CliError> {
    let (bundle, _) = ctx.config.prepare()?;
    let dir = ctx.out.join("data");
    let target = dir.join("bundle.json");
    if target.exists() && !ctx.force {
        return Err(CliError::Runtime(format!(
            "{} exists; pass --force to overwrite",
            target.display()
        )));
    }
    let dir = ctx.dir("data")?;
    write(&target, &pretty(&bundle)?)?;
    write(&dir.join("semantic.txt"), &format_semantic_embeddings(&bundle.prototypes))?;
    ctx.write_meta(&dir, "generate")?;
    println!(
        "{} classes ({} seen, {} unseen), {} images, {} sketches -> {}",
        bundle.num_classes(),
        bundle.split.seen_classes.len(),
        bundle.split.unseen_classes.len(),
        bundle.images.len(),
        bundle.sketches.len(),
        dir.display()
    );
    Ok(())
}

fn history_csv(ck: &Checkpoint) -> String {
    let terms = Term::ALL;
    let mut out = String::from("epoch");
    for t in terms {
        write!(out, ",{}", t.name()).unwrap();
    }
    out.push_str(",total\n");
    let flags = ck.config.flags.effective(&ck.config.loss);
    for (e, h) in ck.history.iter().enumerate() {
        write!(out, "{}", e + 1).unwrap();
        for t in terms {
            write!(out, ",{:.9}", h.get(t)).unwrap();
        }
        writeln!(out, ",{:.9}", h.total(flags)).unwrap();
    }
    out
}

pub fn train_cmd(ctx: &Context) -> Result<(), CliError> {
    let (bundle, base) = ctx.config.prepare()?;
    let runs: Vec<(u64, Checkpoint)> = ctx
        .config
        .seeds
        .par_iter()
        .map(|&seed| {
            let config = TrainConfig { seed, ..base.clone() };
            train(&bundle, &config).map(|ck| (seed, ck))
        })
        .collect::<Result<_, _>>()
        .map_err(CliError::from)?;
    for (seed, ck) in &runs {
        let dir = ctx.seed_dir("train", *seed)?;
        let path = dir.join("checkpoint.bdas");
        save_checkpoint(ck, &path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        write(&dir.join("history.csv"), &ctx.csv(&history_csv(ck)))?;
        let flags = ck.config.flags.effective(&ck.config.loss);
        let last = ck.history.last().map_or(f64::NAN, |h| h.total(flags));
        println!("seed {seed}: {} epochs, final loss {last:.6} -> {}", ck.epoch, path.display());
    }
    ctx.write_meta(&ctx.dir("train")?, "train")
}

pub fn eval_cmd(ctx: &Context) -> Result<(), CliError> {
    let (bundle, _) = ctx.config.prepare()?;
    let mut summary = String::from("seed,mode,map_all,map_at_200,p_at_100,p_at_200,skewness\n");
    for (seed, path) in ctx.checkpoints() {
        let ck = load(&path)?;
        let seed = seed.unwrap_or(ck.config.seed);
        let dir = ctx.seed_dir("eval", seed)?;
        for &mode in &ctx.config.modes {
            let ev = evaluate_detailed(&ck.params, &ck.config.dims, &bundle, mode)?;
            let r = &ev.report;
            write(&dir.join(format!("metrics_{mode}.json")), &pretty(r)?)?;
            write(&dir.join(format!("hubness_{mode}.csv")), &ctx.csv(&hubness_csv(&r.hubness)))?;
            write(&dir.join(format!("rankings_{mode}.csv")), &ctx.csv(&rankings_csv(&ev, None)))?;
            writeln!(
                summary,
                "{seed},{mode},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.map_all, r.map_at_200, r.p_at_100, r.p_at_200, r.hubness.skewness
            )
            .unwrap();
            println!(
                "seed {seed} {}: mAP@all {:.4}  mAP@200 {:.4}  P@100 {:.4}  P@200 {:.4}",
                mode.to_string().to_uppercase(),
                r.map_all,
                r.map_at_200,
                r.p_at_100,
                r.p_at_200
            );
        }
    }
    let dir = ctx.dir("eval")?;
    write(&dir.join("summary.csv"), &ctx.csv(&summary))?;
    ctx.write_meta(&dir, "eval")
}

pub fn ablate(ctx: &Context) -> Result<(), CliError> {
    let (bundle, base) = ctx.config.prepare()?;
    let mut variants = loss_ablation_rows();
    variants.push(no_gcn_variant());
    let results = run_grid(&bundle, &base, &variants, &ctx.config.seeds)?;
    let dir = ctx.dir("ablate")?;
    write(&dir.join("ablation.csv"), &ctx.csv(&ablation_csv(&results)))?;
    let mut means = String::from("variant,mean_zs_map_all\n");
    for (name, m) in ablation_table(&results) {
        writeln!(means, "{name},{m:.6}").unwrap();
        println!("{name:<24} {m:.4}");
    }
    write(&dir.join("ablation_means.csv"), &ctx.csv(&means))?;
    ctx.write_meta(&dir, "ablate")
}

pub fn theory(ctx: &Context) -> Result<(), CliError> {
    let (bundle, _) = ctx.config.prepare()?;
    let dir = ctx.dir("theory")?;
    let mut reports: Vec<(u64, BoundReport)> = Vec::new();
    for (seed, path) in ctx.checkpoints() {
        let ck = load(&path)?;
        let seed = seed.unwrap_or(ck.config.seed);
        let r = bound_report(&ck.params, &ck.config.dims, &bundle, seed)?;
        write(&dir.join(format!("bound_seed-{seed}.json")), &pretty(&r)?)?;
        println!(
            "seed {seed}: d(a,p) {:.3}  d(a,n) {:.3}  ordering {}",
            r.d_alpha_p, r.d_alpha_n, r.ordering_holds
        );
        reports.push((seed, r));
    }
    let holds = reports.iter().filter(|(_, r)| r.ordering_holds).count();
    let fraction = holds as f64 / reports.len() as f64;
    let summary = json!({
        "config_hash": ctx.hash(),
        "seeds": reports.iter().map(|(s, _)| *s).collect::<Vec<_>>(),
        "ordering_holds": reports.iter().map(|(_, r)| r.ordering_holds).collect::<Vec<_>>(),
        "pass_fraction": fraction,
    });
    write(&dir.join("summary.json"), &pretty(&summary)?)?;
    println!("ordering holds in {holds}/{} seeds", reports.len());
    ctx.write_meta(&dir, "theory")
}

pub fn plot(ctx: &Context) -> Result<(), CliError> {
    let (bundle, _) = ctx.config.prepare()?;
    for (seed, path) in ctx.checkpoints() {
        let ck = load(&path)?;
        let seed = seed.unwrap_or(ck.config.seed);
        let graph = seen_graph(&bundle, ck.config.gamma_mode)?;
        let projected = semantic_project(&graph, &ck.params, ck.config.use_gcn)?;
        let dir = ctx.seed_dir("plot", seed)?;
        write(
            &dir.join("similarity_original.csv"),
            &ctx.csv(&matrix_csv(&similarity_matrix(&graph.prototypes))),
        )?;
        write(
            &dir.join("similarity_projected.csv"),
            &ctx.csv(&matrix_csv(&similarity_matrix(&projected))),
        )?;
        write(&dir.join("loss_curve.csv"), &ctx.csv(&history_csv(&ck)))?;
        println!("seed {seed}: plot data -> {}", dir.display());
    }
    ctx.write_meta(&ctx.dir("plot")?, "plot")
}
