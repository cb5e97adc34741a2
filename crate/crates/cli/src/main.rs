//! `kronsep`: train, attack, inspect and verify separable classifiers.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 verification failure.

mod config;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kronsep::adversarial::{attack, linf_distance};
use kronsep::checkpoint::{load_checkpoint, save_checkpoint, write_atomic, Checkpoint};
use kronsep::data::load_idx;
use kronsep::nn::argmax;
use kronsep::train::{condition_report, evaluate, population_variance, train_seeds};
use kronsep::verify::{self, Fault, VerifyOptions};
use kronsep::{AttackConfig, AttackKind, Dataset, SepMlp};

use config::{seeded_path, RunConfig};
use report::{num, opt, shapes, Histogram, Report, HISTOGRAM_BINS};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Verification(String),
}

impl CliError {
    /// Invalid parameters are usage errors; everything else from the library is a data error.
    pub fn from_core(e: kronsep::Error) -> Self {
        match e {
            kronsep::Error::InvalidParameter { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Verification(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(name = "kronsep", version, about = "Separable (Kronecker-factored) classifiers with adversarial training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed and write checkpoints plus a metrics report.
    Train(TrainArgs),
    /// Evaluate natural and robust accuracy of a checkpoint.
    Attack(AttackArgs),
    /// Print shapes, parameter counts, condition numbers and magnitude histograms.
    Inspect(InspectArgs),
    /// Run the randomized property suite.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Pgd,
    Fgsm,
}

impl From<KindArg> for AttackKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Pgd => AttackKind::Pgd,
            KindArg::Fgsm => AttackKind::Fgsm,
        }
    }
}

#[derive(Args)]
struct AttackFlags {
    /// Attack kind; starts from that kind's default budget.
    #[arg(long, value_enum)]
    attack: Option<KindArg>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long = "step-size")]
    step_size: Option<f64>,
}

impl AttackFlags {
    /// Applies the flags on top of `base`. `None` stays `None` unless `--attack` is given.
    fn apply(&self, base: Option<AttackConfig>) -> Result<Option<AttackConfig>, CliError> {
        let mut cfg = match (self.attack, base) {
            (Some(KindArg::Pgd), _) => AttackConfig::pgd_default(),
            (Some(KindArg::Fgsm), _) => AttackConfig::fgsm_default(),
            (None, Some(b)) => b,
            (None, None) => {
                if self.eps.is_some() || self.steps.is_some() || self.step_size.is_some() {
                    return Err(CliError::Usage(
                        "--eps/--steps/--step-size need --attack or an attack in the config".into(),
                    ));
                }
                return Ok(None);
            }
        };
        debug_assert_eq!(self.attack.map_or(cfg.kind, AttackKind::from), cfg.kind);
        if let Some(e) = self.eps {
            cfg.epsilon = e;
        }
        if let Some(n) = self.steps {
            cfg.steps = n;
        }
        if let Some(s) = self.step_size {
            cfg.step_size = s;
        }
        cfg.validate().map_err(CliError::from_core)?;
        Ok(Some(cfg))
    }
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Train a single seed, replacing the configured seed list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    mu1: Option<f64>,
    #[arg(long)]
    mu2: Option<f64>,
    #[arg(long)]
    mu3: Option<f64>,
    #[arg(long = "prune-threshold")]
    prune_threshold: Option<f64>,
    /// Adversarial training attack (absent: natural training).
    #[command(flatten)]
    attack: AttackFlags,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long = "dump-config")]
    dump_config: bool,
    #[arg(long = "no-timestamp")]
    no_timestamp: bool,
}

#[derive(Args)]
struct AttackArgs {
    /// Checkpoint to attack.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run configuration whose test split is evaluated.
    #[arg(long, conflicts_with_all = ["images", "labels"])]
    config: Option<PathBuf>,
    /// IDX image file (with --labels) to evaluate instead of a config dataset.
    #[arg(long, requires = "labels")]
    images: Option<PathBuf>,
    #[arg(long, requires = "images")]
    labels: Option<PathBuf>,
    /// Per-sample shape for IDX input.
    #[arg(long, value_delimiter = ',')]
    shape: Option<Vec<usize>>,
    /// Evaluate only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
    /// Attack settings; PGD with its default budget when `--attack` is omitted.
    #[command(flatten)]
    attack: AttackFlags,
    /// Write per-sample perturbation norms as CSV.
    #[arg(long)]
    perturbations: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long = "no-timestamp")]
    no_timestamp: bool,
}

#[derive(Args)]
struct InspectArgs {
    checkpoint: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long = "no-timestamp")]
    no_timestamp: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    /// Flip the sign of one entry of every Kronecker product built by the suite.
    KronSign,
}

#[derive(Args)]
struct VerifyArgs {
    /// Random cases per property (gradient checks use a fifth, at least 20).
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Test hook: corrupt the suite's Kronecker products.
    #[arg(long = "inject-fault", value_enum)]
    inject_fault: Option<FaultArg>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Attack(a) => cmd_attack(&a),
        Command::Inspect(a) => cmd_inspect(&a),
        Command::Verify(a) => cmd_verify(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn emit(report: &Report, path: Option<&Path>) -> Result<(), CliError> {
    let text = report.render();
    print!("{text}");
    if let Some(p) = path {
        ensure_parent(p)?;
        write_atomic(p, text.as_bytes()).map_err(CliError::from_core)?;
    }
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display()))),
        _ => Ok(()),
    }
}

fn effective_config(a: &TrainArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seeds = vec![s];
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.train.adam.lr = lr;
    }
    if let Some(m) = a.mu1 {
        cfg.train.regularizers.mu1 = m;
    }
    if let Some(m) = a.mu2 {
        cfg.train.regularizers.mu2 = m;
    }
    if let Some(m) = a.mu3 {
        cfg.train.regularizers.mu3 = m;
    }
    if let Some(t) = a.prune_threshold {
        cfg.train.prune_threshold = t;
    }
    cfg.train.attack = a.attack.apply(cfg.train.attack)?;
    if let Some(p) = &a.checkpoint {
        cfg.output.checkpoint = p.clone();
    }
    if let Some(p) = &a.report {
        cfg.output.report = Some(p.clone());
    }
    cfg.train.validate().map_err(CliError::from_core)?;
    Ok(cfg)
}

fn describe_attack(a: Option<&AttackConfig>) -> String {
    match a {
        None => "none".into(),
        Some(c) if c.kind == AttackKind::Fgsm => format!("fgsm eps={}", c.epsilon),
        Some(c) => format!("pgd eps={} steps={} step_size={}", c.epsilon, c.steps, c.step_size),
    }
}

fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let cfg = effective_config(a)?;
    if a.dump_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let (train_set, test_set) = cfg.dataset.load()?;
    let specs = cfg.specs();
    let classes = cfg.classes()?;
    let seeds = cfg.effective_seeds();
    let multi = train_seeds(&specs, classes, &train_set, &cfg.train, &seeds).map_err(CliError::from_core)?;
    let eval_attack = cfg
        .train
        .eval_attack
        .or(cfg.train.attack)
        .unwrap_or_else(AttackConfig::fgsm_default);

    let mut rep = Report::new("kronsep train", !a.no_timestamp);
    rep.line(format!("dataset: {} (train {}, test {})", cfg.dataset.describe(), train_set.len(), test_set.len()));
    for (i, l) in cfg.layers.iter().enumerate() {
        rep.line(format!("layer {i}: factors {} activation {} bias {}", shapes(&l.factors), format!("{:?}", l.activation).to_lowercase(), l.bias));
    }
    let r = &cfg.train.regularizers;
    rep.line(format!(
        "objective: mu1={} mu2={} mu3={} nu={} varpi={} p={}",
        r.mu1, r.mu2, r.mu3, r.nu, r.varpi, r.p
    ));
    rep.line(format!("training attack: {}", describe_attack(cfg.train.attack.as_ref())));
    rep.line(format!("evaluation attack: {}", describe_attack(Some(&eval_attack))));
    rep.line(format!(
        "epochs {} batch {} lr {} prune_threshold {}",
        cfg.train.epochs, cfg.train.batch_size, cfg.train.adam.lr, cfg.train.prune_threshold
    ));

    let mut summary = Vec::new();
    let (mut nas, mut ras) = (Vec::new(), Vec::new());
    rep.kv("seeds", seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
    for run in &multi.runs {
        rep.line("");
        rep.line(format!("seed {} epoch log (training set)", run.seed));
        let rows: Vec<Vec<String>> = run
            .report
            .epochs
            .iter()
            .map(|e| {
                vec![
                    e.epoch.to_string(),
                    num(e.loss.total, 6),
                    num(e.loss.data, 6),
                    num(e.loss.rho, 6),
                    num(e.loss.tau, 6),
                    num(e.loss.g, 6),
                    num(e.natural_accuracy, 2),
                    opt(e.robust_accuracy, 2),
                ]
            })
            .collect();
        rep.table(&["epoch", "loss", "data", "rho", "tau", "g", "NA", "RA"], &rows);

        let na = evaluate(&run.model, &test_set, None).map_err(CliError::from_core)?;
        let ra = evaluate(&run.model, &test_set, Some(&eval_attack)).map_err(CliError::from_core)?;
        nas.push(na);
        ras.push(ra);
        let kappa = condition_report(&run.model);
        let path = if seeds.len() > 1 {
            seeded_path(&cfg.output.checkpoint, run.seed)
        } else {
            cfg.output.checkpoint.clone()
        };
        let run_cfg = kronsep::TrainConfig {
            seed: run.seed,
            ..cfg.train.clone()
        };
        let mut ck = Checkpoint::new(run.model.clone()).with_training(run_cfg, run.report.clone());
        ck.replaces = cfg.replaces();
        ensure_parent(&path)?;
        save_checkpoint(&ck, &path).map_err(CliError::from_core)?;

        let k = format!("seed.{}", run.seed);
        rep.kv(format!("{k}.checkpoint"), path.display());
        rep.kv(format!("{k}.natural_accuracy"), na);
        rep.kv(format!("{k}.robust_accuracy"), ra);
        rep.kv(format!("{k}.structural_cr"), run.report.structural_cr);
        rep.kv(format!("{k}.pruned_cr"), run.report.pruned_cr);
        rep.kv(format!("{k}.pruned_entries"), run.report.pruned_entries);
        for (i, c) in kappa.iter().enumerate() {
            rep.kv(format!("{k}.layer.{i}.condition"), c);
        }
        summary.push(vec![
            run.seed.to_string(),
            num(na, 2),
            num(ra, 2),
            num(run.report.structural_cr, 3),
            num(run.report.pruned_cr, 3),
            kappa.iter().map(|c| num(*c, 3)).collect::<Vec<_>>().join(","),
            path.display().to_string(),
        ]);
    }
    rep.line("");
    rep.line("test-set results");
    rep.table(&["seed", "NA", "RA", "Cr", "Cr_pruned", "kappa", "checkpoint"], &summary);
    let (var_na, var_ra) = (population_variance(&nas), population_variance(&ras));
    if seeds.len() > 1 {
        rep.line(format!("variance across seeds: NA {} RA {}", opt(var_na, 4), opt(var_ra, 4)));
        rep.kv("natural_accuracy_variance", var_na.unwrap_or(f64::NAN));
        rep.kv("robust_accuracy_variance", var_ra.unwrap_or(f64::NAN));
    }
    emit(&rep, cfg.output.report.as_deref())
}

fn load(path: &Path) -> Result<Checkpoint, CliError> {
    load_checkpoint(path).map_err(|e| CliError::Data(format!("cannot load checkpoint {}: {e}", path.display())))
}

fn cmd_attack(a: &AttackArgs) -> Result<(), CliError> {
    if a.config.is_none() && a.images.is_none() {
        return Err(CliError::Usage("attack needs --config or --images/--labels".into()));
    }
    let cfg = a
        .attack
        .apply(Some(AttackConfig::pgd_default()))?
        .expect("a base attack is always supplied");
    let (dataset, source) = match (&a.config, &a.images, &a.labels) {
        (Some(p), _, _) => {
            let run = RunConfig::load(p)?;
            (run.dataset.load()?.1, format!("{} (test split)", run.dataset.describe()))
        }
        (None, Some(i), Some(l)) => {
            let ds = load_idx(i, l).map_err(CliError::from_core)?;
            let ds = match &a.shape {
                Some(s) => ds.reshape(s).map_err(CliError::from_core)?,
                None => ds,
            };
            (ds, format!("idx images={} labels={}", i.display(), l.display()))
        }
        _ => unreachable!("checked above; clap pairs --images with --labels"),
    };
    let ck = load(&a.checkpoint)?;
    let model = &ck.model;
    let dataset = match a.limit {
        Some(n) => dataset.take(n),
        None => dataset,
    };
    check_compatible(model, &dataset)?;

    let na = evaluate(model, &dataset, None).map_err(CliError::from_core)?;
    let ra = evaluate(model, &dataset, Some(&cfg)).map_err(CliError::from_core)?;
    let mut norms = Vec::with_capacity(dataset.len());
    let mut csv = String::from("index,label,clean_prediction,adversarial_prediction,linf\n");
    for (i, s) in dataset.samples().iter().enumerate() {
        let adv = attack(model, &s.x, s.label, &cfg).map_err(CliError::from_core)?;
        let d = linf_distance(&adv, &s.x);
        norms.push(d);
        if a.perturbations.is_some() {
            let clean = argmax(&model.logits(&s.x).map_err(CliError::from_core)?);
            let adv_pred = argmax(&model.logits(&adv).map_err(CliError::from_core)?);
            csv.push_str(&format!("{i},{},{clean},{adv_pred},{d}\n", s.label));
        }
    }
    if let Some(p) = &a.perturbations {
        ensure_parent(p)?;
        write_atomic(p, csv.as_bytes()).map_err(CliError::from_core)?;
    }
    let mean = if norms.is_empty() { 0.0 } else { norms.iter().sum::<f64>() / norms.len() as f64 };
    let max = norms.iter().copied().fold(0.0, f64::max);

    let mut rep = Report::new(&format!("kronsep attack {}", describe_attack(Some(&cfg))), !a.no_timestamp);
    rep.line(format!("checkpoint: {}", a.checkpoint.display()));
    rep.line(format!("dataset: {source}, {} samples", dataset.len()));
    rep.table(
        &["NA", "RA", "mean_linf", "max_linf"],
        &[vec![num(na, 2), num(ra, 2), num(mean, 6), num(max, 6)]],
    );
    rep.kv("attack", cfg.kind);
    rep.kv("epsilon", cfg.epsilon);
    if cfg.kind == AttackKind::Pgd {
        rep.kv("steps", cfg.steps);
        rep.kv("step_size", cfg.step_size);
    }
    rep.kv("samples", dataset.len());
    rep.kv("natural_accuracy", na);
    rep.kv("robust_accuracy", ra);
    rep.kv("mean_linf", mean);
    rep.kv("max_linf", max);
    emit(&rep, a.report.as_deref())
}

fn check_compatible(model: &SepMlp, ds: &Dataset) -> Result<(), CliError> {
    if ds.shape() != model.input_shape().as_slice() {
        return Err(CliError::Data(format!(
            "dataset sample shape {:?} does not match model input shape {:?}",
            ds.shape(),
            model.input_shape()
        )));
    }
    if ds.classes() > model.classes() {
        return Err(CliError::Data(format!(
            "dataset has {} classes, model has {}",
            ds.classes(),
            model.classes()
        )));
    }
    Ok(())
}

fn cmd_inspect(a: &InspectArgs) -> Result<(), CliError> {
    let ck = load(&a.checkpoint)?;
    let model = &ck.model;
    let kappa = condition_report(model);
    let mut rep = Report::new("kronsep inspect", !a.no_timestamp);
    rep.line(format!("checkpoint: {}", a.checkpoint.display()));
    rep.line(format!("classes: {}", model.classes()));
    rep.line("");

    let mut rows = Vec::new();
    let (mut sep_total, mut dense_total) = (0, 0);
    for (i, layer) in model.layers().iter().enumerate() {
        let t = &layer.transform;
        let separable = t.param_count().separable;
        let dense = ck.reported_dense(i);
        sep_total += separable;
        dense_total += dense;
        let cr = dense as f64 / separable as f64;
        let shape_list: Vec<[usize; 2]> = t.factors().iter().map(|f| [f.rows(), f.cols()]).collect();
        rows.push(vec![
            i.to_string(),
            shapes(&shape_list),
            format!("{:?}", layer.activation).to_lowercase(),
            separable.to_string(),
            dense.to_string(),
            num(cr, 3),
            num(kappa[i], 4),
        ]);
        rep.kv(format!("layer.{i}.factors"), shapes(&shape_list));
        rep.kv(format!("layer.{i}.separable_params"), separable);
        rep.kv(format!("layer.{i}.dense_params"), dense);
        if let Some([r, c]) = ck.replaces.get(i).copied().flatten() {
            rep.kv(format!("layer.{i}.replaces"), format!("{r}x{c}"));
        }
        rep.kv(format!("layer.{i}.structural_cr"), cr);
        rep.kv(format!("layer.{i}.condition"), kappa[i]);
    }
    rep.table(&["layer", "factors", "activation", "separable", "dense", "Cr", "kappa"], &rows);
    let cr_total = dense_total as f64 / sep_total as f64;
    rep.line(format!("total: separable {sep_total} dense {dense_total} Cr {}", num(cr_total, 3)));
    rep.kv("separable_params", sep_total);
    rep.kv("dense_params", dense_total);
    rep.kv("structural_cr", cr_total);

    rep.line("");
    rep.line("factor magnitude histograms: zero count, then bin i holds |a| in [10^(-6+i/2), 10^(-5.5+i/2)); bin 0 is open below, bin 15 open above");
    let mut header = vec!["layer".to_string(), "factor".to_string(), "shape".to_string(), "zero".to_string()];
    header.extend((0..HISTOGRAM_BINS).map(|b| format!("b{b}")));
    let mut hist_rows = Vec::new();
    let mut zeros_total = 0;
    for (i, layer) in model.layers().iter().enumerate() {
        for (j, f) in layer.transform.factors().iter().enumerate() {
            let h = Histogram::of(f);
            zeros_total += h.zeros;
            let mut row = vec![i.to_string(), j.to_string(), format!("{}x{}", f.rows(), f.cols()), h.zeros.to_string()];
            row.extend(h.bins.iter().map(usize::to_string));
            hist_rows.push(row);
            let counts: Vec<String> = std::iter::once(h.zeros).chain(h.bins).map(|c| c.to_string()).collect();
            rep.kv(format!("layer.{i}.factor.{j}.histogram"), counts.join(","));
        }
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    rep.table(&header_refs, &hist_rows);
    rep.kv("zero_entries", zeros_total);
    let edges: Vec<String> = (0..HISTOGRAM_BINS).map(|b| format!("{:e}", Histogram::lower_edge(b))).collect();
    rep.kv("histogram_lower_edges", edges.join(","));
    emit(&rep, a.report.as_deref())
}

fn cmd_verify(a: &VerifyArgs) -> Result<(), CliError> {
    if a.trials == 0 {
        return Err(CliError::Usage("--trials must be positive".into()));
    }
    let opts = VerifyOptions {
        trials: a.trials,
        seed: a.seed,
        fault: a.inject_fault.map(|FaultArg::KronSign| Fault::KronSign),
    };
    let results = verify::run(&opts);
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    println!("{} passed, {} failed", results.len() - failed.len(), failed.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!("failed properties: {}", failed.join(", "))))
    }
}
