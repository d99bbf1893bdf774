//! `agesplit`: synthetic data generation, training, evaluation, mutual
//! information estimation, gradient checks, and embedding export from one
//! binary.
//!
//! Exit codes: 0 on success, 2 for usage, config, or data problems, 3 when
//! a non-finite value surfaces in a computation.

use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use agesplit_core::backbone;
use agesplit_core::checkpoint;
use agesplit_core::config::{Precision, RunConfig};
use agesplit_core::dataio;
use agesplit_core::gradsuite;
use agesplit_core::metrics;
use agesplit_core::mi;
use agesplit_core::objectives::{age_group, NUM_AGE_GROUPS};
use agesplit_core::scalar::{Dtype, Real};
use agesplit_core::synth::{self, Dataset};
use agesplit_core::tensor::Tensor;
use agesplit_core::train::{self, FitOptions};
use agesplit_core::{Error, ParamSet, Result};

#[derive(Parser)]
#[command(
    name = "agesplit",
    version,
    about = "Disentangle speaker embeddings into age and age-invariant identity components"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic cross-age dataset plus per-tier trial lists.
    GenData(GenDataArgs),
    /// Train with the alternating two-optimizer loop.
    Train(TrainArgs),
    /// Score trial lists and report EER / minDCF per tier.
    Eval(EvalArgs),
    /// Estimate mutual information between the embedding components.
    EstimateMi(EstimateMiArgs),
    /// Finite-difference checks of every loss gradient.
    Gradcheck(GradcheckArgs),
    /// Write one embedding component for every utterance to CSV.
    ExportEmbeddings(ExportArgs),
}

/// Config file plus overrides, shared by the verbs that take a run config.
/// Overrides apply in order: file, --set pairs, then the shortcuts.
#[derive(Args)]
struct ConfigArgs {
    /// Config file; defaults apply when omitted.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key, repeatable: --set epochs=3
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Shortcut for --set seed=N.
    #[arg(long)]
    seed: Option<u64>,
    /// Shortcut for --set mode=full|no_aa|no_mim.
    #[arg(long)]
    mode: Option<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set wants KEY=VALUE, got `{s}`")))?;
            cfg.set(k, v)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(mode) = &self.mode {
            cfg.set("mode", mode)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum WhichEmbedding {
    Init,
    Age,
    Id,
}

impl WhichEmbedding {
    fn name(self) -> &'static str {
        match self {
            WhichEmbedding::Init => "init",
            WhichEmbedding::Age => "age",
            WhichEmbedding::Id => "id",
        }
    }

    fn pick<F: Real>(self, init: Tensor<F>, age: Tensor<F>, id: Tensor<F>) -> Tensor<F> {
        match self {
            WhichEmbedding::Init => init,
            WhichEmbedding::Age => age,
            WhichEmbedding::Id => id,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => train_cmd(a),
        Cmd::Eval(a) => eval_cmd(a),
        Cmd::EstimateMi(a) => estimate_mi_cmd(a),
        Cmd::Gradcheck(a) => gradcheck_cmd(a),
        Cmd::ExportEmbeddings(a) => export_cmd(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

// ── path plumbing ───────────────────────────────────────────────────────

/// Relative paths resolve under $AGESPLIT_DATA_ROOT when it is set.
fn apply_root(p: PathBuf) -> PathBuf {
    if p.is_relative() {
        if let Ok(root) = std::env::var("AGESPLIT_DATA_ROOT") {
            if !root.is_empty() {
                return Path::new(&root).join(p);
            }
        }
    }
    p
}

fn resolve_dir(flag: Option<&Path>, fallback: Option<&str>, hint: &str) -> Result<PathBuf> {
    let p = match (flag, fallback) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(s)) => PathBuf::from(s),
        (None, None) => return Err(Error::Invalid(format!("no directory given; {hint}"))),
    };
    Ok(apply_root(p))
}

fn rows_range<F: Real>(t: &Tensor<F>, lo: usize, hi: usize) -> Result<Tensor<F>> {
    let d = t.shape()[1];
    Tensor::from_rows(hi - lo, d, t.data()[lo * d..hi * d].to_vec())
}

fn embed_all<F: Real>(
    params: &ParamSet<F>,
    ds: &Dataset<F>,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    let triples = backbone::embed_batch(params, &ds.items)?;
    backbone::stack_triples(&triples)
}

// ── gen-data ────────────────────────────────────────────────────────────

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output dataset directory; defaults to data_dir from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = a.cfg.build()?;
    let dir = resolve_dir(
        a.out.as_deref(),
        cfg.data_dir.as_deref(),
        "pass --out or set data_dir in the config",
    )?;
    let ds: Dataset<f32> = synth::generate(&cfg)?;
    fs::create_dir_all(&dir)?;
    dataio::save_dataset(&ds, &dir)?;
    fs::write(dir.join("config.cfg"), cfg.emit())?;
    println!("# agesplit gen-data seed={} out={}", cfg.seed, dir.display());
    println!(
        "utterances {} speakers {} frames {} channels {}",
        ds.len(),
        ds.num_speakers(),
        cfg.frames,
        cfg.channels
    );
    for (tier, min_gap) in synth::TRIAL_TIERS {
        let trials = synth::build_trials(&ds, tier, min_gap, cfg.trial_match_group, cfg.seed)?;
        let n_target = trials.iter().filter(|t| t.target).count();
        dataio::write_trials(&dir.join(format!("trials_{tier}.txt")), &ds, &trials)?;
        println!(
            "trials {tier} targets {n_target} nontargets {}",
            trials.len() - n_target
        );
    }
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────────

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory for the log and checkpoints.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let cfg = a.cfg.build()?;
    match cfg.precision {
        Precision::F32 => train_run::<f32>(&cfg, a),
        Precision::F64 => train_run::<f64>(&cfg, a),
    }
}

fn train_run<F: Real>(cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    let data = resolve_dir(
        a.data.as_deref(),
        cfg.data_dir.as_deref(),
        "pass --data or set data_dir in the config",
    )?;
    let out = resolve_dir(
        a.out.as_deref(),
        cfg.out_dir.as_deref(),
        "pass --out or set out_dir in the config",
    )?;
    let ds: Dataset<F> = dataio::load_dataset(&data)?;
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.cfg"), cfg.emit())?;
    println!(
        "# agesplit train seed={} mode={} precision={} data={} out={}",
        cfg.seed,
        cfg.mode.as_str(),
        cfg.precision.as_str(),
        data.display(),
        out.display()
    );
    println!("{}", train::LOG_HEADER);

    // Log lines and the rolling checkpoint land on disk as each epoch
    // finishes, so a later non-finite abort still leaves the last good
    // state behind.
    let mut log = File::create(out.join("train.log"))?;
    writeln!(log, "{}", train::LOG_HEADER)?;
    log.flush()?;
    let last = out.join("last.ckpt");
    let outcome = train::train(cfg, &ds, |_, line, ckpt| {
        println!("{line}");
        writeln!(log, "{line}")?;
        log.flush()?;
        checkpoint::save(&last, ckpt)
    })?;

    let model = out.join("model.ckpt");
    checkpoint::save(&model, &outcome.checkpoint)?;
    println!(
        "# saved {} after {} epochs, {} steps",
        model.display(),
        outcome.epochs_run,
        outcome.steps
    );
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────────

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Dataset directory; supplies default trial lists.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to embed with.
    #[arg(long, conflicts_with = "embeddings")]
    checkpoint: Option<PathBuf>,
    /// Precomputed CSV from export-embeddings, instead of a checkpoint.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Trial list files; defaults to every trials_<tier>.txt in the data
    /// directory.
    #[arg(long)]
    trials: Vec<PathBuf>,
    /// Embedding component scored when a checkpoint is given.
    #[arg(long, value_enum, default_value_t = WhichEmbedding::Id)]
    which: WhichEmbedding,
    /// Also fit the linear age probe on x_init and the scored component.
    #[arg(long)]
    probe: bool,
    /// Write the report to this file as well as stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let cfg = a.cfg.build()?;
    match (&a.checkpoint, &a.embeddings) {
        (Some(ckpt), None) => {
            let ckpt = apply_root(ckpt.clone());
            match checkpoint::peek_dtype(&ckpt)? {
                Dtype::F32 => eval_from_checkpoint::<f32>(&cfg, a, &ckpt),
                Dtype::F64 => eval_from_checkpoint::<f64>(&cfg, a, &ckpt),
            }
        }
        (None, Some(csv)) => {
            if a.probe {
                return Err(Error::Invalid(
                    "--probe needs --checkpoint; an embedding CSV has no x_init to compare".into(),
                ));
            }
            let csv = apply_root(csv.clone());
            let (ids, _, ages, rows) = dataio::read_embeddings(&csv)?;
            let trial_files = trial_files(a, &cfg)?;
            let header = format!(
                "# agesplit eval seed={} embeddings={} component=as-exported",
                cfg.seed,
                csv.display()
            );
            score_and_report(&cfg, a, &header, &ids, &ages, &rows, None, &trial_files)
        }
        (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
        (None, None) => Err(Error::Invalid(
            "eval needs --checkpoint or --embeddings".into(),
        )),
    }
}

fn eval_from_checkpoint<F: Real>(cfg: &RunConfig, a: &EvalArgs, ckpt: &Path) -> Result<()> {
    let data = resolve_dir(
        a.data.as_deref(),
        cfg.data_dir.as_deref(),
        "pass --data or set data_dir in the config",
    )?;
    let ds: Dataset<F> = dataio::load_dataset(&data)?;
    let params = checkpoint::load::<F>(ckpt)?.model_params();
    let (x_init, x_age, x_id) = embed_all(&params, &ds)?;
    let ids: Vec<String> = ds.items.iter().map(|s| s.utterance_id.clone()).collect();
    let ages: Vec<f64> = ds.items.iter().map(|s| s.age_years).collect();
    let picked = a.which.pick(x_init.clone(), x_age, x_id);
    let trial_files = trial_files(a, cfg)?;
    let header = format!(
        "# agesplit eval seed={} checkpoint={} component=x_{}",
        cfg.seed,
        ckpt.display(),
        a.which.name()
    );
    score_and_report(
        cfg,
        a,
        &header,
        &ids,
        &ages,
        &picked,
        a.probe.then_some(&x_init),
        &trial_files,
    )
}

/// Trial lists from flags, or every tier file present in the data dir.
fn trial_files(a: &EvalArgs, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    if !a.trials.is_empty() {
        return Ok(a.trials.iter().cloned().map(apply_root).collect());
    }
    let data = resolve_dir(
        a.data.as_deref(),
        cfg.data_dir.as_deref(),
        "pass --trials, or --data to use its tier lists",
    )?;
    let mut found = Vec::new();
    for (tier, _) in synth::TRIAL_TIERS {
        let p = data.join(format!("trials_{tier}.txt"));
        if p.exists() {
            found.push(p);
        }
    }
    if found.is_empty() {
        return Err(Error::Data(format!(
            "no trials_<tier>.txt files under {}",
            data.display()
        )));
    }
    Ok(found)
}

fn trial_set_name(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    stem.strip_prefix("trials_").map(str::to_string).unwrap_or(stem)
}

#[allow(clippy::too_many_arguments)]
fn score_and_report<F: Real>(
    cfg: &RunConfig,
    a: &EvalArgs,
    header: &str,
    ids: &[String],
    ages: &[f64],
    rows: &Tensor<F>,
    probe_init: Option<&Tensor<F>>,
    trial_files: &[PathBuf],
) -> Result<()> {
    let index = ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i))
        .collect();
    let mut report = Vec::new();
    for path in trial_files {
        let trials = dataio::read_trials(path, &index)?;
        let (targets, nontargets) = metrics::score_trials(rows, &trials)?;
        let eer = metrics::eer(&targets, &nontargets)?;
        let dcf = metrics::min_dcf(&targets, &nontargets, cfg.p_target, cfg.c_miss, cfg.c_fa)?;
        report.push(dataio::ReportRow {
            trial_set: trial_set_name(path),
            eer_pct: eer.eer * 100.0,
            min_dcf: dcf.min_dcf,
            n_target: targets.len(),
            n_nontarget: nontargets.len(),
        });
    }
    println!("{header}");
    print!("{}", dataio::format_report(&report));
    if let Some(out) = &a.out {
        let out = apply_root(out.clone());
        dataio::write_report(&out, &report)?;
    }
    if a.probe {
        let groups: Vec<usize> = ages.iter().map(|&y| age_group(y)).collect();
        if let Some(x_init) = probe_init {
            let p = metrics::age_probe(x_init, ids, &groups, NUM_AGE_GROUPS)?;
            println!(
                "# probe x_init acc_pct {:.2} fit {} holdout {}",
                p.accuracy_pct, p.n_fit, p.n_holdout
            );
        }
        let p = metrics::age_probe(rows, ids, &groups, NUM_AGE_GROUPS)?;
        println!(
            "# probe x_{} acc_pct {:.2} fit {} holdout {}",
            a.which.name(),
            p.accuracy_pct,
            p.n_fit,
            p.n_holdout
        );
    }
    Ok(())
}

// ── estimate-mi ─────────────────────────────────────────────────────────

#[derive(Args)]
struct EstimateMiArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Checkpoint whose embeddings get a freshly fitted estimator.
    #[arg(long, required_unless_present = "gaussian")]
    checkpoint: Option<PathBuf>,
    /// Dataset directory for the checkpoint path.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Self-test on correlated Gaussian pairs with a known answer.
    #[arg(long, conflicts_with_all = ["checkpoint", "data"])]
    gaussian: bool,
    /// Gaussian pair dimension.
    #[arg(long, default_value_t = 4)]
    dim: usize,
    /// Per-dimension correlation of the Gaussian pairs.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    rho: f64,
    /// Number of Gaussian sample pairs.
    #[arg(long, default_value_t = 50_000)]
    n: usize,
    /// Adam steps when fitting the fresh estimator.
    #[arg(long, default_value_t = 2000)]
    fit_steps: usize,
    #[arg(long, default_value_t = 256)]
    fit_batch: usize,
    /// Fitting rate; training's own estimator rate is far too slow here.
    #[arg(long, default_value_t = 1e-3)]
    fit_lr: f64,
    /// Standardize embeddings per dimension (fit-slice statistics) so
    /// estimates are comparable across checkpoints with different scales.
    #[arg(long)]
    standardize: bool,
}

fn estimate_mi_cmd(a: &EstimateMiArgs) -> Result<()> {
    let cfg = a.cfg.build()?;
    let opts = FitOptions {
        steps: a.fit_steps,
        batch_size: a.fit_batch,
        lr: a.fit_lr,
        weight_decay: 0.0,
        seed: cfg.seed,
    };
    if a.gaussian {
        if a.dim == 0 {
            return Err(Error::Invalid("--dim must be positive".into()));
        }
        let rho = vec![a.rho; a.dim];
        let (x, y) = synth::gaussian_pairs::<f64>(a.n, &rho, cfg.seed)?;
        println!(
            "# agesplit estimate-mi seed={} gaussian dim={} rho={} n={} fit_steps={} fit_batch={} fit_lr={}",
            cfg.seed, a.dim, a.rho, a.n, opts.steps, opts.batch_size, opts.lr
        );
        // analytic value is nonnegative; max keeps -0.0 out of the output
        println!("true {:.6}", synth::gaussian_mi(&rho).max(0.0));
        let (params, _) = train::fit_estimator(&x, &y, &opts)?;
        println!("mi {:.6}", mi::estimate_mi(&params, &x, &y)?);
        return Ok(());
    }
    let ckpt = apply_root(a.checkpoint.clone().expect("enforced by clap"));
    match checkpoint::peek_dtype(&ckpt)? {
        Dtype::F32 => estimate_from_checkpoint::<f32>(&cfg, a, &ckpt, &opts),
        Dtype::F64 => estimate_from_checkpoint::<f64>(&cfg, a, &ckpt, &opts),
    }
}

/// The comparable-across-checkpoints protocol: a fresh estimator is fitted
/// on the training slice of this checkpoint's own embeddings, then read
/// out on the held-out tail, the same split training reports on.
fn estimate_from_checkpoint<F: Real>(
    cfg: &RunConfig,
    a: &EstimateMiArgs,
    ckpt: &Path,
    opts: &FitOptions,
) -> Result<()> {
    let data = resolve_dir(
        a.data.as_deref(),
        cfg.data_dir.as_deref(),
        "pass --data or set data_dir in the config",
    )?;
    let ds: Dataset<F> = dataio::load_dataset(&data)?;
    let n = ds.len();
    if cfg.mi_holdout >= n {
        return Err(Error::Data(format!(
            "mi_holdout {} leaves no fitting rows out of {n}",
            cfg.mi_holdout
        )));
    }
    let split = n - cfg.mi_holdout;
    let params = checkpoint::load::<F>(ckpt)?.model_params();
    let (_, x_age, x_id) = embed_all(&params, &ds)?;
    let (mut fit_id, mut fit_age) = (rows_range(&x_id, 0, split)?, rows_range(&x_age, 0, split)?);
    let (mut ho_id, mut ho_age) = (rows_range(&x_id, split, n)?, rows_range(&x_age, split, n)?);
    if a.standardize {
        let (sid, sage) = (mi::Standardizer::fit(&fit_id)?, mi::Standardizer::fit(&fit_age)?);
        fit_id = sid.apply(&fit_id)?;
        ho_id = sid.apply(&ho_id)?;
        fit_age = sage.apply(&fit_age)?;
        ho_age = sage.apply(&ho_age)?;
    }
    println!(
        "# agesplit estimate-mi seed={} checkpoint={} data={}",
        cfg.seed,
        ckpt.display(),
        data.display()
    );
    println!(
        "# fit rows={split} holdout={} steps={} batch={} lr={}",
        n - split,
        opts.steps,
        opts.batch_size,
        opts.lr
    );
    let (fitted, _) = train::fit_estimator(&fit_id, &fit_age, opts)?;
    println!("mi {:.6}", mi::estimate_mi(&fitted, &ho_id, &ho_age)?);
    Ok(())
}

// ── gradcheck ───────────────────────────────────────────────────────────

#[derive(Args)]
struct GradcheckArgs {
    /// Single case to run; all of them when omitted.
    #[arg(long)]
    case: Option<String>,
    /// Random parameter draws checked per case.
    #[arg(long, default_value_t = 10)]
    points: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = gradsuite::DEFAULT_EPS)]
    eps: f64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn gradcheck_cmd(a: &GradcheckArgs) -> Result<()> {
    println!(
        "# agesplit gradcheck seed={} points={} eps={:e} tol={:e}",
        a.seed, a.points, a.eps, a.tol
    );
    let reports = match &a.case {
        Some(name) => vec![gradsuite::check_case(name, a.seed, a.points, a.eps)?],
        None => gradsuite::check_all(a.seed, a.points, a.eps)?,
    };
    let mut failed: Option<&gradsuite::CaseReport> = None;
    for r in &reports {
        println!(
            "{} max_rel_err {:.3e} coords {} worst {}[{}]",
            r.name, r.max_rel_err, r.coords_checked, r.worst_param, r.worst_coord
        );
        if r.max_rel_err > a.tol && failed.is_none() {
            failed = Some(r);
        }
    }
    match failed {
        Some(r) => Err(Error::Invalid(format!(
            "gradient check failed: {} at {:.3e} exceeds tol {:.1e}",
            r.name, r.max_rel_err, a.tol
        ))),
        None => {
            println!("ok {} cases", reports.len());
            Ok(())
        }
    }
}

// ── export-embeddings ───────────────────────────────────────────────────

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Component to export.
    #[arg(long, value_enum, default_value_t = WhichEmbedding::Id)]
    which: WhichEmbedding,
}

fn export_cmd(a: &ExportArgs) -> Result<()> {
    let cfg = a.cfg.build()?;
    let ckpt = apply_root(a.checkpoint.clone());
    match checkpoint::peek_dtype(&ckpt)? {
        Dtype::F32 => export_run::<f32>(&cfg, a, &ckpt),
        Dtype::F64 => export_run::<f64>(&cfg, a, &ckpt),
    }
}

fn export_run<F: Real>(cfg: &RunConfig, a: &ExportArgs, ckpt: &Path) -> Result<()> {
    let data = resolve_dir(
        a.data.as_deref(),
        cfg.data_dir.as_deref(),
        "pass --data or set data_dir in the config",
    )?;
    let ds: Dataset<F> = dataio::load_dataset(&data)?;
    let params = checkpoint::load::<F>(ckpt)?.model_params();
    let (x_init, x_age, x_id) = embed_all(&params, &ds)?;
    let rows = a.which.pick(x_init, x_age, x_id);
    let out = apply_root(a.out.clone());
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let dim = rows.shape()[1];
    dataio::write_embeddings(&out, &ds, &rows)?;
    println!(
        "# agesplit export-embeddings which=x_{} rows={} dim={} out={}",
        a.which.name(),
        ds.len(),
        dim,
        out.display()
    );
    Ok(())
}
