//! Command-line pipeline: forward simulation, dataset generation, model
//! training, report evaluation, ablation comparison, and gradient
//! verification. Every command is deterministic given its arguments and
//! writes its fully resolved configuration next to its outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use rtm_invert::data::{
    generate_surrogate_real, ingest_csv, sample_synthetic, BiasSpec, Dataset, SurrogateConfig,
};
use rtm_invert::eval::{ablation_csv, thread_budget, write_report, AblationRow, EvalError};
use rtm_invert::gradcheck::{check_forward_model, check_primitives};
use rtm_invert::latent::{VarRanges, NUM_VARS, VAR_NAMES};
use rtm_invert::rtm::{
    apply_plan, band_plan, diff, reference, BandSet, CoefficientPack, FixedVars, PhysVars,
    ResampleMode,
};
use rtm_invert::train::{
    evaluate_loss, train_model, ModelKind, TrainConfig, TrainError, TrainedBundle,
};
use rtm_invert::ad::Tape;

#[derive(Parser)]
#[command(
    name = "rtm-invert",
    version,
    about = "Differentiable forest reflectance model with autoencoder-style inversion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate the forward model once and emit the band spectrum as CSV.
    Simulate(SimulateArgs),
    /// Draw a noiseless synthetic dataset of uniform in-range samples.
    Sample(SampleArgs),
    /// Generate the multi-site seasonal surrogate campaign.
    Surrogate(SurrogateArgs),
    /// Read an external record CSV into a dataset directory.
    Ingest(IngestArgs),
    /// Train one model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a trained checkpoint and write the report bundle.
    Eval(EvalArgs),
    /// Train ae, ae_rtm and ae_rtm_corr on one dataset and compare test error.
    Ablation(AblationArgs),
    /// Verify tape gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

/// Failures are split by exit code: bad inputs exit 1, numeric or io
/// breakdowns during an otherwise valid run exit 2.
enum CliError {
    Validation(String),
    Runtime(String),
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{e}");
                    ExitCode::from(1)
                }
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Surrogate(a) => cmd_surrogate(a),
        Command::Ingest(a) => cmd_ingest(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablation(a) => cmd_ablation(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

// ── shared plumbing ──

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| runtime(format!("create {}: {e}", parent.display())))?;
        }
    }
    std::fs::write(path, text).map_err(|e| runtime(format!("write {}: {e}", path.display())))
}

fn write_resolved<T: Serialize>(dir: &Path, resolved: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(resolved).map_err(runtime)?;
    write_text(&dir.join("resolved_config.json"), &text)
}

fn parse_split(text: &str) -> Result<[f64; 3], CliError> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| invalid(format!("split fractions `{text}`: {e}")))?;
    if parts.len() != 3 {
        return Err(invalid(format!(
            "split fractions `{text}`: expected three comma-separated numbers"
        )));
    }
    Ok([parts[0], parts[1], parts[2]])
}

fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    Dataset::load_dir(dir, &BandSet::sentinel2()).map_err(invalid)
}

fn save_dataset(ds: &Dataset, dir: &Path) -> Result<(), CliError> {
    ds.save_dir(dir)
        .map_err(|e| runtime(format!("save dataset to {}: {e}", dir.display())))
}

/// Data-shape problems exit 1; numeric breakdowns mid-training exit 2.
fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::NanGradient { .. }
        | TrainError::DivergedLoss { .. }
        | TrainError::RangeViolation { .. }
        | TrainError::Checkpoint { .. } => runtime(e),
        other => invalid(other),
    }
}

fn eval_error(e: EvalError) -> CliError {
    match e {
        EvalError::NotPositiveDefinite { .. } | EvalError::Io { .. } => runtime(e),
        other => invalid(other),
    }
}

// ── simulate ──

#[derive(Args)]
struct SimulateArgs {
    /// JSON file mapping variable names (N, cab, cw, cm, LAI, LAIu, fc) to
    /// physical values; unspecified variables take their range midpoint.
    #[arg(long)]
    vars: Option<PathBuf>,
    /// Inline assignment like `--set LAI=3.2`; applied after the file.
    #[arg(long = "set", value_name = "NAME=VALUE")]
    set: Vec<String>,
    /// Evaluate on the tape path instead of the plain reference path.
    #[arg(long)]
    differentiable: bool,
    /// Output CSV path; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn var_index(name: &str) -> Result<usize, CliError> {
    VAR_NAMES
        .iter()
        .position(|v| *v == name)
        .ok_or_else(|| {
            invalid(format!(
                "unknown variable `{name}`; expected one of {}",
                VAR_NAMES.join(", ")
            ))
        })
}

fn simulate_spectrum(
    values: &[f64; NUM_VARS],
    fixed: &FixedVars,
    ranges: &VarRanges,
    differentiable: bool,
) -> Result<Vec<f64>, CliError> {
    let phys = PhysVars::new(
        values[0], values[1], values[2], values[3], values[4], values[5], values[6], fixed.sd,
    );
    phys.validate_in(ranges).map_err(invalid)?;
    let pack = CoefficientPack::default_pack();
    let bands = BandSet::sentinel2();
    let plan = band_plan(&bands, ResampleMode::Nearest).map_err(runtime)?;
    if !differentiable {
        let grid = reference::forest_model(&phys, fixed, pack);
        return Ok(apply_plan(&plan, &grid));
    }
    let tape = Tape::new();
    let build = || -> Result<Vec<f64>, rtm_invert::ad::AdError> {
        let leaf = |v: f64| tape.scalar(v);
        let pv = diff::DiffPhysVars::from_leaves(
            leaf(values[0])?,
            leaf(values[1])?,
            leaf(values[2])?,
            leaf(values[3])?,
            leaf(values[4])?,
            leaf(values[5])?,
            leaf(values[6])?,
            fixed.sd,
        )?;
        let nodes = diff::lift_pack_with(&tape, pack, fixed)?;
        let out = diff::forest_bands(&tape, &pv, fixed, &nodes, &std::rc::Rc::new(plan))?;
        Ok(out.value().to_vec())
    };
    build().map_err(runtime)
}

fn cmd_simulate(a: SimulateArgs) -> Result<(), CliError> {
    let ranges = VarRanges::default();
    let fixed = FixedVars::default();
    let mut values: [f64; NUM_VARS] =
        std::array::from_fn(|i| (ranges.ranges[i].0 + ranges.ranges[i].1) / 2.0);

    if let Some(path) = &a.vars {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("read {}: {e}", path.display())))?;
        let map: BTreeMap<String, f64> = serde_json::from_str(&text)
            .map_err(|e| invalid(format!("parse {}: {e}", path.display())))?;
        for (name, value) in &map {
            values[var_index(name)?] = *value;
        }
    }
    for assignment in &a.set {
        let (name, raw) = assignment
            .split_once('=')
            .ok_or_else(|| invalid(format!("`--set {assignment}`: expected NAME=VALUE")))?;
        let value: f64 = raw
            .parse()
            .map_err(|e| invalid(format!("`--set {assignment}`: {e}")))?;
        values[var_index(name.trim())?] = value;
    }

    let spectrum = simulate_spectrum(&values, &fixed, &ranges, a.differentiable)?;
    let bands = BandSet::sentinel2();
    let mut csv = String::from("band,center_nm,reflectance\n");
    for (b, r) in bands.bands.iter().zip(&spectrum) {
        csv.push_str(&format!("{},{},{r}\n", b.name, b.center_nm));
    }

    match &a.out {
        None => print!("{csv}"),
        Some(path) => {
            write_text(path, &csv)?;
            #[derive(Serialize)]
            struct Resolved<'a> {
                command: &'static str,
                variables: BTreeMap<&'static str, f64>,
                differentiable: bool,
                fixed: &'a FixedVars,
                ranges: &'a VarRanges,
            }
            let resolved = Resolved {
                command: "simulate",
                variables: VAR_NAMES.iter().copied().zip(values).collect(),
                differentiable: a.differentiable,
                fixed: &fixed,
                ranges: &ranges,
            };
            let text = serde_json::to_string_pretty(&resolved).map_err(runtime)?;
            write_text(&path.with_extension("config.json"), &text)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

// ── dataset commands ──

#[derive(Args)]
struct SampleArgs {
    /// Number of records to draw.
    #[arg(short = 'n', long = "count", default_value_t = 10_000)]
    count: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Train/val/test site fractions.
    #[arg(long, value_name = "TRAIN,VAL,TEST", default_value = "0.7,0.15,0.15")]
    split: String,
    /// Dataset output directory.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_sample(a: SampleArgs) -> Result<(), CliError> {
    let fractions = parse_split(&a.split)?;
    let fixed = FixedVars::default();
    let ranges = VarRanges::default();
    let mut ds = sample_synthetic(
        a.count,
        a.seed,
        &fixed,
        &ranges,
        CoefficientPack::default_pack(),
        &BandSet::sentinel2(),
    )
    .map_err(invalid)?;
    ds.split_by_site(fractions, a.seed).map_err(invalid)?;
    save_dataset(&ds, &a.out)?;

    #[derive(Serialize)]
    struct Resolved {
        command: &'static str,
        count: usize,
        seed: u64,
        split: [f64; 3],
    }
    write_resolved(
        &a.out,
        &Resolved {
            command: "sample",
            count: a.count,
            seed: a.seed,
            split: fractions,
        },
    )?;
    println!(
        "wrote {} records across {} sites to {}",
        ds.len(),
        ds.manifest.n_sites,
        a.out.display()
    );
    Ok(())
}

#[derive(Args)]
struct SurrogateArgs {
    #[arg(long, default_value_t = 300)]
    sites: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Gaussian band-noise standard deviation.
    #[arg(long, default_value_t = 0.005)]
    noise_sd: f64,
    /// Site-level uniform latent jitter half-width.
    #[arg(long, default_value_t = 0.05)]
    site_jitter: f64,
    /// Per-observation uniform latent wobble half-width.
    #[arg(long, default_value_t = 0.015)]
    obs_jitter: f64,
    /// Skip the type-dependent acquisition bias.
    #[arg(long)]
    no_bias: bool,
    #[arg(long, value_name = "TRAIN,VAL,TEST", default_value = "0.7,0.15,0.15")]
    split: String,
    /// Dataset output directory.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_surrogate(a: SurrogateArgs) -> Result<(), CliError> {
    let fractions = parse_split(&a.split)?;
    let cfg = SurrogateConfig {
        n_sites: a.sites,
        seed: a.seed,
        noise_sd: a.noise_sd,
        bias: if a.no_bias {
            None
        } else {
            Some(BiasSpec::default_11())
        },
        site_jitter: a.site_jitter,
        obs_jitter: a.obs_jitter,
    };
    let mut ds = generate_surrogate_real(
        &cfg,
        &FixedVars::default(),
        &VarRanges::default(),
        CoefficientPack::default_pack(),
        &BandSet::sentinel2(),
    )
    .map_err(invalid)?;
    ds.split_by_site(fractions, a.seed).map_err(invalid)?;
    save_dataset(&ds, &a.out)?;

    #[derive(Serialize)]
    struct Resolved<'a> {
        command: &'static str,
        #[serde(flatten)]
        surrogate: &'a SurrogateConfig,
        split: [f64; 3],
    }
    write_resolved(
        &a.out,
        &Resolved {
            command: "surrogate",
            surrogate: &cfg,
            split: fractions,
        },
    )?;
    println!(
        "wrote {} records across {} sites to {}",
        ds.len(),
        ds.manifest.n_sites,
        a.out.display()
    );
    Ok(())
}

#[derive(Args)]
struct IngestArgs {
    /// Input CSV: site_id,date,species,<band columns>.
    input: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, value_name = "TRAIN,VAL,TEST", default_value = "0.7,0.15,0.15")]
    split: String,
    /// Dataset output directory.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_ingest(a: IngestArgs) -> Result<(), CliError> {
    let fractions = parse_split(&a.split)?;
    let mut ds = ingest_csv(&a.input, &BandSet::sentinel2()).map_err(invalid)?;
    ds.split_by_site(fractions, a.seed).map_err(invalid)?;
    save_dataset(&ds, &a.out)?;

    #[derive(Serialize)]
    struct Resolved {
        command: &'static str,
        input: String,
        seed: u64,
        split: [f64; 3],
        rejected_rows: usize,
    }
    write_resolved(
        &a.out,
        &Resolved {
            command: "ingest",
            input: a.input.display().to_string(),
            seed: a.seed,
            split: fractions,
            rejected_rows: ds.manifest.rejected_rows,
        },
    )?;
    println!(
        "ingested {} records across {} sites ({} rows rejected)",
        ds.len(),
        ds.manifest.n_sites,
        ds.manifest.rejected_rows
    );
    Ok(())
}

// ── train / eval / ablation ──

#[derive(Args)]
struct TrainArgs {
    /// Model tag: ae, ae_rtm, ae_rtm_corr or nnreg.
    #[arg(long)]
    model: String,
    /// Dataset directory (records.csv + manifest.json).
    #[arg(long)]
    data: PathBuf,
    /// Training-config JSON; omitted fields take protocol defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Error out on NaN gradients instead of stabilizing them.
    #[arg(long)]
    strict_nan: bool,
    /// Output directory for checkpoint, history and resolved config.
    #[arg(long)]
    out: PathBuf,
}

fn parse_model(tag: &str) -> Result<ModelKind, CliError> {
    ModelKind::parse(tag).ok_or_else(|| {
        invalid(format!(
            "unknown model `{tag}`; expected one of {}",
            ModelKind::ALL
                .iter()
                .map(|k| k.name())
                .collect::<Vec<_>>()
                .join(", ")
        ))
    })
}

fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig, CliError> {
    let mut cfg = match &a.config {
        None => TrainConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| invalid(format!("read {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| invalid(format!("parse {}: {e}", path.display())))?
        }
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.patience {
        cfg.patience = v;
    }
    if let Some(v) = a.weight_decay {
        cfg.weight_decay = v;
    }
    if a.strict_nan {
        cfg.strict_nan = true;
    }
    Ok(cfg)
}

#[derive(Serialize)]
struct ResolvedTrain<'a> {
    command: &'static str,
    model: &'static str,
    data: String,
    config: &'a TrainConfig,
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let kind = parse_model(&a.model)?;
    let cfg = resolve_train_config(&a)?;
    let ds = load_dataset(&a.data)?;
    let pack = CoefficientPack::default_pack();

    let start = Instant::now();
    let result = train_model(kind, &ds, pack, &cfg).map_err(train_error)?;
    let elapsed = start.elapsed();

    std::fs::create_dir_all(&a.out)
        .map_err(|e| runtime(format!("create {}: {e}", a.out.display())))?;
    result
        .write_history_csv(&a.out.join("history.csv"))
        .map_err(train_error)?;
    let epochs_run = result.history.len();
    let stopped_early = result.stopped_early;
    let bundle = result.into_bundle(&ds, &cfg).map_err(train_error)?;
    bundle
        .save_json(&a.out.join("checkpoint.json"))
        .map_err(train_error)?;
    write_resolved(
        &a.out,
        &ResolvedTrain {
            command: "train",
            model: kind.name(),
            data: a.data.display().to_string(),
            config: &cfg,
        },
    )?;
    println!(
        "{}: {} epochs in {:.1}s, best epoch {} (val mse {:.6}){}",
        kind.name(),
        epochs_run,
        elapsed.as_secs_f64(),
        bundle.best_epoch,
        bundle.best_val_mse,
        if stopped_early {
            ", stopped early"
        } else {
            ""
        }
    );
    Ok(())
}

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint JSON.
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory to evaluate on.
    #[arg(long)]
    data: PathBuf,
    /// Report output directory.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let bundle = TrainedBundle::load_json(&a.model).map_err(invalid)?;
    let ds = load_dataset(&a.data)?;
    let pack = CoefficientPack::default_pack();
    let summary = write_report(&a.out, &bundle, &ds, pack).map_err(eval_error)?;

    #[derive(Serialize)]
    struct Resolved {
        command: &'static str,
        model: String,
        data: String,
        threads: usize,
    }
    write_resolved(
        &a.out,
        &Resolved {
            command: "eval",
            model: a.model.display().to_string(),
            data: a.data.display().to_string(),
            threads: thread_budget(),
        },
    )?;
    println!(
        "{} report: {} files in {} ({} records, {} latent clamp violations)",
        summary.model_kind.name(),
        summary.files.len(),
        a.out.display(),
        summary.n_records,
        summary.latent_clamp_violations
    );
    Ok(())
}

#[derive(Args)]
struct AblationArgs {
    /// Dataset directory (records.csv + manifest.json).
    #[arg(long)]
    data: PathBuf,
    /// Training-config JSON shared by all three runs.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory for the table, histories and checkpoints.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_ablation(a: AblationArgs) -> Result<(), CliError> {
    let train_args = TrainArgs {
        model: String::from("ae"),
        data: a.data.clone(),
        config: a.config.clone(),
        seed: a.seed,
        epochs: a.epochs,
        batch_size: None,
        learning_rate: None,
        patience: None,
        weight_decay: None,
        strict_nan: false,
        out: a.out.clone(),
    };
    let cfg = resolve_train_config(&train_args)?;
    let ds = load_dataset(&a.data)?;
    let pack = CoefficientPack::default_pack();
    std::fs::create_dir_all(&a.out)
        .map_err(|e| runtime(format!("create {}: {e}", a.out.display())))?;

    let kinds = [ModelKind::Ae, ModelKind::AeRtm, ModelKind::AeRtmCorr];
    let mut rows = Vec::new();
    for kind in kinds {
        let start = Instant::now();
        let result = train_model(kind, &ds, pack, &cfg).map_err(train_error)?;
        let test_mse = evaluate_loss(&result.params, &ds, pack, rtm_invert::data::Split::Test)
            .map_err(train_error)?;
        let last = result.history.last().expect("nonempty history");
        rows.push(AblationRow {
            model: kind,
            loss_space: "spectral",
            train_mse: last.train_mse,
            val_mse: result.best_val_mse,
            test_mse,
            best_epoch: result.best_epoch,
        });
        result
            .write_history_csv(&a.out.join(format!("history_{}.csv", kind.name())))
            .map_err(train_error)?;
        let bundle = result.into_bundle(&ds, &cfg).map_err(train_error)?;
        bundle
            .save_json(&a.out.join(format!("checkpoint_{}.json", kind.name())))
            .map_err(train_error)?;
        println!(
            "{}: test mse {:.6} ({:.1}s)",
            kind.name(),
            test_mse,
            start.elapsed().as_secs_f64()
        );
    }

    let csv = ablation_csv(&rows);
    write_text(&a.out.join("ablation.csv"), &csv)?;
    write_resolved(
        &a.out,
        &ResolvedTrain {
            command: "ablation",
            model: "ae,ae_rtm,ae_rtm_corr",
            data: a.data.display().to_string(),
            config: &cfg,
        },
    )?;
    print!("{csv}");

    let by_kind = |kind: ModelKind| {
        rows.iter()
            .find(|r| r.model == kind)
            .expect("row for each trained kind")
            .test_mse
    };
    let (ae, rtm, corr) = (
        by_kind(ModelKind::Ae),
        by_kind(ModelKind::AeRtm),
        by_kind(ModelKind::AeRtmCorr),
    );
    if !(corr < rtm && ae < rtm && corr <= 1.5 * ae) {
        return Err(runtime(format!(
            "test error ordering violated: expected ae_rtm ({rtm:.6}) worst and ae_rtm_corr ({corr:.6}) within 1.5x of ae ({ae:.6})"
        )));
    }
    println!("ordering holds: ae_rtm worst, ae_rtm_corr comparable to ae on test mse");
    Ok(())
}

// ── gradcheck ──

#[derive(Args)]
struct GradcheckArgs {
    /// Random points per tape primitive.
    #[arg(long, default_value_t = 200)]
    samples_per_op: usize,
    /// Random latent points for the full forward-model check.
    #[arg(long, default_value_t = 50)]
    points: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let primitives = check_primitives(a.samples_per_op, a.seed).map_err(runtime)?;
    println!(
        "primitives: {} comparisons, worst rel {:.3e} at {}",
        primitives.checked, primitives.worst_rel, primitives.worst_case
    );
    let forward = check_forward_model(
        a.points,
        a.seed,
        &VarRanges::default(),
        &FixedVars::default(),
        CoefficientPack::default_pack(),
        &BandSet::sentinel2(),
    )
    .map_err(runtime)?;
    println!(
        "forward model: {} comparisons, worst rel {:.3e} at {}",
        forward.checked, forward.worst_rel, forward.worst_case
    );

    let mut merged = primitives;
    merged.merge(forward);
    if merged.passed() {
        println!("gradcheck passed: {} comparisons", merged.checked);
        Ok(())
    } else {
        for f in merged.failures.iter().take(10) {
            eprintln!(
                "FAIL {}[{}]: analytic {:.6e} vs numeric {:.6e} (rel {:.3e})",
                f.what, f.coordinate, f.analytic, f.numeric, f.rel
            );
        }
        Err(runtime(format!(
            "{} of {} gradient comparisons out of tolerance",
            merged.failures.len(),
            merged.checked
        )))
    }
}
