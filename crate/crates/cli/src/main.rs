//! Command-line driver: binds data generation, training, evaluation,
//! the confidence pipelines, and the gradient certification suite into
//! reproducible runs.
//!
//! Every command that produces artifacts writes them under a fresh run
//! directory named `<config-hash>-<unix-time>` containing the resolved
//! config snapshot, a manifest with a version string, and the emitted
//! reports, then prints a one-line summary. Exit codes: 0 success,
//! 1 validation error (bad flags, bad config, mismatched inputs),
//! 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use poseconf::autodiff::Tape;
use poseconf::body::Skeleton;
use poseconf::checkpoint::Checkpoint;
use poseconf::config::{derive_seed, Config};
use poseconf::data::{generate, make_sequence, SampleBatch, SourceSpec};
use poseconf::losses::Variant;
use poseconf::pipeline;
use poseconf::train::{
    certify_gradients, evaluate, log_to_jsonl, model_from_checkpoint, train_until, Datasets,
};

#[derive(Parser)]
#[command(name = "poseconf", version, about = "Pose regression with per-sample confidence")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured dataset splits and write them to disk.
    GenData(CommonArgs),
    /// Train a model, then evaluate it on the test split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one dataset split.
    Eval(EvalArgs),
    /// One self-training round: curate, finetune, report.
    Bootstrap(BootstrapArgs),
    /// Gated sequence inference with gap infilling.
    Infill(InfillArgs),
    /// Bootstrap once per τ grid value and report the PVE curve.
    SweepThreshold(CheckpointArgs),
    /// Certify analytic gradients against finite differences.
    GradCheck(CommonArgs),
    /// Print the body model constants as JSON.
    SkeletonDump,
    /// Train every requested variant across seeds and compare metrics.
    CompareVariants(CompareArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML config file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root directory for run outputs.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Dot-path config overrides, e.g. train.lr=3e-4.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Load datasets from a gen-data directory instead of regenerating.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Resume from a checkpoint written under the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct CheckpointArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint to start from.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Load datasets from a gen-data directory instead of regenerating.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    inputs: CheckpointArgs,
    /// Split to evaluate. [possible: train, val, test]
    #[arg(long, default_value = "test")]
    dataset: String,
}

#[derive(Args)]
struct BootstrapArgs {
    #[command(flatten)]
    inputs: CheckpointArgs,
    /// Acceptance threshold; defaults to the configured mode (tuned or fixed).
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Args)]
struct InfillArgs {
    #[command(flatten)]
    inputs: CheckpointArgs,
    /// Rejection threshold in (0,1); defaults to the configured mode.
    #[arg(long)]
    tau_hi: Option<f64>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated variant list (at least two).
    #[arg(long, default_value = "gauss,nflow,poco")]
    variants: String,
    /// Seeds per variant.
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    /// Load datasets from a gen-data directory instead of regenerating.
    #[arg(long)]
    data: Option<PathBuf>,
}

/// Failures split by exit code: flag/config/input problems are
/// validation (1), everything that breaks mid-run is runtime (2).
enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

fn validation(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Validation(e.into())
}

/// Library errors carry the split: config parsing, file formats, and
/// checkpoint/config mismatches mean the inputs were wrong; the rest
/// mean the run itself failed.
fn classify(e: poseconf::Error) -> Failure {
    match &e {
        poseconf::Error::Config(_)
        | poseconf::Error::Format { .. }
        | poseconf::Error::CheckpointMismatch(_) => Failure::Validation(e.into()),
        _ => Failure::Runtime(e.into()),
    }
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match dispatch(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> std::result::Result<String, Failure> {
    match cmd {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Bootstrap(args) => cmd_bootstrap(args),
        Command::Infill(args) => cmd_infill(args),
        Command::SweepThreshold(args) => cmd_sweep(args),
        Command::GradCheck(args) => cmd_grad_check(args),
        Command::SkeletonDump => skeleton_dump().map_err(runtime),
        Command::CompareVariants(args) => cmd_compare(args),
    }
}

/// A run directory in progress: artifacts accumulate, `finish` seals
/// the manifest.
struct Run {
    dir: PathBuf,
    command: &'static str,
    config_hash: String,
    artifacts: Vec<String>,
}

impl Run {
    fn create(out_root: &Path, cfg: &Config, command: &'static str) -> Result<Run> {
        let ts = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .expect("clock before 1970")
            .as_secs();
        let hash = cfg.hash();
        let mut dir = out_root.join(format!("{hash}-{ts}"));
        let mut bump = 1;
        while dir.exists() {
            bump += 1;
            dir = out_root.join(format!("{hash}-{ts}-{bump}"));
        }
        std::fs::create_dir_all(&dir)
            .with_context(|| format!("creating run directory {}", dir.display()))?;
        let mut run = Run {
            dir,
            command,
            config_hash: hash,
            artifacts: Vec::new(),
        };
        run.write("config.toml", &cfg.to_toml_string())?;
        Ok(run)
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        std::fs::write(self.dir.join(name), contents)
            .with_context(|| format!("writing {name}"))?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    fn note(&mut self, name: &str) {
        self.artifacts.push(name.to_string());
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes the manifest and returns the run directory.
    fn finish(mut self) -> Result<PathBuf> {
        let manifest = serde_json::json!({
            "version": version_string(),
            "command": self.command,
            "config_hash": self.config_hash,
            "artifacts": self.artifacts,
        });
        self.write("manifest.json", &serde_json::to_string_pretty(&manifest)?)?;
        Ok(self.dir)
    }
}

/// `git describe`-style version: the working tree's description when
/// available, otherwise the crate version.
fn version_string() -> String {
    let described = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty());
    match described {
        Some(d) => format!("poseconf-v{}-{d}", env!("CARGO_PKG_VERSION")),
        None => format!("poseconf-v{}", env!("CARGO_PKG_VERSION")),
    }
}

fn load_config(common: &CommonArgs) -> std::result::Result<Config, Failure> {
    Config::load(common.config.as_deref(), &common.overrides).map_err(classify)
}

fn load_datasets(cfg: &Config, dir: Option<&Path>) -> std::result::Result<Datasets, Failure> {
    match dir {
        Some(d) => Datasets::load(d, cfg).map_err(classify),
        None => Ok(Datasets::generate(cfg)),
    }
}

fn load_checkpoint(path: &Path) -> std::result::Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(classify)
}

/// Unlabeled pool for the self-training commands: the configured
/// source mixture, drawn fresh with pool-specific seeds.
fn gen_pool(cfg: &Config) -> SampleBatch {
    let ratios = cfg.mix_ratios();
    let sk = Skeleton::toy();
    let mut parts = Vec::new();
    for (i, sc) in cfg.data.sources.iter().enumerate() {
        let want = (ratios[i] * cfg.pipeline.pool_size as f64).round() as usize;
        if want == 0 {
            continue;
        }
        let spec = SourceSpec::from_config(sc);
        let seed = derive_seed(cfg.seed, &format!("pool/{}", sc.name));
        parts.push(generate(&spec, &sk, want, seed, i as u16));
    }
    let refs: Vec<&SampleBatch> = parts.iter().collect();
    SampleBatch::concat(&refs)
}

fn gen_data(args: CommonArgs) -> std::result::Result<String, Failure> {
    let cfg = load_config(&args)?;
    let mut run = Run::create(&args.out, &cfg, "gen-data").map_err(runtime)?;
    let data = Datasets::generate(&cfg);
    let data_dir = run.path("data");
    data.save(&data_dir, &cfg).map_err(runtime)?;
    for f in ["train.crds", "val.crds", "test.crds", "manifest.json"] {
        run.note(&format!("data/{f}"));
    }
    let n_train: usize = data.train.iter().map(|b| b.len()).sum();
    let dir = run.finish().map_err(runtime)?;
    Ok(format!(
        "gen-data: {} train / {} val / {} test samples → {}",
        n_train,
        data.val.len(),
        data.test.len(),
        dir.display()
    ))
}

fn cmd_train(args: TrainArgs) -> std::result::Result<String, Failure> {
    let cfg = load_config(&args.common)?;
    let data = load_datasets(&cfg, args.data.as_deref())?;
    let resume = match &args.resume {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    let mut run = Run::create(&args.common.out, &cfg, "train").map_err(runtime)?;

    let out = train_until(&cfg, &data, resume.as_ref(), None).map_err(classify)?;
    run.write("log.jsonl", &log_to_jsonl(&out.log).map_err(runtime)?)
        .map_err(runtime)?;
    out.checkpoint
        .save(&run.path("final.ckpt"))
        .map_err(runtime)?;
    run.note("final.ckpt");

    if let Some(iter) = out.nan_abort {
        let dir = run.finish().map_err(runtime)?;
        return Err(runtime(anyhow!(
            "training aborted on a non-finite loss at iteration {iter}; \
             last finite checkpoint and log are under {}",
            dir.display()
        )));
    }

    let mut tape = Tape::new();
    let model = model_from_checkpoint(&mut tape, &cfg, &out.checkpoint).map_err(classify)?;
    let bundle = evaluate(&mut tape, &model, &data.test, false).map_err(runtime)?;
    run.write("report.json", &bundle.report.to_json().map_err(runtime)?)
        .map_err(runtime)?;
    run.write("scatter.csv", &bundle.report.scatter_csv(false))
        .map_err(runtime)?;
    run.write(
        "occlusion.json",
        &serde_json::to_string_pretty(&bundle.per_occlusion).map_err(runtime)?,
    )
    .map_err(runtime)?;

    let dir = run.finish().map_err(runtime)?;
    Ok(format!(
        "train[{}]: {} iters, test mpjpe {:.2} mm, pve {:.2} mm, pcc {:.3} → {}",
        cfg.train.variant.name(),
        out.checkpoint.iteration,
        bundle.report.mpjpe,
        bundle.report.pve,
        bundle.report.pcc,
        dir.display()
    ))
}

fn cmd_eval(args: EvalArgs) -> std::result::Result<String, Failure> {
    let cfg = load_config(&args.inputs.common)?;
    let data = load_datasets(&cfg, args.inputs.data.as_deref())?;
    let split: SampleBatch = match args.dataset.as_str() {
        "train" => {
            let refs: Vec<&SampleBatch> = data.train.iter().collect();
            SampleBatch::concat(&refs)
        }
        "val" => data.val.clone(),
        "test" => data.test.clone(),
        other => {
            return Err(validation(anyhow!(
                "unknown dataset `{other}`; expected train, val, or test"
            )))
        }
    };
    let ckpt = load_checkpoint(&args.inputs.checkpoint)?;
    let mut run = Run::create(&args.inputs.common.out, &cfg, "eval").map_err(runtime)?;

    let mut tape = Tape::new();
    let model = model_from_checkpoint(&mut tape, &cfg, &ckpt).map_err(classify)?;
    let bundle = evaluate(&mut tape, &model, &split, false).map_err(runtime)?;
    run.write("report.json", &bundle.report.to_json().map_err(runtime)?)
        .map_err(runtime)?;
    run.write("scatter.csv", &bundle.report.scatter_csv(false))
        .map_err(runtime)?;
    run.write(
        "occlusion.json",
        &serde_json::to_string_pretty(&bundle.per_occlusion).map_err(runtime)?,
    )
    .map_err(runtime)?;

    let dir = run.finish().map_err(runtime)?;
    Ok(format!(
        "eval[{}]: {} samples, mpjpe {:.2} mm, pa-mpjpe {:.2} mm, pve {:.2} mm, pcc {:.3} → {}",
        args.dataset,
        bundle.report.n,
        bundle.report.mpjpe,
        bundle.report.pa_mpjpe,
        bundle.report.pve,
        bundle.report.pcc,
        dir.display()
    ))
}

fn cmd_bootstrap(args: BootstrapArgs) -> std::result::Result<String, Failure> {
    let cfg = load_config(&args.inputs.common)?;
    if let Some(tau) = args.tau {
        if !(0.0..=1.0).contains(&tau) {
            return Err(validation(anyhow!("--tau {tau} outside [0,1]")));
        }
    }
    let data = load_datasets(&cfg, args.inputs.data.as_deref())?;
    let ckpt = load_checkpoint(&args.inputs.checkpoint)?;
    let pool = gen_pool(&cfg);
    let mut run = Run::create(&args.inputs.common.out, &cfg, "bootstrap").map_err(runtime)?;

    let tau = match args.tau {
        Some(t) => t,
        None => pipeline::resolve_tau(&cfg, &data, &pool, &ckpt).map_err(classify)?,
    };
    let (new_ckpt, report) = pipeline::bootstrap(&cfg, &data, &pool, tau, &ckpt).map_err(classify)?;
    run.write("bootstrap.json", &report.to_json().map_err(runtime)?)
        .map_err(runtime)?;
    new_ckpt
        .save(&run.path("finetuned.ckpt"))
        .map_err(runtime)?;
    run.note("finetuned.ckpt");

    let dir = run.finish().map_err(runtime)?;
    let warn = report
        .warning
        .as_ref()
        .map(|w| format!(" [warning: {w}]"))
        .unwrap_or_default();
    Ok(format!(
        "bootstrap: τ={:.3}, accepted {}/{}, pve {:.2} → {:.2} mm{} → {}",
        tau,
        report.accepted,
        report.accepted + report.rejected,
        report.pve_before,
        report.pve_after,
        warn,
        dir.display()
    ))
}

fn cmd_sweep(args: CheckpointArgs) -> std::result::Result<String, Failure> {
    let cfg = load_config(&args.common)?;
    let data = load_datasets(&cfg, args.data.as_deref())?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let pool = gen_pool(&cfg);
    let mut run = Run::create(&args.common.out, &cfg, "sweep-threshold").map_err(runtime)?;

    let rows = pipeline::sweep_threshold(&cfg, &data, &pool, &ckpt).map_err(classify)?;
    run.write("sweep.csv", &pipeline::sweep_csv(&rows))
        .map_err(runtime)?;

    let best = rows
        .iter()
        .min_by(|a, b| a.test_pve.partial_cmp(&b.test_pve).expect("finite PVE"))
        .expect("nonempty grid");
    let dir = run.finish().map_err(runtime)?;
    Ok(format!(
        "sweep-threshold: {} τ values, best τ={:.3} (accepted {}, test pve {:.2} mm) → {}",
        rows.len(),
        best.tau,
        best.accepted,
        best.test_pve,
        dir.display()
    ))
}

fn cmd_infill(args: InfillArgs) -> std::result::Result<String, Failure> {
    let cfg = load_config(&args.inputs.common)?;
    if let Some(t) = args.tau_hi {
        if !(0.0 < t && t < 1.0) {
            return Err(validation(anyhow!("--tau-hi {t} outside (0,1)")));
        }
    }
    let data = load_datasets(&cfg, args.inputs.data.as_deref())?;
    let ckpt = load_checkpoint(&args.inputs.checkpoint)?;
    let mut run = Run::create(&args.inputs.common.out, &cfg, "infill").map_err(runtime)?;

    let mut tape = Tape::new();
    let model = model_from_checkpoint(&mut tape, &cfg, &ckpt).map_err(classify)?;
    let tau_hi = match args.tau_hi {
        Some(t) => t,
        None => pipeline::resolve_tau_hi(&cfg, &mut tape, &model, &data.val).map_err(classify)?,
    };

    // Sequences come from the last configured source — conventionally
    // the hardest — so the occlusion window has someplace to bite.
    let spec = SourceSpec::from_config(cfg.data.sources.last().expect("validated nonempty"));
    let sk = Skeleton::toy();
    let mut results = Vec::new();
    let mut csv = String::from("sequence,window_start,window_len,gated_mpjpe,raw_mpjpe,infilled\n");
    let (mut gated_sum, mut raw_sum) = (0.0, 0.0);
    for i in 0..cfg.pipeline.n_sequences {
        let seed = derive_seed(cfg.seed, &format!("sequence/{i}"));
        let (seq, info) = make_sequence(
            &spec,
            &sk,
            cfg.pipeline.seq_len,
            cfg.pipeline.seq_keyframes,
            seed,
        );
        let gated = pipeline::infill_sequence(&mut tape, &model, &seq, tau_hi).map_err(classify)?;
        // τ_hi = 1 rejects nothing, so this is the ungated baseline.
        let raw = pipeline::infill_sequence(&mut tape, &model, &seq, 1.0).map_err(classify)?;
        let gw = gated.window_mpjpe(info.window_start, info.window_len);
        let rw = raw.window_mpjpe(info.window_start, info.window_len);
        let infilled = gated.frames.iter().filter(|f| f.infilled).count();
        csv.push_str(&format!(
            "{i},{},{},{gw},{rw},{infilled}\n",
            info.window_start, info.window_len
        ));
        gated_sum += gw;
        raw_sum += rw;
        results.push(gated);
    }
    run.write(
        "sequences.json",
        &serde_json::to_string_pretty(&results).map_err(runtime)?,
    )
    .map_err(runtime)?;
    run.write("infill.csv", &csv).map_err(runtime)?;

    let n = cfg.pipeline.n_sequences as f64;
    let dir = run.finish().map_err(runtime)?;
    Ok(format!(
        "infill: {} sequences, τ_hi={:.3}, window mpjpe {:.2} mm gated vs {:.2} mm raw → {}",
        cfg.pipeline.n_sequences,
        tau_hi,
        gated_sum / n,
        raw_sum / n,
        dir.display()
    ))
}

fn cmd_grad_check(args: CommonArgs) -> std::result::Result<String, Failure> {
    let cfg = load_config(&args)?;
    let mut run = Run::create(&args.out, &cfg, "grad-check").map_err(runtime)?;

    let spec = SourceSpec::from_config(&cfg.data.sources[0]);
    let batch = generate(
        &spec,
        &Skeleton::toy(),
        8,
        derive_seed(cfg.seed, "gradcheck/batch"),
        0,
    );
    println!("{:<12} {:>12} {:>8}  worst parameter", "variant", "max rel err", "checked");
    let mut rows = Vec::new();
    let mut all_ok = true;
    for variant in Variant::ALL {
        let report = certify_gradients(&cfg, variant, &batch, derive_seed(cfg.seed, "gradcheck"))
            .map_err(runtime)?;
        println!(
            "{:<12} {:>12.3e} {:>8}  {}",
            variant.name(),
            report.max_err,
            report.checked,
            report.worst_param
        );
        all_ok &= report.passed();
        rows.push(serde_json::json!({
            "variant": variant.name(),
            "max_rel_err": report.max_err,
            "checked": report.checked,
            "worst_param": report.worst_param,
            "passed": report.passed(),
        }));
    }
    run.write(
        "gradcheck.json",
        &serde_json::to_string_pretty(&rows).map_err(runtime)?,
    )
    .map_err(runtime)?;

    let dir = run.finish().map_err(runtime)?;
    if !all_ok {
        return Err(runtime(anyhow!(
            "gradient certification failed for at least one variant; table above, \
             report under {}",
            dir.display()
        )));
    }
    Ok(format!(
        "grad-check: {} variants certified below 1e-4 → {}",
        Variant::ALL.len(),
        dir.display()
    ))
}

fn skeleton_dump() -> Result<String> {
    let sk = Skeleton::toy();
    let parents: Vec<Option<usize>> = sk.parent.to_vec();
    let offsets: Vec<Vec<f64>> = sk.rest_offsets.iter().map(|o| o.to_vec()).collect();
    let weights: Vec<Vec<f64>> = sk
        .vertex_weights
        .rows()
        .into_iter()
        .map(|r| r.to_vec())
        .collect();
    let basis: Vec<Vec<f64>> = sk
        .bone_basis
        .rows()
        .into_iter()
        .map(|r| r.to_vec())
        .collect();
    let doc = serde_json::json!({
        "parents": parents,
        "rest_offsets": offsets,
        "vertex_weights": weights,
        "bone_basis": basis,
    });
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok("skeleton-dump: 24 parts, 64 vertices".to_string())
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite metric"));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn cmd_compare(args: CompareArgs) -> std::result::Result<String, Failure> {
    let variants: Vec<Variant> = args
        .variants
        .split(',')
        .map(|s| s.trim().parse::<Variant>())
        .collect::<poseconf::Result<_>>()
        .map_err(validation)?;
    if variants.len() < 2 {
        return Err(validation(anyhow!(
            "--variants needs at least two entries, got {}",
            variants.len()
        )));
    }
    if args.seeds == 0 {
        return Err(validation(anyhow!("--seeds must be ≥ 1")));
    }
    let cfg = load_config(&args.common)?;
    // One dataset for every cell: comparisons must differ only in the
    // model, never in the data.
    let data = load_datasets(&cfg, args.data.as_deref())?;
    let mut run = Run::create(&args.common.out, &cfg, "compare-variants").map_err(runtime)?;

    let mut cells = String::from("variant,seed,pve,mpjpe,pa_mpjpe,pcc\n");
    let mut table = String::from("variant,median_pve,median_mpjpe,median_pa_mpjpe,median_pcc\n");
    let mut summary_parts = Vec::new();
    for &variant in &variants {
        let (mut pve, mut mpjpe, mut pa, mut pcc) = (vec![], vec![], vec![], vec![]);
        for s in 0..args.seeds {
            let mut cell_cfg = cfg.clone();
            cell_cfg.train.variant = variant;
            cell_cfg.seed = derive_seed(cfg.seed, &format!("compare/{}/{s}", variant.name()));
            let out = train_until(&cell_cfg, &data, None, None).map_err(classify)?;
            if let Some(iter) = out.nan_abort {
                return Err(runtime(anyhow!(
                    "variant {} seed {s} hit a non-finite loss at iteration {iter}",
                    variant.name()
                )));
            }
            let mut tape = Tape::new();
            let model =
                model_from_checkpoint(&mut tape, &cell_cfg, &out.checkpoint).map_err(classify)?;
            let bundle = evaluate(&mut tape, &model, &data.test, false).map_err(runtime)?;
            cells.push_str(&format!(
                "{},{s},{},{},{},{}\n",
                variant.name(),
                bundle.report.pve,
                bundle.report.mpjpe,
                bundle.report.pa_mpjpe,
                bundle.report.pcc
            ));
            pve.push(bundle.report.pve);
            mpjpe.push(bundle.report.mpjpe);
            pa.push(bundle.report.pa_mpjpe);
            pcc.push(bundle.report.pcc);
        }
        let med_pcc = median(&mut pcc);
        table.push_str(&format!(
            "{},{},{},{},{med_pcc}\n",
            variant.name(),
            median(&mut pve),
            median(&mut mpjpe),
            median(&mut pa)
        ));
        summary_parts.push(format!("{} pcc {med_pcc:.3}", variant.name()));
    }
    run.write("cells.csv", &cells).map_err(runtime)?;
    run.write("compare.csv", &table).map_err(runtime)?;

    let dir = run.finish().map_err(runtime)?;
    Ok(format!(
        "compare-variants: {} seeds × {{{}}} → {} | {}",
        args.seeds,
        variants
            .iter()
            .map(|v| v.name())
            .collect::<Vec<_>>()
            .join(", "),
        summary_parts.join(" | "),
        dir.display()
    ))
}
