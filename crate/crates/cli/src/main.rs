use clap::{Args, Parser, Subcommand, ValueEnum};
use resformer::audit::{verify_spike_driven, Probe};
use resformer::model::{self, parse_kv, reference_params_m, Model, ModelConfig};
use resformer::nn::RunOptions;
use resformer::training::{self, DatasetHandle, TrainConfig};
use resformer::verification::{self as v, McReport, Transform};
use resformer::{Error, Result};
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "resformer", version, about = "SpikingResformer models: build, train, evaluate, audit and verify")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a model, print its parameter table and stage summary, write an untrained checkpoint.
    Build(Common),
    /// Train on a dataset and write the log and final checkpoint.
    Train(TrainArgs),
    /// Accuracy and audit totals of a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Per-layer SOPs, firing rates, energy and spike-driven verification.
    Audit(AuditArgs),
    /// Run statistical and algebraic verification suites.
    Verify(VerifyArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// Registry architecture.
    #[arg(long, value_parser = ["Ti", "S", "M", "L", "Nano"], ignore_case = true)]
    arch: Option<String>,
    /// `key = value` configuration file (model keys and `train.*` keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `KEY=VALUE` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    time_steps: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads for Monte Carlo sampling.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset file or `synthetic:SPEC`.
    #[arg(long, default_value = "synthetic")]
    dataset: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "synthetic")]
    dataset: String,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitName,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
}

#[derive(Args)]
struct AuditArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to audit; without it a freshly initialized model of `--arch` is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "synthetic")]
    dataset: String,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitName,
    /// Images audited (default: the whole split).
    #[arg(long)]
    images: Option<usize>,
    /// Images recomputed event by event for the spike-driven check.
    #[arg(long, default_value_t = 2)]
    verify_images: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    Theorem1,
    Scaling,
    ConvEquiv,
    Sdsa,
    Gradcheck,
    All,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(value_enum)]
    suite: Suite,
    #[command(flatten)]
    common: Common,
    /// Presynaptic firing rate (single theorem1 / scaling case instead of the grid).
    #[arg(long)]
    fx: Option<f64>,
    /// Input dimension (single theorem1 / scaling case instead of the grid).
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, default_value_t = v::MIN_SAMPLES)]
    samples: usize,
    /// Sampled parameter coordinates per gradient check.
    #[arg(long, default_value_t = 100)]
    coords: usize,
}

/// Failure kinds mapped to exit status.
enum Failure {
    Check(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.into())
    }
}

type Outcome = std::result::Result<(), Failure>;

struct Resolved {
    model: ModelConfig,
    train: TrainConfig,
}

/// Registry base from `--arch` (or the file's `arch`), then file keys, then
/// `--set`, then dedicated flags.
fn resolve(c: &Common) -> Result<Resolved> {
    let mut pairs = Vec::new();
    if let Some(path) = &c.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        pairs.extend(parse_kv(&text)?.into_iter().map(|(_, k, v)| (k, v)));
    }
    for o in &c.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    let arch = c
        .arch
        .clone()
        .or_else(|| pairs.iter().find(|(k, _)| k == "arch").map(|(_, v)| v.clone()))
        .ok_or_else(|| Error::Config("no architecture: pass --arch or set `arch` in the config".into()))?;
    let mut model = ModelConfig::registry(&arch)?;
    let mut train = TrainConfig {
        seed: c.seed,
        ..TrainConfig::default()
    };
    for (k, val) in pairs.iter().filter(|(k, _)| k != "arch") {
        if !model.set(k, val)? && !train.set(k, val)? {
            return Err(Error::Config(format!("unknown key {k:?}")));
        }
    }
    if let Some(t) = c.time_steps {
        model.time_steps = t;
    }
    model.validate()?;
    train.validate()?;
    Ok(Resolved { model, train })
}

fn emit<T: Serialize>(out: &mut impl Write, record: &T) -> Result<()> {
    writeln!(out, "{}", serde_json::to_string(record)?)?;
    Ok(())
}

fn emit_value(out: &mut impl Write, value: serde_json::Value) -> Result<()> {
    writeln!(out, "{value}")?;
    Ok(())
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn build(c: &Common) -> Outcome {
    let r = resolve(c)?;
    let t = Instant::now();
    let m = Model::build(&r.model, c.seed)?;
    log::info!("built {} in {:.2?}", r.model.name, t.elapsed());
    let mut out = std::io::stdout().lock();
    let total = m.param_count();
    for (layer, n) in m.param_breakdown() {
        writeln!(out, "{layer:<32} {n:>12}")?;
    }
    writeln!(out, "{:<32} {total:>12}", "total")?;
    for line in m.stage_summary()? {
        writeln!(out, "{line}")?;
    }
    let millions = total as f64 / 1e6;
    writeln!(out, "params \u{2248} {millions:.2}M")?;
    let mut rec = serde_json::json!({
        "record": "build",
        "arch": r.model.name,
        "params": total,
        "breakdown": m.param_breakdown(),
    });
    if let Some(reference) = reference_params_m(&r.model.name) {
        let gap = (millions - reference) / reference;
        writeln!(
            out,
            "reported {reference:.2}M, gap {:+.4}M ({:+.3}%)",
            millions - reference,
            100.0 * gap
        )?;
        let bn = m.param_breakdown().get("batchnorm affine").copied().unwrap_or(0);
        writeln!(out, "excluding BN affine: {:.2}M", (total - bn) as f64 / 1e6)?;
        rec["reported_m"] = reference.into();
        rec["relative_gap"] = gap.into();
    }
    create_out(&c.out)?;
    std::fs::write(c.out.join("config.txt"), r.model.to_text())?;
    std::fs::write(c.out.join("build.json"), format!("{rec}\n"))?;
    model::save(&m, &c.out.join("model.ckpt"))?;
    Ok(())
}

fn train(a: &TrainArgs) -> Outcome {
    let r = resolve(&a.common)?;
    let data = DatasetHandle::open(&a.dataset)?;
    let mut m = Model::build(&r.model, a.common.seed)?;
    create_out(&a.common.out)?;
    std::fs::write(
        a.common.out.join("config.txt"),
        format!("{}{}", r.model.to_text(), r.train.to_text()),
    )?;
    let log_path = a.common.out.join("train.jsonl");
    let mut log_file = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    let mut stdout = std::io::stdout().lock();
    let t = Instant::now();
    let ckpt = a.common.out.join("model.ckpt");
    let records = training::train(&mut m, &data, &r.train, Some(&ckpt), |rec| {
        emit(&mut log_file, rec)?;
        log_file.flush()?;
        emit(&mut stdout, rec)?;
        log::info!("epoch {} done at {:.1}s", rec.epoch, t.elapsed().as_secs_f64());
        Ok(())
    })?;
    let bad = records.iter().find(|r| !r.ema_in_range || r.non_binary_spikes > 0);
    if let Some(r) = bad {
        return Err(Failure::Check(format!("invariant violated in epoch {}", r.epoch)));
    }
    Ok(())
}

fn split<'a>(d: &'a DatasetHandle, s: SplitName) -> &'a training::Split {
    match s {
        SplitName::Train => &d.train,
        SplitName::Test => &d.test,
    }
}

fn load_for(c: &Common, path: &Path) -> Result<Model> {
    let m = model::load(path, None)?;
    if c.arch.is_some() || c.config.is_some() || !c.overrides.is_empty() || c.time_steps.is_some() {
        let r = resolve(c)?;
        if r.model != m.config {
            return Err(Error::Config(format!(
                "checkpoint holds configuration {:?}, which differs from the requested one",
                m.config.name
            )));
        }
    }
    Ok(m)
}

fn eval(a: &EvalArgs) -> Outcome {
    let m = load_for(&a.common, &a.checkpoint)?;
    let data = DatasetHandle::open(&a.dataset)?;
    let e = training::evaluate(&m, split(&data, a.split), a.batch_size)?;
    emit_value(
        &mut std::io::stdout().lock(),
        serde_json::json!({
            "record": "eval",
            "accuracy": e.accuracy,
            "correct": e.correct,
            "total": e.total,
            "sops_g": e.audit.total_sops_g,
            "energy_mj": e.audit.energy_mj,
            "stem_macs_g": e.audit.stem_macs_g,
        }),
    )?;
    Ok(())
}

fn audit(a: &AuditArgs) -> Outcome {
    let m = match &a.checkpoint {
        Some(p) => load_for(&a.common, p)?,
        None => Model::build(&resolve(&a.common)?.model, a.common.seed)?,
    };
    let data = DatasetHandle::open(&a.dataset)?;
    let s = split(&data, a.split);
    let count = a.images.unwrap_or(s.len()).min(s.len());
    if count == 0 {
        return Err(Error::EmptyInput("audit split").into());
    }
    let idx: Vec<usize> = (0..count).collect();
    let mut probe = Probe::new(false);
    for chunk in idx.chunks(a.batch_size.max(1)) {
        let (x, _) = s.batch(chunk)?;
        m.forward(&x, RunOptions::eval(), Some(&mut probe))?;
    }
    let report = probe.report()?;
    let mut out = std::io::stdout().lock();
    for line in report.json_lines()? {
        writeln!(out, "{line}")?;
    }
    eprint!("{}", report.table());

    let (x, _) = s.batch(&idx[..a.verify_images.clamp(1, count)])?;
    let mut capture = Probe::new(true);
    m.forward(&x, RunOptions::eval(), Some(&mut capture))?;
    let mut failed = Vec::new();
    for (name, cap) in capture.captures() {
        let check = verify_spike_driven(cap)?;
        let mut val = serde_json::to_value(&check).map_err(Error::from)?;
        val["record"] = "spike-driven".into();
        val["layer"] = name.as_str().into();
        emit_value(&mut out, val)?;
        if !check.pass {
            failed.push(name.clone());
        }
    }
    if report.non_binary > 0 {
        failed.push(format!("{} non-binary spike elements", report.non_binary));
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("spike-driven verification failed: {}", failed.join(", "))))
    }
}

const THEOREM1_GRID: ([f64; 3], [usize; 2]) = ([0.1, 0.3, 0.5], [64, 256]);

fn grid(a: &VerifyArgs) -> Vec<(f64, usize)> {
    let fxs: Vec<f64> = a.fx.map_or(THEOREM1_GRID.0.to_vec(), |f| vec![f]);
    let ms: Vec<usize> = a.m.map_or(THEOREM1_GRID.1.to_vec(), |m| vec![m]);
    fxs.iter().flat_map(|&f| ms.iter().map(move |&m| (f, m))).collect()
}

fn mc_line(out: &mut impl Write, r: &McReport, ok: &mut bool) -> Result<()> {
    let mut val = serde_json::to_value(r)?;
    val["record"] = "monte-carlo".into();
    emit_value(out, val)?;
    *ok &= r.pass;
    Ok(())
}

fn verify(a: &VerifyArgs) -> Outcome {
    let c = &a.common;
    let all = a.suite == Suite::All;
    let mut out = std::io::stdout().lock();
    let mut ok = true;
    let (seed, jobs, n) = (c.seed, c.jobs, a.samples);
    if all || a.suite == Suite::Theorem1 {
        for (i, (f, m)) in grid(a).into_iter().enumerate() {
            for form in [Transform::Dst, Transform::DstT] {
                let s = seed.wrapping_add(2 * i as u64 + (form == Transform::DstT) as u64);
                mc_line(&mut out, &v::theorem1_mc(form, f, m, n, s, jobs)?, &mut ok)?;
            }
        }
    }
    if all || a.suite == Suite::Scaling {
        for (i, (f, m)) in grid(a).into_iter().enumerate() {
            mc_line(&mut out, &v::post_scale_variance(f, m, n, seed.wrapping_add(100 + i as u64), jobs)?, &mut ok)?;
        }
        for (i, &(f, hw, p)) in [(0.1, 1024, 4), (0.3, 256, 2), (0.5, 64, 1)].iter().enumerate() {
            let r = v::dssa_c2_variance(f, hw, p, n, seed.wrapping_add(200 + i as u64), jobs)?;
            mc_line(&mut out, &r, &mut ok)?;
        }
    }
    if all || a.suite == Suite::Sdsa {
        for (i, &(fq, fk, hw)) in [(0.5, 0.5, 64), (0.2, 0.3, 196)].iter().enumerate() {
            let (raw, scaled) = v::sdsa_scale_mc(fq, fk, hw, n, seed.wrapping_add(300 + i as u64), jobs)?;
            mc_line(&mut out, &raw, &mut ok)?;
            mc_line(&mut out, &scaled, &mut ok)?;
        }
    }
    if all || a.suite == Suite::ConvEquiv {
        for r in v::conv_equiv_suite(seed)? {
            let mut val = serde_json::to_value(&r).map_err(Error::from)?;
            val["record"] = "conv-equiv".into();
            emit_value(&mut out, val)?;
            ok &= r.pass;
        }
    }
    if all || a.suite == Suite::Gradcheck {
        let cfg = match &c.arch {
            Some(_) => resolve(c)?.model,
            None => ModelConfig::registry("Nano")?,
        };
        let mut m = Model::build(&cfg, seed)?;
        let mut reports = Vec::new();
        for s in 0..cfg.stages.len() {
            reports.push(v::gradcheck_block(&mut m, s, 0, 2, a.coords, seed.wrapping_add(400 + s as u64))?);
        }
        reports.push(v::gradcheck_model(&mut m, 2, a.coords, seed.wrapping_add(500))?);
        for r in reports {
            let mut val = serde_json::to_value(&r).map_err(Error::from)?;
            val["record"] = "gradcheck".into();
            emit_value(&mut out, val)?;
            ok &= r.pass;
        }
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Check("verification failed".into()))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Build(c) => build(c),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Audit(a) => audit(a),
        Command::Verify(a) => verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
