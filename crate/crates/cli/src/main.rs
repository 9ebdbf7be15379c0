mod artifacts;
mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use upop_core::engine::{self, Metrics, RunMetrics, SearchOutcome};
use upop_core::extraction::{extract, site_shapes};
use upop_core::model::predict;
use upop_core::reporting::{heatmap_csv, trace_csv, trend_summary, CompressionReport, ReportInputs};
use upop_core::{selftest, Driver, ScheduleKind, SyntheticTask};

use artifacts::*;
use config::{explicit_run_dir, unique_run_dir, RunFile, RunManifest, MANIFEST_SCHEMA};

#[derive(Parser)]
#[command(name = "upop", version, about = "Structured pruning of a toy vision-language transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain, search for a subnet and write a run directory.
    Search(SearchArgs),
    /// Fine-tune the extracted subnet of a finished search.
    Retrain {
        run: PathBuf,
        /// Override the configured retrain step count.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Slice the searched model into a smaller dense checkpoint.
    Extract { run: PathBuf },
    /// Summarise runs; two or more runs at distinct ratios add a trend table.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the trend table to this file.
        #[arg(long)]
        trend_out: Option<PathBuf>,
    },
    /// Run the built-in invariant checks.
    Selftest {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct SearchArgs {
    /// TOML file with optional [model], [task], [prune] and [pretrain] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    driver: Option<Driver>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    schedule: Option<ScheduleKind>,
    #[arg(long)]
    freq: Option<usize>,
    /// Seeds model init, pretraining and search.
    #[arg(long)]
    seed: Option<u64>,
    /// Exact run directory, taking precedence over --out-root; must be empty or absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parent of an auto-named run directory.
    #[arg(long, env = "UPOP_OUT", default_value = "runs")]
    out_root: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            let code = e
                .chain()
                .find_map(|c| c.downcast_ref::<upop_core::Error>())
                .map(|c| c.code())
                .unwrap_or("error");
            let line = json!({"error": {"code": code, "message": format!("{e:#}")}});
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Search(args) => cmd_search(args).map(|_| ExitCode::SUCCESS),
        Command::Retrain { run, steps } => cmd_retrain(&run, steps).map(|_| ExitCode::SUCCESS),
        Command::Extract { run } => cmd_extract(&run).map(|_| ExitCode::SUCCESS),
        Command::Report { runs, trend_out } => cmd_report(&runs, trend_out.as_deref()).map(|_| ExitCode::SUCCESS),
        Command::Selftest { instances, seed } => cmd_selftest(instances, seed),
    }
}

fn print_metrics(label: &str, m: &Metrics) {
    println!("{label}_accuracy={:.4} {label}_loss={:.6}", m.accuracy, m.loss);
}

fn cmd_search(args: SearchArgs) -> Result<PathBuf> {
    let (mut file, config_text) = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            (RunFile::parse(&text)?, Some(text))
        }
        None => (RunFile::default(), None),
    };
    let mut overrides = Vec::new();
    if let Some(d) = args.driver {
        file.driver = Some(d);
        overrides.push(format!("driver={d}"));
    }
    if let Some(p) = args.p {
        file.prune.p = p;
        overrides.push(format!("p={p}"));
    }
    if let Some(s) = args.schedule {
        file.prune.schedule = s;
        overrides.push(format!("schedule={s}"));
    }
    if let Some(f) = args.freq {
        file.prune.freq = Some(f);
        overrides.push(format!("freq={f}"));
    }
    if let Some(s) = args.seed {
        file.prune.seed = s;
        file.pretrain.seed = s;
        overrides.push(format!("seed={s}"));
    }
    let driver = file.driver();
    file.model.validate()?;
    file.prune.validate(&upop_core::SiteRegistry::new(&file.model))?;
    let task = SyntheticTask::new(&file.task, &file.model)?;

    let out = match &args.out {
        Some(dir) => explicit_run_dir(dir)?,
        None => unique_run_dir(
            &args.out_root,
            &format!("{driver}-p{}-s{}", file.prune.p, file.prune.seed),
        )?,
    };
    let manifest = RunManifest {
        schema: MANIFEST_SCHEMA.into(),
        config_path: args.config.clone(),
        out_dir: out.clone(),
        driver,
        overrides,
        model: file.model.clone(),
        task: file.task.clone(),
        prune: file.prune.clone(),
        pretrain: file.pretrain.clone(),
    };
    manifest.save()?;
    let echoed = match &config_text {
        Some(t) => t.clone(),
        None => toml::to_string(&file).context("serialising config")?,
    };
    fs::write(out.join(CONFIG), echoed)?;

    let start = Instant::now();
    let data = task.generate();
    let splits = data.splits();
    let (dense_model, mut trace) = engine::pretrain(&file.model, &data, &splits.train, &file.pretrain)?;
    save_model(&out.join(PRETRAINED), &json!({"kind": "pretrained"}), &dense_model)?;
    let dense = engine::evaluate(&dense_model, None, &data, &splits.test)?;

    let outcome = engine::search(driver, &dense_model, &data, &splits.train, &file.prune)?;
    trace.extend(outcome.trace.iter().cloned());
    let masked = engine::evaluate(&outcome.model, Some(&outcome.masks), &data, &splits.test)?;
    let binarized = engine::evaluate(&outcome.model, Some(&outcome.binarized_masks()), &data, &splits.test)?;
    save_search(&out.join(SEARCH), &outcome.model, &outcome.masks, &outcome.decision, &trace)?;

    let extracted = extract(&outcome.model, &outcome.masks, &outcome.decision)?;
    let report = CompressionReport::build(ReportInputs {
        driver,
        prune: &file.prune,
        original: &dense_model,
        masks: &outcome.masks,
        decision: &outcome.decision,
        extracted: &extracted,
        metrics: RunMetrics {
            dense,
            masked,
            binarized,
            retrained: None,
        },
        trace: &trace,
        config_text,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })?;
    write_report(&out, &report, &trace)?;

    print_metrics("dense", &dense);
    print_metrics("masked", &masked);
    print_metrics("binarized", &binarized);
    println!(
        "params={}->{} flops={}->{}",
        report.accounting.params_before,
        report.accounting.params_after,
        report.accounting.flops_before,
        report.accounting.flops_after
    );
    println!("run_dir={}", out.display());
    Ok(out)
}

fn write_report(out: &Path, report: &CompressionReport, trace: &[engine::TraceRow]) -> Result<()> {
    fs::write(out.join(REPORT), report.to_json()?)?;
    fs::write(out.join(HEATMAP), heatmap_csv(report)?)?;
    fs::write(out.join(TRACE), trace_csv(trace))?;
    Ok(())
}

fn load_report(run: &Path) -> Result<CompressionReport> {
    let path = run.join(REPORT);
    if !path.exists() {
        return Err(upop_core::Error::IncompleteRun(format!("{} has no report", run.display())).into());
    }
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(CompressionReport::from_json(&text)?)
}

fn require_search(run: &Path) -> Result<PathBuf> {
    let path = run.join(SEARCH);
    if !path.exists() {
        return Err(upop_core::Error::IncompleteRun(format!("{} has no search checkpoint", run.display())).into());
    }
    Ok(path)
}

fn cmd_extract(run: &Path) -> Result<()> {
    let manifest = RunManifest::load(run)?;
    let state = load_search(&require_search(run)?, &manifest.model)?;
    let sub = extract(&state.model, &state.masks, &state.decision)?;

    let task = SyntheticTask::new(&manifest.task, &manifest.model)?;
    let data = task.generate();
    let test = data.splits().test;
    let batch = data.batch(&test[..test.len().min(64)]);
    let reference = predict(&state.model, Some(&state.masks.apply_decision(&state.decision)), &batch)?;
    let diff = reference.max_rel_diff(&predict(&sub.model, None, &batch)?);

    let meta = SubnetMeta {
        kind: "extracted".into(),
        kept: sub.kept.clone(),
        params: sub.params,
        flops: sub.flops,
        check_rel_diff: Some(diff),
    };
    save_model(&run.join(EXTRACTED), &serde_json::to_value(&meta)?, &sub.model)?;
    for s in site_shapes(&state.masks, &sub) {
        println!("site {} kept {}/{}", s.site, s.kept.len(), s.width);
    }
    println!("params={} flops={} max_rel_diff={diff:.3e}", sub.params, sub.flops);
    Ok(())
}

fn cmd_retrain(run: &Path, steps: Option<usize>) -> Result<()> {
    let manifest = RunManifest::load(run)?;
    let mut report = load_report(run)?;
    let state = load_search(&require_search(run)?, &manifest.model)?;
    let mut cfg = manifest.prune.clone();
    if let Some(s) = steps {
        cfg.retrain_steps = s;
    }
    let task = SyntheticTask::new(&manifest.task, &manifest.model)?;
    let data = task.generate();
    let splits = data.splits();
    let outcome = SearchOutcome {
        driver: manifest.driver,
        model: state.model,
        masks: state.masks,
        decision: state.decision,
        ledger: None,
        trace: Vec::new(),
        events: Vec::new(),
    };
    let (sub, retrain_trace) = engine::retrain(&outcome, &data, &splits.train, &cfg)?;
    let metrics = engine::evaluate(&sub.model, None, &data, &splits.test)?;
    let meta = SubnetMeta {
        kind: "retrained".into(),
        kept: sub.kept.clone(),
        params: sub.params,
        flops: sub.flops,
        check_rel_diff: None,
    };
    save_model(&run.join(RETRAINED), &serde_json::to_value(&meta)?, &sub.model)?;

    report.set_retrained(metrics, retrain_trace.len());
    let mut trace = state.trace;
    trace.extend(retrain_trace);
    write_report(run, &report, &trace)?;
    print_metrics("retrained", &metrics);
    Ok(())
}

fn cmd_report(runs: &[PathBuf], trend_out: Option<&Path>) -> Result<()> {
    let reports = runs.iter().map(|r| load_report(r)).collect::<Result<Vec<_>>>()?;
    for (dir, r) in runs.iter().zip(&reports) {
        println!("run {}", dir.display());
        println!("  driver={} p={} seed={}", r.driver, r.prune.p, r.seed);
        print!("  ");
        print_metrics("dense", &r.metrics.dense);
        print!("  ");
        print_metrics("binarized", &r.metrics.binarized);
        if let Some(m) = &r.metrics.retrained {
            print!("  ");
            print_metrics("retrained", m);
        }
        let a = &r.accounting;
        println!(
            "  params={}->{} ({:.2}% removed) flops={}->{}",
            a.params_before,
            a.params_after,
            100.0 * a.params_pruned as f64 / a.params_before as f64,
            a.flops_before,
            a.flops_after
        );
        println!("  pruned_entries={}/{} site_spread={:.4}", a.pruned_entries, a.mask_entries, r.retained_spread());
        for (class, mean) in r.row_means() {
            println!("  {class} mean_retained={mean:.4} deviation={:+.4}", mean - (1.0 - r.prune.p));
        }
    }
    if reports.len() >= 2 {
        let table = trend_summary(&reports)?;
        let csv = table.to_csv();
        print!("{csv}");
        if let Some(path) = trend_out {
            fs::write(path, csv)?;
        }
    }
    Ok(())
}

fn cmd_selftest(instances: usize, seed: u64) -> Result<ExitCode> {
    let report = selftest::run(instances, seed)?;
    println!("{report}");
    if report.passed() {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(anyhow::anyhow!("{} self-test checks failed", report.failures()))
    }
}
