use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use ssnas_core::data::{plan_for_rho, subsample_indices, synth_dataset, SynthSpec};
use ssnas_core::finetune::{self, evaluate, prepare_network, restore_network, run_ablation, FinetuneHistory, Metrics};
use ssnas_core::nn::{analytic_parameter_count, derive_genotype, Genotype, ParamStore};
use ssnas_core::report::{comparison_csv, comparison_table, RunReport};
use ssnas_core::search::{run_search_with, SearchHistory, SupernetState};
use ssnas_core::seed::derive_seed;
use ssnas_core::{Error, Result};

use crate::config::{load_splits, ExperimentConfig, Splits};
use crate::Common;

pub const GENOTYPE_FILE: &str = "genotype.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const HISTORY_FILE: &str = "history.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";

/// `--config` wins; otherwise the snapshot in `<from>/report.json`, so a
/// follow-up command sees the same data as the run it continues; otherwise
/// the built-in defaults.
fn load_config(common: &Common, from: Option<&Path>) -> Result<ExperimentConfig> {
    if let Some(path) = &common.config {
        return ExperimentConfig::load(path);
    }
    if let Some(report) = from.map(|d| d.join(REPORT_JSON)).filter(|p| p.exists()) {
        let r = RunReport::load(&report)?;
        return serde_json::from_value(r.config)
            .map_err(|e| Error::Parameter(format!("config snapshot in {}: {e}", report.display())));
    }
    Ok(ExperimentConfig::default())
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).map_err(|source| Error::Io { path, source })
}

fn write_json(path: PathBuf, value: &impl Serialize) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// Genotype and weights of an earlier run; absent or unreadable files are
/// data errors.
fn load_checkpoint(dir: &Path) -> Result<(Genotype, ParamStore<f32>)> {
    let gpath = dir.join(GENOTYPE_FILE);
    let text = fs::read_to_string(&gpath).map_err(|e| Error::Data(format!("{}: {e}", gpath.display())))?;
    let genotype = Genotype::from_json(&text).map_err(|e| Error::Data(format!("{}: {e}", gpath.display())))?;
    let wpath = dir.join(WEIGHTS_FILE);
    if !wpath.exists() {
        return Err(Error::Data(format!("{}: checkpoint not found", wpath.display())));
    }
    Ok((genotype, ParamStore::load(&wpath)?))
}

fn save_report(out: &Path, report: &RunReport) -> Result<()> {
    report.save(&out.join(REPORT_JSON))?;
    write(out.join(REPORT_MD), &report.to_markdown())
}

#[derive(Serialize)]
struct Manifest<'a> {
    source: &'a str,
    seed: u64,
    rho_target: f64,
    rho_achieved: f64,
    counts: &'a [usize],
    indices: Vec<usize>,
}

pub fn make_lt(common: &Common, rho: f64, classes: usize, per_class: usize, source: &str) -> Result<()> {
    let cfg = load_config(common, None)?.resolve(common.seed)?;
    if !(rho >= 1.0) || !rho.is_finite() {
        return Err(Error::Parameter(format!("rho must be a finite value >= 1, got {rho}")));
    }
    let data = if source == "synthetic" {
        if classes < 2 || per_class == 0 {
            return Err(Error::Parameter("need at least 2 classes and 1 sample per class".into()));
        }
        synth_dataset(&SynthSpec {
            counts: vec![per_class; classes],
            side: cfg.network.input_side,
            channels: cfg.network.input_channels,
            seed: derive_seed(cfg.seed, "make_lt/data", &[]),
        })
    } else {
        let data_cfg = crate::config::DatasetConfig {
            source: source.to_string(),
            rho: 1.0,
            ..Default::default()
        };
        load_splits(&data_cfg, &cfg.network, cfg.seed, "make_lt")?.train
    };
    let plan = plan_for_rho(&data.class_counts(), rho)?;
    let indices = subsample_indices(&data, &plan, derive_seed(cfg.seed, "make_lt/subsample", &[]))?;
    create_out(&common.out)?;
    write_json(common.out.join("plan.json"), &plan)?;
    write_json(
        common.out.join("manifest.json"),
        &Manifest {
            source,
            seed: cfg.seed,
            rho_target: rho,
            rho_achieved: plan.rho,
            counts: &plan.lt_counts,
            indices,
        },
    )?;
    println!("counts {:?} (rho {:.3})", plan.lt_counts, plan.rho);
    Ok(())
}

fn write_search_artifacts(out: &Path, genotype: Option<&Genotype>, state: &SupernetState<f32>, history: &SearchHistory) -> Result<()> {
    if let Some(g) = genotype {
        write(out.join(GENOTYPE_FILE), &g.to_json()?)?;
    }
    state.net.params().save(&out.join(WEIGHTS_FILE))?;
    history.save_csv(&out.join(HISTORY_FILE))
}

pub fn search(common: &Common, epochs: Option<usize>) -> Result<()> {
    let mut cfg = load_config(common, None)?;
    if let Some(e) = epochs {
        cfg.search.epochs = e;
    }
    let cfg = cfg.resolve(common.seed)?;
    let out = common.out.as_path();
    create_out(out)?;
    let splits = load_splits(&cfg.dataset, &cfg.network, cfg.seed, "main")?;
    let reads_before = splits.train.label_reads();
    let start = Instant::now();
    let every = cfg.checkpoint_every;
    let mut checkpoint = |state: &SupernetState<f32>, history: &SearchHistory| {
        if every > 0 && state.epoch % every == 0 {
            let g = derive_genotype(&state.arch, cfg.search.derive, cfg.search.threshold)?;
            write_search_artifacts(out, Some(&g), state, history)?;
        }
        Ok(())
    };
    let run = match run_search_with(&splits.train, &cfg.network, &cfg.search, &mut checkpoint) {
        Ok(run) => run,
        Err(failure) => {
            if let Some(state) = &failure.state {
                let g = derive_genotype(&state.arch, cfg.search.derive, cfg.search.threshold).ok();
                write_search_artifacts(out, g.as_ref(), state, &failure.history)?;
            }
            return Err(failure.error);
        }
    };
    let label_reads = splits.train.label_reads() - reads_before;
    write_search_artifacts(out, Some(&run.genotype), &run.state, &run.history)?;

    let mut report = RunReport::new("search", "search", cfg.snapshot(), cfg.seed);
    report.param_count = Some(analytic_parameter_count(&cfg.network, Some(&run.genotype), None));
    report.genotype = Some(run.genotype.clone());
    report.wall_seconds = start.elapsed().as_secs_f64();
    let sigma = &run.history.sigma;
    report.notes = vec![
        format!("label reads during search: {label_reads}"),
        format!("steps: {}", run.history.steps.len()),
        format!(
            "sigma(alpha) fraction in [0.4, 0.6]: {:.3} at start, {:.3} at end",
            sigma.first().map_or(f64::NAN, |h| h.mid_fraction),
            sigma.last().map_or(f64::NAN, |h| h.mid_fraction)
        ),
    ];
    report.notes.extend(plan_note(&splits));
    save_report(out, &report)?;
    println!(
        "genotype: {} normal and {} reduction edges, written to {}",
        run.genotype.normal.len(),
        run.genotype.reduce.len(),
        out.join(GENOTYPE_FILE).display()
    );
    Ok(())
}

fn plan_note(splits: &Splits) -> Option<String> {
    splits
        .plan
        .as_ref()
        .map(|p| format!("long-tail training split: counts {:?}, rho {:.3}", p.lt_counts, p.rho))
}

fn save_metrics(out: &Path, metrics: &Metrics) -> Result<()> {
    metrics.save_json(&out.join("metrics.json"))?;
    metrics.save_confusion_csv(&out.join("confusion.csv"))
}

fn finetune_report(
    command: &str,
    cfg: &ExperimentConfig,
    genotype: &Genotype,
    metrics: &Metrics,
    history: Option<FinetuneHistory>,
    classes: usize,
) -> RunReport {
    let mut report = RunReport::new(command, cfg.finetune.loss_mode.method(), cfg.snapshot(), cfg.seed);
    report.genotype = Some(genotype.clone());
    report.param_count = Some(metrics.param_count);
    report.num_classes = Some(classes);
    report.metrics = Some(metrics.clone());
    report.finetune_history = history;
    if cfg.finetune.reset_running_stats && command != "eval" {
        report.notes.push("batch-norm running statistics reset before fine-tuning".into());
    }
    report
}

pub fn finetune(common: &Common, from: &Path, epochs: Option<usize>, loss: Option<&str>) -> Result<()> {
    let mut cfg = load_config(common, Some(from))?;
    if let Some(e) = epochs {
        cfg.finetune.epochs = e;
    }
    if let Some(l) = loss {
        cfg.finetune.loss_mode = l.parse()?;
    }
    let cfg = cfg.resolve(common.seed)?;
    let (genotype, weights) = load_checkpoint(from)?;
    let splits = load_splits(&cfg.dataset, &cfg.network, cfg.seed, "main")?;
    let start = Instant::now();
    let classes = splits.train.class_count();
    let net = prepare_network(&cfg.network, &genotype, &weights, classes, cfg.finetune.seed)?;
    let (net, history) = finetune::finetune(net, &splits.train, &cfg.finetune)?;
    let metrics = evaluate(&net, &splits.test)?;

    let out = common.out.as_path();
    create_out(out)?;
    write(out.join(GENOTYPE_FILE), &genotype.to_json()?)?;
    net.params().save(&out.join(WEIGHTS_FILE))?;
    save_metrics(out, &metrics)?;
    let mut report = finetune_report("finetune", &cfg, &genotype, &metrics, Some(history), classes);
    report.notes.extend(plan_note(&splits));
    report.wall_seconds = start.elapsed().as_secs_f64();
    save_report(out, &report)?;
    println!("top-1 error {:.2}% (accuracy {:.2}%)", metrics.top1_error, metrics.accuracy);
    Ok(())
}

pub fn eval(common: &Common, from: &Path) -> Result<()> {
    let cfg = load_config(common, Some(from))?.resolve(common.seed)?;
    let (genotype, weights) = load_checkpoint(from)?;
    let net = restore_network(&cfg.network, &genotype, &weights)?;
    let splits = load_splits(&cfg.dataset, &cfg.network, cfg.seed, "main")?;
    let start = Instant::now();
    let metrics = evaluate(&net, &splits.test)?;
    let out = common.out.as_path();
    create_out(out)?;
    save_metrics(out, &metrics)?;
    let mut report = finetune_report("eval", &cfg, &genotype, &metrics, None, splits.test.class_count());
    report.wall_seconds = start.elapsed().as_secs_f64();
    save_report(out, &report)?;
    println!("top-1 error {:.2}% (accuracy {:.2}%)", metrics.top1_error, metrics.accuracy);
    Ok(())
}

pub fn transfer(common: &Common, from: &Path, to: Option<&str>, epochs: Option<usize>) -> Result<()> {
    let mut cfg = load_config(common, Some(from))?;
    if let Some(source) = to {
        // An explicit target is used as it is, without long-tail reduction.
        cfg.transfer_dataset.source = source.to_string();
        cfg.transfer_dataset.rho = 1.0;
    }
    if let Some(e) = epochs {
        cfg.finetune.epochs = e;
    }
    let cfg = cfg.resolve(common.seed)?;
    let (genotype, weights) = load_checkpoint(from)?;
    let splits = load_splits(&cfg.transfer_dataset, &cfg.network, cfg.seed, "transfer")?;
    let start = Instant::now();
    let outcome = finetune::transfer(&cfg.network, &genotype, &weights, &splits.train, &splits.test, &cfg.finetune)?;

    let out = common.out.as_path();
    create_out(out)?;
    write(out.join(GENOTYPE_FILE), &genotype.to_json()?)?;
    outcome.network.params().save(&out.join(WEIGHTS_FILE))?;
    save_metrics(out, &outcome.metrics)?;
    let classes = splits.train.class_count();
    let mut report = finetune_report("transfer", &cfg, &genotype, &outcome.metrics, Some(outcome.history), classes);
    report.wall_seconds = start.elapsed().as_secs_f64();
    save_report(out, &report)?;
    println!(
        "transfer to {classes} classes: top-1 error {:.2}% (accuracy {:.2}%)",
        outcome.metrics.top1_error, outcome.metrics.accuracy
    );
    Ok(())
}

pub fn ablate(common: &Common, from: &Path, runs: Option<usize>, epochs: Option<usize>) -> Result<()> {
    let mut cfg = load_config(common, Some(from))?;
    if let Some(r) = runs {
        cfg.ablation_runs = r;
    }
    if let Some(e) = epochs {
        cfg.finetune.epochs = e;
    }
    let cfg = cfg.resolve(common.seed)?;
    if cfg.ablation_runs == 0 {
        return Err(Error::Parameter("ablation needs at least one run".into()));
    }
    let (genotype, weights) = load_checkpoint(from)?;
    let splits = load_splits(&cfg.dataset, &cfg.network, cfg.seed, "main")?;
    let seeds: Vec<u64> = (0..cfg.ablation_runs as u64)
        .map(|i| derive_seed(cfg.seed, "ablation", &[i]))
        .collect();
    let start = Instant::now();
    let table = run_ablation(&cfg.network, &genotype, &weights, &splits.train, &splits.test, &cfg.finetune, &seeds)?;

    let out = common.out.as_path();
    create_out(out)?;
    let mut report = RunReport::new("ablate", "ablation", cfg.snapshot(), cfg.seed);
    report.genotype = Some(genotype);
    report.num_classes = Some(splits.train.class_count());
    report.notes = table
        .rows
        .iter()
        .map(|row| {
            let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
            format!(
                "{}: median error {}, median recall of class {} {}",
                row.mode,
                fmt(row.median_error()),
                table.rarest_class,
                fmt(row.median_recall(table.rarest_class))
            )
        })
        .collect();
    report.ablation = Some(table);
    report.wall_seconds = start.elapsed().as_secs_f64();
    save_report(out, &report)?;
    print!("{}", report.to_markdown());
    Ok(())
}

pub fn report(paths: &[PathBuf], out: &Path) -> Result<()> {
    let reports = paths.iter().map(|p| RunReport::load(p)).collect::<Result<Vec<_>>>()?;
    let table = comparison_table(&reports)?;
    let csv = comparison_csv(&reports)?;
    create_out(out)?;
    write(out.join(REPORT_MD), &table)?;
    write(out.join("report.csv"), &csv)?;
    print!("{table}");
    Ok(())
}
