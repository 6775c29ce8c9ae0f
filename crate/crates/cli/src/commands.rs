use std::fs::File;
use std::io::Write as _;
use std::path::Path;

use anyhow::Context;
use codim_core::data::{gen_blobs, gen_rings, load_idx, Dataset, TrainData};
use codim_core::models::ModelTriple;
use codim_core::noise::{fit_gmm_1d, make_partition, min_max_normalize};
use codim_core::report::{read_table, svg_lines, write_table, Series};
use codim_core::trainers::{
    co_divide, initial_model, pretrain_selfcon, train_ce_baseline, train_codim, train_codim_from, train_cssl, Mode,
    NoObserver, RunRecord, SslSplit,
};
use thiserror::Error;

use crate::config::{ConfigError, DataKind, RunConfig};
use crate::run_dir::{RunDir, METRICS_FILE, SUMMARY_FILE};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] codim_core::Error),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Core(_) | CliError::Runtime(_) => 3,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Phase-2 variant selected on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum TrainMode {
    Bare,
    Cssl,
    #[value(name = "self")]
    SelfCon,
    #[value(name = "sup")]
    SupCon,
    /// Cross-entropy baseline.
    Ce,
    /// Mode `bare` without pre-training.
    Dividemix,
}

impl TrainMode {
    fn name(self) -> &'static str {
        match self {
            TrainMode::Bare => "bare",
            TrainMode::Cssl => "cssl",
            TrainMode::SelfCon => "self",
            TrainMode::SupCon => "sup",
            TrainMode::Ce => "ce",
            TrainMode::Dividemix => "dividemix",
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let cfg = RunConfig::load(path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let ds = match cfg.data_kind {
        DataKind::Blobs => gen_blobs(&cfg.blob_spec())?,
        DataKind::Rings => gen_rings(&cfg.ring_spec())?,
        DataKind::Idx => {
            for p in [&cfg.idx.images, &cfg.idx.labels] {
                if !p.is_file() {
                    return Err(CliError::Usage(format!("IDX file {} does not exist", p.display())));
                }
            }
            let nonzero = |v: usize| (v > 0).then_some(v);
            load_idx(&cfg.idx.images, &cfg.idx.labels, nonzero(cfg.idx.max_samples), nonzero(cfg.idx.downsample))?
        }
    };
    Ok(match cfg.noise_spec(ds.num_classes) {
        Some(spec) => ds.with_noise(&spec)?,
        None => ds,
    })
}

fn write_curve(dir: &RunDir, name: &str, curve: &[f64]) -> Result<()> {
    let rows: Vec<Vec<String>> = curve.iter().enumerate().map(|(i, v)| vec![(i + 1).to_string(), format!("{v}")]).collect();
    dir.write_with(name, |w| write_table(w, &["step", "loss"], &rows))?;
    Ok(())
}

fn write_model(dir: &RunDir, name: &str, m: &ModelTriple) -> Result<()> {
    dir.write_with(name, |w| m.save(w))?;
    Ok(())
}

fn write_record(dir: &RunDir, record: &RunRecord) -> Result<()> {
    dir.write_with(METRICS_FILE, |w| record.write_csv(w))?;
    let final_consistency = record.rows.last().map_or(f64::NAN, |r| r.consistency);
    let rows = vec![
        vec!["epochs".to_string(), record.rows.len().to_string()],
        vec!["best_acc".into(), format!("{}", record.best_acc)],
        vec!["last_acc".into(), format!("{}", record.last_acc)],
        vec!["warmup_acc".into(), format!("{}", record.warmup_acc)],
        vec!["warmup_consistency".into(), format!("{}", record.warmup_consistency)],
        vec!["final_consistency".into(), format!("{final_consistency}")],
    ];
    dir.write_with(SUMMARY_FILE, |w| write_table(w, &["metric", "value"], &rows))?;
    Ok(())
}

fn print_best_last(label: &str, record: &RunRecord) {
    println!("{label}: Best {:.2}  Last {:.2}", 100.0 * record.best_acc, 100.0 * record.last_acc);
}

pub fn gen(config: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let ds = load_dataset(&cfg)?;
    let dir = RunDir::create(&cfg, "gen")?;
    dir.write_with("dataset.csv", |w| ds.write_csv(w))?;
    println!(
        "{} train / {} test samples, {} classes, dim {}, label noise {:.3} -> {}",
        ds.len(),
        ds.test_labels.len(),
        ds.num_classes,
        ds.x.cols(),
        ds.noise_rate(),
        dir.root().display()
    );
    Ok(())
}

pub fn pretrain(config: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let data = load_dataset(&cfg)?.train_data();
    let dir = RunDir::create(&cfg, "pretrain")?;
    let init = initial_model(&data, cfg.train.seed)?;
    let (model, curve) = pretrain_selfcon(&data.x, &init, &cfg.train)?;
    write_model(&dir, "pretrained.ckpt", &model)?;
    write_curve(&dir, "pretrain_loss.csv", &curve)?;
    match (curve.first(), curve.last()) {
        (Some(a), Some(b)) => println!("SelfCon loss {a:.4} -> {b:.4} over {} steps", curve.len()),
        _ => println!("no pre-training steps configured"),
    }
    Ok(())
}

fn load_pretrained(path: &Path, data: &TrainData) -> Result<ModelTriple> {
    let f = File::open(path).map_err(|e| CliError::Usage(format!("cannot open checkpoint {}: {e}", path.display())))?;
    let m = ModelTriple::load(std::io::BufReader::new(f))?;
    if m.arch().input_dim != data.dim() || m.arch().num_classes != data.num_classes {
        return Err(CliError::Usage(format!(
            "checkpoint {} expects {} inputs and {} classes, data has {} and {}",
            path.display(),
            m.arch().input_dim,
            m.arch().num_classes,
            data.dim(),
            data.num_classes
        )));
    }
    Ok(m)
}

pub fn train(config: &Path, mode: TrainMode) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    match mode {
        TrainMode::Ce => {}
        TrainMode::Dividemix => {
            cfg.train.mode = Mode::Bare;
            cfg.train.pretrain_steps = 0;
        }
        TrainMode::Bare => cfg.train.mode = Mode::Bare,
        TrainMode::Cssl => cfg.train.mode = Mode::Cssl,
        TrainMode::SelfCon => cfg.train.mode = Mode::SelfCon,
        TrainMode::SupCon => cfg.train.mode = Mode::SupCon,
    }
    cfg.validate()?;
    let data = load_dataset(&cfg)?.train_data();
    let dir = RunDir::create(&cfg, &format!("train --mode {}", mode.name()))?;

    if mode == TrainMode::Ce {
        let (model, record) = train_ce_baseline(&data, &cfg.train)?;
        write_record(&dir, &record)?;
        write_model(&dir, "model.ckpt", &model)?;
        print_best_last("ce", &record);
        return Ok(());
    }

    let out = match (&cfg.pretrained_checkpoint, mode) {
        (Some(p), m) if m != TrainMode::Dividemix => {
            let base = load_pretrained(p, &data)?;
            train_codim_from(&data, &base, &cfg.train, &mut NoObserver)?
        }
        _ => train_codim(&data, &cfg.train, &mut NoObserver)?,
    };
    write_record(&dir, &out.record)?;
    write_model(&dir, "net_a.ckpt", &out.duo.net_a)?;
    write_model(&dir, "net_b.ckpt", &out.duo.net_b)?;
    if !out.pretrain_curve.is_empty() {
        write_curve(&dir, "pretrain_loss.csv", &out.pretrain_curve)?;
    }
    let final_data = data.with_labels(out.labels.clone());
    let partition = co_divide(&out.duo.net_b, &final_data, cfg.train.gmm_threshold)?;
    let flips = final_data.audit.as_ref().map(|a| a.corrupted(&final_data.labels));
    dir.write_with("partition.csv", |w| partition.write_csv(w, flips.as_deref()))?;
    print_best_last(mode.name(), &out.record);
    Ok(())
}

pub fn cssl(config: &Path, labeled_ratio: Option<f64>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(r) = labeled_ratio {
        cfg.labeled_ratio = r;
    }
    cfg.validate()?;
    let data = load_dataset(&cfg)?.train_data();
    let dir = RunDir::create(&cfg, "cssl")?;
    let split = SslSplit::stratified(&data, cfg.labeled_ratio, cfg.train.seed)?;
    let (model, record) = train_cssl(&split, &cfg.train)?;
    write_record(&dir, &record)?;
    write_model(&dir, "model.ckpt", &model)?;
    print_best_last(&format!("cssl ({} labeled)", split.labeled_y.len()), &record);
    Ok(())
}

/// Loss column of a CSV: the column named `loss`, or the only column.
fn read_losses(path: &Path) -> Result<Vec<f64>> {
    let f = File::open(path).map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))?;
    let (header, rows) = read_table(f).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let col = match header.iter().position(|h| h == "loss") {
        Some(c) => c,
        None if header.len() == 1 => 0,
        None => {
            return Err(CliError::Usage(format!(
                "{}: expected a 'loss' column or a single column, found {header:?}",
                path.display()
            )))
        }
    };
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            r[col]
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| CliError::Usage(format!("{}: row {}: '{}' is not a finite number", path.display(), i + 1, r[col])))
        })
        .collect()
}

pub fn partition(losses: &Path, threshold: f64, out: Option<&Path>) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(CliError::Usage(format!("--threshold must lie in (0, 1), got {threshold}")));
    }
    let values = min_max_normalize(&read_losses(losses)?);
    let gmm = fit_gmm_1d(&values)?;
    log::info!(
        "GMM means {:.4}/{:.4} weights {:.4}/{:.4} after {} iterations",
        gmm.means[0],
        gmm.means[1],
        gmm.weights[0],
        gmm.weights[1],
        gmm.iterations
    );
    let part = make_partition(&gmm, &values, threshold);
    match out {
        Some(p) => {
            let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            part.write_csv(std::io::BufWriter::new(f), None)?;
            eprintln!("{} of {} samples clean -> {}", part.clean_idx.len(), values.len(), p.display());
        }
        None => part.write_csv(std::io::stdout().lock(), None)?,
    }
    Ok(())
}

fn series(name: &str, record: &RunRecord, f: fn(&codim_core::trainers::EpochRow) -> f64) -> Option<Series> {
    let points: Vec<(f64, f64)> = record.rows.iter().map(|r| (r.epoch as f64, f(r))).collect();
    points.iter().any(|p| p.1.is_finite()).then(|| Series {
        name: name.into(),
        points,
    })
}

fn read_summary(path: &Path) -> Option<Vec<(String, String)>> {
    let (_, rows) = read_table(File::open(path).ok()?).ok()?;
    Some(rows.into_iter().filter(|r| r.len() == 2).map(|r| (r[0].clone(), r[1].clone())).collect())
}

pub fn report(run_dir: &Path) -> Result<()> {
    let metrics = run_dir.join(METRICS_FILE);
    let f = File::open(&metrics).map_err(|e| CliError::Usage(format!("cannot open {}: {e}", metrics.display())))?;
    let record = RunRecord::read_csv(f)?;
    if record.rows.is_empty() {
        return Err(CliError::Usage(format!("{} has no epochs", metrics.display())));
    }
    let plots: [(&str, &str, Vec<Option<Series>>); 3] = [
        (
            "accuracy.svg",
            "Test accuracy",
            vec![
                series("net A", &record, |r| r.test_acc_a),
                series("net B", &record, |r| r.test_acc_b),
                series("ensemble", &record, |r| r.test_acc_ensemble),
            ],
        ),
        (
            "losses.svg",
            "Training losses",
            vec![
                series("Lx", &record, |r| r.lx),
                series("Lu", &record, |r| r.lu),
                series("Lreg", &record, |r| r.lreg),
                series("Lcl", &record, |r| r.lcl),
            ],
        ),
        (
            "diagnostics.svg",
            "Partition AUC and consistency",
            vec![
                series("partition AUC", &record, |r| r.partition_auc),
                series("consistency", &record, |r| r.consistency),
            ],
        ),
    ];
    let mut written = Vec::new();
    for (file, title, s) in plots {
        let s: Vec<Series> = s.into_iter().flatten().collect();
        if s.is_empty() {
            continue;
        }
        let p = run_dir.join(file);
        std::fs::write(&p, svg_lines(title, &s)).with_context(|| format!("writing {}", p.display()))?;
        written.push(p);
    }

    let best = record
        .rows
        .iter()
        .fold(&record.rows[0], |b, r| if r.test_acc_ensemble > b.test_acc_ensemble { r } else { b });
    let last = record.rows.last().expect("non-empty");
    let mut table: Vec<(String, String)> = vec![
        ("epochs".into(), record.rows.len().to_string()),
        ("best_acc".into(), format!("{}", record.best_acc)),
        ("best_epoch".into(), best.epoch.to_string()),
        ("last_acc".into(), format!("{}", record.last_acc)),
        ("final_partition_auc".into(), format!("{}", last.partition_auc)),
        ("final_consistency".into(), format!("{}", last.consistency)),
    ];
    if let Some(summary) = read_summary(&run_dir.join(SUMMARY_FILE)) {
        for (k, v) in summary {
            if k.starts_with("warmup_") {
                table.push((k, v));
            }
        }
    }
    let rows: Vec<Vec<String>> = table.iter().map(|(k, v)| vec![k.clone(), v.clone()]).collect();
    let report_path = run_dir.join("report.csv");
    let f = File::create(&report_path).with_context(|| format!("creating {}", report_path.display()))?;
    write_table(f, &["metric", "value"], &rows)?;

    let mut stdout = std::io::stdout().lock();
    let width = table.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    for (k, v) in &table {
        writeln!(stdout, "{k:<width$}  {v}").context("writing summary")?;
    }
    for p in written.iter().chain(std::iter::once(&report_path)) {
        log::info!("wrote {}", p.display());
    }
    Ok(())
}

