use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anomaly_ae::checkpoint::{self, TrainingMeta};
use anomaly_ae::data::synthetic::{SyntheticBenchmark, SyntheticConfig};
use anomaly_ae::data::{
    expand_training_set, load_dataset, read_image, resize, write_image, DatasetSplit, Label,
};
use anomaly_ae::detect::{
    choose_threshold, high_contrast, localization_heatmap, roc_points, score_images, AnomalyReport,
};
use anomaly_ae::models::{mse, Autoencoder, ModelKind};
use anomaly_ae::optim::{train as fit, write_loss_csv, TrainBudget, TrainReport};
use serde::Serialize;

use crate::config::{CompareMode, ConfigError, RunConfig};

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or configuration (exit 2).
    Usage(String),
    Core(anomaly_ae::Error),
    Io(PathBuf, std::io::Error),
    /// Already printed; exit with this code.
    Reported(u8),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(anomaly_ae::Error::Config(_)) => 2,
            CliError::Reported(c) => *c,
            _ => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(p, e) => write!(f, "{}: {e}", p.display()),
            CliError::Reported(c) => write!(f, "exit {c}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.0)
    }
}

impl From<anomaly_ae::Error> for CliError {
    fn from(e: anomaly_ae::Error) -> Self {
        CliError::Core(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{what} {} not found",
            path.display()
        )))
    }
}

fn load_split(cfg: &RunConfig, size: usize) -> Result<DatasetSplit> {
    let root = cfg.require_data()?;
    if !root.is_dir() {
        return Err(CliError::Usage(format!(
            "dataset directory {} not found",
            root.display()
        )));
    }
    let split = load_dataset(root, cfg.fractions, cfg.seed, Some((size, size)))?;
    for w in &split.warnings {
        eprintln!("warning: {w}");
    }
    Ok(split)
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(io(path, fs::File::create(path))?))
}

fn budget_for(cfg: &RunConfig, epochs: usize) -> TrainBudget {
    match cfg.time_budget {
        Some(seconds) => TrainBudget::WallClock {
            seconds,
            max_epochs: None,
        },
        None => TrainBudget::Epochs(epochs),
    }
}

fn train_model(
    cfg: &RunConfig,
    kind: ModelKind,
    split: &DatasetSplit,
    budget: TrainBudget,
) -> Result<(Autoencoder<f32>, TrainReport)> {
    let mcfg = cfg.model_config(kind);
    mcfg.validate()?;
    let train_set = expand_training_set(&split.train, &cfg.augment, cfg.seed)?;
    let mut model = Autoencoder::<f32>::new(mcfg)?;
    let report = fit(&mut model, &train_set, budget, cfg.seed)?;
    if report.overran {
        eprintln!("warning: one epoch already exceeds the time budget");
    }
    Ok((model, report))
}

fn meta(report: &TrainReport, seed: u64) -> TrainingMeta {
    TrainingMeta {
        epochs_run: report.epochs_completed,
        final_loss: report.final_loss(),
        seed,
    }
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let split = load_split(cfg, cfg.size)?;
    let c = split.counts();
    println!(
        "data: {} train, {} validation, {} + {} test",
        c.train, c.validation, c.test_healthy, c.test_diseased
    );
    let epochs = cfg.model_config(cfg.model).epochs;
    let (model, report) = train_model(cfg, cfg.model, &split, budget_for(cfg, epochs))?;
    io(&cfg.out, fs::create_dir_all(&cfg.out))?;
    let ckpt = cfg.checkpoint_path();
    checkpoint::save(&ckpt, &model, &meta(&report, cfg.seed))?;
    let loss_path = cfg.out.join("loss.csv");
    let mut w = create_file(&loss_path)?;
    io(&loss_path, write_loss_csv(&report.history, &mut w))?;
    io(&loss_path, w.flush())?;
    println!(
        "trained {} for {} epochs in {:.1}s, final loss {:.6}",
        cfg.model,
        report.epochs_completed,
        report.elapsed.as_secs_f64(),
        report.final_loss().unwrap_or(f64::NAN)
    );
    println!("checkpoint: {}", ckpt.display());
    println!("loss history: {}", loss_path.display());
    Ok(())
}

fn build_report(
    model: &Autoencoder<f32>,
    split: &DatasetSplit,
    percentile: f64,
) -> Result<AnomalyReport> {
    if split.validation.is_empty() {
        return Err(CliError::Usage(
            "validation split is empty; add images or raise val-fraction".into(),
        ));
    }
    let val = score_images(model, &split.validation)?;
    let threshold = choose_threshold(&val, percentile)?;
    let scores = score_images(model, &split.test)?;
    let rows = split
        .test
        .iter()
        .zip(scores)
        .map(|(img, s)| (img.path.clone(), img.label, s))
        .collect();
    Ok(AnomalyReport::new(rows, threshold)?)
}

pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    let ckpt_path = cfg.checkpoint_path();
    require_file(&ckpt_path, "checkpoint")?;
    let ck = checkpoint::load(&ckpt_path)?;
    let split = load_split(cfg, ck.model.config().image_size)?;
    let report = build_report(&ck.model, &split, cfg.threshold_percentile)?;
    io(&cfg.out, fs::create_dir_all(&cfg.out))?;

    let csv = cfg.out.join("report.csv");
    let mut w = create_file(&csv)?;
    io(&csv, report.write_csv(&mut w))?;
    io(&csv, w.flush())?;
    let json = cfg.out.join("summary.json");
    io(&json, fs::write(&json, report.summary_json()))?;
    let healthy = report.scores(Label::Healthy);
    let diseased = report.scores(Label::Diseased);
    if !healthy.is_empty() && !diseased.is_empty() {
        let roc = cfg.out.join("roc.csv");
        let mut w = create_file(&roc)?;
        io(&roc, writeln!(w, "fpr,tpr"))?;
        for (fpr, tpr) in roc_points(&healthy, &diseased)? {
            io(&roc, writeln!(w, "{fpr},{tpr}"))?;
        }
        io(&roc, w.flush())?;
    }

    let s = report.summary();
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!("model: {}", ck.model.kind());
    println!("threshold: {:.6e}", s.threshold);
    println!(
        "MSE x1e3: healthy {} ({} images), diseased {} ({} images)",
        show(s.mean_mse_healthy_x1e3),
        s.healthy_count,
        show(s.mean_mse_diseased_x1e3),
        s.diseased_count
    );
    println!("delta x1e3: {}", show(s.delta_x1e3));
    println!("AUC-ROC: {}", show(s.auc_roc));
    println!("accuracy: {:.4}", s.accuracy);
    println!("report: {}, {}", csv.display(), json.display());
    Ok(())
}

pub fn localize(cfg: &RunConfig) -> Result<()> {
    let image = cfg
        .image
        .as_deref()
        .ok_or_else(|| CliError::Usage("localize needs --image FILE".into()))?;
    require_file(image, "image")?;
    let ckpt_path = cfg.checkpoint_path();
    require_file(&ckpt_path, "checkpoint")?;
    let ck = checkpoint::load(&ckpt_path)?;
    let size = ck.model.config().image_size;
    let pixels = resize(&read_image(image)?, (size, size))?;
    let recon = ck.model.reconstruct(&pixels)?;
    let score = mse(&pixels, &recon)?;
    let hm = localization_heatmap(&pixels, &recon)?;

    io(&cfg.out, fs::create_dir_all(&cfg.out))?;
    let stem = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let heat = cfg.out.join(format!("{stem}_heatmap.png"));
    hm.write(&heat)?;
    let rec_path = cfg.out.join(format!("{stem}_reconstruction.png"));
    write_image(&rec_path, &recon)?;
    println!("score (MSE): {score:.6e}");
    println!("heatmap: {}", heat.display());
    println!("reconstruction: {}", rec_path.display());
    if cfg.high_contrast {
        let hc = high_contrast(&hm, cfg.contrast_percentile)?;
        let hc_path = cfg.out.join(format!("{stem}_heatmap_high_contrast.png"));
        hc.write(&hc_path)?;
        println!("high-contrast heatmap: {}", hc_path.display());
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
struct CompareRow {
    model: ModelKind,
    epochs: usize,
    train_seconds: f64,
    healthy_x1e3: f64,
    diseased_x1e3: f64,
    delta_x1e3: f64,
    auc_roc: f64,
}

/// Median of a non-empty list.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn write_rows(out: &Path, rows: &[CompareRow]) -> Result<()> {
    let csv = out.join("compare.csv");
    let mut w = create_file(&csv)?;
    io(
        &csv,
        writeln!(
            w,
            "model,epochs,train_seconds,healthy_x1e3,diseased_x1e3,delta_x1e3,auc_roc"
        ),
    )?;
    for r in rows {
        io(
            &csv,
            writeln!(
                w,
                "{},{},{:.3},{:.4},{:.4},{:.4},{:.4}",
                r.model,
                r.epochs,
                r.train_seconds,
                r.healthy_x1e3,
                r.diseased_x1e3,
                r.delta_x1e3,
                r.auc_roc
            ),
        )?;
    }
    io(&csv, w.flush())?;
    let json = out.join("compare.json");
    let text = serde_json::to_string_pretty(rows).expect("rows serialize");
    io(&json, fs::write(&json, text))
}

pub fn compare(cfg: &RunConfig) -> Result<()> {
    if cfg.mode == CompareMode::TimeEquivalent && cfg.time_budget.is_some() {
        return Err(CliError::Usage(
            "time-equivalent mode measures its own budget; drop --time-budget".into(),
        ));
    }
    let split = load_split(cfg, cfg.size)?;
    io(&cfg.out, fs::create_dir_all(&cfg.out))?;

    // the VQ-VAE runs first so its training time can set the others' budget
    let order = [ModelKind::Vqvae, ModelKind::Cae, ModelKind::Cvae];
    let mut te_seconds = None;
    let mut rows: Vec<CompareRow> = Vec::new();
    println!(
        "{:<6} {:>6} {:>9} {:>12} {:>13} {:>10} {:>8}",
        "model", "epochs", "time[s]", "healthy e-3", "diseased e-3", "delta e-3", "AUC"
    );
    for kind in order {
        let budget = match (cfg.mode, te_seconds) {
            (CompareMode::TimeEquivalent, Some(seconds)) => TrainBudget::WallClock {
                seconds,
                max_epochs: None,
            },
            _ => budget_for(cfg, cfg.model_config(kind).epochs),
        };
        let mut times = Vec::with_capacity(cfg.repeat);
        let mut trained = None;
        for _ in 0..cfg.repeat {
            let start = Instant::now();
            let run = train_model(cfg, kind, &split, budget);
            times.push(start.elapsed().as_secs_f64());
            match run {
                Ok(r) => trained = Some(r),
                Err(e) => {
                    write_rows(&cfg.out, &rows)?;
                    return Err(e);
                }
            }
        }
        let (model, report) = trained.expect("repeat ≥ 1");
        let seconds = median(&times);
        if kind == ModelKind::Vqvae {
            te_seconds = Some(seconds);
        }
        let result = build_report(&model, &split, cfg.threshold_percentile).and_then(|r| {
            let gap = r.gap()?;
            let auc = r.auc()?;
            checkpoint::save(
                &cfg.out.join(format!("{kind}.lae")),
                &model,
                &meta(&report, cfg.seed),
            )?;
            Ok(CompareRow {
                model: kind,
                epochs: report.epochs_completed,
                train_seconds: seconds,
                healthy_x1e3: gap.mean_healthy * 1e3,
                diseased_x1e3: gap.mean_diseased * 1e3,
                delta_x1e3: gap.delta_x1e3(),
                auc_roc: auc,
            })
        });
        let row = match result {
            Ok(row) => row,
            Err(e) => {
                write_rows(&cfg.out, &rows)?;
                return Err(e);
            }
        };
        println!(
            "{:<6} {:>6} {:>9.2} {:>12.4} {:>13.4} {:>10.4} {:>8.4}",
            row.model,
            row.epochs,
            row.train_seconds,
            row.healthy_x1e3,
            row.diseased_x1e3,
            row.delta_x1e3,
            row.auc_roc
        );
        rows.push(row);
        write_rows(&cfg.out, &rows)?;
    }
    rows.sort_by_key(|r| ModelKind::ALL.iter().position(|k| *k == r.model));
    write_rows(&cfg.out, &rows)?;
    println!("table: {}", cfg.out.join("compare.csv").display());
    Ok(())
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let bench = SyntheticBenchmark::generate(SyntheticConfig {
        size: cfg.size,
        seed: cfg.seed,
        ..SyntheticConfig::default()
    })?;
    io(&cfg.out, fs::create_dir_all(&cfg.out))?;
    let written = bench.write(&cfg.out)?;
    println!(
        "wrote {} images ({} healthy, {} diseased with masks) to {}",
        written.len(),
        written.len() - bench.test_diseased.len(),
        bench.test_diseased.len(),
        cfg.out.display()
    );
    Ok(())
}
