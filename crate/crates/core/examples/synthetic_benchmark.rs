//! Trains the three autoencoders on the synthetic leaf benchmark and prints
//! MSE, class gap, AUC-ROC, blob-localization overlap and how the diseased
//! error splits between blob and background pixels. An epoch count of 0
//! skips that model.
//!
//! Usage: `cargo run --release --example synthetic_benchmark [EPOCHS_CAE EPOCHS_CVAE EPOCHS_VQ]`

use std::time::Instant;

use anomaly_ae::data::synthetic::{SyntheticBenchmark, SyntheticConfig};
use anomaly_ae::data::LabeledImage;
use anomaly_ae::detect::{auc_roc, class_gap, localization_heatmap, score_images};
use anomaly_ae::models::{Autoencoder, ModelConfig, ModelKind};
use anomaly_ae::optim::{train, TrainBudget};

fn main() -> anomaly_ae::Result<()> {
    let args: Vec<usize> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("epoch counts are integers"))
        .collect();
    let bench = SyntheticBenchmark::generate(SyntheticConfig::default())?;
    let diseased: Vec<LabeledImage> = bench
        .test_diseased
        .iter()
        .map(|m| m.image.clone())
        .collect();
    for (i, kind) in ModelKind::ALL.into_iter().enumerate() {
        let mut cfg = ModelConfig::desk(kind);
        cfg.epochs = args.get(i).copied().unwrap_or(cfg.epochs);
        if cfg.epochs == 0 {
            continue;
        }
        let mut model = Autoencoder::<f32>::new(cfg.clone())?;
        let t0 = Instant::now();
        let report = train(
            &mut model,
            &bench.train,
            TrainBudget::Epochs(cfg.epochs),
            cfg.seed,
        )?;
        let secs = t0.elapsed().as_secs_f64();
        let h = score_images(&model, &bench.test_healthy)?;
        let d = score_images(&model, &diseased)?;
        let gap = class_gap(&h, &d)?;
        let auc = auc_roc(&h, &d)?;
        let mut overlap = 0.0;
        let (mut inside, mut outside) = (0.0, 0.0);
        for m in &bench.test_diseased {
            let recon = model.reconstruct(&m.image.pixels)?;
            let (_, _, err) = anomaly_ae::detect::pixel_errors(&m.image.pixels, &recon)?;
            inside += err
                .iter()
                .zip(&m.mask)
                .filter(|p| *p.1)
                .map(|p| p.0)
                .sum::<f64>()
                / 1024.0;
            outside += err
                .iter()
                .zip(&m.mask)
                .filter(|p| !*p.1)
                .map(|p| p.0)
                .sum::<f64>()
                / 1024.0;
            let hm = localization_heatmap(&m.image.pixels, &recon)?;
            let top = hm.top_pixels(0.05);
            overlap += top.iter().filter(|&&p| m.mask[p]).count() as f64 / top.len() as f64;
        }
        overlap /= bench.test_diseased.len() as f64;
        let nd = bench.test_diseased.len() as f64;
        println!(
            "  diseased MSE share x1e3: inside blob {:.3}, outside blob {:.3}",
            inside / nd * 1e3,
            outside / nd * 1e3
        );
        println!(
            "{kind:6} epochs {:3} time {secs:6.1}s loss {:.5} -> {:.5} | healthy {:.3} diseased {:.3} delta {:.3} (x1e3) | auc {auc:.3} | overlap {overlap:.2}",
            cfg.epochs,
            report.history[0],
            report.final_loss().unwrap_or(f64::NAN),
            gap.mean_healthy * 1e3,
            gap.mean_diseased * 1e3,
            gap.delta_x1e3(),
        );
    }
    Ok(())
}
