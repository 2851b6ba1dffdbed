//! Anomaly scoring, thresholds, AUC-ROC, class gap and error heatmaps.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::{write_rgb, Label, LabeledImage};
use crate::error::{Error, Result};
use crate::models::{mse, Autoencoder};
use crate::tensor::{Real, Tensor};

/// Images per forward pass when scoring a set.
const SCORE_BATCH: usize = 32;

/// Reconstruction MSE of one `[3,H,W]` image. The CVAE decodes its mean.
pub fn reconstruction_score<T: Real>(model: &Autoencoder<T>, img: &Tensor<T>) -> Result<f64> {
    let out = model.reconstruct(img)?;
    mse(img, &out)
}

/// Scores every image, batching forward passes.
pub fn score_images(model: &Autoencoder<f32>, images: &[LabeledImage]) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(images.len());
    for chunk in images.chunks(SCORE_BATCH) {
        let refs: Vec<&Tensor<f32>> = chunk.iter().map(|i| &i.pixels).collect();
        let batch = Tensor::stack(&refs)?;
        let out = model.reconstruct(&batch)?;
        for i in 0..chunk.len() {
            scores.push(mse(&batch.index_outer(i)?, &out.index_outer(i)?)?);
        }
    }
    Ok(scores)
}

/// Linear-interpolation percentile (`p` in [0,100]) between order statistics.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Contract("percentile of an empty list".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::Contract(format!("percentile {p} outside [0,100]")));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Contract("percentile input contains NaN".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

/// The `pct` percentile of healthy validation scores.
pub fn choose_threshold(validation_scores: &[f64], pct: f64) -> Result<f64> {
    if validation_scores.is_empty() {
        return Err(Error::Contract(
            "no validation scores to set a threshold".into(),
        ));
    }
    if !(pct > 0.0 && pct <= 100.0) {
        return Err(Error::Config(format!(
            "threshold percentile {pct} outside (0,100]"
        )));
    }
    percentile(validation_scores, pct)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Healthy,
    Anomalous,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Healthy => "healthy",
            Verdict::Anomalous => "anomalous",
        }
    }
}

/// Healthy iff `score < threshold`.
pub fn classify(score: f64, threshold: f64) -> Verdict {
    if score < threshold {
        Verdict::Healthy
    } else {
        Verdict::Anomalous
    }
}

fn check_scores(name: &str, s: &[f64]) -> Result<()> {
    if s.is_empty() {
        return Err(Error::Contract(format!("no {name} scores")));
    }
    if s.iter().any(|v| v.is_nan()) {
        return Err(Error::Contract(format!("{name} scores contain NaN")));
    }
    Ok(())
}

/// P(diseased score > healthy score) + ½ P(tie), via average ranks.
pub fn auc_roc(healthy: &[f64], diseased: &[f64]) -> Result<f64> {
    check_scores("healthy", healthy)?;
    check_scores("diseased", diseased)?;
    let mut all: Vec<(f64, bool)> = healthy
        .iter()
        .map(|&s| (s, false))
        .chain(diseased.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let mean_rank = (i + 1 + j) as f64 / 2.0;
        rank_sum += mean_rank * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let (nh, nd) = (healthy.len() as f64, diseased.len() as f64);
    Ok((rank_sum - nd * (nd + 1.0) / 2.0) / (nh * nd))
}

/// Empirical ROC points `(fpr, tpr)` from the strictest threshold down.
pub fn roc_points(healthy: &[f64], diseased: &[f64]) -> Result<Vec<(f64, f64)>> {
    check_scores("healthy", healthy)?;
    check_scores("diseased", diseased)?;
    let mut thresholds: Vec<f64> = healthy.iter().chain(diseased).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let rate = |s: &[f64], t: f64| s.iter().filter(|&&v| v >= t).count() as f64 / s.len() as f64;
    let mut pts = vec![(0.0, 0.0)];
    pts.extend(
        thresholds
            .iter()
            .map(|&t| (rate(healthy, t), rate(diseased, t))),
    );
    Ok(pts)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassGap {
    pub mean_healthy: f64,
    pub mean_diseased: f64,
    /// `|mean_diseased − mean_healthy|`.
    pub delta: f64,
}

impl ClassGap {
    pub fn delta_x1e3(&self) -> f64 {
        self.delta * 1e3
    }
}

pub fn class_gap(healthy: &[f64], diseased: &[f64]) -> Result<ClassGap> {
    check_scores("healthy", healthy)?;
    check_scores("diseased", diseased)?;
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (mean_healthy, mean_diseased) = (mean(healthy), mean(diseased));
    Ok(ClassGap {
        mean_healthy,
        mean_diseased,
        delta: (mean_diseased - mean_healthy).abs(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageScore {
    pub path: PathBuf,
    pub label: Label,
    pub score: f64,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub healthy_count: usize,
    pub diseased_count: usize,
    pub mean_mse_healthy: Option<f64>,
    pub mean_mse_diseased: Option<f64>,
    pub mean_mse_healthy_x1e3: Option<f64>,
    pub mean_mse_diseased_x1e3: Option<f64>,
    pub delta: Option<f64>,
    pub delta_x1e3: Option<f64>,
    pub auc_roc: Option<f64>,
    pub threshold: f64,
    /// Fraction of images whose verdict matches their label.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyReport {
    pub entries: Vec<ImageScore>,
    pub threshold: f64,
}

impl AnomalyReport {
    pub fn new(scored: Vec<(PathBuf, Label, f64)>, threshold: f64) -> Result<Self> {
        if !threshold.is_finite() {
            return Err(Error::Contract(format!(
                "threshold {threshold} is not finite"
            )));
        }
        let entries = scored
            .into_iter()
            .map(|(path, label, score)| ImageScore {
                path,
                label,
                score,
                verdict: classify(score, threshold),
            })
            .collect();
        Ok(Self { entries, threshold })
    }

    pub fn scores(&self, label: Label) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.label == label)
            .map(|e| e.score)
            .collect()
    }

    /// Errors if either class is absent.
    pub fn gap(&self) -> Result<ClassGap> {
        class_gap(&self.scores(Label::Healthy), &self.scores(Label::Diseased))
    }

    pub fn auc(&self) -> Result<f64> {
        auc_roc(&self.scores(Label::Healthy), &self.scores(Label::Diseased))
    }

    pub fn accuracy(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        let correct = self
            .entries
            .iter()
            .filter(|e| {
                matches!(
                    (e.label, e.verdict),
                    (Label::Healthy, Verdict::Healthy) | (Label::Diseased, Verdict::Anomalous)
                )
            })
            .count();
        correct as f64 / self.entries.len() as f64
    }

    pub fn summary(&self) -> Summary {
        let h = self.scores(Label::Healthy);
        let d = self.scores(Label::Diseased);
        let mean = |s: &[f64]| (!s.is_empty()).then(|| s.iter().sum::<f64>() / s.len() as f64);
        let gap = self.gap().ok();
        Summary {
            healthy_count: h.len(),
            diseased_count: d.len(),
            mean_mse_healthy: mean(&h),
            mean_mse_diseased: mean(&d),
            mean_mse_healthy_x1e3: mean(&h).map(|m| m * 1e3),
            mean_mse_diseased_x1e3: mean(&d).map(|m| m * 1e3),
            delta: gap.map(|g| g.delta),
            delta_x1e3: gap.map(|g| g.delta_x1e3()),
            auc_roc: self.auc().ok(),
            threshold: self.threshold,
            accuracy: self.accuracy(),
        }
    }

    /// `path,label,score,verdict` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "path,label,score,verdict")?;
        for e in &self.entries {
            let path = e.path.display().to_string();
            let path = if path.contains([',', '"', '\n']) {
                format!("\"{}\"", path.replace('"', "\"\""))
            } else {
                path
            };
            writeln!(
                out,
                "{path},{},{:e},{}",
                e.label,
                e.score,
                e.verdict.as_str()
            )?;
        }
        Ok(())
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary()).expect("summary serializes")
    }
}

/// Per-pixel error normalized to [0,1], row-major `height × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Mean over channels of the squared difference, per pixel (unnormalized).
pub fn pixel_errors<T: Real>(
    img: &Tensor<T>,
    recon: &Tensor<T>,
) -> Result<(usize, usize, Vec<f64>)> {
    if img.shape() != recon.shape() {
        return Err(Error::shape(
            "pixel_errors",
            format!("{:?} vs {:?}", img.shape(), recon.shape()),
        ));
    }
    let (c, h, w) = match *img.shape() {
        [c, h, w] => (c, h, w),
        ref s => {
            return Err(Error::shape(
                "pixel_errors",
                format!("expected [C,H,W], got {s:?}"),
            ))
        }
    };
    let plane = h * w;
    let mut err = vec![0.0; plane];
    for ch in 0..c {
        for (p, e) in err.iter_mut().enumerate() {
            let d = img.data()[ch * plane + p].as_f64() - recon.data()[ch * plane + p].as_f64();
            *e += d * d;
        }
    }
    err.iter_mut().for_each(|e| *e /= c as f64);
    Ok((h, w, err))
}

/// Min-max normalization; a constant map becomes all zeros.
pub fn normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

pub fn localization_heatmap<T: Real>(img: &Tensor<T>, recon: &Tensor<T>) -> Result<Heatmap> {
    let (height, width, err) = pixel_errors(img, recon)?;
    Ok(Heatmap {
        height,
        width,
        values: normalize(&err),
    })
}

/// Clips at the `pct` percentile of the map and rescales to [0,1].
/// `pct` must lie in (50,100).
pub fn high_contrast(hm: &Heatmap, pct: f64) -> Result<Heatmap> {
    if !(pct > 50.0 && pct < 100.0) {
        return Err(Error::Config(format!(
            "high-contrast percentile {pct} outside (50,100)"
        )));
    }
    let q = percentile(&hm.values, pct)?;
    let lo = hm.values.iter().copied().fold(f64::INFINITY, f64::min);
    let values = if q <= lo {
        hm.values
            .iter()
            .map(|&v| if v > q { 1.0 } else { 0.0 })
            .collect()
    } else {
        hm.values
            .iter()
            .map(|&v| (v.min(q) - lo) / (q - lo))
            .collect()
    };
    Ok(Heatmap { values, ..*hm })
}

impl Heatmap {
    /// Interleaved RGB: 0 → blue (0,0,1), 1 → yellow (1,1,0).
    pub fn render(&self) -> Vec<u8> {
        let mut rgb = Vec::with_capacity(self.values.len() * 3);
        for &v in &self.values {
            let v = v.clamp(0.0, 1.0);
            let hi = (v * 255.0).round() as u8;
            let lo = ((1.0 - v) * 255.0).round() as u8;
            rgb.extend_from_slice(&[hi, hi, lo]);
        }
        rgb
    }

    /// PNG, or PPM when the extension is `.ppm`.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_rgb(path, &self.render(), self.width, self.height)
    }

    /// Indices of the `ceil(fraction · len)` largest values (ties by index).
    pub fn top_pixels(&self, fraction: f64) -> Vec<usize> {
        let k = ((self.values.len() as f64 * fraction).ceil() as usize).min(self.values.len());
        let mut idx: Vec<usize> = (0..self.values.len()).collect();
        idx.sort_by(|&a, &b| self.values[b].total_cmp(&self.values[a]).then(a.cmp(&b)));
        idx.truncate(k);
        idx
    }
}
