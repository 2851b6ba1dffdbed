//! Labeled image datasets: loading from a `healthy/` + `diseased/` tree,
//! seeded splitting with healthy-only training, and offline augmentation.

mod image_io;
pub mod synthetic;
mod transform;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use image_io::{
    decode_ppm, is_supported, read_image, read_pgm, tensor_to_rgb8, write_image, write_pgm,
    write_ppm, write_rgb,
};
pub use transform::{augment, resize, Augment};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Healthy,
    Diseased,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Healthy => "healthy",
            Label::Diseased => "diseased",
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One `[3,H,W]` image with values in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub pixels: Tensor<f32>,
    pub label: Label,
    pub path: PathBuf,
    /// Set on augmented copies; `None` for source images.
    pub augmentation: Option<Augment>,
}

impl LabeledImage {
    pub fn new(pixels: Tensor<f32>, label: Label, path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        if pixels.rank() != 3 || pixels.shape()[0] != 3 {
            return Err(Error::shape(
                "labeled_image",
                format!(
                    "{}: expected [3,H,W], got {:?}",
                    path.display(),
                    pixels.shape()
                ),
            ));
        }
        if pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract(format!(
                "{}: pixel values outside [0,1]",
                path.display()
            )));
        }
        Ok(Self {
            pixels,
            label,
            path,
            augmentation: None,
        })
    }

    /// `path` plus the augmentation tag, unique within an expanded set.
    pub fn key(&self) -> String {
        match self.augmentation {
            Some(a) => format!("{}#{a}", self.path.display()),
            None => self.path.display().to_string(),
        }
    }
}

/// Validation and test fractions of the healthy pool; training gets the rest.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitFractions {
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            validation: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let ok = |f: f64| f.is_finite() && (0.0..1.0).contains(&f);
        if !ok(self.validation) || !ok(self.test) || self.validation + self.test >= 1.0 {
            return Err(Error::Config(format!(
                "split fractions must be in [0,1) with a non-empty training share, got {}/{}",
                self.validation, self.test
            )));
        }
        Ok(())
    }

    /// `(train, validation, test)` sizes for a pool of `n`.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        // the small epsilon keeps 0.1 · 850 from landing just below 85
        let take = |f: f64| ((n as f64) * f + 1e-9).floor() as usize;
        let val = take(self.validation);
        let test = take(self.test);
        (n - val - test, val, test)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test_healthy: usize,
    pub test_diseased: usize,
}

#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub train: Vec<LabeledImage>,
    pub validation: Vec<LabeledImage>,
    /// Healthy images first, then diseased.
    pub test: Vec<LabeledImage>,
    pub warnings: Vec<String>,
}

impl DatasetSplit {
    pub fn counts(&self) -> SplitCounts {
        let diseased = self
            .test
            .iter()
            .filter(|i| i.label == Label::Diseased)
            .count();
        SplitCounts {
            train: self.train.len(),
            validation: self.validation.len(),
            test_healthy: self.test.len() - diseased,
            test_diseased: diseased,
        }
    }

    pub fn test_healthy(&self) -> impl Iterator<Item = &LabeledImage> {
        self.test.iter().filter(|i| i.label == Label::Healthy)
    }

    pub fn test_diseased(&self) -> impl Iterator<Item = &LabeledImage> {
        self.test.iter().filter(|i| i.label == Label::Diseased)
    }

    /// Fails if a diseased image sits in train or validation.
    pub fn check_healthy_only(&self) -> Result<()> {
        for img in self.train.iter().chain(&self.validation) {
            if img.label != Label::Healthy {
                return Err(Error::Contract(format!(
                    "diseased image {} in a healthy-only split",
                    img.path.display()
                )));
            }
        }
        Ok(())
    }
}

/// Splits pre-loaded pools. The healthy pool is shuffled with `seed` and
/// cut into train/validation/test; diseased images are shuffled on a
/// separate stream and truncated to the healthy test count.
pub fn split_pools(
    mut healthy: Vec<LabeledImage>,
    mut diseased: Vec<LabeledImage>,
    fractions: SplitFractions,
    seed: u64,
) -> Result<DatasetSplit> {
    fractions.validate()?;
    if let Some(bad) = healthy.iter().find(|i| i.label != Label::Healthy) {
        return Err(Error::Contract(format!(
            "{} is labeled diseased but sits in the healthy pool",
            bad.path.display()
        )));
    }
    if let Some(bad) = diseased.iter().find(|i| i.label != Label::Diseased) {
        return Err(Error::Contract(format!(
            "{} is labeled healthy but sits in the diseased pool",
            bad.path.display()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    healthy.shuffle(&mut rng);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    diseased.shuffle(&mut rng);

    let (n_train, n_val, n_test) = fractions.counts(healthy.len());
    let mut warnings = Vec::new();
    if n_train == 0 {
        return Err(Error::Config(format!(
            "{} healthy images leave nothing for training",
            healthy.len()
        )));
    }
    let test_healthy = healthy.split_off(n_train + n_val);
    let validation = healthy.split_off(n_train);
    if diseased.is_empty() {
        warnings.push("no diseased images: test set is healthy only".to_string());
    } else if diseased.len() < n_test {
        warnings.push(format!(
            "only {} diseased images for {} healthy test images",
            diseased.len(),
            n_test
        ));
    }
    diseased.truncate(n_test);
    for w in &warnings {
        log::warn!("{w}");
    }
    let mut test = test_healthy;
    test.extend(diseased);
    let split = DatasetSplit {
        train: healthy,
        validation,
        test,
        warnings,
    };
    split.check_healthy_only()?;
    Ok(split)
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "missing class directory"),
        ));
    }
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_supported(&path) {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

fn load_class(dir: &Path, label: Label, size: Option<(usize, usize)>) -> Result<Vec<LabeledImage>> {
    let paths = list_images(dir)?;
    let load = |p: &PathBuf| -> Result<LabeledImage> {
        let mut pixels = read_image(p)?;
        if let Some(target) = size {
            pixels = resize(&pixels, target)?;
        }
        LabeledImage::new(pixels, label, p.clone())
    };
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(paths.len().max(1));
    if workers <= 1 {
        return paths.iter().map(load).collect();
    }
    let chunk = paths.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = paths
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(load).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(paths.len());
        for h in handles {
            out.extend(h.join().expect("image decode worker panicked")?);
        }
        Ok(out)
    })
}

/// Loads `<root>/healthy` and `<root>/diseased`, optionally resizing every
/// image to `size`, and splits them (see [`split_pools`]).
pub fn load_dataset(
    root: &Path,
    fractions: SplitFractions,
    seed: u64,
    size: Option<(usize, usize)>,
) -> Result<DatasetSplit> {
    fractions.validate()?;
    let healthy = load_class(&root.join("healthy"), Label::Healthy, size)?;
    let diseased = load_class(&root.join("diseased"), Label::Diseased, size)?;
    split_pools(healthy, diseased, fractions, seed)
}

/// Returns the originals followed by every `(image, op)` variant, shuffled
/// with `seed`. Size is `train.len() · (1 + ops.len())`.
pub fn expand_training_set(
    train: &[LabeledImage],
    ops: &[Augment],
    seed: u64,
) -> Result<Vec<LabeledImage>> {
    if ops.is_empty() {
        return Ok(train.to_vec());
    }
    let mut out = train.to_vec();
    for img in train {
        for &op in ops {
            out.push(LabeledImage {
                pixels: augment(&img.pixels, op)?,
                label: img.label,
                path: img.path.clone(),
                augmentation: Some(op),
            });
        }
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(n: usize, label: Label) -> Vec<LabeledImage> {
        (0..n)
            .map(|i| {
                let px = Tensor::full(vec![3, 2, 2], (i % 7) as f32 / 7.0);
                LabeledImage::new(px, label, format!("{label}/{i:04}.png")).unwrap()
            })
            .collect()
    }

    #[test]
    fn split_counts_for_851() {
        let s = split_pools(
            pool(851, Label::Healthy),
            pool(200, Label::Diseased),
            SplitFractions::default(),
            7,
        )
        .unwrap();
        let c = s.counts();
        assert_eq!(
            (c.train, c.validation, c.test_healthy, c.test_diseased),
            (681, 85, 85, 85)
        );
        assert!(s.warnings.is_empty());
    }

    #[test]
    fn no_diseased_warns() {
        let s = split_pools(
            pool(10, Label::Healthy),
            vec![],
            SplitFractions::default(),
            1,
        )
        .unwrap();
        assert_eq!(s.counts().test_diseased, 0);
        assert_eq!(s.warnings.len(), 1);
    }

    #[test]
    fn mislabeled_pool_rejected() {
        let err = split_pools(
            pool(10, Label::Diseased),
            vec![],
            SplitFractions::default(),
            1,
        );
        assert!(err.is_err());
    }

    #[test]
    fn expand_counts_and_keys() {
        let train = pool(10, Label::Healthy);
        assert_eq!(
            expand_training_set(&train, &[Augment::FlipH], 0)
                .unwrap()
                .len(),
            20
        );
        assert_eq!(expand_training_set(&train, &[], 0).unwrap(), train);
        let all = expand_training_set(&train, &Augment::ALL, 0).unwrap();
        assert_eq!(all.len(), 60);
        let keys: std::collections::HashSet<_> = all.iter().map(|i| i.key()).collect();
        assert_eq!(keys.len(), 60);
    }

    #[test]
    fn bad_fractions() {
        let f = SplitFractions {
            validation: 0.6,
            test: 0.5,
        };
        assert!(f.validate().is_err());
    }
}
