use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Cae,
    Cvae,
    Vqvae,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Cae, ModelKind::Cvae, ModelKind::Vqvae];

    /// Training length used when no budget is given: 200 / 100 / 50.
    pub fn default_epochs(self) -> usize {
        match self {
            ModelKind::Cae => 200,
            ModelKind::Cvae => 100,
            ModelKind::Vqvae => 50,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Cae => "cae",
            ModelKind::Cvae => "cvae",
            ModelKind::Vqvae => "vqvae",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "cae" => Ok(ModelKind::Cae),
            "cvae" => Ok(ModelKind::Cvae),
            "vqvae" => Ok(ModelKind::Vqvae),
            other => Err(Error::Config(format!(
                "unknown model kind {other:?} (expected cae, cvae or vqvae)"
            ))),
        }
    }
}

/// Input resolutions with a layer plan. 256 is the full architecture,
/// 32 a reduced variant with the same latent shape that trains on a CPU.
pub const FULL_SIZE: usize = 256;
pub const DESK_SIZE: usize = 32;

/// Architecture and training hyper-parameters of one autoencoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Square input extent H = W.
    pub image_size: usize,
    pub channels: usize,
    /// Encoded tensor (H̃, W̃, C̃).
    pub latent: (usize, usize, usize),
    /// Dense bottleneck length (CAE / CVAE).
    pub bottleneck: usize,
    /// Codebook size K (VQ-VAE).
    pub codebook_size: usize,
    /// Commitment weight β (VQ-VAE).
    pub beta: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Defaults for the given kind and input size.
    pub fn new(kind: ModelKind, image_size: usize) -> Self {
        Self {
            kind,
            image_size,
            channels: 3,
            latent: (4, 4, 64),
            bottleneck: 16,
            codebook_size: if image_size == FULL_SIZE { 512 } else { 128 },
            beta: 0.25,
            epochs: kind.default_epochs(),
            learning_rate: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }

    pub fn full(kind: ModelKind) -> Self {
        Self::new(kind, FULL_SIZE)
    }

    pub fn desk(kind: ModelKind) -> Self {
        Self::new(kind, DESK_SIZE)
    }

    pub fn input_len(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }

    pub fn latent_len(&self) -> usize {
        self.latent.0 * self.latent.1 * self.latent.2
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size != FULL_SIZE && self.image_size != DESK_SIZE {
            return Err(Error::Config(format!(
                "image size must be {FULL_SIZE} or {DESK_SIZE}, got {}",
                self.image_size
            )));
        }
        if self.channels != 3 {
            return Err(Error::Config(format!(
                "expected 3 channels, got {}",
                self.channels
            )));
        }
        if self.latent != (4, 4, 64) {
            return Err(Error::Config(format!(
                "latent shape {:?} has no layer plan; expected (4, 4, 64)",
                self.latent
            )));
        }
        if self.latent_len() >= self.input_len() {
            return Err(Error::Config(
                "latent must be smaller than the input".into(),
            ));
        }
        if self.bottleneck * 64 != self.latent_len() {
            return Err(Error::Config(format!(
                "bottleneck {} must be latent length / 64 = {}",
                self.bottleneck,
                self.latent_len() / 64
            )));
        }
        if self.codebook_size == 0 {
            return Err(Error::Config("codebook size must be ≥ 1".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "beta must be > 0, got {}",
                self.beta
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be > 0".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and ≥ 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be > 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        for kind in ModelKind::ALL {
            ModelConfig::full(kind).validate().unwrap();
            ModelConfig::desk(kind).validate().unwrap();
        }
        assert_eq!(ModelConfig::full(ModelKind::Vqvae).codebook_size, 512);
        assert_eq!(ModelConfig::full(ModelKind::Cae).epochs, 200);
        assert_eq!(ModelConfig::full(ModelKind::Cvae).epochs, 100);
        assert_eq!(ModelConfig::full(ModelKind::Vqvae).epochs, 50);
    }

    #[test]
    fn rejects_bad_fields() {
        let mut c = ModelConfig::desk(ModelKind::Vqvae);
        c.beta = 0.0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk(ModelKind::Vqvae);
        c.codebook_size = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk(ModelKind::Cae);
        c.image_size = 64;
        assert!(c.validate().is_err());
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("VQ-VAE".parse::<ModelKind>().unwrap(), ModelKind::Vqvae);
        assert_eq!("cae".parse::<ModelKind>().unwrap(), ModelKind::Cae);
        assert!("gan".parse::<ModelKind>().is_err());
    }
}
