//! Adam and the mini-batch training loops.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Label, LabeledImage};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::models::{Autoencoder, Noise};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers and step counter of Adam.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update of every parameter from its `grad`
    /// slot. Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        let tensors = params.tensors_mut();
        if self.first.is_empty() {
            self.first = tensors.iter().map(|t| vec![T::zero(); t.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != tensors.len()
            || self
                .first
                .iter()
                .zip(tensors.iter())
                .any(|(m, t)| m.len() != t.numel())
        {
            return Err(Error::shape(
                "adam_step",
                "parameter set differs from the one the moments were built for",
            ));
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let lr = T::from_f64_lossy(c.lr);
        let eps = T::from_f64_lossy(c.eps);
        let inv_bc1 = T::from_f64_lossy(1.0 / bc1);
        let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
        for ((t, m), v) in tensors
            .iter_mut()
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let Some(grad) = t.grad().map(<[T]>::to_vec) else {
                continue;
            };
            for (((p, &g), mi), vi) in t
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                let m_hat = *mi * inv_bc1;
                let v_hat = *vi * inv_bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// How long to train.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TrainBudget {
    Epochs(usize),
    /// Whole epochs until the next one would overrun `seconds`, optionally
    /// capped at `max_epochs`.
    WallClock {
        seconds: f64,
        max_epochs: Option<usize>,
    },
}

impl TrainBudget {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TrainBudget::Epochs(0) => Err(Error::Config("epoch budget must be > 0".into())),
            TrainBudget::WallClock { seconds, .. } if !(seconds > 0.0 && seconds.is_finite()) => {
                Err(Error::Config(format!(
                    "time budget must be > 0 s, got {seconds}"
                )))
            }
            TrainBudget::WallClock {
                max_epochs: Some(0),
                ..
            } => Err(Error::Config("epoch cap must be > 0".into())),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean training loss of each completed epoch.
    pub history: Vec<f64>,
    pub epochs_completed: usize,
    pub steps: usize,
    /// The first epoch alone exceeded the wall-clock budget.
    pub overran: bool,
    pub elapsed: Duration,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.history.last().copied()
    }
}

/// Time elapsed since training started.
pub trait Clock {
    fn elapsed(&mut self) -> Duration;
}

pub struct WallClock(Instant);

impl WallClock {
    pub fn start() -> Self {
        Self(Instant::now())
    }
}

impl Clock for WallClock {
    fn elapsed(&mut self) -> Duration {
        self.0.elapsed()
    }
}

fn assemble_batch<T: Real>(images: &[&LabeledImage]) -> Result<Tensor<T>> {
    for img in images {
        if img.label != Label::Healthy {
            return Err(Error::Contract(format!(
                "diseased image {} reached a training batch",
                img.path.display()
            )));
        }
    }
    let refs: Vec<&Tensor<f32>> = images.iter().map(|i| &i.pixels).collect();
    Ok(Tensor::stack(&refs)?.cast())
}

/// Trains `model` on healthy images with Adam at the configured learning
/// rate and batch size, reshuffling with a seeded generator every epoch.
pub fn train<T: Real>(
    model: &mut Autoencoder<T>,
    train_set: &[LabeledImage],
    budget: TrainBudget,
    seed: u64,
) -> Result<TrainReport> {
    train_with_clock(model, train_set, budget, seed, &mut WallClock::start())
}

/// Wall-clock training: whole epochs while the next one fits in `seconds`.
pub fn train_time_budget<T: Real>(
    model: &mut Autoencoder<T>,
    train_set: &[LabeledImage],
    seconds: f64,
    seed: u64,
) -> Result<TrainReport> {
    train(
        model,
        train_set,
        TrainBudget::WallClock {
            seconds,
            max_epochs: None,
        },
        seed,
    )
}

/// [`train`] with an injectable clock.
pub fn train_with_clock<T: Real>(
    model: &mut Autoencoder<T>,
    train_set: &[LabeledImage],
    budget: TrainBudget,
    seed: u64,
    clock: &mut dyn Clock,
) -> Result<TrainReport> {
    budget.validate()?;
    if train_set.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if let Some(bad) = train_set.iter().find(|i| i.label != Label::Healthy) {
        return Err(Error::Contract(format!(
            "training set contains diseased image {}",
            bad.path.display()
        )));
    }
    let batch_size = model.config().batch_size;
    let mut adam = AdamState::<T>::new(AdamConfig::with_lr(model.config().learning_rate));
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x05EE_D0FA_015E);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let start = clock.elapsed();
    let mut report = TrainReport {
        history: Vec::new(),
        epochs_completed: 0,
        steps: 0,
        overran: false,
        elapsed: Duration::ZERO,
    };

    loop {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch_size) {
            let images: Vec<&LabeledImage> = chunk.iter().map(|&i| &train_set[i]).collect();
            let x = assemble_batch::<T>(&images)?;
            let mut g = Graph::new();
            let p = model.params().bind(&mut g);
            let xv = g.constant(x);
            let pass = model.forward(&mut g, &p, xv, Noise::Sample(&mut noise_rng))?;
            let loss = g.value(pass.loss).item()?.as_f64();
            if !loss.is_finite() {
                return Err(Error::Contract(format!(
                    "non-finite loss at epoch {}",
                    report.epochs_completed + 1
                )));
            }
            total += loss * chunk.len() as f64;
            let grads = g.backward(pass.loss)?;
            model.params_mut().load_grads(&grads, &p);
            adam.step(model.params_mut())?;
            report.steps += 1;
        }
        let epoch_loss = total / train_set.len() as f64;
        report.history.push(epoch_loss);
        report.epochs_completed += 1;
        let elapsed = clock.elapsed().saturating_sub(start);
        report.elapsed = elapsed;
        log::debug!(
            "{} epoch {} loss {:.6e}",
            model.kind(),
            report.epochs_completed,
            epoch_loss
        );
        match budget {
            TrainBudget::Epochs(n) => {
                if report.epochs_completed >= n {
                    break;
                }
            }
            TrainBudget::WallClock {
                seconds,
                max_epochs,
            } => {
                let spent = elapsed.as_secs_f64();
                if report.epochs_completed == 1 && spent > seconds {
                    report.overran = true;
                }
                let per_epoch = spent / report.epochs_completed as f64;
                if spent + per_epoch > seconds
                    || max_epochs.is_some_and(|m| report.epochs_completed >= m)
                {
                    break;
                }
            }
        }
    }
    for t in model.params_mut().tensors_mut() {
        t.set_grad(None).expect("clearing a gradient");
    }
    Ok(report)
}

/// Writes `epoch,loss` rows (epochs counted from 1).
pub fn write_loss_csv<W: Write>(history: &[f64], mut out: W) -> std::io::Result<()> {
    writeln!(out, "epoch,loss")?;
    for (i, l) in history.iter().enumerate() {
        writeln!(out, "{},{}", i + 1, l)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add(
            "w",
            Tensor::new(vec![values.len()], values.to_vec()).unwrap(),
        );
        s
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut s = store(&[1.0, -2.0]);
        s.tensors_mut()[0].set_grad(Some(vec![0.0, 0.0])).unwrap();
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut s).unwrap();
        assert_eq!(s.tensors_mut()[0].data(), &[1.0, -2.0]);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(&[0.0, 5.0]);
        s.tensors_mut()[0].set_grad(Some(vec![1.0, 1.0])).unwrap();
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut s).unwrap();
        // m̂ = v̂ = 1, step = lr / (1 + ε)
        let step = 1e-3 / (1.0 + 1e-8);
        let d = s.tensors_mut()[0].data().to_vec();
        assert!((d[0] + step).abs() < 1e-15);
        assert!((d[1] - (5.0 - step)).abs() < 1e-15);
        assert!((step - 9.99999990e-4).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut s = store(&[0.3, 0.7]);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.0));
        for k in 0..5 {
            s.tensors_mut()[0]
                .set_grad(Some(vec![k as f64, -1.0]))
                .unwrap();
            adam.step(&mut s).unwrap();
        }
        assert_eq!(s.tensors_mut()[0].data(), &[0.3, 0.7]);
    }

    #[test]
    fn loss_csv_format() {
        let mut buf = Vec::new();
        write_loss_csv(&[0.5, 0.25], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,loss\n1,0.5\n2,0.25\n"
        );
    }

    #[test]
    fn budget_validation() {
        assert!(TrainBudget::Epochs(0).validate().is_err());
        assert!(TrainBudget::WallClock {
            seconds: 0.0,
            max_epochs: None
        }
        .validate()
        .is_err());
        assert!(TrainBudget::Epochs(3).validate().is_ok());
    }
}
