//! The three autoencoder families and their objectives.
//!
//! All three share the encoder/decoder convolution plan for a given input
//! size and differ in the latent space:
//!
//! * CAE: flatten → dense 1024→128→16→128→1024 → reshape.
//! * CVAE: two independent encoders produce the mean and the log-variance
//!   of a diagonal Gaussian; the decoder is fed a reparameterised sample.
//! * VQ-VAE: strided convolutions only; every channel fibre of the
//!   `(64, 4, 4)` encoding is snapped to its nearest codebook vector and
//!   the decoder gradient is copied straight through to the encoder.

mod config;
pub mod loss;
mod quantize;

pub use config::{ModelConfig, ModelKind, DESK_SIZE, FULL_SIZE};
pub use loss::{cvae_loss, kl_closed_form, kl_divergence, mse, mse_loss, vqvae_loss, VqLossTerms};
pub use quantize::{vq_quantize, Codebook};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{
    apply_activation, Activation, Bound, Conv2d, ConvSpec, ConvTranspose2d, Dense, ParamId,
    ParamStore,
};
use crate::tensor::{Real, Tensor};

const ENCODER_CHANNELS: [usize; 6] = [3, 8, 16, 32, 64, 64];
const KERNEL: usize = 3;

/// Pool factor after each encoder convolution (1 = no pooling).
fn pool_plan(image_size: usize) -> [usize; 5] {
    if image_size == FULL_SIZE {
        [2, 2, 2, 2, 4]
    } else {
        [2, 2, 2, 1, 1]
    }
}

/// `(kernel, stride, padding)` of each VQ-VAE encoder convolution.
fn vq_plan(image_size: usize) -> [(usize, usize, usize); 3] {
    if image_size == FULL_SIZE {
        [(8, 4, 2), (8, 4, 2), (8, 4, 2)]
    } else {
        [(8, 4, 2), (4, 2, 1), (3, 1, 1)]
    }
}

const VQ_CHANNELS: [usize; 4] = [3, 32, 64, 64];

/// Convolution + ReLU + optional max-pool, repeated.
#[derive(Clone, Debug, PartialEq)]
struct ConvEncoder {
    convs: Vec<Conv2d>,
    pools: Vec<usize>,
}

impl ConvEncoder {
    fn build<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        size: usize,
        rng: &mut R,
    ) -> Self {
        let convs = ENCODER_CHANNELS
            .windows(2)
            .enumerate()
            .map(|(i, c)| {
                Conv2d::new(
                    store,
                    &format!("{prefix}.conv{i}"),
                    ConvSpec::same(c[0], c[1], KERNEL),
                    rng,
                )
            })
            .collect();
        Self {
            convs,
            pools: pool_plan(size).to_vec(),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, mut x: Var) -> Result<Var> {
        for (conv, &pool) in self.convs.iter().zip(&self.pools) {
            x = conv.forward(g, p, x)?;
            x = g.relu(x);
            if pool > 1 {
                x = g.max_pool2d(x, pool)?;
            }
        }
        Ok(x)
    }
}

/// Optional nearest upsampling + convolution, repeated; ReLU on hidden
/// layers and a sigmoid head.
#[derive(Clone, Debug, PartialEq)]
struct ConvDecoder {
    convs: Vec<Conv2d>,
    ups: Vec<usize>,
}

impl ConvDecoder {
    fn build<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        size: usize,
        rng: &mut R,
    ) -> Self {
        let channels: Vec<usize> = ENCODER_CHANNELS.iter().rev().copied().collect();
        let convs = channels
            .windows(2)
            .enumerate()
            .map(|(i, c)| {
                Conv2d::new(
                    store,
                    &format!("{prefix}.conv{i}"),
                    ConvSpec::same(c[0], c[1], KERNEL),
                    rng,
                )
            })
            .collect();
        let mut ups = pool_plan(size).to_vec();
        ups.reverse();
        Self { convs, ups }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, mut x: Var) -> Result<Var> {
        let last = self.convs.len() - 1;
        for (i, (conv, &up)) in self.convs.iter().zip(&self.ups).enumerate() {
            if up > 1 {
                x = g.upsample_nearest(x, up)?;
            }
            x = conv.forward(g, p, x)?;
            x = if i == last { g.sigmoid(x) } else { g.relu(x) };
        }
        Ok(x)
    }
}

/// Pair of dense layers; the second has the given activation, the first ReLU.
#[derive(Clone, Debug, PartialEq)]
struct DensePair {
    first: Dense,
    second: Dense,
    out_act: Activation,
}

impl DensePair {
    fn build<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dims: [usize; 3],
        out_act: Activation,
        rng: &mut R,
    ) -> Self {
        Self {
            first: Dense::new(store, &format!("{prefix}.fc0"), dims[0], dims[1], rng),
            second: Dense::new(store, &format!("{prefix}.fc1"), dims[1], dims[2], rng),
            out_act,
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.first.forward(g, p, x)?;
        let h = g.relu(h);
        let o = self.second.forward(g, p, h)?;
        Ok(apply_activation(g, o, self.out_act))
    }
}

#[derive(Clone, Debug, PartialEq)]
struct VqEncoder {
    convs: Vec<Conv2d>,
}

#[derive(Clone, Debug, PartialEq)]
struct VqDecoder {
    convs: Vec<ConvTranspose2d>,
}

#[derive(Clone, Debug, PartialEq)]
enum Arch {
    Cae {
        encoder: ConvEncoder,
        down: DensePair,
        up: DensePair,
        decoder: ConvDecoder,
    },
    Cvae {
        mean_encoder: ConvEncoder,
        mean_head: DensePair,
        var_encoder: ConvEncoder,
        var_head: DensePair,
        up: DensePair,
        decoder: ConvDecoder,
    },
    Vqvae {
        encoder: VqEncoder,
        codebook: ParamId,
        decoder: VqDecoder,
    },
}

/// Source of the reparameterisation noise ε for the CVAE.
pub enum Noise<'a, T> {
    /// ε = 0: the decoder sees the mean latent.
    Zero,
    /// ε ~ N(0, I) drawn from the generator.
    Sample(&'a mut dyn RngCore),
    /// A caller-chosen ε shaped like the latent batch.
    Fixed(&'a Tensor<T>),
}

/// Graph nodes of one forward pass and its loss.
#[derive(Clone, Debug)]
pub struct Pass {
    pub output: Var,
    /// Encoder output `x_enc` (mean encoder for the CVAE).
    pub encoded: Var,
    pub loss: Var,
    pub reconstruction: Var,
    pub detail: PassDetail,
}

#[derive(Clone, Debug)]
pub enum PassDetail {
    Cae {
        bottleneck: Var,
    },
    Cvae {
        mu: Var,
        log_var: Var,
        latent: Var,
        kl: Var,
    },
    Vqvae {
        quantized: Var,
        decoder_input: Var,
        indices: Vec<usize>,
        alignment: Var,
        commitment: Var,
    },
}

/// `μ + exp(log_var / 2) ∘ ε`.
pub fn reparameterize<T: Real>(g: &mut Graph<T>, mu: Var, log_var: Var, eps: Var) -> Result<Var> {
    let half = g.scale(log_var, T::from_f64_lossy(0.5));
    let std = g.exp(half);
    let noise = g.mul(std, eps)?;
    g.add(mu, noise)
}

/// Diagonal Gaussian latent `(μ, log σ²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianLatent<T> {
    pub mu: Tensor<T>,
    pub log_var: Tensor<T>,
}

/// An autoencoder: configuration, parameters and layer plan.
#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    arch: Arch,
}

impl<T: Real> Autoencoder<T> {
    /// Builds the layer plan and initialises parameters from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let size = config.image_size;
        let latent = config.latent_len();
        let hidden = latent / 8;
        let bottleneck = config.bottleneck;
        let arch = match config.kind {
            ModelKind::Cae => Arch::Cae {
                encoder: ConvEncoder::build(&mut store, "encoder", size, &mut rng),
                down: DensePair::build(
                    &mut store,
                    "latent.down",
                    [latent, hidden, bottleneck],
                    Activation::Identity,
                    &mut rng,
                ),
                up: DensePair::build(
                    &mut store,
                    "latent.up",
                    [bottleneck, hidden, latent],
                    Activation::Relu,
                    &mut rng,
                ),
                decoder: ConvDecoder::build(&mut store, "decoder", size, &mut rng),
            },
            ModelKind::Cvae => Arch::Cvae {
                mean_encoder: ConvEncoder::build(&mut store, "mean_encoder", size, &mut rng),
                mean_head: DensePair::build(
                    &mut store,
                    "mean_head",
                    [latent, hidden, bottleneck],
                    Activation::Identity,
                    &mut rng,
                ),
                var_encoder: ConvEncoder::build(&mut store, "var_encoder", size, &mut rng),
                var_head: DensePair::build(
                    &mut store,
                    "var_head",
                    [latent, hidden, bottleneck],
                    Activation::Identity,
                    &mut rng,
                ),
                up: DensePair::build(
                    &mut store,
                    "latent.up",
                    [bottleneck, hidden, latent],
                    Activation::Relu,
                    &mut rng,
                ),
                decoder: ConvDecoder::build(&mut store, "decoder", size, &mut rng),
            },
            ModelKind::Vqvae => {
                let plan = vq_plan(size);
                let encoder = VqEncoder {
                    convs: plan
                        .iter()
                        .enumerate()
                        .map(|(i, &(k, s, p))| {
                            let spec =
                                ConvSpec::strided(VQ_CHANNELS[i], VQ_CHANNELS[i + 1], k, s, p);
                            Conv2d::new(&mut store, &format!("encoder.conv{i}"), spec, &mut rng)
                        })
                        .collect(),
                };
                let dim = config.latent.2;
                let book = Codebook::<T>::random(config.codebook_size, dim, &mut rng);
                let codebook = store.add("codebook", book.into_tensor());
                let decoder = VqDecoder {
                    convs: plan
                        .iter()
                        .enumerate()
                        .rev()
                        .enumerate()
                        .map(|(j, (i, &(k, s, p)))| {
                            ConvTranspose2d::new(
                                &mut store,
                                &format!("decoder.deconv{j}"),
                                VQ_CHANNELS[i + 1],
                                VQ_CHANNELS[i],
                                k,
                                s,
                                p,
                                &mut rng,
                            )
                        })
                        .collect(),
                };
                Arch::Vqvae {
                    encoder,
                    codebook,
                    decoder,
                }
            }
        };
        Ok(Self {
            config,
            params: store,
            arch,
        })
    }

    /// Rebuilds a model and installs the given parameters (names and
    /// shapes must match the layer plan).
    pub fn from_params(config: ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut model = Self::new(config)?;
        model.params.assign(named)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Same model with parameters converted to another element type.
    pub fn cast<U: Real>(&self) -> Autoencoder<U> {
        Autoencoder {
            config: self.config.clone(),
            params: self.params.cast(),
            arch: self.arch.clone(),
        }
    }

    pub fn codebook(&self) -> Option<Codebook<T>> {
        match &self.arch {
            Arch::Vqvae { codebook, .. } => {
                Some(Codebook::new(self.params.get(*codebook).clone()).expect("codebook is [K, C]"))
            }
            _ => None,
        }
    }

    pub fn codebook_param(&self) -> Option<ParamId> {
        match &self.arch {
            Arch::Vqvae { codebook, .. } => Some(*codebook),
            _ => None,
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<usize> {
        let [c, h, w] = self.config.input_shape();
        match *shape {
            [n, c2, h2, w2] if (c2, h2, w2) == (c, h, w) => Ok(n),
            _ => Err(Error::shape(
                "autoencoder",
                format!("input {shape:?}, expected [N, {c}, {h}, {w}]"),
            )),
        }
    }

    fn latent_image_shape(&self, n: usize) -> [usize; 4] {
        let (h, w, c) = self.config.latent;
        [n, c, h, w]
    }

    /// Runs the model on a batch `x` (`[N,3,H,W]`) and builds its loss.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        noise: Noise<'_, T>,
    ) -> Result<Pass> {
        let n = self.check_input(g.value(x).shape())?;
        let latent = self.config.latent_len();
        let lat_shape = self.latent_image_shape(n);
        match &self.arch {
            Arch::Cae {
                encoder,
                down,
                up,
                decoder,
            } => {
                let encoded = encoder.forward(g, p, x)?;
                let flat = g.reshape(encoded, vec![n, latent])?;
                let bottleneck = down.forward(g, p, flat)?;
                let lat = up.forward(g, p, bottleneck)?;
                let img = g.reshape(lat, lat_shape.to_vec())?;
                let output = decoder.forward(g, p, img)?;
                let reconstruction = mse_loss(g, x, output)?;
                Ok(Pass {
                    output,
                    encoded,
                    loss: reconstruction,
                    reconstruction,
                    detail: PassDetail::Cae { bottleneck },
                })
            }
            Arch::Cvae {
                mean_encoder,
                mean_head,
                var_encoder,
                var_head,
                up,
                decoder,
            } => {
                let encoded = mean_encoder.forward(g, p, x)?;
                let flat = g.reshape(encoded, vec![n, latent])?;
                let mu = mean_head.forward(g, p, flat)?;
                let venc = var_encoder.forward(g, p, x)?;
                let vflat = g.reshape(venc, vec![n, latent])?;
                let log_var = var_head.forward(g, p, vflat)?;
                let eps_shape = vec![n, self.config.bottleneck];
                let eps = match noise {
                    Noise::Zero => Tensor::zeros(eps_shape),
                    Noise::Sample(rng) => Tensor::from_fn(eps_shape, |_| {
                        T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal))
                    }),
                    Noise::Fixed(t) => {
                        if t.shape() != eps_shape.as_slice() {
                            return Err(Error::shape(
                                "cvae_forward",
                                format!("noise {:?}, expected {eps_shape:?}", t.shape()),
                            ));
                        }
                        t.clone()
                    }
                };
                let eps = g.constant(eps);
                let latent_sample = reparameterize(g, mu, log_var, eps)?;
                let lat = up.forward(g, p, latent_sample)?;
                let img = g.reshape(lat, lat_shape.to_vec())?;
                let output = decoder.forward(g, p, img)?;
                let (loss, reconstruction, kl) = cvae_loss(g, x, output, mu, log_var)?;
                Ok(Pass {
                    output,
                    encoded,
                    loss,
                    reconstruction,
                    detail: PassDetail::Cvae {
                        mu,
                        log_var,
                        latent: latent_sample,
                        kl,
                    },
                })
            }
            Arch::Vqvae { .. } => {
                let encoded = self.vq_encode(g, p, x)?;
                let (quantized, indices) = self.vq_lookup(g, p, encoded)?;
                let decoder_input = g.straight_through(encoded, quantized)?;
                let output = self.vq_decode(g, p, decoder_input)?;
                let beta = T::from_f64_lossy(self.config.beta);
                let terms = vqvae_loss(g, x, output, encoded, quantized, beta)?;
                Ok(Pass {
                    output,
                    encoded,
                    loss: terms.total,
                    reconstruction: terms.reconstruction,
                    detail: PassDetail::Vqvae {
                        quantized,
                        decoder_input,
                        indices,
                        alignment: terms.alignment,
                        commitment: terms.commitment,
                    },
                })
            }
        }
    }

    /// VQ-VAE encoder alone: `[N,3,H,W] → [N,64,4,4]`.
    pub fn vq_encode(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let Arch::Vqvae { encoder, .. } = &self.arch else {
            return Err(Error::Contract("vq_encode on a non-VQ model".into()));
        };
        let last = encoder.convs.len() - 1;
        let mut h = x;
        for (i, conv) in encoder.convs.iter().enumerate() {
            h = conv.forward(g, p, h)?;
            if i != last {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Differentiable codebook lookup for the fibres of `encoded`; the
    /// result depends on the codebook only.
    pub fn vq_lookup(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        encoded: Var,
    ) -> Result<(Var, Vec<usize>)> {
        let Arch::Vqvae { codebook, .. } = &self.arch else {
            return Err(Error::Contract("vq_lookup on a non-VQ model".into()));
        };
        let book_var = p.var(*codebook);
        let book = Codebook::new(g.value(book_var).clone())?;
        let (_, indices) = vq_quantize(g.value(encoded), &book)?;
        let rows = g.gather_rows(book_var, &indices)?;
        let shape = g.value(encoded).shape().to_vec();
        let quantized = g.from_fibers(rows, &shape)?;
        Ok((quantized, indices))
    }

    /// VQ-VAE decoder alone: `[N,64,4,4] → [N,3,H,W]`.
    pub fn vq_decode(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<Var> {
        let Arch::Vqvae { decoder, .. } = &self.arch else {
            return Err(Error::Contract("vq_decode on a non-VQ model".into()));
        };
        let last = decoder.convs.len() - 1;
        let mut h = z;
        for (i, conv) in decoder.convs.iter().enumerate() {
            h = conv.forward(g, p, h)?;
            h = if i == last { g.sigmoid(h) } else { g.relu(h) };
        }
        Ok(h)
    }

    /// Gaussian latent of a CVAE for a batch of images.
    pub fn encode_gaussian(&self, x: &Tensor<T>) -> Result<GaussianLatent<T>> {
        let Arch::Cvae {
            mean_encoder,
            mean_head,
            var_encoder,
            var_head,
            ..
        } = &self.arch
        else {
            return Err(Error::Contract(
                "encode_gaussian on a non-CVAE model".into(),
            ));
        };
        let n = self.check_input(x.shape())?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let xv = g.constant(x.clone());
        let latent = self.config.latent_len();
        let e = mean_encoder.forward(&mut g, &p, xv)?;
        let e = g.reshape(e, vec![n, latent])?;
        let mu = mean_head.forward(&mut g, &p, e)?;
        let v = var_encoder.forward(&mut g, &p, xv)?;
        let v = g.reshape(v, vec![n, latent])?;
        let lv = var_head.forward(&mut g, &p, v)?;
        Ok(GaussianLatent {
            mu: g.value(mu).clone(),
            log_var: g.value(lv).clone(),
        })
    }

    /// Deterministic reconstruction of one image (`[3,H,W]`) or a batch
    /// (`[N,3,H,W]`); the CVAE decodes its mean latent.
    pub fn reconstruct(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let single = x.rank() == 3;
        let batch = if single {
            let mut shape = vec![1];
            shape.extend_from_slice(x.shape());
            x.clone().reshape(shape)?
        } else {
            x.clone()
        };
        self.check_input(batch.shape())?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let xv = g.constant(batch);
        let pass = self.forward(&mut g, &p, xv, Noise::Zero)?;
        let out = g.value(pass.output).clone();
        if single {
            out.reshape(x.shape().to_vec())
        } else {
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(cfg: &ModelConfig, n: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c, h, w] = cfg.input_shape();
        Tensor::from_fn(vec![n, c, h, w], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn desk_models_keep_shape_and_range() {
        for kind in ModelKind::ALL {
            let cfg = ModelConfig::desk(kind);
            let model = Autoencoder::<f32>::new(cfg.clone()).unwrap();
            let x = batch(&cfg, 2, 3);
            let y = model.reconstruct(&x).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0), "{kind}");
        }
    }

    #[test]
    fn desk_latent_shapes() {
        for kind in ModelKind::ALL {
            let cfg = ModelConfig::desk(kind);
            let model = Autoencoder::<f32>::new(cfg.clone()).unwrap();
            let mut g = Graph::new();
            let p = model.params().bind(&mut g);
            let x = g.constant(batch(&cfg, 1, 4));
            let pass = model.forward(&mut g, &p, x, Noise::Zero).unwrap();
            assert_eq!(g.value(pass.encoded).shape(), &[1, 64, 4, 4]);
            if let PassDetail::Cae { bottleneck } = pass.detail {
                assert_eq!(g.value(bottleneck).shape(), &[1, 16]);
            }
        }
    }

    #[test]
    fn wrong_input_shape() {
        let model = Autoencoder::<f32>::new(ModelConfig::desk(ModelKind::Cae)).unwrap();
        let x = Tensor::zeros(vec![3, 16, 16]);
        assert!(matches!(model.reconstruct(&x), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_noise_latent_is_mean() {
        let mut g = Graph::<f64>::new();
        let mu = g.constant(Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap());
        let lv = g.constant(Tensor::new(vec![3], vec![0.5, -0.1, 1.5]).unwrap());
        let eps = g.constant(Tensor::zeros(vec![3]));
        let z = reparameterize(&mut g, mu, lv, eps).unwrap();
        assert_eq!(g.value(z).data(), g.value(mu).data());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Autoencoder::<f32>::new(ModelConfig::desk(ModelKind::Vqvae)).unwrap();
        let b = Autoencoder::<f32>::new(ModelConfig::desk(ModelKind::Vqvae)).unwrap();
        assert_eq!(a, b);
        let mut cfg = ModelConfig::desk(ModelKind::Vqvae);
        cfg.seed = 9;
        let c = Autoencoder::<f32>::new(cfg).unwrap();
        assert_ne!(a.params(), c.params());
    }
}
