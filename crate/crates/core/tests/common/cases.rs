//! Randomized gradient-check instances for layers, losses and whole models.

use anomaly_ae::gradcheck::{grad_check, grad_check_with, GradCheck};
use anomaly_ae::models::{
    cvae_loss, mse_loss, reparameterize, vq_quantize, vqvae_loss, Autoencoder, Codebook,
    ModelConfig, ModelKind, Noise,
};
use anomaly_ae::nn::ParamId;
use anomaly_ae::{Graph, Result, Tensor, Var};
use rand::seq::index::sample;

use super::{random_tensor, rng};

pub const STEP: f64 = 1e-6;
pub const TOL: f64 = 1e-4;

pub struct Case {
    pub name: String,
    pub check: GradCheck,
}

/// `sum(out ∘ R)` for a fixed random `R`, so every output entry matters.
fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let r = random_tensor(&mut rng(seed ^ 0xABCD), &shape, -1.0, 1.0);
    let r = g.constant(r);
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}

/// Checks `f` against each input in turn, the others held constant.
fn check_inputs(
    name: &str,
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Vec<Case> {
    (0..inputs.len())
        .map(|i| {
            let check = grad_check(
                |g, xv| {
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, t)| if j == i { xv } else { g.constant(t.clone()) })
                        .collect();
                    f(g, &vars)
                },
                &inputs[i],
                STEP,
                TOL,
            )
            .expect("gradient check runs");
            Case {
                name: format!("{name}[input {i}]"),
                check,
            }
        })
        .collect()
}

pub fn layer_cases(seed: u64) -> Vec<Case> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let u = |r: &mut _, s: &[usize]| random_tensor(r, s, -1.0, 1.0);

    let conv_in = [
        u(&mut r, &[2, 2, 5, 5]),
        u(&mut r, &[3, 2, 3, 3]),
        u(&mut r, &[3]),
    ];
    out.extend(check_inputs("conv2d same", &conv_in, |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 1, 1)?;
        weighted_sum(g, y, seed)
    }));
    let conv_in = [
        u(&mut r, &[1, 2, 8, 8]),
        u(&mut r, &[3, 2, 4, 4]),
        u(&mut r, &[3]),
    ];
    out.extend(check_inputs("conv2d strided", &conv_in, |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 2, 1)?;
        weighted_sum(g, y, seed)
    }));
    let tr_in = [
        u(&mut r, &[2, 2, 3, 3]),
        u(&mut r, &[2, 3, 4, 4]),
        u(&mut r, &[3]),
    ];
    out.extend(check_inputs("conv_transpose2d", &tr_in, |g, v| {
        let y = g.conv_transpose2d(v[0], v[1], v[2], 2, 1)?;
        weighted_sum(g, y, seed)
    }));
    out.extend(check_inputs(
        "max_pool2d",
        &[u(&mut r, &[2, 2, 4, 4])],
        |g, v| {
            let y = g.max_pool2d(v[0], 2)?;
            weighted_sum(g, y, seed)
        },
    ));
    out.extend(check_inputs(
        "upsample_nearest",
        &[u(&mut r, &[1, 2, 3, 3])],
        |g, v| {
            let y = g.upsample_nearest(v[0], 2)?;
            weighted_sum(g, y, seed)
        },
    ));
    let lin_in = [u(&mut r, &[3, 4]), u(&mut r, &[5, 4]), u(&mut r, &[5])];
    out.extend(check_inputs("linear", &lin_in, |g, v| {
        let y = g.linear(v[0], v[1], v[2])?;
        weighted_sum(g, y, seed)
    }));
    let mm_in = [u(&mut r, &[3, 4]), u(&mut r, &[4, 2])];
    out.extend(check_inputs("matmul", &mm_in, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        weighted_sum(g, y, seed)
    }));
    let act = [u(&mut r, &[2, 6])];
    out.extend(check_inputs("relu", &act, |g, v| {
        let y = g.relu(v[0]);
        weighted_sum(g, y, seed)
    }));
    out.extend(check_inputs("sigmoid", &act, |g, v| {
        let y = g.sigmoid(v[0]);
        weighted_sum(g, y, seed)
    }));
    out.extend(check_inputs("exp", &act, |g, v| {
        let y = g.exp(v[0]);
        weighted_sum(g, y, seed)
    }));
    out.extend(check_inputs("square/mean", &act, |g, v| {
        let y = g.square(v[0]);
        Ok(g.mean(y))
    }));
    out
}

pub fn loss_cases(seed: u64) -> Vec<Case> {
    let mut r = rng(seed.wrapping_add(1000));
    let mut out = Vec::new();

    // reconstruction MSE against the decoder output
    let target = random_tensor(&mut r, &[2, 3, 4, 4], 0.0, 1.0);
    let x_out = random_tensor(&mut r, &[2, 3, 4, 4], 0.0, 1.0);
    let t = target.clone();
    out.extend(check_inputs("mse", &[x_out], move |g, v| {
        let x = g.constant(t.clone());
        mse_loss(g, x, v[0])
    }));

    // MSE + KL through the reparameterization and a small decoder
    let target = random_tensor(&mut r, &[2, 3, 2, 2], 0.0, 1.0);
    let eps = random_tensor(&mut r, &[2, 4], -1.5, 1.5);
    let inputs = [
        random_tensor(&mut r, &[2, 4], -1.0, 1.0),
        random_tensor(&mut r, &[2, 4], -1.0, 1.0),
        random_tensor(&mut r, &[12, 4], -0.5, 0.5),
        random_tensor(&mut r, &[12], -0.5, 0.5),
    ];
    out.extend(check_inputs("mse+kl", &inputs, move |g, v| {
        let x = g.constant(target.clone());
        let e = g.constant(eps.clone());
        let z = reparameterize(g, v[0], v[1], e)?;
        let h = g.linear(z, v[2], v[3])?;
        let h = g.reshape(h, vec![2, 3, 2, 2])?;
        let y = g.sigmoid(h);
        Ok(cvae_loss(g, x, y, v[0], v[1])?.0)
    }));

    out.extend(vq_loss_cases(&mut r));
    out
}

/// Pieces of the small straight-through VQ instance.
struct VqInstance {
    target: Tensor<f64>,
    enc: Tensor<f64>,
    book: Tensor<f64>,
    dec_w: Tensor<f64>,
    dec_b: Tensor<f64>,
    beta: f64,
}

impl VqInstance {
    fn decode(g: &mut Graph<f64>, z: Var, w: Var, b: Var) -> Result<Var> {
        let h = g.conv_transpose2d(z, w, b, 2, 0)?;
        Ok(g.sigmoid(h))
    }

    /// The graph objective; returns the loss and the vars of (enc, book, dec_w).
    fn graph_loss(&self, g: &mut Graph<f64>) -> Result<(Var, [Var; 3])> {
        let x = g.constant(self.target.clone());
        let enc = g.param(self.enc.clone());
        let book = g.param(self.book.clone());
        let w = g.param(self.dec_w.clone());
        let b = g.constant(self.dec_b.clone());
        let (_, idx) = vq_quantize(&self.enc, &Codebook::new(self.book.clone())?)?;
        let rows = g.gather_rows(book, &idx)?;
        let zq = g.from_fibers(rows, self.enc.shape())?;
        let st = g.straight_through(enc, zq)?;
        let y = Self::decode(g, st, w, b)?;
        let terms = vqvae_loss(g, x, y, enc, zq, self.beta)?;
        Ok((terms.total, [enc, book, w]))
    }

    /// The same objective with the code assignment and the straight-through
    /// offset frozen at the base point, written without stop-gradients.
    fn surrogate(&self, enc: &Tensor<f64>, book: &Tensor<f64>, dec_w: &Tensor<f64>) -> Result<f64> {
        let base_book = Codebook::new(self.book.clone())?;
        let (q0, idx) = vq_quantize(&self.enc, &base_book)?;
        let dim = book.shape()[1];
        let mut q = q0.clone();
        let (c, hw) = (
            self.enc.shape()[1],
            self.enc.shape()[2] * self.enc.shape()[3],
        );
        for (s, &k) in idx.iter().enumerate() {
            for ch in 0..c {
                q.data_mut()[ch * hw + s] = book.data()[k * dim + ch];
            }
        }
        let mut g = Graph::new();
        let x = g.constant(self.target.clone());
        let offset: Vec<f64> = q0
            .data()
            .iter()
            .zip(self.enc.data())
            .map(|(a, b)| a - b)
            .collect();
        let dec_in: Vec<f64> = enc.data().iter().zip(&offset).map(|(e, o)| e + o).collect();
        let z = g.constant(Tensor::new(enc.shape().to_vec(), dec_in)?);
        let w = g.constant(dec_w.clone());
        let b = g.constant(self.dec_b.clone());
        let y = Self::decode(&mut g, z, w, b)?;
        let rec = mse_loss(&mut g, x, y)?;
        let n = q.numel() as f64;
        let align: f64 = self
            .enc
            .data()
            .iter()
            .zip(q.data())
            .map(|(e, q)| (e - q).powi(2))
            .sum::<f64>()
            / n;
        let commit: f64 = enc
            .data()
            .iter()
            .zip(q0.data())
            .map(|(e, q)| (e - q).powi(2))
            .sum::<f64>()
            / n;
        Ok(g.value(rec).item()? + align + self.beta * commit)
    }
}

fn vq_loss_cases(r: &mut rand_chacha::ChaCha8Rng) -> Vec<Case> {
    let inst = VqInstance {
        target: random_tensor(r, &[1, 3, 4, 4], 0.0, 1.0),
        enc: random_tensor(r, &[1, 4, 2, 2], -1.0, 1.0),
        book: random_tensor(r, &[6, 4], -1.0, 1.0),
        dec_w: random_tensor(r, &[4, 3, 2, 2], -0.5, 0.5),
        dec_b: random_tensor(r, &[3], -0.1, 0.1),
        beta: 0.25,
    };
    let mut g = Graph::new();
    let (loss, vars) = inst.graph_loss(&mut g).expect("vq graph");
    let grads = g.backward(loss).expect("backward");
    let names = ["vq encoder output", "vq codebook", "vq decoder weight"];
    (0..3)
        .map(|i| {
            let analytic = grads.get(vars[i]).expect("gradient present").clone();
            let base = [&inst.enc, &inst.book, &inst.dec_w][i].clone();
            let check = grad_check_with(
                |t| match i {
                    0 => inst.surrogate(t, &inst.book, &inst.dec_w),
                    1 => inst.surrogate(&inst.enc, t, &inst.dec_w),
                    _ => inst.surrogate(&inst.enc, &inst.book, t),
                },
                &analytic,
                &base,
                STEP,
                TOL,
            )
            .expect("gradient check runs");
            Case {
                name: format!("vq loss [{}]", names[i]),
                check,
            }
        })
        .collect()
}

/// Sampled-entry checks of a desk-size model's training loss. VQ-VAE
/// entries are compared against the frozen-assignment surrogate.
pub fn model_cases(kind: ModelKind, seed: u64, entries_per_tensor: usize) -> Vec<Case> {
    let mut cfg = ModelConfig::desk(kind);
    cfg.seed = seed;
    cfg.codebook_size = 16;
    let model: Autoencoder<f64> = Autoencoder::<f32>::new(cfg.clone()).unwrap().cast();
    let mut r = rng(seed.wrapping_add(77));
    let x = random_tensor(&mut r, &[1, 3, 32, 32], 0.0, 1.0);
    let eps = random_tensor(&mut r, &[1, cfg.bottleneck], -1.0, 1.0);

    let loss_of = |m: &Autoencoder<f64>| -> Result<(Graph<f64>, Var, anomaly_ae::nn::Bound)> {
        let mut g = Graph::new();
        let p = m.params().bind(&mut g);
        let xv = g.constant(x.clone());
        let pass = m.forward(&mut g, &p, xv, Noise::Fixed(&eps))?;
        Ok((g, pass.loss, p))
    };
    let (g, loss, bound) = loss_of(&model).unwrap();
    let grads = g.backward(loss).unwrap();

    // frozen VQ pieces at the base point
    let vq_base = (kind == ModelKind::Vqvae).then(|| {
        let mut g = Graph::new();
        let p = model.params().bind(&mut g);
        let xv = g.constant(x.clone());
        let enc = model.vq_encode(&mut g, &p, xv).unwrap();
        let (zq, idx) = model.vq_lookup(&mut g, &p, enc).unwrap();
        (g.value(enc).clone(), g.value(zq).clone(), idx)
    });
    let value = |m: &Autoencoder<f64>| -> Result<f64> {
        match &vq_base {
            None => {
                let (g, loss, _) = loss_of(m)?;
                g.value(loss).item()
            }
            Some((enc0, zq0, idx)) => {
                let mut g = Graph::new();
                let p = m.params().bind(&mut g);
                let xv = g.constant(x.clone());
                let enc = m.vq_encode(&mut g, &p, xv)?;
                let off: Vec<f64> = zq0
                    .data()
                    .iter()
                    .zip(enc0.data())
                    .map(|(a, b)| a - b)
                    .collect();
                let off = g.constant(Tensor::new(enc0.shape().to_vec(), off)?);
                let dec_in = g.add(enc, off)?;
                let y = m.vq_decode(&mut g, &p, dec_in)?;
                let rec = mse_loss(&mut g, xv, y)?;
                let book = p.var(m.codebook_param().unwrap());
                let rows = g.gather_rows(book, idx)?;
                let zq = g.from_fibers(rows, enc0.shape())?;
                let e0 = g.constant(enc0.clone());
                let d = g.sub(e0, zq)?;
                let d = g.square(d);
                let align = g.mean(d);
                let z0 = g.constant(zq0.clone());
                let c = g.sub(enc, z0)?;
                let c = g.square(c);
                let commit = g.mean(c);
                let commit = g.scale(commit, m.config().beta);
                let t = g.add(rec, align)?;
                let t = g.add(t, commit)?;
                g.value(t).item()
            }
        }
    };

    let mut out = Vec::new();
    for id in 0..model.params().len() {
        let pid = ParamId(id);
        let name = model.params().name(pid).to_string();
        let Some(full) = grads.get(bound.var(pid)) else {
            continue;
        };
        let n = full.numel();
        let picks = sample(&mut r, n, entries_per_tensor.min(n)).into_vec();
        let analytic = Tensor::new(
            vec![picks.len()],
            picks.iter().map(|&i| full.data()[i]).collect(),
        )
        .unwrap();
        let base = Tensor::new(
            vec![picks.len()],
            picks
                .iter()
                .map(|&i| model.params().get(pid).data()[i])
                .collect(),
        )
        .unwrap();
        let check = grad_check_with(
            |t| {
                let mut m = model.clone();
                for (k, &i) in picks.iter().enumerate() {
                    m.params_mut().get_mut(pid).data_mut()[i] = t.data()[k];
                }
                value(&m)
            },
            &analytic,
            &base,
            STEP,
            TOL,
        )
        .unwrap();
        out.push(Case {
            name: format!("{kind} {name}"),
            check,
        });
    }
    out
}
