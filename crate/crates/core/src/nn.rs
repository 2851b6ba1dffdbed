//! Layers built on the graph operations, and the named parameter store
//! they draw their weights from.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

/// Graph handles for every parameter of a store, valid for one graph.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t.with_requires_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Inserts every parameter as a differentiable leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| g.param(t.clone())).collect())
    }

    /// Copies the gradients of `bound` into each tensor's `grad` slot
    /// (cleared when the parameter did not take part in the loss).
    pub fn load_grads(&mut self, grads: &crate::graph::Gradients<T>, bound: &Bound) {
        for (t, &v) in self.tensors.iter_mut().zip(bound.vars()) {
            let g = grads.get(v).map(|g| g.data().to_vec());
            t.set_grad(g).expect("gradient shaped like its parameter");
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    /// Replaces the tensor values, checking names and shapes.
    pub fn assign(&mut self, named: Vec<(String, Tensor<T>)>) -> Result<()> {
        if named.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                self.tensors.len(),
                named.len()
            )));
        }
        for ((name, t), (own_name, own)) in named
            .into_iter()
            .zip(self.names.iter().zip(self.tensors.iter_mut()))
        {
            if &name != own_name || t.shape() != own.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} {:?} does not match {own_name} {:?}",
                    t.shape(),
                    own.shape()
                )));
            }
            *own = t.with_requires_grad();
        }
        Ok(())
    }
}

/// Convolution hyper-parameters. For a transposed convolution the spec
/// describes the forward convolution it is the adjoint of.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// Square kernel with "same" padding and unit stride.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: 1,
            padding: (kernel - 1) / 2,
        }
    }

    pub fn strided(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride,
            padding,
        }
    }

    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let p = 2 * self.padding;
        if self.stride == 0 || h + p < kh || w + p < kw {
            return Err(Error::shape(
                "conv2d",
                format!("{h}×{w} input too small for {self:?}"),
            ));
        }
        Ok((
            (h + p - kh) / self.stride + 1,
            (w + p - kw) / self.stride + 1,
        ))
    }

    pub fn transposed_output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let fh = (h.max(1) - 1) * self.stride + kh;
        let fw = (w.max(1) - 1) * self.stride + kw;
        if h == 0 || w == 0 || fh <= 2 * self.padding || fw <= 2 * self.padding {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("{h}×{w} input gives empty output for {self:?}"),
            ));
        }
        Ok((fh - 2 * self.padding, fw - 2 * self.padding))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

pub fn apply_activation<T: Real>(g: &mut Graph<T>, x: Var, kind: Activation) -> Var {
    match kind {
        Activation::Identity => x,
        Activation::Relu => g.relu(x),
        Activation::Sigmoid => g.sigmoid(x),
    }
}

fn uniform<T: Real, R: Rng>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        T::from_f64_lossy(rng.random_range(-bound..bound))
    })
}

/// He-style uniform bound for a given fan-in.
fn he_bound(fan_in: f64) -> f64 {
    (6.0 / fan_in.max(1.0)).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv2d {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: ConvSpec,
        rng: &mut R,
    ) -> Self {
        let (kh, kw) = spec.kernel;
        let bound = he_bound((spec.in_channels * kh * kw) as f64);
        let weight = store.add(
            format!("{name}.weight"),
            uniform(
                vec![spec.out_channels, spec.in_channels, kh, kw],
                bound,
                rng,
            ),
        );
        let bias = store.add(
            format!("{name}.bias"),
            Tensor::zeros(vec![spec.out_channels]),
        );
        Self { spec, weight, bias }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(
            x,
            p.var(self.weight),
            p.var(self.bias),
            self.spec.stride,
            self.spec.padding,
        )
    }
}

/// Transposed convolution from `spec.out_channels` to `spec.in_channels`
/// channels; weights are laid out `[out_channels, in_channels, kh, kw]`
/// exactly as for the convolution it mirrors.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2d {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvTranspose2d {
    /// Layer mapping `from` channels to `to` channels.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        from: usize,
        to: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let spec = ConvSpec::strided(to, from, kernel, stride, padding);
        let per_axis = (kernel as f64 / stride as f64).max(1.0);
        let bound = he_bound(from as f64 * per_axis * per_axis);
        let weight = store.add(
            format!("{name}.weight"),
            uniform(vec![from, to, kernel, kernel], bound, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![to]));
        Self { spec, weight, bias }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv_transpose2d(
            x,
            p.var(self.weight),
            p.var(self.bias),
            self.spec.stride,
            self.spec.padding,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseSpec {
    pub in_features: usize,
    pub out_features: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub spec: DenseSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let bound = he_bound(in_features as f64);
        let weight = store.add(
            format!("{name}.weight"),
            uniform(vec![out_features, in_features], bound, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![out_features]));
        Self {
            spec: DenseSpec {
                in_features,
                out_features,
            },
            weight,
            bias,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.weight), p.var(self.bias))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_extents() {
        let s = ConvSpec::strided(3, 32, 8, 4, 2);
        assert_eq!(s.output_extent(256, 256).unwrap(), (64, 64));
        assert_eq!(s.output_extent(4, 4).unwrap(), (1, 1));
        assert!(ConvSpec::strided(1, 1, 5, 1, 0)
            .output_extent(3, 3)
            .is_err());
        assert_eq!(s.transposed_output_extent(4, 4).unwrap(), (16, 16));
        assert_eq!(ConvSpec::same(3, 8, 3).output_extent(7, 9).unwrap(), (7, 9));
    }

    #[test]
    fn store_binds_and_collects_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let d = Dense::new(&mut store, "fc", 2, 1, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::new(vec![2], vec![2.0, 3.0]).unwrap());
        let y = d.forward(&mut g, &p, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        store.load_grads(&grads, &p);
        assert_eq!(store.get(d.weight).grad().unwrap(), &[2.0, 3.0]);
        assert_eq!(store.get(d.bias).grad().unwrap(), &[1.0]);
        assert_eq!(store.name(d.weight), "fc.weight");
    }

    #[test]
    fn assign_checks_names_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        Dense::new(&mut store, "fc", 2, 1, &mut rng);
        let bad = vec![
            ("fc.weight".to_string(), Tensor::zeros(vec![2, 1])),
            ("fc.bias".to_string(), Tensor::zeros(vec![1])),
        ];
        assert!(store.assign(bad).is_err());
        let good = vec![
            ("fc.weight".to_string(), Tensor::zeros(vec![1, 2])),
            ("fc.bias".to_string(), Tensor::zeros(vec![1])),
        ];
        store.assign(good).unwrap();
        assert!(store.iter().all(|(_, t)| t.requires_grad()));
    }
}
