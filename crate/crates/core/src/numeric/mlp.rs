//! Feed-forward backbone: affine layers with ReLU on hidden layers and an
//! identity output layer, plus exact analytic backpropagation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: &mut [f64]) {
        if self == Activation::Relu {
            for v in z.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// returns Wx + b
pub fn affine_forward(x: &[f64], weight: &Matrix, bias: &[f64]) -> Result<Vec<f64>> {
    if bias.len() != weight.rows() {
        return Err(Error::shape("affine_forward bias", weight.rows(), bias.len()));
    }
    let mut y = weight.matvec(x)?;
    for (yi, bi) in y.iter_mut().zip(bias) {
        *yi += bi;
    }
    Ok(y)
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// The feature extractor. Layer dimensions must chain; the output layer uses
/// the identity activation so features are unbounded in sign.
#[derive(Debug, Clone)]
pub struct BackboneParams {
    layers: Vec<Layer>,
}

/// Per-layer inputs and pre-activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    inputs: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
}

/// Gradients of a scalar loss with respect to every backbone parameter and
/// to the backbone input.
#[derive(Debug, Clone)]
pub struct BackboneGrads {
    pub layers: Vec<(Matrix, Vec<f64>)>,
    pub input: Vec<f64>,
}

impl BackboneGrads {
    pub fn zeros_like(params: &BackboneParams) -> Self {
        BackboneGrads {
            layers: params
                .layers
                .iter()
                .map(|l| (Matrix::zeros(l.out_dim(), l.in_dim()), vec![0.0; l.out_dim()]))
                .collect(),
            input: vec![0.0; params.input_dim()],
        }
    }

    pub fn accumulate(&mut self, other: &BackboneGrads, scale: f64) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            for (v, o) in w.data_mut().iter_mut().zip(ow.data()) {
                *v += scale * o;
            }
            for (v, o) in b.iter_mut().zip(ob) {
                *v += scale * o;
            }
        }
    }
}

impl BackboneParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("backbone needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::shape("backbone layer chain", w[0].out_dim(), w[1].in_dim()));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::shape("backbone bias", l.out_dim(), l.bias.len()));
            }
            if !l.weight.is_finite() || l.bias.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("backbone layer {i}")));
            }
        }
        Ok(BackboneParams { layers })
    }

    /// Random init: hidden layers ReLU, final layer identity; entries uniform
    /// in [-1/sqrt(in_dim), 1/sqrt(in_dim)].
    pub fn random(dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        Self::random_with_output(dims, Activation::Identity, rng)
    }

    /// Like [`BackboneParams::random`] but with an explicit output activation.
    /// ReLU output keeps features in the non-negative orthant, the way
    /// pooled post-ReLU convolutional features are.
    pub fn random_with_output(
        dims: &[usize],
        output: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidConfig("backbone dims need input and output".into()));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (idx, w) in dims.windows(2).enumerate() {
            let (in_dim, out_dim) = (w[0], w[1]);
            let bound = 1.0 / (in_dim as f64).sqrt();
            let weight = Matrix::from_fn(out_dim, in_dim, |_, _| rng.gen_range(-bound..bound));
            let bias = (0..out_dim).map(|_| rng.gen_range(-bound..bound)).collect();
            let activation = if idx + 1 == dims.len() - 1 { output } else { Activation::Relu };
            layers.push(Layer { weight, bias, activation });
        }
        BackboneParams::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    /// Forward pass; the cache holds everything `backward` needs.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ActivationCache)> {
        if x.len() != self.input_dim() {
            return Err(Error::shape("backbone forward", self.input_dim(), x.len()));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        for layer in &self.layers {
            inputs.push(cur.clone());
            let mut z = affine_forward(&cur, &layer.weight, &layer.bias)?;
            pre_activations.push(z.clone());
            layer.activation.apply(&mut z);
            cur = z;
        }
        Ok((cur, ActivationCache { inputs, pre_activations }))
    }

    /// Exact gradients w.r.t. all parameters and the input, given the gradient
    /// of the loss w.r.t. the output feature. The cache must come from a
    /// forward pass through these same layer shapes.
    pub fn backward(&self, cache: &ActivationCache, grad_feature: &[f64]) -> Result<BackboneGrads> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::shape("backprop cache", self.layers.len(), cache.inputs.len()));
        }
        if grad_feature.len() != self.feature_dim() {
            return Err(Error::shape("backprop grad_feature", self.feature_dim(), grad_feature.len()));
        }
        let mut grads: Vec<(Matrix, Vec<f64>)> = Vec::with_capacity(self.layers.len());
        let mut delta = grad_feature.to_vec();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let pre = &cache.pre_activations[idx];
            let input = &cache.inputs[idx];
            if pre.len() != layer.out_dim() || input.len() != layer.in_dim() {
                return Err(Error::shape("backprop cache layer", layer.out_dim(), pre.len()));
            }
            for (d, p) in delta.iter_mut().zip(pre) {
                *d *= layer.activation.derivative(*p);
            }
            let mut grad_w = Matrix::zeros(layer.out_dim(), layer.in_dim());
            grad_w.add_outer(&delta, input, 1.0)?;
            let grad_b = delta.clone();
            let next_delta = layer.weight.matvec_transposed(&delta)?;
            grads.push((grad_w, grad_b));
            delta = next_delta;
        }
        grads.reverse();
        Ok(BackboneGrads { layers: grads, input: delta })
    }

    /// Mutable views of every parameter tensor (layer order, weight then bias).
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for layer in &mut self.layers {
            out.push(layer.weight.data_mut());
            out.push(layer.bias.as_mut_slice());
        }
        out
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for layer in &self.layers {
            out.push(layer.weight.data().len());
            out.push(layer.bias.len());
        }
        out
    }
}

/// Read-only views of a gradient set, matching `param_slices_mut` order.
pub fn backbone_grad_slices(grads: &BackboneGrads) -> Vec<&[f64]> {
    let mut out = Vec::with_capacity(grads.layers.len() * 2);
    for (w, b) in &grads.layers {
        out.push(w.data());
        out.push(b.as_slice());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_identity_layer(n: usize) -> BackboneParams {
        BackboneParams::new(vec![Layer {
            weight: Matrix::identity(n),
            bias: vec![0.0; n],
            activation: Activation::Identity,
        }])
        .unwrap()
    }

    #[test]
    fn affine_identity() {
        let w = Matrix::identity(2);
        let y = affine_forward(&[3.0, -1.0], &w, &[0.0, 0.0]).unwrap();
        assert_eq!(y, vec![3.0, -1.0]);
    }

    #[test]
    fn affine_hand_case() {
        let w = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 2.0]]).unwrap();
        let y = affine_forward(&[1.0, 1.0], &w, &[1.0, 0.0]).unwrap();
        assert_eq!(y, vec![3.0, 2.0]);
    }

    #[test]
    fn affine_shape_error() {
        let w = Matrix::zeros(2, 3);
        assert!(affine_forward(&[1.0, 2.0], &w, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn forward_identity_layer() {
        let net = single_identity_layer(3);
        let (f, _) = net.forward(&[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(f, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut w = Matrix::identity(2);
        for v in w.data_mut() {
            *v = -*v;
        }
        let net = BackboneParams::new(vec![Layer {
            weight: w,
            bias: vec![0.0, 0.0],
            activation: Activation::Relu,
        }])
        .unwrap();
        let (f, _) = net.forward(&[1.0, 1.0]).unwrap();
        assert_eq!(f, vec![0.0, 0.0]);
    }

    // Independent re-implementation of the forward pass used as an oracle.
    fn scripted_forward(net: &BackboneParams, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for layer in net.layers() {
            let mut next = vec![0.0; layer.out_dim()];
            for i in 0..layer.out_dim() {
                let mut acc = layer.bias[i];
                for j in 0..layer.in_dim() {
                    acc += layer.weight.get(i, j) * cur[j];
                }
                next[i] = if layer.activation == Activation::Relu && acc < 0.0 {
                    0.0
                } else {
                    acc
                };
            }
            cur = next;
        }
        cur
    }

    #[test]
    fn forward_matches_scripted_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let net = BackboneParams::random(&[5, 7, 4], &mut rng).unwrap();
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (f, _) = net.forward(&x).unwrap();
            let oracle = scripted_forward(&net, &x);
            for (a, b) in f.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = BackboneParams::random(&[4, 6, 4], &mut rng).unwrap();
        let x = [0.3, -0.7, 1.1, 0.0];
        let (a, _) = net.forward(&x).unwrap();
        let (b, _) = net.forward(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = BackboneParams::random(&[3, 4, 2], &mut rng).unwrap();
        let (_, cache) = net.forward(&[0.5, -0.5, 1.0]).unwrap();
        let grads = net.backward(&cache, &[0.0, 0.0]).unwrap();
        for (w, b) in &grads.layers {
            assert!(w.data().iter().all(|v| *v == 0.0));
            assert!(b.iter().all(|v| *v == 0.0));
        }
        assert!(grads.input.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_linear_layer_grad_is_outer_product() {
        let net = BackboneParams::new(vec![Layer {
            weight: Matrix::from_rows(&[vec![0.2, -0.4], vec![1.0, 0.3]]).unwrap(),
            bias: vec![0.1, -0.2],
            activation: Activation::Identity,
        }])
        .unwrap();
        let x = [0.7, -1.3];
        let g = [0.5, 2.0];
        let (_, cache) = net.forward(&x).unwrap();
        let grads = net.backward(&cache, &g).unwrap();
        let (gw, gb) = &grads.layers[0];
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(gw.get(i, j), g[i] * x[j]);
            }
        }
        assert_eq!(gb.as_slice(), &g);
    }

    // Central finite differences over every parameter of a small ReLU net.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = 1e-5;
        for _ in 0..10 {
            let mut net = BackboneParams::random(&[4, 5, 3], &mut rng).unwrap();
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let probe: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let loss = |net: &BackboneParams| -> f64 {
                let (f, _) = net.forward(&x).unwrap();
                f.iter().zip(&probe).map(|(a, b)| a * b).sum()
            };

            let (_, cache) = net.forward(&x).unwrap();
            let analytic = net.backward(&cache, &probe).unwrap();

            for layer_idx in 0..2 {
                let n_w = net.layers()[layer_idx].weight.data().len();
                for p in 0..n_w {
                    let orig = net.layers()[layer_idx].weight.data()[p];
                    net.layers_mut()[layer_idx].weight.data_mut()[p] = orig + h;
                    let up = loss(&net);
                    net.layers_mut()[layer_idx].weight.data_mut()[p] = orig - h;
                    let down = loss(&net);
                    net.layers_mut()[layer_idx].weight.data_mut()[p] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let an = analytic.layers[layer_idx].0.data()[p];
                    let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
                    assert!(rel < 1e-4, "layer {layer_idx} w[{p}]: {an} vs {fd}");
                }
            }
        }
    }
}
