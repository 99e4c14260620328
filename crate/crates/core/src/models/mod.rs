//! Softmax regression and small MLP classifiers with analytic gradients.
//!
//! Each layer is stored as an `out × in` weight matrix plus a bias vector.
//! Hidden layers apply the configured activation, the last layer produces
//! logits that go through softmax.

mod io;
mod train;

pub use io::{load_model, save_model, MODEL_FORMAT_VERSION, MODEL_MAGIC};
pub use train::{DpSgdConfig, SgdConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathcore::{self, ProbVector, RealMatrix};

/// Floor applied to the parameter-difference norm in [`parametric_fidelity`].
pub const FIDELITY_NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    SoftmaxRegression,
    Mlp,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    /// ReLU uses subgradient 0 at the kink.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub hidden_sizes: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelSpec {
    pub fn softmax_regression(input_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::SoftmaxRegression,
            input_dim,
            num_classes,
            hidden_sizes: Vec::new(),
            activation: Activation::Relu,
        }
    }

    pub fn mlp(
        input_dim: usize,
        num_classes: usize,
        hidden_sizes: Vec<usize>,
        activation: Activation,
    ) -> Self {
        Self {
            kind: ModelKind::Mlp,
            input_dim,
            num_classes,
            hidden_sizes,
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("input_dim must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        match self.kind {
            ModelKind::SoftmaxRegression if !self.hidden_sizes.is_empty() => {
                Err(Error::invalid("softmax-regression takes no hidden layers"))
            }
            ModelKind::Mlp if self.hidden_sizes.is_empty() => {
                Err(Error::invalid("mlp needs at least one hidden layer"))
            }
            _ if self.hidden_sizes.contains(&0) => {
                Err(Error::invalid("hidden layer sizes must be positive"))
            }
            _ => Ok(()),
        }
    }

    /// `(out, in)` shape of every layer, input side first.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden_sizes.len() + 2);
        widths.push(self.input_dim);
        widths.extend_from_slice(&self.hidden_sizes);
        widths.push(self.num_classes);
        widths.windows(2).map(|w| (w[1], w[0])).collect()
    }
}

/// One affine block: `weights` is `out × in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: RealMatrix,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weights: RealMatrix::zeros(out, inp),
            bias: vec![0.0; out],
        }
    }
}

/// Parameter-shaped gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub layers: Vec<Layer>,
}

impl Gradient {
    fn zeros_like(spec: &ModelSpec) -> Self {
        Self {
            layers: spec
                .layer_shapes()
                .into_iter()
                .map(|(o, i)| Layer::zeros(o, i))
                .collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rescales so the L2 norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_to_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.norm();
        if norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn scale(&mut self, factor: f64) {
        self.for_each_mut(|v| *v *= factor);
    }

    fn add_assign(&mut self, other: &Gradient) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a
                .weights
                .as_mut_slice()
                .iter_mut()
                .zip(b.weights.as_slice())
            {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.as_slice().iter().chain(&l.bias).copied())
    }

    fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for l in &mut self.layers {
            l.weights.as_mut_slice().iter_mut().for_each(&mut f);
            l.bias.iter_mut().for_each(&mut f);
        }
    }
}

fn flatten(layers: &[Layer]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|l| l.weights.as_slice().iter().chain(&l.bias).copied())
        .collect()
}

/// Activations recorded during a forward pass.
struct ForwardTrace {
    /// Input fed to each layer; `inputs[0]` is `x`.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
    probs: ProbVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<Layer>,
    seed: u64,
}

/// Glorot-uniform weights and zero biases, deterministic in `seed`.
pub fn init_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = spec
        .layer_shapes()
        .into_iter()
        .map(|(out, inp)| {
            let limit = (6.0 / (out + inp) as f64).sqrt();
            let data = (0..out * inp)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            Layer {
                weights: RealMatrix::new(out, inp, data).expect("finite glorot weights"),
                bias: vec![0.0; out],
            }
        })
        .collect();
    Ok(Model {
        spec: spec.clone(),
        layers,
        seed,
    })
}

impl Model {
    /// Assembles a model from explicit parameters, checking shapes.
    pub fn from_layers(spec: ModelSpec, layers: Vec<Layer>, seed: u64) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(Error::invalid(format!(
                "spec expects {} layers, got {}",
                shapes.len(),
                layers.len()
            )));
        }
        for (i, ((out, inp), layer)) in shapes.iter().zip(&layers).enumerate() {
            if layer.weights.rows() != *out
                || layer.weights.cols() != *inp
                || layer.bias.len() != *out
            {
                return Err(Error::invalid(format!(
                    "layer {i} has shape {}x{} (+{} bias), expected {out}x{inp}",
                    layer.weights.rows(),
                    layer.weights.cols(),
                    layer.bias.len()
                )));
            }
            if !layer.weights.is_finite() || layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::invalid(format!(
                    "layer {i} has non-finite parameters"
                )));
            }
        }
        Ok(Self { spec, layers, seed })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    /// All parameters, layer by layer, weights (row-major) then biases.
    pub fn params_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Copy of this model with parameters replaced from a flat vector laid
    /// out as in [`Model::params_flat`].
    pub fn with_params_flat(&self, flat: &[f64]) -> Result<Model> {
        if flat.len() != self.num_params() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut out = self.clone();
        let mut pos = 0;
        for l in &mut out.layers {
            let n = l.weights.as_slice().len();
            l.weights
                .as_mut_slice()
                .copy_from_slice(&flat[pos..pos + n]);
            pos += n;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[pos..pos + nb]);
            pos += nb;
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("parameters must be finite"));
        }
        Ok(out)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.spec.input_dim {
            return Err(Error::invalid(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.spec.input_dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("input contains non-finite features"));
        }
        Ok(())
    }

    fn check_label(&self, y: usize) -> Result<()> {
        if y >= self.spec.num_classes {
            return Err(Error::OutOfRange(format!(
                "label {y} not in 0..{}",
                self.spec.num_classes
            )));
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> ForwardTrace {
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n - 1);
        let mut current = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weights.matvec(&current);
            for (zi, b) in z.iter_mut().zip(&layer.bias) {
                *zi += b;
            }
            inputs.push(current);
            if i + 1 < n {
                let act = self.spec.activation;
                current = z.iter().map(|&v| act.apply(v)).collect();
                pre.push(z);
            } else {
                current = z;
            }
        }
        ForwardTrace {
            inputs,
            pre,
            probs: mathcore::softmax_finite(&current),
        }
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut current = x.to_vec();
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weights.matvec(&current);
            for (zi, b) in z.iter_mut().zip(&layer.bias) {
                *zi += b;
            }
            if i + 1 < n {
                z.iter_mut()
                    .for_each(|v| *v = self.spec.activation.apply(*v));
            }
            current = z;
        }
        Ok(current)
    }

    pub fn forward(&self, x: &[f64]) -> Result<ProbVector> {
        self.check_input(x)?;
        Ok(self.trace(x).probs)
    }

    pub fn forward_batch(&self, batch: &RealMatrix) -> Result<Vec<ProbVector>> {
        if batch.rows() > 0 && batch.cols() != self.spec.input_dim {
            return Err(Error::invalid(format!(
                "batch has {} columns, model expects {}",
                batch.cols(),
                self.spec.input_dim
            )));
        }
        batch.row_iter().map(|r| self.forward(r)).collect()
    }

    pub fn predict_labels(&self, batch: &RealMatrix) -> Result<Vec<usize>> {
        Ok(self
            .forward_batch(batch)?
            .iter()
            .map(mathcore::argmax_label)
            .collect())
    }

    /// Penultimate-layer activations for MLPs; the raw input for softmax
    /// regression.
    pub fn embedding(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut t = self.trace(x);
        Ok(t.inputs.pop().expect("at least one layer"))
    }

    /// Cross-entropy of the one-hot label `y` against the prediction.
    pub fn per_example_loss(&self, x: &[f64], y: usize) -> Result<f64> {
        self.check_label(y)?;
        let p = self.forward(x)?;
        mathcore::cross_entropy(&ProbVector::one_hot(self.spec.num_classes, y), &p)
    }

    pub fn mean_loss(&self, x: &RealMatrix, y: &[usize]) -> Result<f64> {
        if x.rows() != y.len() || y.is_empty() {
            return Err(Error::invalid(
                "features and labels must be non-empty and aligned",
            ));
        }
        let mut total = 0.0;
        for (row, &label) in x.row_iter().zip(y) {
            total += self.per_example_loss(row, label)?;
        }
        Ok(total / y.len() as f64)
    }

    /// Backpropagates `dlogits` through the network, returning parameter
    /// gradients and, optionally, the gradient with respect to the input.
    fn backward(
        &self,
        trace: &ForwardTrace,
        dlogits: Vec<f64>,
        want_params: bool,
    ) -> (Option<Gradient>, Vec<f64>) {
        let mut grad = want_params.then(|| Gradient::zeros_like(&self.spec));
        let mut delta = dlogits;
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            if let Some(g) = grad.as_mut() {
                let input = &trace.inputs[l];
                let gl = &mut g.layers[l];
                for (r, &d) in delta.iter().enumerate() {
                    if d != 0.0 {
                        for (c, &a) in input.iter().enumerate() {
                            gl.weights.set(r, c, d * a);
                        }
                    }
                }
                gl.bias.copy_from_slice(&delta);
            }
            let mut back = layer.weights.t_matvec(&delta);
            if l > 0 {
                let z = &trace.pre[l - 1];
                let a = &trace.inputs[l];
                for ((b, &zi), &ai) in back.iter_mut().zip(z).zip(a) {
                    *b *= self.spec.activation.derivative(zi, ai);
                }
            }
            delta = back;
        }
        (grad, delta)
    }

    /// Loss of one example and the gradient of that loss in parameter space.
    pub fn loss_gradient(&self, x: &[f64], y: usize) -> Result<(f64, Gradient)> {
        self.check_input(x)?;
        self.check_label(y)?;
        let trace = self.trace(x);
        let p = trace.probs.as_slice();
        let loss = -p[y].max(mathcore::PROB_FLOOR).ln();
        let mut dlogits = p.to_vec();
        dlogits[y] -= 1.0;
        let (grad, _) = self.backward(&trace, dlogits, true);
        Ok((loss, grad.expect("parameter gradient requested")))
    }

    /// Exact gradient of `H(forward(x))` with respect to `x`.
    pub fn input_entropy_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let trace = self.trace(x);
        let h = mathcore::entropy(&trace.probs);
        // dH/dz_j = -p_j (ln p_j + H)
        let dlogits = trace
            .probs
            .as_slice()
            .iter()
            .map(|&p| if p > 0.0 { -p * (p.ln() + h) } else { 0.0 })
            .collect();
        Ok(self.backward(&trace, dlogits, false).1)
    }

    /// Parameters compared by [`parametric_fidelity`]: everything for
    /// softmax regression, the last layer for MLPs.
    fn fidelity_params(&self) -> Vec<f64> {
        match self.spec.kind {
            ModelKind::SoftmaxRegression => self.params_flat(),
            ModelKind::Mlp => flatten(&self.layers[self.layers.len() - 1..]),
        }
    }
}

/// `ln ‖w_a − w_b‖₂` with the norm floored at 1e-12.
pub fn parametric_fidelity(a: &Model, b: &Model) -> Result<f64> {
    if a.spec != b.spec {
        return Err(Error::invalid(
            "parametric fidelity needs identical model specs",
        ));
    }
    let norm = a
        .fidelity_params()
        .iter()
        .zip(b.fidelity_params())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    Ok(norm.max(FIDELITY_NORM_FLOOR).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn random_model(spec: &ModelSpec, seed: u64, scale: f64) -> Model {
        let m = init_model(spec, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        let normal = Normal::new(0.0, scale).unwrap();
        let flat: Vec<f64> = (0..m.num_params())
            .map(|_| normal.sample(&mut rng))
            .collect();
        m.with_params_flat(&flat).unwrap()
    }

    fn random_x(d: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn entropy_at(m: &Model, x: &[f64]) -> f64 {
        mathcore::entropy(&m.forward(x).unwrap())
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let spec = ModelSpec::mlp(5, 3, vec![16], Activation::Relu);
        let a = init_model(&spec, 7).unwrap();
        let b = init_model(&spec, 7).unwrap();
        let c = init_model(&spec, 8).unwrap();
        assert_eq!(a.params_flat(), b.params_flat());
        assert_ne!(a.params_flat(), c.params_flat());
        assert_eq!(a.layers().len(), 2);
        assert_eq!(a.layers()[0].weights.rows(), 16);
        assert_eq!(a.layers()[0].weights.cols(), 5);
        assert_eq!(a.layers()[1].bias.len(), 3);
        assert!(a.layers().iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(ModelSpec::softmax_regression(0, 2).validate().is_err());
        assert!(ModelSpec::softmax_regression(3, 1).validate().is_err());
        assert!(ModelSpec::mlp(3, 2, vec![], Activation::Tanh)
            .validate()
            .is_err());
        let mut s = ModelSpec::softmax_regression(3, 2);
        s.hidden_sizes = vec![4];
        assert!(s.validate().is_err());
    }

    #[test]
    fn zero_params_give_uniform_output() {
        let spec = ModelSpec::softmax_regression(4, 5);
        let m = init_model(&spec, 0).unwrap();
        let m = m.with_params_flat(&vec![0.0; m.num_params()]).unwrap();
        let p = m.forward(&[3.0, -1.0, 2.0, 9.0]).unwrap();
        assert!(p.as_slice().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn hand_set_two_class_forward() {
        let spec = ModelSpec::softmax_regression(2, 2);
        let layer = Layer {
            weights: RealMatrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap(),
            bias: vec![0.0, 0.0],
        };
        let m = Model::from_layers(spec, vec![layer], 0).unwrap();
        let p = m.forward(&[3f64.ln(), 5.0]).unwrap();
        assert!((p.as_slice()[0] - 0.75).abs() < 1e-12);
        assert!((p.as_slice()[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn batch_forward_matches_rows() {
        let spec = ModelSpec::mlp(6, 4, vec![8, 5], Activation::Tanh);
        let m = random_model(&spec, 3, 0.7);
        let rows: Vec<Vec<f64>> = (0..10).map(|i| random_x(6, i)).collect();
        let batch = RealMatrix::from_rows(&rows).unwrap();
        let out = m.forward_batch(&batch).unwrap();
        for (r, p) in rows.iter().zip(&out) {
            let q = m.forward(r).unwrap();
            for (a, b) in p.as_slice().iter().zip(q.as_slice()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
        assert!(m.forward(&[0.0; 3]).is_err());
    }

    #[test]
    fn uniform_output_has_zero_entropy_gradient() {
        let spec = ModelSpec::softmax_regression(3, 4);
        let m = init_model(&spec, 1).unwrap();
        let m = m.with_params_flat(&vec![0.0; m.num_params()]).unwrap();
        assert!(m
            .input_entropy_gradient(&[0.3, -2.0, 1.0])
            .unwrap()
            .iter()
            .all(|&g| g.abs() < 1e-15));

        // Identical weight rows: output is uniform for every x.
        let row = [0.4, -1.2, 2.5];
        let layer = Layer {
            weights: RealMatrix::from_rows(&[row, row, row]).unwrap(),
            bias: vec![0.1, 0.1, 0.1],
        };
        let m = Model::from_layers(ModelSpec::softmax_regression(3, 3), vec![layer], 0).unwrap();
        for s in 0..5 {
            let g = m.input_entropy_gradient(&random_x(3, s)).unwrap();
            assert!(g.iter().all(|v| v.abs() < 1e-12), "{g:?}");
        }
    }

    #[test]
    fn entropy_gradient_matches_finite_differences() {
        let h = 1e-5;
        for seed in 0..20u64 {
            let d = 2 + (seed as usize % 12);
            let spec = if seed % 2 == 0 {
                ModelSpec::softmax_regression(d, 3 + seed as usize % 4)
            } else {
                ModelSpec::mlp(d, 3, vec![6], Activation::Tanh)
            };
            let m = random_model(&spec, seed, 0.8);
            let x = random_x(d, seed + 100);
            let g = m.input_entropy_gradient(&x).unwrap();
            for i in 0..d {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (entropy_at(&m, &xp) - entropy_at(&m, &xm)) / (2.0 * h);
                assert!(
                    rel_err(g[i], fd) < 1e-4,
                    "seed {seed} dim {i}: {} vs {fd}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let h = 1e-5;
        let spec = ModelSpec::mlp(4, 3, vec![5], Activation::Tanh);
        let m = random_model(&spec, 11, 0.6);
        let x = random_x(4, 5);
        let (_, g) = m.loss_gradient(&x, 2).unwrap();
        let flat = m.params_flat();
        for (i, gi) in g.flat().into_iter().enumerate() {
            let mut p = flat.clone();
            p[i] += h;
            let lp = m
                .with_params_flat(&p)
                .unwrap()
                .per_example_loss(&x, 2)
                .unwrap();
            p[i] -= 2.0 * h;
            let lm = m
                .with_params_flat(&p)
                .unwrap()
                .per_example_loss(&x, 2)
                .unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!(rel_err(gi, fd) < 1e-4, "param {i}: {gi} vs {fd}");
        }
    }

    #[test]
    fn per_example_loss_examples() {
        let spec = ModelSpec::softmax_regression(2, 3);
        let m = init_model(&spec, 0).unwrap();
        let zero = m.with_params_flat(&vec![0.0; m.num_params()]).unwrap();
        for y in 0..3 {
            assert!((zero.per_example_loss(&[1.0, 2.0], y).unwrap() - 3f64.ln()).abs() < 1e-12);
        }
        assert!(matches!(
            zero.per_example_loss(&[1.0, 2.0], 3),
            Err(Error::OutOfRange(_))
        ));

        // Confident to the point of saturation.
        let layer = Layer {
            weights: RealMatrix::zeros(3, 2),
            bias: vec![0.0, 800.0, 0.0],
        };
        let sure = Model::from_layers(spec.clone(), vec![layer], 0).unwrap();
        assert_eq!(sure.per_example_loss(&[0.5, 0.5], 1).unwrap(), 0.0);

        let m = random_model(&spec, 2, 1.0);
        let x = [0.3, -0.7];
        let p = m.forward(&x).unwrap();
        for y in 0..3 {
            let direct = -p.as_slice()[y].ln();
            assert!((m.per_example_loss(&x, y).unwrap() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn parametric_fidelity_examples() {
        let spec = ModelSpec::softmax_regression(2, 2);
        let a = init_model(&spec, 1).unwrap();
        let f = parametric_fidelity(&a, &a).unwrap();
        assert!((f - 1e-12f64.ln()).abs() < 1e-9);
        assert!((f + 27.631_021_115_928_547).abs() < 1e-9);

        // Shift one coordinate by e: the norm of the difference is exactly e.
        let mut flat = a.params_flat();
        flat[0] += std::f64::consts::E;
        let b = a.with_params_flat(&flat).unwrap();
        assert!((parametric_fidelity(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(
            parametric_fidelity(&a, &b).unwrap(),
            parametric_fidelity(&b, &a).unwrap()
        );

        let c = init_model(&ModelSpec::softmax_regression(3, 2), 1).unwrap();
        assert!(parametric_fidelity(&a, &c).is_err());
    }

    #[test]
    fn mlp_fidelity_uses_last_layer_only() {
        let spec = ModelSpec::mlp(3, 2, vec![4], Activation::Relu);
        let a = init_model(&spec, 1).unwrap();
        let mut flat = a.params_flat();
        flat[0] += 100.0; // first-layer weight
        let b = a.with_params_flat(&flat).unwrap();
        assert!((parametric_fidelity(&a, &b).unwrap() - 1e-12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn embedding_is_penultimate_activation() {
        let spec = ModelSpec::mlp(3, 2, vec![4], Activation::Relu);
        let m = random_model(&spec, 4, 1.0);
        let x = [0.5, -0.2, 0.9];
        let e = m.embedding(&x).unwrap();
        assert_eq!(e.len(), 4);
        let l0 = &m.layers()[0];
        let manual: Vec<f64> = l0
            .weights
            .matvec(&x)
            .iter()
            .zip(&l0.bias)
            .map(|(z, b)| (z + b).max(0.0))
            .collect();
        assert_eq!(e, manual);
        let lr = init_model(&ModelSpec::softmax_regression(3, 2), 0).unwrap();
        assert_eq!(lr.embedding(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn gradient_clip_contract() {
        let spec = ModelSpec::mlp(4, 3, vec![5], Activation::Tanh);
        let m = random_model(&spec, 9, 3.0);
        for s in 0..20 {
            let (_, mut g) = m.loss_gradient(&random_x(4, s), (s % 3) as usize).unwrap();
            for c in [1e-3, 0.1, 1.0, 10.0] {
                let mut h = g.clone();
                h.clip_to_norm(c);
                assert!(h.norm() <= c + 1e-9);
            }
            let before = g.norm();
            g.clip_to_norm(before * 2.0);
            assert_eq!(g.norm(), before);
        }
    }
}
