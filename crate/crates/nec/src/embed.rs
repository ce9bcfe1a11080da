//! Observation embeddings: a small dense network with hand-written
//! reverse-mode gradients, an RMSProp optimizer for its weights, and two
//! frozen alternatives (random projection for MFEC, identity for the
//! tabular regime).
//!
//! The network maps an observation vector to a key `h` that the
//! per-action dictionaries are queried with. All arithmetic is `f64` so
//! that finite-difference gradient checks stay sharp.

use crate::linalg::Matrix;
use crate::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Activation applied after a layer's affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    // Subgradient 0 at the relu kink.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Shape and activation of one dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

/// One dense layer: `a = act(W x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// Parameters of the embedding network.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams {
    layers: Vec<Layer>,
}

/// Cached pre- and post-activations from one forward pass, consumed by
/// [`EmbeddingParams::backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

/// Gradients mirroring [`EmbeddingParams`] layer by layer.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub layers: Vec<(Matrix, Vec<f64>)>,
}

impl ParamGrads {
    /// Zero gradients shaped like `params`.
    pub fn zeros_like(params: &EmbeddingParams) -> Self {
        ParamGrads {
            layers: params
                .layers
                .iter()
                .map(|l| {
                    (
                        Matrix::zeros(l.weight.rows(), l.weight.cols()),
                        vec![0.0; l.bias.len()],
                    )
                })
                .collect(),
        }
    }

    /// `self += other`, used to accumulate over a minibatch.
    pub fn accumulate(&mut self, other: &ParamGrads) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Internal(
                "gradient accumulation across mismatched shapes".into(),
            ));
        }
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            if w.rows() != ow.rows() || w.cols() != ow.cols() || b.len() != ob.len() {
                return Err(Error::Internal(
                    "gradient accumulation across mismatched shapes".into(),
                ));
            }
            for (x, y) in w.data_mut().iter_mut().zip(ow.data()) {
                *x += y;
            }
            for (x, y) in b.iter_mut().zip(ob) {
                *x += y;
            }
        }
        Ok(())
    }

    /// Scale every entry, e.g. by `1/batch` for a mean loss.
    pub fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.layers {
            for x in w.data_mut() {
                *x *= s;
            }
            for x in b.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.is_finite() && b.iter().all(|v| v.is_finite()))
    }
}

impl EmbeddingParams {
    /// Initialize from a layer spec. Weights are uniform in
    /// `±sqrt(6 / (fan_in + fan_out))`, biases zero; deterministic given
    /// the seed.
    pub fn init(spec: &[LayerSpec], seed: u64) -> Result<Self> {
        validate_spec(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .iter()
            .map(|s| {
                let bound = (6.0 / (s.input + s.output) as f64).sqrt();
                let mut weight = Matrix::zeros(s.output, s.input);
                for w in weight.data_mut() {
                    *w = rng.random_range(-bound..=bound);
                }
                Layer {
                    weight,
                    bias: vec![0.0; s.output],
                    activation: s.activation,
                }
            })
            .collect();
        Ok(EmbeddingParams { layers })
    }

    /// Build directly from layers (used by tests and checkpoint loading).
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let spec: Vec<LayerSpec> = layers
            .iter()
            .map(|l| LayerSpec {
                input: l.weight.cols(),
                output: l.weight.rows(),
                activation: l.activation,
            })
            .collect();
        validate_spec(&spec)?;
        for l in &layers {
            if l.bias.len() != l.weight.rows() {
                return Err(Error::Config(format!(
                    "bias length {} does not match {} output rows",
                    l.bias.len(),
                    l.weight.rows()
                )));
            }
            if !l.weight.is_finite() || !l.bias.iter().all(|v| v.is_finite()) {
                return Err(Error::Config("non-finite embedding parameter".into()));
            }
        }
        Ok(EmbeddingParams { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Dimension of the produced key `h`.
    pub fn key_dim(&self) -> usize {
        self.layers.last().map(|l| l.weight.rows()).unwrap_or(0)
    }

    /// Expected observation dimension.
    pub fn input_dim(&self) -> usize {
        self.layers.first().map(|l| l.weight.cols()).unwrap_or(0)
    }

    /// Forward pass producing the key and a trace for the backward pass.
    pub fn forward(&self, obs: &[f64]) -> Result<(Vec<f64>, ForwardTrace)> {
        if obs.len() != self.input_dim() {
            return Err(Error::InvalidInput(format!(
                "observation length {} does not match network input {}",
                obs.len(),
                self.input_dim()
            )));
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut x = obs.to_vec();
        for layer in &self.layers {
            let mut z = layer.weight.matvec(&x)?;
            for (zi, bi) in z.iter_mut().zip(&layer.bias) {
                *zi += bi;
            }
            let a: Vec<f64> = z.iter().map(|&zi| layer.activation.apply(zi)).collect();
            pre.push(z);
            post.push(a.clone());
            x = a;
        }
        Ok((
            x,
            ForwardTrace {
                input: obs.to_vec(),
                pre,
                post,
            },
        ))
    }

    /// Reverse-mode pass: given `dL/dh`, produce parameter gradients and
    /// `dL/dobs`. The trace must come from [`Self::forward`] with these
    /// parameters.
    pub fn backward(&self, trace: &ForwardTrace, dl_dh: &[f64]) -> Result<(ParamGrads, Vec<f64>)> {
        if trace.pre.len() != self.layers.len() {
            return Err(Error::Internal(
                "forward trace does not match network depth".into(),
            ));
        }
        if dl_dh.len() != self.key_dim() {
            return Err(Error::InvalidInput(format!(
                "output gradient length {} does not match key dim {}",
                dl_dh.len(),
                self.key_dim()
            )));
        }
        let mut grads = ParamGrads::zeros_like(self);
        let mut upstream = dl_dh.to_vec();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let z = &trace.pre[idx];
            if z.len() != layer.weight.rows() {
                return Err(Error::Internal(
                    "forward trace does not match layer shape".into(),
                ));
            }
            let dz: Vec<f64> = upstream
                .iter()
                .zip(z)
                .map(|(g, &zi)| g * layer.activation.derivative(zi))
                .collect();
            let layer_input = if idx == 0 {
                &trace.input
            } else {
                &trace.post[idx - 1]
            };
            let (dw, db) = &mut grads.layers[idx];
            dw.add_outer(&dz, layer_input, 1.0);
            for (bi, di) in db.iter_mut().zip(&dz) {
                *bi += di;
            }
            upstream = layer.weight.matvec_transpose(&dz)?;
        }
        Ok((grads, upstream))
    }
}

fn validate_spec(spec: &[LayerSpec]) -> Result<()> {
    if spec.is_empty() {
        return Err(Error::Config("embedding needs at least one layer".into()));
    }
    for s in spec {
        if s.input == 0 || s.output == 0 {
            return Err(Error::Config("zero-sized embedding layer".into()));
        }
    }
    for pair in spec.windows(2) {
        if pair[0].output != pair[1].input {
            return Err(Error::Config(format!(
                "layer shapes do not chain: {} outputs feeding {} inputs",
                pair[0].output, pair[1].input
            )));
        }
    }
    Ok(())
}

/// RMSProp state for the embedding parameters.
///
/// `nu <- rho * nu + (1 - rho) * g^2`, then
/// `theta <- theta - lr * g / (sqrt(nu) + eps)`, elementwise.
#[derive(Debug, Clone)]
pub struct OptState {
    nu: ParamGrads,
    pub rho: f64,
    pub eps: f64,
    pub learning_rate: f64,
}

impl OptState {
    pub fn new(params: &EmbeddingParams, learning_rate: f64, rho: f64, eps: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) || rho == 0.0 {
            return Err(Error::Config(format!("rmsprop rho {rho} not in (0,1)")));
        }
        if eps <= 0.0 || learning_rate <= 0.0 {
            return Err(Error::Config(
                "rmsprop stabilizer and learning rate must be positive".into(),
            ));
        }
        Ok(OptState {
            nu: ParamGrads::zeros_like(params),
            rho,
            eps,
            learning_rate,
        })
    }

    /// Accumulator for checkpointing.
    pub fn accumulator(&self) -> &ParamGrads {
        &self.nu
    }

    pub fn set_accumulator(&mut self, nu: ParamGrads) {
        self.nu = nu;
    }

    /// One RMSProp step. Rejects non-finite gradients without touching
    /// params or state; callers flag the rejection in the run record.
    pub fn step(&mut self, params: &mut EmbeddingParams, grads: &ParamGrads) -> Result<()> {
        if grads.layers.len() != params.layers.len() {
            return Err(Error::Internal("gradient/parameter shape mismatch".into()));
        }
        if !grads.is_finite() {
            return Err(Error::NonFiniteGradient);
        }
        for ((layer, (nw, nb)), (gw, gb)) in params
            .layers
            .iter_mut()
            .zip(self.nu.layers.iter_mut())
            .zip(&grads.layers)
        {
            for ((w, n), g) in layer
                .weight
                .data_mut()
                .iter_mut()
                .zip(nw.data_mut())
                .zip(gw.data())
            {
                *n = self.rho * *n + (1.0 - self.rho) * g * g;
                *w -= self.learning_rate * g / (n.sqrt() + self.eps);
            }
            for ((b, n), g) in layer.bias.iter_mut().zip(nb.iter_mut()).zip(gb) {
                *n = self.rho * *n + (1.0 - self.rho) * g * g;
                *b -= self.learning_rate * g / (n.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Frozen random projection used as the MFEC embedding: entries i.i.d.
/// standard normal scaled by `1/sqrt(key_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomProjection {
    matrix: Matrix,
    pub seed: u64,
}

impl RandomProjection {
    pub fn new(key_dim: usize, obs_dim: usize, seed: u64) -> Result<Self> {
        if key_dim == 0 || obs_dim == 0 {
            return Err(Error::Config("zero-sized random projection".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (key_dim as f64).sqrt();
        let mut matrix = Matrix::zeros(key_dim, obs_dim);
        for w in matrix.data_mut() {
            *w = standard_normal(&mut rng) * scale;
        }
        Ok(RandomProjection { matrix, seed })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn key_dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn obs_dim(&self) -> usize {
        self.matrix.cols()
    }

    /// `h = M obs`.
    pub fn embed(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.matrix.matvec(obs)
    }
}

// Box-Muller; two uniform draws per normal keeps the stream layout simple.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// The embedding function an agent queries memories with.
#[derive(Debug, Clone)]
pub enum Embedding {
    /// Trainable dense network.
    Dense(EmbeddingParams),
    /// Frozen random projection (MFEC and ablations).
    Projection(RandomProjection),
    /// Frozen identity map; key dim equals observation dim. Used for the
    /// tabular regime where observations are one-hot.
    Identity { dim: usize },
}

impl Embedding {
    pub fn key_dim(&self) -> usize {
        match self {
            Embedding::Dense(p) => p.key_dim(),
            Embedding::Projection(p) => p.key_dim(),
            Embedding::Identity { dim } => *dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Embedding::Dense(p) => p.input_dim(),
            Embedding::Projection(p) => p.obs_dim(),
            Embedding::Identity { dim } => *dim,
        }
    }

    pub fn trainable(&self) -> bool {
        matches!(self, Embedding::Dense(_))
    }

    /// Compute the key; dense embeddings also return the forward trace.
    pub fn forward(&self, obs: &[f64]) -> Result<(Vec<f64>, Option<ForwardTrace>)> {
        match self {
            Embedding::Dense(p) => {
                let (h, trace) = p.forward(obs)?;
                Ok((h, Some(trace)))
            }
            Embedding::Projection(p) => Ok((p.embed(obs)?, None)),
            Embedding::Identity { dim } => {
                if obs.len() != *dim {
                    return Err(Error::InvalidInput(format!(
                        "observation length {} does not match identity embedding dim {}",
                        obs.len(),
                        dim
                    )));
                }
                Ok((obs.to_vec(), None))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(chain: &[(usize, usize, Activation)]) -> Vec<LayerSpec> {
        chain
            .iter()
            .map(|&(i, o, a)| LayerSpec {
                input: i,
                output: o,
                activation: a,
            })
            .collect()
    }

    #[test]
    fn init_biases_are_zero() {
        let p = EmbeddingParams::init(&spec(&[(2, 2, Activation::Identity)]), 7).unwrap();
        assert_eq!(p.layers()[0].bias, vec![0.0, 0.0]);
    }

    #[test]
    fn init_is_deterministic() {
        let s = spec(&[(4, 8, Activation::Relu), (8, 3, Activation::Identity)]);
        let a = EmbeddingParams::init(&s, 123).unwrap();
        let b = EmbeddingParams::init(&s, 123).unwrap();
        assert_eq!(a, b);
        let c = EmbeddingParams::init(&s, 124).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_key_dim_follows_chain() {
        let s = spec(&[(4, 8, Activation::Relu), (8, 3, Activation::Identity)]);
        let p = EmbeddingParams::init(&s, 0).unwrap();
        assert_eq!(p.key_dim(), 3);
        assert_eq!(p.input_dim(), 4);
    }

    #[test]
    fn init_rejects_broken_chain() {
        let s = spec(&[(4, 8, Activation::Relu), (9, 3, Activation::Identity)]);
        assert!(matches!(
            EmbeddingParams::init(&s, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn init_weights_within_fan_bound() {
        let s = spec(&[(4, 8, Activation::Relu)]);
        let p = EmbeddingParams::init(&s, 5).unwrap();
        let bound = (6.0 / 12.0f64).sqrt();
        assert!(p.layers()[0].weight.data().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn forward_identity_network() {
        let p = EmbeddingParams::from_layers(vec![Layer {
            weight: Matrix::identity(2),
            bias: vec![0.0, 0.0],
            activation: Activation::Identity,
        }])
        .unwrap();
        let (h, _) = p.forward(&[1.0, 2.0]).unwrap();
        assert_eq!(h, vec![1.0, 2.0]);
    }

    #[test]
    fn forward_relu_clamps() {
        let p = EmbeddingParams::from_layers(vec![Layer {
            weight: Matrix::identity(2),
            bias: vec![0.0, 0.0],
            activation: Activation::Relu,
        }])
        .unwrap();
        let (h, _) = p.forward(&[-1.0, 2.0]).unwrap();
        assert_eq!(h, vec![0.0, 2.0]);
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let s = spec(&[(3, 2, Activation::Identity)]);
        let p = EmbeddingParams::init(&s, 0).unwrap();
        assert!(matches!(
            p.forward(&[1.0, 2.0]),
            Err(Error::InvalidInput(_))
        ));
    }

    // Independent straight-line recomputation, scalar by scalar.
    fn straight_line_forward(p: &EmbeddingParams, obs: &[f64]) -> Vec<f64> {
        let mut x = obs.to_vec();
        for layer in p.layers() {
            let mut out = Vec::with_capacity(layer.weight.rows());
            for r in 0..layer.weight.rows() {
                let mut acc = layer.bias[r];
                for c in 0..layer.weight.cols() {
                    acc += layer.weight.get(r, c) * x[c];
                }
                out.push(match layer.activation {
                    Activation::Relu => {
                        if acc > 0.0 {
                            acc
                        } else {
                            0.0
                        }
                    }
                    Activation::Identity => acc,
                });
            }
            x = out;
        }
        x
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        use rand::Rng;
        let s = spec(&[(5, 7, Activation::Relu), (7, 3, Activation::Identity)]);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..20 {
            let p = EmbeddingParams::init(&s, trial).unwrap();
            let obs: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (h, _) = p.forward(&obs).unwrap();
            let oracle = straight_line_forward(&p, &obs);
            for (a, b) in h.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12, "fwd {a} vs oracle {b}");
            }
        }
    }

    #[test]
    fn backward_zero_upstream_gives_zero_grads() {
        let s = spec(&[(3, 4, Activation::Relu), (4, 2, Activation::Identity)]);
        let p = EmbeddingParams::init(&s, 9).unwrap();
        let (_, trace) = p.forward(&[0.5, -0.3, 1.0]).unwrap();
        let (grads, dobs) = p.backward(&trace, &[0.0, 0.0]).unwrap();
        assert!(grads
            .layers
            .iter()
            .all(|(w, b)| w.data().iter().all(|v| *v == 0.0) && b.iter().all(|v| *v == 0.0)));
        assert!(dobs.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_single_linear_layer_closed_form() {
        // h = W x, dL/dW = dL_dh (outer) x
        let p = EmbeddingParams::init(&spec(&[(3, 2, Activation::Identity)]), 3).unwrap();
        let x = [1.0, -2.0, 0.5];
        let g = [2.0, -1.0];
        let (_, trace) = p.forward(&x).unwrap();
        let (grads, _) = p.backward(&trace, &g).unwrap();
        let (dw, db) = &grads.layers[0];
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(dw.get(r, c), g[r] * x[c]);
            }
        }
        assert_eq!(db.as_slice(), &g);
    }

    /// Central finite differences through the full forward pass.
    fn fd_check(params: &EmbeddingParams, obs: &[f64], dl_dh: &[f64]) {
        let loss = |p: &EmbeddingParams| -> f64 {
            let (h, _) = p.forward(obs).unwrap();
            crate::linalg::dot(&h, dl_dh)
        };
        let (_, trace) = params.forward(obs).unwrap();
        let (grads, _) = params.backward(&trace, dl_dh).unwrap();
        let step = 1e-6;
        for li in 0..params.layers().len() {
            let rows = params.layers()[li].weight.rows();
            let cols = params.layers()[li].weight.cols();
            for r in 0..rows {
                for c in 0..cols {
                    let mut plus = params.clone();
                    let mut minus = params.clone();
                    let w0 = params.layers()[li].weight.get(r, c);
                    plus.layers_mut()[li].weight.set(r, c, w0 + step);
                    minus.layers_mut()[li].weight.set(r, c, w0 - step);
                    let fd = (loss(&plus) - loss(&minus)) / (2.0 * step);
                    let an = grads.layers[li].0.get(r, c);
                    let denom = fd.abs().max(1e-8);
                    assert!(
                        (an - fd).abs() / denom < 1e-4,
                        "layer {li} W[{r},{c}]: analytic {an} vs fd {fd}"
                    );
                }
            }
            for b in 0..rows {
                let mut plus = params.clone();
                let mut minus = params.clone();
                let b0 = params.layers()[li].bias[b];
                plus.layers_mut()[li].bias[b] = b0 + step;
                minus.layers_mut()[li].bias[b] = b0 - step;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * step);
                let an = grads.layers[li].1[b];
                let denom = fd.abs().max(1e-8);
                assert!(
                    (an - fd).abs() / denom < 1e-4,
                    "layer {li} b[{b}]: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        use rand::Rng;
        let s = spec(&[(4, 6, Activation::Relu), (6, 3, Activation::Identity)]);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..100 {
            let p = EmbeddingParams::init(&s, trial).unwrap();
            let obs: Vec<f64> = (0..4).map(|_| rng.random_range(-1.5..1.5)).collect();
            let g: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            fd_check(&p, &obs, &g);
        }
    }

    #[test]
    fn backward_obs_gradient_matches_finite_differences() {
        use rand::Rng;
        let s = spec(&[(4, 5, Activation::Relu), (5, 2, Activation::Identity)]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let p = EmbeddingParams::init(&s, 1000 + trial).unwrap();
            let obs: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (_, trace) = p.forward(&obs).unwrap();
            let (_, dobs) = p.backward(&trace, &g).unwrap();
            let step = 1e-6;
            for i in 0..obs.len() {
                let mut plus = obs.clone();
                let mut minus = obs.clone();
                plus[i] += step;
                minus[i] -= step;
                let lp = crate::linalg::dot(&p.forward(&plus).unwrap().0, &g);
                let lm = crate::linalg::dot(&p.forward(&minus).unwrap().0, &g);
                let fd = (lp - lm) / (2.0 * step);
                let denom = fd.abs().max(1e-8);
                assert!((dobs[i] - fd).abs() / denom < 1e-4);
            }
        }
    }

    #[test]
    fn rmsprop_zero_gradient_decays_accumulator_only() {
        let s = spec(&[(2, 2, Activation::Identity)]);
        let mut p = EmbeddingParams::init(&s, 1).unwrap();
        let before = p.clone();
        let mut opt = OptState::new(&p, 0.1, 0.9, 1e-8).unwrap();
        // Put something in nu first.
        let mut g = ParamGrads::zeros_like(&p);
        g.layers[0].0.set(0, 0, 2.0);
        opt.step(&mut p, &g).unwrap();
        let nu_before = opt.accumulator().layers[0].0.get(0, 0);
        let zero = ParamGrads::zeros_like(&p);
        let snapshot = p.clone();
        opt.step(&mut p, &zero).unwrap();
        assert_eq!(p, snapshot, "zero gradient must leave params unchanged");
        let nu_after = opt.accumulator().layers[0].0.get(0, 0);
        assert!((nu_after - 0.9 * nu_before).abs() < 1e-15);
        drop(before);
    }

    #[test]
    fn rmsprop_scalar_update_value() {
        // theta=0, g=2, nu0=0, rho=0.9, lr=0.1, eps=1e-8:
        // nu = 0.4, theta = -0.1 * 2 / (sqrt(0.4) + 1e-8)
        let p = EmbeddingParams::from_layers(vec![Layer {
            weight: Matrix::from_rows(1, 1, vec![0.0]).unwrap(),
            bias: vec![0.0],
            activation: Activation::Identity,
        }])
        .unwrap();
        let mut p = p;
        let mut opt = OptState::new(&p, 0.1, 0.9, 1e-8).unwrap();
        let mut g = ParamGrads::zeros_like(&p);
        g.layers[0].0.set(0, 0, 2.0);
        opt.step(&mut p, &g).unwrap();
        let expected = -0.1 * 2.0 / (0.4f64.sqrt() + 1e-8);
        assert_eq!(p.layers()[0].weight.get(0, 0), expected);
        assert!((p.layers()[0].weight.get(0, 0) - (-0.316_227_764_5)).abs() < 1e-8);
        assert_eq!(opt.accumulator().layers[0].0.get(0, 0), 0.4);
    }

    #[test]
    fn rmsprop_step_magnitude_approaches_lr_under_constant_gradient() {
        let mut p = EmbeddingParams::from_layers(vec![Layer {
            weight: Matrix::from_rows(1, 1, vec![0.0]).unwrap(),
            bias: vec![0.0],
            activation: Activation::Identity,
        }])
        .unwrap();
        let lr = 0.05;
        let mut opt = OptState::new(&p, lr, 0.9, 1e-8).unwrap();
        let mut g = ParamGrads::zeros_like(&p);
        g.layers[0].0.set(0, 0, 3.0);
        let mut prev = p.layers()[0].weight.get(0, 0);
        let mut last_step = 0.0;
        for _ in 0..500 {
            opt.step(&mut p, &g).unwrap();
            let cur = p.layers()[0].weight.get(0, 0);
            last_step = (cur - prev).abs();
            prev = cur;
        }
        // nu -> g^2, so |step| -> lr.
        assert!((last_step - lr).abs() < 1e-6, "step {last_step} vs lr {lr}");
    }

    #[test]
    fn rmsprop_rejects_non_finite_gradient() {
        let s = spec(&[(2, 2, Activation::Identity)]);
        let mut p = EmbeddingParams::init(&s, 1).unwrap();
        let snapshot = p.clone();
        let mut opt = OptState::new(&p, 0.1, 0.9, 1e-8).unwrap();
        let mut g = ParamGrads::zeros_like(&p);
        g.layers[0].0.set(0, 0, f64::NAN);
        assert!(matches!(
            opt.step(&mut p, &g),
            Err(Error::NonFiniteGradient)
        ));
        assert_eq!(p, snapshot);
    }

    #[test]
    fn random_projection_identity_case() {
        // Square case with the matrix forced to identity.
        let mut proj = RandomProjection::new(3, 3, 0).unwrap();
        proj.matrix = Matrix::identity(3);
        let h = proj.embed(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(h, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn random_projection_zero_maps_to_zero() {
        let proj = RandomProjection::new(4, 9, 3).unwrap();
        let h = proj.embed(&[0.0; 9]).unwrap();
        assert!(h.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn random_projection_matches_dense_matvec_oracle() {
        use rand::Rng;
        let proj = RandomProjection::new(5, 8, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let obs: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
        let h = proj.embed(&obs).unwrap();
        for r in 0..5 {
            let mut acc = 0.0;
            for c in 0..8 {
                acc += proj.matrix().get(r, c) * obs[c];
            }
            assert!((h[r] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn random_projection_deterministic_and_rejects_mismatch() {
        let a = RandomProjection::new(4, 6, 5).unwrap();
        let b = RandomProjection::new(4, 6, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.embed(&[0.0; 5]).is_err());
    }
}
