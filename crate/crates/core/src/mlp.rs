//! Fully connected ReLU network with hand-written forward/backward passes and
//! Adam.
//!
//! Weights are stored row-major as `out × in`. Batches are row-major
//! `batch × features`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
}

impl Arch {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input];
        s.extend_from_slice(&self.hidden);
        s.push(self.output);
        s
    }

    pub fn n_params(&self) -> usize {
        self.sizes().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Weights and biases of every layer. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub arch: Arch,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpParams {
    pub fn zeros(arch: &Arch) -> Self {
        let sizes = arch.sizes();
        let weights = sizes.windows(2).map(|w| vec![0.0; w[0] * w[1]]).collect();
        let biases = sizes.windows(2).map(|w| vec![0.0; w[1]]).collect();
        MlpParams {
            arch: arch.clone(),
            weights,
            biases,
        }
    }

    pub fn zeros_like(&self) -> Self {
        MlpParams::zeros(&self.arch)
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn layer_dims(&self, l: usize) -> (usize, usize) {
        let sizes = self.arch.sizes();
        (sizes[l], sizes[l + 1])
    }

    /// Iterates over every parameter tensor (weights then bias, per layer).
    pub fn tensors(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.weights.iter_mut().zip(self.biases.iter_mut()).flat_map(|(w, b)| [w, b])
    }

    /// `self += other`, element by element in storage order.
    pub fn add_assign(&mut self, other: &MlpParams) {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.tensors_mut().for_each(|t| t.iter_mut().for_each(|x| *x *= c));
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// Per-layer values retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    pub batch: usize,
    pub input: Vec<f64>,
    /// Pre-activations `z_l`, one entry per layer.
    pub pre: Vec<Vec<f64>>,
    /// Activations `a_l` (ReLU for hidden layers, identity for the last).
    pub act: Vec<Vec<f64>>,
}

impl ForwardTape {
    pub fn depth(&self) -> usize {
        self.pre.len()
    }
}

/// Glorot-uniform weights (`bound = sqrt(6 / (fan_in + fan_out))`), zero
/// biases.
pub fn init_params(arch: &Arch, seed: u64) -> Result<MlpParams> {
    if arch.sizes().contains(&0) {
        return Err(Error::InvalidArgument(format!("zero-size layer in architecture {:?}", arch.sizes())));
    }
    let mut params = MlpParams::zeros(arch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in 0..params.n_layers() {
        let (fan_in, fan_out) = params.layer_dims(l);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        params.weights[l].iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
    }
    Ok(params)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

/// Runs the network on `batch` rows of `input`.
pub fn forward(params: &MlpParams, input: &[f64], batch: usize) -> Result<(Vec<f64>, ForwardTape)> {
    let in_dim = params.arch.input;
    if input.len() != batch * in_dim {
        return Err(Error::Shape {
            expected: format!("{batch} x {in_dim} inputs"),
            actual: format!("{} values", input.len()),
        });
    }
    if input.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("network input".into()));
    }
    let n_layers = params.n_layers();
    let mut pre = Vec::with_capacity(n_layers);
    let mut act: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let (n_in, n_out) = params.layer_dims(l);
        let x = if l == 0 { input } else { &act[l - 1] };
        let w = &params.weights[l];
        let bias = &params.biases[l];
        let mut z = vec![0.0; batch * n_out];
        for b in 0..batch {
            let xb = &x[b * n_in..(b + 1) * n_in];
            let zb = &mut z[b * n_out..(b + 1) * n_out];
            for o in 0..n_out {
                zb[o] = bias[o] + dot(&w[o * n_in..(o + 1) * n_in], xb);
            }
        }
        let a = if l + 1 < n_layers {
            z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
        } else {
            z.clone()
        };
        pre.push(z);
        act.push(a);
    }
    let out = act.last().cloned().unwrap_or_default();
    Ok((
        out,
        ForwardTape {
            batch,
            input: input.to_vec(),
            pre,
            act,
        },
    ))
}

/// Reverse-mode gradients of `Σ output ⊙ output_grad` with respect to every
/// weight and bias. ReLU'(0) is taken as 0.
pub fn backward(params: &MlpParams, tape: &ForwardTape, output_grad: &[f64]) -> Result<MlpParams> {
    let n_layers = params.n_layers();
    if tape.depth() != n_layers {
        return Err(Error::Shape {
            expected: format!("tape with {n_layers} layers"),
            actual: format!("tape with {} layers", tape.depth()),
        });
    }
    let batch = tape.batch;
    for l in 0..n_layers {
        let (_, n_out) = params.layer_dims(l);
        if tape.pre[l].len() != batch * n_out {
            return Err(Error::Shape {
                expected: format!("layer {l} pre-activations of length {}", batch * n_out),
                actual: format!("{}", tape.pre[l].len()),
            });
        }
    }
    if output_grad.len() != batch * params.arch.output {
        return Err(Error::Shape {
            expected: format!("{batch} x {} output gradient", params.arch.output),
            actual: format!("{} values", output_grad.len()),
        });
    }
    let mut grads = params.zeros_like();
    let mut delta = output_grad.to_vec();
    for l in (0..n_layers).rev() {
        let (n_in, n_out) = params.layer_dims(l);
        if l + 1 < n_layers {
            delta
                .iter_mut()
                .zip(&tape.pre[l])
                .for_each(|(d, &z)| if z <= 0.0 { *d = 0.0 });
        }
        let x = if l == 0 { &tape.input } else { &tape.act[l - 1] };
        let w = &params.weights[l];
        let gw = &mut grads.weights[l];
        let gb = &mut grads.biases[l];
        for b in 0..batch {
            let xb = &x[b * n_in..(b + 1) * n_in];
            let db = &delta[b * n_out..(b + 1) * n_out];
            for o in 0..n_out {
                if db[o] != 0.0 {
                    axpy(db[o], xb, &mut gw[o * n_in..(o + 1) * n_in]);
                }
                gb[o] += db[o];
            }
        }
        if l > 0 {
            let mut prev = vec![0.0; batch * n_in];
            for b in 0..batch {
                let db = &delta[b * n_out..(b + 1) * n_out];
                let pb = &mut prev[b * n_in..(b + 1) * n_in];
                for o in 0..n_out {
                    if db[o] != 0.0 {
                        axpy(db[o], &w[o * n_in..(o + 1) * n_in], pb);
                    }
                }
            }
            delta = prev;
        }
    }
    Ok(grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: MlpParams,
    pub v: MlpParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &MlpParams, config: AdamConfig) -> Self {
        AdamState {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified if any gradient is
/// non-finite.
pub fn adam_step(params: &mut MlpParams, grads: &MlpParams, state: &mut AdamState) -> Result<()> {
    if params.arch != grads.arch || params.arch != state.m.arch {
        return Err(Error::Shape {
            expected: format!("{:?}", params.arch.sizes()),
            actual: format!("gradients {:?}, moments {:?}", grads.arch.sizes(), state.m.arch.sizes()),
        });
    }
    for l in 0..grads.n_layers() {
        if !grads.weights[l].iter().chain(&grads.biases[l]).all(|g| g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of layer {l}")));
        }
    }
    state.t += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    let tensors = params
        .tensors_mut()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut().zip(state.v.tensors_mut()));
    for ((p, g), (m, v)) in tensors {
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Little-endian f32 payload: each layer's weights then its biases.
pub fn params_to_bytes(params: &MlpParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(params.arch.n_params() * 4);
    for t in params.tensors() {
        t.iter().for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes()));
    }
    out
}

pub fn params_from_bytes(arch: &Arch, bytes: &[u8]) -> Result<MlpParams> {
    let expected = arch.n_params() * 4;
    if bytes.len() != expected {
        return Err(Error::Shape {
            expected: format!("{expected} payload bytes"),
            actual: format!("{} bytes", bytes.len()),
        });
    }
    let mut params = MlpParams::zeros(arch);
    let mut values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    for t in params.tensors_mut() {
        t.iter_mut().for_each(|x| *x = values.next().expect("length checked"));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(input: usize, hidden: &[usize], output: usize) -> Arch {
        Arch {
            input,
            hidden: hidden.to_vec(),
            output,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = arch(5, &[7, 3], 2);
        let p = init_params(&a, 3).unwrap();
        assert_eq!(p, init_params(&a, 3).unwrap());
        assert_ne!(p, init_params(&a, 4).unwrap());
        assert!(p.biases.iter().flatten().all(|&b| b == 0.0));
    }

    #[test]
    fn init_variance_matches_uniform() {
        let p = init_params(&arch(300, &[], 300), 1).unwrap();
        let w = &p.weights[0];
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let bound2 = 6.0 / 600.0;
        assert!((var / (bound2 / 3.0) - 1.0).abs() < 0.1, "{var}");
    }

    #[test]
    fn zero_size_layer_rejected() {
        assert!(init_params(&arch(3, &[0], 1), 0).is_err());
    }

    #[test]
    fn zero_params_give_zero_output() {
        let p = MlpParams::zeros(&arch(4, &[6], 3));
        let (out, tape) = forward(&p, &[1.0, -2.0, 3.0, 0.5, 0.1, 0.2, 0.3, 0.4], 2).unwrap();
        assert_eq!(out, vec![0.0; 6]);
        assert_eq!(tape.depth(), 2);
    }

    #[test]
    fn linear_layer_is_affine() {
        let mut p = MlpParams::zeros(&arch(2, &[], 2));
        p.weights[0] = vec![1.0, 2.0, 3.0, 4.0];
        p.biases[0] = vec![0.5, -0.5];
        let (out, _) = forward(&p, &[1.0, -1.0], 1).unwrap();
        assert_eq!(out, vec![1.0 - 2.0 + 0.5, 3.0 - 4.0 - 0.5]);
    }

    #[test]
    fn wrong_input_width_names_expected_dim() {
        let p = MlpParams::zeros(&arch(4, &[], 1));
        let err = forward(&p, &[1.0; 5], 1).unwrap_err().to_string();
        assert!(err.contains("1 x 4"), "{err}");
    }

    #[test]
    fn zero_output_grad_gives_zero_gradients() {
        let p = init_params(&arch(3, &[4], 2), 1).unwrap();
        let (_, tape) = forward(&p, &[0.3, -0.2, 0.9], 1).unwrap();
        let g = backward(&p, &tape, &[0.0, 0.0]).unwrap();
        assert!(g.tensors().all(|t| t.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn scalar_chain_rule() {
        // y = w2 · relu(w1 x + b1) + b2
        let mut p = MlpParams::zeros(&arch(1, &[1], 1));
        p.weights = vec![vec![2.0], vec![3.0]];
        p.biases = vec![vec![0.5], vec![-1.0]];
        let x = 1.5;
        let (out, tape) = forward(&p, &[x], 1).unwrap();
        assert_eq!(out[0], 3.0 * (2.0 * 1.5 + 0.5) - 1.0);
        let g = backward(&p, &tape, &[1.0]).unwrap();
        assert_eq!(g.weights[1][0], 3.5);
        assert_eq!(g.biases[1][0], 1.0);
        assert_eq!(g.weights[0][0], 3.0 * x);
        assert_eq!(g.biases[0][0], 3.0);
    }

    #[test]
    fn relu_derivative_at_zero_is_zero() {
        let mut p = MlpParams::zeros(&arch(1, &[1], 1));
        p.weights = vec![vec![1.0], vec![1.0]];
        let (_, tape) = forward(&p, &[0.0], 1).unwrap();
        let g = backward(&p, &tape, &[1.0]).unwrap();
        assert_eq!(g.biases[0][0], 0.0);
    }

    #[test]
    fn tape_mismatch_rejected() {
        let p = init_params(&arch(2, &[3], 1), 0).unwrap();
        let q = init_params(&arch(2, &[3, 3], 1), 0).unwrap();
        let (_, tape) = forward(&p, &[1.0, 2.0], 1).unwrap();
        assert!(backward(&q, &tape, &[1.0]).is_err());
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = init_params(&arch(2, &[2], 1), 0).unwrap();
        let before = p.clone();
        let mut s = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &before.zeros_like(), &mut s).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn adam_first_step_scalar() {
        let mut p = MlpParams::zeros(&arch(1, &[], 1));
        let mut g = p.zeros_like();
        g.weights[0][0] = 1.0;
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut s = AdamState::new(&p, cfg);
        adam_step(&mut p, &g, &mut s).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = −0.1 / (1 + 1e-8)
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.weights[0][0] - expected).abs() < 1e-17);
        assert!((p.weights[0][0] + 0.099_999_999).abs() < 1e-9);
    }

    #[test]
    fn adam_identical_tensors_update_identically() {
        let mut p = MlpParams::zeros(&arch(2, &[], 2));
        p.weights[0] = vec![0.3, 0.3, 0.3, 0.3];
        let mut g = p.zeros_like();
        g.weights[0] = vec![0.7, 0.7, 0.7, 0.7];
        let mut s = AdamState::new(&p, AdamConfig::default());
        for _ in 0..3 {
            adam_step(&mut p, &g, &mut s).unwrap();
        }
        assert!(p.weights[0].iter().all(|&w| w == p.weights[0][0]));
    }

    #[test]
    fn adam_rejects_nan_gradient_by_layer() {
        let mut p = init_params(&arch(2, &[2], 1), 0).unwrap();
        let mut g = p.zeros_like();
        g.biases[1][0] = f64::NAN;
        let mut s = AdamState::new(&p, AdamConfig::default());
        let err = adam_step(&mut p, &g, &mut s).unwrap_err().to_string();
        assert!(err.contains("layer 1"), "{err}");
        assert_eq!(s.t, 0);
    }

    #[test]
    fn payload_round_trip_is_bit_exact() {
        let a = arch(3, &[5], 2);
        let p = init_params(&a, 9).unwrap();
        let bytes = params_to_bytes(&p);
        let q = params_from_bytes(&a, &bytes).unwrap();
        assert_eq!(params_to_bytes(&q), bytes);
        assert!(params_from_bytes(&a, &bytes[1..]).is_err());
    }
}
