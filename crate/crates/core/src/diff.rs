//! Multilayer perceptrons with reverse-mode gradients, and Adam.
//!
//! Parameters are one flat vector. Each layer stores its weight matrix
//! (`in x out`, row-major) followed by its bias. Batched passes run through
//! `matrixmultiply`'s GEMM, which is single-threaded and deterministic.

use rand::Rng;

use crate::error::{Error, Result};

/// Hidden-layer nonlinearity. The output layer is always linear.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Tanh,
    Identity,
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu(0.01)
    }
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu(slope) => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu(slope) => {
                if z > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Number of parameters of an MLP with the given layer widths.
pub fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

/// `c = a * b + beta * c` for row-major `a: m x k`, `b: k x n`, `c: m x n`.
/// `trans_a` / `trans_b` read the stored matrix transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths cover every index addressed by the strides above;
    // callers pass buffers sized m*k, k*n and m*n.
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// A fully connected network.
#[derive(Clone, Debug, PartialEq)]
pub struct Approximator {
    widths: Vec<usize>,
    params: Vec<f64>,
    activation: Activation,
}

/// Activations recorded by a batched forward pass, consumed by the backward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    batch: usize,
    /// `acts[0]` is the input; `acts[l]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
}

impl Tape {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Row-major `batch x out` outputs.
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("tape has at least the input")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let out = self.output();
        let w = out.len() / self.batch.max(1);
        &out[i * w..(i + 1) * w]
    }
}

impl Approximator {
    /// A network with all parameters zero.
    pub fn new(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Contract(
                "an approximator needs at least input and output widths".into(),
            ));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::Contract("layer widths must be positive".into()));
        }
        let params = vec![0.0; param_count(&widths)];
        Ok(Self {
            widths,
            params,
            activation,
        })
    }

    /// An MLP with `depth` hidden layers of width `hidden`.
    pub fn mlp(
        input: usize,
        hidden: usize,
        depth: usize,
        output: usize,
        activation: Activation,
    ) -> Result<Self> {
        let mut widths = vec![input];
        widths.extend(std::iter::repeat(hidden).take(depth));
        widths.push(output);
        Self::new(widths, activation)
    }

    pub fn from_params(widths: Vec<usize>, activation: Activation, params: Vec<f64>) -> Result<Self> {
        let mut approx = Self::new(widths, activation)?;
        if params.len() != approx.params.len() {
            return Err(Error::Dimension {
                what: "approximator parameters",
                expected: approx.params.len(),
                got: params.len(),
            });
        }
        approx.params = params;
        Ok(approx)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Offsets of (weights, bias) for layer `l`.
    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let start = param_count(&self.widths[..=l]);
        (start, start + self.widths[l] * self.widths[l + 1])
    }

    /// Uniform in `+-sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn init_glorot<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for l in 0..self.widths.len() - 1 {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let (w, b) = self.layer_offsets(l);
            for p in &mut self.params[w..b] {
                *p = rng.gen_range(-limit..limit);
            }
            for p in &mut self.params[b..b + fan_out] {
                *p = 0.0;
            }
        }
    }

    /// Zeroes the last layer so the network outputs exactly zero.
    pub fn zero_output_layer(&mut self) {
        let l = self.widths.len() - 2;
        let (w, _) = self.layer_offsets(l);
        self.params[w..].fill(0.0);
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_batch(input, 1)?.output().to_vec())
    }

    /// Runs `batch` row-major inputs through the network.
    pub fn forward_batch(&self, inputs: &[f64], batch: usize) -> Result<Tape> {
        let n_in = self.widths[0];
        if inputs.len() != n_in * batch {
            return Err(Error::Dimension {
                what: "approximator input",
                expected: n_in * batch,
                got: inputs.len(),
            });
        }
        let layers = self.widths.len() - 1;
        let mut acts = Vec::with_capacity(layers + 1);
        let mut pre = Vec::with_capacity(layers.saturating_sub(1));
        acts.push(inputs.to_vec());
        for l in 0..layers {
            let (fi, fo) = (self.widths[l], self.widths[l + 1]);
            let (w, b) = self.layer_offsets(l);
            let bias = &self.params[b..b + fo];
            let mut z = Vec::with_capacity(batch * fo);
            for _ in 0..batch {
                z.extend_from_slice(bias);
            }
            gemm(
                batch,
                fi,
                fo,
                &acts[l],
                false,
                &self.params[w..b],
                false,
                1.0,
                &mut z,
            );
            if l + 1 < layers {
                let a: Vec<f64> = z.iter().map(|&v| self.activation.apply(v)).collect();
                pre.push(z);
                acts.push(a);
            } else {
                acts.push(z);
            }
        }
        Ok(Tape { batch, acts, pre })
    }

    /// Adds `d(sum upstream . output) / d params` into `acc` and returns the
    /// gradient with respect to the inputs (row-major `batch x in`).
    pub fn backward_batch(
        &self,
        tape: &Tape,
        upstream: &[f64],
        acc: &mut GradAccumulator,
    ) -> Result<Vec<f64>> {
        let batch = tape.batch;
        let n_out = self.output_width();
        if upstream.len() != batch * n_out {
            return Err(Error::Dimension {
                what: "approximator upstream gradient",
                expected: batch * n_out,
                got: upstream.len(),
            });
        }
        if acc.grads.len() != self.params.len() {
            return Err(Error::Dimension {
                what: "gradient accumulator",
                expected: self.params.len(),
                got: acc.grads.len(),
            });
        }
        let layers = self.widths.len() - 1;
        let mut delta = upstream.to_vec();
        for l in (0..layers).rev() {
            let (fi, fo) = (self.widths[l], self.widths[l + 1]);
            let (w, b) = self.layer_offsets(l);
            // dW += A_l^T * delta
            gemm(
                fi,
                batch,
                fo,
                &tape.acts[l],
                true,
                &delta,
                false,
                1.0,
                &mut acc.grads[w..b],
            );
            let db = &mut acc.grads[b..b + fo];
            for row in delta.chunks_exact(fo) {
                for (g, d) in db.iter_mut().zip(row) {
                    *g += d;
                }
            }
            // d A_l = delta * W^T
            let mut prev = vec![0.0; batch * fi];
            gemm(
                batch,
                fo,
                fi,
                &delta,
                false,
                &self.params[w..b],
                true,
                0.0,
                &mut prev,
            );
            if l > 0 {
                for (p, &z) in prev.iter_mut().zip(&tape.pre[l - 1]) {
                    *p *= self.activation.derivative(z);
                }
            }
            delta = prev;
        }
        Ok(delta)
    }

    pub fn backward(
        &self,
        input: &[f64],
        upstream: &[f64],
        acc: &mut GradAccumulator,
    ) -> Result<Vec<f64>> {
        let tape = self.forward_batch(input, 1)?;
        self.backward_batch(&tape, upstream, acc)
    }
}

/// Gradient buffer aligned with an approximator's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GradAccumulator {
    pub grads: Vec<f64>,
}

impl GradAccumulator {
    pub fn new(len: usize) -> Self {
        Self {
            grads: vec![0.0; len],
        }
    }

    pub fn for_approx(approx: &Approximator) -> Self {
        Self::new(approx.param_count())
    }

    pub fn zero(&mut self) {
        self.grads.fill(0.0);
    }

    pub fn merge(&mut self, other: &GradAccumulator) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            *g *= factor;
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.grads.iter().map(|g| g * g).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|g| g.is_finite())
    }
}

/// Adam moments and hyperparameters for one parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// One bias-corrected Adam descent step. Non-finite gradients leave both
    /// the parameters and the moments untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::Dimension {
                what: "adam step",
                expected: self.first_moment.len(),
                got: grads.len(),
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient entry {i} is {}",
                grads[i]
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            let m = self.beta1 * self.first_moment[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * self.second_moment[i] + (1.0 - self.beta2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            params[i] -= self.learning_rate * (m / c1) / ((v / c2).sqrt() + self.epsilon);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_net(widths: Vec<usize>, act: Activation, seed: u64) -> Approximator {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Approximator::new(widths, act).unwrap();
        for p in net.params_mut() {
            *p = rng.gen_range(-1.0..1.0);
        }
        net
    }

    #[test]
    fn zero_params_give_zero_output() {
        let net = Approximator::mlp(5, 7, 2, 3, Activation::default()).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0, 0.5, 9.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identity_layer() {
        let mut net = Approximator::new(vec![3, 3], Activation::Identity).unwrap();
        for i in 0..3 {
            net.params_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(net.forward(&[0.3, -1.0, 2.5]).unwrap(), vec![0.3, -1.0, 2.5]);
    }

    #[test]
    fn matches_hand_written_forward() {
        let net = random_net(vec![2, 3, 1], Activation::Tanh, 3);
        let p = net.params();
        let x = [0.7, -1.3];
        // weights w[i][j] at i*3+j, then bias(3), then w2 (3x1), then bias(1)
        let mut out = p[12];
        for j in 0..3 {
            let z = x[0] * p[j] + x[1] * p[3 + j] + p[6 + j];
            out += z.tanh() * p[9 + j];
        }
        let got = net.forward(&x).unwrap()[0];
        assert!((got - out).abs() < 1e-12, "{got} vs {out}");
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let net = Approximator::new(vec![2, 1], Activation::Identity).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::Dimension { .. })));
        let mut acc = GradAccumulator::for_approx(&net);
        assert!(net.backward(&[1.0, 2.0], &[1.0, 1.0], &mut acc).is_err());
    }

    #[test]
    fn zero_upstream_leaves_gradients() {
        let net = random_net(vec![3, 4, 2], Activation::default(), 1);
        let mut acc = GradAccumulator::for_approx(&net);
        net.backward(&[1.0, 2.0, 3.0], &[0.0, 0.0], &mut acc).unwrap();
        assert!(acc.grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn linear_scalar_gradient() {
        let net = Approximator::from_params(vec![1, 1], Activation::Identity, vec![2.0, 0.0]).unwrap();
        let mut acc = GradAccumulator::for_approx(&net);
        let dx = net.backward(&[3.0], &[0.5], &mut acc).unwrap();
        assert_eq!(acc.grads, vec![1.5, 0.5]);
        assert_eq!(dx, vec![1.0]);
    }

    #[test]
    fn batched_matches_single_rows() {
        let net = random_net(vec![4, 6, 6, 3], Activation::default(), 9);
        let inputs: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let tape = net.forward_batch(&inputs, 3).unwrap();
        let up: Vec<f64> = (0..9).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut acc = GradAccumulator::for_approx(&net);
        net.backward_batch(&tape, &up, &mut acc).unwrap();
        let mut single = GradAccumulator::for_approx(&net);
        for r in 0..3 {
            let out = net.forward(&inputs[r * 4..r * 4 + 4]).unwrap();
            assert_eq!(out.as_slice(), tape.row(r));
            net.backward(&inputs[r * 4..r * 4 + 4], &up[r * 3..r * 3 + 3], &mut single)
                .unwrap();
        }
        for (a, b) in acc.grads.iter().zip(&single.grads) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_output_layer_gives_zero_output() {
        let mut net = Approximator::mlp(3, 5, 2, 4, Activation::default()).unwrap();
        net.init_glorot(&mut ChaCha8Rng::seed_from_u64(0));
        assert!(net.forward(&[1.0, 0.0, 1.0]).unwrap().iter().any(|&v| v != 0.0));
        net.zero_output_layer();
        assert_eq!(net.forward(&[1.0, 0.0, 1.0]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut adam = AdamState::new(2, 0.1);
        adam.first_moment = vec![1.0, -1.0];
        let mut p = vec![1.0, 2.0];
        // a zero gradient still moves p along the decayed first moment; with
        // fresh moments it does not
        let mut fresh = AdamState::new(2, 0.1);
        fresh.step(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.0, 2.0]);
        adam.step(&mut p.clone(), &[0.0, 0.0]).unwrap();
        assert_eq!(adam.first_moment, vec![0.9, -0.9]);
        assert_eq!(fresh.step_count, 1);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut adam = AdamState::new(1, 0.01);
        let mut p = vec![0.0];
        for _ in 0..10 {
            adam.step(&mut p, &[2.0]).unwrap();
        }
        assert!(p[0] < 0.0);
    }

    #[test]
    fn adam_solves_quadratic() {
        let mut adam = AdamState::new(1, 0.1);
        let mut p = vec![0.0];
        for _ in 0..100 {
            let g = 2.0 * (p[0] - 3.0);
            adam.step(&mut p, &[g]).unwrap();
        }
        assert!((p[0] - 3.0).abs() < 0.5, "{}", p[0]);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut adam = AdamState::new(2, 0.1);
        let mut p = vec![1.0, 1.0];
        assert!(matches!(
            adam.step(&mut p, &[0.5, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(adam.step_count, 0);
        assert_eq!(adam.first_moment, vec![0.0, 0.0]);
    }

    #[test]
    fn glorot_is_deterministic() {
        let mut a = Approximator::mlp(4, 8, 2, 2, Activation::default()).unwrap();
        let mut b = a.clone();
        a.init_glorot(&mut ChaCha8Rng::seed_from_u64(5));
        b.init_glorot(&mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        let limit = (6.0f64 / 12.0).sqrt();
        assert!(a.params()[..32].iter().all(|p| p.abs() <= limit));
    }
}
