//! A single restricted Boltzmann machine layer with binary units.
//!
//! Energy is `E(x, h) = -hᵀWx - cᵀh - bᵀx` with `W` stored hidden × visible.
//! Exact quantities (log partition function, log-likelihood, likelihood
//! gradient) enumerate every visible configuration and marginalize the hidden
//! layer analytically; they are guarded so that `visible + hidden` bits stay
//! within [`ENUMERATION_LIMIT_BITS`].

use crate::error::{check_len, Error, Result};
use crate::numerics::{dot, log_sum_exp, logistic, softplus, Matrix, RngStream};

/// Largest `visible + hidden` bit count accepted by the exact routines.
pub const ENUMERATION_LIMIT_BITS: usize = 24;

#[derive(Clone, Debug, PartialEq)]
pub struct RbmParams {
    /// Hidden × visible.
    pub weights: Matrix,
    pub visible_bias: Vec<f64>,
    pub hidden_bias: Vec<f64>,
}

/// Gradient of the negative log-likelihood, shaped like [`RbmParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct RbmGrad {
    pub weights: Matrix,
    pub visible_bias: Vec<f64>,
    pub hidden_bias: Vec<f64>,
}

impl RbmParams {
    pub fn new(weights: Matrix, visible_bias: Vec<f64>, hidden_bias: Vec<f64>) -> Result<Self> {
        check_len("visible bias", weights.cols(), visible_bias.len())?;
        check_len("hidden bias", weights.rows(), hidden_bias.len())?;
        if visible_bias.iter().chain(&hidden_bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("rbm bias"));
        }
        Ok(Self {
            weights,
            visible_bias,
            hidden_bias,
        })
    }

    pub fn zeros(n_visible: usize, n_hidden: usize) -> Self {
        Self {
            weights: Matrix::zeros(n_hidden, n_visible),
            visible_bias: vec![0.0; n_visible],
            hidden_bias: vec![0.0; n_hidden],
        }
    }

    /// `W ~ U(-a, a)` with `a = 4·sqrt(6 / (I + J))`; biases start at zero.
    pub fn init(n_visible: usize, n_hidden: usize, rng: &mut RngStream) -> Self {
        let a = 4.0 * (6.0 / (n_visible + n_hidden) as f64).sqrt();
        let weights = Matrix::from_fn(n_hidden, n_visible, |_, _| rng.uniform_range(-a, a));
        Self {
            weights,
            visible_bias: vec![0.0; n_visible],
            hidden_bias: vec![0.0; n_hidden],
        }
    }

    #[inline]
    pub fn n_visible(&self) -> usize {
        self.weights.cols()
    }

    #[inline]
    pub fn n_hidden(&self) -> usize {
        self.weights.rows()
    }

    pub fn num_params(&self) -> usize {
        self.n_hidden() * self.n_visible() + self.n_visible() + self.n_hidden()
    }

    /// `-hᵀWx - cᵀh - bᵀx`.
    pub fn energy(&self, x: &[f64], h: &[f64]) -> Result<f64> {
        check_len("energy visible state", self.n_visible(), x.len())?;
        check_len("energy hidden state", self.n_hidden(), h.len())?;
        let wx = self.weights.matvec(x)?;
        Ok(-dot(h, &wx) - dot(&self.hidden_bias, h) - dot(&self.visible_bias, x))
    }

    /// Hidden pre-activations `c + Wx`.
    pub fn hidden_input(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("visible vector", self.n_visible(), x.len())?;
        let mut a = self.weights.matvec(x)?;
        for (ai, ci) in a.iter_mut().zip(&self.hidden_bias) {
            *ai += ci;
        }
        Ok(a)
    }

    /// Visible pre-activations `b + Wᵀh`.
    pub fn visible_input(&self, h: &[f64]) -> Result<Vec<f64>> {
        check_len("hidden vector", self.n_hidden(), h.len())?;
        let mut a = self.weights.t_matvec(h)?;
        for (ai, bi) in a.iter_mut().zip(&self.visible_bias) {
            *ai += bi;
        }
        Ok(a)
    }

    /// `p(h_i = 1 | x) = σ(c_i + W_i x)`; `x` may hold Bernoulli means.
    pub fn prob_h_given_x(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.hidden_input(x)?.into_iter().map(logistic).collect())
    }

    /// `p(x_j = 1 | h) = σ(b_j + (Wᵀh)_j)`.
    pub fn prob_x_given_h(&self, h: &[f64]) -> Result<Vec<f64>> {
        Ok(self.visible_input(h)?.into_iter().map(logistic).collect())
    }

    /// `F(x) = -bᵀx - Σ_i softplus(c_i + W_i x)`, so that
    /// `Σ_h exp(-E(x, h)) = exp(-F(x))`.
    pub fn free_energy(&self, x: &[f64]) -> Result<f64> {
        let a = self.hidden_input(x)?;
        Ok(-dot(&self.visible_bias, x) - a.into_iter().map(softplus).sum::<f64>())
    }

    /// Mean-field reconstruction cross-entropy of `x` through one up-down pass.
    pub fn reconstruction_cross_entropy(&self, x: &[f64]) -> Result<f64> {
        let h = self.prob_h_given_x(x)?;
        let z = self.visible_input(&h)?;
        Ok(z.iter().zip(x).map(|(&zj, &xj)| softplus(zj) - xj * zj).sum())
    }

    fn check_enumerable(&self) -> Result<()> {
        let bits = self.n_visible() + self.n_hidden();
        if bits > ENUMERATION_LIMIT_BITS {
            return Err(Error::EnumerationLimit {
                bits,
                limit: ENUMERATION_LIMIT_BITS,
            });
        }
        Ok(())
    }

    /// `log Z` over all binary `(x, h)`.
    pub fn exact_log_partition(&self) -> Result<f64> {
        self.check_enumerable()?;
        let neg_free: Vec<f64> = BinaryStates::new(self.n_visible())
            .map(|x| self.free_energy(&x).map(|f| -f))
            .collect::<Result<_>>()?;
        log_sum_exp(&neg_free)
    }

    /// `log p(x) = -F(x) - log Z`.
    pub fn exact_log_px(&self, x: &[f64]) -> Result<f64> {
        let log_z = self.exact_log_partition()?;
        Ok(-self.free_energy(x)? - log_z)
    }

    /// Model expectations `E[p(h|x̃) x̃ᵀ]`, `E[x̃]`, `E[p(h|x̃)]` under the RBM's
    /// own marginal over binary `x̃`.
    fn exact_model_statistics(&self) -> Result<RbmGrad> {
        let log_z = self.exact_log_partition()?;
        let mut stats = RbmGrad::zeros_like(self);
        for x in BinaryStates::new(self.n_visible()) {
            let px = (-self.free_energy(&x)? - log_z).exp();
            let ph = self.prob_h_given_x(&x)?;
            stats.accumulate_phase(px, &x, &ph);
        }
        Ok(stats)
    }

    /// Exact gradient of `-log p(x)`: model expectation minus data term.
    pub fn exact_nll_grad(&self, x: &[f64]) -> Result<RbmGrad> {
        self.exact_mean_nll_grad(&[x])
    }

    /// Exact gradient of the batch-mean `-log p(x)`.
    pub fn exact_mean_nll_grad<X: AsRef<[f64]>>(&self, batch: &[X]) -> Result<RbmGrad> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let mut grad = self.exact_model_statistics()?;
        let w = 1.0 / batch.len() as f64;
        for x in batch {
            let x = x.as_ref();
            let ph = self.prob_h_given_x(x)?;
            grad.accumulate_phase(-w, x, &ph);
        }
        Ok(grad)
    }

    /// Contrastive-divergence estimate of the batch-mean gradient of
    /// `-log p(x)`.
    ///
    /// One chain per example, started from that example: the chain draws
    /// `h ~ p(h|x)`, then runs `k` full Gibbs sweeps over binary states. The
    /// positive phase uses `p(h|x)` at the data and the negative phase uses
    /// `p(h|x̃)` at the final visible sample `x̃`.
    pub fn cd_k_grad<X: AsRef<[f64]>>(
        &self,
        batch: &[X],
        k: usize,
        rng: &mut RngStream,
    ) -> Result<RbmGrad> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        if k == 0 {
            return Err(Error::InvalidArgument("CD needs k >= 1".into()));
        }
        let n_vis = self.n_visible();
        let n_hid = self.n_hidden();
        let w = 1.0 / batch.len() as f64;
        let mut grad = RbmGrad::zeros_like(self);
        let mut h = vec![0.0; n_hid];
        let mut v = vec![0.0; n_vis];
        for x in batch {
            let x = x.as_ref();
            check_len("visible vector", n_vis, x.len())?;
            let ph_data = self.prob_h_given_x(x)?;
            grad.accumulate_phase(-w, x, &ph_data);

            sample_into(&ph_data, &mut h, rng);
            let mut ph_model = ph_data;
            for step in 0..k {
                let pv = self.prob_x_given_h(&h)?;
                sample_into(&pv, &mut v, rng);
                ph_model = self.prob_h_given_x(&v)?;
                if step + 1 < k {
                    sample_into(&ph_model, &mut h, rng);
                }
            }
            grad.accumulate_phase(w, &v, &ph_model);
        }
        Ok(grad)
    }

    /// Parameters in the order `W` (row-major), `b`, `c`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend_from_slice(self.weights.as_slice());
        out.extend_from_slice(&self.visible_bias);
        out.extend_from_slice(&self.hidden_bias);
        out
    }

    pub fn from_flat(n_visible: usize, n_hidden: usize, flat: &[f64]) -> Result<Self> {
        let nw = n_visible * n_hidden;
        check_len("flattened rbm", nw + n_visible + n_hidden, flat.len())?;
        Self::new(
            Matrix::new(n_hidden, n_visible, flat[..nw].to_vec())?,
            flat[nw..nw + n_visible].to_vec(),
            flat[nw + n_visible..].to_vec(),
        )
    }

    /// Gradient step `θ -= lr · g`.
    pub fn descend(&mut self, grad: &RbmGrad, lr: f64) {
        axpy(self.weights.as_mut_slice(), -lr, grad.weights.as_slice());
        axpy(&mut self.visible_bias, -lr, &grad.visible_bias);
        axpy(&mut self.hidden_bias, -lr, &grad.hidden_bias);
    }
}

impl RbmGrad {
    pub fn zeros_like(p: &RbmParams) -> Self {
        Self {
            weights: Matrix::zeros(p.n_hidden(), p.n_visible()),
            visible_bias: vec![0.0; p.n_visible()],
            hidden_bias: vec![0.0; p.n_hidden()],
        }
    }

    /// `self += scale · (ph xᵀ, x, ph)`.
    fn accumulate_phase(&mut self, scale: f64, x: &[f64], ph: &[f64]) {
        self.weights.add_outer(scale, ph, x);
        axpy(&mut self.visible_bias, scale, x);
        axpy(&mut self.hidden_bias, scale, ph);
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(
            self.weights.as_slice().len() + self.visible_bias.len() + self.hidden_bias.len(),
        );
        out.extend_from_slice(self.weights.as_slice());
        out.extend_from_slice(&self.visible_bias);
        out.extend_from_slice(&self.hidden_bias);
        out
    }

    pub fn scale(&mut self, s: f64) {
        self.weights.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        self.visible_bias.iter_mut().for_each(|v| *v *= s);
        self.hidden_bias.iter_mut().for_each(|v| *v *= s);
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, s: f64, other: &RbmGrad) {
        axpy(self.weights.as_mut_slice(), s, other.weights.as_slice());
        axpy(&mut self.visible_bias, s, &other.visible_bias);
        axpy(&mut self.hidden_bias, s, &other.hidden_bias);
    }

    pub fn norm_sq(&self) -> f64 {
        self.flatten().iter().map(|v| v * v).sum()
    }
}

#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn sample_into(p: &[f64], out: &mut [f64], rng: &mut RngStream) {
    for (o, &pi) in out.iter_mut().zip(p) {
        *o = if rng.bernoulli(pi) { 1.0 } else { 0.0 };
    }
}

/// Iterates all binary vectors of length `n` in counting order (bit `j` of the
/// counter is entry `j`).
#[derive(Clone, Debug)]
pub struct BinaryStates {
    n: usize,
    next: u64,
    end: u64,
}

impl BinaryStates {
    pub fn new(n: usize) -> Self {
        assert!(n < 64, "binary state space too large");
        Self {
            n,
            next: 0,
            end: 1u64 << n,
        }
    }
}

impl Iterator for BinaryStates {
    type Item = Vec<f64>;

    fn next(&mut self) -> Option<Vec<f64>> {
        if self.next == self.end {
            return None;
        }
        let s = self.next;
        self.next += 1;
        Some((0..self.n).map(|j| ((s >> j) & 1) as f64).collect())
    }
}
