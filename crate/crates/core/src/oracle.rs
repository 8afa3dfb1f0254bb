//! Brute-force reference computations: central finite differences, exhaustive
//! enumeration of RBM states and of top-layer hidden configurations.
//!
//! Everything here is written directly against the model definitions (energy,
//! logistic units, softmax) and reads parameters only through public fields,
//! so it can check the analytic code paths without sharing them.

use crate::classifier::Network;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::rbm::{RbmParams, ENUMERATION_LIMIT_BITS};

/// Largest top layer accepted by [`enumerate_expected_loss`].
pub const EXPECTED_LOSS_MAX_UNITS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdSpec {
    eps: f64,
}

impl FdSpec {
    /// Central differences with step `eps ∈ [1e-8, 1e-2]`.
    pub fn central(eps: f64) -> Result<Self> {
        if !(1e-8..=1e-2).contains(&eps) {
            return Err(Error::InvalidArgument(format!(
                "finite-difference step {eps} outside [1e-8, 1e-2]"
            )));
        }
        Ok(Self { eps })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }
}

impl Default for FdSpec {
    fn default() -> Self {
        Self { eps: 1e-5 }
    }
}

pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, theta: &[f64], spec: FdSpec) -> Result<Vec<f64>> {
    let mut work = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        work[i] = theta[i] + spec.eps;
        let fp = f(&work);
        work[i] = theta[i] - spec.eps;
        let fm = f(&work);
        work[i] = theta[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite("finite-difference evaluation"));
        }
        out.push((fp - fm) / (2.0 * spec.eps));
    }
    Ok(out)
}

/// Central-difference Jacobian of a vector function; row `r` holds the
/// derivatives of output `r`.
pub fn fd_jacobian(
    f: impl Fn(&[f64]) -> Vec<f64>,
    theta: &[f64],
    spec: FdSpec,
) -> Result<Matrix> {
    let mut work = theta.to_vec();
    let mut columns = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        work[i] = theta[i] + spec.eps;
        let fp = f(&work);
        work[i] = theta[i] - spec.eps;
        let fm = f(&work);
        work[i] = theta[i];
        if fp.len() != fm.len() || fp.iter().chain(&fm).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("finite-difference evaluation"));
        }
        columns.push(
            fp.iter()
                .zip(&fm)
                .map(|(a, b)| (a - b) / (2.0 * spec.eps))
                .collect::<Vec<_>>(),
        );
    }
    let rows = columns.first().map_or(0, Vec::len);
    Ok(Matrix::from_fn(rows, theta.len(), |r, c| columns[c][r]))
}

fn sigma(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn bits(state: u64, n: usize) -> Vec<f64> {
    (0..n).map(|j| ((state >> j) & 1) as f64).collect()
}

/// `-E(x, h) = hᵀWx + cᵀh + bᵀx`, spelled out.
fn neg_energy(p: &RbmParams, x: &[f64], h: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (i, &hi) in h.iter().enumerate() {
        for (j, &xj) in x.iter().enumerate() {
            acc += hi * p.weights.get(i, j) * xj;
        }
        acc += p.hidden_bias[i] * hi;
    }
    for (j, &xj) in x.iter().enumerate() {
        acc += p.visible_bias[j] * xj;
    }
    acc
}

/// Sufficient statistics `(h xᵀ, x, h)` in the flattened parameter order.
fn features(x: &[f64], h: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(h.len() * x.len() + x.len() + h.len());
    for &hi in h {
        for &xj in x {
            out.push(hi * xj);
        }
    }
    out.extend_from_slice(x);
    out.extend_from_slice(h);
    out
}

/// Covariance of the features under weights `exp(log_w)` (normalized here).
fn weighted_covariance(samples: &[(Vec<f64>, f64)]) -> Matrix {
    let n = samples[0].0.len();
    let max = samples
        .iter()
        .map(|s| s.1)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = samples.iter().map(|s| (s.1 - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut mean = vec![0.0; n];
    let mut second = Matrix::zeros(n, n);
    for ((phi, _), w) in samples.iter().zip(&weights) {
        let w = w / total;
        for a in 0..n {
            mean[a] += w * phi[a];
            if phi[a] == 0.0 {
                continue;
            }
            for b in 0..n {
                let v = second.get(a, b) + w * phi[a] * phi[b];
                second.set(a, b, v);
            }
        }
    }
    Matrix::from_fn(n, n, |a, b| second.get(a, b) - mean[a] * mean[b])
}

/// Hessian of `-log p(x)` over the flattened `(W, b, c)` parameters.
///
/// Since `-E` is linear in the parameters with features `φ(x, h)`, the Hessian
/// is `Cov_model[φ] - Cov_{p(h|x)}[φ(x, ·)]`; both covariances come from
/// enumerating every state.
pub fn exact_rbm_hessian(p: &RbmParams, x: &[f64]) -> Result<Matrix> {
    let (nv, nh) = (p.n_visible(), p.n_hidden());
    if nv + nh > ENUMERATION_LIMIT_BITS {
        return Err(Error::EnumerationLimit {
            bits: nv + nh,
            limit: ENUMERATION_LIMIT_BITS,
        });
    }
    crate::error::check_len("hessian input", nv, x.len())?;

    let mut joint = Vec::with_capacity(1 << (nv + nh));
    for xs in 0..(1u64 << nv) {
        let xv = bits(xs, nv);
        for hs in 0..(1u64 << nh) {
            let hv = bits(hs, nh);
            joint.push((features(&xv, &hv), neg_energy(p, &xv, &hv)));
        }
    }
    let conditional: Vec<(Vec<f64>, f64)> = (0..(1u64 << nh))
        .map(|hs| {
            let hv = bits(hs, nh);
            (features(x, &hv), neg_energy(p, x, &hv))
        })
        .collect();

    let model = weighted_covariance(&joint);
    let data = weighted_covariance(&conditional);
    let n = model.rows();
    Ok(Matrix::from_fn(n, n, |a, b| model.get(a, b) - data.get(a, b)))
}

/// Second derivative of `log p(x)` with respect to the weights `w_pq` and
/// `w_rs` from the closed-form expressions, summing explicitly over visible
/// configurations:
///
/// * `r = p`: `σ'(net_p) x_q x_s - Σ_x̃ [∂p(x̃)/∂w_ps · σ(ñet_p) x̃_q + p(x̃) σ'(ñet_p) x̃_q x̃_s]`
/// * `r ≠ p`: `-Σ_x̃ ∂p(x̃)/∂w_rs · σ(ñet_p) x̃_q`
///
/// with `∂p(x̃)/∂w_rs = p(x̃) (σ(ñet_r) x̃_s - Σ_x̄ p(x̄) σ(n̄et_r) x̄_s)` and
/// `net_p = Σ_q w_pq x_q + c_p`. The Hessian of `-log p(x)` is the negation.
pub fn closed_form_weight_second_derivative(
    p: &RbmParams,
    x: &[f64],
    (hp, vq): (usize, usize),
    (hr, vs): (usize, usize),
) -> Result<f64> {
    let nv = p.n_visible();
    if nv + p.n_hidden() > ENUMERATION_LIMIT_BITS {
        return Err(Error::EnumerationLimit {
            bits: nv + p.n_hidden(),
            limit: ENUMERATION_LIMIT_BITS,
        });
    }
    let net = |i: usize, v: &[f64]| -> f64 {
        (0..nv).map(|j| p.weights.get(i, j) * v[j]).sum::<f64>() + p.hidden_bias[i]
    };
    // Unnormalized marginal p(x̃) ∝ exp(bᵀx̃) Π_i (1 + exp(net_i(x̃))).
    let states: Vec<Vec<f64>> = (0..(1u64 << nv)).map(|s| bits(s, nv)).collect();
    let log_weights: Vec<f64> = states
        .iter()
        .map(|v| {
            let bx: f64 = (0..nv).map(|j| p.visible_bias[j] * v[j]).sum();
            bx + (0..p.n_hidden())
                .map(|i| {
                    let a = net(i, v);
                    a.max(0.0) + (-a.abs()).exp().ln_1p()
                })
                .sum::<f64>()
        })
        .collect();
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = log_weights.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = unnorm.iter().sum();
    let px: Vec<f64> = unnorm.iter().map(|u| u / z).collect();

    let model_mean_rs: f64 = states
        .iter()
        .zip(&px)
        .map(|(v, w)| w * sigma(net(hr, v)) * v[vs])
        .sum();
    let dpx_drs = |k: usize| px[k] * (sigma(net(hr, &states[k])) * states[k][vs] - model_mean_rs);

    let mut model_term = 0.0;
    for (k, v) in states.iter().enumerate() {
        let sp = sigma(net(hp, v));
        model_term += dpx_drs(k) * sp * v[vq];
        if hr == hp {
            model_term += px[k] * sp * (1.0 - sp) * v[vq] * v[vs];
        }
    }
    let data_term = if hr == hp {
        let s = sigma(net(hp, x));
        s * (1.0 - s) * x[vq] * x[vs]
    } else {
        0.0
    };
    Ok(data_term - model_term)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnumeratedExpectation {
    pub value: f64,
    /// Sum of the product-Bernoulli masses over all states; 1 up to rounding.
    pub weight_sum: f64,
}

/// `Σ_h Π_i Bern(h_i; m_i) · L(y, h)` over every binary top-layer state, with
/// `m` the mean-field top conditional and `L` the softmax negative
/// log-likelihood of the head.
pub fn enumerate_expected_loss(net: &Network, x: &[f64], y: usize) -> Result<EnumeratedExpectation> {
    let top = net.dbn.n_top();
    if top > EXPECTED_LOSS_MAX_UNITS {
        return Err(Error::EnumerationLimit {
            bits: top,
            limit: EXPECTED_LOSS_MAX_UNITS,
        });
    }
    if y >= net.head.weights.rows() {
        return Err(Error::InvalidClass {
            index: y,
            classes: net.head.weights.rows(),
        });
    }
    crate::error::check_len("expected-loss input", net.dbn.n_visible(), x.len())?;
    let mut act = x.to_vec();
    for layer in net.dbn.layers() {
        act = (0..layer.n_hidden())
            .map(|i| {
                let a: f64 = (0..layer.n_visible())
                    .map(|j| layer.weights.get(i, j) * act[j])
                    .sum::<f64>()
                    + layer.hidden_bias[i];
                sigma(a)
            })
            .collect();
    }
    let means = act;
    let classes = net.head.weights.rows();
    let mut value = 0.0;
    let mut weight_sum = 0.0;
    for s in 0..(1u64 << top) {
        let h = bits(s, top);
        let mass: f64 = h
            .iter()
            .zip(&means)
            .map(|(&hi, &m)| if hi == 1.0 { m } else { 1.0 - m })
            .product();
        let logits: Vec<f64> = (0..classes)
            .map(|c| {
                (0..top).map(|i| net.head.weights.get(c, i) * h[i]).sum::<f64>() + net.head.bias[c]
            })
            .collect();
        let zmax = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = zmax + logits.iter().map(|z| (z - zmax).exp()).sum::<f64>().ln();
        value += mass * (lse - logits[y]);
        weight_sum += mass;
    }
    Ok(EnumeratedExpectation { value, weight_sum })
}
