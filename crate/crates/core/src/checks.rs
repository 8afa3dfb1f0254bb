//! Self-checks of every analytic derivative against brute-force oracles at
//! desk scale. Each check reports its worst error and wall time.

use std::time::{Duration, Instant};

use crate::classifier::{ClassifierParams, Network};
use crate::dbn::DbnParams;
use crate::error::Result;
use crate::hyper::HvpMode;
use crate::numerics::{Matrix, RngStream};
use crate::oracle::{
    closed_form_weight_second_derivative, enumerate_expected_loss, exact_rbm_hessian, fd_gradient,
    fd_jacobian, FdSpec,
};
use crate::rbm::RbmParams;
use crate::strategies::{bl_penalty, expected_loss, ExpectationMode};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

/// `|a − b| / max(|a|, |b|, floor)`, maximized over components.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

const REL_FLOOR: f64 = 1e-3;

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckOutcome {
        name,
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

pub fn random_rbm(nv: usize, nh: usize, sd: f64, rng: &mut RngStream) -> RbmParams {
    RbmParams::new(
        Matrix::from_fn(nh, nv, |_, _| sd * rng.standard_normal()),
        (0..nv).map(|_| sd * rng.standard_normal()).collect(),
        (0..nh).map(|_| sd * rng.standard_normal()).collect(),
    )
    .expect("finite parameters")
}

/// Network with every parameter drawn from `N(0, sd²)`; `arch` ends with the
/// class count.
pub fn random_network(arch: &[usize], sd: f64, rng: &mut RngStream) -> Network {
    let (stack, classes) = arch.split_at(arch.len() - 1);
    let layers = stack
        .windows(2)
        .map(|d| random_rbm(d[0], d[1], sd, rng))
        .collect();
    let top = *stack.last().unwrap();
    let head = ClassifierParams {
        weights: Matrix::from_fn(classes[0], top, |_, _| sd * rng.standard_normal()),
        bias: (0..classes[0]).map(|_| sd * rng.standard_normal()).collect(),
    };
    Network::new(DbnParams::new(layers).expect("chained layers"), head).expect("matching head")
}

fn binary(n: usize, rng: &mut RngStream) -> Vec<f64> {
    (0..n).map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 }).collect()
}

/// Exact likelihood gradient versus central differences of `−log p(x)` on 20
/// random 6×4 RBMs.
pub fn likelihood_gradient(seed: u64) -> CheckOutcome {
    timed("likelihood gradient", || {
        let mut rng = RngStream::new(seed, 1);
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let p = random_rbm(6, 4, 0.1, &mut rng);
            let x = binary(6, &mut rng);
            let analytic = p.exact_nll_grad(&x)?.flatten();
            let fd = fd_gradient(
                |t| -RbmParams::from_flat(6, 4, t).unwrap().exact_log_px(&x).unwrap(),
                &p.flatten(),
                FdSpec::default(),
            )?;
            worst = worst.max(max_relative_error(&analytic, &fd, REL_FLOOR));
        }
        Ok((worst <= 1e-6, format!("max relative error {worst:.3e} (limit 1e-6)")))
    })
}

/// Enumerated Hessian versus nested differences and symmetry on 5 random 4×3
/// RBMs, plus three closed-form weight entries per instance.
pub fn hessian(seed: u64) -> CheckOutcome {
    timed("hessian", || {
        let mut rng = RngStream::new(seed, 2);
        let (mut fd_err, mut asym, mut cf_err) = (0.0f64, 0.0f64, 0.0f64);
        for _ in 0..5 {
            let p = random_rbm(4, 3, 0.5, &mut rng);
            let x = binary(4, &mut rng);
            let h = exact_rbm_hessian(&p, &x)?;
            let fd = fd_jacobian(
                |t| RbmParams::from_flat(4, 3, t).unwrap().exact_nll_grad(&x).unwrap().flatten(),
                &p.flatten(),
                FdSpec::default(),
            )?;
            for r in 0..h.rows() {
                for c in 0..h.cols() {
                    fd_err = fd_err.max((h.get(r, c) - fd.get(r, c)).abs());
                    asym = asym.max((h.get(r, c) - h.get(c, r)).abs());
                }
            }
            // Same unit, same weight; same unit, different input; different units.
            for (a, b) in [((0, 1), (0, 1)), ((1, 0), (1, 3)), ((0, 2), (2, 1))] {
                let closed = closed_form_weight_second_derivative(&p, &x, a, b)?;
                let enumerated = h.get(a.0 * 4 + a.1, b.0 * 4 + b.1);
                // The closed forms are second derivatives of log p(x).
                cf_err = cf_err.max((closed + enumerated).abs());
            }
        }
        let passed = fd_err <= 1e-5 && asym <= 1e-10 && cf_err <= 1e-8;
        Ok((
            passed,
            format!(
                "nested-difference error {fd_err:.3e} (1e-5), asymmetry {asym:.3e} (1e-10), closed-form error {cf_err:.3e} (1e-8)"
            ),
        ))
    })
}

/// Mean CD-k gradient over many chains versus the exact gradient.
pub fn cd_consistency(seed: u64, chains: usize, k: usize) -> CheckOutcome {
    timed("contrastive divergence consistency", || {
        let mut rng = RngStream::new(seed, 3);
        let p = random_rbm(4, 3, 0.5, &mut rng);
        let points: Vec<Vec<f64>> = (0..4).map(|_| binary(4, &mut rng)).collect();
        let batch: Vec<&[f64]> = (0..chains).map(|i| points[i % points.len()].as_slice()).collect();
        let exact = p.exact_mean_nll_grad(&batch)?.flatten();
        let cd = p.cd_k_grad(&batch, k, &mut rng.derive(&[7]))?.flatten();
        let worst = exact.iter().zip(&cd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        Ok((worst <= 0.01, format!("max abs deviation {worst:.4} (limit 0.01)")))
    })
}

/// Network backpropagation versus central differences on 20 random 6-5-4-3
/// networks.
pub fn backprop(seed: u64) -> CheckOutcome {
    timed("backpropagation", || {
        let mut rng = RngStream::new(seed, 4);
        let arch = [6, 5, 4, 3];
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let net = random_network(&arch, 0.5, &mut rng);
            let x: Vec<f64> = (0..6).map(|_| rng.uniform()).collect();
            let y = rng.below(3);
            let (_, g) = net.backward(&x, y)?;
            let fd = fd_gradient(
                |t| Network::from_flat(&arch[..3], 3, t).unwrap().loss(&x, y).unwrap(),
                &net.flatten(),
                FdSpec::default(),
            )?;
            worst = worst.max(max_relative_error(&g.flatten(), &fd, REL_FLOOR));
        }
        Ok((worst <= 1e-6, format!("max relative error {worst:.3e} (limit 1e-6)")))
    })
}

/// Sampled expected loss versus enumeration on 8-unit top layers, and the
/// enumerated gradient versus central differences.
pub fn expected_loss_check(seed: u64, samples: usize) -> CheckOutcome {
    timed("expected loss", || {
        let mut rng = RngStream::new(seed, 5);
        let arch = [5, 6, 8, 3];
        let (mut mc_err, mut grad_err) = (0.0f64, 0.0f64);
        for inst in 0..3 {
            let net = random_network(&arch, 0.7, &mut rng);
            let x: Vec<f64> = (0..5).map(|_| rng.uniform()).collect();
            let y = rng.below(3);
            let exact = expected_loss(&net, &x, y, ExpectationMode::Enumerate, &mut rng)?;
            let mc = expected_loss(
                &net,
                &x,
                y,
                ExpectationMode::MonteCarlo { samples },
                &mut rng.derive(&[inst]),
            )?;
            mc_err = mc_err.max((mc.value - exact.value).abs() / exact.value.abs());
            let fd = fd_gradient(
                |t| enumerate_expected_loss(&Network::from_flat(&arch[..3], 3, t).unwrap(), &x, y).unwrap().value,
                &net.flatten(),
                FdSpec::default(),
            )?;
            grad_err = grad_err.max(max_relative_error(&exact.grad.flatten(), &fd, REL_FLOOR));
        }
        let passed = mc_err <= 0.01 && grad_err <= 1e-6;
        Ok((
            passed,
            format!("sampled vs exact {:.3}% (1%), gradient relative error {grad_err:.3e} (1e-6)", 100.0 * mc_err),
        ))
    })
}

/// Exact-mode bilevel penalty gradient versus central differences of
/// `(μ/2)‖g‖²` on a 4-3 single-layer network.
pub fn penalty_gradient(seed: u64) -> CheckOutcome {
    timed("bilevel penalty gradient", || {
        let mut rng = RngStream::new(seed, 6);
        let arch = [4, 3, 2];
        let mu = 0.5;
        let mut worst = 0.0f64;
        for _ in 0..3 {
            let net = random_network(&arch, 0.5, &mut rng);
            let xs: Vec<Vec<f64>> = (0..5).map(|_| binary(4, &mut rng)).collect();
            let batch: Vec<(&[f64], usize)> = xs.iter().map(|x| (x.as_slice(), rng.below(2))).collect();
            let with = bl_penalty(&net, &batch, mu, HvpMode::Exact, 1, &rng)?.grad.flatten();
            let without = bl_penalty(&net, &batch, 0.0, HvpMode::Exact, 1, &rng)?.grad.flatten();
            let analytic: Vec<f64> = with.iter().zip(&without).map(|(a, b)| a - b).collect();
            let fd = fd_gradient(
                |t| {
                    let n = Network::from_flat(&arch[..2], 2, t).unwrap();
                    0.5 * mu * n.dbn.layers()[0].exact_mean_nll_grad(&xs).unwrap().norm_sq()
                },
                &net.flatten(),
                FdSpec::default(),
            )?;
            worst = worst.max(max_relative_error(&analytic, &fd, REL_FLOOR));
        }
        Ok((worst <= 1e-4, format!("max relative error {worst:.3e} (limit 1e-4)")))
    })
}

/// All six derivative checks with their standard sizes.
pub fn all(seed: u64) -> Vec<CheckOutcome> {
    vec![
        likelihood_gradient(seed),
        hessian(seed),
        cd_consistency(seed, 100_000, 50),
        backprop(seed),
        expected_loss_check(seed, 20_000),
        penalty_gradient(seed),
    ]
}
