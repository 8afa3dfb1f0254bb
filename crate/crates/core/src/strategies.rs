//! The seven classification training strategies over a shared DBN-shaped
//! network.
//!
//! | strategy    | start point                   | objective                         | box reference        |
//! |-------------|-------------------------------|-----------------------------------|----------------------|
//! | DBN-FFN     | pretrained stack, zero head   | mean NLL                          | none                 |
//! | DBN+loss    | random stack, zero head       | mean NLL + ρ·(−log p(x)), layer 1 | none                 |
//! | EL-DBN      | pretrained stack, zero head   | expected NLL over `p(h^ℓ|x)`      | pretrained stack     |
//! | EL-DBNOPT   | two-phase network             | expected NLL over `p(h^ℓ|x)`      | two-phase stack      |
//! | FFN-DBN     | pretrained stack, zero head   | mean NLL                          | pretrained stack     |
//! | FFN-DBNOPT  | two-phase network             | mean NLL                          | two-phase stack      |
//! | BL          | random stack, zero head       | mean NLL + (μ/2)·Σ_i ‖g_i‖²       | none                 |
//!
//! All strategies run plain mini-batch SGD. The shuffle order and per-batch
//! random numbers come from sub-streams keyed by epoch and batch only, so two
//! strategies started from the same network under the same seed see the same
//! batches.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classifier::{batch_backward, nll_from_logits, LabeledDataset, Network, NetworkGrad};
use crate::dbn::{pretrain_layerwise, DbnParams, PretrainOutcome};
use crate::error::{check_len, Error, Result};
use crate::history::{EpochRecord, RunHistory};
use crate::hyper::{ExpectedLossEstimator, Hyper, HvpMode};
use crate::numerics::{max_abs, softmax, RngStream};
use crate::oracle::{exact_rbm_hessian, EXPECTED_LOSS_MAX_UNITS};
use crate::rbm::{RbmGrad, RbmParams};

const PRETRAIN_STREAM: u64 = 0x5052;
const INIT_STREAM: u64 = 0x494e;
const SHUFFLE_STREAM: u64 = 0x5348;
const BATCH_STREAM: u64 = 0x4241;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StrategyId {
    DbnFfn,
    DbnPlusLoss,
    ElDbn,
    ElDbnOpt,
    FfnDbn,
    FfnDbnOpt,
    Bilevel,
}

impl StrategyId {
    pub const ALL: [StrategyId; 7] = [
        StrategyId::DbnFfn,
        StrategyId::DbnPlusLoss,
        StrategyId::ElDbn,
        StrategyId::ElDbnOpt,
        StrategyId::FfnDbn,
        StrategyId::FfnDbnOpt,
        StrategyId::Bilevel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyId::DbnFfn => "DBN-FFN",
            StrategyId::DbnPlusLoss => "DBN+loss",
            StrategyId::ElDbn => "EL-DBN",
            StrategyId::ElDbnOpt => "EL-DBNOPT",
            StrategyId::FfnDbn => "FFN-DBN",
            StrategyId::FfnDbnOpt => "FFN-DBNOPT",
            StrategyId::Bilevel => "BL",
        }
    }

    /// Stable numeric code used in checkpoints.
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn needs_pretraining(self) -> bool {
        matches!(
            self,
            StrategyId::DbnFfn | StrategyId::ElDbn | StrategyId::FfnDbn
        )
    }

    pub fn needs_two_phase(self) -> bool {
        matches!(self, StrategyId::ElDbnOpt | StrategyId::FfnDbnOpt)
    }

    pub fn is_boxed(self) -> bool {
        matches!(
            self,
            StrategyId::ElDbn | StrategyId::ElDbnOpt | StrategyId::FfnDbn | StrategyId::FfnDbnOpt
        )
    }

    pub fn uses_expected_loss(self) -> bool {
        matches!(self, StrategyId::ElDbn | StrategyId::ElDbnOpt)
    }
}

impl fmt::Display for StrategyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric() || *c == '+')
            .map(|c| c.to_ascii_uppercase())
            .collect();
        let id = match key.as_str() {
            "DBNFFN" => StrategyId::DbnFfn,
            "DBN+LOSS" | "DBNPLUSLOSS" | "DBNLOSS" => StrategyId::DbnPlusLoss,
            "ELDBN" => StrategyId::ElDbn,
            "ELDBNOPT" => StrategyId::ElDbnOpt,
            "FFNDBN" => StrategyId::FfnDbn,
            "FFNDBNOPT" => StrategyId::FfnDbnOpt,
            "BL" | "BILEVEL" => StrategyId::Bilevel,
            _ => return Err(Error::Config(format!("unknown strategy {s:?}"))),
        };
        Ok(id)
    }
}

impl Serialize for StrategyId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for StrategyId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Elementwise box `|θ - θ_ref| ≤ δ` over the flattened DBN parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxConstraint {
    reference: Vec<f64>,
    radius: f64,
}

impl BoxConstraint {
    pub fn new(reference: Vec<f64>, radius: f64) -> Result<Self> {
        if radius.is_nan() || radius < 0.0 {
            return Err(Error::InvalidArgument("box radius must be >= 0".into()));
        }
        Ok(Self { reference, radius })
    }

    pub fn around(dbn: &DbnParams, radius: f64) -> Result<Self> {
        Self::new(dbn.flatten(), radius)
    }

    pub fn reference(&self) -> &[f64] {
        &self.reference
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Clamps in place to `[θ_ref - δ, θ_ref + δ]`. The bounds are nudged
    /// inward by an ulp where rounding would otherwise leave `|θ - θ_ref|`
    /// slightly above `δ`.
    pub fn project_in_place(&self, theta: &mut [f64]) -> Result<()> {
        check_len("box projection", self.reference.len(), theta.len())?;
        for (v, &r) in theta.iter_mut().zip(&self.reference) {
            *v = clamp_within(*v, r, self.radius);
        }
        Ok(())
    }

    pub fn project_dbn(&self, dbn: &mut DbnParams) -> Result<()> {
        check_len("box projection", self.reference.len(), dbn.num_params())?;
        let mut offset = 0;
        for layer in dbn.layers_mut() {
            for slice in [
                layer.weights.as_mut_slice(),
                &mut layer.visible_bias,
                &mut layer.hidden_bias,
            ] {
                let reference = &self.reference[offset..offset + slice.len()];
                for (v, &r) in slice.iter_mut().zip(reference) {
                    *v = clamp_within(*v, r, self.radius);
                }
                offset += slice.len();
            }
        }
        Ok(())
    }

    /// `max |θ - θ_ref|` by a full scan.
    pub fn distance(&self, dbn: &DbnParams) -> f64 {
        dbn.flatten()
            .iter()
            .zip(&self.reference)
            .fold(0.0, |m, (v, r)| m.max((v - r).abs()))
    }
}

fn clamp_within(v: f64, r: f64, radius: f64) -> f64 {
    if radius.is_infinite() {
        return v;
    }
    let mut hi = r + radius;
    while hi - r > radius {
        hi = hi.next_down();
    }
    let mut lo = r - radius;
    while r - lo > radius {
        lo = lo.next_up();
    }
    v.max(lo).min(hi)
}

/// Projects a flattened parameter vector onto the box.
pub fn box_project(theta: &[f64], bx: &BoxConstraint) -> Result<Vec<f64>> {
    let mut out = theta.to_vec();
    bx.project_in_place(&mut out)?;
    Ok(out)
}

/// How the expectation over top-layer states is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExpectationMode {
    /// Every binary configuration of the top layer.
    Enumerate,
    /// Independent samples from the product of Bernoullis.
    MonteCarlo { samples: usize },
}

impl ExpectationMode {
    pub fn for_hyper(hyper: &Hyper, top_units: usize) -> Self {
        match hyper.expected_loss {
            ExpectedLossEstimator::Exact => ExpectationMode::Enumerate,
            ExpectedLossEstimator::Sampled => ExpectationMode::MonteCarlo {
                samples: hyper.mc_samples,
            },
            ExpectedLossEstimator::Auto if top_units <= hyper.enumeration_max_units => {
                ExpectationMode::Enumerate
            }
            ExpectedLossEstimator::Auto => ExpectationMode::MonteCarlo {
                samples: hyper.mc_samples,
            },
        }
    }
}

/// Objective value together with its gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueGrad {
    pub value: f64,
    pub grad: NetworkGrad,
}

/// Mean classification loss on deterministic features.
pub fn objective_two_phase(net: &Network, batch: &[(&[f64], usize)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut total = 0.0;
    for &(x, y) in batch {
        total += net.loss(x, y)?;
    }
    Ok(total / batch.len() as f64)
}

/// `mean L + ρ · mean(−log p(x))`, with `log p(x)` taken from the first-layer
/// RBM by exact enumeration.
pub fn objective_dbn_plus_loss(net: &Network, batch: &[(&[f64], usize)], rho: f64) -> Result<f64> {
    let loss = objective_two_phase(net, batch)?;
    if rho == 0.0 {
        return Ok(loss);
    }
    let mut nll = 0.0;
    for &(x, _) in batch {
        nll -= net.dbn.log_px_approx(x)?;
    }
    Ok(loss + rho * nll / batch.len() as f64)
}

/// Gradient of the DBN+loss objective: backpropagation for the supervised term
/// plus `ρ` times the CD-k estimate of the first-layer likelihood gradient.
/// The returned value is the supervised part only.
pub fn dbn_plus_loss_gradient(
    net: &Network,
    batch: &[(&[f64], usize)],
    rho: f64,
    cd_k: usize,
    rng: &mut RngStream,
) -> Result<ValueGrad> {
    if rho < 0.0 {
        return Err(Error::InvalidArgument("rho must be >= 0".into()));
    }
    let (value, mut grad) = batch_backward(net, batch)?;
    if rho > 0.0 {
        let inputs: Vec<&[f64]> = batch.iter().map(|b| b.0).collect();
        let cd = net.dbn.layers()[0].cd_k_grad(&inputs, cd_k, rng)?;
        grad.layers[0].add_scaled(rho, &cd);
    }
    Ok(ValueGrad { value, grad })
}

/// Expected classification loss `Σ_h p(h|x) L(y, h)` over binary top-layer
/// states, and its gradient.
///
/// With `m` the top-layer Bernoulli means, `∂E[L]/∂m_i = E[L | h_i = 1] -
/// E[L | h_i = 0]`; this is formed exactly when enumerating and by flipping
/// unit `i` inside each sample (common random numbers) when sampling. The
/// result flows into every layer through the mean-field activations.
pub fn expected_loss(
    net: &Network,
    x: &[f64],
    y: usize,
    mode: ExpectationMode,
    rng: &mut RngStream,
) -> Result<ValueGrad> {
    if y >= net.classes() {
        return Err(Error::InvalidClass {
            index: y,
            classes: net.classes(),
        });
    }
    let acts = net.dbn.propagate(x)?;
    let means = acts.top().to_vec();
    let top = means.len();
    let classes = net.classes();
    let u = &net.head.weights;

    let mut grad = NetworkGrad::zeros_like(net);
    let mut d_means = vec![0.0; top];
    let mut value = 0.0;

    match mode {
        ExpectationMode::Enumerate => {
            if top > EXPECTED_LOSS_MAX_UNITS {
                return Err(Error::EnumerationLimit {
                    bits: top,
                    limit: EXPECTED_LOSS_MAX_UNITS,
                });
            }
            let mut h = vec![0.0; top];
            let mut factors = vec![0.0; top];
            let mut prefix = vec![0.0; top + 1];
            let mut suffix = vec![0.0; top + 1];
            for state in 0..(1u64 << top) {
                for i in 0..top {
                    let on = (state >> i) & 1 == 1;
                    h[i] = if on { 1.0 } else { 0.0 };
                    factors[i] = if on { means[i] } else { 1.0 - means[i] };
                }
                prefix[0] = 1.0;
                for i in 0..top {
                    prefix[i + 1] = prefix[i] * factors[i];
                }
                suffix[top] = 1.0;
                for i in (0..top).rev() {
                    suffix[i] = suffix[i + 1] * factors[i];
                }
                let mass = prefix[top];
                let z = net.head.logits(&h)?;
                let loss = nll_from_logits(&z, y);
                value += mass * loss;
                if mass != 0.0 {
                    let mut delta = softmax(&z)?;
                    delta[y] -= 1.0;
                    grad.head.weights.add_outer(mass, &delta, &h);
                    for (g, d) in grad.head.bias.iter_mut().zip(&delta) {
                        *g += mass * d;
                    }
                }
                for i in 0..top {
                    let others = prefix[i] * suffix[i + 1];
                    d_means[i] += if h[i] == 1.0 { others * loss } else { -others * loss };
                }
            }
        }
        ExpectationMode::MonteCarlo { samples } => {
            if samples == 0 {
                return Err(Error::InvalidArgument("need at least one sample".into()));
            }
            let w = 1.0 / samples as f64;
            let mut h = vec![0.0; top];
            let mut flipped = vec![0.0; classes];
            for _ in 0..samples {
                for i in 0..top {
                    h[i] = if rng.bernoulli(means[i]) { 1.0 } else { 0.0 };
                }
                let z = net.head.logits(&h)?;
                let loss = nll_from_logits(&z, y);
                value += w * loss;
                let mut delta = softmax(&z)?;
                delta[y] -= 1.0;
                grad.head.weights.add_outer(w, &delta, &h);
                for (g, d) in grad.head.bias.iter_mut().zip(&delta) {
                    *g += w * d;
                }
                for i in 0..top {
                    // Logits with unit i forced to the opposite state.
                    let sign = if h[i] == 1.0 { -1.0 } else { 1.0 };
                    for c in 0..classes {
                        flipped[c] = z[c] + sign * u.get(c, i);
                    }
                    let other = nll_from_logits(&flipped, y);
                    let (on, off) = if h[i] == 1.0 { (loss, other) } else { (other, loss) };
                    d_means[i] += w * (on - off);
                }
            }
        }
    }

    grad.layers = net.backprop_hidden(x, &acts, d_means)?;
    Ok(ValueGrad { value, grad })
}

/// Mean expected loss and gradient over a batch; each example draws from its
/// own sub-stream.
pub fn batch_expected_loss(
    net: &Network,
    batch: &[(&[f64], usize)],
    mode: ExpectationMode,
    rng: &RngStream,
) -> Result<ValueGrad> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut total = NetworkGrad::zeros_like(net);
    let mut value = 0.0;
    for (n, &(x, y)) in batch.iter().enumerate() {
        let vg = expected_loss(net, x, y, mode, &mut rng.derive(&[n as u64]))?;
        value += vg.value;
        total.add_scaled(1.0, &vg.grad);
    }
    let w = 1.0 / batch.len() as f64;
    total.scale(w);
    Ok(ValueGrad {
        value: value * w,
        grad: total,
    })
}

/// Bilevel objective with its quadratic stationarity penalty.
#[derive(Clone, Debug, PartialEq)]
pub struct PenalizedObjective {
    /// `mean L + (μ/2) Σ_i ‖g_i‖²`.
    pub value: f64,
    /// `Σ_i ‖g_i‖²`, where `g_i` is layer `i`'s batch-mean likelihood gradient.
    pub penalty_norm_sq: f64,
    pub grad: NetworkGrad,
}

/// Quadratic-penalty form of the bilevel model on one batch.
///
/// Each layer's RBM likelihood is treated on its own, with the layer's inputs
/// (the data, or the mean activations of the layers below) held fixed. The
/// penalty gradient for layer `i` is `μ · H_i g_i`, with `H_i` the Hessian of
/// that layer's mean negative log-likelihood.
pub fn bl_penalty(
    net: &Network,
    batch: &[(&[f64], usize)],
    mu: f64,
    mode: HvpMode,
    cd_k: usize,
    rng: &RngStream,
) -> Result<PenalizedObjective> {
    if mu < 0.0 {
        return Err(Error::InvalidArgument("mu must be >= 0".into()));
    }
    let (loss, mut grad) = batch_backward(net, batch)?;
    if mu == 0.0 {
        return Ok(PenalizedObjective {
            value: loss,
            penalty_norm_sq: 0.0,
            grad,
        });
    }

    let mut layer_inputs: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(batch.len()); net.dbn.depth()];
    for &(x, _) in batch {
        let acts = net.dbn.propagate(x)?;
        for (k, inputs) in layer_inputs.iter_mut().enumerate() {
            inputs.push(acts.layer_input(x, k).to_vec());
        }
    }

    let mut norm_sq = 0.0;
    for (k, (layer, inputs)) in net.dbn.layers().iter().zip(&layer_inputs).enumerate() {
        let (g, hg) = match mode {
            HvpMode::Exact => exact_gradient_and_hvp(layer, inputs)?,
            HvpMode::FdCd => cd_gradient_and_hvp(layer, inputs, cd_k, &rng.derive(&[k as u64]))?,
        };
        norm_sq += g.norm_sq();
        grad.layers[k].add_scaled(mu, &hg);
    }
    Ok(PenalizedObjective {
        value: loss + 0.5 * mu * norm_sq,
        penalty_norm_sq: norm_sq,
        grad,
    })
}

fn exact_gradient_and_hvp(layer: &RbmParams, inputs: &[Vec<f64>]) -> Result<(RbmGrad, RbmGrad)> {
    let g = layer.exact_mean_nll_grad(inputs)?;
    let g_flat = g.flatten();
    let mut hg = vec![0.0; g_flat.len()];
    let w = 1.0 / inputs.len() as f64;
    for x in inputs {
        let h = exact_rbm_hessian(layer, x)?;
        let hx = h.matvec(&g_flat)?;
        for (a, b) in hg.iter_mut().zip(hx) {
            *a += w * b;
        }
    }
    let hg = grad_from_flat(layer, &hg)?;
    Ok((g, hg))
}

/// CD-k gradient `g` and `H g ≈ [ĝ(θ + εg) − ĝ(θ − εg)] / 2ε`, all three
/// estimates sharing one random stream.
fn cd_gradient_and_hvp(
    layer: &RbmParams,
    inputs: &[Vec<f64>],
    cd_k: usize,
    rng: &RngStream,
) -> Result<(RbmGrad, RbmGrad)> {
    let g = layer.cd_k_grad(inputs, cd_k, &mut rng.clone())?;
    let theta = layer.flatten();
    let g_flat = g.flatten();
    let g_norm = max_abs(&g_flat);
    if g_norm == 0.0 {
        return Ok((g.clone(), g));
    }
    let eps = 1e-3 * (1.0 + max_abs(&theta)) / (1.0 + g_norm);
    let shifted = |sign: f64| -> Result<RbmGrad> {
        let moved: Vec<f64> = theta.iter().zip(&g_flat).map(|(t, d)| t + sign * eps * d).collect();
        RbmParams::from_flat(layer.n_visible(), layer.n_hidden(), &moved)?
            .cd_k_grad(inputs, cd_k, &mut rng.clone())
    };
    let mut hg = shifted(1.0)?;
    hg.add_scaled(-1.0, &shifted(-1.0)?);
    hg.scale(1.0 / (2.0 * eps));
    Ok((g, hg))
}

fn grad_from_flat(layer: &RbmParams, flat: &[f64]) -> Result<RbmGrad> {
    let p = RbmParams::from_flat(layer.n_visible(), layer.n_hidden(), flat)?;
    Ok(RbmGrad {
        weights: p.weights,
        visible_bias: p.visible_bias,
        hidden_bias: p.hidden_bias,
    })
}

/// Train, validation and test sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: LabeledDataset,
    pub valid: LabeledDataset,
    pub test: LabeledDataset,
}

impl Splits {
    fn validate(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::Empty("training split"));
        }
        let dim = self.train.dim();
        for part in [&self.valid, &self.test] {
            if !part.is_empty() {
                check_len("split input width", dim.unwrap_or(0), part.dim().unwrap_or(0))?;
                check_len("split class count", self.train.classes, part.classes)?;
            }
        }
        Ok(())
    }
}

/// Reference snapshots a strategy may depend on.
#[derive(Clone, Debug, Default)]
pub struct References {
    /// Greedy pretraining result.
    pub pretrained: Option<PretrainOutcome>,
    /// Two-phase network at its best validation epoch.
    pub two_phase: Option<Network>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub network: Network,
    pub strategy: StrategyId,
    pub hyper: Hyper,
    pub history: RunHistory,
}

/// Network at the epoch with the lowest validation error (epoch 0 is the
/// starting point).
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub epoch: usize,
    pub valid_error: Option<f64>,
    pub network: Network,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub best: Snapshot,
}

/// Greedy pretraining on the training inputs under the run's pretraining
/// sub-stream.
pub fn pretrain_reference(
    arch: &[usize],
    train: &LabeledDataset,
    hyper: &Hyper,
    rng: &RngStream,
) -> Result<PretrainOutcome> {
    pretrain_layerwise(arch, &train.inputs, hyper, &rng.derive(&[PRETRAIN_STREAM]))
}

/// Trains one strategy. `arch = [input, hidden_1, …, hidden_ℓ]`; the class
/// count comes from the training split.
pub fn train(
    strategy: StrategyId,
    arch: &[usize],
    splits: &Splits,
    hyper: &Hyper,
    rng: &RngStream,
    refs: &References,
) -> Result<TrainOutcome> {
    train_with_observer(strategy, arch, splits, hyper, rng, refs, &mut |_, _| {})
}

/// [`train`] with a callback invoked after every epoch's updates.
pub fn train_with_observer(
    strategy: StrategyId,
    arch: &[usize],
    splits: &Splits,
    hyper: &Hyper,
    rng: &RngStream,
    refs: &References,
    observer: &mut dyn FnMut(usize, &Network),
) -> Result<TrainOutcome> {
    hyper.validate()?;
    splits.validate()?;
    let classes = splits.train.classes;
    let missing = |what| Error::MissingReference {
        strategy: strategy.name(),
        what,
    };

    let pretrained = || -> Result<&PretrainOutcome> {
        let p = refs.pretrained.as_ref().ok_or_else(|| missing("pretrained"))?;
        check_len("pretrained architecture", arch.len(), p.params.architecture().len())?;
        if p.params.architecture() != arch {
            return Err(Error::InvalidArgument(
                "pretrained stack does not match the architecture".into(),
            ));
        }
        Ok(p)
    };
    let two_phase = || -> Result<&Network> {
        let n = refs.two_phase.as_ref().ok_or_else(|| missing("two-phase"))?;
        if n.dbn.architecture() != arch || n.classes() != classes {
            return Err(Error::InvalidArgument(
                "two-phase network does not match the architecture".into(),
            ));
        }
        Ok(n)
    };

    let mut pretrain_curves = Vec::new();
    let (start, bx) = match strategy {
        StrategyId::DbnFfn => {
            let p = pretrained()?;
            pretrain_curves = p.reconstruction.clone();
            (Network::with_zero_head(p.params.clone(), classes), None)
        }
        StrategyId::ElDbn | StrategyId::FfnDbn => {
            let p = pretrained()?;
            pretrain_curves = p.reconstruction.clone();
            let bx = BoxConstraint::around(&p.params, hyper.delta)?;
            (Network::with_zero_head(p.params.clone(), classes), Some(bx))
        }
        StrategyId::ElDbnOpt | StrategyId::FfnDbnOpt => {
            let n = two_phase()?;
            let bx = BoxConstraint::around(&n.dbn, hyper.delta)?;
            (n.clone(), Some(bx))
        }
        StrategyId::DbnPlusLoss | StrategyId::Bilevel => {
            let dbn = DbnParams::init(arch, &rng.derive(&[INIT_STREAM]))?;
            (Network::with_zero_head(dbn, classes), None)
        }
    };

    let tuned = fine_tune(strategy, start, splits, hyper, rng, bx.as_ref(), observer)?;
    Ok(TrainOutcome {
        model: TrainedModel {
            network: tuned.network,
            strategy,
            hyper: hyper.clone(),
            history: RunHistory {
                pretrain: pretrain_curves,
                epochs: tuned.epochs,
            },
        },
        best: tuned.best,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FineTuneOutcome {
    pub network: Network,
    pub epochs: Vec<EpochRecord>,
    pub best: Snapshot,
}

/// Mini-batch SGD for `strategy` from `start`, projecting onto `bx` after every
/// update when given.
pub fn fine_tune(
    strategy: StrategyId,
    start: Network,
    splits: &Splits,
    hyper: &Hyper,
    rng: &RngStream,
    bx: Option<&BoxConstraint>,
    observer: &mut dyn FnMut(usize, &Network),
) -> Result<FineTuneOutcome> {
    hyper.validate()?;
    splits.validate()?;
    check_len("network input", start.dbn.n_visible(), splits.train.dim().unwrap_or(0))?;
    check_len("network classes", splits.train.classes, start.classes())?;
    let mode = ExpectationMode::for_hyper(hyper, start.dbn.n_top());

    let mut net = start;
    let mut best = Snapshot {
        epoch: 0,
        valid_error: net.error_rate(&splits.valid)?,
        network: net.clone(),
    };
    let train = &splits.train;
    let mut epochs = Vec::with_capacity(hyper.finetune_epochs);

    for epoch in 0..hyper.finetune_epochs {
        let rho = hyper.rho.value(epoch);
        let mu = hyper.mu.value(epoch);
        let order = rng.derive(&[SHUFFLE_STREAM, epoch as u64]).permutation(train.len());
        let mut objective_sum = 0.0;
        let mut penalty_sum = 0.0;
        let mut n_batches = 0usize;
        for (b, chunk) in order.chunks(hyper.batch_size).enumerate() {
            let batch: Vec<(&[f64], usize)> = chunk
                .iter()
                .map(|&i| (train.inputs[i].as_slice(), train.labels[i]))
                .collect();
            let batch_rng = rng.derive(&[BATCH_STREAM, epoch as u64, b as u64]);
            let (value, grad) = match strategy {
                StrategyId::DbnFfn | StrategyId::FfnDbn | StrategyId::FfnDbnOpt => {
                    batch_backward(&net, &batch)?
                }
                StrategyId::ElDbn | StrategyId::ElDbnOpt => {
                    let vg = batch_expected_loss(&net, &batch, mode, &batch_rng)?;
                    (vg.value, vg.grad)
                }
                StrategyId::DbnPlusLoss => {
                    let vg =
                        dbn_plus_loss_gradient(&net, &batch, rho, hyper.cd_k, &mut batch_rng.clone())?;
                    (vg.value, vg.grad)
                }
                StrategyId::Bilevel => {
                    let p = bl_penalty(&net, &batch, mu, hyper.hvp, hyper.cd_k, &batch_rng)?;
                    penalty_sum += p.penalty_norm_sq;
                    (p.value, p.grad)
                }
            };
            net.descend(&grad, hyper.finetune_lr);
            if let Some(bx) = bx {
                bx.project_dbn(&mut net.dbn)?;
            }
            objective_sum += value;
            n_batches += 1;
        }
        let objective = objective_sum / n_batches as f64;
        if !objective.is_finite() {
            return Err(Error::NonFinite("training objective"));
        }
        observer(epoch, &net);

        let valid_error = net.error_rate(&splits.valid)?;
        let record = EpochRecord {
            epoch,
            objective,
            penalty_norm_sq: (strategy == StrategyId::Bilevel).then(|| penalty_sum / n_batches as f64),
            train_error: net.error_rate(train)?.unwrap_or(0.0),
            valid_error,
            test_error: net.error_rate(&splits.test)?,
            box_distance: bx.map(|b| b.distance(&net.dbn)),
        };
        let improved = match (valid_error, best.valid_error) {
            (Some(v), Some(b)) => v < b,
            _ => true,
        };
        if improved {
            best = Snapshot {
                epoch: epoch + 1,
                valid_error,
                network: net.clone(),
            };
        }
        epochs.push(record);
    }
    Ok(FineTuneOutcome {
        network: net,
        epochs,
        best,
    })
}
