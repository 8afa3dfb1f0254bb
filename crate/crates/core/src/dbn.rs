//! Stacks of RBMs: greedy layer-wise pretraining and deterministic upward
//! propagation.
//!
//! Layer `k` maps `h^{k-1}` to `h^k` with `h^0 = x`. Upper layers are trained
//! on, and propagate, mean activations rather than samples.

use crate::error::{check_len, Error, Result};
use crate::hyper::Hyper;
use crate::numerics::RngStream;
use crate::rbm::RbmParams;

const INIT_STREAM: u64 = 0x1417;
const PRETRAIN_STREAM: u64 = 0x9e7a;

#[derive(Clone, Debug, PartialEq)]
pub struct DbnParams {
    layers: Vec<RbmParams>,
}

/// Mean activations `μ^1 … μ^ℓ` for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct Activations {
    pub layers: Vec<Vec<f64>>,
}

impl Activations {
    pub fn top(&self) -> &[f64] {
        self.layers.last().expect("a stack has at least one layer")
    }

    /// Input seen by layer `k` (0-based): `x` for the first layer, `μ^k`
    /// otherwise.
    pub fn layer_input<'a>(&'a self, x: &'a [f64], k: usize) -> &'a [f64] {
        if k == 0 {
            x
        } else {
            &self.layers[k - 1]
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOutcome {
    pub params: DbnParams,
    /// Per layer, per epoch: mean reconstruction cross-entropy on that layer's
    /// training inputs.
    pub reconstruction: Vec<Vec<f64>>,
}

impl DbnParams {
    pub fn new(layers: Vec<RbmParams>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("DBN layer list"));
        }
        for pair in layers.windows(2) {
            check_len("DBN layer chain", pair[0].n_hidden(), pair[1].n_visible())?;
        }
        Ok(Self { layers })
    }

    /// Random initialization for `arch = [visible, hidden_1, …, hidden_ℓ]`.
    /// Layer `k` draws from its own sub-stream so its initial weights do not
    /// depend on the other layers.
    pub fn init(arch: &[usize], rng: &RngStream) -> Result<Self> {
        check_arch(arch)?;
        let layers = arch
            .windows(2)
            .enumerate()
            .map(|(k, dims)| {
                RbmParams::init(dims[0], dims[1], &mut rng.derive(&[INIT_STREAM, k as u64]))
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[RbmParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [RbmParams] {
        &mut self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn n_visible(&self) -> usize {
        self.layers[0].n_visible()
    }

    pub fn n_top(&self) -> usize {
        self.layers[self.layers.len() - 1].n_hidden()
    }

    /// `[visible, hidden_1, …, hidden_ℓ]`.
    pub fn architecture(&self) -> Vec<usize> {
        std::iter::once(self.n_visible())
            .chain(self.layers.iter().map(RbmParams::n_hidden))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(RbmParams::num_params).sum()
    }

    /// All layer parameters, each in `W, b, c` order, bottom layer first.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.flatten());
        }
        out
    }

    pub fn from_flat(arch: &[usize], flat: &[f64]) -> Result<Self> {
        check_arch(arch)?;
        let mut offset = 0;
        let mut layers = Vec::with_capacity(arch.len() - 1);
        for dims in arch.windows(2) {
            let n = dims[0] * dims[1] + dims[0] + dims[1];
            if offset + n > flat.len() {
                return Err(Error::DimensionMismatch {
                    context: "flattened DBN",
                    expected: offset + n,
                    actual: flat.len(),
                });
            }
            layers.push(RbmParams::from_flat(dims[0], dims[1], &flat[offset..offset + n])?);
            offset += n;
        }
        check_len("flattened DBN", offset, flat.len())?;
        Self::new(layers)
    }

    /// Deterministic mean-field pass `μ^k = σ(c_k + W_k μ^{k-1})`.
    pub fn propagate(&self, x: &[f64]) -> Result<Activations> {
        check_len("DBN input", self.n_visible(), x.len())?;
        let mut layers: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            let input = if k == 0 { x } else { &layers[k - 1] };
            let mu = layer.prob_h_given_x(input)?;
            layers.push(mu);
        }
        Ok(Activations { layers })
    }

    /// Bernoulli means of `p(h^ℓ | h^{ℓ-1} = μ^{ℓ-1})`, the factorized top
    /// conditional used by the expected-loss objectives.
    pub fn top_conditional(&self, x: &[f64]) -> Result<Vec<f64>> {
        let acts = self.propagate(x)?;
        Ok(acts.layers.into_iter().next_back().expect("nonempty"))
    }

    /// Top conditional given the activations entering the top layer directly.
    pub fn top_conditional_from_below(&self, below: &[f64]) -> Result<Vec<f64>> {
        self.layers[self.layers.len() - 1].prob_h_given_x(below)
    }

    /// `log p(x)` approximated by the first-layer RBM marginal
    /// `log Σ_{h^1} p(x, h^1)`; exact enumeration, so the first layer must fit
    /// the enumeration guard.
    pub fn log_px_approx(&self, x: &[f64]) -> Result<f64> {
        self.layers[0].exact_log_px(x)
    }
}

fn check_arch(arch: &[usize]) -> Result<()> {
    if arch.len() < 2 {
        return Err(Error::InvalidArgument(
            "architecture needs an input size and at least one hidden layer".into(),
        ));
    }
    if arch.contains(&0) {
        return Err(Error::InvalidArgument("layer sizes must be positive".into()));
    }
    Ok(())
}

/// Greedy layer-wise pretraining by CD-k mini-batch SGD.
///
/// `arch = [visible, hidden_1, …, hidden_ℓ]`. Layer 1 trains on `data`; layer
/// `k` trains on the mean activations of the already-trained, frozen layers
/// below it. Each layer owns a sub-stream of `rng` for its initialization,
/// shuffling and sampling.
pub fn pretrain_layerwise<X: AsRef<[f64]>>(
    arch: &[usize],
    data: &[X],
    hyper: &Hyper,
    rng: &RngStream,
) -> Result<PretrainOutcome> {
    let mut params = DbnParams::init(arch, rng)?;
    if data.is_empty() {
        return Err(Error::Empty("pretraining data"));
    }
    for x in data {
        check_len("pretraining input", arch[0], x.as_ref().len())?;
    }
    if hyper.batch_size == 0 || hyper.cd_k == 0 {
        return Err(Error::InvalidArgument("batch_size and cd_k must be positive".into()));
    }

    let mut inputs: Vec<Vec<f64>> = data.iter().map(|x| x.as_ref().to_vec()).collect();
    let mut reconstruction = Vec::with_capacity(params.depth());
    for k in 0..params.depth() {
        let stream = rng.derive(&[PRETRAIN_STREAM, k as u64]);
        let layer = &mut params.layers[k];
        let curve = train_layer(layer, &inputs, hyper, &stream)?;
        reconstruction.push(curve);
        if k + 1 < arch.len() - 1 {
            inputs = inputs
                .iter()
                .map(|x| layer.prob_h_given_x(x))
                .collect::<Result<_>>()?;
        }
    }
    Ok(PretrainOutcome {
        params,
        reconstruction,
    })
}

fn train_layer(
    layer: &mut RbmParams,
    inputs: &[Vec<f64>],
    hyper: &Hyper,
    stream: &RngStream,
) -> Result<Vec<f64>> {
    let mut curve = Vec::with_capacity(hyper.pretrain_epochs);
    for epoch in 0..hyper.pretrain_epochs {
        let order = stream.derive(&[1, epoch as u64]).permutation(inputs.len());
        for (b, chunk) in order.chunks(hyper.batch_size).enumerate() {
            let batch: Vec<&[f64]> = chunk.iter().map(|&i| inputs[i].as_slice()).collect();
            let mut chain = stream.derive(&[2, epoch as u64, b as u64]);
            let grad = layer.cd_k_grad(&batch, hyper.cd_k, &mut chain)?;
            layer.descend(&grad, hyper.pretrain_lr);
        }
        let mut total = 0.0;
        for x in inputs {
            total += layer.reconstruction_cross_entropy(x)?;
        }
        let mean = total / inputs.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite("pretraining reconstruction error"));
        }
        curve.push(mean);
    }
    Ok(curve)
}

/// Logistic derivative from an activation value.
#[inline]
pub(crate) fn sigmoid_slope(mu: f64) -> f64 {
    mu * (1.0 - mu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;
    use crate::rbm::BinaryStates;

    fn scalar_layer(w: f64) -> RbmParams {
        RbmParams::new(Matrix::new(1, 1, vec![w]).unwrap(), vec![0.0], vec![0.0]).unwrap()
    }

    fn random_stack(arch: &[usize], seed: u64) -> DbnParams {
        let mut rng = RngStream::new(seed, 5);
        let layers = arch
            .windows(2)
            .map(|d| {
                RbmParams::new(
                    Matrix::from_fn(d[1], d[0], |_, _| rng.standard_normal()),
                    (0..d[0]).map(|_| rng.standard_normal()).collect(),
                    (0..d[1]).map(|_| rng.standard_normal()).collect(),
                )
                .unwrap()
            })
            .collect();
        DbnParams::new(layers).unwrap()
    }

    #[test]
    fn construction_checks_chain() {
        assert!(DbnParams::new(vec![]).is_err());
        let bad = DbnParams::new(vec![RbmParams::zeros(4, 3), RbmParams::zeros(2, 2)]);
        assert!(matches!(bad, Err(Error::DimensionMismatch { .. })));
        assert!(DbnParams::init(&[4], &RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn propagate_examples() {
        let zero = DbnParams::new(vec![RbmParams::zeros(3, 2), RbmParams::zeros(2, 4)]).unwrap();
        let acts = zero.propagate(&[1.0, 0.0, 0.5]).unwrap();
        assert!(acts.layers.iter().flatten().all(|&m| m == 0.5));

        let single = random_stack(&[4, 3], 2);
        let x = [0.1, 0.9, 1.0, 0.0];
        assert_eq!(
            single.propagate(&x).unwrap().layers[0],
            single.layers()[0].prob_h_given_x(&x).unwrap()
        );

        let two = DbnParams::new(vec![scalar_layer(3f64.ln()), scalar_layer(0.0)]).unwrap();
        let acts = two.propagate(&[1.0]).unwrap();
        assert!((acts.layers[0][0] - 0.75).abs() < 1e-15);
        assert_eq!(acts.layers[1], vec![0.5]);
        assert!(two.propagate(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn top_conditional_examples() {
        let single = random_stack(&[5, 3], 4);
        let x = [1.0, 0.0, 0.0, 1.0, 1.0];
        assert_eq!(
            single.top_conditional(&x).unwrap(),
            single.layers()[0].prob_h_given_x(&x).unwrap()
        );

        let deep = random_stack(&[5, 4, 10], 6);
        let top = deep.top_conditional(&x).unwrap();
        assert_eq!(top.as_slice(), deep.propagate(&x).unwrap().top());

        let total: f64 = BinaryStates::new(10)
            .map(|h| {
                h.iter()
                    .zip(&top)
                    .map(|(&hi, &m)| if hi == 1.0 { m } else { 1.0 - m })
                    .product::<f64>()
            })
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn top_conditional_depends_only_on_layer_below() {
        let d = random_stack(&[4, 3, 2], 7);
        let x = [0.3, 0.7, 0.0, 1.0];
        let below = d.propagate(&x).unwrap().layers[0].clone();
        let mut other = d.clone();
        other.layers_mut()[0].weights.set(0, 0, 42.0);
        assert_eq!(
            d.top_conditional_from_below(&below).unwrap(),
            other.top_conditional_from_below(&below).unwrap()
        );
        assert_eq!(d.top_conditional(&x).unwrap(), d.top_conditional_from_below(&below).unwrap());
    }

    #[test]
    fn log_px_approx_examples() {
        let single = random_stack(&[4, 3], 9);
        let x = [1.0, 0.0, 1.0, 1.0];
        assert_eq!(
            single.log_px_approx(&x).unwrap(),
            single.layers()[0].exact_log_px(&x).unwrap()
        );
        let zero = DbnParams::new(vec![RbmParams::zeros(2, 3), RbmParams::zeros(3, 2)]).unwrap();
        for x in BinaryStates::new(2) {
            assert!((zero.log_px_approx(&x).unwrap() - 0.25f64.ln()).abs() < 1e-14);
        }
        for upper in [0.0, 5.0, -3.0] {
            let d = DbnParams::new(vec![scalar_layer(2f64.ln()), scalar_layer(upper)]).unwrap();
            assert!((d.log_px_approx(&[1.0]).unwrap() - 0.6f64.ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn propagation_is_lipschitz_in_first_layer() {
        let d = random_stack(&[6, 4], 12);
        let bound = d.layers()[0].weights.norm_inf() / 4.0;
        let mut rng = RngStream::new(1, 1);
        for _ in 0..50 {
            let x: Vec<f64> = (0..6).map(|_| rng.uniform()).collect();
            let eta = 1e-3;
            let y: Vec<f64> = x.iter().map(|v| v + rng.uniform_range(-eta, eta)).collect();
            let a = d.propagate(&x).unwrap();
            let b = d.propagate(&y).unwrap();
            let diff = a.layers[0]
                .iter()
                .zip(&b.layers[0])
                .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
            assert!(diff <= eta * bound + 1e-12);
        }
    }

    fn tiny_data() -> Vec<Vec<f64>> {
        vec![
            vec![1.0, 1.0, 0.0, 0.0],
            vec![1.0, 1.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0, 1.0],
            vec![0.0, 1.0, 1.0, 1.0],
        ]
    }

    fn mean_nll(layer: &RbmParams, data: &[Vec<f64>]) -> f64 {
        data.iter().map(|x| -layer.exact_log_px(x).unwrap()).sum::<f64>() / data.len() as f64
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let rng = RngStream::new(3, 0);
        let hyper = Hyper {
            pretrain_epochs: 0,
            ..Hyper::default()
        };
        let out = pretrain_layerwise(&[4, 3, 2], &tiny_data(), &hyper, &rng).unwrap();
        assert_eq!(out.params, DbnParams::init(&[4, 3, 2], &rng).unwrap());
        assert!(out.reconstruction.iter().all(Vec::is_empty));
    }

    #[test]
    fn pretraining_lowers_exact_nll() {
        let rng = RngStream::new(21, 0);
        let hyper = Hyper {
            pretrain_epochs: 200,
            pretrain_lr: 0.05,
            batch_size: 2,
            ..Hyper::default()
        };
        let data = tiny_data();
        let before = mean_nll(&DbnParams::init(&[4, 3], &rng).unwrap().layers()[0], &data);
        let out = pretrain_layerwise(&[4, 3], &data, &hyper, &rng).unwrap();
        let after = mean_nll(&out.params.layers()[0], &data);
        assert!(after <= before, "{after} > {before}");
        assert_eq!(out.reconstruction[0].len(), 200);
    }

    #[test]
    fn pretraining_is_deterministic_and_layer_local() {
        let rng = RngStream::new(5, 0);
        let hyper = Hyper {
            pretrain_epochs: 5,
            batch_size: 2,
            ..Hyper::default()
        };
        let data = tiny_data();
        let a = pretrain_layerwise(&[4, 3, 2], &data, &hyper, &rng).unwrap();
        let b = pretrain_layerwise(&[4, 3, 2], &data, &hyper, &rng).unwrap();
        assert_eq!(a, b);
        let c = pretrain_layerwise(&[4, 3, 5], &data, &hyper, &rng).unwrap();
        assert_eq!(a.params.layers()[0], c.params.layers()[0]);
        assert_ne!(a.params.layers()[1].n_hidden(), c.params.layers()[1].n_hidden());
        let other_seed = pretrain_layerwise(&[4, 3, 2], &data, &hyper, &RngStream::new(6, 0)).unwrap();
        assert_ne!(a.params.layers()[0], other_seed.params.layers()[0]);
    }

    #[test]
    fn pretraining_rejects_broken_dimensions() {
        let hyper = Hyper::default();
        let rng = RngStream::new(0, 0);
        assert!(pretrain_layerwise(&[5, 3], &tiny_data(), &hyper, &rng).is_err());
    }

    #[test]
    fn flatten_round_trips() {
        let d = random_stack(&[4, 3, 2], 1);
        assert_eq!(DbnParams::from_flat(&d.architecture(), &d.flatten()).unwrap(), d);
        assert!(DbnParams::from_flat(&[4, 3, 2], &d.flatten()[1..]).is_err());
    }
}
