//! Softmax output layer on top of the DBN-shaped sigmoid network, with
//! negative log-likelihood loss and backpropagation.

use serde::{Deserialize, Serialize};

use crate::dbn::{sigmoid_slope, Activations, DbnParams};
use crate::error::{check_len, Error, Result};
use crate::numerics::{argmax, log_sum_exp, softmax, Matrix};
use crate::rbm::{axpy, RbmGrad};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    /// Classes × top hidden size.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Inputs in `[0,1]^J` with class indices in `[0, classes)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledDataset {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        check_len("dataset labels", inputs.len(), labels.len())?;
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidClass {
                index: bad,
                classes,
            });
        }
        if let Some(first) = inputs.first() {
            for x in &inputs {
                check_len("dataset row", first.len(), x.len())?;
            }
        }
        Ok(Self {
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.inputs.first().map(Vec::len)
    }
}

impl ClassifierParams {
    pub fn zeros(classes: usize, hidden: usize) -> Self {
        Self {
            weights: Matrix::zeros(classes, hidden),
            bias: vec![0.0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn logits(&self, h: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.weights.matvec(h)?;
        axpy(&mut z, 1.0, &self.bias);
        Ok(z)
    }

    /// `-log softmax(U h + d)[y]`.
    pub fn forward_loss(&self, h: &[f64], y: usize) -> Result<f64> {
        self.check_class(y)?;
        let z = self.logits(h)?;
        Ok(nll_from_logits(&z, y))
    }

    /// Argmax class; ties go to the lowest index.
    pub fn predict(&self, h: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(h)?))
    }

    fn check_class(&self, y: usize) -> Result<()> {
        if y >= self.classes() {
            return Err(Error::InvalidClass {
                index: y,
                classes: self.classes(),
            });
        }
        Ok(())
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.weights.as_slice().to_vec();
        out.extend_from_slice(&self.bias);
        out
    }
}

/// Loss from precomputed logits; never negative.
pub(crate) fn nll_from_logits(z: &[f64], y: usize) -> f64 {
    let lse = log_sum_exp(z).expect("logits are nonempty");
    (lse - z[y]).max(0.0)
}

impl ClassifierGrad {
    pub fn zeros(classes: usize, hidden: usize) -> Self {
        Self {
            weights: Matrix::zeros(classes, hidden),
            bias: vec![0.0; classes],
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.weights.as_slice().to_vec();
        out.extend_from_slice(&self.bias);
        out
    }
}

/// A DBN stack with a softmax head: the feed-forward classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub dbn: DbnParams,
    pub head: ClassifierParams,
}

/// Gradient for every parameter of a [`Network`].
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGrad {
    pub layers: Vec<RbmGrad>,
    pub head: ClassifierGrad,
}

impl Network {
    pub fn new(dbn: DbnParams, head: ClassifierParams) -> Result<Self> {
        check_len("classifier input", dbn.n_top(), head.weights.cols())?;
        check_len("classifier bias", head.classes(), head.bias.len())?;
        Ok(Self { dbn, head })
    }

    /// Stack with a zero softmax head.
    pub fn with_zero_head(dbn: DbnParams, classes: usize) -> Self {
        let head = ClassifierParams::zeros(classes, dbn.n_top());
        Self { dbn, head }
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }

    pub fn loss(&self, x: &[f64], y: usize) -> Result<f64> {
        let acts = self.dbn.propagate(x)?;
        self.head.forward_loss(acts.top(), y)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let acts = self.dbn.propagate(x)?;
        self.head.predict(acts.top())
    }

    /// Fraction of mispredicted examples; `None` for an empty set.
    pub fn error_rate(&self, data: &LabeledDataset) -> Result<Option<f64>> {
        if data.is_empty() {
            return Ok(None);
        }
        let mut wrong = 0usize;
        for (x, &y) in data.inputs.iter().zip(&data.labels) {
            if self.predict(x)? != y {
                wrong += 1;
            }
        }
        Ok(Some(wrong as f64 / data.len() as f64))
    }

    /// Parameters in checkpoint order: per layer `W, b, c`, then `U`, `d`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.dbn.flatten();
        out.extend(self.head.flatten());
        out
    }

    pub fn num_params(&self) -> usize {
        self.dbn.num_params() + self.head.weights.as_slice().len() + self.head.bias.len()
    }

    pub fn from_flat(arch: &[usize], classes: usize, flat: &[f64]) -> Result<Self> {
        let top = *arch.last().ok_or(Error::Empty("architecture"))?;
        let n_head = classes * top + classes;
        if flat.len() < n_head {
            return Err(Error::DimensionMismatch {
                context: "flattened network",
                expected: n_head,
                actual: flat.len(),
            });
        }
        let split = flat.len() - n_head;
        let dbn = DbnParams::from_flat(arch, &flat[..split])?;
        let head = ClassifierParams {
            weights: Matrix::new(classes, top, flat[split..split + classes * top].to_vec())?,
            bias: flat[split + classes * top..].to_vec(),
        };
        Network::new(dbn, head)
    }

    /// `θ -= lr · g` for every parameter.
    pub fn descend(&mut self, grad: &NetworkGrad, lr: f64) {
        for (layer, g) in self.dbn.layers_mut().iter_mut().zip(&grad.layers) {
            layer.descend(g, lr);
        }
        axpy(self.head.weights.as_mut_slice(), -lr, grad.head.weights.as_slice());
        axpy(&mut self.head.bias, -lr, &grad.head.bias);
    }

    /// Loss and full gradient by backpropagation through the softmax head and
    /// every sigmoid layer. Visible biases get a zero gradient: they do not
    /// enter the feed-forward pass.
    pub fn backward(&self, x: &[f64], y: usize) -> Result<(f64, NetworkGrad)> {
        self.head.check_class(y)?;
        let acts = self.dbn.propagate(x)?;
        let top = acts.top();
        let z = self.head.logits(top)?;
        let loss = nll_from_logits(&z, y);
        let mut delta_out = softmax(&z)?;
        delta_out[y] -= 1.0;

        let mut head = ClassifierGrad::zeros(self.classes(), top.len());
        head.weights.add_outer(1.0, &delta_out, top);
        head.bias.copy_from_slice(&delta_out);

        let d_top = self.head.weights.t_matvec(&delta_out)?;
        let layers = self.backprop_hidden(x, &acts, d_top)?;
        Ok((loss, NetworkGrad { layers, head }))
    }

    /// Backpropagates `∂obj/∂μ^ℓ` through the sigmoid stack.
    pub fn backprop_hidden(
        &self,
        x: &[f64],
        acts: &Activations,
        d_top: Vec<f64>,
    ) -> Result<Vec<RbmGrad>> {
        let layers = self.dbn.layers();
        check_len("top gradient", self.dbn.n_top(), d_top.len())?;
        let mut grads: Vec<RbmGrad> = layers.iter().map(RbmGrad::zeros_like).collect();
        let mut d_mu = d_top;
        for k in (0..layers.len()).rev() {
            let delta: Vec<f64> = d_mu
                .iter()
                .zip(&acts.layers[k])
                .map(|(d, &m)| d * sigmoid_slope(m))
                .collect();
            let input = acts.layer_input(x, k);
            grads[k].weights.add_outer(1.0, &delta, input);
            grads[k].hidden_bias.copy_from_slice(&delta);
            if k > 0 {
                d_mu = layers[k].weights.t_matvec(&delta)?;
            }
        }
        Ok(grads)
    }
}

impl NetworkGrad {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net.dbn.layers().iter().map(RbmGrad::zeros_like).collect(),
            head: ClassifierGrad::zeros(net.classes(), net.dbn.n_top()),
        }
    }

    pub fn add_scaled(&mut self, s: f64, other: &NetworkGrad) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_scaled(s, b);
        }
        axpy(self.head.weights.as_mut_slice(), s, other.head.weights.as_slice());
        axpy(&mut self.head.bias, s, &other.head.bias);
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.scale(s);
        }
        self.head.weights.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        self.head.bias.iter_mut().for_each(|v| *v *= s);
    }

    /// Same order as [`Network::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.flatten());
        }
        out.extend(self.head.flatten());
        out
    }
}

/// Mean loss and mean gradient over a batch.
pub fn batch_backward(net: &Network, batch: &[(&[f64], usize)]) -> Result<(f64, NetworkGrad)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut total = NetworkGrad::zeros_like(net);
    let mut loss = 0.0;
    for &(x, y) in batch {
        let (l, g) = net.backward(x, y)?;
        loss += l;
        total.add_scaled(1.0, &g);
    }
    let w = 1.0 / batch.len() as f64;
    total.scale(w);
    Ok((loss * w, total))
}
