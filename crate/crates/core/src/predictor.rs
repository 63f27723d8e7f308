//! Classifier abstraction and the built-in reference network.
//!
//! The reference network is a small fully connected classifier:
//! `input -> dense -> ReLU -> dropout -> dense -> ReLU -> dropout -> dense -> softmax`.
//! It is trained with minibatch mixup and momentum SGD. The activations of the
//! last hidden layer double as the feature vector used for feature distances.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Purpose, RngStream};
use crate::types::{argmax, Dataset, SoftLabel};

/// Classifier `f: input -> class probabilities`.
///
/// Implementations must be read-only during prediction so a single instance
/// can serve concurrent pipelines.
pub trait Predictor: Send + Sync {
    fn class_count(&self) -> usize;

    /// Number of input values expected per sample.
    fn input_len(&self) -> usize;

    fn predict(&self, x: &[f64]) -> Result<SoftLabel>;

    fn features(&self, x: &[f64]) -> Result<FeatureVector>;

    /// Forward pass with fresh Bernoulli(1 - p) masks on every hidden unit,
    /// surviving units rescaled by 1 / (1 - p).
    fn predict_stochastic(&self, x: &[f64], dropout: f64, rng: &mut RngStream)
        -> Result<SoftLabel>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs at which the learning rate is divided by `lr_decay`. Empty means
    /// "half and three quarters of the way through".
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub momentum: f64,
    pub mixup_alpha: f64,
    pub dropout: f64,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            learning_rate: 0.01,
            lr_milestones: Vec::new(),
            lr_decay: 10.0,
            momentum: 0.9,
            mixup_alpha: 0.2,
            dropout: 0.5,
            hidden: vec![64, 64],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.lr_decay > 0.0) {
            return bad("lr_decay must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.mixup_alpha >= 0.0) {
            return bad("mixup_alpha must be non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        Ok(())
    }

    pub fn milestones(&self) -> Vec<usize> {
        if self.lr_milestones.is_empty() {
            vec![self.epochs / 2, self.epochs * 3 / 4]
        } else {
            self.lr_milestones.clone()
        }
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones().iter().filter(|&&m| epoch >= m).count();
        self.learning_rate / self.lr_decay.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    inputs: usize,
    outputs: usize,
    // outputs x inputs, row-major
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

struct Trace {
    // input to each dense layer
    inputs: Vec<Vec<f64>>,
    // pre-activations of hidden layers
    pre: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

/// Multiplicative dropout masks, one vector per hidden layer.
pub type DropoutMasks = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    dropout: f64,
    seed: u64,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

impl Mlp {
    /// He-normal weights, zero biases.
    pub fn new(
        input_len: usize,
        hidden: &[usize],
        class_count: usize,
        dropout: f64,
        seed: u64,
    ) -> Self {
        let mut rng = RngStream::for_purpose(seed, Purpose::Training, 0, 0);
        let mut dims = vec![input_len];
        dims.extend_from_slice(hidden);
        dims.push(class_count);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (inputs, outputs) = (w[0], w[1]);
                let std = (2.0 / inputs as f64).sqrt();
                let weights = (0..inputs * outputs)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * std
                    })
                    .collect();
                Dense {
                    inputs,
                    outputs,
                    weights,
                    bias: vec![0.0; outputs],
                }
            })
            .collect();
        Self {
            layers,
            dropout,
            seed,
        }
    }

    /// Layer widths from input to output.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].inputs];
        dims.extend(self.layers.iter().map(|l| l.outputs));
        dims
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::ShapeMismatch {
                expected: self.param_count(),
                found: params.len(),
            });
        }
        let mut rest = params;
        for l in &mut self.layers {
            let (w, r) = rest.split_at(l.weights.len());
            l.weights.copy_from_slice(w);
            let (b, r) = r.split_at(l.bias.len());
            l.bias.copy_from_slice(b);
            rest = r;
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.layers[0].inputs {
            return Err(Error::ShapeMismatch {
                expected: self.layers[0].inputs,
                found: x.len(),
            });
        }
        Ok(())
    }

    fn forward(&self, x: &[f64], masks: Option<&DropoutMasks>) -> Trace {
        let hidden = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(hidden);
        let mut a = x.to_vec();
        for (i, layer) in self.layers[..hidden].iter().enumerate() {
            let z = layer.forward(&a);
            inputs.push(std::mem::take(&mut a));
            a = z.iter().map(|v| v.max(0.0)).collect();
            if let Some(m) = masks {
                for (v, k) in a.iter_mut().zip(&m[i]) {
                    *v *= k;
                }
            }
            pre.push(z);
        }
        let logits = self.layers[hidden].forward(&a);
        inputs.push(a);
        Trace {
            inputs,
            pre,
            logits,
        }
    }

    /// Draws dropout masks for one forward pass.
    pub fn sample_masks<R: Rng + ?Sized>(&self, dropout: f64, rng: &mut R) -> DropoutMasks {
        let keep = 1.0 - dropout;
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| {
                (0..l.outputs)
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect()
            })
            .collect()
    }

    /// Softmax cross-entropy against a soft target and its gradient with
    /// respect to [`Mlp::params`], accumulated into `grad`.
    fn accumulate_gradient(
        &self,
        x: &[f64],
        target: &[f64],
        masks: Option<&DropoutMasks>,
        grad: &mut [f64],
    ) -> f64 {
        let trace = self.forward(x, masks);
        let logp = log_softmax(&trace.logits);
        let loss = -target.iter().zip(&logp).map(|(t, lp)| t * lp).sum::<f64>();
        let tsum: f64 = target.iter().sum();
        // d loss / d logits = softmax · sum(t) - t
        let mut delta: Vec<f64> = logp
            .iter()
            .zip(target)
            .map(|(lp, t)| lp.exp() * tsum - t)
            .collect();

        let offsets: Vec<usize> = self
            .layers
            .iter()
            .scan(0, |acc, l| {
                let start = *acc;
                *acc += l.param_count();
                Some(start)
            })
            .collect();

        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let input = &trace.inputs[li];
            let base = offsets[li];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &mut grad[base + o * layer.inputs..base + (o + 1) * layer.inputs];
                for (g, v) in row.iter_mut().zip(input) {
                    *g += d * v;
                }
            }
            let bias_base = base + layer.weights.len();
            for (o, d) in delta.iter().enumerate() {
                grad[bias_base + o] += d;
            }
            if li == 0 {
                break;
            }
            let mut back = vec![0.0; layer.inputs];
            for (o, d) in delta.iter().enumerate() {
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (b, w) in back.iter_mut().zip(row) {
                    *b += d * w;
                }
            }
            let z = &trace.pre[li - 1];
            for (i, b) in back.iter_mut().enumerate() {
                let mut g = if z[i] > 0.0 { 1.0 } else { 0.0 };
                if let Some(m) = masks {
                    g *= m[li - 1][i];
                }
                *b *= g;
            }
            delta = back;
        }
        loss
    }

    /// Mean loss over `(input, soft target)` pairs, no dropout.
    pub fn batch_loss(&self, batch: &[(Vec<f64>, Vec<f64>)]) -> f64 {
        batch
            .iter()
            .map(|(x, t)| {
                let logp = log_softmax(&self.forward(x, None).logits);
                -t.iter().zip(&logp).map(|(t, lp)| t * lp).sum::<f64>()
            })
            .sum::<f64>()
            / batch.len() as f64
    }

    /// Mean loss and its analytic gradient over a batch, no dropout.
    pub fn batch_gradient(&self, batch: &[(Vec<f64>, Vec<f64>)]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.param_count()];
        let mut loss = 0.0;
        for (x, t) in batch {
            loss += self.accumulate_gradient(x, t, None, &mut grad);
        }
        let n = batch.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        (loss / n, grad)
    }
}

impl Predictor for Mlp {
    fn class_count(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    fn input_len(&self) -> usize {
        self.layers[0].inputs
    }

    fn predict(&self, x: &[f64]) -> Result<SoftLabel> {
        self.check_input(x)?;
        Ok(SoftLabel::new(softmax(&self.forward(x, None).logits)))
    }

    fn features(&self, x: &[f64]) -> Result<FeatureVector> {
        self.check_input(x)?;
        let mut trace = self.forward(x, None);
        Ok(FeatureVector(trace.inputs.pop().unwrap_or_default()))
    }

    fn predict_stochastic(
        &self,
        x: &[f64],
        dropout: f64,
        rng: &mut RngStream,
    ) -> Result<SoftLabel> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout must lie in [0, 1), got {dropout}"
            )));
        }
        if dropout == 0.0 {
            return self.predict(x);
        }
        self.check_input(x)?;
        let masks = self.sample_masks(dropout, rng);
        Ok(SoftLabel::new(softmax(
            &self.forward(x, Some(&masks)).logits,
        )))
    }
}

/// Trains the reference network with minibatch mixup: each batch is mixed
/// with a shuffled copy of itself using one `λ ~ Beta(α, α)` per batch, and
/// the loss is cross-entropy against the equally mixed soft labels. `α = 0`
/// disables mixing.
pub fn train_reference(train: &Dataset, cfg: &TrainConfig) -> Result<Mlp> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut model = Mlp::new(
        train.shape().len(),
        &cfg.hidden,
        train.class_count(),
        cfg.dropout,
        cfg.seed,
    );
    let mut rng = RngStream::for_purpose(cfg.seed, Purpose::Training, 0, 1);
    let beta = if cfg.mixup_alpha > 0.0 {
        Some(Beta::new(cfg.mixup_alpha, cfg.mixup_alpha).map_err(|e| {
            Error::InvalidArgument(format!("mixup alpha {}: {e}", cfg.mixup_alpha))
        })?)
    } else {
        None
    };
    let mut params = model.params();
    let mut velocity = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let lambda = match &beta {
                Some(b) => b.sample(&mut rng),
                None => 1.0,
            };
            let mut partners = batch.to_vec();
            partners.shuffle(&mut rng);

            let mut grad = vec![0.0; params.len()];
            let mut loss = 0.0;
            for (&i, &j) in batch.iter().zip(&partners) {
                let (a, b) = (train.sample(i), train.sample(j));
                let x: Vec<f64> = a
                    .data
                    .iter()
                    .zip(&b.data)
                    .map(|(u, v)| lambda * u + (1.0 - lambda) * v)
                    .collect();
                let t: Vec<f64> = a
                    .label
                    .values()
                    .iter()
                    .zip(b.label.values())
                    .map(|(u, v)| lambda * u + (1.0 - lambda) * v)
                    .collect();
                let masks = (cfg.dropout > 0.0).then(|| model.sample_masks(cfg.dropout, &mut rng));
                loss += model.accumulate_gradient(&x, &t, masks.as_ref(), &mut grad);
            }
            let n = batch.len() as f64;
            for ((p, v), g) in params.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = cfg.momentum * *v + g / n;
                *p -= lr * *v;
            }
            model.set_params(&params)?;
            epoch_loss += loss;
        }
        if !epoch_loss.is_finite() || params.iter().any(|p| !p.is_finite()) {
            return Err(Error::TrainingDiverged { epoch });
        }
        log::debug!(
            "epoch {epoch}: lr {lr:.2e}, loss {:.4}",
            epoch_loss / train.len() as f64
        );
    }
    Ok(model)
}

/// Fraction of samples whose argmax prediction matches the label.
pub fn accuracy<P: Predictor + ?Sized>(model: &P, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let mut correct = 0usize;
    for s in ds.samples() {
        if argmax(model.predict(&s.data)?.values())? == s.class() {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

const WEIGHT_MAGIC: &[u8; 8] = b"UQWEIGHT";
const WEIGHT_VERSION: u32 = 1;

impl Mlp {
    /// Binary layout, little-endian: magic `UQWEIGHT`, u32 version, u32 count
    /// of layer widths, the widths as u32, u64 seed, f64 dropout, then every
    /// parameter as f64 in [`Mlp::params`] order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let dims = self.dims();
        let mut out = Vec::with_capacity(32 + dims.len() * 4 + self.param_count() * 8);
        out.extend_from_slice(WEIGHT_MAGIC);
        out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in &dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.dropout.to_le_bytes());
        for p in self.params() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| Error::WeightFormat(m.to_string());
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(err("truncated"));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        if take(8)? != WEIGHT_MAGIC {
            return Err(err("bad magic"));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        let version = u32_at(take(4)?);
        if version != WEIGHT_VERSION {
            return Err(Error::WeightFormat(format!("unsupported version {version}")));
        }
        let n_dims = u32_at(take(4)?) as usize;
        if !(3..=64).contains(&n_dims) {
            return Err(err("implausible layer count"));
        }
        let mut dims = Vec::with_capacity(n_dims);
        for _ in 0..n_dims {
            dims.push(u32_at(take(4)?) as usize);
        }
        if dims.contains(&0) {
            return Err(err("zero-width layer"));
        }
        let seed = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let dropout = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let mut model = Mlp::new(
            dims[0],
            &dims[1..n_dims - 1],
            dims[n_dims - 1],
            dropout,
            seed,
        );
        let count = model.param_count();
        let body = take(count * 8)?;
        let params: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if !cur.is_empty() {
            return Err(err("trailing bytes"));
        }
        model.set_params(&params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
