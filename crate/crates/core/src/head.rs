//! The trainable classification head: dropout, one dense layer, softmax.
//!
//! Trained with Adam on mean categorical cross-entropy over mini-batches of
//! frozen backbone features.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{head_param_count, FeatureMatrix};
use crate::error::{Error, Result};
use crate::seed;

/// Lower clip applied to probabilities before taking the log.
pub const PROB_CLIP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Stop once validation loss fails to improve for this many epochs.
    pub early_stopping_patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 16,
            dropout_rate: 0.25,
            epochs: 30,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            early_stopping_patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0".into());
        }
        if self.early_stopping_patience == Some(0) {
            return bad("early_stopping_patience must be >= 1 when set".into());
        }
        Ok(())
    }
}

/// One-hot target, stored as its hot index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OneHotTarget {
    class: usize,
    num_classes: usize,
}

impl OneHotTarget {
    pub fn new(class: usize, num_classes: usize) -> Result<Self> {
        if class >= num_classes {
            return Err(Error::InvalidInput(format!(
                "target class {class} out of range for {num_classes} classes"
            )));
        }
        Ok(Self { class, num_classes })
    }

    pub fn class(&self) -> usize {
        self.class
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.num_classes];
        v[self.class] = 1.0;
        v
    }
}

/// Inverted-dropout keep mask for one input vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    keep: Vec<bool>,
    rate: f64,
}

impl DropoutMask {
    pub fn new(keep: Vec<bool>, rate: f64) -> Self {
        Self { keep, rate }
    }

    pub fn sample<R: Rng + ?Sized>(dim: usize, rate: f64, rng: &mut R) -> Self {
        let keep = (0..dim).map(|_| rate == 0.0 || rng.random::<f64>() >= rate).collect();
        Self { keep, rate }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    /// Survivors are scaled by 1 / (1 - rate).
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let scale = 1.0 / (1.0 - self.rate);
        x.iter()
            .zip(&self.keep)
            .map(|(&v, &k)| if k { v * scale } else { 0.0 })
            .collect()
    }
}

/// Dense layer weights (D x C, row-major) and bias (C).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxHead {
    feature_dim: usize,
    num_classes: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl SoftmaxHead {
    pub fn zeros(feature_dim: usize, num_classes: usize) -> Self {
        Self {
            feature_dim,
            num_classes,
            weights: vec![0.0; feature_dim * num_classes],
            bias: vec![0.0; num_classes],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(feature_dim: usize, num_classes: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (feature_dim + num_classes) as f64).sqrt();
        let weights = (0..feature_dim * num_classes)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Self {
            feature_dim,
            num_classes,
            weights,
            bias: vec![0.0; num_classes],
        }
    }

    pub fn from_parts(feature_dim: usize, num_classes: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != feature_dim * num_classes || bias.len() != num_classes {
            return Err(Error::Shape(format!(
                "head {feature_dim}x{num_classes} needs {} weights and {num_classes} biases, got {} and {}",
                feature_dim * num_classes,
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("head parameters must be finite".into()));
        }
        Ok(Self {
            feature_dim,
            num_classes,
            weights,
            bias,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn check_input(&self, x: &[f64], mask: Option<&DropoutMask>) -> Result<()> {
        if x.len() != self.feature_dim {
            return Err(Error::Shape(format!(
                "head expects {} features, got {}",
                self.feature_dim,
                x.len()
            )));
        }
        if let Some(m) = mask {
            if m.len() != self.feature_dim {
                return Err(Error::Shape(format!(
                    "dropout mask has length {}, expected {}",
                    m.len(),
                    self.feature_dim
                )));
            }
        }
        Ok(())
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.bias.clone();
        for (d, &xd) in x.iter().enumerate() {
            if xd == 0.0 {
                continue;
            }
            let row = &self.weights[d * self.num_classes..(d + 1) * self.num_classes];
            for (zc, &w) in z.iter_mut().zip(row) {
                *zc += w * xd;
            }
        }
        z
    }

    /// Class probabilities for one feature vector. A mask means training
    /// mode.
    pub fn forward(&self, x: &[f64], mask: Option<&DropoutMask>) -> Result<Vec<f64>> {
        self.check_input(x, mask)?;
        Ok(match mask {
            Some(m) => softmax(&self.logits(&m.apply(x))),
            None => softmax(&self.logits(x)),
        })
    }

    /// Row-major N x C probabilities for every row of `features`.
    pub fn predict_proba(&self, features: &FeatureMatrix) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(features.rows() * self.num_classes);
        let mut x = vec![0.0; features.cols()];
        for i in 0..features.rows() {
            for (xd, &v) in x.iter_mut().zip(features.row(i)) {
                *xd = v as f64;
            }
            out.extend(self.forward(&x, None)?);
        }
        Ok(out)
    }
}

/// Softmax with max-subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-sum(y_i * ln(p_i))` with p clipped to [1e-12, 1].
pub fn cce_loss(probs: &[f64], target: &OneHotTarget) -> f64 {
    -probs[target.class].clamp(PROB_CLIP, 1.0).ln()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// D x C, row-major like the head weights.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradients {
    pub fn max_abs(&self) -> f64 {
        self.weights.iter().chain(&self.bias).fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub loss: f64,
    pub correct: usize,
    pub grads: Gradients,
}

/// Mean loss and its analytic gradient over a batch.
///
/// Per sample the logit gradient is `probs - y`; weight gradients are the
/// outer product with the (dropped-out) input, averaged over the batch.
pub fn batch_gradients(
    head: &SoftmaxHead,
    inputs: &[&[f64]],
    targets: &[usize],
    masks: Option<&[DropoutMask]>,
) -> Result<BatchOutcome> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::Shape(format!(
            "batch has {} inputs and {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    if let Some(m) = masks {
        if m.len() != inputs.len() {
            return Err(Error::Shape(format!("{} dropout masks for {} inputs", m.len(), inputs.len())));
        }
    }
    let c = head.num_classes;
    let mut dw = vec![0.0; head.weights.len()];
    let mut db = vec![0.0; c];
    let mut loss = 0.0;
    let mut correct = 0;
    for (i, (&x, &t)) in inputs.iter().zip(targets).enumerate() {
        let mask = masks.map(|m| &m[i]);
        head.check_input(x, mask)?;
        let target = OneHotTarget::new(t, c)?;
        let xt = match mask {
            Some(m) => m.apply(x),
            None => x.to_vec(),
        };
        let probs = softmax(&head.logits(&xt));
        loss += cce_loss(&probs, &target);
        if argmax(&probs) == t {
            correct += 1;
        }
        let mut dlogits = probs;
        dlogits[t] -= 1.0;
        for (d, &xd) in xt.iter().enumerate() {
            if xd == 0.0 {
                continue;
            }
            for (g, &dl) in dw[d * c..(d + 1) * c].iter_mut().zip(&dlogits) {
                *g += xd * dl;
            }
        }
        for (g, &dl) in db.iter_mut().zip(&dlogits) {
            *g += dl;
        }
    }
    let n = inputs.len() as f64;
    dw.iter_mut().chain(db.iter_mut()).for_each(|g| *g /= n);
    Ok(BatchOutcome {
        loss: loss / n,
        correct,
        grads: Gradients { weights: dw, bias: db },
    })
}

/// Analytic gradient of the mean batch loss.
pub fn gradients(
    head: &SoftmaxHead,
    inputs: &[&[f64]],
    targets: &[usize],
    masks: Option<&[DropoutMask]>,
) -> Result<Gradients> {
    batch_gradients(head, inputs, targets, masks).map(|o| o.grads)
}

/// Mean loss over a batch, without gradients.
pub fn batch_loss(head: &SoftmaxHead, inputs: &[&[f64]], targets: &[usize], masks: Option<&[DropoutMask]>) -> Result<f64> {
    batch_gradients(head, inputs, targets, masks).map(|o| o.loss)
}

/// First and second moment estimates for every head parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m_w: Vec<f64>,
    v_w: Vec<f64>,
    m_b: Vec<f64>,
    v_b: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(head: &SoftmaxHead) -> Self {
        Self {
            m_w: vec![0.0; head.weights.len()],
            v_w: vec![0.0; head.weights.len()],
            m_b: vec![0.0; head.bias.len()],
            v_b: vec![0.0; head.bias.len()],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(head: &mut SoftmaxHead, state: &mut AdamState, grads: &Gradients, config: &TrainConfig) -> Result<()> {
    if grads.weights.len() != head.weights.len()
        || grads.bias.len() != head.bias.len()
        || state.m_w.len() != head.weights.len()
        || state.m_b.len() != head.bias.len()
    {
        return Err(Error::Shape("Adam state, gradients and head disagree in shape".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let update = |theta: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
        for i in 0..theta.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            theta[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_eps);
        }
    };
    update(&mut head.weights, &mut state.m_w, &mut state.v_w, &grads.weights);
    update(&mut head.bias, &mut state.m_b, &mut state.v_b, &grads.bias);
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub train_acc: Vec<f64>,
    pub val_acc: Vec<f64>,
}

impl TrainHistory {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_loss.is_empty()
    }

    fn push(&mut self, train_loss: f64, val_loss: f64, train_acc: f64, val_acc: f64) {
        self.train_loss.push(train_loss);
        self.val_loss.push(val_loss);
        self.train_acc.push(train_acc);
        self.val_acc.push(val_acc);
    }

    /// `epoch,train_loss,val_loss,train_acc,val_acc`, epochs numbered from 1.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,train_loss,val_loss,train_acc,val_acc\n");
        for i in 0..self.epochs() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                i + 1,
                self.train_loss[i],
                self.val_loss[i],
                self.train_acc[i],
                self.val_acc[i]
            ));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let mut history = Self::default();
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::csv(path, e))?;
            let field = |i: usize| -> Result<f64> {
                rec[i]
                    .parse()
                    .map_err(|_| Error::Dataset(format!("{}: bad number `{}`", path.display(), &rec[i])))
            };
            history.push(field(1)?, field(2)?, field(3)?, field(4)?);
        }
        Ok(history)
    }
}

/// Steps per epoch for `n` samples.
pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Mean loss and accuracy with dropout off.
pub fn evaluate(head: &SoftmaxHead, features: &[f64], labels: &[usize]) -> Result<(f64, f64)> {
    let d = head.feature_dim;
    let rows: Vec<&[f64]> = features.chunks_exact(d).collect();
    let outcome = batch_gradients(head, &rows, labels, None)?;
    Ok((outcome.loss, outcome.correct as f64 / labels.len() as f64))
}

fn labeled_rows(features: &FeatureMatrix, labels: &[usize], num_classes: usize, what: &str) -> Result<Vec<f64>> {
    if features.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{what}: {} feature rows but {} labels",
            features.rows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::InvalidInput(format!("{what}: label {bad} out of range")));
    }
    Ok(features.to_f64())
}

/// Mini-batch Adam training of a fresh head.
///
/// Each epoch reshuffles the training rows, samples a dropout mask per
/// sample per step, then scores the validation set with dropout off. The
/// training columns of the history are running means over the epoch's
/// batches (dropout on). Identical inputs and seed give a bit-identical
/// head.
pub fn train(
    train_x: &FeatureMatrix,
    train_y: &[usize],
    val_x: &FeatureMatrix,
    val_y: &[usize],
    num_classes: usize,
    config: &TrainConfig,
) -> Result<(SoftmaxHead, TrainHistory)> {
    config.validate()?;
    if num_classes == 0 {
        return Err(Error::InvalidInput("num_classes must be >= 1".into()));
    }
    if train_x.rows() == 0 {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    if val_x.rows() == 0 {
        return Err(Error::InvalidInput("empty validation set".into()));
    }
    if val_x.cols() != train_x.cols() {
        return Err(Error::Shape(format!(
            "training features have {} columns, validation {}",
            train_x.cols(),
            val_x.cols()
        )));
    }
    let d = train_x.cols();
    let train_rows = labeled_rows(train_x, train_y, num_classes, "training set")?;
    let val_rows = labeled_rows(val_x, val_y, num_classes, "validation set")?;

    let mut init_rng = seed::rng(seed::derive(config.seed, "head/init"));
    let mut shuffle_rng = seed::rng(seed::derive(config.seed, "head/shuffle"));
    let mut dropout_rng = seed::rng(seed::derive(config.seed, "head/dropout"));

    let mut head = SoftmaxHead::glorot(d, num_classes, &mut init_rng);
    debug_assert_eq!(head.param_count(), head_param_count(d, num_classes));
    let mut adam = AdamState::new(&head);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..train_y.len()).collect();
    let mut best_val = f64::INFINITY;
    let mut stale_epochs = 0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for batch in order.chunks(config.batch_size) {
            let inputs: Vec<&[f64]> = batch.iter().map(|&i| &train_rows[i * d..(i + 1) * d]).collect();
            let targets: Vec<usize> = batch.iter().map(|&i| train_y[i]).collect();
            let masks: Vec<DropoutMask> = batch
                .iter()
                .map(|_| DropoutMask::sample(d, config.dropout_rate, &mut dropout_rng))
                .collect();
            let outcome = batch_gradients(&head, &inputs, &targets, Some(&masks))?;
            if !outcome.loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "training loss became {} at epoch {epoch}, step {}",
                    outcome.loss,
                    adam.step() + 1
                )));
            }
            loss_sum += outcome.loss * batch.len() as f64;
            correct += outcome.correct;
            adam_step(&mut head, &mut adam, &outcome.grads, config)?;
        }
        let n = train_y.len() as f64;
        let (val_loss, val_acc) = evaluate(&head, &val_rows, val_y)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!("validation loss became {val_loss} at epoch {epoch}")));
        }
        history.push(loss_sum / n, val_loss, correct as f64 / n, val_acc);
        log::debug!(
            "epoch {epoch}: train_loss={:.4} val_loss={val_loss:.4} val_acc={val_acc:.4}",
            loss_sum / n
        );

        if let Some(patience) = config.early_stopping_patience {
            if val_loss < best_val {
                best_val = val_loss;
                stale_epochs = 0;
            } else {
                stale_epochs += 1;
                if stale_epochs >= patience {
                    log::info!("early stopping after epoch {epoch}");
                    break;
                }
            }
        }
    }
    Ok((head, history))
}

/// Serialized trained head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadFile {
    pub backbone: String,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub classes: Vec<String>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub config: TrainConfig,
    pub final_metrics: FinalMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub epochs_run: usize,
}

impl HeadFile {
    pub fn new(backbone: &str, classes: &[String], head: &SoftmaxHead, config: &TrainConfig, history: &TrainHistory) -> Self {
        let last = history.epochs().saturating_sub(1);
        let pick = |v: &Vec<f64>| v.get(last).copied().unwrap_or(0.0);
        Self {
            backbone: backbone.to_string(),
            feature_dim: head.feature_dim,
            num_classes: head.num_classes,
            classes: classes.to_vec(),
            weights: head.weights.clone(),
            bias: head.bias.clone(),
            config: *config,
            final_metrics: FinalMetrics {
                train_loss: pick(&history.train_loss),
                val_loss: pick(&history.val_loss),
                train_acc: pick(&history.train_acc),
                val_acc: pick(&history.val_acc),
                epochs_run: history.epochs(),
            },
        }
    }

    pub fn head(&self) -> Result<SoftmaxHead> {
        SoftmaxHead::from_parts(self.feature_dim, self.num_classes, self.weights.clone(), self.bias.clone())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn zero_head_is_uniform() {
        let head = SoftmaxHead::zeros(4, 2);
        let p = head.forward(&[1.0, -3.0, 2.0, 0.5], None).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn log_three_logits() {
        // identity weights on a 2-d input reproduce the logits
        let head = SoftmaxHead::from_parts(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]).unwrap();
        let p = head.forward(&[3f64.ln(), 0.0], None).unwrap();
        assert!(close(p[0], 0.75, 1e-15) && close(p[1], 0.25, 1e-15), "{p:?}");
    }

    #[test]
    fn rate_zero_all_ones_mask_is_plain_forward() {
        let mut rng = seed::rng(1);
        let head = SoftmaxHead::glorot(5, 3, &mut rng);
        let x = [0.3, -1.0, 2.0, 0.0, 4.5];
        let mask = DropoutMask::new(vec![true; 5], 0.0);
        assert_eq!(head.forward(&x, Some(&mask)).unwrap(), head.forward(&x, None).unwrap());
    }

    #[test]
    fn inverted_dropout_scales_survivors() {
        let head = SoftmaxHead::from_parts(2, 2, vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0]).unwrap();
        let mask = DropoutMask::new(vec![true, false], 0.5);
        // x~ = [2 * 2, 0] -> logits [4, 0]
        let p = head.forward(&[2.0, 9.0], Some(&mask)).unwrap();
        assert!(close(p[0], softmax(&[4.0, 0.0])[0], 1e-15));
    }

    #[test]
    fn forward_shape_errors() {
        let head = SoftmaxHead::zeros(3, 2);
        assert!(matches!(head.forward(&[1.0], None), Err(Error::Shape(_))));
        let mask = DropoutMask::new(vec![true; 2], 0.1);
        assert!(matches!(head.forward(&[1.0; 3], Some(&mask)), Err(Error::Shape(_))));
    }

    #[test]
    fn cross_entropy_values() {
        let t0 = OneHotTarget::new(0, 2).unwrap();
        let t1 = OneHotTarget::new(1, 2).unwrap();
        assert_eq!(cce_loss(&[1.0, 0.0], &t0), 0.0);
        assert!(close(cce_loss(&[0.5, 0.5], &t1), std::f64::consts::LN_2, 1e-12));
        assert!(close(cce_loss(&[0.9, 0.1], &t1), -(0.1f64.ln()), 1e-12));
        // clipping keeps the loss finite
        assert!(close(cce_loss(&[1.0, 0.0], &t1), -(PROB_CLIP.ln()), 1e-9));
        assert_eq!(t1.to_vec(), vec![0.0, 1.0]);
        assert!(OneHotTarget::new(2, 2).is_err());
    }

    #[test]
    fn uniform_single_sample_bias_gradient() {
        let head = SoftmaxHead::zeros(3, 2);
        let x = [0.5, -1.0, 2.0];
        let g = gradients(&head, &[&x], &[0], None).unwrap();
        assert_eq!(g.bias, vec![-0.5, 0.5]);
        assert_eq!(g.weights, vec![-0.25, 0.25, 0.5, -0.5, -1.0, 1.0]);
    }

    #[test]
    fn confident_correct_prediction_has_no_gradient() {
        let head = SoftmaxHead::from_parts(1, 2, vec![0.0, 0.0], vec![50.0, -50.0]).unwrap();
        let g = gradients(&head, &[&[1.0]], &[0], None).unwrap();
        assert!(g.max_abs() < 1e-9, "{g:?}");
    }

    /// Central differences of the mean batch loss, one parameter at a time.
    fn numeric_gradient(head: &SoftmaxHead, xs: &[&[f64]], ys: &[usize], masks: Option<&[DropoutMask]>, h: f64) -> Gradients {
        let probe = |w: Vec<f64>, b: Vec<f64>| {
            let p = SoftmaxHead::from_parts(head.feature_dim(), head.num_classes(), w, b).unwrap();
            batch_loss(&p, xs, ys, masks).unwrap()
        };
        let mut gw = vec![0.0; head.weights().len()];
        for (i, g) in gw.iter_mut().enumerate() {
            let (mut plus, mut minus) = (head.weights().to_vec(), head.weights().to_vec());
            plus[i] += h;
            minus[i] -= h;
            *g = (probe(plus, head.bias().to_vec()) - probe(minus, head.bias().to_vec())) / (2.0 * h);
        }
        let mut gb = vec![0.0; head.bias().len()];
        for (i, g) in gb.iter_mut().enumerate() {
            let (mut plus, mut minus) = (head.bias().to_vec(), head.bias().to_vec());
            plus[i] += h;
            minus[i] -= h;
            *g = (probe(head.weights().to_vec(), plus) - probe(head.weights().to_vec(), minus)) / (2.0 * h);
        }
        Gradients { weights: gw, bias: gb }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn analytic_gradient_matches_finite_differences(
            seed in any::<u64>(), d in 1usize..=16, c in 2usize..=4, n in 1usize..=8, rate in 0.0f64..0.6,
        ) {
            let mut rng = seed::rng(seed);
            let head = SoftmaxHead::glorot(d, c, &mut rng);
            let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
            let xs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
            let ys: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let masks: Vec<DropoutMask> = (0..n).map(|_| DropoutMask::sample(d, rate, &mut rng)).collect();
            let analytic = gradients(&head, &xs, &ys, Some(&masks)).unwrap();
            let numeric = numeric_gradient(&head, &xs, &ys, Some(&masks), 1e-5);
            for (a, b) in analytic.weights.iter().chain(&analytic.bias).zip(numeric.weights.iter().chain(&numeric.bias)) {
                prop_assert!((a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(1e-4), "{} vs {}", a, b);
            }
        }

        #[test]
        fn softmax_sums_to_one(logits in proptest::collection::vec(-500.0f64..500.0, 1..6)) {
            let p = softmax(&logits);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|v| *v >= 0.0 && v.is_finite()));
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let config = TrainConfig::default();
        for (g, expected) in [(1.0, -0.001), (-1.0, 0.001)] {
            let mut head = SoftmaxHead::zeros(1, 1);
            let mut state = AdamState::new(&head);
            let grads = Gradients {
                weights: vec![g],
                bias: vec![g],
            };
            adam_step(&mut head, &mut state, &grads, &config).unwrap();
            assert!(close(head.weights()[0], expected, 1e-10), "{}", head.weights()[0]);
            assert!(close(head.bias()[0], expected, 1e-10));
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let mut rng = seed::rng(4);
        let mut head = SoftmaxHead::glorot(3, 2, &mut rng);
        let before = head.clone();
        let mut state = AdamState::new(&head);
        let zero = Gradients {
            weights: vec![0.0; 6],
            bias: vec![0.0; 2],
        };
        for _ in 0..100 {
            adam_step(&mut head, &mut state, &zero, &TrainConfig::default()).unwrap();
        }
        assert_eq!(head, before);
    }

    #[test]
    fn full_batch_descent_does_not_increase_loss() {
        let mut rng = seed::rng(8);
        let mut head = SoftmaxHead::glorot(6, 2, &mut rng);
        let rows: Vec<Vec<f64>> = (0..12).map(|_| (0..6).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let xs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let ys: Vec<usize> = (0..12).map(|i| i % 2).collect();
        let mut prev = batch_loss(&head, &xs, &ys, None).unwrap();
        for _ in 0..5 {
            let g = gradients(&head, &xs, &ys, None).unwrap();
            let w: Vec<f64> = head.weights().iter().zip(&g.weights).map(|(w, g)| w - 0.01 * g).collect();
            let b: Vec<f64> = head.bias().iter().zip(&g.bias).map(|(b, g)| b - 0.01 * g).collect();
            head = SoftmaxHead::from_parts(6, 2, w, b).unwrap();
            let loss = batch_loss(&head, &xs, &ys, None).unwrap();
            assert!(loss <= prev, "{loss} > {prev}");
            prev = loss;
        }
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { dropout_rate: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn steps_per_epoch_rounds_up() {
        assert_eq!(steps_per_epoch(499, 16), 32);
        assert_eq!(steps_per_epoch(16, 16), 1);
        assert_eq!(steps_per_epoch(17, 16), 2);
    }

    fn blobs(n: usize, d: usize, seed: u64) -> (FeatureMatrix, Vec<usize>) {
        let mut rng = seed::rng(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = i % 2;
            let centre = if label == 0 { -1.5 } else { 1.5 };
            for _ in 0..d {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push((centre + z) as f32);
            }
            labels.push(label);
        }
        let ids = (0..n).map(|i| i.to_string()).collect();
        (FeatureMatrix::new(d, data, ids).unwrap(), labels)
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let (tx, ty) = blobs(80, 4, 1);
        let (vx, vy) = blobs(20, 4, 2);
        let config = TrainConfig {
            epochs: 10,
            seed: 3,
            ..Default::default()
        };
        let (h1, hist1) = train(&tx, &ty, &vx, &vy, 2, &config).unwrap();
        let (h2, hist2) = train(&tx, &ty, &vx, &vy, 2, &config).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(hist1, hist2);
        assert_eq!(hist1.epochs(), 10);
        assert!(hist1.val_acc[9] > 0.9);
        assert!(hist1.train_loss.iter().chain(&hist1.val_loss).all(|&l| l >= 0.0));
        assert!(hist1.train_acc.iter().chain(&hist1.val_acc).all(|a| (0.0..=1.0).contains(a)));
        assert_eq!(h1.param_count(), head_param_count(4, 2));
        let other = train(&tx, &ty, &vx, &vy, 2, &TrainConfig { seed: 4, ..config }).unwrap().0;
        assert_ne!(h1, other);
    }

    #[test]
    fn training_input_errors() {
        let (tx, ty) = blobs(10, 3, 1);
        let empty = FeatureMatrix::empty(3);
        let config = TrainConfig::default();
        assert!(train(&empty, &[], &tx, &ty, 2, &config).is_err());
        assert!(train(&tx, &ty[..5], &tx, &ty, 2, &config).is_err());
        assert!(train(&tx, &ty, &tx, &ty, 2, &TrainConfig { epochs: 0, ..config }).is_err());
    }

    #[test]
    fn overflowing_loss_aborts_with_numeric_error() {
        let (tx, ty) = blobs(40, 3, 1);
        let huge: Vec<f32> = tx.data().iter().map(|v| v * 1e30).collect();
        let tx = FeatureMatrix::new(3, huge, tx.row_ids().to_vec()).unwrap();
        let config = TrainConfig {
            learning_rate: 1e300,
            dropout_rate: 0.0,
            ..Default::default()
        };
        let err = train(&tx, &ty, &tx, &ty, 2, &config).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn early_stopping_truncates_history() {
        let (tx, ty) = blobs(40, 3, 5);
        // validation labels inverted so validation loss keeps rising
        let (vx, vy) = blobs(20, 3, 6);
        let flipped: Vec<usize> = vy.iter().map(|&y| 1 - y).collect();
        let config = TrainConfig {
            epochs: 40,
            early_stopping_patience: Some(3),
            ..Default::default()
        };
        let (_, hist) = train(&tx, &ty, &vx, &flipped, 2, &config).unwrap();
        assert!(hist.epochs() < 40);
    }

    #[test]
    fn head_file_and_history_roundtrip() {
        let (tx, ty) = blobs(20, 3, 1);
        let config = TrainConfig {
            epochs: 3,
            ..Default::default()
        };
        let (head, hist) = train(&tx, &ty, &tx, &ty, 2, &config).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let file = HeadFile::new("stub", &["a".into(), "b".into()], &head, &config, &hist);
        file.write(&tmp.path().join("head.json")).unwrap();
        let back = HeadFile::read(&tmp.path().join("head.json")).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.head().unwrap(), head);
        hist.write_csv(&tmp.path().join("h.csv")).unwrap();
        assert_eq!(TrainHistory::read_csv(&tmp.path().join("h.csv")).unwrap(), hist);
        let text = fs::read_to_string(tmp.path().join("h.csv")).unwrap();
        assert!(text.starts_with("epoch,train_loss,val_loss,train_acc,val_acc\n1,"));
    }
}
