//! Small sequence classifier built on multi-head anchor attention.
//!
//! ```text
//! X_0     = tokens W_E
//! X_{b+1} = X_b + tanh(MHA_b(X_b))
//! logits  = mean_rows(X_B) W_C + b_C
//! ```
//!
//! The `tanh` matters: `S_t` is doubly stochastic, so the row mean of pure
//! anchor attention output is a linear function of the row mean of its
//! input, and mean pooling would see no token interaction at all.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::anchor::{complexity_warning, MultiHeadParams};
use crate::error::{Error, Result};
use crate::grad::{multi_head_backward, multi_head_forward, sgd_step, MultiHeadForward, ParamSet};
use crate::harness::data::Dataset;
use crate::linalg::{matmul, matmul_transposed_a, matmul_transposed_b, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelShape {
    pub token_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub anchors: usize,
    pub blocks: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoClassifier {
    pub embed: Matrix,
    pub blocks: Vec<MultiHeadParams>,
    pub head_w: Matrix,
    pub head_b: Matrix,
}

impl ParamSet for DemoClassifier {
    fn params(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("W_E".to_string(), &self.embed)];
        for (b, block) in self.blocks.iter().enumerate() {
            out.extend(
                block
                    .params()
                    .into_iter()
                    .map(|(n, p)| (format!("block{b}.{n}"), p)),
            );
        }
        out.push(("W_C".to_string(), &self.head_w));
        out.push(("b_C".to_string(), &self.head_b));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.embed];
        for block in self.blocks.iter_mut() {
            out.extend(block.params_mut());
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }
}

fn zeros_like(m: &Matrix) -> Matrix {
    Matrix::zeros(m.rows(), m.cols())
}

/// `acc += s * g`, parameter by parameter.
fn accumulate<P: ParamSet>(acc: &mut P, g: &P, s: f64) -> Result<()> {
    for (a, (_, g)) in acc.params_mut().into_iter().zip(g.params()) {
        a.axpy_sub(-s, g)?;
    }
    Ok(())
}

struct Cache {
    xs: Vec<Matrix>,
    blocks: Vec<MultiHeadForward>,
    acts: Vec<Matrix>,
    pooled: Matrix,
    probs: Vec<f64>,
}

impl DemoClassifier {
    /// Random embedding and attention weights; a zero classifier head, so an
    /// untrained model predicts class 0 for every input.
    pub fn new<R: Rng + ?Sized>(shape: &ModelShape, rng: &mut R) -> Result<Self> {
        let ModelShape {
            token_dim,
            model_dim,
            heads,
            anchors,
            blocks,
            classes,
        } = *shape;
        if token_dim == 0 || model_dim == 0 || heads == 0 || anchors == 0 || classes < 2 {
            return Err(Error::Argument(format!("invalid model shape {shape:?}")));
        }
        Ok(DemoClassifier {
            embed: Matrix::random_normal(
                token_dim,
                model_dim,
                1.0 / (token_dim as f64).sqrt(),
                rng,
            ),
            blocks: (0..blocks)
                .map(|_| MultiHeadParams::random(model_dim, model_dim, heads, anchors, rng))
                .collect(),
            head_w: Matrix::zeros(model_dim, classes),
            head_b: Matrix::zeros(1, classes),
        })
    }

    pub fn classes(&self) -> usize {
        self.head_w.cols()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for p in z.params_mut() {
            *p = zeros_like(p);
        }
        z
    }

    fn forward(&self, tokens: &Matrix) -> Result<Cache> {
        let mut xs = vec![matmul(tokens, &self.embed)?];
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut acts = Vec::with_capacity(self.blocks.len());
        for params in &self.blocks {
            let x = xs.last().expect("embedding is always present");
            let fwd = multi_head_forward(x, params)?;
            let act = fwd.output.map(f64::tanh);
            xs.push(x.add(&act)?);
            blocks.push(fwd);
            acts.push(act);
        }
        let pooled = xs.last().expect("non-empty").col_means();
        let logits = matmul(&pooled, &self.head_w)?.add(&self.head_b)?;
        let max = logits
            .data()
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.data().iter().map(|z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let probs = exps.into_iter().map(|e| e / sum).collect();
        Ok(Cache {
            xs,
            blocks,
            acts,
            pooled,
            probs,
        })
    }

    /// Class probabilities for one sample.
    pub fn predict_proba(&self, tokens: &Matrix) -> Result<Vec<f64>> {
        Ok(self.forward(tokens)?.probs)
    }

    pub fn predict(&self, tokens: &Matrix) -> Result<usize> {
        Ok(argmax(&self.predict_proba(tokens)?))
    }

    /// Cross-entropy of one sample and its gradient.
    pub fn loss_and_grad(&self, tokens: &Matrix, label: usize) -> Result<(f64, DemoClassifier)> {
        if label >= self.classes() {
            return Err(Error::Argument(format!(
                "label {label} out of range for {} classes",
                self.classes()
            )));
        }
        let cache = self.forward(tokens)?;
        let loss = -cache.probs[label].max(f64::MIN_POSITIVE).ln();
        let mut d_logits = cache.probs.clone();
        d_logits[label] -= 1.0;
        let d_logits = Matrix::new(1, d_logits.len(), d_logits)?;

        let mut grads = self.zeros_like();
        grads.head_w = matmul_transposed_a(&cache.pooled, &d_logits)?;
        grads.head_b = d_logits.clone();
        let d_pooled = matmul_transposed_b(&d_logits, &self.head_w)?;
        let n = tokens.rows();
        let mut d_x = Matrix::from_fn(n, d_pooled.cols(), |_, c| d_pooled.get(0, c) / n as f64);
        for b in (0..self.blocks.len()).rev() {
            let d_out = Matrix::from_fn(n, d_x.cols(), |i, c| {
                let t = cache.acts[b].get(i, c);
                d_x.get(i, c) * (1.0 - t * t)
            });
            let g = multi_head_backward(&cache.xs[b], &self.blocks[b], &cache.blocks[b], &d_out)?;
            d_x = d_x.add(&g.d_x)?;
            grads.blocks[b] = g.params;
        }
        grads.embed = matmul_transposed_a(tokens, &d_x)?;
        Ok((loss, grads))
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        let mut hits = 0usize;
        for (x, &y) in data.samples.iter().zip(&data.labels) {
            hits += (self.predict(x)? == y) as usize;
        }
        Ok(hits as f64 / data.len().max(1) as f64)
    }
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub holdout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            lr: 0.03,
            batch: 16,
            holdout: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean minibatch loss over the epoch.
    pub loss: f64,
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: DemoClassifier,
    pub initial_holdout_accuracy: f64,
    pub epochs: Vec<EpochLog>,
    pub train_size: usize,
    pub holdout_size: usize,
    pub warnings: Vec<String>,
}

impl TrainReport {
    pub fn final_holdout_accuracy(&self) -> f64 {
        self.epochs
            .last()
            .map_or(self.initial_holdout_accuracy, |e| e.holdout_accuracy)
    }
}

/// Minibatch SGD on softmax cross-entropy over a stratified split of `data`.
/// `on_epoch` sees each log line as it is produced.
pub fn train(
    data: &Dataset,
    shape: &ModelShape,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    if cfg.batch == 0 {
        return Err(Error::Argument("batch size must be >= 1".into()));
    }
    if !(cfg.holdout > 0.0 && cfg.holdout < 1.0) {
        return Err(Error::Argument(format!(
            "holdout fraction must be in (0, 1), got {}",
            cfg.holdout
        )));
    }
    if data.is_empty() || data.classes != shape.classes || data.token_dim() != shape.token_dim {
        return Err(Error::Argument(
            "dataset does not match the model shape".into(),
        ));
    }
    let warnings: Vec<String> = complexity_warning(data.tokens(), shape.anchors)
        .into_iter()
        .collect();
    let (train_set, hold) = data.stratified_split(cfg.holdout);
    if train_set.is_empty() || hold.is_empty() {
        return Err(Error::Argument(
            "dataset too small for a train/holdout split".into(),
        ));
    }
    let mut rng = crate::seeded_rng(cfg.seed);
    let mut model = DemoClassifier::new(shape, &mut rng)?;
    let initial_holdout_accuracy = model.accuracy(&hold)?;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let mut acc = model.zeros_like();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let (l, g) = model
                    .loss_and_grad(&train_set.samples[i], train_set.labels[i])
                    .map_err(|e| match e {
                        Error::NumericInput(_) | Error::SingularMass { .. } => {
                            Error::NumericInput(format!(
                            "training diverged in epoch {epoch} ({e}); try a smaller --lr than {}",
                            cfg.lr
                        ))
                        }
                        other => other,
                    })?;
                batch_loss += l;
                accumulate(&mut acc, &g, 1.0 / chunk.len() as f64)?;
            }
            batch_loss /= chunk.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::NumericInput(format!(
                    "training diverged in epoch {epoch} (loss {batch_loss}); try a smaller --lr than {}",
                    cfg.lr
                )));
            }
            sgd_step(&mut model, &acc, cfg.lr)?;
            total += batch_loss;
            batches += 1;
        }
        let log = EpochLog {
            epoch,
            loss: total / batches as f64,
            train_accuracy: model.accuracy(&train_set)?,
            holdout_accuracy: model.accuracy(&hold)?,
        };
        on_epoch(&log);
        epochs.push(log);
    }
    Ok(TrainReport {
        model,
        initial_holdout_accuracy,
        epochs,
        train_size: train_set.len(),
        holdout_size: hold.len(),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::finite_difference_check;
    use crate::seeded_rng;

    fn tiny() -> (DemoClassifier, Matrix) {
        let shape = ModelShape {
            token_dim: 3,
            model_dim: 4,
            heads: 2,
            anchors: 3,
            blocks: 2,
            classes: 3,
        };
        let mut rng = seeded_rng(11);
        let mut model = DemoClassifier::new(&shape, &mut rng).unwrap();
        // Nonzero head so every gradient path is exercised.
        model.head_w = Matrix::random_normal(4, 3, 0.5, &mut rng);
        model.head_b = Matrix::random_normal(1, 3, 0.5, &mut rng);
        (model, Matrix::random_normal(6, 3, 1.0, &mut rng))
    }

    // Some W_S entries are ~1e-6 in magnitude; a larger step keeps the loss
    // difference above roundoff for them.
    #[test]
    fn classifier_gradient_matches_finite_differences() {
        let (model, x) = tiny();
        let (_, grads) = model.loss_and_grad(&x, 2).unwrap();
        let reports =
            finite_difference_check(&model, &grads, |m| Ok(m.loss_and_grad(&x, 2)?.0), 1e-4)
                .unwrap();
        for r in reports {
            assert!(r.passes(1e-5), "{r:?}");
        }
    }

    #[test]
    fn untrained_model_predicts_class_zero() {
        let shape = ModelShape {
            token_dim: 2,
            model_dim: 4,
            heads: 1,
            anchors: 2,
            blocks: 1,
            classes: 3,
        };
        let model = DemoClassifier::new(&shape, &mut seeded_rng(0)).unwrap();
        let p = model.predict_proba(&Matrix::filled(5, 2, 0.3)).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(model.loss_and_grad(&Matrix::filled(5, 2, 0.3), 3).is_err());
    }
}
