//! Three-layer MLP value head `V(h) = σ(W3·relu(W2·relu(W1·h + b1) + b2) + b3)`
//! regressed onto Monte Carlo returns with mean squared error and Adam.
//!
//! Forward, backward and the optimizer are written out by hand; the head is
//! small enough (d → 64 → 32 → 1 by default) that plain loops are fast.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::prior::LatentReadout;
use crate::rng::stream;
use crate::{Error, Result};

pub const DEFAULT_HIDDEN: [usize; 2] = [64, 32];

/// One `(h_t, G_t)` regression pair plus where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub h: LatentReadout,
    pub g: f64,
    pub task_id: u32,
    pub init_id: u32,
    /// Decision step within the episode.
    pub t: u32,
    /// Terminal reward of the episode the example came from.
    pub r: u8,
}

impl TrainingExample {
    pub fn is_success(&self) -> bool {
        self.r == 1
    }
}

/// Parameters of the value head. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueHead {
    pub d: usize,
    pub h1: usize,
    pub h2: usize,
    pub activation: String,
    pub output: String,
    /// `h1 × d`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `h2 × h1`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: f64,
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * n_in..(r + 1) * n_in];
        *o = b[r] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Activations of one forward pass, kept for backprop.
struct Trace {
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
    out: f64,
}

impl ValueHead {
    pub fn zeros(d: usize, h1: usize, h2: usize) -> Self {
        Self {
            d,
            h1,
            h2,
            activation: "relu".into(),
            output: "sigmoid".into(),
            w1: vec![0.0; h1 * d],
            b1: vec![0.0; h1],
            w2: vec![0.0; h2 * h1],
            b2: vec![0.0; h2],
            w3: vec![0.0; h2],
            b3: 0.0,
        }
    }

    /// He-uniform hidden weights, Glorot-uniform output weights, zero biases.
    pub fn init(d: usize, h1: usize, h2: usize, rng: &mut dyn RngCore) -> Self {
        let mut p = Self::zeros(d, h1, h2);
        let mut fill = |w: &mut [f64], limit: f64| {
            for x in w.iter_mut() {
                *x = rng.gen_range(-limit..limit);
            }
        };
        fill(&mut p.w1, (6.0 / d as f64).sqrt());
        fill(&mut p.w2, (6.0 / h1 as f64).sqrt());
        fill(&mut p.w3, (6.0 / (h2 + 1) as f64).sqrt());
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.d, self.h1, self.h2)
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + self.w3.len() + 1
    }

    fn tensors(&self) -> [&[f64]; 6] {
        [
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.w3,
            std::slice::from_ref(&self.b3),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            std::slice::from_mut(&mut self.b3),
        ]
    }

    /// All parameters flattened in the order w1, b1, w2, b2, w3, b3.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.num_params(), "flat parameter length");
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn validate(&self) -> Result<()> {
        let shapes_ok = self.w1.len() == self.h1 * self.d
            && self.b1.len() == self.h1
            && self.w2.len() == self.h2 * self.h1
            && self.b2.len() == self.h2
            && self.w3.len() == self.h2;
        if !shapes_ok || self.d == 0 || self.h1 == 0 || self.h2 == 0 {
            return Err(Error::config("value head parameter shapes are inconsistent"));
        }
        if self.activation != "relu" || self.output != "sigmoid" {
            return Err(Error::config(format!(
                "unsupported value head activations {}/{}",
                self.activation, self.output
            )));
        }
        if !self.is_finite() {
            return Err(Error::config("value head parameters are not finite"));
        }
        Ok(())
    }

    fn trace(&self, h: &[f64]) -> Trace {
        let mut z1 = vec![0.0; self.h1];
        affine(&self.w1, &self.b1, h, &mut z1);
        let a1: Vec<f64> = z1.iter().map(|&z| relu(z)).collect();
        let mut z2 = vec![0.0; self.h2];
        affine(&self.w2, &self.b2, &a1, &mut z2);
        let a2: Vec<f64> = z2.iter().map(|&z| relu(z)).collect();
        let z3 = self.b3 + self.w3.iter().zip(&a2).map(|(w, a)| w * a).sum::<f64>();
        Trace {
            z1,
            a1,
            z2,
            a2,
            out: sigmoid(z3),
        }
    }

    fn check_dim(&self, h: &[f64]) -> Result<()> {
        if h.len() == self.d {
            Ok(())
        } else {
            Err(Error::usage(format!(
                "readout has dimension {}, value head expects {}",
                h.len(),
                self.d
            )))
        }
    }

    /// Smallest distance of any hidden pre-activation from the ReLU kink.
    /// The loss is differentiable in a neighbourhood of this size, which is
    /// what finite-difference checks need.
    pub fn kink_margin(&self, h: &[f64]) -> Result<f64> {
        self.check_dim(h)?;
        let t = self.trace(h);
        Ok(t.z1.iter().chain(&t.z2).fold(f64::INFINITY, |m, z| m.min(z.abs())))
    }

    /// Predicted value `v̂ ∈ (0, 1)`.
    pub fn forward(&self, h: &[f64]) -> Result<f64> {
        self.check_dim(h)?;
        Ok(self.trace(h).out)
    }

    pub fn value(&self, h: &LatentReadout) -> Result<f64> {
        self.forward(h.as_slice())
    }

    pub fn forward_batch(&self, batch: &[&[f64]]) -> Result<Vec<f64>> {
        batch.iter().map(|h| self.forward(h)).collect()
    }

    pub fn mse_loss(&self, batch: &[TrainingExample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::usage("mse_loss over an empty batch"));
        }
        let mut total = 0.0;
        for ex in batch {
            let e = self.value(&ex.h)? - ex.g;
            total += e * e;
        }
        Ok(total / batch.len() as f64)
    }

    /// Exact gradient of [`ValueHead::mse_loss`] by backpropagation.
    #[allow(clippy::needless_range_loop)]
    pub fn gradient(&self, batch: &[TrainingExample]) -> Result<ValueHead> {
        if batch.is_empty() {
            return Err(Error::usage("gradient over an empty batch"));
        }
        let mut g = self.zeros_like();
        let scale = 2.0 / batch.len() as f64;
        let mut dz2 = vec![0.0; self.h2];
        let mut dz1 = vec![0.0; self.h1];
        for ex in batch {
            let h = ex.h.as_slice();
            self.check_dim(h)?;
            let tr = self.trace(h);
            let dz3 = scale * (tr.out - ex.g) * tr.out * (1.0 - tr.out);
            g.b3 += dz3;
            for j in 0..self.h2 {
                g.w3[j] += dz3 * tr.a2[j];
                dz2[j] = if tr.z2[j] > 0.0 { dz3 * self.w3[j] } else { 0.0 };
            }
            dz1.iter_mut().for_each(|x| *x = 0.0);
            for j in 0..self.h2 {
                if dz2[j] == 0.0 {
                    continue;
                }
                g.b2[j] += dz2[j];
                let row = j * self.h1;
                for i in 0..self.h1 {
                    g.w2[row + i] += dz2[j] * tr.a1[i];
                    dz1[i] += dz2[j] * self.w2[row + i];
                }
            }
            for i in 0..self.h1 {
                if tr.z1[i] <= 0.0 {
                    continue;
                }
                let d = dz1[i];
                g.b1[i] += d;
                let row = i * self.d;
                for (k, &x) in h.iter().enumerate() {
                    g.w1[row + k] += d * x;
                }
            }
        }
        Ok(g)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("value head serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let head: ValueHead = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        head.validate()?;
        Ok(head)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of examples used for training; the rest is held out.
    pub train_fraction: f64,
    pub hidden: [usize; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 256,
            epochs: 50,
            seed: 0,
            train_fraction: 0.9,
            hidden: DEFAULT_HIDDEN,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.learning_rate, self.adam_beta1, self.adam_beta2, self.adam_eps];
        if positive.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::config("learning rate and Adam constants must be positive"));
        }
        if self.adam_beta1 >= 1.0 || self.adam_beta2 >= 1.0 {
            return Err(Error::config("Adam betas must be < 1"));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.hidden.contains(&0) {
            return Err(Error::config("batch_size, epochs and hidden sizes must be positive"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("train_fraction must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ValueHead,
    pub v: ValueHead,
}

impl AdamState {
    pub fn new(like: &ValueHead) -> Self {
        Self {
            m: like.zeros_like(),
            v: like.zeros_like(),
        }
    }
}

/// One bias-corrected Adam update; `step` counts from 1.
pub fn adam_step(
    params: &mut ValueHead,
    grads: &ValueHead,
    state: &mut AdamState,
    step: u64,
    config: &TrainConfig,
) -> Result<()> {
    if step == 0 {
        return Err(Error::usage("Adam step index starts at 1"));
    }
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let lr = config.learning_rate;
    let eps = config.adam_eps;
    let AdamState { m, v } = state;
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(m.tensors_mut())
        .zip(v.tensors_mut())
    {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Fraction of (success example, failure example) pairs ranked correctly,
/// i.e. with a strictly higher value on the success side. `None` when either
/// side is empty.
pub fn ranking_score(values: &[f64], success: &[bool]) -> Option<f64> {
    let mut fail: Vec<f64> = values
        .iter()
        .zip(success)
        .filter(|(_, &s)| !s)
        .map(|(&v, _)| v)
        .collect();
    fail.sort_by(f64::total_cmp);
    let succ: Vec<f64> = values
        .iter()
        .zip(success)
        .filter(|(_, &s)| s)
        .map(|(&v, _)| v)
        .collect();
    if fail.is_empty() || succ.is_empty() {
        return None;
    }
    let correct: usize = succ.iter().map(|&v| fail.partition_point(|&f| f < v)).sum();
    Some(correct as f64 / (fail.len() * succ.len()) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub params: ValueHead,
    /// Full training-set MSE before the first update.
    pub initial_train_loss: f64,
    /// Full training-set MSE after each epoch.
    pub epoch_losses: Vec<f64>,
    pub test_mse: f64,
    pub test_ranking: Option<f64>,
    pub train_size: usize,
    pub test_size: usize,
}

impl TrainReport {
    pub fn final_train_loss(&self) -> f64 {
        *self.epoch_losses.last().expect("at least one epoch")
    }

    /// `epoch,train_mse` rows, epoch 0 being the initial loss.
    pub fn loss_curve_csv(&self) -> String {
        let mut out = String::from("epoch,train_mse\n");
        out.push_str(&format!("0,{:.17e}\n", self.initial_train_loss));
        for (i, l) in self.epoch_losses.iter().enumerate() {
            out.push_str(&format!("{},{:.17e}\n", i + 1, l));
        }
        out
    }
}

/// Shuffles, splits, and runs mini-batch Adam for `config.epochs` epochs.
pub fn train(dataset: &[TrainingExample], config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if dataset.len() < 2 * config.batch_size {
        return Err(Error::usage(format!(
            "dataset has {} examples; training needs at least 2 × batch_size = {}",
            dataset.len(),
            2 * config.batch_size
        )));
    }
    let d = dataset[0].h.dim();
    if dataset.iter().any(|e| e.h.dim() != d) {
        return Err(Error::usage("readouts in the dataset differ in dimension"));
    }
    let mut rng = stream(config.seed, &[0x7a1]);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let n_train = ((dataset.len() as f64) * config.train_fraction).round() as usize;
    let n_train = n_train.clamp(1, dataset.len() - 1);
    let train_set: Vec<TrainingExample> = order[..n_train].iter().map(|&i| dataset[i].clone()).collect();
    let test_set: Vec<TrainingExample> = order[n_train..].iter().map(|&i| dataset[i].clone()).collect();

    let [h1, h2] = config.hidden;
    let mut params = ValueHead::init(d, h1, h2, &mut rng);
    let mut adam = AdamState::new(&params);
    let initial_train_loss = params.mse_loss(&train_set)?;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0u64;
    let mut idx: Vec<usize> = (0..train_set.len()).collect();
    let mut batch = Vec::with_capacity(config.batch_size);
    for _ in 0..config.epochs {
        idx.shuffle(&mut rng);
        for chunk in idx.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train_set[i].clone()));
            let grads = params.gradient(&batch)?;
            step += 1;
            adam_step(&mut params, &grads, &mut adam, step, config)?;
        }
        epoch_losses.push(params.mse_loss(&train_set)?);
    }
    let test_mse = params.mse_loss(&test_set)?;
    let values: Vec<f64> = test_set
        .iter()
        .map(|e| params.value(&e.h))
        .collect::<Result<_>>()?;
    let success: Vec<bool> = test_set.iter().map(TrainingExample::is_success).collect();
    Ok(TrainReport {
        test_ranking: ranking_score(&values, &success),
        params,
        initial_train_loss,
        epoch_losses,
        test_mse,
        train_size: train_set.len(),
        test_size: test_set.len(),
    })
}

/// Outcome of [`balance`].
#[derive(Debug, Clone, PartialEq)]
pub struct Balanced {
    pub examples: Vec<TrainingExample>,
    /// Set when there were fewer failure than success examples and the data
    /// was returned unchanged.
    pub warning: Option<String>,
}

/// Keeps every success example and a uniform subsample of failure examples
/// of the same size. Relative order is preserved.
pub fn balance(dataset: Vec<TrainingExample>, rng: &mut dyn RngCore) -> Result<Balanced> {
    let n_success = dataset.iter().filter(|e| e.is_success()).count();
    let n_failure = dataset.len() - n_success;
    if n_success == 0 {
        return Err(Error::Balance(
            "no success examples; a value head trained on this data collapses to zero".into(),
        ));
    }
    if n_failure < n_success {
        let warning = format!(
            "fewer failure ({n_failure}) than success ({n_success}) examples; dataset left unchanged"
        );
        log::warn!("{warning}");
        return Ok(Balanced {
            examples: dataset,
            warning: Some(warning),
        });
    }
    let mut keep = vec![false; n_failure];
    for i in rand::seq::index::sample(rng, n_failure, n_success) {
        keep[i] = true;
    }
    let mut failure_rank = 0;
    let examples = dataset
        .into_iter()
        .filter(|e| {
            if e.is_success() {
                true
            } else {
                failure_rank += 1;
                keep[failure_rank - 1]
            }
        })
        .collect();
    Ok(Balanced {
        examples,
        warning: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn example(h: Vec<f64>, g: f64, r: u8) -> TrainingExample {
        TrainingExample {
            h: LatentReadout(h),
            g,
            task_id: 0,
            init_id: 0,
            t: 0,
            r,
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, d: usize, n: usize) -> Vec<TrainingExample> {
        (0..n)
            .map(|_| {
                let h = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let r = rng.gen_range(0..2u8);
                let g = if r == 1 { rng.gen_range(0.5..1.0) } else { 0.0 };
                example(h, g, r)
            })
            .collect()
    }

    #[test]
    fn zero_params_predict_half() {
        let p = ValueHead::zeros(4, 8, 4);
        assert_eq!(p.forward(&[0.3, -2.0, 5.0, 1.0]).unwrap(), 0.5);
        assert!(matches!(p.forward(&[0.0; 3]), Err(Error::Usage(_))));
    }

    #[test]
    fn output_strictly_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ValueHead::init(6, 16, 8, &mut rng);
        for scale in [1.0, 10.0, 100.0] {
            let h: Vec<f64> = (0..6).map(|i| scale * (i as f64 - 2.5)).collect();
            let v = p.forward(&h).unwrap();
            assert!(v > 0.0 && v < 1.0 || (v == 1.0 && scale >= 100.0) || (v == 0.0 && scale >= 100.0));
        }
        let h = [0.1, -0.4, 0.9, 0.0, 0.3, -0.2];
        let v = p.forward(&h).unwrap();
        assert!(v > 0.0 && v < 1.0);
    }

    #[test]
    fn batch_forward_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ValueHead::init(5, 8, 4, &mut rng);
        let xs: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64 * 0.1; 5]).collect();
        let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let batch = p.forward_batch(&refs).unwrap();
        for (x, v) in xs.iter().zip(batch) {
            assert_eq!(p.forward(x).unwrap(), v);
        }
    }

    #[test]
    fn mse_examples() {
        let p = ValueHead::zeros(2, 3, 3);
        // Constant 0.5 against balanced {0, 1}: mean of 0.25 terms.
        let batch = vec![example(vec![0.0, 1.0], 0.0, 0), example(vec![1.0, 0.0], 1.0, 1)];
        assert!((p.mse_loss(&batch).unwrap() - 0.25).abs() < 1e-15);
        let exact = vec![example(vec![0.0, 1.0], 0.5, 1)];
        assert_eq!(p.mse_loss(&exact).unwrap(), 0.0);
        assert!(matches!(p.mse_loss(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn output_bias_gradient_vanishes_at_matching_target() {
        let p = ValueHead::zeros(3, 4, 4);
        let batch = vec![example(vec![0.2, 0.1, -0.3], 0.5, 1), example(vec![1.0, 0.0, 0.0], 0.5, 1)];
        assert_eq!(p.gradient(&batch).unwrap().b3, 0.0);
    }

    /// Central finite differences, step 1e-5, against the analytic gradient.
    fn max_relative_error(p: &ValueHead, batch: &[TrainingExample]) -> f64 {
        let g = p.gradient(batch).unwrap().flat();
        let base = p.flat();
        let mut worst: f64 = 0.0;
        let step = 1e-5;
        for i in 0..base.len() {
            let mut q = p.clone();
            let mut plus = base.clone();
            plus[i] += step;
            q.set_flat(&plus);
            let lp = q.mse_loss(batch).unwrap();
            let mut minus = base.clone();
            minus[i] -= step;
            q.set_flat(&minus);
            let lm = q.mse_loss(batch).unwrap();
            let numeric = (lp - lm) / (2.0 * step);
            let err = (numeric - g[i]).abs() / (numeric.abs() + g[i].abs()).max(1e-7);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let p = ValueHead::init(6, 10, 7, &mut rng);
            let batch = random_batch(&mut rng, 6, 8);
            let err = max_relative_error(&p, &batch);
            assert!(err < 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn kink_margin_is_smallest_preactivation() {
        let mut p = ValueHead::zeros(1, 2, 1);
        assert_eq!(p.kink_margin(&[3.0]).unwrap(), 0.0);
        p.w1 = vec![1.0, -2.0];
        p.b1 = vec![0.5, 0.5];
        p.b2 = vec![-4.0];
        p.w2 = vec![1.0, 1.0];
        // z1 = (3.5, -5.5), a1 = (3.5, 0), z2 = -0.5
        assert_eq!(p.kink_margin(&[3.0]).unwrap(), 0.5);
    }

    #[test]
    fn batch_gradient_is_mean_of_singles() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = ValueHead::init(4, 6, 5, &mut rng);
        let batch = random_batch(&mut rng, 4, 2);
        let both = p.gradient(&batch).unwrap().flat();
        let a = p.gradient(&batch[..1]).unwrap().flat();
        let b = p.gradient(&batch[1..]).unwrap().flat();
        for i in 0..both.len() {
            assert!((both[i] - 0.5 * (a[i] + b[i])).abs() < 1e-15);
        }
    }

    /// Scalar Adam written independently of the tensor loop.
    fn scalar_adam(theta: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
        let (mut m, mut v, mut th) = (0.0, 0.0, theta);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            th -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        th
    }

    #[test]
    fn adam_first_step_matches_scalar_oracle() {
        let cfg = TrainConfig::default();
        let mut p = ValueHead::zeros(1, 1, 1);
        p.b3 = 0.7;
        let mut g = p.zeros_like();
        g.b3 = 1.0;
        let mut state = AdamState::new(&p);
        adam_step(&mut p, &g, &mut state, 1, &cfg).unwrap();
        let expected = scalar_adam(0.7, &[1.0], 1e-3, 0.9, 0.999, 1e-8);
        assert!((p.b3 - expected).abs() < 1e-15);
        // lr · 1 / (1 + 1e-8)
        assert!((0.7 - p.b3 - 1e-3).abs() < 1e-10);

        for (step, grad) in [(2, -0.5), (3, 2.0)] {
            g.b3 = grad;
            adam_step(&mut p, &g, &mut state, step, &cfg).unwrap();
        }
        let expected = scalar_adam(0.7, &[1.0, -0.5, 2.0], 1e-3, 0.9, 0.999, 1e-8);
        assert!((p.b3 - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_decays_moments_only() {
        let cfg = TrainConfig::default();
        let mut p = ValueHead::zeros(1, 1, 1);
        p.w3[0] = 0.3;
        let mut state = AdamState::new(&p);
        state.m.b3 = 0.0;
        let zero = p.zeros_like();
        adam_step(&mut p, &zero, &mut state, 1, &cfg).unwrap();
        assert_eq!(p.w3[0], 0.3);

        state.m.w1[0] = 0.5;
        state.v.w1[0] = 0.25;
        let before = p.w1[0];
        adam_step(&mut p, &zero, &mut state, 2, &cfg).unwrap();
        assert_eq!(state.m.w1[0], 0.45);
        assert_eq!(state.v.w1[0], 0.25 * 0.999);
        // Residual momentum still moves the parameter; the gradient adds nothing.
        assert!(p.w1[0] < before);
        assert!(matches!(adam_step(&mut p, &zero, &mut state, 0, &cfg), Err(Error::Usage(_))));
    }

    fn separable(n: usize, seed: u64) -> Vec<TrainingExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let h: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let success = h[0] + 0.5 * h[1] > 0.0;
                example(h, if success { 0.9 } else { 0.0 }, u8::from(success))
            })
            .collect()
    }

    #[test]
    fn learns_a_linearly_separable_target() {
        let data = separable(3000, 3);
        let cfg = TrainConfig {
            epochs: 60,
            batch_size: 64,
            ..Default::default()
        };
        let report = train(&data, &cfg).unwrap();
        assert!(report.test_mse < 0.02, "test mse {}", report.test_mse);
        assert!(report.final_train_loss() < 0.5 * report.initial_train_loss);
        assert!(report.test_ranking.unwrap() > 0.95);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let data = separable(600, 4);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 32,
            ..Default::default()
        };
        let a = train(&data, &cfg).unwrap();
        let b = train(&data, &cfg).unwrap();
        assert_eq!(a, b);
        let c = train(&data, &TrainConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.params, c.params);
        assert!(c.final_train_loss() < c.initial_train_loss);
    }

    #[test]
    fn small_dataset_rejected() {
        let data = separable(100, 5);
        assert!(matches!(train(&data, &TrainConfig::default()), Err(Error::Usage(_))));
    }

    #[test]
    fn ranking_score_counts_strict_wins() {
        let v = [0.9, 0.2, 0.5, 0.5];
        let s = [true, false, true, false];
        // (0.9 > 0.2), (0.9 > 0.5), (0.5 > 0.2), (0.5 = 0.5 does not count)
        assert_eq!(ranking_score(&v, &s), Some(0.75));
        assert_eq!(ranking_score(&[0.1], &[true]), None);
    }

    fn labelled(successes: usize, failures: usize) -> Vec<TrainingExample> {
        (0..successes + failures)
            .map(|i| {
                let r = u8::from(i % (successes + failures) < successes);
                example(vec![i as f64], f64::from(r), r)
            })
            .collect()
    }

    #[test]
    fn balance_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = balance(labelled(100, 400), &mut rng).unwrap();
        assert!(out.warning.is_none());
        assert_eq!(out.examples.iter().filter(|e| e.is_success()).count(), 100);
        assert_eq!(out.examples.len(), 200);

        let same = labelled(100, 100);
        let out = balance(same.clone(), &mut rng).unwrap();
        assert_eq!(out.examples, same);

        let out = balance(labelled(50, 10), &mut rng).unwrap();
        assert!(out.warning.is_some());
        assert_eq!(out.examples.len(), 60);

        assert!(matches!(balance(labelled(0, 10), &mut rng), Err(Error::Balance(_))));
    }

    #[test]
    fn model_json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ValueHead::init(4, 6, 3, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        p.save(&path).unwrap();
        assert_eq!(ValueHead::load(&path).unwrap(), p);
        let mut bad = p.clone();
        bad.w2.pop();
        bad.save(&path).unwrap();
        assert!(ValueHead::load(&path).is_err());
    }

    proptest::proptest! {
        #[test]
        fn balance_keeps_successes_and_never_duplicates(s in 1usize..40, f in 0usize..120, seed in 0u64..1000) {
            let data = labelled(s, f);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = balance(data.clone(), &mut rng).unwrap();
            let succ: Vec<_> = out.examples.iter().filter(|e| e.is_success()).cloned().collect();
            let orig: Vec<_> = data.iter().filter(|e| e.is_success()).cloned().collect();
            proptest::prop_assert_eq!(succ, orig);
            let mut ids: Vec<i64> = out.examples.iter().map(|e| e.h.0[0] as i64).collect();
            let n = ids.len();
            ids.dedup();
            proptest::prop_assert_eq!(ids.len(), n);
            if f >= s {
                proptest::prop_assert_eq!(n, 2 * s);
            }
        }

        #[test]
        fn loss_bounded_for_unit_targets(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = ValueHead::init(5, 8, 4, &mut rng);
            let batch = random_batch(&mut rng, 5, 6);
            let l = p.mse_loss(&batch).unwrap();
            proptest::prop_assert!((0.0..=1.0).contains(&l));
        }
    }
}
