//! Mini-batch training on the Train split.
//!
//! Training is single-threaded and bit-reproducible for a fixed seed: the
//! initial weights and each epoch's shuffle come from independent seeded
//! streams, and all arithmetic runs in a fixed order.

use rand::seq::SliceRandom;

use super::layers::Mode;
use super::loss::{nrmse_grad, nrmse_loss};
use super::model::{Model, ModelSpec, Network, TrainingMeta};
use crate::patch::{Dataset, Patch, Split};
use crate::rng::stream;
use crate::{Error, Result};

const SHUFFLE_STREAM: u64 = 0x5348_5546;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Output normalizers `(max_w, max_v)`; taken from the dataset when absent.
    pub normalizers: Option<(f64, f64)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 20,
            optimizer: Optimizer::default(),
            seed: 0,
            normalizers: None,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is allowed and leaves the weights untouched.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidArg(format!("learning rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArg("batch size must be at least 1".into()));
        }
        if let Some((w, v)) = self.normalizers {
            if !(w > 0.0 && v > 0.0) {
                return Err(Error::InvalidArg(format!("normalizers must be positive, got ({w}, {v})")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
}

struct OptState {
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptState {
    fn new(net: &mut Network) -> Self {
        let shapes: Vec<usize> = net.params_mut().iter().map(|t| t.len()).collect();
        OptState {
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    fn apply(&mut self, net: &mut Network, grads: &[Vec<f64>], lr: f64, opt: Optimizer) {
        self.step += 1;
        for (k, (param, g)) in net.params_mut().into_iter().zip(grads).enumerate() {
            match opt {
                Optimizer::Sgd => {
                    for (w, gi) in param.data.iter_mut().zip(g) {
                        *w -= lr * gi;
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(self.step);
                    let c2 = 1.0 - beta2.powi(self.step);
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for i in 0..g.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let mhat = m[i] / c1;
                        let vhat = v[i] / c2;
                        param.data[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

fn truths(ds: &Dataset, idx: &[usize]) -> Vec<(f64, f64)> {
    idx.iter().map(|&i| (ds.samples[i].w_star, ds.samples[i].v_star)).collect()
}

/// Mean per-sample inference-mode loss over `idx`.
fn split_loss(net: &Network, ds: &Dataset, idx: &[usize], norm: (f64, f64)) -> Result<f64> {
    let patches: Vec<&Patch> = idx.iter().map(|&i| &ds.samples[i].patch).collect();
    let preds: Vec<(f64, f64)> = net.infer_refs(&patches)?.into_iter().map(|(a, b)| (a * norm.0, b * norm.1)).collect();
    Ok(nrmse_loss(&preds, &truths(ds, idx), norm.0, norm.1)?.mean)
}

pub fn train(ds: &Dataset, spec: &ModelSpec, cfg: &TrainConfig) -> Result<Model> {
    train_with_progress(ds, spec, cfg, |_| {})
}

/// Trains from a seeded initialization, calling `progress` after every epoch.
pub fn train_with_progress(
    ds: &Dataset,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochReport),
) -> Result<Model> {
    cfg.validate()?;
    spec.validate()?;
    let train_idx = ds.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if ds.side != spec.input_side {
        return Err(Error::ShapeMismatch {
            expected: format!("patch side {}", spec.input_side),
            got: format!("dataset side {}", ds.side),
        });
    }
    // Rounded to f32 so the saved model reproduces the same outputs.
    let norm = cfg.normalizers.unwrap_or((ds.max_w, ds.max_v));
    let norm = (norm.0 as f32 as f64, norm.1 as f32 as f64);
    if !(norm.0 > 0.0 && norm.1 > 0.0) {
        return Err(Error::InvalidArg(format!("normalizers must be positive, got {norm:?}")));
    }
    let test_idx = ds.indices(Split::Test);
    let mut net = Network::new(spec.clone(), cfg.seed)?;
    let mut state = OptState::new(&mut net);
    let mut meta = TrainingMeta { seed: cfg.seed, ..TrainingMeta::default() };

    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut stream(cfg.seed, &[SHUFFLE_STREAM, epoch as u64]));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = net.input(batch.iter().map(|&i| &ds.samples[i].patch))?;
            let (y, tape) = net.forward(&x, Mode::Train);
            let tape = tape.expect("training forward records a tape");
            let preds: Vec<(f64, f64)> = y.chunks(2).map(|c| (c[0] * norm.0, c[1] * norm.1)).collect();
            let t = truths(ds, batch);
            let loss = nrmse_loss(&preds, &t, norm.0, norm.1)?;
            if !loss.sum.is_finite() {
                return Err(Error::DivergenceDetected { epoch, loss: loss.sum });
            }
            total += loss.sum;
            let dy: Vec<f64> = nrmse_grad(&preds, &t, norm.0, norm.1)?.into_iter().flat_map(|(a, b)| [a, b]).collect();
            let grads = net.backward(&tape, &dy);
            net.update_running(&tape);
            state.apply(&mut net, &grads, cfg.learning_rate, cfg.optimizer);
        }
        let train_loss = total / train_idx.len() as f64;
        let test_loss = if test_idx.is_empty() { None } else { Some(split_loss(&net, ds, &test_idx, norm)?) };
        if let Some(l) = test_loss.filter(|l| !l.is_finite()) {
            return Err(Error::DivergenceDetected { epoch, loss: l });
        }
        meta.train_losses.push(train_loss);
        meta.test_losses.push(test_loss.unwrap_or(f64::NAN));
        meta.epochs_run = epoch + 1;
        progress(&EpochReport { epoch, train_loss, test_loss });
    }
    net.quantize();
    Ok(Model { net, normalizers: norm, meta })
}
