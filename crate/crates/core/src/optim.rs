//! Loss, optimizer and the validation-loss callbacks driving the training loop.

use crate::error::{Error, Result};
use crate::layers::Param;
use crate::model::{Model, Snapshot};
use crate::tensor::{Real, Tensor};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-7;

/// Batch-mean categorical cross-entropy of probabilities `yhat` against one-hot `y`.
///
/// Returns the loss and the gradient with respect to the pre-softmax logits,
/// `(yhat - y) / N`.
pub fn categorical_crossentropy<T: Real>(yhat: &Tensor<T>, y: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    yhat.expect_same_shape(y)?;
    yhat.expect_rank(2, "categorical_crossentropy")?;
    let (n, k) = (y.shape()[0], y.shape()[1]);
    validate_one_hot(y)?;
    let mut total = 0.0;
    for (p_row, y_row) in yhat.data().chunks(k).zip(y.data().chunks(k)) {
        for (&p, &t) in p_row.iter().zip(y_row) {
            if t != T::zero() {
                let p = p.as_f64().clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                total -= t.as_f64() * p.ln();
            }
        }
    }
    let inv_n = T::one() / T::from_f64(n as f64);
    let dz = yhat.zip_map(y, |p, t| (p - t) * inv_n)?;
    Ok((total / n as f64, dz))
}

pub fn validate_one_hot<T: Real>(y: &Tensor<T>) -> Result<()> {
    let k = y.shape()[1];
    for (i, row) in y.data().chunks(k).enumerate() {
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || zeros != k - 1 {
            return Err(Error::Label(format!("label row {i} is not one-hot: {row:?}")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments. Moment buffers are created on the first
/// step and must keep matching the parameter list afterwards.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a mut Param<T>>,
    {
        let params: Vec<&mut Param<T>> = params.into_iter().collect();
        if self.t == 0 {
            self.m = params.iter().map(|p| p.value.zeros_like()).collect();
            self.v = self.m.clone();
        }
        if params.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.value.shape() != self.m[i].shape() || p.grad.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {i}: shape {:?} / grad {:?} / moment {:?} disagree",
                    p.value.shape(),
                    p.grad.shape(),
                    self.m[i].shape()
                )));
            }
        }

        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - beta1), T::from_f64(1.0 - beta2));
        let (lr, eps, bc1, bc2) = (T::from_f64(lr), T::from_f64(eps), T::from_f64(bc1), T::from_f64(bc2));

        for (i, p) in params.into_iter().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = p.grad.data();
            for (j, theta) in p.value.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Reduce-on-plateau learning-rate schedule monitoring validation loss.
///
/// An epoch improves when `loss < best - min_delta`. After more than
/// `patience` consecutive non-improving epochs the rate is multiplied by
/// `factor` (never below `min_lr`) and the counter restarts.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub best: f64,
    pub wait: usize,
    pub patience: usize,
    pub factor: f64,
    pub min_delta: f64,
    pub min_lr: f64,
    lr0: f64,
    reductions: i32,
}

impl PlateauScheduler {
    pub fn new(lr0: f64, patience: usize, factor: f64, min_delta: f64, min_lr: f64) -> Result<Self> {
        if !(factor > 0.0 && factor < 1.0) {
            return Err(Error::Config(format!("plateau factor must be in (0,1), got {factor}")));
        }
        if !(lr0 > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr0}")));
        }
        Ok(Self {
            best: f64::INFINITY,
            wait: 0,
            patience,
            factor,
            min_delta,
            min_lr,
            lr0,
            reductions: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        // Computed from the reduction count so the trace is exactly lr0 * factor^k.
        (self.lr0 * self.factor.powi(self.reductions)).max(self.min_lr)
    }

    pub fn reductions(&self) -> i32 {
        self.reductions
    }

    /// Feeds one epoch's validation loss and returns the learning rate for the next epoch.
    pub fn update(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.wait = 0;
        } else {
            self.wait += 1;
            if self.wait > self.patience {
                if self.lr() > self.min_lr {
                    self.reductions += 1;
                }
                self.wait = 0;
            }
        }
        self.lr()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Early stopping on validation loss with best-weight snapshots.
///
/// Any strict decrease of the loss is an improvement and snapshots the model.
/// Training stops once `patience` consecutive epochs fail to improve.
#[derive(Debug, Clone)]
pub struct EarlyStopping<T> {
    pub best: f64,
    pub wait: usize,
    pub patience: usize,
    pub best_epoch: Option<usize>,
    best_weights: Option<Snapshot<T>>,
}

impl<T: Real> EarlyStopping<T> {
    pub fn new(patience: usize) -> Self {
        Self {
            best: f64::INFINITY,
            wait: 0,
            patience,
            best_epoch: None,
            best_weights: None,
        }
    }

    pub fn update(&mut self, epoch: usize, val_loss: f64, model: &Model<T>) -> StopDecision {
        if val_loss < self.best {
            self.best = val_loss;
            self.wait = 0;
            self.best_epoch = Some(epoch);
            self.best_weights = Some(model.snapshot());
            StopDecision::Continue
        } else {
            self.wait += 1;
            if self.wait >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }

    pub fn best_weights(&self) -> Option<&Snapshot<T>> {
        self.best_weights.as_ref()
    }

    /// Restores the best-epoch snapshot; returns false if no epoch was recorded.
    pub fn restore(&self, model: &mut Model<T>) -> Result<bool> {
        match &self.best_weights {
            Some(snap) => {
                model.restore(snap)?;
                Ok(true)
            }
            None => Ok(false),
        }
    }
}
