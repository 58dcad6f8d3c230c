//! First-order optimizers over flat parameter vectors.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Adam with lazily-touched moments; `Sgd` ignores the moment buffers.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub cfg: AdamConfig,
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, cfg: AdamConfig, n_params: usize) -> Self {
        Self { kind, cfg, m: vec![T::zero(); n_params], v: vec![T::zero(); n_params], step: 0 }
    }

    pub fn adam(lr: f64, n_params: usize) -> Self {
        Self::new(OptimizerKind::Adam, AdamConfig { lr, ..AdamConfig::default() }, n_params)
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    pub fn scale_lr(&mut self, factor: f64) {
        self.cfg.lr *= factor;
    }

    /// Dense update of every parameter.
    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        self.begin_step();
        for i in 0..params.len() {
            self.update_one(params, grad[i], i);
        }
    }

    /// Update only the listed coordinates (sparse gradient rows).
    pub fn step_sparse(&mut self, params: &mut [T], grad: &[T], touched: &[usize]) {
        self.begin_step();
        for &i in touched {
            self.update_one(params, grad[i], i);
        }
    }

    fn begin_step(&mut self) {
        self.step += 1;
    }

    #[inline]
    fn update_one(&mut self, params: &mut [T], g: T, i: usize) {
        let lr = T::of(self.cfg.lr);
        match self.kind {
            OptimizerKind::Sgd => params[i] -= lr * g,
            OptimizerKind::Adam => {
                let (b1, b2) = (T::of(self.cfg.beta1), T::of(self.cfg.beta2));
                self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
                self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
                let t = self.step as i32;
                let mhat = self.m[i] / (T::one() - b1.powi(t));
                let vhat = self.v[i] / (T::one() - b2.powi(t));
                params[i] -= lr * mhat / (vhat.sqrt() + T::of(self.cfg.eps));
            }
        }
    }
}

/// Multiplies the learning rate by `factor` after `patience` evaluations
/// without improvement.
#[derive(Clone, Debug)]
pub struct PlateauDecay {
    pub factor: f64,
    pub patience: usize,
    best: f64,
    bad: usize,
}

impl PlateauDecay {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self { factor, patience, best: f64::NEG_INFINITY, bad: 0 }
    }

    /// Records a higher-is-better metric; returns true if it is a new best.
    pub fn observe<T: Scalar>(&mut self, metric: f64, opt: &mut Optimizer<T>) -> bool {
        if metric > self.best {
            self.best = metric;
            self.bad = 0;
            return true;
        }
        self.bad += 1;
        if self.bad >= self.patience {
            opt.scale_lr(self.factor);
            self.bad = 0;
        }
        false
    }
}
