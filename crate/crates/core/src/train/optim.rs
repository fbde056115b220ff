//! Optimizers and early stopping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Adaptive-moment state (β₁ = 0.9, β₂ = 0.999, ε = 1e-8, bias corrected).
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Adam(Adam),
    Sgd,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, sizes: &[usize]) -> Self {
        match kind {
            OptimizerKind::Adam => OptimizerState::Adam(Adam::new(sizes)),
            OptimizerKind::Sgd => OptimizerState::Sgd,
        }
    }
}

/// One update of every parameter slice from its gradient.
pub fn optimizer_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut OptimizerState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
        return Err(Error::Shape("gradients do not match parameters".into()));
    }
    if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::numeric("optimizer", "non-finite gradient"));
    }
    match state {
        OptimizerState::Sgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                for (w, d) in p.iter_mut().zip(g.iter()) {
                    *w -= lr * d;
                }
            }
        }
        OptimizerState::Adam(a) => {
            if a.m.len() != params.len() || a.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
                return Err(Error::Shape("optimizer state does not match parameters".into()));
            }
            a.step += 1;
            let c1 = 1.0 - a.beta1.powi(a.step as i32);
            let c2 = 1.0 - a.beta2.powi(a.step as i32);
            for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                let (m, v) = (&mut a.m[i], &mut a.v[i]);
                for j in 0..p.len() {
                    m[j] = a.beta1 * m[j] + (1.0 - a.beta1) * g[j];
                    v[j] = a.beta2 * v[j] + (1.0 - a.beta2) * g[j] * g[j];
                    let mhat = m[j] / c1;
                    let vhat = v[j] / c2;
                    p[j] -= lr * mhat / (vhat.sqrt() + a.eps);
                }
            }
        }
    }
    Ok(())
}

/// Patience bookkeeping; improvement means strictly lower loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            StopDecision::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Per-epoch record of a training run. Epochs count from 1.
#[derive(Debug, Clone)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub stop_epoch: usize,
    pub wall_time_s: f64,
}

/// Wall time is excluded.
impl PartialEq for TrainHistory {
    fn eq(&self, o: &Self) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        bits(&self.train_loss) == bits(&o.train_loss)
            && bits(&self.val_loss) == bits(&o.val_loss)
            && self.best_epoch == o.best_epoch
            && self.stop_epoch == o.stop_epoch
    }
}

impl TrainHistory {
    /// `epoch,train_loss,val_loss` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for (i, (t, v)) in self.train_loss.iter().zip(&self.val_loss).enumerate() {
            s.push_str(&format!("{},{:.17e},{:.17e}\n", i + 1, t, v));
        }
        s
    }
}

/// Runs `epoch_fn` for up to `epochs` epochs under early stopping. After
/// every improving epoch the state is snapshotted; the best snapshot is
/// returned.
pub fn fit_with_early_stopping<S, F>(
    epochs: usize,
    patience: usize,
    state: &mut S,
    mut epoch_fn: F,
) -> Result<(S, TrainHistory)>
where
    S: Clone,
    F: FnMut(&mut S, usize) -> Result<(f64, f64)>,
{
    if epochs == 0 || patience == 0 {
        return Err(Error::Config("epochs and patience must be positive".into()));
    }
    let start = std::time::Instant::now();
    let mut stopper = EarlyStopping::new(patience);
    let mut best = state.clone();
    let mut hist = TrainHistory {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
        stop_epoch: 0,
        wall_time_s: 0.0,
    };
    for epoch in 1..=epochs {
        let (train, val) = epoch_fn(state, epoch)?;
        if !train.is_finite() || !val.is_finite() {
            return Err(Error::numeric(
                "training",
                format!("epoch {epoch}: train loss {train}, validation loss {val}"),
            ));
        }
        hist.train_loss.push(train);
        hist.val_loss.push(val);
        hist.stop_epoch = epoch;
        match stopper.observe(epoch, val) {
            StopDecision::Improved => best = state.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    hist.best_epoch = stopper.best_epoch();
    hist.wall_time_s = start.elapsed().as_secs_f64();
    Ok((best, hist))
}
