//! Adam with an optional memory-factored second moment.
//!
//! For a matrix parameter the full Adam second moment costs one value per
//! element. The factored estimator keeps exponential moving averages of the
//! row-wise and column-wise means of the squared gradient instead, and
//! reconstructs the per-element estimate as the outer product of the two
//! vectors divided by the mean of either one. An r x c matrix then needs
//! r + c state values rather than r * c, while row and column marginals of
//! the reconstruction match those of the full estimator exactly.
//!
//! The first-moment buffer is skipped entirely when `beta1 == 0`, which both
//! halves optimizer memory and matches how the layers here are trained.

use crate::error::{Error, Result};
use crate::kernel::Matrix;

/// Warmup-then-inverse-square-root learning-rate schedule.
///
/// Linear ramp from 0 to `base_lr` over `warmup_steps`, then decay
/// proportional to 1/sqrt(step), continuous at the boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_steps: u64) -> Result<Self> {
        if !(base_lr > 0.0) || warmup_steps == 0 {
            return Err(Error::invalid(format!(
                "learning-rate schedule needs base_lr > 0 and warmup_steps > 0, got {base_lr} and {warmup_steps}"
            )));
        }
        Ok(LrSchedule {
            base_lr,
            warmup_steps,
        })
    }

    /// Learning rate at a 1-based step.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step == 0 {
            return Err(Error::invalid("schedule step is 1-based, got 0"));
        }
        let s = step as f64;
        let w = self.warmup_steps as f64;
        Ok(if step <= self.warmup_steps {
            self.base_lr * s / w
        } else {
            self.base_lr * (w / s).sqrt()
        })
    }
}

/// Whether matrix parameters use the factored second moment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactoredMode {
    /// Factor parameters that are genuinely two-dimensional (both dims >= 2)
    /// and large enough for the saving to matter (>= 2048 elements).
    Auto,
    /// Factor every parameter. For an r x 1 or 1 x c parameter the
    /// reconstruction degenerates to the full estimator exactly.
    On,
    /// Full second moment everywhere.
    Off,
}

impl Default for FactoredMode {
    fn default() -> Self {
        FactoredMode::Auto
    }
}

impl FactoredMode {
    /// Auto threshold: element count at which factoring kicks in.
    pub const AUTO_MIN_ELEMENTS: usize = 2048;

    fn applies_to(self, rows: usize, cols: usize) -> bool {
        match self {
            FactoredMode::On => true,
            FactoredMode::Off => false,
            FactoredMode::Auto => rows >= 2 && cols >= 2 && rows * cols >= Self::AUTO_MIN_ELEMENTS,
        }
    }
}

impl std::str::FromStr for FactoredMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(FactoredMode::Auto),
            "on" => Ok(FactoredMode::On),
            "off" => Ok(FactoredMode::Off),
            other => Err(Error::Config(format!(
                "unknown factored mode {other:?}, expected auto, on, or off"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    /// First-moment decay. Zero skips the momentum buffer entirely.
    pub beta1: f64,
    /// Second-moment decay.
    pub beta2: f64,
    /// Added to the square-rooted second moment in the denominator.
    pub epsilon: f64,
    pub factored: FactoredMode,
    pub schedule: LrSchedule,
}

impl AdamConfig {
    pub fn new(schedule: LrSchedule) -> Self {
        AdamConfig {
            beta1: 0.0,
            beta2: 0.999,
            epsilon: 1e-8,
            factored: FactoredMode::Auto,
            schedule,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "adam needs beta1, beta2 in [0, 1) and epsilon > 0, got {}, {}, {}",
                self.beta1, self.beta2, self.epsilon
            )))
        }
    }
}

/// EMA update of the factored state from one squared-gradient matrix.
pub fn factored_update(
    row_avg: &mut [f64],
    col_avg: &mut [f64],
    grad_sq: &Matrix,
    beta2: f64,
) -> Result<()> {
    if row_avg.len() != grad_sq.rows() || col_avg.len() != grad_sq.cols() {
        return Err(Error::Shape {
            op: "factored_update",
            lhs: (row_avg.len(), col_avg.len()),
            rhs: grad_sq.shape(),
        });
    }
    for (r, m) in row_avg.iter_mut().zip(grad_sq.row_means()) {
        *r = beta2 * *r + (1.0 - beta2) * m;
    }
    for (c, m) in col_avg.iter_mut().zip(grad_sq.col_means()) {
        *c = beta2 * *c + (1.0 - beta2) * m;
    }
    debug_assert!(factored_means_agree(row_avg, col_avg));
    Ok(())
}

/// Reconstruct the per-element second-moment estimate from factored state:
/// outer(row_avg, col_avg) / mean(row_avg). All-zero state gives all zeros.
pub fn factored_reconstruct(row_avg: &[f64], col_avg: &[f64]) -> Matrix {
    let mean_r: f64 = row_avg.iter().sum::<f64>() / row_avg.len().max(1) as f64;
    if mean_r == 0.0 {
        return Matrix::zeros(row_avg.len(), col_avg.len());
    }
    Matrix::from_fn(row_avg.len(), col_avg.len(), |i, j| {
        row_avg[i] * col_avg[j] / mean_r
    })
}

/// Both vectors average the same squared-gradient entries, so their means
/// must agree up to float noise after every update.
fn factored_means_agree(row_avg: &[f64], col_avg: &[f64]) -> bool {
    let mr: f64 = row_avg.iter().sum::<f64>() / row_avg.len().max(1) as f64;
    let mc: f64 = col_avg.iter().sum::<f64>() / col_avg.len().max(1) as f64;
    (mr - mc).abs() <= 1e-9 * mr.abs().max(mc.abs()).max(1.0)
}

#[derive(Debug, Clone)]
enum SecondMoment {
    Full(Matrix),
    Factored { row_avg: Vec<f64>, col_avg: Vec<f64> },
}

/// Optimizer state for one parameter.
#[derive(Debug, Clone)]
pub struct ParamState {
    shape: (usize, usize),
    second: SecondMoment,
    first: Option<Matrix>,
}

impl ParamState {
    fn new(rows: usize, cols: usize, config: &AdamConfig) -> Self {
        let second = if config.factored.applies_to(rows, cols) {
            SecondMoment::Factored {
                row_avg: vec![0.0; rows],
                col_avg: vec![0.0; cols],
            }
        } else {
            SecondMoment::Full(Matrix::zeros(rows, cols))
        };
        let first = (config.beta1 > 0.0).then(|| Matrix::zeros(rows, cols));
        ParamState {
            shape: (rows, cols),
            second,
            first,
        }
    }

    pub fn is_factored(&self) -> bool {
        matches!(self.second, SecondMoment::Factored { .. })
    }

    /// Stored second-moment values: r + c factored, r * c full.
    pub fn second_moment_len(&self) -> usize {
        match &self.second {
            SecondMoment::Full(v) => v.len(),
            SecondMoment::Factored { row_avg, col_avg } => row_avg.len() + col_avg.len(),
        }
    }

    /// Total state values including the first moment when allocated.
    pub fn value_count(&self) -> usize {
        self.second_moment_len() + self.first.as_ref().map_or(0, Matrix::len)
    }

    fn apply(&mut self, param: &mut Matrix, grad: &Matrix, lr: f64, t: u64, c: &AdamConfig) -> Result<()> {
        if param.shape() != self.shape || grad.shape() != self.shape {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: param.shape(),
                rhs: grad.shape(),
            });
        }
        let corr2 = 1.0 - c.beta2.powi(t as i32);
        if let Some(m) = self.first.as_mut() {
            for (mv, gv) in m.data_mut().iter_mut().zip(grad.data()) {
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
            }
        }
        let corr1 = 1.0 - c.beta1.powi(t as i32);
        let first = self.first.as_ref();
        let numerator = |idx: usize| match first {
            Some(m) => m.data()[idx] / corr1,
            None => grad.data()[idx],
        };
        match &mut self.second {
            SecondMoment::Full(v) => {
                for (idx, (vv, gv)) in v.data_mut().iter_mut().zip(grad.data()).enumerate() {
                    *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                    let vhat = *vv / corr2;
                    param.data_mut()[idx] -= lr * numerator(idx) / (vhat.sqrt() + c.epsilon);
                }
            }
            SecondMoment::Factored { row_avg, col_avg } => {
                let grad_sq = grad.map(|g| g * g);
                factored_update(row_avg, col_avg, &grad_sq, c.beta2)?;
                let mean_r: f64 = row_avg.iter().sum::<f64>() / row_avg.len() as f64;
                let (rows, cols) = self.shape;
                for i in 0..rows {
                    for j in 0..cols {
                        let v = if mean_r == 0.0 {
                            0.0
                        } else {
                            row_avg[i] * col_avg[j] / mean_r
                        };
                        let vhat = v / corr2;
                        let idx = i * cols + j;
                        param.data_mut()[idx] -= lr * numerator(idx) / (vhat.sqrt() + c.epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Adam over a fixed list of parameters. State is allocated on the first
/// step from the observed shapes and shape-checked thereafter.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    states: Vec<ParamState>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Adam {
            config,
            states: Vec::new(),
            step: 0,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn states(&self) -> &[ParamState] {
        &self.states
    }

    /// Total optimizer state values across all parameters.
    pub fn state_value_count(&self) -> usize {
        self.states.iter().map(ParamState::value_count).sum()
    }

    /// One update over all parameters. Returns the learning rate used.
    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix]) -> Result<f64> {
        if params.len() != grads.len() {
            return Err(Error::invalid(format!(
                "adam got {} params but {} grads",
                params.len(),
                grads.len()
            )));
        }
        if self.states.is_empty() {
            self.states = params
                .iter()
                .map(|p| ParamState::new(p.rows(), p.cols(), &self.config))
                .collect();
        } else if self.states.len() != params.len() {
            return Err(Error::invalid(format!(
                "adam state tracks {} params, got {}",
                self.states.len(),
                params.len()
            )));
        }
        self.step += 1;
        let lr = self.config.schedule.lr_at(self.step)?;
        for ((p, g), st) in params.iter_mut().zip(grads).zip(&mut self.states) {
            st.apply(p, g, lr, self.step, &self.config)?;
        }
        Ok(lr)
    }
}
