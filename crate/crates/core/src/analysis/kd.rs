use log::debug;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{make_key_schedule, sample_student_batch, KeySchedule, LrSchedule};
use crate::error::{Error, Result};
use crate::flow::{gaussian, integrate, LossRecord, TimeGrid, ToyDataset, VelocityRegression};
use crate::nn::{self, AdamConfig, Matrix, OptimizerState, VelocityModel};
use crate::seed::{derive_seed, rng_for};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KdInit {
    Teacher,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdConfig {
    pub windows: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    /// Start points drawn per window before training.
    pub pool_size: usize,
    pub init: KdInit,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            windows: 2,
            iterations: 4000,
            batch_size: 256,
            lr: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            pool_size: 32768,
            init: KdInit::Teacher,
            seed: 0,
        }
    }
}

impl KdConfig {
    pub fn validate(&self, grid: &TimeGrid) -> Result<KeySchedule> {
        if self.windows == 0 {
            return Err(Error::Config("KD baseline needs at least one window".into()));
        }
        if self.iterations == 0 || self.batch_size == 0 || self.pool_size == 0 {
            return Err(Error::Config(
                "KD iterations, batch size and pool size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "KD learning rate must be positive, got {}",
                self.lr
            )));
        }
        make_key_schedule(grid.steps(), self.windows)
    }
}

/// Regression data for one window: start states at `t_s`, and the velocity
/// that carries each start to the teacher's state at the window end.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowTargets {
    pub states: Matrix,
    pub times: Vec<f64>,
    pub targets: Matrix,
}

/// Teacher targets for starts taken at window `w` (upper key `w + 1`).
pub fn window_targets(
    teacher: &VelocityModel,
    schedule: &KeySchedule,
    w: usize,
    starts: &Matrix,
) -> Result<WindowTargets> {
    if w >= schedule.intervals() {
        return Err(Error::Usage(format!("window {w} is out of range")));
    }
    let grid = schedule.grid();
    let (hi, lo) = (schedule.grid_index(w + 1), schedule.grid_index(w));
    let (ts, te) = (schedule.time(w + 1), schedule.time(w));
    let ends = integrate(teacher, starts, &grid, hi, lo)?;
    let mut targets = ends;
    for (e, s) in targets.as_mut_slice().iter_mut().zip(starts.as_slice()) {
        *e = (*e - s) / (te - ts);
    }
    Ok(WindowTargets {
        states: starts.clone(),
        times: vec![ts; starts.rows()],
        targets,
    })
}

pub struct KdOutcome {
    pub student: VelocityModel,
    pub schedule: KeySchedule,
    pub history: Vec<LossRecord>,
}

/// Window-based knowledge distillation whose start points are forward
/// diffused from `p_d` rather than taken from teacher trajectories.
pub fn kd_baseline_distill(
    teacher: &VelocityModel,
    p_d: &ToyDataset,
    grid: &TimeGrid,
    config: &KdConfig,
) -> Result<KdOutcome> {
    let schedule = config.validate(grid)?;
    p_d.validate()?;
    if p_d.dim != teacher.dim() {
        return Err(Error::Shape(format!(
            "distillation data has dimension {}, teacher {}",
            p_d.dim,
            teacher.dim()
        )));
    }
    let d = teacher.dim();
    let mut pool_rng = rng_for(config.seed, "kd/pool");
    let mut states = Vec::new();
    let mut targets = Vec::new();
    let mut times = Vec::new();
    for w in 0..config.windows {
        let ts = schedule.time(w + 1);
        let x0 = p_d.sample(config.pool_size, &mut pool_rng);
        let z = gaussian(config.pool_size, d, &mut pool_rng);
        let mut starts = x0;
        for (a, b) in starts.as_mut_slice().iter_mut().zip(z.as_slice()) {
            *a = (1.0 - ts) * *a + ts * b;
        }
        let wt = window_targets(teacher, &schedule, w, &starts)?;
        states.extend_from_slice(wt.states.as_slice());
        targets.extend_from_slice(wt.targets.as_slice());
        times.extend(wt.times);
    }
    let rows = times.len();
    let states = Matrix::from_vec(rows, d, states)?;
    let targets = Matrix::from_vec(rows, d, targets)?;

    let mut student = match config.init {
        KdInit::Teacher => VelocityModel::from_params(teacher.shape(), teacher.params().clone())?,
        KdInit::Random => VelocityModel::build(
            d,
            teacher.hidden(),
            teacher.shape().blocks,
            derive_seed(config.seed, "kd/init"),
        )?,
    };
    let mut opt = OptimizerState::new(AdamConfig::with_lr(config.lr), student.params());
    let mut rng = rng_for(config.seed, "kd/batches");
    let mut history = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        opt.config.lr = config.lr * config.lr_schedule.factor(iteration, config.iterations);
        let idx: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..rows)).collect();
        let obj = VelocityRegression::new(
            student.shape(),
            states.select_rows(&idx),
            idx.iter().map(|&i| times[i]).collect(),
            targets.select_rows(&idx),
        )?;
        let (loss, g) = nn::value_and_grad(&obj, student.params()).map_err(|e| match e {
            Error::NonFinite { context } => Error::non_finite(format!("{context} at KD iteration {iteration}")),
            other => other,
        })?;
        opt.step(student.params_mut(), &g)?;
        history.push(LossRecord { iteration, loss });
        if iteration % 500 == 0 {
            debug!("kd iteration {iteration}: loss {loss:.5}");
        }
    }
    Ok(KdOutcome {
        student,
        schedule,
        history,
    })
}

/// One Euler step per window from `z` at `t = 1`.
pub fn sample_kd(outcome: &KdOutcome, z: &Matrix) -> Result<(Matrix, usize)> {
    sample_student_batch(&outcome.student, &outcome.schedule, z)
}
