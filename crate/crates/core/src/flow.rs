//! Flow matching on toy data: the linear noise/data path, the velocity
//! regression loss, first-order Euler integration and teacher training.

use std::sync::atomic::{AtomicUsize, Ordering};

use log::debug;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, AdamConfig, Matrix, MlpShape, Objective, OptimizerState, ParamSet, VelocityModel};
use crate::seed::{derive_seed, rng_for};

/// A finite-support data distribution with equal mass on every point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDataset {
    pub dim: usize,
    pub support: Vec<Vec<f64>>,
}

impl ToyDataset {
    pub fn new(support: Vec<Vec<f64>>) -> Result<Self> {
        let dim = support
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::Config("dataset support is empty".into()))?;
        if dim == 0 {
            return Err(Error::Config("dataset points need at least one coordinate".into()));
        }
        if let Some(bad) = support.iter().position(|p| p.len() != dim) {
            return Err(Error::Config(format!(
                "support point {bad} has dimension {}, expected {dim}",
                support[bad].len()
            )));
        }
        if support.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("dataset support has non-finite coordinates".into()));
        }
        Ok(Self { dim, support })
    }

    pub fn from_scalars(points: &[f64]) -> Result<Self> {
        Self::new(points.iter().map(|&p| vec![p]).collect())
    }

    /// The two-point set {−3, 3}.
    pub fn two_point() -> Self {
        Self::from_scalars(&[-3.0, 3.0]).expect("valid")
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.support.clone()).map(|_| ())
    }

    /// `count` rows that cycle through the support in order.
    pub fn repeated(&self, count: usize) -> Matrix {
        let mut data = Vec::with_capacity(count * self.dim);
        for i in 0..count {
            data.extend_from_slice(&self.support[i % self.support.len()]);
        }
        Matrix::from_vec(count, self.dim, data).expect("consistent")
    }

    /// `count` i.i.d. draws, uniform over the support.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Matrix {
        let mut data = Vec::with_capacity(count * self.dim);
        for _ in 0..count {
            let i = rng.random_range(0..self.support.len());
            data.extend_from_slice(&self.support[i]);
        }
        Matrix::from_vec(count, self.dim, data).expect("consistent")
    }
}

/// Standard normal draws, `rows × dim`.
pub fn gaussian<R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Matrix {
    let data = (0..rows * dim).map(|_| rng.sample(StandardNormal)).collect();
    Matrix::from_vec(rows, dim, data).expect("consistent")
}

/// Uniform inference grid `t_j = j / n`, `j = 0..=n`; index `n` is the noise end.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeGrid {
    steps: usize,
}

impl TimeGrid {
    pub fn uniform(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("time grid needs at least one step".into()));
        }
        Ok(Self { steps })
    }

    /// Number of Euler steps `n`; the grid has `n + 1` times.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn time(&self, j: usize) -> f64 {
        assert!(j <= self.steps, "grid index {j} beyond {}", self.steps);
        j as f64 / self.steps as f64
    }

    /// Times from `t_n = 1` down to `t_0 = 0`.
    pub fn descending(&self) -> Vec<f64> {
        (0..=self.steps).rev().map(|j| self.time(j)).collect()
    }

    /// Grid index whose time equals `t` exactly.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let j = (t * self.steps as f64).round();
        if !(0.0..=self.steps as f64).contains(&j) {
            return None;
        }
        let j = j as usize;
        (self.time(j) == t).then_some(j)
    }
}

/// `(1 − t)·x0 + t·x1`.
pub fn interpolate(x0: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>> {
    if x0.len() != x1.len() {
        return Err(Error::Shape(format!(
            "interpolating vectors of length {} and {}",
            x0.len(),
            x1.len()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Usage(format!("time {t} outside [0, 1]")));
    }
    Ok(x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect())
}

/// Anything that yields a velocity for a batch of states at a common time.
pub trait VelocityField {
    fn dim(&self) -> usize;

    fn velocity(&self, x: &Matrix, t: f64) -> Result<Matrix>;
}

impl VelocityField for VelocityModel {
    fn dim(&self) -> usize {
        VelocityModel::dim(self)
    }

    fn velocity(&self, x: &Matrix, t: f64) -> Result<Matrix> {
        self.eval_batch(x, &vec![t; x.rows()])
    }
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn velocity(&self, x: &Matrix, t: f64) -> Result<Matrix> {
        (**self).velocity(x, t)
    }
}

/// `v(x, t) = c` everywhere.
#[derive(Clone, Debug)]
pub struct ConstantField(pub Vec<f64>);

impl VelocityField for ConstantField {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn velocity(&self, x: &Matrix, _t: f64) -> Result<Matrix> {
        let mut out = Matrix::zeros(x.rows(), self.0.len());
        for i in 0..x.rows() {
            out.row_mut(i).copy_from_slice(&self.0);
        }
        Ok(out)
    }
}

/// Exact flow-matching field for a single data point `a`: `v(x, t) = (x − a) / t`.
#[derive(Clone, Debug)]
pub struct SingleDatumField(pub Vec<f64>);

impl VelocityField for SingleDatumField {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn velocity(&self, x: &Matrix, t: f64) -> Result<Matrix> {
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (v, a) in out.row_mut(i).iter_mut().zip(&self.0) {
                *v = (*v - a) / t;
            }
        }
        Ok(out)
    }
}

/// Counts batch evaluations (NFE) of the wrapped field.
pub struct CountingField<F> {
    inner: F,
    calls: AtomicUsize,
}

impl<F: VelocityField> CountingField<F> {
    pub fn new(inner: F) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn evaluations(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<F: VelocityField> VelocityField for CountingField<F> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn velocity(&self, x: &Matrix, t: f64) -> Result<Matrix> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.velocity(x, t)
    }
}

/// `x + (t_to − t_from)·v(x, t_from)` for every row of `x`.
pub fn euler_step_batch<F: VelocityField + ?Sized>(field: &F, x: &Matrix, t_from: f64, t_to: f64) -> Result<Matrix> {
    if x.cols() != field.dim() {
        return Err(Error::Shape(format!(
            "state dimension {} does not match field dimension {}",
            x.cols(),
            field.dim()
        )));
    }
    let v = field.velocity(x, t_from)?;
    let dt = t_to - t_from;
    let mut next = x.clone();
    for (a, b) in next.as_mut_slice().iter_mut().zip(v.as_slice()) {
        *a += dt * b;
    }
    Ok(next)
}

pub fn euler_step<F: VelocityField + ?Sized>(field: &F, x: &[f64], t_from: f64, t_to: f64) -> Result<Vec<f64>> {
    for t in [t_from, t_to] {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Usage(format!("time {t} outside [0, 1]")));
        }
    }
    let x = Matrix::from_vec(1, x.len(), x.to_vec())?;
    Ok(euler_step_batch(field, &x, t_from, t_to)?.into_vec())
}

/// Euler-integrates a batch from `t_n = 1` to `t_0 = 0`, keeping every state.
/// Element `j` of the result holds the states at `t_j`; exactly `n` field
/// evaluations are made.
pub fn denoise_batch<F: VelocityField + ?Sized>(field: &F, x1: &Matrix, grid: &TimeGrid) -> Result<Vec<Matrix>> {
    let n = grid.steps();
    let mut states = vec![Matrix::zeros(0, 0); n + 1];
    states[n] = x1.clone();
    for j in (1..=n).rev() {
        let next = euler_step_batch(field, &states[j], grid.time(j), grid.time(j - 1))?;
        if !next.is_finite() {
            return Err(Error::non_finite(format!(
                "denoised state at step {} (t = {})",
                n - j + 1,
                grid.time(j - 1)
            )));
        }
        states[j - 1] = next;
    }
    Ok(states)
}

/// Single-sample form of [`denoise_batch`]: states indexed by grid position.
pub fn denoise<F: VelocityField + ?Sized>(field: &F, x1: &[f64], grid: &TimeGrid) -> Result<Vec<Vec<f64>>> {
    let x = Matrix::from_vec(1, x1.len(), x1.to_vec())?;
    Ok(denoise_batch(field, &x, grid)?
        .into_iter()
        .map(Matrix::into_vec)
        .collect())
}

/// Integrates from grid index `from` down to `to` (`from ≥ to`), returning the
/// final states only.
pub fn integrate<F: VelocityField + ?Sized>(
    field: &F,
    x: &Matrix,
    grid: &TimeGrid,
    from: usize,
    to: usize,
) -> Result<Matrix> {
    if from > grid.steps() || to > from {
        return Err(Error::Usage(format!(
            "cannot integrate from grid index {from} to {to} on a {}-step grid",
            grid.steps()
        )));
    }
    let mut state = x.clone();
    for j in ((to + 1)..=from).rev() {
        state = euler_step_batch(field, &state, grid.time(j), grid.time(j - 1))?;
    }
    if !state.is_finite() {
        return Err(Error::non_finite("integrated state"));
    }
    Ok(state)
}

/// Mean squared error between `v(x_i, t_i)` and a fixed target, averaged over
/// rows and dimensions. The flow-matching, trajectory and window-regression
/// losses are all instances of it.
pub struct VelocityRegression {
    pub shape: MlpShape,
    pub states: Matrix,
    pub times: Vec<f64>,
    pub targets: Matrix,
}

impl VelocityRegression {
    pub fn new(shape: MlpShape, states: Matrix, times: Vec<f64>, targets: Matrix) -> Result<Self> {
        if states.rows() == 0 {
            return Err(Error::Usage("regression batch is empty".into()));
        }
        targets.ensure_shape(states.rows(), shape.dim, "regression targets")?;
        if times.len() != states.rows() {
            return Err(Error::Shape(format!(
                "{} times for {} states",
                times.len(),
                states.rows()
            )));
        }
        Ok(Self {
            shape,
            states,
            times,
            targets,
        })
    }

    fn residual(&self, params: &ParamSet) -> Result<(nn::Trace, Matrix)> {
        let trace = self.shape.forward(params, &self.states, &self.times, None)?;
        let mut r = trace.output().expect("full forward").clone();
        for (a, b) in r.as_mut_slice().iter_mut().zip(self.targets.as_slice()) {
            *a -= b;
        }
        Ok((trace, r))
    }
}

impl Objective for VelocityRegression {
    fn value(&self, params: &ParamSet) -> Result<f64> {
        let (_, r) = self.residual(params)?;
        Ok(mean_square(r.as_slice()))
    }

    fn value_and_grad(&self, params: &ParamSet) -> Result<(f64, ParamSet)> {
        let (trace, mut r) = self.residual(params)?;
        let value = mean_square(r.as_slice());
        let scale = 2.0 / r.as_slice().len() as f64;
        r.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
        let g = self.shape.backward(params, &trace, Some(&r), None, true)?;
        Ok((value, g.params.expect("requested")))
    }
}

fn mean_square(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64
}

/// One flow-matching training example: data point, noise draw and time.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub t: f64,
}

/// Builds the regression `v(x_t, t) ≈ x1 − x0` for a batch.
pub fn flow_matching_objective(shape: MlpShape, batch: &[FlowSample]) -> Result<VelocityRegression> {
    if batch.is_empty() {
        return Err(Error::Usage("flow-matching batch is empty".into()));
    }
    let d = shape.dim;
    let mut states = Vec::with_capacity(batch.len() * d);
    let mut targets = Vec::with_capacity(batch.len() * d);
    let mut times = Vec::with_capacity(batch.len());
    for s in batch {
        if s.x0.len() != d || s.x1.len() != d {
            return Err(Error::Shape(format!("flow sample does not have dimension {d}")));
        }
        states.extend(interpolate(&s.x0, &s.x1, s.t)?);
        targets.extend(s.x1.iter().zip(&s.x0).map(|(a, b)| a - b));
        times.push(s.t);
    }
    VelocityRegression::new(
        shape,
        Matrix::from_vec(batch.len(), d, states)?,
        times,
        Matrix::from_vec(batch.len(), d, targets)?,
    )
}

/// Flow-matching loss of `model` on a batch.
pub fn fm_loss(model: &VelocityModel, batch: &[FlowSample]) -> Result<f64> {
    flow_matching_objective(model.shape(), batch)?.value(model.params())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub hidden: usize,
    pub blocks: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            blocks: 4,
            iterations: 10_000,
            batch_size: 2048,
            lr: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
}

pub struct TrainedTeacher {
    pub model: VelocityModel,
    pub history: Vec<LossRecord>,
}

/// Trains a teacher with Adam on the flow-matching loss. Each batch repeats
/// the support to `batch_size` rows and pairs it with fresh Gaussian noise and
/// `t ~ U[0, 1]`.
pub fn train_teacher(data: &ToyDataset, config: &TeacherConfig) -> Result<TrainedTeacher> {
    data.validate()?;
    if config.iterations == 0 {
        return Err(Error::Config("teacher training needs at least one iteration".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("teacher batch size must be positive".into()));
    }
    let mut model = VelocityModel::build(
        data.dim,
        config.hidden,
        config.blocks,
        derive_seed(config.seed, "teacher/init"),
    )?;
    let mut rng = rng_for(config.seed, "teacher/batches");
    let mut opt = OptimizerState::new(AdamConfig::with_lr(config.lr), model.params());
    let x0 = data.repeated(config.batch_size);
    let mut history = Vec::with_capacity(config.iterations);

    for iteration in 0..config.iterations {
        let x1 = gaussian(config.batch_size, data.dim, &mut rng);
        let times: Vec<f64> = (0..config.batch_size).map(|_| rng.random::<f64>()).collect();
        let objective = flow_path_regression(model.shape(), &x0, &x1, times)?;
        let (loss, g) = nn::value_and_grad(&objective, model.params()).map_err(|e| match e {
            Error::NonFinite { context } => Error::non_finite(format!("{context} at teacher iteration {iteration}")),
            other => other,
        })?;
        opt.step(model.params_mut(), &g)?;
        history.push(LossRecord { iteration, loss });
        if iteration % 1000 == 0 {
            debug!("teacher iteration {iteration}: loss {loss:.5}");
        }
    }
    Ok(TrainedTeacher { model, history })
}

/// Regression on `x_t = (1−t)x0 + t·x1` with target `x1 − x0`, from matrices.
pub fn flow_path_regression(shape: MlpShape, x0: &Matrix, x1: &Matrix, times: Vec<f64>) -> Result<VelocityRegression> {
    let (n, d) = (x0.rows(), x0.cols());
    x1.ensure_shape(n, d, "noise batch")?;
    if times.len() != n {
        return Err(Error::Shape(format!("{} times for {n} rows", times.len())));
    }
    let mut states = Matrix::zeros(n, d);
    let mut targets = Matrix::zeros(n, d);
    for (i, &t) in times.iter().enumerate() {
        for k in 0..d {
            let (a, b) = (x0.row(i)[k], x1.row(i)[k]);
            states.row_mut(i)[k] = (1.0 - t) * a + t * b;
            targets.row_mut(i)[k] = b - a;
        }
    }
    VelocityRegression::new(shape, states, times, targets)
}
