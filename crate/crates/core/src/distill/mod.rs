//! Student side: key schedule, trajectory loss, latent queues, the
//! distillation loop and few-step sampling.

mod queue;
mod schedule;

pub use queue::{LatentQueues, QueueEntry};
pub use schedule::{make_key_schedule, KeySchedule};

use std::fs;
use std::path::Path;

use log::debug;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{
    discriminate, extract_features, DiscriminatorObjective, FeatureTapConfig, GeneratorLoss, GeneratorObjective,
    ProjectionHead,
};
use crate::error::{Error, Result};
use crate::flow::{euler_step_batch, gaussian, CountingField, VelocityField, VelocityRegression};
use crate::nn::{self, AdamConfig, Matrix, Objective, OptimizerState, ParamSet, VelocityModel};
use crate::seed::{derive_indexed, derive_seed, rng_for, rng_from_seed};
use crate::trajstore::TrajectoryStore;

/// One projection head per student step, or a single head shared by all.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    #[default]
    PerTimestep,
    Shared,
}

/// Where the real latent compared against `l^gen_{t'_k}` comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RealSource {
    /// The key latent of the trajectory carried through the queues with the generated latent.
    #[default]
    Queued,
    /// The key latent of the trajectory sampled for the current trajectory update.
    Fresh,
}

/// Per-round learning-rate multiplier shared by the student and the heads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `½(1 + cos(π·round/rounds))`, reaching zero after the last round.
    #[default]
    Cosine,
}

impl LrSchedule {
    pub fn factor(self, round: usize, rounds: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * round as f64 / rounds.max(1) as f64).cos()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Student steps.
    pub m: usize,
    /// Teacher grid steps; must match the store.
    pub n: usize,
    pub lambda_adv: f64,
    pub student_lr: f64,
    pub head_lr: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    /// Training rounds; each round visits `k = m−1 … 0`.
    pub rounds: usize,
    /// Set from the run's root seed, never read from a config file.
    #[serde(skip)]
    pub seed: u64,
    /// Defaults to the last block for `t > 0` and the middle block at `t = 0`.
    pub taps: Option<FeatureTapConfig>,
    /// Maximum entries per queue.
    pub queue_capacity: usize,
    pub heads: HeadMode,
    pub generator_loss: GeneratorLoss,
    pub real_source: RealSource,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            m: 5,
            n: 50,
            lambda_adv: 0.1,
            student_lr: 1e-4,
            head_lr: 1e-2,
            lr_schedule: LrSchedule::Cosine,
            batch_size: 256,
            rounds: 400,
            seed: 0,
            taps: None,
            queue_capacity: 64 * 256,
            heads: HeadMode::PerTimestep,
            generator_loss: GeneratorLoss::NonSaturating,
            real_source: RealSource::Queued,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        KeySchedule::new(self.n, self.m)?;
        if !(self.lambda_adv >= 0.0 && self.lambda_adv.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_adv must be >= 0, got {}",
                self.lambda_adv
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("distillation batch size must be positive".into()));
        }
        for (what, lr) in [("student_lr", self.student_lr), ("head_lr", self.head_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{what} must be positive, got {lr}")));
            }
        }
        if self.queue_capacity < self.batch_size {
            return Err(Error::Config(format!(
                "queue capacity {} cannot hold one batch of {}",
                self.queue_capacity, self.batch_size
            )));
        }
        Ok(())
    }

    pub fn adversarial(&self) -> bool {
        self.lambda_adv > 0.0
    }

    fn head_count(&self) -> usize {
        match self.heads {
            HeadMode::PerTimestep => self.m,
            HeadMode::Shared => 1,
        }
    }

    fn head_for(&self, k: usize) -> usize {
        match self.heads {
            HeadMode::PerTimestep => k,
            HeadMode::Shared => 0,
        }
    }
}

/// The trajectory regression for one key interval `t'_{k+1} → t'_k`:
/// `s(l_{k+1}, t'_{k+1}) ≈ (l_k − l_{k+1}) / (t'_k − t'_{k+1})`.
pub fn trajectory_objective(
    student: &VelocityModel,
    upper: &Matrix,
    lower: &Matrix,
    schedule: &KeySchedule,
    k: usize,
) -> Result<VelocityRegression> {
    let m = schedule.intervals();
    if k >= m {
        return Err(Error::Usage(format!("interval index {k} outside 0..{m}")));
    }
    lower.ensure_shape(upper.rows(), upper.cols(), "lower key latents")?;
    let (t_hi, t_lo) = (schedule.time(k + 1), schedule.time(k));
    let mut target = lower.clone();
    for (a, b) in target.as_mut_slice().iter_mut().zip(upper.as_slice()) {
        *a = (*a - b) / (t_lo - t_hi);
    }
    VelocityRegression::new(student.shape(), upper.clone(), vec![t_hi; upper.rows()], target)
}

/// Trajectory loss for one trajectory's key latents (ordered `t'_m … t'_0`).
pub fn traj_loss(student: &VelocityModel, keys: &[Vec<f64>], schedule: &KeySchedule, k: usize) -> Result<f64> {
    let m = schedule.intervals();
    if keys.len() != m + 1 {
        return Err(Error::Shape(format!("{} key latents for m = {m}", keys.len())));
    }
    if k >= m {
        return Err(Error::Usage(format!("interval index {k} outside 0..{m}")));
    }
    let upper = Matrix::from_rows(&[&keys[m - k - 1]])?;
    let lower = Matrix::from_rows(&[&keys[m - k]])?;
    trajectory_objective(student, &upper, &lower, schedule, k)?.value(student.params())
}

/// Runs `m` Euler steps along the key times from `z` at `t = 1`. Returns the
/// samples and the number of velocity evaluations.
pub fn sample_student_batch<F: VelocityField>(field: F, schedule: &KeySchedule, z: &Matrix) -> Result<(Matrix, usize)> {
    let counted = CountingField::new(field);
    let mut x = z.clone();
    for k in (0..schedule.intervals()).rev() {
        x = euler_step_batch(&counted, &x, schedule.time(k + 1), schedule.time(k))?;
    }
    if !x.is_finite() {
        return Err(Error::non_finite("student sample"));
    }
    Ok((x, counted.evaluations()))
}

pub fn sample_student<F: VelocityField>(field: F, schedule: &KeySchedule, z: &[f64]) -> Result<(Vec<f64>, usize)> {
    let (x, nfe) = sample_student_batch(field, schedule, &Matrix::from_vec(1, z.len(), z.to_vec())?)?;
    Ok((x.into_vec(), nfe))
}

/// One row of the per-iteration metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillMetrics {
    pub round: usize,
    pub k: usize,
    pub traj_loss: f64,
    pub d_loss: Option<f64>,
    pub g_loss: Option<f64>,
    pub p_real: Option<f64>,
    pub p_fake: Option<f64>,
    pub queue_sizes: Vec<usize>,
}

impl DistillMetrics {
    pub const CSV_HEADER: &'static str = "iter,k,traj_loss,d_loss,g_loss,p_real,p_fake,queue_sizes";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let sizes: Vec<String> = self.queue_sizes.iter().map(usize::to_string).collect();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.round,
            self.k,
            self.traj_loss,
            opt(self.d_loss),
            opt(self.g_loss),
            opt(self.p_real),
            opt(self.p_fake),
            sizes.join(";")
        )
    }
}

/// Everything needed to continue a distillation run exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillState {
    pub rounds_done: usize,
    pub student: ParamSet,
    pub student_opt: OptimizerState,
    pub heads: Vec<ParamSet>,
    pub head_opts: Vec<OptimizerState>,
    pub queues: LatentQueues,
    pub metrics: Vec<DistillMetrics>,
}

/// A [`DistillState`] together with the settings it was produced under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillCheckpoint {
    pub seed: u64,
    pub config: DistillConfig,
    pub state: DistillState,
}

impl DistillCheckpoint {
    /// Writes to a sibling temporary file first, so an interrupted save never
    /// leaves a truncated checkpoint behind.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_string(self)?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Fails unless `config` (with its seed) is the one this checkpoint was written under.
    pub fn ensure_matches(&self, config: &DistillConfig) -> Result<()> {
        let stored = DistillConfig {
            seed: config.seed,
            ..self.config.clone()
        };
        if self.seed != config.seed || &stored != config {
            return Err(Error::Config(
                "checkpoint was written under a different distillation config or seed".into(),
            ));
        }
        Ok(())
    }
}

pub struct DistillOutcome {
    pub student: VelocityModel,
    pub heads: Vec<ProjectionHead>,
    pub metrics: Vec<DistillMetrics>,
}

/// The distillation loop over a frozen teacher and a trajectory store.
pub struct Distiller<'a> {
    teacher: &'a VelocityModel,
    config: DistillConfig,
    schedule: KeySchedule,
    taps: FeatureTapConfig,
    /// `keys[k]`: every trajectory's state at `t'_k`, one row per trajectory.
    keys: Vec<Matrix>,
    student: VelocityModel,
    student_opt: OptimizerState,
    heads: Vec<ProjectionHead>,
    head_opts: Vec<OptimizerState>,
    queues: LatentQueues,
    metrics: Vec<DistillMetrics>,
    rounds_done: usize,
}

impl<'a> Distiller<'a> {
    /// Student initialised from the teacher, fresh heads and empty queues.
    pub fn new(teacher: &'a VelocityModel, store: &TrajectoryStore, config: DistillConfig) -> Result<Self> {
        config.validate()?;
        if store.grid().steps() != config.n {
            return Err(Error::Config(format!(
                "store has a {}-step grid but the config expects n = {}",
                store.grid().steps(),
                config.n
            )));
        }
        if store.dim() != teacher.dim() {
            return Err(Error::Config("store and teacher dimensions differ".into()));
        }
        if store.is_empty() {
            return Err(Error::Usage("trajectory store is empty".into()));
        }
        let schedule = KeySchedule::new(config.n, config.m)?;
        let taps = config
            .taps
            .unwrap_or_else(|| FeatureTapConfig::for_blocks(teacher.shape().blocks));
        taps.validate(teacher)?;
        let keys = (0..=config.m)
            .map(|k| store.states_at(schedule.grid_index(k)))
            .collect();
        let student = teacher.clone();
        let student_opt = OptimizerState::new(AdamConfig::with_lr(config.student_lr), student.params());
        let heads: Vec<ProjectionHead> = (0..config.head_count())
            .map(|i| {
                ProjectionHead::new(
                    i,
                    teacher.hidden(),
                    derive_indexed(config.seed, "distill/head", i as u64),
                )
            })
            .collect::<Result<_>>()?;
        let head_opts = heads
            .iter()
            .map(|h| OptimizerState::new(AdamConfig::with_lr(config.head_lr), h.params()))
            .collect();
        let queues = LatentQueues::new(config.m, config.queue_capacity)?;
        Ok(Self {
            teacher,
            config,
            schedule,
            taps,
            keys,
            student,
            student_opt,
            heads,
            head_opts,
            queues,
            metrics: Vec::new(),
            rounds_done: 0,
        })
    }

    /// Continues from a saved state.
    pub fn resume(
        teacher: &'a VelocityModel,
        store: &TrajectoryStore,
        config: DistillConfig,
        state: DistillState,
    ) -> Result<Self> {
        let mut d = Self::new(teacher, store, config)?;
        d.student = VelocityModel::from_params(teacher.shape(), state.student)?;
        if state.heads.len() != d.heads.len() || state.head_opts.len() != d.heads.len() {
            return Err(Error::Config("checkpoint head count does not match the config".into()));
        }
        d.heads = d
            .heads
            .iter()
            .zip(state.heads)
            .map(|(h, p)| h.with_params(p))
            .collect::<Result<_>>()?;
        d.student_opt = state.student_opt;
        d.head_opts = state.head_opts;
        d.queues = state.queues;
        d.metrics = state.metrics;
        d.rounds_done = state.rounds_done;
        Ok(d)
    }

    pub fn rounds_done(&self) -> usize {
        self.rounds_done
    }

    pub fn schedule(&self) -> &KeySchedule {
        &self.schedule
    }

    pub fn student(&self) -> &VelocityModel {
        &self.student
    }

    pub fn heads(&self) -> &[ProjectionHead] {
        &self.heads
    }

    pub fn queues(&self) -> &LatentQueues {
        &self.queues
    }

    pub fn metrics(&self) -> &[DistillMetrics] {
        &self.metrics
    }

    pub fn state(&self) -> DistillState {
        DistillState {
            rounds_done: self.rounds_done,
            student: self.student.params().clone(),
            student_opt: self.student_opt.clone(),
            heads: self.heads.iter().map(|h| h.params().clone()).collect(),
            head_opts: self.head_opts.clone(),
            queues: self.queues.clone(),
            metrics: self.metrics.clone(),
        }
    }

    /// Trajectory loss of the current student over the whole store, averaged
    /// over the `m` key intervals.
    pub fn store_traj_loss(&self) -> Result<f64> {
        let m = self.config.m;
        let mut total = 0.0;
        for k in 0..m {
            let obj = trajectory_objective(&self.student, &self.keys[k + 1], &self.keys[k], &self.schedule, k)?;
            total += obj.value(self.student.params())?;
        }
        Ok(total / m as f64)
    }

    fn key_rows(&self, k: usize, idx: &[usize]) -> Matrix {
        self.keys[k].select_rows(idx)
    }

    /// Real key latents of trajectory `i`, ordered `t'_m … t'_0`.
    fn key_column(&self, i: usize) -> Vec<Vec<f64>> {
        (0..=self.config.m)
            .rev()
            .map(|k| self.keys[k].row(i).to_vec())
            .collect()
    }

    /// One pass over `k = m−1 … 0`.
    pub fn run_round(&mut self) -> Result<()> {
        let round = self.rounds_done;
        let cfg = self.config.clone();
        let (m, b, d) = (cfg.m, cfg.batch_size, self.teacher.dim());
        let n_traj = self.keys[0].rows();
        let mut traj_rng = rng_from_seed(derive_indexed(cfg.seed, "distill/traj", round as u64));
        let mut noise_rng = rng_from_seed(derive_indexed(cfg.seed, "distill/noise", round as u64));
        let factor = cfg.lr_schedule.factor(round, cfg.rounds);
        self.student_opt.config.lr = cfg.student_lr * factor;
        for opt in &mut self.head_opts {
            opt.config.lr = cfg.head_lr * factor;
        }

        for k in (0..m).rev() {
            let fail = |phase: &str, e: Error| match e {
                Error::NonFinite { context } => {
                    Error::non_finite(format!("{context} ({phase} phase, k = {k}, round {round})"))
                }
                other => other,
            };

            // trajectory update
            let idx: Vec<usize> = (0..b).map(|_| traj_rng.random_range(0..n_traj)).collect();
            let upper = self.key_rows(k + 1, &idx);
            let lower = self.key_rows(k, &idx);
            let obj = trajectory_objective(&self.student, &upper, &lower, &self.schedule, k)?;
            let (traj_loss, mut g) = nn::value_and_grad(&obj, self.student.params()).map_err(|e| fail("traj", e))?;

            let mut row = DistillMetrics {
                round,
                k,
                traj_loss,
                d_loss: None,
                g_loss: None,
                p_real: None,
                p_fake: None,
                queue_sizes: Vec::new(),
            };

            if cfg.adversarial() {
                if k == m - 1 {
                    let z = gaussian(b, d, &mut noise_rng);
                    for (r, &src) in idx.iter().enumerate() {
                        self.queues.push(
                            m,
                            QueueEntry {
                                key_index: m,
                                latent: z.row(r).to_vec(),
                                keys: self.key_column(src),
                                source: src,
                            },
                        )?;
                    }
                }
                let popped = self.queues.pop_many(k + 1, b);
                if popped.is_empty() {
                    debug!(
                        "round {round}: queue {} empty, skipping adversarial update for k = {k}",
                        k + 1
                    );
                } else {
                    let adv = self
                        .adversarial_update(k, &popped, &lower, &mut row)
                        .map_err(|e| fail("adv", e))?;
                    g.add_scaled(&adv, 1.0);
                }
            }
            self.student_opt.step(self.student.params_mut(), &g)?;
            row.queue_sizes = self.queues.sizes();
            self.metrics.push(row);
        }
        self.rounds_done += 1;
        Ok(())
    }

    fn adversarial_update(
        &mut self,
        k: usize,
        popped: &[QueueEntry],
        fresh_real: &Matrix,
        row: &mut DistillMetrics,
    ) -> Result<ParamSet> {
        let cfg = &self.config;
        let (t_hi, t_lo) = (self.schedule.time(k + 1), self.schedule.time(k));
        let from = Matrix::from_rows(&popped.iter().map(|e| e.latent.as_slice()).collect::<Vec<_>>())?;
        let generated = euler_step_batch(&self.student, &from, t_hi, t_lo)?;
        for (r, e) in popped.iter().enumerate() {
            self.queues.push(
                k,
                QueueEntry {
                    key_index: k,
                    latent: generated.row(r).to_vec(),
                    keys: e.keys.clone(),
                    source: e.source,
                },
            )?;
        }
        let real = match cfg.real_source {
            RealSource::Queued => Matrix::from_rows(&popped.iter().map(|e| e.real_at(k)).collect::<Vec<_>>())?,
            RealSource::Fresh => fresh_real.select_rows(&(0..popped.len().min(fresh_real.rows())).collect::<Vec<_>>()),
        };

        let h = cfg.head_for(k);
        let real_features = extract_features(self.teacher, &real, t_lo, &self.taps)?;
        let fake_features = extract_features(self.teacher, &generated, t_lo, &self.taps)?;
        let head = &self.heads[h];
        let p_real = mean(&discriminate(head, &real_features)?);
        let p_fake = mean(&discriminate(head, &fake_features)?);

        let (d_loss, mut head_grad) = nn::value_and_grad(
            &DiscriminatorObjective {
                head,
                real: &real_features,
                fake: &fake_features,
            },
            head.params(),
        )?;
        let (g_loss, mut student_grad) = nn::value_and_grad(
            &GeneratorObjective {
                student: self.student.shape(),
                teacher: self.teacher,
                head,
                tap: self.taps,
                from: &from,
                t_from: t_hi,
                t_to: t_lo,
                form: cfg.generator_loss,
            },
            self.student.params(),
        )?;
        student_grad.scale(cfg.lambda_adv);
        head_grad.scale(cfg.lambda_adv);
        self.head_opts[h].step(self.heads[h].params_mut(), &head_grad)?;

        row.d_loss = Some(d_loss);
        row.g_loss = Some(g_loss);
        row.p_real = Some(p_real);
        row.p_fake = Some(p_fake);
        Ok(student_grad)
    }

    /// Runs rounds until `config.rounds` are done (or `stop_after`, if
    /// smaller), calling `checkpoint` every `every` rounds and at the end.
    pub fn run(
        &mut self,
        every: Option<usize>,
        stop_after: Option<usize>,
        mut checkpoint: impl FnMut(&Self) -> Result<()>,
    ) -> Result<()> {
        let target = stop_after.map_or(self.config.rounds, |s| s.min(self.config.rounds));
        while self.rounds_done < target {
            self.run_round()?;
            if let Some(e) = every {
                if e > 0 && self.rounds_done.is_multiple_of(e) {
                    checkpoint(self)?;
                }
            }
        }
        checkpoint(self)
    }

    pub fn finish(self) -> DistillOutcome {
        DistillOutcome {
            student: self.student,
            heads: self.heads,
            metrics: self.metrics,
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Runs the whole distillation and returns the student and heads.
pub fn distill(teacher: &VelocityModel, store: &TrajectoryStore, config: &DistillConfig) -> Result<DistillOutcome> {
    let mut d = Distiller::new(teacher, store, config.clone())?;
    d.run(None, None, |_| Ok(()))?;
    Ok(d.finish())
}

/// Seed for the evaluation noise shared by teacher and student comparisons.
pub fn evaluation_noise(seed: u64, count: usize, dim: usize) -> Matrix {
    gaussian(count, dim, &mut rng_for(derive_seed(seed, "eval"), "noise"))
}
