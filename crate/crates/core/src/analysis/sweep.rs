use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kd::{kd_baseline_distill, sample_kd, KdConfig};
use super::metrics::{endpoint_error, median, w1_distance};
use super::useless::{useless_frequency, UselessConfig};
use crate::distill::{distill, evaluation_noise, make_key_schedule, sample_student_batch, DistillConfig};
use crate::error::{Error, Result};
use crate::flow::{denoise_batch, ToyDataset};
use crate::nn::{Matrix, VelocityModel};
use crate::seed::derive_indexed;
use crate::trajstore::TrajectoryStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub mismatches: Vec<f64>,
    pub seeds: usize,
    pub useless: UselessConfig,
    pub kd: KdConfig,
    /// Noise draws used for every W1 and endpoint evaluation.
    pub eval_samples: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            mismatches: vec![0.0, 1.0, 2.0, 4.0],
            seeds: 5,
            useless: UselessConfig::default(),
            kd: KdConfig::default(),
            eval_samples: 4096,
            seed: 0,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mismatches.is_empty() {
            return Err(Error::Config("mismatch sweep list is empty".into()));
        }
        if let Some(m) = self.mismatches.iter().find(|m| !(**m >= 0.0) || !m.is_finite()) {
            return Err(Error::Config(format!(
                "mismatch degree {m} is not a finite non-negative number"
            )));
        }
        if self.seeds == 0 {
            return Err(Error::Config("sweep needs at least one seed".into()));
        }
        if self.eval_samples == 0 {
            return Err(Error::Config("sweep needs at least one evaluation sample".into()));
        }
        Ok(())
    }
}

/// `p` with its first support point moved outward by `m`, away from the
/// centroid of the rest, so that the mismatch degree against `p` is `m`.
pub fn shifted_support(p: &ToyDataset, m: f64) -> Result<ToyDataset> {
    p.validate()?;
    let mut support = p.support.clone();
    let n = support.len();
    let d = p.dim;
    let mut dir = vec![0.0; d];
    if n > 1 {
        for other in &support[1..] {
            for (a, b) in dir.iter_mut().zip(other) {
                *a -= b / (n - 1) as f64;
            }
        }
        for (a, b) in dir.iter_mut().zip(&support[0]) {
            *a += b;
        }
    }
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        dir = vec![0.0; d];
        dir[0] = -1.0;
    } else {
        dir.iter_mut().for_each(|x| *x /= norm);
    }
    for (a, b) in support[0].iter_mut().zip(&dir) {
        *a += m * b;
    }
    ToyDataset::new(support)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mismatch: f64,
    pub seed: u64,
    pub useless_frequency: f64,
    pub kd_w1: f64,
    pub store_only_w1: f64,
    /// Endpoint error of the KD student's samples against the training support.
    pub endpoint_error: f64,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "M,seed,useless_frequency,kd_W1,accvideo_W1,endpoint_error";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.mismatch, self.seed, self.useless_frequency, self.kd_w1, self.store_only_w1, self.endpoint_error
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(SweepRow::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn mismatches(&self) -> Vec<f64> {
        let mut ms: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !ms.contains(&r.mismatch) {
                ms.push(r.mismatch);
            }
        }
        ms
    }

    /// Median of `field` over seeds, one entry per mismatch value in sweep order.
    pub fn medians(&self, field: impl Fn(&SweepRow) -> f64) -> Vec<f64> {
        self.mismatches()
            .into_iter()
            .map(|m| {
                let v: Vec<f64> = self.rows.iter().filter(|r| r.mismatch == m).map(&field).collect();
                median(&v)
            })
            .collect()
    }
}

pub fn is_non_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] <= w[1])
}

/// 1-D sample column of a `(rows × 1)` matrix.
fn scalar_samples(x: &Matrix) -> Result<&[f64]> {
    if x.cols() != 1 {
        return Err(Error::Usage(format!(
            "W1 is defined for 1-D samples, got dimension {}",
            x.cols()
        )));
    }
    Ok(x.as_slice())
}

/// Runs the mismatch sweep: for every seed, one store-only distillation, then
/// for every mismatch degree the useless-point frequency and a KD baseline
/// trained on the shifted data.
pub fn run_sweep(
    teacher: &VelocityModel,
    store: &TrajectoryStore,
    train_support: &ToyDataset,
    distill_config: &DistillConfig,
    config: &SweepConfig,
) -> Result<SweepReport> {
    config.validate()?;
    distill_config.validate()?;
    let grid = store.grid();
    let schedule = make_key_schedule(grid.steps(), distill_config.m)?;
    let z = evaluation_noise(config.seed, config.eval_samples, teacher.dim());
    let teacher_samples = denoise_batch(teacher, &z, &grid)?.swap_remove(0);
    let train_samples = train_support.repeated(config.eval_samples);

    let per_seed: Vec<Result<Vec<SweepRow>>> = (0..config.seeds as u64)
        .into_par_iter()
        .map(|s| {
            let dcfg = DistillConfig {
                seed: derive_indexed(config.seed, "sweep/distill", s),
                ..distill_config.clone()
            };
            let student = distill(teacher, store, &dcfg)?.student;
            let (acc, _) = sample_student_batch(&student, &schedule, &z)?;
            let store_only_w1 = w1_distance(scalar_samples(&acc)?, scalar_samples(&teacher_samples)?)?;
            info!("sweep seed {s}: store-only student W1 {store_only_w1:.4}");

            let mut rows = Vec::with_capacity(config.mismatches.len());
            for &m in &config.mismatches {
                let p_d = shifted_support(train_support, m)?;
                let ucfg = UselessConfig {
                    seed: derive_indexed(config.seed, "sweep/useless", s),
                    ..config.useless
                };
                let useless = useless_frequency(teacher, store, &p_d, train_support, &ucfg)?;
                let kcfg = KdConfig {
                    seed: derive_indexed(config.seed, "sweep/kd", s),
                    ..config.kd
                };
                let kd = kd_baseline_distill(teacher, &p_d, &grid, &kcfg)?;
                let (kd_samples, _) = sample_kd(&kd, &z)?;
                let kd_w1 = w1_distance(scalar_samples(&kd_samples)?, scalar_samples(&train_samples)?)?;
                let rows_vec: Vec<&[f64]> = kd_samples.iter_rows().collect();
                let endpoint = endpoint_error(&rows_vec, &train_support.support)?;
                info!("sweep seed {s}, M = {m}: useless {useless:.4}, KD W1 {kd_w1:.4}");
                rows.push(SweepRow {
                    mismatch: m,
                    seed: s,
                    useless_frequency: useless,
                    kd_w1,
                    store_only_w1,
                    endpoint_error: endpoint,
                });
            }
            Ok(rows)
        })
        .collect();

    let mut rows = Vec::new();
    for r in per_seed {
        rows.extend(r?);
    }
    // order by mismatch, then seed
    let order = config.mismatches.clone();
    rows.sort_by_key(|r| (order.iter().position(|&m| m == r.mismatch), r.seed));
    Ok(SweepReport { rows })
}
