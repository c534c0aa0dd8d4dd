//! Synthetic trajectory dataset: teacher denoising paths generated from
//! seeded noise, persisted as JSON Lines.
//!
//! File layout: one header line
//! `{"version":1,"N":…,"n":…,"d":…,"teacher_fingerprint":"…","seed":…}`
//! followed by `N` records `{"index":i,"noise_seed":…,"states":[[…],…]}` where
//! `states[j]` is the state at `t_j = j/n` (so `states[n]` is the noise draw).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distill::KeySchedule;
use crate::error::{Error, Result};
use crate::flow::{denoise_batch, euler_step_batch, gaussian, TimeGrid};
use crate::nn::{Matrix, VelocityModel};
use crate::seed::{derive_indexed, rng_from_seed};

pub const STORE_VERSION: u32 = 1;

/// Trajectories are denoised in fixed-size chunks so the output does not
/// depend on the thread count.
const CHUNK: usize = 512;

/// Absolute per-coordinate tolerance for the Euler recurrence on reload.
pub const RECURRENCE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreHeader {
    pub version: u32,
    #[serde(rename = "N")]
    pub count: usize,
    #[serde(rename = "n")]
    pub steps: usize,
    #[serde(rename = "d")]
    pub dim: usize,
    pub teacher_fingerprint: String,
    pub seed: u64,
}

/// One teacher denoising path; `states[j]` is the state at grid time `t_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub index: usize,
    pub noise_seed: u64,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn noise(&self) -> &[f64] {
        self.states.last().expect("trajectories are never empty")
    }

    pub fn endpoint(&self) -> &[f64] {
        &self.states[0]
    }
}

/// The noise draw a trajectory starts from.
pub fn noise_for_seed(seed: u64, dim: usize) -> Vec<f64> {
    gaussian(1, dim, &mut rng_from_seed(seed)).into_vec()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStore {
    header: StoreHeader,
    trajectories: Vec<Trajectory>,
}

impl TrajectoryStore {
    pub fn header(&self) -> &StoreHeader {
        &self.header
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.header.dim
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid::uniform(self.header.steps).expect("validated header")
    }

    pub fn teacher_fingerprint(&self) -> &str {
        &self.header.teacher_fingerprint
    }

    /// States of every trajectory at grid index `j`, one row per trajectory.
    pub fn states_at(&self, j: usize) -> Matrix {
        let d = self.header.dim;
        let mut data = Vec::with_capacity(self.len() * d);
        for t in &self.trajectories {
            data.extend_from_slice(&t.states[j]);
        }
        Matrix::from_vec(self.len(), d, data).expect("consistent store")
    }

    pub fn endpoints(&self) -> Matrix {
        self.states_at(0)
    }

    /// Keeps the first `count` trajectories.
    pub fn truncated(&self, count: usize) -> Self {
        let trajectories: Vec<_> = self.trajectories.iter().take(count).cloned().collect();
        Self {
            header: StoreHeader {
                count: trajectories.len(),
                ..self.header.clone()
            },
            trajectories,
        }
    }

    /// Checks fingerprint, noise reproduction and the Euler recurrence
    /// against the teacher that supposedly generated this store.
    pub fn validate_against(&self, teacher: &VelocityModel) -> Result<()> {
        let fp = teacher.fingerprint();
        if fp != self.header.teacher_fingerprint {
            return Err(Error::Integrity(format!(
                "store was generated by teacher {}, not {}",
                short(&self.header.teacher_fingerprint),
                short(&fp)
            )));
        }
        if teacher.dim() != self.header.dim {
            return Err(Error::Integrity("teacher dimension differs from store".into()));
        }
        let d = self.header.dim;
        for t in &self.trajectories {
            if noise_for_seed(t.noise_seed, d) != t.noise() {
                return Err(Error::Integrity(format!(
                    "trajectory {} does not start from its seeded noise",
                    t.index
                )));
            }
        }
        let grid = self.grid();
        for j in (1..=grid.steps()).rev() {
            let from = self.states_at(j);
            let predicted = euler_step_batch(teacher, &from, grid.time(j), grid.time(j - 1))?;
            let stored = self.states_at(j - 1);
            for (i, (a, b)) in predicted.iter_rows().zip(stored.iter_rows()).enumerate() {
                if a.iter().zip(b).any(|(p, s)| (p - s).abs() > RECURRENCE_TOLERANCE) {
                    return Err(Error::Integrity(format!(
                        "trajectory {i} breaks the Euler recurrence at grid index {j}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Writes the store as JSON Lines.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n").map_err(io)?;
        for t in &self.trajectories {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Reads a store; with `teacher` given, also runs [`Self::validate_against`].
    pub fn load(path: impl AsRef<Path>, teacher: Option<&VelocityModel>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing header".into()))?
            .map_err(|e| Error::io(path, e))?;
        let header: StoreHeader = serde_json::from_str(&header_line).map_err(|e| parse_err(1, e.to_string()))?;
        if header.version != STORE_VERSION {
            return Err(parse_err(1, format!("unsupported store version {}", header.version)));
        }
        if header.steps == 0 || header.dim == 0 {
            return Err(parse_err(1, "header needs n >= 1 and d >= 1".into()));
        }
        let mut trajectories = Vec::with_capacity(header.count);
        for (offset, line) in lines.enumerate() {
            let line_no = offset + 2;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let t: Trajectory = serde_json::from_str(&line).map_err(|e| parse_err(line_no, e.to_string()))?;
            if t.index != trajectories.len() {
                return Err(parse_err(
                    line_no,
                    format!("expected trajectory {}, found {}", trajectories.len(), t.index),
                ));
            }
            if t.states.len() != header.steps + 1 || t.states.iter().any(|s| s.len() != header.dim) {
                return Err(parse_err(
                    line_no,
                    format!(
                        "trajectory {} must hold {} states of dimension {}",
                        t.index,
                        header.steps + 1,
                        header.dim
                    ),
                ));
            }
            trajectories.push(t);
        }
        if trajectories.len() != header.count {
            return Err(parse_err(
                trajectories.len() + 2,
                format!(
                    "file ends after {} of {} trajectories",
                    trajectories.len(),
                    header.count
                ),
            ));
        }
        let store = Self { header, trajectories };
        if let Some(teacher) = teacher {
            store.validate_against(teacher)?;
        }
        Ok(store)
    }

    /// Key states of trajectory `i`, ordered `t'_m … t'_0`.
    pub fn key_points(&self, i: usize, schedule: &KeySchedule) -> Result<Vec<Vec<f64>>> {
        key_points(&self.trajectories[i], &self.grid(), schedule)
    }
}

fn short(fp: &str) -> &str {
    &fp[..fp.len().min(12)]
}

/// Denoises `count` seeded noise draws with the teacher.
pub fn generate_store(teacher: &VelocityModel, count: usize, grid: &TimeGrid, seed: u64) -> Result<TrajectoryStore> {
    if count == 0 {
        return Err(Error::Config("a trajectory store needs N >= 1".into()));
    }
    let d = teacher.dim();
    let seeds: Vec<u64> = (0..count as u64)
        .map(|i| derive_indexed(seed, "synth/noise", i))
        .collect();
    let chunks: Vec<Vec<Trajectory>> = seeds
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| -> Result<Vec<Trajectory>> {
            let mut noise = Vec::with_capacity(chunk.len() * d);
            for &s in chunk {
                noise.extend(noise_for_seed(s, d));
            }
            let states = denoise_batch(teacher, &Matrix::from_vec(chunk.len(), d, noise)?, grid)?;
            Ok(chunk
                .iter()
                .enumerate()
                .map(|(r, &noise_seed)| Trajectory {
                    index: c * CHUNK + r,
                    noise_seed,
                    states: states.iter().map(|m| m.row(r).to_vec()).collect(),
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(TrajectoryStore {
        header: StoreHeader {
            version: STORE_VERSION,
            count,
            steps: grid.steps(),
            dim: d,
            teacher_fingerprint: teacher.fingerprint(),
            seed,
        },
        trajectories: chunks.into_iter().flatten().collect(),
    })
}

/// States of `traj` at the schedule's key times, ordered `t'_m … t'_0`.
pub fn key_points(traj: &Trajectory, grid: &TimeGrid, schedule: &KeySchedule) -> Result<Vec<Vec<f64>>> {
    (0..=schedule.intervals())
        .rev()
        .map(|k| {
            let t = schedule.time(k);
            let j = grid.index_of(t).ok_or_else(|| {
                Error::Config(format!(
                    "key time {t} is not on the trajectory's {}-step grid",
                    grid.steps()
                ))
            })?;
            Ok(traj.states[j].clone())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::make_key_schedule;
    use rand::Rng;

    /// Small teacher with a non-zero output layer so trajectories move.
    fn teacher(seed: u64) -> VelocityModel {
        let mut m = VelocityModel::build(1, 8, 2, seed).unwrap();
        let mut rng = rng_from_seed(seed);
        let n = m.params().len();
        for v in &mut m.params_mut().tensors_mut()[n - 2].data {
            *v = rng.random_range(-0.3..0.3);
        }
        m
    }

    #[test]
    fn generation_is_deterministic_and_consistent() {
        let grid = TimeGrid::uniform(10).unwrap();
        let a = generate_store(&teacher(1), 40, &grid, 9).unwrap();
        let b = generate_store(&teacher(1), 40, &grid, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 40);
        assert!(a.trajectories().iter().all(|t| t.states.len() == 11));
        for t in a.trajectories() {
            assert_eq!(t.noise(), noise_for_seed(t.noise_seed, 1).as_slice());
        }
        a.validate_against(&teacher(1)).unwrap();
        assert!(matches!(
            generate_store(&teacher(1), 0, &grid, 9),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn save_load_round_trip_and_integrity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let grid = TimeGrid::uniform(10).unwrap();
        let store = generate_store(&teacher(2), 25, &grid, 3).unwrap();
        store.save(&path).unwrap();
        let back = TrajectoryStore::load(&path, None).unwrap();
        assert_eq!(back, store);
        TrajectoryStore::load(&path, Some(&teacher(2))).unwrap();
        let err = TrajectoryStore::load(&path, Some(&teacher(3))).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)), "{err}");
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let grid = TimeGrid::uniform(5).unwrap();
        generate_store(&teacher(2), 6, &grid, 3).unwrap().save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();

        // cut in the middle of the fourth record
        let cut = text.match_indices('\n').nth(3).unwrap().0 + 20;
        std::fs::write(&path, &text[..cut]).unwrap();
        match TrajectoryStore::load(&path, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }

        // drop the last two whole records
        let keep: Vec<&str> = text.lines().take(5).collect();
        std::fs::write(&path, keep.join("\n")).unwrap();
        assert!(matches!(TrajectoryStore::load(&path, None), Err(Error::Parse { .. })));
    }

    #[test]
    fn key_points_pick_grid_states() {
        let grid = TimeGrid::uniform(50).unwrap();
        let store = generate_store(&teacher(4), 3, &grid, 1).unwrap();
        let t = &store.trajectories()[1];
        let keys = key_points(t, &grid, &make_key_schedule(50, 5).unwrap()).unwrap();
        let expected: Vec<Vec<f64>> = [50, 40, 30, 20, 10, 0].iter().map(|&j| t.states[j].clone()).collect();
        assert_eq!(keys, expected);

        let two = key_points(t, &grid, &make_key_schedule(50, 1).unwrap()).unwrap();
        assert_eq!(two, vec![t.noise().to_vec(), t.endpoint().to_vec()]);

        let full = key_points(t, &grid, &make_key_schedule(50, 50).unwrap()).unwrap();
        let mut all = t.states.clone();
        all.reverse();
        assert_eq!(full, all);

        // keys of a 40-step schedule at m = 8 (t' = 0.125, ...) are not on a 50-step grid
        let off = key_points(t, &grid, &make_key_schedule(40, 8).unwrap());
        assert!(matches!(off, Err(Error::Config(_))));
    }
}
