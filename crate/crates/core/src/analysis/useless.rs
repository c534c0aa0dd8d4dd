use rand::Rng;
use serde::{Deserialize, Serialize};

use super::metrics::nearest_distance;
use crate::error::{Error, Result};
use crate::flow::{gaussian, integrate, TimeGrid, ToyDataset};
use crate::nn::{Matrix, VelocityModel};
use crate::seed::rng_for;
use crate::trajstore::TrajectoryStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UselessMode {
    /// Far from every stored trajectory state at the same grid time.
    TrajectoryProximity,
    /// Teacher-denoised to `t = 0`, lands far from the training support.
    Endpoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UselessConfig {
    pub samples: usize,
    pub epsilon: f64,
    pub mode: UselessMode,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for UselessConfig {
    fn default() -> Self {
        Self {
            samples: 16384,
            epsilon: 0.1,
            mode: UselessMode::TrajectoryProximity,
            seed: 0,
        }
    }
}

/// Forward-diffused points grouped by grid index: `points[j]` holds every
/// `x_t` drawn at `t = t_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusedPoints {
    pub points: Vec<Matrix>,
}

impl DiffusedPoints {
    pub fn total(&self) -> usize {
        self.points.iter().map(Matrix::rows).sum()
    }
}

/// Draws `count` points `x_t = (1−t)x0 + t·x1`, `x0` uniform over the support
/// of `p_d`, `x1 ~ N(0, I)`, grid index uniform over `0..=n`.
pub fn diffuse<R: Rng + ?Sized>(p_d: &ToyDataset, grid: &TimeGrid, count: usize, rng: &mut R) -> DiffusedPoints {
    let d = p_d.dim;
    let n = grid.steps();
    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); n + 1];
    for _ in 0..count {
        let x0 = &p_d.support[rng.random_range(0..p_d.support.len())];
        let z = gaussian(1, d, rng);
        let j = rng.random_range(0..=n);
        let t = grid.time(j);
        rows[j].extend(x0.iter().zip(z.as_slice()).map(|(a, b)| (1.0 - t) * a + t * b));
    }
    DiffusedPoints {
        points: rows
            .into_iter()
            .map(|v| {
                let r = v.len() / d.max(1);
                Matrix::from_vec(r, d, v).expect("row-major buffer")
            })
            .collect(),
    }
}

/// Nearest-state lookup for one grid time.
enum StateIndex {
    Sorted(Vec<f64>),
    Rows(Vec<Vec<f64>>),
}

impl StateIndex {
    fn new(states: &Matrix) -> Self {
        if states.cols() == 1 {
            let mut v = states.as_slice().to_vec();
            v.sort_by(f64::total_cmp);
            StateIndex::Sorted(v)
        } else {
            StateIndex::Rows(states.iter_rows().map(<[f64]>::to_vec).collect())
        }
    }

    fn nearest(&self, x: &[f64]) -> f64 {
        match self {
            StateIndex::Sorted(v) => {
                let x = x[0];
                let i = v.partition_point(|&s| s < x);
                let above = v.get(i).map_or(f64::INFINITY, |s| s - x);
                let below = i.checked_sub(1).map_or(f64::INFINITY, |k| x - v[k]);
                above.min(below)
            }
            StateIndex::Rows(rows) => nearest_distance(x, rows),
        }
    }
}

/// Decides whether individual forward-diffused points are useless.
pub struct UselessJudge<'a> {
    teacher: &'a VelocityModel,
    grid: TimeGrid,
    train_support: &'a ToyDataset,
    epsilon: f64,
    mode: UselessMode,
    index: Vec<StateIndex>,
}

impl<'a> UselessJudge<'a> {
    pub fn new(
        teacher: &'a VelocityModel,
        store: &TrajectoryStore,
        train_support: &'a ToyDataset,
        epsilon: f64,
        mode: UselessMode,
    ) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!(
                "useless-point epsilon must be positive, got {epsilon}"
            )));
        }
        if store.dim() != teacher.dim() || train_support.dim != teacher.dim() {
            return Err(Error::Shape("store, support and teacher dimensions differ".into()));
        }
        let index = match mode {
            UselessMode::TrajectoryProximity => {
                if store.is_empty() {
                    return Err(Error::Usage("trajectory-proximity mode needs a non-empty store".into()));
                }
                (0..=store.grid().steps())
                    .map(|j| StateIndex::new(&store.states_at(j)))
                    .collect()
            }
            UselessMode::Endpoint => Vec::new(),
        };
        Ok(Self {
            teacher,
            grid: store.grid(),
            train_support,
            epsilon,
            mode,
            index,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Flags each row of `points`, all taken at grid index `j`.
    pub fn judge(&self, points: &Matrix, j: usize) -> Result<Vec<bool>> {
        if j > self.grid.steps() {
            return Err(Error::Usage(format!("grid index {j} is past {}", self.grid.steps())));
        }
        if points.rows() == 0 {
            return Ok(Vec::new());
        }
        points.ensure_shape(points.rows(), self.teacher.dim(), "diffused points")?;
        match self.mode {
            UselessMode::TrajectoryProximity => Ok(points
                .iter_rows()
                .map(|x| self.index[j].nearest(x) > self.epsilon)
                .collect()),
            UselessMode::Endpoint => {
                let landed = integrate(self.teacher, points, &self.grid, j, 0)?;
                Ok(landed
                    .iter_rows()
                    .map(|x| nearest_distance(x, &self.train_support.support) > self.epsilon)
                    .collect())
            }
        }
    }

    /// Useless fraction of a drawn point set.
    pub fn frequency(&self, drawn: &DiffusedPoints) -> Result<f64> {
        let total = drawn.total();
        if total == 0 {
            return Err(Error::Usage("no diffused points to judge".into()));
        }
        let mut useless = 0usize;
        for (j, pts) in drawn.points.iter().enumerate() {
            useless += self.judge(pts, j)?.into_iter().filter(|&u| u).count();
        }
        Ok(useless as f64 / total as f64)
    }
}

/// Fraction of forward-diffused points from `p_d` that are useless with
/// respect to the teacher's trajectories (or its training support, in
/// endpoint mode).
pub fn useless_frequency(
    teacher: &VelocityModel,
    store: &TrajectoryStore,
    p_d: &ToyDataset,
    train_support: &ToyDataset,
    config: &UselessConfig,
) -> Result<f64> {
    if config.samples == 0 {
        return Err(Error::Config("useless-point sampling needs at least one sample".into()));
    }
    p_d.validate()?;
    let judge = UselessJudge::new(teacher, store, train_support, config.epsilon, config.mode)?;
    let drawn = diffuse(
        p_d,
        judge.grid(),
        config.samples,
        &mut rng_for(config.seed, "analysis/useless"),
    );
    judge.frequency(&drawn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajstore::generate_store;

    fn fixture() -> (VelocityModel, TrajectoryStore) {
        let teacher = VelocityModel::build(1, 8, 1, 4).unwrap();
        let store = generate_store(&teacher, 32, &TimeGrid::uniform(10).unwrap(), 0).unwrap();
        (teacher, store)
    }

    #[test]
    fn stored_states_are_never_useless() {
        let (teacher, store) = fixture();
        let support = ToyDataset::two_point();
        let judge = UselessJudge::new(&teacher, &store, &support, 0.1, UselessMode::TrajectoryProximity).unwrap();
        for j in 0..=10 {
            assert!(judge.judge(&store.states_at(j), j).unwrap().iter().all(|u| !u));
        }
    }

    #[test]
    fn far_points_are_useless_in_both_modes() {
        let (teacher, store) = fixture();
        let support = ToyDataset::two_point();
        let far = Matrix::column(&[1e3]);
        for mode in [UselessMode::TrajectoryProximity, UselessMode::Endpoint] {
            let judge = UselessJudge::new(&teacher, &store, &support, 0.1, mode).unwrap();
            for j in [0, 3, 10] {
                assert_eq!(judge.judge(&far, j).unwrap(), vec![true]);
            }
        }
    }

    #[test]
    fn bounds_and_errors() {
        let (teacher, store) = fixture();
        let support = ToyDataset::two_point();
        let cfg = UselessConfig {
            samples: 500,
            ..UselessConfig::default()
        };
        let f = useless_frequency(&teacher, &store, &support, &support, &cfg).unwrap();
        assert!((0.0..=1.0).contains(&f));
        let wide = UselessConfig { epsilon: 1e9, ..cfg };
        assert_eq!(
            useless_frequency(&teacher, &store, &support, &support, &wide).unwrap(),
            0.0
        );
        let bad = UselessConfig { epsilon: 0.0, ..cfg };
        assert!(matches!(
            useless_frequency(&teacher, &store, &support, &support, &bad),
            Err(Error::Config(_))
        ));
        let empty = store.truncated(0);
        assert!(matches!(
            useless_frequency(&teacher, &empty, &support, &support, &cfg),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn sorted_lookup_matches_brute_force() {
        let states = Matrix::column(&[0.5, -1.0, 2.0, 2.0, 7.5]);
        let idx = StateIndex::new(&states);
        let rows: Vec<Vec<f64>> = states.iter_rows().map(<[f64]>::to_vec).collect();
        for x in [-5.0, -1.0, 0.0, 1.3, 2.0, 4.0, 100.0] {
            assert_eq!(idx.nearest(&[x]), nearest_distance(&[x], &rows));
        }
    }
}
