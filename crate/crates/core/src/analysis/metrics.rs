use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Distance from `x` to the closest point of `support`.
pub fn nearest_distance(x: &[f64], support: &[Vec<f64>]) -> f64 {
    support.iter().map(|p| euclidean(x, p)).fold(f64::INFINITY, f64::min)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MismatchReport {
    /// Sum of `nearest`, the mismatch degree M.
    pub degree: f64,
    /// For each distillation point, the distance to the nearest training point.
    pub nearest: Vec<f64>,
}

/// `M = Σ_{x_d ∈ p_d} min_{x ∈ p} ‖x_d − x‖`.
pub fn mismatch_degree(distill_support: &[Vec<f64>], train_support: &[Vec<f64>]) -> Result<MismatchReport> {
    if distill_support.is_empty() || train_support.is_empty() {
        return Err(Error::Usage("mismatch degree needs two non-empty supports".into()));
    }
    let d = train_support[0].len();
    if distill_support.iter().chain(train_support).any(|p| p.len() != d) {
        return Err(Error::Shape("supports must share one dimension".into()));
    }
    let nearest: Vec<f64> = distill_support
        .iter()
        .map(|x| nearest_distance(x, train_support))
        .collect();
    Ok(MismatchReport {
        degree: nearest.iter().sum(),
        nearest,
    })
}

fn sorted(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::Usage("W1 samples contain NaN".into()));
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// Empirical 1-Wasserstein distance between two 1-D samples, through the
/// quantile coupling `∫₀¹ |F⁻¹(u) − G⁻¹(u)| du`.
pub fn w1_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Usage("W1 distance needs non-empty samples".into()));
    }
    let (a, b) = (sorted(a)?, sorted(b)?);
    if a.len() == b.len() {
        let total: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        return Ok(total / a.len() as f64);
    }
    // Both quantile functions are step functions with jumps at i/|a| and j/|b|;
    // walk the merged breakpoints.
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < na && j < nb {
        let next_a = (i + 1) as f64 / na as f64;
        let next_b = (j + 1) as f64 / nb as f64;
        let next = next_a.min(next_b);
        total += (next - u) * (a[i] - b[j]).abs();
        u = next;
        // advance by integer comparison to avoid rounding drift
        match ((i + 1) * nb).cmp(&((j + 1) * na)) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                i += 1;
                j += 1;
            }
        }
    }
    Ok(total)
}

/// Mean distance from each sample to its nearest support point.
pub fn endpoint_error<R: AsRef<[f64]>>(samples: &[R], support: &[Vec<f64>]) -> Result<f64> {
    if samples.is_empty() || support.is_empty() {
        return Err(Error::Usage("endpoint error needs samples and a support".into()));
    }
    let total: f64 = samples.iter().map(|s| nearest_distance(s.as_ref(), support)).sum();
    Ok(total / samples.len() as f64)
}

/// Fraction of samples within `radius` of some support point.
pub fn fraction_within<R: AsRef<[f64]>>(samples: &[R], support: &[Vec<f64>], radius: f64) -> f64 {
    let hits = samples
        .iter()
        .filter(|s| nearest_distance(s.as_ref(), support) <= radius)
        .count();
    hits as f64 / samples.len().max(1) as f64
}

/// Median of `v`; the mean of the two middle values for even lengths, NaN
/// when empty.
pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// One summary line of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub label: String,
    pub w1: f64,
    pub endpoint_error: f64,
    pub useless_frequency: Option<f64>,
    pub seed: u64,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str = "label,w1,endpoint_error,useless_frequency,seed";

    pub fn csv_row(&self) -> String {
        let useless = self.useless_frequency.map(|u| u.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.label, self.w1, self.endpoint_error, useless, self.seed
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pts(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn mismatch_examples() {
        let p = pts(&[-3.0, 3.0]);
        assert_eq!(mismatch_degree(&p, &p).unwrap().degree, 0.0);
        let r = mismatch_degree(&pts(&[-2.0, 3.0]), &p).unwrap();
        assert_eq!(r.degree, 1.0);
        assert_eq!(r.nearest, vec![1.0, 0.0]);
        assert!(mismatch_degree(&[], &p).is_err());
    }

    #[test]
    fn w1_examples() {
        assert_eq!(w1_distance(&[1.0, 2.0, 5.0], &[5.0, 1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(w1_distance(&[0.0], &[1.0]).unwrap(), 1.0);
        // {0, 1} vs {0}: the upper half of the mass moves by 1
        assert_eq!(w1_distance(&[0.0, 1.0], &[0.0]).unwrap(), 0.5);
        assert!(w1_distance(&[], &[1.0]).is_err());
    }

    #[test]
    fn endpoint_examples() {
        let support = pts(&[-3.0, 3.0]);
        assert_eq!(endpoint_error(&pts(&[3.0, -3.0, 3.0]), &support).unwrap(), 0.0);
        assert_eq!(endpoint_error(&pts(&[0.0]), &support).unwrap(), 3.0);
        assert_eq!(fraction_within(&pts(&[2.9, 0.0]), &support, 0.25), 0.5);
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    proptest! {
        #[test]
        fn w1_is_symmetric_and_satisfies_triangle(
            a in prop::collection::vec(-10.0f64..10.0, 1..40),
            b in prop::collection::vec(-10.0f64..10.0, 1..40),
            c in prop::collection::vec(-10.0f64..10.0, 1..40),
        ) {
            let ab = w1_distance(&a, &b).unwrap();
            let ba = w1_distance(&b, &a).unwrap();
            let bc = w1_distance(&b, &c).unwrap();
            let ac = w1_distance(&a, &c).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ac <= ab + bc + 1e-9);
            prop_assert!(ab >= 0.0);
        }

        #[test]
        fn mismatch_is_permutation_invariant(
            pd in prop::collection::vec(-10.0f64..10.0, 1..20),
            p in prop::collection::vec(-10.0f64..10.0, 1..20),
        ) {
            let m = mismatch_degree(&pts(&pd), &pts(&p)).unwrap().degree;
            let mut pd_r = pd.clone();
            pd_r.reverse();
            let mut p_r = p.clone();
            p_r.rotate_left(1);
            let m2 = mismatch_degree(&pts(&pd_r), &pts(&p_r)).unwrap().degree;
            prop_assert!((m - m2).abs() < 1e-9);
            prop_assert!(m >= 0.0);
            prop_assert_eq!(mismatch_degree(&pts(&p), &pts(&p)).unwrap().degree, 0.0);
        }
    }
}
