//! Central finite-difference checks for hand-derived gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::Layout;

/// Denominator floor of the relative error, so that coordinates whose true
/// gradient is (numerically) zero are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct CoordinateCheck {
    pub index: usize,
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub max_rel_error: f64,
    pub worst: Option<CoordinateCheck>,
    pub coordinates: Vec<CoordinateCheck>,
}

impl GradCheckReport {
    pub fn error_at(&self, index: usize) -> Option<f64> {
        self.coordinates
            .iter()
            .find(|c| c.index == index)
            .map(|c| c.rel_error)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

pub fn check_epsilon(epsilon: f64) -> Result<()> {
    if (1e-6..=1e-3).contains(&epsilon) {
        Ok(())
    } else {
        Err(Error::precondition(format!(
            "finite-difference epsilon must lie in [1e-6, 1e-3], got {epsilon}"
        )))
    }
}

/// Picks `count` coordinates: at least one from every tensor (when the
/// budget allows), the rest uniformly without replacement.
pub fn sample_coordinates(layout: &Layout, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = layout.total();
    let count = count.min(total);
    let mut picked: Vec<usize> = Vec::with_capacity(count);
    for spec in layout.specs() {
        if picked.len() >= count / 2 {
            break;
        }
        let j = sample(&mut rng, spec.len(), 1).index(0);
        picked.push(spec.offset + j);
    }
    for i in sample(&mut rng, total, count).into_iter() {
        if picked.len() >= count {
            break;
        }
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    picked.sort_unstable();
    picked
}

/// Compares `analytic` against central differences of `loss` on the chosen
/// coordinates of `theta`. `loss` sees the perturbed parameter vector.
pub fn finite_difference_check(
    layout: &Layout,
    theta: &[f64],
    analytic: &[f64],
    coordinates: &[usize],
    epsilon: f64,
    mut loss: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<GradCheckReport> {
    check_epsilon(epsilon)?;
    let mut probe = theta.to_vec();
    let mut checks = Vec::with_capacity(coordinates.len());
    for &i in coordinates {
        let orig = probe[i];
        probe[i] = orig + epsilon;
        let plus = loss(&probe)?;
        probe[i] = orig - epsilon;
        let minus = loss(&probe)?;
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        checks.push(CoordinateCheck {
            index: i,
            name: layout.describe(i),
            analytic: analytic[i],
            numeric,
            rel_error: relative_error(analytic[i], numeric),
        });
    }
    let worst = checks
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .cloned();
    Ok(GradCheckReport {
        epsilon,
        max_rel_error: worst.as_ref().map_or(0.0, |w| w.rel_error),
        worst,
        coordinates: checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_checks_out() {
        let mut layout = Layout::default();
        layout.add("w", &[3], 0);
        let theta = [1.0, -2.0, 0.5];
        // loss = sum w_i^3
        let analytic: Vec<f64> = theta.iter().map(|w| 3.0 * w * w).collect();
        let report = finite_difference_check(&layout, &theta, &analytic, &[0, 1, 2], 1e-5, |p| {
            Ok(p.iter().map(|w| w * w * w).sum())
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");

        let mut broken = analytic.clone();
        broken[1] = 0.0;
        let report = finite_difference_check(&layout, &theta, &broken, &[0, 1, 2], 1e-5, |p| {
            Ok(p.iter().map(|w| w * w * w).sum())
        })
        .unwrap();
        assert!(report.error_at(1).unwrap() >= 0.1);
        assert_eq!(report.worst.unwrap().index, 1);
    }

    #[test]
    fn epsilon_range_is_enforced() {
        assert!(check_epsilon(1e-7).is_err());
        assert!(check_epsilon(1e-2).is_err());
        assert!(check_epsilon(1e-5).is_ok());
    }

    #[test]
    fn sampling_covers_every_tensor_when_budget_allows() {
        let mut layout = Layout::default();
        for i in 0..10 {
            layout.add(format!("t{i}"), &[50], 0);
        }
        let coords = sample_coordinates(&layout, 100, 4);
        assert_eq!(coords.len(), 100);
        for spec in layout.specs() {
            assert!(coords.iter().any(|&c| (spec.offset..spec.offset + 50).contains(&c)));
        }
    }
}
