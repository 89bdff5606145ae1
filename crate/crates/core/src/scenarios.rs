//! Hospital cohorts selected by shard size.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ClientShard;

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("invalid scenario bounds: lower {lower} must satisfy 1 <= lower <= upper {upper}")]
    InvalidBounds { lower: usize, upper: usize },
    #[error("no hospital has between {lower} and {upper} stays")]
    EmptyCohort { lower: usize, upper: usize },
}

/// Inclusive shard-size bounds `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub lower: usize,
    pub upper: usize,
    #[serde(default)]
    pub label: Option<String>,
}

impl ScenarioSpec {
    pub fn new(lower: usize, upper: usize) -> Result<Self, ScenarioError> {
        let s = Self {
            lower,
            upper,
            label: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn labeled(lower: usize, upper: usize, label: impl Into<String>) -> Result<Self, ScenarioError> {
        let mut s = Self::new(lower, upper)?;
        s.label = Some(label.into());
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.lower < 1 || self.lower > self.upper {
            return Err(ScenarioError::InvalidBounds {
                lower: self.lower,
                upper: self.upper,
            });
        }
        Ok(())
    }

    pub fn contains(&self, size: usize) -> bool {
        (self.lower..=self.upper).contains(&size)
    }

    /// The label if set, otherwise `"<lower>-<upper>"`.
    pub fn display_label(&self) -> String {
        self.label
            .clone()
            .unwrap_or_else(|| format!("{}-{}", self.lower, self.upper))
    }
}

/// Published cohort statistics for one reference scenario.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceRow {
    pub scenario: u32,
    pub lower: usize,
    pub upper: usize,
    pub n: usize,
    pub mu: f64,
    pub sigma: f64,
}

/// The eighteen reference scenarios over the eICU hospital population.
pub const REFERENCE_TABLE: [ReferenceRow; 18] = [
    row(1, 10, 50, 19, 24.95, 13.42),
    row(2, 10, 100, 29, 39.41, 24.14),
    row(3, 10, 500, 103, 210.42, 139.57),
    row(4, 10, 1000, 148, 364.62, 273.76),
    row(5, 10, 5000, 202, 813.06, 932.94),
    row(6, 50, 100, 10, 66.90, 13.93),
    row(7, 50, 500, 84, 252.37, 119.60),
    row(8, 50, 1000, 129, 414.65, 257.80),
    row(9, 50, 5000, 183, 894.89, 943.16),
    row(10, 100, 500, 74, 277.43, 104.56),
    row(11, 100, 1000, 119, 443.87, 247.01),
    row(12, 100, 5000, 173, 942.75, 948.18),
    row(13, 500, 1000, 45, 717.58, 151.32),
    row(14, 500, 5000, 99, 1440.06, 992.32),
    row(15, 1000, 5000, 54, 2042.13, 994.34),
    row(16, 5, 50, 20, 24.15, 13.54),
    row(17, 5, 500, 104, 208.48, 140.28),
    row(18, 5, 5000, 203, 809.10, 932.35),
];

const fn row(scenario: u32, lower: usize, upper: usize, n: usize, mu: f64, sigma: f64) -> ReferenceRow {
    ReferenceRow {
        scenario,
        lower,
        upper,
        n,
        mu,
        sigma,
    }
}

/// Reference scenarios as specs labelled `"1"` to `"18"`.
pub fn reference_scenarios() -> Vec<ScenarioSpec> {
    REFERENCE_TABLE
        .iter()
        .map(|r| ScenarioSpec {
            lower: r.lower,
            upper: r.upper,
            label: Some(r.scenario.to_string()),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CohortStats {
    pub n: usize,
    pub mu: f64,
    /// Population standard deviation of shard sizes.
    pub sigma: f64,
}

#[derive(Debug, Clone)]
pub struct Cohort {
    pub spec: ScenarioSpec,
    pub shards: Vec<ClientShard>,
    pub n: usize,
    pub mu: f64,
    pub sigma: f64,
}

impl Cohort {
    pub fn hospital_ids(&self) -> Vec<u32> {
        self.shards.iter().map(ClientShard::hospital_id).collect()
    }

    pub fn stats(&self) -> CohortStats {
        CohortStats {
            n: self.n,
            mu: self.mu,
            sigma: self.sigma,
        }
    }

    /// Sample (n - 1) standard deviation; `None` for single-hospital cohorts.
    pub fn sample_sigma(&self) -> Option<f64> {
        let sizes: Vec<usize> = self.shards.iter().map(ClientShard::size).collect();
        sample_std(&sizes)
    }
}

pub fn size_stats(sizes: &[usize]) -> CohortStats {
    let n = sizes.len();
    if n == 0 {
        return CohortStats {
            n: 0,
            mu: 0.0,
            sigma: 0.0,
        };
    }
    let mu = sizes.iter().sum::<usize>() as f64 / n as f64;
    let ss: f64 = sizes.iter().map(|&s| (s as f64 - mu).powi(2)).sum();
    CohortStats {
        n,
        mu,
        sigma: (ss / n as f64).sqrt(),
    }
}

fn sample_std(sizes: &[usize]) -> Option<f64> {
    let n = sizes.len();
    if n < 2 {
        return None;
    }
    let st = size_stats(sizes);
    let ss: f64 = sizes.iter().map(|&s| (s as f64 - st.mu).powi(2)).sum();
    Some((ss / (n - 1) as f64).sqrt())
}

/// Selects exactly the shards with `lower <= m_k <= upper`.
pub fn build_cohort(shards: &[ClientShard], spec: &ScenarioSpec) -> Result<Cohort, ScenarioError> {
    spec.validate()?;
    let selected: Vec<ClientShard> = shards.iter().filter(|s| spec.contains(s.size())).cloned().collect();
    if selected.is_empty() {
        return Err(ScenarioError::EmptyCohort {
            lower: spec.lower,
            upper: spec.upper,
        });
    }
    let sizes: Vec<usize> = selected.iter().map(ClientShard::size).collect();
    let st = size_stats(&sizes);
    Ok(Cohort {
        spec: spec.clone(),
        shards: selected,
        n: st.n,
        mu: st.mu,
        sigma: st.sigma,
    })
}

/// Recomputes `(n, mu, sigma)` from the cohort's shards.
pub fn cohort_stats(c: &Cohort) -> CohortStats {
    let sizes: Vec<usize> = c.shards.iter().map(ClientShard::size).collect();
    size_stats(&sizes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Record;
    use std::sync::Arc;

    fn shards(sizes: &[usize]) -> Vec<ClientShard> {
        let schema = Arc::new(vec!["x".to_string()]);
        let mut stay = 0;
        sizes
            .iter()
            .enumerate()
            .map(|(h, &m)| {
                let recs = (0..m)
                    .map(|_| {
                        stay += 1;
                        Record {
                            hospital_id: h as u32,
                            stay_id: stay,
                            features: vec![0.0],
                            label: 0,
                        }
                    })
                    .collect();
                ClientShard::new(h as u32, schema.clone(), recs).unwrap()
            })
            .collect()
    }

    #[test]
    fn selects_all() {
        let c = build_cohort(&shards(&[5, 50, 500]), &ScenarioSpec::new(1, 10000).unwrap()).unwrap();
        assert_eq!(c.n, 3);
        assert_eq!(c.mu, 185.0);
    }

    #[test]
    fn selects_single() {
        let c = build_cohort(&shards(&[5, 50, 500]), &ScenarioSpec::new(6, 499).unwrap()).unwrap();
        assert_eq!((c.n, c.mu, c.sigma), (1, 50.0, 0.0));
        assert_eq!(c.sample_sigma(), None);
    }

    #[test]
    fn bounds_are_inclusive() {
        let c = build_cohort(&shards(&[5, 50, 500]), &ScenarioSpec::new(5, 50).unwrap()).unwrap();
        assert_eq!(c.hospital_ids(), vec![0, 1]);
    }

    #[test]
    fn empty_cohort_names_bounds() {
        let err = build_cohort(&shards(&[5, 50]), &ScenarioSpec::new(60, 70).unwrap()).unwrap_err();
        assert_eq!(err, ScenarioError::EmptyCohort { lower: 60, upper: 70 });
        assert!(err.to_string().contains("60") && err.to_string().contains("70"));
    }

    #[test]
    fn invalid_bounds() {
        assert!(ScenarioSpec::new(10, 5).is_err());
        assert!(ScenarioSpec::new(0, 5).is_err());
    }

    #[test]
    fn stats_examples() {
        let c = build_cohort(&shards(&[10, 10, 10]), &ScenarioSpec::new(1, 100).unwrap()).unwrap();
        assert_eq!(
            cohort_stats(&c),
            CohortStats {
                n: 3,
                mu: 10.0,
                sigma: 0.0
            }
        );
        let c = build_cohort(&shards(&[10, 30]), &ScenarioSpec::new(1, 100).unwrap()).unwrap();
        // sqrt(((10-20)^2 + (30-20)^2) / 2) = 10
        assert_eq!(
            cohort_stats(&c),
            CohortStats {
                n: 2,
                mu: 20.0,
                sigma: 10.0
            }
        );
        assert_eq!(c.stats(), cohort_stats(&c));
        // sqrt(200 / 1)
        assert!((c.sample_sigma().unwrap() - 200f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn reference_table_is_consistent() {
        assert_eq!(reference_scenarios().len(), 18);
        for r in REFERENCE_TABLE {
            assert!(r.lower <= r.upper && r.n > 0);
            assert!(r.mu >= r.lower as f64 && r.mu <= r.upper as f64);
        }
    }
}
