//! Three-stratum worked example with constant potential outcomes.
//!
//! Equal thirds of always-, compliant- and never-recruited subjects with
//! `(Y(1), Y(0))` of `(30, 10)`, `(25, 10)` and `(20, 10)`. Treated clusters
//! recruit `{a, c}` (mean outcome 27.5), control clusters recruit `{a}` (mean
//! 10), so the naive contrast is 17.5 while `tau^O = 15`.

use serde::Serialize;

use crate::error::Result;
use crate::estimands::{overall_ate, recruited_ate};
use crate::estimators::itt_estimate;
use crate::model::{
    recruitment_status, PrincipalEffects, PrincipalStratum, RecruitedSample, Row,
    StrataDistribution,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StratumRow {
    pub stratum: PrincipalStratum,
    pub r1: u8,
    pub r0: u8,
    pub y1: f64,
    pub y0: f64,
}

/// Average of `(R, Y)` over the subjects of one arm sharing a recruitment status.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObservedCell {
    pub z: u8,
    pub strata: Vec<PrincipalStratum>,
    pub recruited: u8,
    /// `None` when the subjects are not recruited and their outcome is unseen.
    pub mean_y: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkedExample {
    pub rows: Vec<StratumRow>,
}

impl Default for WorkedExample {
    fn default() -> Self {
        use PrincipalStratum::*;
        let row = |stratum: PrincipalStratum, y1, y0| {
            let (r1, r0) = stratum.recruitment_pair();
            StratumRow {
                stratum,
                r1,
                r0,
                y1,
                y0,
            }
        };
        Self {
            rows: vec![
                row(AlwaysRecruited, 30.0, 10.0),
                row(CompliantRecruited, 25.0, 10.0),
                row(NeverRecruited, 20.0, 10.0),
            ],
        }
    }
}

impl WorkedExample {
    pub fn distribution(&self) -> StrataDistribution {
        let third = 1.0 / 3.0;
        StrataDistribution::new(third, third, third).expect("thirds are normalized")
    }

    pub fn effects(&self) -> PrincipalEffects {
        let effect = |s| {
            self.rows
                .iter()
                .find(|r| r.stratum == s)
                .map(|r| r.y1 - r.y0)
        };
        PrincipalEffects::new(
            effect(PrincipalStratum::AlwaysRecruited).unwrap_or(0.0),
            effect(PrincipalStratum::CompliantRecruited).unwrap_or(0.0),
            effect(PrincipalStratum::NeverRecruited),
        )
    }

    /// One subject per stratum in a treated cluster and in a control cluster,
    /// keeping only those recruited under their cluster's assignment.
    pub fn recruited_sample(&self) -> RecruitedSample {
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for (cluster_id, z) in [(0usize, 1u8), (1, 0)] {
            for r in &self.rows {
                if recruitment_status(r.stratum, z) == 1 {
                    rows.push(Row {
                        y: if z == 1 { r.y1 } else { r.y0 },
                        z,
                        x1: 0.0,
                        x2: 0,
                        cluster_id,
                    });
                    truth.push(r.stratum);
                }
            }
        }
        RecruitedSample {
            rows,
            truth: Some(truth),
        }
    }

    /// Observed-data cells: per arm, strata grouped by recruitment status.
    pub fn observed(&self) -> Vec<ObservedCell> {
        let mut cells = Vec::new();
        for z in [1u8, 0] {
            for status in [1u8, 0] {
                let members: Vec<&StratumRow> = self
                    .rows
                    .iter()
                    .filter(|r| recruitment_status(r.stratum, z) == status)
                    .collect();
                if members.is_empty() {
                    continue;
                }
                let mean_y = (status == 1).then(|| {
                    let ys: Vec<f64> = members
                        .iter()
                        .map(|r| if z == 1 { r.y1 } else { r.y0 })
                        .collect();
                    ys.iter().sum::<f64>() / ys.len() as f64
                });
                cells.push(ObservedCell {
                    z,
                    strata: members.iter().map(|r| r.stratum).collect(),
                    recruited: status,
                    mean_y,
                });
            }
        }
        cells
    }

    pub fn itt(&self) -> Result<f64> {
        itt_estimate(&self.recruited_sample())
    }

    pub fn tau_o(&self) -> Result<f64> {
        overall_ate(&self.distribution(), &self.effects())
    }

    pub fn tau_r(&self, r: f64) -> Result<f64> {
        recruited_ate(r, &self.distribution(), &self.effects())
    }
}
