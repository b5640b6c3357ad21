//! Direct stratified estimators of stratum, domain and national means and
//! totals, with finite-population correction and optional design effect.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::allocation::binary_variance;
use crate::area::{Area, Variable};
use crate::error::{Error, Result};
use crate::numeric::{mean, sample_variance};
use crate::popgen::SyntheticPopulation;
use crate::sampling::Sample;

/// Direct stratum estimate: `θ̂_h` and its sampling variance `ψ_h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StratumEstimate {
    pub mean: f64,
    pub s2: f64,
    pub psi: f64,
    pub n: usize,
    /// Variance came from a floor rather than the sample.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectEstimate {
    pub area: Area,
    pub variable: Variable,
    pub mean: f64,
    pub total: f64,
    /// Variance of the total.
    pub variance: f64,
    pub cv: f64,
    pub n: usize,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectEstimates {
    /// `strata[h][k]`.
    pub strata: Vec<[StratumEstimate; 3]>,
    /// National then domains, for each variable.
    pub areas: Vec<DirectEstimate>,
}

impl DirectEstimates {
    pub fn get(&self, area: Area, var: Variable) -> Option<&DirectEstimate> {
        self.areas.iter().find(|e| e.area == area && e.variable == var)
    }

    pub fn worst_domain_cv(&self, var: Variable) -> f64 {
        self.areas
            .iter()
            .filter(|e| e.variable == var && matches!(e.area, Area::Domain(_)))
            .map(|e| e.cv)
            .fold(0.0, f64::max)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
        w.write_record(["area", "variable", "mean", "total", "variance", "cv", "n", "degenerate"])?;
        for e in &self.areas {
            w.write_record([
                e.area.to_string(),
                e.variable.key().to_string(),
                e.mean.to_string(),
                e.total.to_string(),
                e.variance.to_string(),
                e.cv.to_string(),
                e.n.to_string(),
                e.degenerate.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// `√variance / total`, 0 for an exactly known zero total.
pub fn cv_from(variance: f64, total: f64) -> f64 {
    if total > 0.0 {
        variance.sqrt() / total
    } else if variance == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Stratum, domain and national direct estimates. With `apply_deff` the
/// stratum variances are inflated by the population's `δ_h`.
pub fn direct_estimates(sample: &Sample, pop: &SyntheticPopulation, apply_deff: bool) -> Result<DirectEstimates> {
    if sample.units.len() != pop.n_strata() {
        return Err(Error::Invalid("sample and population strata differ".into()));
    }
    let values: Vec<[Vec<f64>; 3]> = sample
        .units
        .iter()
        .enumerate()
        .map(|(h, units)| {
            if units.is_empty() {
                return Err(Error::stratum(h, "empty sample"));
            }
            Ok(Variable::ALL.map(|var| units.iter().map(|&u| pop.value(var, u)).collect()))
        })
        .collect::<Result<_>>()?;

    // Pooled within-stratum variance, the floor for single-unit strata.
    let pooled: [f64; 3] = Variable::ALL.map(|var| {
        let k = var.index();
        let (mut ss, mut df) = (0.0, 0.0);
        for v in values.iter().map(|v| &v[k]).filter(|v| v.len() >= 2) {
            ss += sample_variance(v) * (v.len() - 1) as f64;
            df += (v.len() - 1) as f64;
        }
        if df > 0.0 {
            ss / df
        } else {
            0.0
        }
    });

    let mut strata = Vec::with_capacity(values.len());
    for (h, vals) in values.iter().enumerate() {
        let info = &pop.strata[h];
        let big_n = info.size as f64;
        let deff = if apply_deff { info.deff } else { 1.0 };
        let est = Variable::ALL.map(|var| {
            let v = &vals[var.index()];
            let n = v.len();
            let m = mean(v);
            let (s2, degenerate) = if var.is_binary() {
                binary_variance(v.iter().sum(), n)
            } else if n < 2 {
                (pooled[var.index()], true)
            } else {
                (sample_variance(v), false)
            };
            let fpc = 1.0 - n as f64 / big_n;
            StratumEstimate { mean: m, s2, psi: deff * fpc * s2 / n as f64, n, degenerate: degenerate || n < 2 }
        });
        strata.push(est);
    }

    let mut areas = Vec::new();
    for area in Area::publication_areas(pop.n_domains()) {
        let members: Vec<usize> = match area {
            Area::Domain(d) => pop.domain_strata(d),
            _ => (0..pop.n_strata()).collect(),
        };
        let size: f64 = members.iter().map(|&h| pop.strata[h].size as f64).sum();
        for var in Variable::ALL {
            let k = var.index();
            let (mut total, mut variance, mut n, mut degenerate) = (0.0, 0.0, 0, false);
            for &h in &members {
                let big_n = pop.strata[h].size as f64;
                let s = &strata[h][k];
                total += big_n * s.mean;
                variance += big_n * big_n * s.psi;
                n += s.n;
                degenerate |= s.degenerate;
            }
            areas.push(DirectEstimate {
                area,
                variable: var,
                mean: total / size,
                total,
                variance,
                cv: cv_from(variance, total),
                n,
                degenerate,
            });
        }
    }
    Ok(DirectEstimates { strata, areas })
}

/// One row of the national / worst-domain CV tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub variable: Variable,
    pub national_cv: f64,
    pub national_target: f64,
    pub worst_domain_cv: f64,
    pub domain_target: f64,
}

impl CvRow {
    pub fn pass(&self) -> bool {
        self.national_cv <= self.national_target && self.worst_domain_cv <= self.domain_target
    }
}

pub const CV_TABLE_HEADER: [&str; 6] =
    ["Variable", "National CV", "National Target", "Worst-Domain CV", "Domain Target", "Pass"];

pub fn write_cv_table(rows: &[CvRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    w.write_record(CV_TABLE_HEADER)?;
    for r in rows {
        w.write_record([
            r.variable.label().to_string(),
            format!("{:.4}", r.national_cv),
            format!("{:.2}", r.national_target),
            format!("{:.4}", r.worst_domain_cv),
            format!("{:.2}", r.domain_target),
            if r.pass() { "pass" } else { "fail" }.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cv_conventions() {
        assert_eq!(cv_from(0.0, 0.0), 0.0);
        assert!(cv_from(1.0, 0.0).is_infinite());
        // N = 100, n = 25, S² = 4: ψ = 0.75·4/25 = 0.12; total 1000.
        let psi = 0.75 * 4.0 / 25.0;
        assert!((psi - 0.12f64).abs() < 1e-15);
        let cv = cv_from(psi * 100.0 * 100.0, 1000.0);
        assert!((cv - 1200f64.sqrt() / 1000.0).abs() < 1e-15);
        assert!((cv - 0.0346).abs() < 1e-4);
    }

    #[test]
    fn row_passes_only_when_both_bounds_hold() {
        let mut r = CvRow {
            variable: Variable::Employed,
            national_cv: 0.02,
            national_target: 0.03,
            worst_domain_cv: 0.07,
            domain_target: 0.08,
        };
        assert!(r.pass());
        r.worst_domain_cv = 0.081;
        assert!(!r.pass());
    }
}
