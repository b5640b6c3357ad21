//! Stratum allocation: problem inputs, design-based CVs, the single-variable
//! Neyman rule, the element-wise NSO maximum and the multivariate
//! multi-domain minimum-cost allocation.

mod bethel;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::area::Variable;
use crate::error::{Error, Result};
use crate::popgen::SyntheticPopulation;
use crate::sampling::{Allocation, BaselineSummary, Provenance};

pub use bethel::{bethel_solve, BethelOptions, BethelSolution, CellReport};

/// Upper CV bounds `g_{d,k}`; `national[k]` is `d = 0` and `domain[d-1][k]`
/// covers `d = 1..D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionTargets {
    pub national: Vec<f64>,
    pub domain: Vec<Vec<f64>>,
}

impl PrecisionTargets {
    pub fn uniform(variables: usize, domains: usize, national: f64, domain: f64) -> Self {
        Self { national: vec![national; variables], domain: vec![vec![domain; variables]; domains] }
    }

    /// Target for publication index `d` (0 = national).
    pub fn get(&self, d: usize, k: usize) -> f64 {
        if d == 0 {
            self.national[k]
        } else {
            self.domain[d - 1][k]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.national.iter().chain(self.domain.iter().flatten());
        for &g in all {
            if !(g > 0.0 && g < 1.0) {
                return Err(Error::config("targets", format!("CV bound {g} outside (0, 1)")));
            }
        }
        if self.domain.iter().any(|row| row.len() != self.national.len()) {
            return Err(Error::config("targets", "every domain needs one bound per variable"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumInputs {
    pub size: f64,
    /// Zero-based domain index.
    pub domain: usize,
    pub cost: f64,
    pub n_min: f64,
}

/// Data of the allocation problem. `s2[h][k]` and `deff[h][k]` are the
/// within-stratum variance and design effect; strata nest in domains so a
/// domain constraint sums only its own strata. `totals[d][k]` holds the
/// anticipated totals with `d = 0` national.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceInputs {
    pub variables: Vec<String>,
    pub domains: usize,
    pub strata: Vec<StratumInputs>,
    pub s2: Vec<Vec<f64>>,
    pub deff: Vec<Vec<f64>>,
    pub totals: Vec<Vec<f64>>,
}

impl VarianceInputs {
    pub fn n_strata(&self) -> usize {
        self.strata.len()
    }

    pub fn n_variables(&self) -> usize {
        self.variables.len()
    }

    /// Whether stratum `h` contributes to publication area `d`.
    pub fn in_area(&self, h: usize, d: usize) -> bool {
        d == 0 || self.strata[h].domain + 1 == d
    }

    /// `A_{h,d,k} = DEFF·N_h²·S²` for strata inside area `d`, else 0.
    pub fn coefficient(&self, h: usize, d: usize, k: usize) -> f64 {
        if self.in_area(h, d) {
            let n = self.strata[h].size;
            self.deff[h][k] * n * n * self.s2[h][k]
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.n_strata();
        let k = self.n_variables();
        if h == 0 || k == 0 {
            return Err(Error::Invalid("problem needs at least one stratum and one variable".into()));
        }
        if self.s2.len() != h || self.deff.len() != h || self.totals.len() != self.domains + 1 {
            return Err(Error::Invalid("array shapes do not match strata/domains".into()));
        }
        for (i, s) in self.strata.iter().enumerate() {
            if !(s.size >= 1.0 && s.cost > 0.0 && s.n_min >= 1.0 && s.domain < self.domains) {
                return Err(Error::stratum(i, "needs N_h >= 1, c_h > 0, n_min >= 1 and a valid domain"));
            }
            if self.s2[i].len() != k || self.deff[i].len() != k {
                return Err(Error::stratum(i, "one S² and DEFF per variable required"));
            }
            if self.s2[i].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(Error::stratum(i, "S² must be finite and non-negative"));
            }
            if self.deff[i].iter().any(|v| !(*v >= 1.0 && v.is_finite())) {
                return Err(Error::stratum(i, "DEFF must be at least 1"));
            }
        }
        let bad: Vec<String> = (0..=self.domains)
            .flat_map(|d| (0..k).map(move |kk| (d, kk)))
            .filter(|&(d, kk)| !(self.totals[d][kk] > 0.0))
            .map(|(d, kk)| format!("(d={d}, {})", self.variables[kk]))
            .collect();
        if !bad.is_empty() {
            return Err(Error::ZeroTotals(bad));
        }
        Ok(())
    }

    pub fn sizes(&self) -> Vec<f64> {
        self.strata.iter().map(|s| s.size).collect()
    }
}

/// Problem dump: inputs plus targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationProblem {
    pub inputs: VarianceInputs,
    pub targets: PrecisionTargets,
}

impl AllocationProblem {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let problem: Self = serde_json::from_str(&text)?;
        problem.inputs.validate()?;
        problem.targets.validate()?;
        Ok(problem)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InputOptions {
    pub unit_cost: f64,
    pub n_min: f64,
}

impl Default for InputOptions {
    fn default() -> Self {
        Self { unit_cost: 1.0, n_min: 2.0 }
    }
}

/// Variance of a binary indicator in a sample of `n` with `successes`,
/// `n/(n−1)·p̂(1−p̂)`; all-zero and all-one strata fall back to
/// `p̂ = 0.5/n` (respectively `1 − 0.5/n`).
pub fn binary_variance(successes: f64, n: usize) -> (f64, bool) {
    let nf = n as f64;
    let p = successes / nf;
    let floored = successes <= 0.0 || successes >= nf;
    let p = if floored { 0.5 / nf } else { p };
    if n < 2 {
        return (p * (1.0 - p), floored);
    }
    (nf / (nf - 1.0) * p * (1.0 - p), floored)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputWarning {
    pub stratum: usize,
    pub variable: String,
    pub message: String,
}

/// Variance inputs from the baseline sample. Totals are
/// `Y_{d,k} = Σ_{h∈d} N_h·ȳ_{h,k}`; design effects are the stratum `δ_h`
/// shared by all variables.
pub fn build_variance_inputs(
    baseline: &BaselineSummary,
    pop: &SyntheticPopulation,
    options: InputOptions,
) -> Result<(VarianceInputs, Vec<InputWarning>)> {
    if baseline.strata.len() != pop.n_strata() {
        return Err(Error::Invalid(format!(
            "baseline covers {} strata, population has {}",
            baseline.strata.len(),
            pop.n_strata()
        )));
    }
    let d_count = pop.n_domains();
    let mut warnings = Vec::new();
    let mut s2 = Vec::with_capacity(pop.n_strata());
    let mut deff = Vec::with_capacity(pop.n_strata());
    let mut totals = vec![vec![0.0; 3]; d_count + 1];
    let mut strata = Vec::with_capacity(pop.n_strata());
    for (h, (info, summary)) in pop.strata.iter().zip(&baseline.strata).enumerate() {
        let mut row = [0.0; 3];
        for var in Variable::ALL {
            let k = var.index();
            row[k] = if var.is_binary() {
                let (v, floored) = binary_variance(summary.means[k] * summary.n as f64, summary.n);
                if floored {
                    warnings.push(InputWarning {
                        stratum: h,
                        variable: var.key().into(),
                        message: "degenerate baseline proportion; variance floored".into(),
                    });
                }
                v
            } else {
                summary.sds[k] * summary.sds[k]
            };
            let y = info.size as f64 * summary.means[k];
            totals[0][k] += y;
            totals[info.domain + 1][k] += y;
        }
        s2.push(row.to_vec());
        deff.push(vec![info.deff; 3]);
        strata.push(StratumInputs {
            size: info.size as f64,
            domain: info.domain,
            cost: options.unit_cost,
            n_min: options.n_min.min(info.size as f64),
        });
    }
    let inputs = VarianceInputs {
        variables: Variable::ALL.iter().map(|v| v.key().to_string()).collect(),
        domains: d_count,
        strata,
        s2,
        deff,
        totals,
    };
    inputs.validate()?;
    Ok((inputs, warnings))
}

/// `Σ_h DEFF (1 − f_h) N_h² S² / n_h` over the strata of area `d`.
pub fn variance_of_total(sizes: &[f64], inputs: &VarianceInputs, d: usize, k: usize) -> Result<f64> {
    let mut v = 0.0;
    for (h, &n) in sizes.iter().enumerate() {
        let a = inputs.coefficient(h, d, k);
        if a == 0.0 {
            continue;
        }
        if n <= 0.0 {
            return Err(Error::stratum(h, "zero sample with positive variance"));
        }
        let big_n = inputs.strata[h].size;
        v += a * (1.0 - n / big_n) / n;
    }
    Ok(v.max(0.0))
}

pub fn cv_of(sizes: &[f64], inputs: &VarianceInputs, d: usize, k: usize) -> Result<f64> {
    Ok(variance_of_total(sizes, inputs, d, k)?.sqrt() / inputs.totals[d][k])
}

pub fn allocation_as_real(allocation: &Allocation) -> Vec<f64> {
    allocation.sizes.iter().map(|&n| n as f64).collect()
}

/// CV of every `(d, k)` cell; rows are `d = 0..=D`.
pub fn cv_table(allocation: &Allocation, inputs: &VarianceInputs) -> Result<Vec<Vec<f64>>> {
    let sizes = allocation_as_real(allocation);
    (0..=inputs.domains).map(|d| (0..inputs.n_variables()).map(|k| cv_of(&sizes, inputs, d, k)).collect()).collect()
}

/// Rounds up, ignoring floating noise just above an integer.
pub(crate) fn ceil_tolerant(x: f64) -> f64 {
    (x - 1e-9 * x.abs().max(1.0)).ceil()
}

/// Neyman allocation `n_h ∝ N_h S_h √DEFF_h` for variable `k`, with the
/// total sized to meet the national CV bound `g` exactly:
/// `n = (Σ N_h S_h √DEFF_h)² / ((g Y)² + Σ DEFF_h N_h S_h²)`.
pub fn neyman_continuous(inputs: &VarianceInputs, k: usize, g: f64) -> Result<Vec<f64>> {
    let weights: Vec<f64> = inputs
        .strata
        .iter()
        .enumerate()
        .map(|(h, s)| s.size * inputs.s2[h][k].sqrt() * inputs.deff[h][k].sqrt())
        .collect();
    let t: f64 = weights.iter().sum();
    if t <= 0.0 {
        return Err(Error::Invalid(format!("variable {} has zero variance in every stratum", inputs.variables[k])));
    }
    let fpc_term: f64 =
        inputs.strata.iter().enumerate().map(|(h, s)| inputs.deff[h][k] * s.size * inputs.s2[h][k]).sum();
    let gy = g * inputs.totals[0][k];
    let n = t * t / (gy * gy + fpc_term);
    Ok(weights.iter().map(|w| n * w / t).collect())
}

pub fn neyman_allocation(inputs: &VarianceInputs, k: usize, g: f64) -> Result<Allocation> {
    let raw = neyman_continuous(inputs, k, g)?;
    let sizes =
        raw.iter().zip(&inputs.strata).map(|(&n, s)| ceil_tolerant(n).max(s.n_min).min(s.size) as usize).collect();
    Ok(Allocation::new(sizes, Provenance::Neyman { variable: inputs.variables[k].clone() }))
}

/// Element-wise maximum of per-variable allocations.
pub fn nso_max_allocation(allocations: &[Allocation]) -> Result<Allocation> {
    let first = allocations.first().ok_or_else(|| Error::Invalid("no allocations to combine".into()))?;
    let h = first.sizes.len();
    if allocations.iter().any(|a| a.sizes.len() != h) {
        return Err(Error::Invalid("allocations cover different strata".into()));
    }
    let sizes = (0..h).map(|i| allocations.iter().map(|a| a.sizes[i]).max().unwrap_or(0)).collect();
    Ok(Allocation::new(sizes, Provenance::NsoMax))
}

/// Cluster design effect `1 + (b − 1) ρ`.
pub fn deff_cluster(take: f64, rho: f64) -> f64 {
    1.0 + (take - 1.0) * rho
}

/// Scales the number of PSUs and keeps the within-PSU take, which leaves the
/// cluster design effect unchanged.
pub fn preserve_deff_reduction(psus: usize, take: usize, scale: f64) -> (usize, usize) {
    let m = crate::numeric::round_half_even(scale * psus as f64) as usize;
    (m, take)
}
