//! Search for the largest sub-sample fraction the HB models sustain.
//!
//! For every variable and every grid value `α` the master sample is cut to
//! its nested `(1 − α)` sub-sample, the variable's model is refitted and four
//! gates are checked: the CV targets in every publication area, the
//! Gelman–Rubin limit, national accuracy and domain accuracy. The per-variable
//! answer is the largest eligible grid value; the combined answer is their
//! minimum, verified by refitting every variable there.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::PrecisionTargets;
use crate::area::{Area, Variable};
use crate::error::{Error, Result};
use crate::estimators::DirectEstimates;
use crate::hb::{fit_variable, hb_cv, PosteriorSummary, Prior, SamplerSettings};
use crate::numeric::{mean, round_half_even, sample_variance};
use crate::popgen::{SyntheticPopulation, TruthRegistry};
use crate::rng::Streams;
use crate::sampling::{nested_subsample, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateThresholds {
    pub rhat: f64,
    pub national_are: f64,
    pub domain_mare: f64,
    pub domain_max_are: f64,
}

impl Default for GateThresholds {
    fn default() -> Self {
        Self { rhat: 1.05, national_are: 0.05, domain_mare: 0.15, domain_max_are: 0.50 }
    }
}

impl GateThresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rhat", self.rhat),
            ("national_are", self.national_are),
            ("domain_mare", self.domain_mare),
            ("domain_max_are", self.domain_max_are),
        ] {
            if !(v > 0.0) {
                return Err(Error::config(format!("thresholds.{name}"), "must be positive"));
            }
        }
        Ok(())
    }
}

/// Reference means for the accuracy gates: simulation truth, or direct
/// estimates from an earlier cycle. Row 0 is national, then the domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthProxy {
    pub areas: Vec<[f64; 3]>,
}

impl TruthProxy {
    pub fn from_registry(truth: &TruthRegistry) -> Self {
        let national = truth.national.map(|t| t.mean);
        let areas = std::iter::once(national).chain(truth.domains.iter().map(|d| d.map(|t| t.mean))).collect();
        Self { areas }
    }

    pub fn from_direct(direct: &DirectEstimates) -> Self {
        let n_domains = direct
            .areas
            .iter()
            .filter_map(|e| match e.area {
                Area::Domain(d) => Some(d + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0);
        let areas = Area::publication_areas(n_domains)
            .into_iter()
            .map(|area| Variable::ALL.map(|var| direct.get(area, var).map_or(f64::NAN, |e| e.mean)))
            .collect();
        Self { areas }
    }

    pub fn n_domains(&self) -> usize {
        self.areas.len().saturating_sub(1)
    }

    pub fn get(&self, d: usize, var: Variable) -> f64 {
        self.areas[d][var.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub variable: Variable,
    pub alpha: f64,
    /// Sub-sample size.
    pub n: usize,
    /// Area with the largest CV relative to its target.
    pub worst_cv_area: Area,
    pub worst_cv: f64,
    pub worst_cv_target: f64,
    pub cv_pass: bool,
    pub rhat_max: f64,
    pub rhat_pass: bool,
    pub national_are: f64,
    pub national_pass: bool,
    pub domain_mare: f64,
    pub domain_max_are: f64,
    pub domain_pass: bool,
    /// Publication areas whose 95% interval contains the reference mean.
    pub coverage: usize,
    /// Signed national relative error.
    pub national_bias: f64,
    pub eligible: bool,
    pub failure: Option<String>,
}

impl GateReport {
    fn failed(variable: Variable, alpha: f64, n: usize, reason: String) -> Self {
        Self {
            variable,
            alpha,
            n,
            worst_cv_area: Area::National,
            worst_cv: f64::INFINITY,
            worst_cv_target: f64::NAN,
            cv_pass: false,
            rhat_max: f64::INFINITY,
            rhat_pass: false,
            national_are: f64::INFINITY,
            national_pass: false,
            domain_mare: f64::INFINITY,
            domain_max_are: f64::INFINITY,
            domain_pass: false,
            coverage: 0,
            national_bias: f64::NAN,
            eligible: false,
            failure: Some(reason),
        }
    }
}

/// `|estimate − reference| / reference`.
pub fn absolute_relative_error(estimate: f64, reference: f64) -> f64 {
    if reference == 0.0 {
        return if estimate == 0.0 { 0.0 } else { f64::INFINITY };
    }
    ((estimate - reference) / reference).abs()
}

/// Gate quantities of one fitted model against a reference.
pub fn gates_from_summary(
    variable: Variable,
    alpha: f64,
    n: usize,
    summary: &PosteriorSummary,
    truth: &TruthProxy,
    targets: &PrecisionTargets,
    thresholds: &GateThresholds,
) -> GateReport {
    let k = variable.index();
    let areas = Area::publication_areas(truth.n_domains());
    let mut worst = (Area::National, f64::NEG_INFINITY, f64::NAN, f64::NEG_INFINITY);
    let mut cv_pass = true;
    let mut coverage = 0;
    let mut domain_are = Vec::with_capacity(areas.len() - 1);
    let mut national_are = f64::INFINITY;
    let mut national_bias = f64::NAN;
    for (d, &area) in areas.iter().enumerate() {
        let target = targets.get(d, k);
        let cv = hb_cv(summary, area).unwrap_or(f64::INFINITY);
        cv_pass &= cv <= target;
        if cv / target > worst.3 {
            worst = (area, cv, target, cv / target);
        }
        let reference = truth.get(d, variable);
        let Some(s) = summary.area(area) else {
            domain_are.push(f64::INFINITY);
            continue;
        };
        if s.covers(reference) {
            coverage += 1;
        }
        let are = absolute_relative_error(s.mean, reference);
        if d == 0 {
            national_are = are;
            national_bias = (s.mean - reference) / reference;
        } else {
            domain_are.push(are);
        }
    }
    let domain_mare = if domain_are.is_empty() { 0.0 } else { mean(&domain_are) };
    let domain_max_are = domain_are.iter().copied().fold(0.0, f64::max);
    let rhat_pass = summary.rhat_max <= thresholds.rhat;
    let national_pass = national_are <= thresholds.national_are;
    let domain_pass = domain_mare <= thresholds.domain_mare && domain_max_are <= thresholds.domain_max_are;
    GateReport {
        variable,
        alpha,
        n,
        worst_cv_area: worst.0,
        worst_cv: worst.1,
        worst_cv_target: worst.2,
        cv_pass,
        rhat_max: summary.rhat_max,
        rhat_pass,
        national_are,
        national_pass,
        domain_mare,
        domain_max_are,
        domain_pass,
        coverage,
        national_bias,
        eligible: cv_pass && rhat_pass && national_pass && domain_pass,
        failure: None,
    }
}

/// Everything a gate evaluation needs besides the variable and `α`.
#[derive(Debug, Clone)]
pub struct ReductionContext<'a> {
    pub pop: &'a SyntheticPopulation,
    pub master: &'a Sample,
    pub truth: &'a TruthProxy,
    pub targets: &'a PrecisionTargets,
    pub thresholds: GateThresholds,
    pub settings: SamplerSettings,
    /// Prior per variable, indexed by `Variable::index()`.
    pub priors: [Prior; 3],
    pub apply_deff: bool,
    pub seed: u64,
}

impl ReductionContext<'_> {
    fn fit_seed(&self, variable: Variable, alpha: f64, tag: &str) -> u64 {
        Streams::new(self.seed).derive(&format!("reduce/{variable}/{tag}/{alpha:.6}")).seed()
    }

    /// Fits the sub-sample at `α` with `prior` and returns the summary.
    pub fn fit(&self, variable: Variable, alpha: f64, prior: Prior, tag: &str) -> Result<(usize, PosteriorSummary)> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::config("alpha", format!("{alpha} outside [0, 1)")));
        }
        let sub = nested_subsample(self.master, 1.0 - alpha)?;
        let seed = self.fit_seed(variable, alpha, tag);
        let (_, summary) = fit_variable(variable, &sub.sample, self.pop, prior, self.settings, self.apply_deff, seed)?;
        Ok((sub.sample.total(), summary))
    }
}

/// Fits the variable's model at `α` and checks the four gates. A failed fit
/// yields an ineligible report carrying the reason.
pub fn evaluate_gates(variable: Variable, alpha: f64, ctx: &ReductionContext) -> GateReport {
    let prior = ctx.priors[variable.index()];
    let n_hint = ctx.master.total();
    match ctx.fit(variable, alpha, prior, "gates") {
        Ok((n, summary)) => gates_from_summary(variable, alpha, n, &summary, ctx.truth, ctx.targets, &ctx.thresholds),
        Err(e) => {
            log::warn!("{variable} at α = {alpha}: {e}");
            let n = round_half_even((1.0 - alpha) * n_hint as f64) as usize;
            GateReport::failed(variable, alpha, n, e.to_string())
        }
    }
}

/// `{0, step, 2·step, …}` below one.
pub fn alpha_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step < 1.0) {
        return Err(Error::config("alpha_step", "must lie in (0, 1)"));
    }
    let count = ((1.0 - 1e-9) / step).floor() as usize;
    Ok((0..=count).map(|i| round_half_even(i as f64 * step * 1e9) / 1e9).filter(|a| *a < 1.0).collect())
}

pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::config("alpha_grid", "must not be empty"));
    }
    if grid.iter().any(|a| !(0.0..1.0).contains(a)) {
        return Err(Error::config("alpha_grid", "values must lie in [0, 1)"));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("alpha_grid", "must be strictly ascending"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaChoice {
    pub alpha_star: f64,
    /// Some eligible point lies above an ineligible one.
    pub nonmonotone: bool,
    pub warning: Option<String>,
}

/// Largest eligible grid value, from `(α, eligible)` pairs in ascending order.
pub fn choose_alpha(points: &[(f64, bool)]) -> AlphaChoice {
    let best =
        points.iter().filter(|p| p.1).map(|p| p.0).fold(None, |m: Option<f64>, a| Some(m.map_or(a, |m| m.max(a))));
    let first_fail = points.iter().find(|p| !p.1).map(|p| p.0);
    let nonmonotone = matches!((first_fail, best), (Some(f), Some(b)) if b > f);
    let warning = match best {
        Some(_) => None,
        None if points.first().is_some_and(|p| p.0 == 0.0) => {
            Some("no eligible grid point; the full master sample itself fails the gates".to_string())
        }
        None => Some("no eligible grid point".to_string()),
    };
    AlphaChoice { alpha_star: best.unwrap_or(0.0), nonmonotone, warning }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableReduction {
    pub variable: Variable,
    pub alpha_star: f64,
    pub n_hb: usize,
    pub nonmonotone: bool,
    pub warning: Option<String>,
    pub reports: Vec<GateReport>,
}

/// Evaluates every grid point for one variable.
pub fn alpha_star_search(variable: Variable, grid: &[f64], ctx: &ReductionContext) -> Result<VariableReduction> {
    validate_grid(grid)?;
    let reports: Vec<GateReport> = grid.par_iter().map(|&a| evaluate_gates(variable, a, ctx)).collect();
    let points: Vec<(f64, bool)> = reports.iter().map(|r| (r.alpha, r.eligible)).collect();
    let choice = choose_alpha(&points);
    if let Some(w) = &choice.warning {
        log::warn!("{variable}: {w}");
    }
    if choice.nonmonotone {
        log::warn!("{variable}: eligibility is not monotone in α");
    }
    Ok(VariableReduction {
        variable,
        alpha_star: choice.alpha_star,
        n_hb: reduced_size(ctx.master.total(), choice.alpha_star),
        nonmonotone: choice.nonmonotone,
        warning: choice.warning,
        reports,
    })
}

/// `⌊(1 − α)·n*⌉`, ties to even.
pub fn reduced_size(n_star: usize, alpha: f64) -> usize {
    round_half_even((1.0 - alpha) * n_star as f64) as usize
}

/// `α* = min_k α*_k` and the reduced total.
pub fn minimax_combine(alphas: &[f64], n_star: usize) -> Result<(f64, usize)> {
    let alpha = alphas
        .iter()
        .copied()
        .reduce(f64::min)
        .ok_or_else(|| Error::Invalid("minimax needs at least one variable".into()))?;
    Ok((alpha, reduced_size(n_star, alpha)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionResult {
    pub n_star: usize,
    pub variables: Vec<VariableReduction>,
    pub alpha_star: f64,
    pub n_hb: usize,
    /// Size of the nested sub-sample actually drawn at `α*`.
    pub n_hb_drawn: usize,
    /// Every variable refitted at the combined `α*`.
    pub recheck: Vec<GateReport>,
    pub recheck_pass: bool,
}

impl ReductionResult {
    pub fn variable(&self, var: Variable) -> Option<&VariableReduction> {
        self.variables.iter().find(|v| v.variable == var)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// One row per (variable, α) grid point, followed by the re-check rows.
    pub fn write_gate_csv(&self, path: &Path) -> Result<()> {
        let rows = self
            .variables
            .iter()
            .flat_map(|v| v.reports.iter().map(|r| ("search", r)))
            .chain(self.recheck.iter().map(|r| ("recheck", r)));
        write_gate_rows(rows, path)
    }
}

pub const GATE_CSV_HEADER: [&str; 19] = [
    "phase",
    "variable",
    "alpha",
    "n",
    "worst_cv_area",
    "worst_cv",
    "worst_cv_target",
    "cv_pass",
    "rhat_max",
    "rhat_pass",
    "national_are",
    "national_pass",
    "domain_mare",
    "domain_max_are",
    "domain_pass",
    "coverage",
    "national_bias",
    "eligible",
    "failure",
];

fn write_gate_rows<'a>(rows: impl Iterator<Item = (&'a str, &'a GateReport)>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(GATE_CSV_HEADER)?;
    for (phase, r) in rows {
        w.write_record([
            phase.to_string(),
            r.variable.to_string(),
            format!("{:.2}", r.alpha),
            r.n.to_string(),
            r.worst_cv_area.to_string(),
            format!("{:.6}", r.worst_cv),
            format!("{:.4}", r.worst_cv_target),
            r.cv_pass.to_string(),
            format!("{:.6}", r.rhat_max),
            r.rhat_pass.to_string(),
            format!("{:.6}", r.national_are),
            r.national_pass.to_string(),
            format!("{:.6}", r.domain_mare),
            format!("{:.6}", r.domain_max_are),
            r.domain_pass.to_string(),
            r.coverage.to_string(),
            format!("{:.6}", r.national_bias),
            r.eligible.to_string(),
            r.failure.clone().unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-variable searches, minimax combination and the mandatory re-check.
pub fn run_reduction(variables: &[Variable], grid: &[f64], ctx: &ReductionContext) -> Result<ReductionResult> {
    if variables.is_empty() {
        return Err(Error::config("variables", "at least one variable is required"));
    }
    let searches = variables.iter().map(|&v| alpha_star_search(v, grid, ctx)).collect::<Result<Vec<_>>>()?;
    let alphas: Vec<f64> = searches.iter().map(|s| s.alpha_star).collect();
    let n_star = ctx.master.total();
    let (alpha_star, n_hb) = minimax_combine(&alphas, n_star)?;
    let recheck: Vec<GateReport> = variables.par_iter().map(|&v| evaluate_gates(v, alpha_star, ctx)).collect();
    let recheck_pass = recheck.iter().all(|r| r.eligible);
    if !recheck_pass {
        log::warn!("minimax re-check at α = {alpha_star} failed for some variable");
    }
    let n_hb_drawn = nested_subsample(ctx.master, 1.0 - alpha_star)?.sample.total();
    Ok(ReductionResult { n_star, variables: searches, alpha_star, n_hb, n_hb_drawn, recheck, recheck_pass })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorCandidate {
    pub nu: f64,
    pub s2: f64,
    pub coverage: usize,
    pub national_bias: f64,
    pub domain_mare: f64,
    pub domain_max_are: f64,
    pub rhat_max: f64,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorGridResult {
    pub variable: Variable,
    pub alpha: f64,
    pub candidates: Vec<PriorCandidate>,
    pub selected: usize,
    /// Coverage count a candidate needs to qualify.
    pub required_coverage: usize,
    /// No candidate qualified; the best-covering one was taken.
    pub fallback: bool,
}

impl PriorGridResult {
    pub fn prior(&self) -> Prior {
        let c = &self.candidates[self.selected];
        Prior { nu: c.nu, s2: c.s2 }
    }
}

/// `⌈0.95·areas⌉`.
pub fn required_coverage(areas: usize) -> usize {
    (0.95 * areas as f64 - 1e-9).ceil() as usize
}

fn rank(a: &PriorCandidate, b: &PriorCandidate) -> std::cmp::Ordering {
    a.domain_mare
        .total_cmp(&b.domain_mare)
        .then(a.domain_max_are.total_cmp(&b.domain_max_are))
        .then(a.nu.total_cmp(&b.nu))
}

/// Index of the chosen candidate and whether the coverage fallback was used.
pub fn select_prior(candidates: &[PriorCandidate], areas: usize) -> Result<(usize, bool)> {
    if candidates.is_empty() {
        return Err(Error::config("prior_grid", "must not be empty"));
    }
    let need = required_coverage(areas);
    let qualifying = candidates.iter().enumerate().filter(|(_, c)| c.coverage >= need && c.failure.is_none());
    if let Some((i, _)) = qualifying.min_by(|a, b| rank(a.1, b.1).then(a.0.cmp(&b.0))) {
        return Ok((i, false));
    }
    let (i, _) = candidates
        .iter()
        .enumerate()
        .min_by(|a, b| b.1.coverage.cmp(&a.1.coverage).then(rank(a.1, b.1)).then(a.0.cmp(&b.0)))
        .expect("non-empty");
    Ok((i, true))
}

pub const DEFAULT_NU_GRID: [f64; 5] = [2.0, 3.0, 5.0, 10.0, 20.0];

/// Seven log-spaced values `centre·10^{−1.5, −1, …, 1.5}`.
pub fn s2_grid(centre: f64) -> Vec<f64> {
    (-3..=3).map(|i| centre * 10f64.powf(0.5 * i as f64)).collect()
}

/// Between-stratum variance of the variable on its model scale, from a
/// sample: the variance of the stratum estimates less their mean sampling
/// variance, floored at 5% of the raw spread.
pub fn between_stratum_variance(
    variable: Variable,
    sample: &Sample,
    pop: &SyntheticPopulation,
    apply_deff: bool,
) -> Result<f64> {
    let (estimates, sampling): (Vec<f64>, Vec<f64>) = if variable.is_binary() {
        sample
            .units
            .iter()
            .map(|units| {
                let n = units.len() as f64;
                let y: f64 = units.iter().map(|&u| pop.value(variable, u)).sum();
                (((y + 0.5) / (n - y + 0.5)).ln(), 1.0 / (y + 0.5) + 1.0 / (n - y + 0.5))
            })
            .unzip()
    } else {
        let direct = crate::estimators::direct_estimates(sample, pop, apply_deff)?;
        direct.strata.iter().map(|s| (s[variable.index()].mean, s[variable.index()].psi)).unzip()
    };
    if estimates.len() < 2 {
        return Err(Error::Invalid("between-stratum variance needs two strata".into()));
    }
    let spread = sample_variance(&estimates);
    let floor = (0.05 * spread).max(1e-8);
    Ok((spread - mean(&sampling)).max(floor))
}

/// Fits every `(ν, s²)` pair at `α` and applies the selection rule.
pub fn prior_grid_search(
    variable: Variable,
    nu_grid: &[f64],
    s2_values: &[f64],
    alpha: f64,
    ctx: &ReductionContext,
) -> Result<PriorGridResult> {
    if nu_grid.is_empty() || s2_values.is_empty() {
        return Err(Error::config("prior_grid", "ν and s² grids must not be empty"));
    }
    let pairs: Vec<(f64, f64)> = nu_grid.iter().flat_map(|&nu| s2_values.iter().map(move |&s2| (nu, s2))).collect();
    let candidates: Vec<PriorCandidate> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, &(nu, s2))| match ctx.fit(variable, alpha, Prior { nu, s2 }, &format!("prior/{i}")) {
            Ok((n, summary)) => {
                let r = gates_from_summary(variable, alpha, n, &summary, ctx.truth, ctx.targets, &ctx.thresholds);
                PriorCandidate {
                    nu,
                    s2,
                    coverage: r.coverage,
                    national_bias: r.national_bias,
                    domain_mare: r.domain_mare,
                    domain_max_are: r.domain_max_are,
                    rhat_max: r.rhat_max,
                    failure: None,
                }
            }
            Err(e) => PriorCandidate {
                nu,
                s2,
                coverage: 0,
                national_bias: f64::NAN,
                domain_mare: f64::INFINITY,
                domain_max_are: f64::INFINITY,
                rhat_max: f64::INFINITY,
                failure: Some(e.to_string()),
            },
        })
        .collect();
    let areas = ctx.truth.areas.len();
    let (selected, fallback) = select_prior(&candidates, areas)?;
    if fallback {
        log::warn!("{variable}: no prior reaches the coverage requirement; taking the best-covering one");
    }
    Ok(PriorGridResult { variable, alpha, candidates, selected, required_coverage: required_coverage(areas), fallback })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_twenty_points() {
        let g = alpha_grid(0.05).unwrap();
        assert_eq!(g.len(), 20);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[19], 0.95);
        validate_grid(&g).unwrap();
        assert!(validate_grid(&[0.2, 0.1]).is_err());
        assert!(validate_grid(&[1.0]).is_err());
    }

    #[test]
    fn coverage_requirement() {
        assert_eq!(required_coverage(11), 11);
        assert_eq!(required_coverage(20), 19);
        assert_eq!(required_coverage(1), 1);
    }

    #[test]
    fn relative_error_conventions() {
        assert_eq!(absolute_relative_error(0.0, 0.0), 0.0);
        assert!(absolute_relative_error(1.0, 0.0).is_infinite());
        assert!((absolute_relative_error(0.9, 1.0) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn s2_grid_is_centred() {
        let g = s2_grid(0.2);
        assert_eq!(g.len(), 7);
        assert!((g[3] - 0.2).abs() < 1e-15);
        assert!((g[6] / g[0] - 1000.0).abs() < 1e-9);
    }
}
