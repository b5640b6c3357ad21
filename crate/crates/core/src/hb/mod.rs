//! Hierarchical Bayes area-level models fitted by MCMC: the logit-normal
//! binomial model for the binary variables and the Fay–Herriot model for
//! the continuous one, with Gelman–Rubin diagnostics and `N_h`-weighted
//! aggregation of stratum posteriors.

mod binomial;
mod diagnostics;
mod fay_herriot;

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::area::{Area, Variable};
use crate::error::{Error, Result};
use crate::estimators::DirectEstimates;
use crate::numeric::{mean, population_sd, quantile_sorted};
use crate::popgen::SyntheticPopulation;
use crate::sampling::Sample;

pub use binomial::fit_binomial_logit;
pub use diagnostics::{batch_means_se, gelman_rubin};
pub use fay_herriot::fit_fay_herriot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    BinomialLogit,
    GaussianArea,
}

impl Family {
    pub fn for_variable(var: Variable) -> Self {
        if var.is_binary() {
            Family::BinomialLogit
        } else {
            Family::GaussianArea
        }
    }
}

/// `σ²_v ~ Inv-χ²(ν, s²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub nu: f64,
    pub s2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvDefinition {
    /// Posterior SD over posterior mean.
    #[default]
    PosteriorSd,
    /// Half the 95% interval width over posterior mean.
    CiHalfWidth,
}

/// Sampler settings shared by every fit of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSettings {
    pub chains: usize,
    pub burn_in: usize,
    /// Retained draws per chain.
    pub draws: usize,
    pub tau2_beta: f64,
    /// Chain `c` starts `β` this many standard errors from the initial fit.
    pub jitter_se: f64,
    pub target_acceptance: f64,
    pub cv_definition: CvDefinition,
    /// Binomial stratum means are the finite-population means: observed
    /// successes plus a posterior predictive draw for the unsampled units.
    /// Off, they are the model rates `p_h`.
    pub finite_population: bool,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            chains: 3,
            burn_in: 1_000,
            draws: 2_000,
            tau2_beta: 1e6,
            jitter_se: 2.0,
            target_acceptance: 0.44,
            cv_definition: CvDefinition::PosteriorSd,
            finite_population: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HBSpec {
    pub family: Family,
    /// Rows `z_h`; the first column is normally the intercept.
    pub covariates: Vec<Vec<f64>>,
    pub prior: Prior,
    pub settings: SamplerSettings,
    pub seed: u64,
    /// Holds `σ²_v` at this value instead of sampling it.
    pub fixed_sigma2: Option<f64>,
}

impl HBSpec {
    pub fn new(family: Family, covariates: Vec<Vec<f64>>, prior: Prior, settings: SamplerSettings, seed: u64) -> Self {
        Self { family, covariates, prior, settings, seed, fixed_sigma2: None }
    }

    pub fn n_coefficients(&self) -> usize {
        self.covariates.first().map_or(0, Vec::len)
    }

    pub fn validate(&self, data: &AreaData) -> Result<()> {
        let s = &self.settings;
        if !(s.tau2_beta > 0.0) {
            return Err(Error::config("tau2_beta", "must be positive"));
        }
        if !(self.prior.nu > 0.0 && self.prior.s2 > 0.0) {
            return Err(Error::config("prior", "ν and s² must be positive"));
        }
        if s.chains < 2 {
            return Err(Error::config("chains", "at least two chains are needed"));
        }
        if s.draws < 10 {
            return Err(Error::config("draws", "at least ten retained draws are needed"));
        }
        let p = self.n_coefficients();
        if p == 0 || self.covariates.iter().any(|r| r.len() != p) {
            return Err(Error::config("covariates", "rows must be non-empty and equally long"));
        }
        if self.covariates.len() != data.n_strata() {
            return Err(Error::Invalid("covariate rows do not match strata".into()));
        }
        if let Some(v) = self.fixed_sigma2 {
            if !(v > 0.0) {
                return Err(Error::config("fixed_sigma2", "must be positive"));
            }
        }
        data.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum Observations {
    Binomial { successes: Vec<u64>, trials: Vec<u64> },
    Gaussian { theta_hat: Vec<f64>, psi: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaData {
    pub observations: Observations,
    /// `N_h`.
    pub weights: Vec<f64>,
    /// Zero-based domain of each stratum.
    pub domain: Vec<usize>,
    pub n_domains: usize,
}

impl AreaData {
    pub fn n_strata(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.n_strata();
        if h == 0 || self.domain.len() != h {
            return Err(Error::Invalid("area data needs matching weights and domains".into()));
        }
        if self.weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::Invalid("weights must be positive".into()));
        }
        if self.domain.iter().any(|&d| d >= self.n_domains) {
            return Err(Error::Invalid("domain index out of range".into()));
        }
        match &self.observations {
            Observations::Binomial { successes, trials } => {
                if successes.len() != h || trials.len() != h {
                    return Err(Error::Invalid("one count per stratum required".into()));
                }
                for (i, (y, n)) in successes.iter().zip(trials).enumerate() {
                    if y > n {
                        return Err(Error::stratum(i, "more successes than trials"));
                    }
                }
            }
            Observations::Gaussian { theta_hat, psi } => {
                if theta_hat.len() != h || psi.len() != h {
                    return Err(Error::Invalid("one estimate per stratum required".into()));
                }
                for (i, p) in psi.iter().enumerate() {
                    if !(*p > 0.0 && p.is_finite()) || !theta_hat[i].is_finite() {
                        return Err(Error::stratum(i, "ψ_h must be positive and θ̂_h finite"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Binomial counts of a binary variable from a sample.
    pub fn binomial_from_sample(sample: &Sample, pop: &SyntheticPopulation, var: Variable) -> Self {
        let successes =
            sample.units.iter().map(|units| units.iter().map(|&u| pop.value(var, u) as u64).sum()).collect();
        let trials = sample.units.iter().map(|u| u.len() as u64).collect();
        Self::with_design(Observations::Binomial { successes, trials }, pop)
    }

    /// Direct stratum means and sampling variances of variable `var`. A
    /// census stratum has `ψ_h = 0`; it is floored at a negligible positive
    /// value so the model treats `θ_h` as known.
    pub fn gaussian_from_direct(direct: &DirectEstimates, pop: &SyntheticPopulation, var: Variable) -> Self {
        let k = var.index();
        let theta_hat = direct.strata.iter().map(|s| s[k].mean).collect();
        let psi = direct.strata.iter().map(|s| s[k].psi.max(1e-12 * s[k].mean.abs().max(1.0).powi(2))).collect();
        Self::with_design(Observations::Gaussian { theta_hat, psi }, pop)
    }

    fn with_design(observations: Observations, pop: &SyntheticPopulation) -> Self {
        Self {
            observations,
            weights: pop.strata.iter().map(|s| s.size as f64).collect(),
            domain: pop.domain_map(),
            n_domains: pop.n_domains(),
        }
    }
}

/// Retained draws of one chain; rows are draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDraws {
    pub beta: Vec<Vec<f64>>,
    pub sigma2: Vec<f64>,
    pub v: Vec<Vec<f64>>,
    /// `p_h` or `θ_h`.
    pub means: Vec<Vec<f64>>,
    /// Per-stratum acceptance of the `v_h` updates (binomial family).
    pub acceptance_v: Vec<f64>,
    pub acceptance_beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub family: Family,
    pub chains: Vec<ChainDraws>,
}

impl PosteriorDraws {
    pub fn n_draws(&self) -> usize {
        self.chains.iter().map(|c| c.sigma2.len()).sum()
    }

    /// Pooled draws of stratum `h`'s mean.
    pub fn stratum_draws(&self, h: usize) -> Vec<f64> {
        self.chains.iter().flat_map(|c| c.means.iter().map(move |m| m[h])).collect()
    }

    pub fn min_acceptance(&self) -> Option<f64> {
        self.chains.iter().flat_map(|c| c.acceptance_v.iter().chain(&c.acceptance_beta)).copied().reduce(f64::min)
    }

    /// CSV with columns `chain, iteration, parameter, value`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["chain", "iteration", "parameter", "value"])?;
        for (c, chain) in self.chains.iter().enumerate() {
            for (i, s2) in chain.sigma2.iter().enumerate() {
                let mut row =
                    |name: String, value: f64| w.write_record([c.to_string(), i.to_string(), name, value.to_string()]);
                for (j, b) in chain.beta[i].iter().enumerate() {
                    row(format!("beta_{j}"), *b)?;
                }
                row("sigma2_v".into(), *s2)?;
                for (h, v) in chain.v[i].iter().enumerate() {
                    row(format!("v_{h}"), *v)?;
                }
                for (h, m) in chain.means[i].iter().enumerate() {
                    row(format!("mean_{h}"), *m)?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaSummary {
    pub area: Area,
    pub mean: f64,
    pub sd: f64,
    pub cv: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

impl AreaSummary {
    /// Interval contains `truth`, up to rounding in the last digits.
    pub fn covers(&self, truth: f64) -> bool {
        let tol = 1e-12 * truth.abs().max(1.0);
        self.ci_lower - tol <= truth && truth <= self.ci_upper + tol
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhatEntry {
    pub parameter: String,
    pub rhat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub family: Family,
    pub cv_definition: CvDefinition,
    pub strata: Vec<AreaSummary>,
    /// National first, then domains.
    pub areas: Vec<AreaSummary>,
    pub rhat: Vec<RhatEntry>,
    pub rhat_max: f64,
    pub beta_mean: Vec<f64>,
    pub sigma2_mean: f64,
    pub min_acceptance: Option<f64>,
    /// Some Metropolis update accepted under 5% of proposals.
    pub low_acceptance: bool,
}

impl PosteriorSummary {
    pub fn area(&self, area: Area) -> Option<&AreaSummary> {
        match area {
            Area::Stratum(h) => self.strata.get(h),
            other => other.publication_index().and_then(|d| self.areas.get(d)),
        }
    }

    pub fn write_report(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Summary of a draw set; the SD divides by the number of draws.
pub fn summarize_draws(area: Area, draws: &[f64], definition: CvDefinition) -> AreaSummary {
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = mean(draws);
    let sd = population_sd(draws);
    let (lo, hi) = (quantile_sorted(&sorted, 0.025), quantile_sorted(&sorted, 0.975));
    let spread = match definition {
        CvDefinition::PosteriorSd => sd,
        CvDefinition::CiHalfWidth => 0.5 * (hi - lo),
    };
    AreaSummary { area, mean: m, sd, cv: if m > 0.0 { spread / m } else { f64::INFINITY }, ci_lower: lo, ci_upper: hi }
}

/// Per-draw `N_h`-weighted means: row 0 is national, row `d + 1` domain `d`.
pub fn aggregate_domains(means: &[Vec<f64>], weights: &[f64], domain: &[usize], n_domains: usize) -> Vec<Vec<f64>> {
    let mut size = vec![0.0; n_domains + 1];
    for (h, &w) in weights.iter().enumerate() {
        size[0] += w;
        size[domain[h] + 1] += w;
    }
    let mut out = vec![Vec::with_capacity(means.len()); n_domains + 1];
    for draw in means {
        let mut acc = vec![0.0; n_domains + 1];
        for (h, &m) in draw.iter().enumerate() {
            acc[0] += weights[h] * m;
            acc[domain[h] + 1] += weights[h] * m;
        }
        for (d, a) in acc.iter().enumerate() {
            out[d].push(a / size[d]);
        }
    }
    out
}

/// CV of an area aggregate under the summary's definition.
pub fn hb_cv(summary: &PosteriorSummary, area: Area) -> Result<f64> {
    let s = summary.area(area).ok_or_else(|| Error::Invalid(format!("no posterior for {area}")))?;
    if !(s.mean > 0.0) {
        return Err(Error::Fit(format!("posterior mean of {area} is not positive")));
    }
    Ok(s.cv)
}

/// CV of a bare draw set, population-SD convention.
pub fn draws_cv(draws: &[f64]) -> Result<f64> {
    let m = mean(draws);
    if !(m > 0.0) {
        return Err(Error::Fit("posterior mean is not positive".into()));
    }
    Ok(population_sd(draws) / m)
}

pub(crate) fn summarize(draws: &PosteriorDraws, data: &AreaData, definition: CvDefinition) -> PosteriorSummary {
    let h_count = data.n_strata();
    let strata = (0..h_count).map(|h| summarize_draws(Area::Stratum(h), &draws.stratum_draws(h), definition)).collect();

    let per_chain: Vec<Vec<Vec<f64>>> =
        draws.chains.iter().map(|c| aggregate_domains(&c.means, &data.weights, &data.domain, data.n_domains)).collect();
    let areas: Vec<AreaSummary> = Area::publication_areas(data.n_domains)
        .into_iter()
        .enumerate()
        .map(|(d, area)| {
            let pooled: Vec<f64> = per_chain.iter().flat_map(|c| c[d].iter().copied()).collect();
            summarize_draws(area, &pooled, definition)
        })
        .collect();

    let mut rhat = Vec::new();
    let p = draws.chains[0].beta.first().map_or(0, Vec::len);
    for j in 0..p {
        let series: Vec<Vec<f64>> = draws.chains.iter().map(|c| c.beta.iter().map(|b| b[j]).collect()).collect();
        rhat.push(RhatEntry { parameter: format!("beta_{j}"), rhat: gelman_rubin(&refs(&series)) });
    }
    let series: Vec<Vec<f64>> = draws.chains.iter().map(|c| c.sigma2.clone()).collect();
    rhat.push(RhatEntry { parameter: "sigma2_v".into(), rhat: gelman_rubin(&refs(&series)) });
    for (d, area) in Area::publication_areas(data.n_domains).into_iter().enumerate() {
        let series: Vec<&[f64]> = per_chain.iter().map(|c| c[d].as_slice()).collect();
        rhat.push(RhatEntry { parameter: area.to_string(), rhat: gelman_rubin(&series) });
    }
    let rhat_max = rhat.iter().map(|r| r.rhat).fold(f64::NEG_INFINITY, f64::max);

    let pooled_beta: Vec<&Vec<f64>> = draws.chains.iter().flat_map(|c| c.beta.iter()).collect();
    let beta_mean = (0..p).map(|j| pooled_beta.iter().map(|b| b[j]).sum::<f64>() / pooled_beta.len() as f64).collect();
    let sigma2: Vec<f64> = draws.chains.iter().flat_map(|c| c.sigma2.iter().copied()).collect();
    let min_acceptance = draws.min_acceptance();
    PosteriorSummary {
        family: draws.family,
        cv_definition: definition,
        strata,
        areas,
        rhat,
        rhat_max,
        beta_mean,
        sigma2_mean: mean(&sigma2),
        min_acceptance,
        low_acceptance: min_acceptance.is_some_and(|a| a < 0.05),
    }
}

fn refs(series: &[Vec<f64>]) -> Vec<&[f64]> {
    series.iter().map(Vec::as_slice).collect()
}

/// Fits the model of variable `var` to a sample: binomial counts for the
/// binary variables, Fay–Herriot on direct estimates for the continuous one.
/// Covariates are the population stratum means of the variable's auxiliaries.
pub fn fit_variable(
    var: Variable,
    sample: &Sample,
    pop: &SyntheticPopulation,
    prior: Prior,
    settings: SamplerSettings,
    apply_deff: bool,
    seed: u64,
) -> Result<(PosteriorDraws, PosteriorSummary)> {
    let spec = HBSpec::new(Family::for_variable(var), pop.auxiliary_rows(var), prior, settings, seed);
    match spec.family {
        Family::BinomialLogit => fit_binomial_logit(&spec, &AreaData::binomial_from_sample(sample, pop, var)),
        Family::GaussianArea => {
            let direct = crate::estimators::direct_estimates(sample, pop, apply_deff)?;
            fit_fay_herriot(&spec, &AreaData::gaussian_from_direct(&direct, pop, var))
        }
    }
}

/// Weighted least squares `y ≈ Zβ` with weights `w`; returns `β̂` and
/// standard errors scaled by the residual dispersion (at least 1).
pub(crate) fn weighted_least_squares(z: &[Vec<f64>], y: &[f64], w: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (h, p) = (z.len(), z[0].len());
    let zm = DMatrix::from_fn(h, p, |i, j| z[i][j]);
    let wz = DMatrix::from_fn(h, p, |i, j| w[i] * z[i][j]);
    let xtx = zm.transpose() * &wz;
    let xty = wz.transpose() * DVector::from_column_slice(y);
    let chol = xtx.clone().cholesky().ok_or_else(|| Error::Fit("covariate matrix is rank deficient".into()))?;
    let beta = chol.solve(&xty);
    let resid = DVector::from_column_slice(y) - &zm * &beta;
    let dispersion = if h > p { (0..h).map(|i| w[i] * resid[i] * resid[i]).sum::<f64>() / (h - p) as f64 } else { 1.0 };
    let inv = chol.inverse();
    let se = (0..p).map(|j| (inv[(j, j)] * dispersion.max(1.0)).sqrt()).collect();
    Ok((beta.iter().copied().collect(), se))
}

/// Starting offset of chain `c` in units of the initial standard error,
/// spread evenly over `[−jitter, jitter]`.
pub(crate) fn chain_offset(c: usize, chains: usize, jitter: f64) -> f64 {
    if chains < 2 {
        0.0
    } else {
        -jitter + 2.0 * jitter * c as f64 / (chains - 1) as f64
    }
}

/// Draw from `(νs² + ss) / χ²_{ν+m}`.
pub(crate) fn draw_scaled_inv_chi2<R: rand::Rng>(rng: &mut R, nu: f64, s2: f64, ss: f64, m: usize) -> f64 {
    let chi = rand_distr::ChiSquared::new(nu + m as f64).expect("positive degrees of freedom");
    (nu * s2 + ss) / rand_distr::Distribution::sample(&chi, rng)
}
