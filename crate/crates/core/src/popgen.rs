//! Synthetic labour-force population with known truth.
//!
//! Strata carry their own design effect, auxiliary covariates and latent
//! employment, unemployment and hours models. Units inherit stratum
//! covariates plus individual noise and draw their three outcomes. Every
//! random quantity comes from a keyed stream so that the result depends only
//! on `(config, seed)`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::area::{Area, Variable};
use crate::error::{Error, Result};
use crate::numeric::{logistic, logit, truncated_normal_inverse};
use crate::rng::{StreamRng, Streams};

/// Hours are stored on a dyadic grid so that totals are exact sums in `f64`
/// regardless of summation order.
pub const HOURS_RESOLUTION: f64 = 1.0 / 65536.0;

/// Number of auxiliary covariates: two per variable.
pub const N_COVARIATES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalParams {
    pub mean: f64,
    pub sd: f64,
}

impl NormalParams {
    pub const fn new(mean: f64, sd: f64) -> Self {
        Self { mean, sd }
    }
}

/// Logit-normal model for a binary outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryParams {
    pub national_mean: f64,
    pub coefficients: [f64; 2],
    pub covariate1: NormalParams,
    pub covariate2: NormalParams,
    pub domain_logit_sd: f64,
    pub stratum_logit_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoursParams {
    pub coefficients: [f64; 2],
    pub covariate1: NormalParams,
    pub covariate2: NormalParams,
    pub within_stratum_sd: f64,
    pub truncation: [f64; 2],
    pub link_offset: f64,
    pub link_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PopulationConfig {
    pub total_size: usize,
    pub strata: usize,
    pub domains: usize,
    pub design_effect: [f64; 2],
    pub employment: BinaryParams,
    pub unemployment: BinaryParams,
    pub hours: HoursParams,
    pub unit_noise_sd: f64,
    /// Overlap resolution ratio, employed : unemployed.
    pub exclusivity_ratio: [f64; 2],
    /// Log-scale SD of the stratum size weights.
    pub stratum_size_sd: f64,
    pub seed: u64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            total_size: 1_000_000,
            strata: 100,
            domains: 10,
            design_effect: [1.1, 1.2],
            employment: BinaryParams {
                national_mean: 0.62,
                coefficients: [0.15, 0.10],
                covariate1: NormalParams::new(3.0, 1.0),
                covariate2: NormalParams::new(4.0, 1.5),
                domain_logit_sd: 0.20,
                stratum_logit_sd: 0.15,
            },
            unemployment: BinaryParams {
                national_mean: 0.04,
                coefficients: [0.15, 0.10],
                covariate1: NormalParams::new(3.0, 1.0),
                covariate2: NormalParams::new(4.0, 1.5),
                domain_logit_sd: 0.10,
                stratum_logit_sd: 0.08,
            },
            hours: HoursParams {
                coefficients: [0.10, 0.08],
                covariate1: NormalParams::new(0.0, 3.0),
                covariate2: NormalParams::new(0.0, 3.0),
                within_stratum_sd: 12.0,
                truncation: [15.0, 60.0],
                link_offset: 15.0,
                link_scale: 45.0,
            },
            unit_noise_sd: 0.2,
            exclusivity_ratio: [62.0, 4.0],
            stratum_size_sd: 0.3,
            seed: 20_240_601,
        }
    }
}

impl PopulationConfig {
    /// The reduced desk-scale population: 100,000 units in 50 strata.
    pub fn desk() -> Self {
        Self { total_size: 100_000, strata: 50, ..Self::default() }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains < 1 {
            return Err(Error::config("domains", "must be at least 1"));
        }
        if self.strata < self.domains {
            return Err(Error::config("strata", "must be at least the number of domains"));
        }
        if self.total_size < self.strata {
            return Err(Error::config("total_size", "must be at least the number of strata"));
        }
        let [lo, hi] = self.design_effect;
        if !(lo >= 1.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::config("design_effect", "need 1 <= low <= high"));
        }
        for (name, p) in [("employment", &self.employment), ("unemployment", &self.unemployment)] {
            if !(p.national_mean > 0.0 && p.national_mean < 1.0) {
                return Err(Error::config(format!("{name}.national_mean"), "must lie in (0, 1)"));
            }
            check_sd(&format!("{name}.domain_logit_sd"), p.domain_logit_sd)?;
            check_sd(&format!("{name}.stratum_logit_sd"), p.stratum_logit_sd)?;
            check_sd(&format!("{name}.covariate1.sd"), p.covariate1.sd)?;
            check_sd(&format!("{name}.covariate2.sd"), p.covariate2.sd)?;
        }
        let h = &self.hours;
        if !(h.truncation[0] < h.truncation[1]) {
            return Err(Error::config("hours.truncation", "lower bound must be below upper bound"));
        }
        check_sd("hours.within_stratum_sd", h.within_stratum_sd)?;
        check_sd("hours.covariate1.sd", h.covariate1.sd)?;
        check_sd("hours.covariate2.sd", h.covariate2.sd)?;
        check_sd("unit_noise_sd", self.unit_noise_sd)?;
        check_sd("stratum_size_sd", self.stratum_size_sd)?;
        let [re, ru] = self.exclusivity_ratio;
        if !(re >= 0.0 && ru >= 0.0 && re + ru > 0.0) {
            return Err(Error::config("exclusivity_ratio", "weights must be non-negative and not both zero"));
        }
        Ok(())
    }

    /// Probability that an overlapping unit is kept as employed.
    pub fn employed_share(&self) -> f64 {
        let [re, ru] = self.exclusivity_ratio;
        re / (re + ru)
    }

    pub fn binary_params(&self, var: Variable) -> Option<&BinaryParams> {
        match var {
            Variable::Employed => Some(&self.employment),
            Variable::Unemployed => Some(&self.unemployment),
            Variable::Hours => None,
        }
    }

    fn covariate_params(&self, var: Variable) -> [NormalParams; 2] {
        match var {
            Variable::Employed => [self.employment.covariate1, self.employment.covariate2],
            Variable::Unemployed => [self.unemployment.covariate1, self.unemployment.covariate2],
            Variable::Hours => [self.hours.covariate1, self.hours.covariate2],
        }
    }
}

fn check_sd(field: &str, sd: f64) -> Result<()> {
    if sd >= 0.0 && sd.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, "standard deviation must be finite and non-negative"))
    }
}

/// Column positions of a variable's two covariates in the covariate arrays.
pub fn covariate_columns(var: Variable) -> [usize; 2] {
    let k = var.index();
    [2 * k, 2 * k + 1]
}

pub fn covariate_name(column: usize) -> String {
    let var = Variable::from_index(column / 2).expect("covariate column");
    format!("x_{}_{}", var.key(), column % 2 + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumInfo {
    pub size: usize,
    /// Zero-based domain index.
    pub domain: usize,
    pub deff: f64,
    /// First unit index; units of a stratum are contiguous.
    pub offset: usize,
    /// Stratum-level covariate draws `X_{j,k,h}`.
    pub covariate_draws: [f64; N_COVARIATES],
    /// Means of the unit-level covariates, the auxiliary data of the area models.
    pub covariate_means: [f64; N_COVARIATES],
    pub prob_employed: f64,
    pub prob_unemployed: f64,
    pub mean_hours: f64,
}

impl StratumInfo {
    pub fn units(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.size
    }
}

/// Unit records stored by column, ordered by stratum.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPopulation {
    pub config: PopulationConfig,
    pub strata: Vec<StratumInfo>,
    pub employed: Vec<u8>,
    pub unemployed: Vec<u8>,
    pub hours: Vec<f64>,
    pub covariates: Vec<[f64; N_COVARIATES]>,
}

impl SyntheticPopulation {
    pub fn len(&self) -> usize {
        self.hours.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hours.is_empty()
    }

    pub fn n_strata(&self) -> usize {
        self.strata.len()
    }

    pub fn n_domains(&self) -> usize {
        self.config.domains
    }

    pub fn value(&self, var: Variable, unit: usize) -> f64 {
        match var {
            Variable::Employed => self.employed[unit] as f64,
            Variable::Unemployed => self.unemployed[unit] as f64,
            Variable::Hours => self.hours[unit],
        }
    }

    pub fn stratum_of(&self, unit: usize) -> usize {
        self.strata.partition_point(|s| s.offset + s.size <= unit)
    }

    pub fn domain_strata(&self, d: usize) -> Vec<usize> {
        (0..self.strata.len()).filter(|&h| self.strata[h].domain == d).collect()
    }

    pub fn domain_map(&self) -> Vec<usize> {
        self.strata.iter().map(|s| s.domain).collect()
    }

    pub fn stratum_sizes(&self) -> Vec<usize> {
        self.strata.iter().map(|s| s.size).collect()
    }

    pub fn area_size(&self, area: Area) -> usize {
        match area {
            Area::National => self.len(),
            Area::Domain(d) => self.strata.iter().filter(|s| s.domain == d).map(|s| s.size).sum(),
            Area::Stratum(h) => self.strata[h].size,
        }
    }

    /// Stratum-level auxiliary rows `z_h = (1, x̄_1, x̄_2)` for a variable.
    pub fn auxiliary_rows(&self, var: Variable) -> Vec<Vec<f64>> {
        let [a, b] = covariate_columns(var);
        self.strata.iter().map(|s| vec![1.0, s.covariate_means[a], s.covariate_means[b]]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaTruth {
    pub mean: f64,
    pub total: f64,
}

/// True means and totals for every area and variable, indexed by
/// `Variable::index()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRegistry {
    pub national: [AreaTruth; 3],
    pub domains: Vec<[AreaTruth; 3]>,
    pub strata: Vec<[AreaTruth; 3]>,
}

impl TruthRegistry {
    pub fn get(&self, area: Area, var: Variable) -> AreaTruth {
        let k = var.index();
        match area {
            Area::National => self.national[k],
            Area::Domain(d) => self.domains[d][k],
            Area::Stratum(h) => self.strata[h][k],
        }
    }

    pub fn mean(&self, area: Area, var: Variable) -> f64 {
        self.get(area, var).mean
    }

    pub fn compute(pop: &SyntheticPopulation) -> Self {
        let strata: Vec<[AreaTruth; 3]> = pop
            .strata
            .iter()
            .map(|s| {
                Variable::ALL.map(|var| {
                    let total: f64 = s.units().map(|i| pop.value(var, i)).sum();
                    AreaTruth { mean: total / s.size as f64, total }
                })
            })
            .collect();
        let domains: Vec<[AreaTruth; 3]> = (0..pop.n_domains())
            .map(|d| {
                let members = pop.domain_strata(d);
                let size: usize = members.iter().map(|&h| pop.strata[h].size).sum();
                Variable::ALL.map(|var| {
                    let total: f64 = members.iter().map(|&h| strata[h][var.index()].total).sum();
                    AreaTruth { mean: total / size as f64, total }
                })
            })
            .collect();
        let national = Variable::ALL.map(|var| {
            let total: f64 = domains.iter().map(|d| d[var.index()].total).sum();
            AreaTruth { mean: total / pop.len() as f64, total }
        });
        Self { national, domains, strata }
    }
}

/// Stratum design effects `δ_h ~ U(low, high)`.
pub fn gen_design_effects(config: &PopulationConfig, rng: &mut StreamRng) -> Vec<f64> {
    let [lo, hi] = config.design_effect;
    (0..config.strata)
        .map(|_| {
            let u: f64 = rng.random();
            lo + (hi - lo) * u
        })
        .collect()
}

/// Stratum sizes from log-normal weights, rounded by largest remainder so
/// that they sum to `N` with every stratum non-empty.
pub fn gen_stratum_sizes(config: &PopulationConfig, rng: &mut StreamRng) -> Vec<usize> {
    let h = config.strata;
    let weights: Vec<f64> = (0..h)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            (config.stratum_size_sd * z).exp()
        })
        .collect();
    let wsum: f64 = weights.iter().sum();
    let spare = (config.total_size - h) as f64;
    let quotas: Vec<f64> = weights.iter().map(|w| spare * w / wsum).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| 1 + q.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..h).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(config.total_size - assigned) {
        sizes[i] += 1;
    }
    sizes
}

/// Consecutive blocks of `⌊H/D⌋` strata per domain; the last domain takes
/// the remainder.
pub fn assign_domains(strata: usize, domains: usize) -> Vec<usize> {
    let block = strata / domains;
    (0..strata).map(|h| (h / block).min(domains - 1)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    pub stratum_draws: Vec<[f64; N_COVARIATES]>,
    /// Unit values, ordered by stratum.
    pub units: Vec<[f64; N_COVARIATES]>,
    pub stratum_means: Vec<[f64; N_COVARIATES]>,
}

/// Stratum covariate draws, one independent stream per variable, plus unit
/// values with independent `N(0, unit_noise_sd²)` noise per covariate.
pub fn gen_covariates(config: &PopulationConfig, streams: &Streams, sizes: &[usize]) -> Covariates {
    let h = sizes.len();
    let mut stratum_draws = vec![[0.0; N_COVARIATES]; h];
    for var in Variable::ALL {
        let mut rng = streams.stream(&format!("popgen/covariates/{}", var.key()));
        let params = config.covariate_params(var);
        let cols = covariate_columns(var);
        for row in stratum_draws.iter_mut() {
            for (j, p) in params.iter().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                row[cols[j]] = p.mean + p.sd * z;
            }
        }
    }
    let per_stratum: Vec<(Vec<[f64; N_COVARIATES]>, [f64; N_COVARIATES])> = (0..h)
        .into_par_iter()
        .map(|s| {
            let mut rng = streams.stream(&format!("popgen/unit_noise/stratum/{s}"));
            let base = stratum_draws[s];
            let mut sums = [0.0; N_COVARIATES];
            let units: Vec<[f64; N_COVARIATES]> = (0..sizes[s])
                .map(|_| {
                    let mut row = base;
                    for (c, v) in row.iter_mut().enumerate() {
                        let z: f64 = rng.sample(StandardNormal);
                        *v += config.unit_noise_sd * z;
                        sums[c] += *v;
                    }
                    row
                })
                .collect();
            let means = sums.map(|t| t / sizes[s] as f64);
            (units, means)
        })
        .collect();
    let mut units = Vec::with_capacity(sizes.iter().sum());
    let mut stratum_means = Vec::with_capacity(h);
    for (u, m) in per_stratum {
        units.extend(u);
        stratum_means.push(m);
    }
    Covariates { stratum_draws, units, stratum_means }
}

/// `logistic(logit(p̄) + b1 (x1 − m1) + b2 (x2 − m2) + γ_d + ε_h)`.
pub fn stratum_binary_prob(params: &BinaryParams, x1: f64, x2: f64, domain_effect: f64, stratum_residual: f64) -> f64 {
    let eta = logit(params.national_mean)
        + params.coefficients[0] * (x1 - params.covariate1.mean)
        + params.coefficients[1] * (x2 - params.covariate2.mean)
        + domain_effect
        + stratum_residual;
    logistic(eta)
}

pub fn stratum_employment_prob(
    config: &PopulationConfig,
    x1: f64,
    x2: f64,
    domain_effect: f64,
    stratum_residual: f64,
) -> f64 {
    stratum_binary_prob(&config.employment, x1, x2, domain_effect, stratum_residual)
}

pub fn stratum_unemployment_prob(
    config: &PopulationConfig,
    x1: f64,
    x2: f64,
    domain_effect: f64,
    stratum_residual: f64,
) -> f64 {
    stratum_binary_prob(&config.unemployment, x1, x2, domain_effect, stratum_residual)
}

/// `μ_h = offset + scale · logistic(b1 x1 + b2 x2)`.
pub fn stratum_mean_hours(params: &HoursParams, x1: f64, x2: f64) -> f64 {
    params.link_offset + params.link_scale * logistic(params.coefficients[0] * x1 + params.coefficients[1] * x2)
}

/// Reclassifies every unit with `E = U = 1`: employed with probability
/// `employed_share`, otherwise unemployed. One uniform is consumed per
/// overlapping unit only. Returns the number of overlaps resolved.
pub fn resolve_overlap(employed: &mut [u8], unemployed: &mut [u8], employed_share: f64, rng: &mut StreamRng) -> usize {
    assert_eq!(employed.len(), unemployed.len());
    let mut count = 0;
    for (e, u) in employed.iter_mut().zip(unemployed.iter_mut()) {
        if *e == 1 && *u == 1 {
            count += 1;
            let draw: f64 = rng.random();
            if draw < employed_share {
                *u = 0;
            } else {
                *e = 0;
            }
        }
    }
    count
}

/// Truncated-normal hours for `n` units around `mean_hours`, by inverse CDF
/// (one uniform per unit), quantised to [`HOURS_RESOLUTION`].
pub fn gen_hours(params: &HoursParams, mean_hours: f64, n: usize, rng: &mut StreamRng) -> Vec<f64> {
    let [lo, hi] = params.truncation;
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let x = truncated_normal_inverse(mean_hours, params.within_stratum_sd, lo, hi, u);
            quantise_hours(x).clamp(lo, hi)
        })
        .collect()
}

pub fn quantise_hours(x: f64) -> f64 {
    (x / HOURS_RESOLUTION).round() * HOURS_RESOLUTION
}

fn bernoulli_draws(p: f64, n: usize, rng: &mut StreamRng) -> Vec<u8> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            u8::from(u < p)
        })
        .collect()
}

fn normal_draws(sd: f64, n: usize, rng: &mut StreamRng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            sd * z
        })
        .collect()
}

/// Builds the full population and its truth registry.
pub fn synthesize(config: &PopulationConfig) -> Result<(SyntheticPopulation, TruthRegistry)> {
    config.validate()?;
    let streams = Streams::new(config.seed);
    let h = config.strata;

    let sizes = gen_stratum_sizes(config, &mut streams.stream("popgen/stratum_sizes"));
    let domain_of = assign_domains(h, config.domains);
    let deffs = gen_design_effects(config, &mut streams.stream("popgen/design_effects"));
    let cov = gen_covariates(config, &streams, &sizes);

    let emp = &config.employment;
    let unemp = &config.unemployment;
    let gamma_e =
        normal_draws(emp.domain_logit_sd, config.domains, &mut streams.stream("popgen/employed/domain_effects"));
    let eps_e = normal_draws(emp.stratum_logit_sd, h, &mut streams.stream("popgen/employed/stratum_effects"));
    let gamma_u =
        normal_draws(unemp.domain_logit_sd, config.domains, &mut streams.stream("popgen/unemployed/domain_effects"));
    let eps_u = normal_draws(unemp.stratum_logit_sd, h, &mut streams.stream("popgen/unemployed/stratum_effects"));

    let [ce1, ce2] = covariate_columns(Variable::Employed);
    let [cu1, cu2] = covariate_columns(Variable::Unemployed);
    let [ch1, ch2] = covariate_columns(Variable::Hours);

    let mut offset = 0;
    let mut strata = Vec::with_capacity(h);
    for s in 0..h {
        let x = cov.stratum_draws[s];
        let d = domain_of[s];
        strata.push(StratumInfo {
            size: sizes[s],
            domain: d,
            deff: deffs[s],
            offset,
            covariate_draws: x,
            covariate_means: cov.stratum_means[s],
            prob_employed: stratum_binary_prob(emp, x[ce1], x[ce2], gamma_e[d], eps_e[s]),
            prob_unemployed: stratum_binary_prob(unemp, x[cu1], x[cu2], gamma_u[d], eps_u[s]),
            mean_hours: stratum_mean_hours(&config.hours, x[ch1], x[ch2]),
        });
        offset += sizes[s];
    }

    let share = config.employed_share();
    let outcomes: Vec<(Vec<u8>, Vec<u8>, Vec<f64>)> = strata
        .par_iter()
        .enumerate()
        .map(|(s, info)| {
            let mut e = bernoulli_draws(
                info.prob_employed,
                info.size,
                &mut streams.stream(&format!("popgen/employed/units/{s}")),
            );
            let mut u = bernoulli_draws(
                info.prob_unemployed,
                info.size,
                &mut streams.stream(&format!("popgen/unemployed/units/{s}")),
            );
            resolve_overlap(&mut e, &mut u, share, &mut streams.stream(&format!("popgen/overlap/{s}")));
            let hrs = gen_hours(
                &config.hours,
                info.mean_hours,
                info.size,
                &mut streams.stream(&format!("popgen/hours/units/{s}")),
            );
            (e, u, hrs)
        })
        .collect();

    let mut employed = Vec::with_capacity(config.total_size);
    let mut unemployed = Vec::with_capacity(config.total_size);
    let mut hours = Vec::with_capacity(config.total_size);
    for (e, u, hrs) in outcomes {
        employed.extend(e);
        unemployed.extend(u);
        hours.extend(hrs);
    }

    let pop =
        SyntheticPopulation { config: config.clone(), strata, employed, unemployed, hours, covariates: cov.units };
    let truth = TruthRegistry::compute(&pop);
    Ok((pop, truth))
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: PopulationConfig,
    strata: Vec<StratumInfo>,
    truth: TruthRegistry,
}

const UNIT_HEADER: [&str; 6] = ["unit_id", "stratum", "domain", "employed", "unemployed", "hours"];

/// Writes the unit CSV and the JSON sidecar (stratum metadata and truth).
/// Floats are written in shortest round-trip form, so import is lossless.
pub fn export_population(
    pop: &SyntheticPopulation,
    truth: &TruthRegistry,
    csv_path: &Path,
    json_path: &Path,
) -> Result<()> {
    let file = fs::File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let mut header: Vec<String> = UNIT_HEADER.iter().map(|s| s.to_string()).collect();
    header.extend((0..N_COVARIATES).map(covariate_name));
    w.write_record(&header)?;
    for s in 0..pop.n_strata() {
        let info = &pop.strata[s];
        for i in info.units() {
            let mut rec = vec![
                i.to_string(),
                s.to_string(),
                (info.domain + 1).to_string(),
                pop.employed[i].to_string(),
                pop.unemployed[i].to_string(),
                pop.hours[i].to_string(),
            ];
            rec.extend(pop.covariates[i].iter().map(|x| x.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io(csv_path, e))?;

    let sidecar = Sidecar { config: pop.config.clone(), strata: pop.strata.clone(), truth: truth.clone() };
    let file = fs::File::create(json_path).map_err(|e| Error::io(json_path, e))?;
    let mut writer = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut writer, &sidecar)?;
    writer.flush().map_err(|e| Error::io(json_path, e))?;
    Ok(())
}

pub fn import_population(csv_path: &Path, json_path: &Path) -> Result<(SyntheticPopulation, TruthRegistry)> {
    for p in [csv_path, json_path] {
        if !p.exists() {
            return Err(Error::MissingArtifact(p.to_path_buf()));
        }
    }
    let text = fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text)?;
    let n: usize = sidecar.strata.iter().map(|s| s.size).sum();
    let mut employed = Vec::with_capacity(n);
    let mut unemployed = Vec::with_capacity(n);
    let mut hours = Vec::with_capacity(n);
    let mut covariates = Vec::with_capacity(n);
    let mut reader = csv::Reader::from_path(csv_path)?;
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| -> Result<&str> {
            rec.get(i).ok_or_else(|| Error::Invalid(format!("row {row}: missing column {i}")))
        };
        let parse = |i: usize| -> Result<f64> {
            field(i)?.parse::<f64>().map_err(|e| Error::Invalid(format!("row {row}, column {i}: {e}")))
        };
        let unit: usize = field(0)?.parse().map_err(|e| Error::Invalid(format!("row {row}: unit id: {e}")))?;
        if unit != row {
            return Err(Error::Invalid(format!("row {row}: units must be in stored order, found id {unit}")));
        }
        employed.push(parse(3)? as u8);
        unemployed.push(parse(4)? as u8);
        hours.push(parse(5)?);
        let mut x = [0.0; N_COVARIATES];
        for (c, v) in x.iter_mut().enumerate() {
            *v = parse(6 + c)?;
        }
        covariates.push(x);
    }
    if hours.len() != n {
        return Err(Error::Invalid(format!("population CSV has {} units, metadata expects {n}", hours.len())));
    }
    let pop =
        SyntheticPopulation { config: sidecar.config, strata: sidecar.strata, employed, unemployed, hours, covariates };
    Ok((pop, sidecar.truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::truncated_normal_mean;

    fn small_config() -> PopulationConfig {
        PopulationConfig { total_size: 20_000, strata: 20, domains: 4, seed: 11, ..PopulationConfig::default() }
    }

    #[test]
    fn degenerate_deff_interval() {
        let cfg = PopulationConfig { design_effect: [1.0, 1.0], ..small_config() };
        let d = gen_design_effects(&cfg, &mut Streams::new(1).stream("x"));
        assert_eq!(d.len(), 20);
        assert!(d.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn deff_draws_in_range_with_expected_mean() {
        let cfg = PopulationConfig { strata: 100, ..small_config() };
        let d = gen_design_effects(&cfg, &mut Streams::new(3).stream("deff"));
        assert!(d.iter().all(|&x| (1.1..=1.2).contains(&x)));
        let se = (0.1 / 12f64.sqrt()) / 10.0;
        let m = d.iter().sum::<f64>() / 100.0;
        assert!((m - 1.15).abs() < 3.0 * se, "mean {m}");
        let again = gen_design_effects(&cfg, &mut Streams::new(3).stream("deff"));
        assert_eq!(d, again);
    }

    #[test]
    fn zero_unit_noise_copies_stratum_values() {
        let cfg = PopulationConfig { unit_noise_sd: 0.0, ..small_config() };
        let sizes = vec![3, 2, 4];
        let cov = gen_covariates(&cfg, &Streams::new(5), &sizes);
        let mut i = 0;
        for (s, &n) in sizes.iter().enumerate() {
            for _ in 0..n {
                assert_eq!(cov.units[i], cov.stratum_draws[s]);
                i += 1;
            }
            for c in 0..N_COVARIATES {
                assert!((cov.stratum_means[s][c] - cov.stratum_draws[s][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn employment_covariate_mean_matches_configuration() {
        let cfg = PopulationConfig { unit_noise_sd: 0.0, ..small_config() };
        let sizes = vec![1; 10_000];
        let cov = gen_covariates(&cfg, &Streams::new(9), &sizes);
        let m = cov.stratum_draws.iter().map(|r| r[0]).sum::<f64>() / 10_000.0;
        assert!((m - 3.0).abs() < 3.0 / 100.0, "mean {m}");
    }

    #[test]
    fn employment_and_unemployment_covariates_are_independent() {
        let cfg = small_config();
        let sizes = vec![1; 1000];
        let cov = gen_covariates(&cfg, &Streams::new(13), &sizes);
        let a: Vec<f64> = cov.stratum_draws.iter().map(|r| r[0]).collect();
        let b: Vec<f64> = cov.stratum_draws.iter().map(|r| r[2]).collect();
        let (ma, mb) = (crate::numeric::mean(&a), crate::numeric::mean(&b));
        let cov_ab: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        let corr = cov_ab / (va * vb).sqrt();
        assert!(corr.abs() < 0.1, "correlation {corr}");
    }

    #[test]
    fn centred_employment_probability_is_intercept() {
        let cfg = PopulationConfig::default();
        let p = stratum_employment_prob(&cfg, 3.0, 4.0, 0.0, 0.0);
        assert!((p - 0.62).abs() < 1e-12);
        let p1 = stratum_employment_prob(&cfg, 3.0 + 1.0 / 0.15, 4.0, 0.0, 0.0);
        assert!((logit(p1) - logit(p) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn centred_unemployment_probability_and_monotonicity() {
        let cfg = PopulationConfig::default();
        let p = stratum_unemployment_prob(&cfg, 3.0, 4.0, 0.0, 0.0);
        assert!((p - 0.04).abs() < 1e-12);
        let mut prev = 0.0;
        for i in 0..10 {
            let q = stratum_unemployment_prob(&cfg, 3.0 + 0.15 * i as f64, 4.0, 0.0, 0.0);
            assert!(q > prev);
            prev = q;
        }
    }

    /// Latent-draw simulation over many strata and domains.
    fn mean_latent_prob(var: Variable) -> f64 {
        let cfg = PopulationConfig::default();
        let params = cfg.binary_params(var).unwrap().clone();
        let streams = Streams::new(99);
        let mut rng = streams.stream("latent");
        let n = 200_000;
        let mut total = 0.0;
        for _ in 0..n {
            let z: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let x1 = params.covariate1.mean + params.covariate1.sd * z[0];
            let x2 = params.covariate2.mean + params.covariate2.sd * z[1];
            total +=
                stratum_binary_prob(&params, x1, x2, params.domain_logit_sd * z[2], params.stratum_logit_sd * z[3]);
        }
        total / n as f64
    }

    #[test]
    fn latent_employment_mean_near_sixty_two_percent() {
        let m = mean_latent_prob(Variable::Employed);
        assert!((m - 0.62).abs() < 0.01, "mean {m}");
    }

    #[test]
    fn latent_unemployment_mean_near_four_percent() {
        let m = mean_latent_prob(Variable::Unemployed);
        assert!((m - 0.04).abs() < 0.005, "mean {m}");
    }

    #[test]
    fn overlap_resolution_no_op_without_overlap() {
        let mut e = vec![1, 0, 1, 0];
        let mut u = vec![0, 1, 0, 0];
        let (e0, u0) = (e.clone(), u.clone());
        let n = resolve_overlap(&mut e, &mut u, 62.0 / 66.0, &mut Streams::new(1).stream("o"));
        assert_eq!(n, 0);
        assert_eq!((e, u), (e0, u0));
    }

    #[test]
    fn overlap_resolution_ratio() {
        let n = 66_000;
        let mut e = vec![1u8; n];
        let mut u = vec![1u8; n];
        resolve_overlap(&mut e, &mut u, 62.0 / 66.0, &mut Streams::new(2).stream("o"));
        assert!(e.iter().zip(&u).all(|(a, b)| !(*a == 1 && *b == 1)));
        let kept: usize = e.iter().map(|&x| x as usize).sum();
        let p: f64 = 62.0 / 66.0;
        let se = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((kept as f64 - 62_000.0).abs() < 3.0 * se, "employed {kept}");
    }

    #[test]
    fn hours_mean_at_zero_covariates() {
        let cfg = PopulationConfig::default();
        assert!((stratum_mean_hours(&cfg.hours, 0.0, 0.0) - 37.5).abs() < 1e-12);
    }

    #[test]
    fn hours_truncated_and_match_analytic_mean() {
        let cfg = PopulationConfig::default();
        let n = 100_000;
        let hrs = gen_hours(&cfg.hours, 37.5, n, &mut Streams::new(4).stream("h"));
        assert!(hrs.iter().all(|&x| (15.0..=60.0).contains(&x)));
        let m = hrs.iter().sum::<f64>() / n as f64;
        let target = truncated_normal_mean(37.5, 12.0, 15.0, 60.0);
        let sd = crate::numeric::truncated_normal_variance(37.5, 12.0, 15.0, 60.0).sqrt();
        assert!((m - target).abs() < 3.0 * sd / (n as f64).sqrt(), "mean {m} vs {target}");
        let low = gen_hours(&cfg.hours, 16.0, 10_000, &mut Streams::new(4).stream("low"));
        assert!(low.iter().all(|&x| (15.0..=60.0).contains(&x)));
    }

    #[test]
    fn stratum_sizes_sum_and_domain_blocks() {
        let cfg = small_config();
        let sizes = gen_stratum_sizes(&cfg, &mut Streams::new(1).stream("s"));
        assert_eq!(sizes.iter().sum::<usize>(), cfg.total_size);
        assert!(sizes.iter().all(|&n| n >= 1));
        assert_eq!(assign_domains(10, 3), vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 2]);
        assert_eq!(assign_domains(100, 10)[99], 9);
        assert_eq!(assign_domains(5, 4), vec![0, 1, 2, 3, 3]);
    }

    #[test]
    fn synthesize_invariants() {
        let (pop, truth) = synthesize(&small_config()).unwrap();
        assert_eq!(pop.len(), 20_000);
        assert_eq!(pop.strata.iter().map(|s| s.size).sum::<usize>(), 20_000);
        assert!(pop.employed.iter().zip(&pop.unemployed).all(|(e, u)| !(*e == 1 && *u == 1)));
        assert!(pop.hours.iter().all(|&x| (15.0..=60.0).contains(&x)));
        for var in Variable::ALL {
            let k = var.index();
            let by_domain: f64 = truth.domains.iter().map(|d| d[k].total).sum();
            let by_stratum: f64 = truth.strata.iter().map(|s| s[k].total).sum();
            assert_eq!(truth.national[k].total, by_domain);
            assert_eq!(truth.national[k].total, by_stratum);
        }
        for (h, s) in pop.strata.iter().enumerate() {
            assert_eq!(pop.stratum_of(s.offset), h);
            assert_eq!(pop.stratum_of(s.offset + s.size - 1), h);
        }
    }

    #[test]
    fn one_unit_per_stratum() {
        let cfg = PopulationConfig { total_size: 12, strata: 12, domains: 3, ..small_config() };
        let (pop, truth) = synthesize(&cfg).unwrap();
        for h in 0..12 {
            assert_eq!(pop.strata[h].size, 1);
            let i = pop.strata[h].offset;
            assert_eq!(truth.mean(Area::Stratum(h), Variable::Hours), pop.hours[i]);
        }
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let bad = PopulationConfig { strata: 2, domains: 3, ..small_config() };
        assert!(matches!(synthesize(&bad), Err(Error::Config { field, .. }) if field == "strata"));
        let mut bad = small_config();
        bad.hours.truncation = [60.0, 15.0];
        assert!(matches!(synthesize(&bad), Err(Error::Config { field, .. }) if field == "hours.truncation"));
        let mut bad = small_config();
        bad.unemployment.national_mean = 1.0;
        assert!(matches!(synthesize(&bad), Err(Error::Config { field, .. }) if field == "unemployment.national_mean"));
    }

    #[test]
    fn toml_config_round_trip() {
        let cfg = PopulationConfig::desk();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(PopulationConfig::from_toml(&text).unwrap(), cfg);
        let partial = PopulationConfig::from_toml("total_size = 5000\nstrata = 10\n").unwrap();
        assert_eq!(partial.domains, 10);
        assert_eq!(partial.employment.national_mean, 0.62);
    }
}
