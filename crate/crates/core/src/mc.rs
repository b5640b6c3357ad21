//! Monte Carlo harness: repeated master draws under a fixed allocation,
//! nested reduction, HB fits and accuracy, coverage and CV-gate summaries.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::PrecisionTargets;
use crate::area::{Area, Variable};
use crate::error::{Error, Result};
use crate::hb::{fit_variable, hb_cv, Prior, SamplerSettings};
use crate::numeric::mean;
use crate::popgen::{SyntheticPopulation, TruthRegistry};
use crate::reduction::absolute_relative_error;
use crate::rng::Streams;
use crate::sampling::{draw_stratified, nested_subsample, Allocation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCConfig {
    pub replications: usize,
    pub allocation: Allocation,
    /// Reduction fraction applied to every master draw.
    pub alpha: f64,
    pub variables: Vec<Variable>,
    /// Indexed by `Variable::index()`.
    pub priors: [Prior; 3],
    pub settings: SamplerSettings,
    pub apply_deff: bool,
    /// Fits above this R̂ count as convergence failures.
    pub rhat_limit: f64,
    pub seed: u64,
    /// Worker threads; 0 uses the global pool.
    pub threads: usize,
}

impl MCConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::config("mc.replications", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::config("mc.alpha", "must lie in [0, 1)"));
        }
        if self.variables.is_empty() {
            return Err(Error::config("mc.variables", "at least one variable is required"));
        }
        if !(self.rhat_limit > 0.0) {
            return Err(Error::config("mc.rhat_limit", "must be positive"));
        }
        Ok(())
    }
}

/// Outcome for one variable in one replication. Area vectors are indexed
/// national first, then domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableRecord {
    pub variable: Variable,
    pub covered: Vec<bool>,
    pub are: Vec<f64>,
    /// Signed relative error.
    pub relative_error: Vec<f64>,
    pub cv: Vec<f64>,
    /// Every publication area meets its CV target.
    pub cv_pass: bool,
    pub rhat_max: f64,
    /// Fit succeeded and R̂ is within the limit.
    pub usable: bool,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub n: usize,
    pub variables: Vec<VariableRecord>,
}

/// Fixed inputs shared by every replication.
#[derive(Debug, Clone, Copy)]
pub struct MCContext<'a> {
    pub pop: &'a SyntheticPopulation,
    pub truth: &'a TruthRegistry,
    pub targets: &'a PrecisionTargets,
}

fn failed_record(variable: Variable, areas: usize, reason: String) -> VariableRecord {
    VariableRecord {
        variable,
        covered: vec![false; areas],
        are: vec![f64::NAN; areas],
        relative_error: vec![f64::NAN; areas],
        cv: vec![f64::NAN; areas],
        cv_pass: false,
        rhat_max: f64::NAN,
        usable: false,
        failure: Some(reason),
    }
}

/// One replication: fresh master draw, nested sub-sample, one fit per
/// variable. Streams derive from `(seed, b)` only.
pub fn run_replication(b: usize, config: &MCConfig, ctx: MCContext) -> Result<ReplicationRecord> {
    let streams = Streams::new(config.seed).derive(&format!("mc/replication/{b}"));
    let master = draw_stratified(ctx.pop, &config.allocation, &streams, "master")?;
    let sub = nested_subsample(&master, 1.0 - config.alpha)?.sample;
    let areas = Area::publication_areas(ctx.pop.n_domains());
    let variables = config
        .variables
        .iter()
        .map(|&var| {
            let prior = config.priors[var.index()];
            let seed = streams.derive(&format!("fit/{var}")).seed();
            let summary = match fit_variable(var, &sub, ctx.pop, prior, config.settings, config.apply_deff, seed) {
                Ok((_, s)) => s,
                Err(e) => return failed_record(var, areas.len(), e.to_string()),
            };
            let k = var.index();
            let mut rec = VariableRecord {
                variable: var,
                covered: Vec::with_capacity(areas.len()),
                are: Vec::with_capacity(areas.len()),
                relative_error: Vec::with_capacity(areas.len()),
                cv: Vec::with_capacity(areas.len()),
                cv_pass: true,
                rhat_max: summary.rhat_max,
                usable: summary.rhat_max <= config.rhat_limit,
                failure: None,
            };
            for (d, &area) in areas.iter().enumerate() {
                let s = summary.area(area).expect("publication area summarised");
                let t = ctx.truth.mean(area, var);
                let cv = hb_cv(&summary, area).unwrap_or(f64::INFINITY);
                rec.covered.push(s.covers(t));
                rec.are.push(absolute_relative_error(s.mean, t));
                rec.relative_error.push((s.mean - t) / t);
                rec.cv.push(cv);
                rec.cv_pass &= cv <= ctx.targets.get(d, k);
            }
            if !rec.usable {
                rec.failure = Some(format!("R̂ {:.4} above {}", rec.rhat_max, config.rhat_limit));
            }
            rec
        })
        .collect();
    Ok(ReplicationRecord { replication: b, n: sub.total(), variables })
}

/// All replications in `b` order, on a pool of `config.threads` workers.
pub fn run_mc(config: &MCConfig, ctx: MCContext) -> Result<Vec<ReplicationRecord>> {
    config.validate()?;
    let job = || {
        (0..config.replications).into_par_iter().map(|b| run_replication(b, config, ctx)).collect::<Result<Vec<_>>>()
    };
    if config.threads == 0 {
        job()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| Error::config("mc.threads", e.to_string()))?
            .install(job)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSummary {
    pub variable: Variable,
    pub replications: usize,
    pub usable: usize,
    pub failure_rate: f64,
    /// Per publication area, national first.
    pub coverage_by_area: Vec<f64>,
    /// Mean coverage indicator over replications and areas.
    pub coverage_mean: f64,
    /// SD of the pooled coverage indicators.
    pub coverage_sd: f64,
    /// SD across replications of the per-replication coverage share.
    pub coverage_share_sd: f64,
    pub national_bias_mean: f64,
    /// Mean ARE over replications and domains, national excluded.
    pub mare_mean: f64,
    pub max_are_mean: f64,
    pub cv_pass_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCResult {
    pub replications: usize,
    pub variables: Vec<VariableSummary>,
}

impl MCResult {
    pub fn variable(&self, var: Variable) -> Option<&VariableSummary> {
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
}

fn sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    crate::numeric::sample_variance(xs).sqrt()
}

/// Folds records in replication order into per-variable summaries.
/// Unusable fits are left out of every aggregate and counted in the
/// failure rate.
pub fn aggregate(records: &[ReplicationRecord]) -> Result<MCResult> {
    let Some(first) = records.first() else {
        return Err(Error::Invalid("no replication records".into()));
    };
    let mut variables = Vec::new();
    for (j, template) in first.variables.iter().enumerate() {
        let var = template.variable;
        let rows: Vec<&VariableRecord> = records
            .iter()
            .map(|r| r.variables.get(j).filter(|v| v.variable == var))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::Invalid("records disagree on their variables".into()))?;
        let usable: Vec<&VariableRecord> = rows.iter().copied().filter(|v| v.usable).collect();
        if usable.is_empty() {
            return Err(Error::Fit(format!("{var}: no usable replication")));
        }
        let areas = usable[0].covered.len();
        let u = usable.len() as f64;
        let coverage_by_area: Vec<f64> =
            (0..areas).map(|d| usable.iter().filter(|v| v.covered[d]).count() as f64 / u).collect();
        let indicators: Vec<f64> =
            usable.iter().flat_map(|v| v.covered.iter().map(|&c| if c { 1.0 } else { 0.0 })).collect();
        let coverage_mean = mean(&indicators);
        let shares: Vec<f64> =
            usable.iter().map(|v| v.covered.iter().filter(|&&c| c).count() as f64 / areas as f64).collect();
        let domain_are: Vec<f64> = usable.iter().flat_map(|v| v.are[1..].iter().copied()).collect();
        let max_are: Vec<f64> = usable.iter().map(|v| v.are[1..].iter().copied().fold(0.0, f64::max)).collect();
        let bias: Vec<f64> = usable.iter().map(|v| v.relative_error[0]).collect();
        variables.push(VariableSummary {
            variable: var,
            replications: rows.len(),
            usable: usable.len(),
            failure_rate: (rows.len() - usable.len()) as f64 / rows.len() as f64,
            coverage_by_area,
            coverage_mean,
            coverage_sd: (coverage_mean * (1.0 - coverage_mean)).sqrt(),
            coverage_share_sd: sd(&shares),
            national_bias_mean: mean(&bias),
            mare_mean: if domain_are.is_empty() { 0.0 } else { mean(&domain_are) },
            max_are_mean: mean(&max_are),
            cv_pass_rate: usable.iter().filter(|v| v.cv_pass).count() as f64 / u,
        });
    }
    Ok(MCResult { replications: records.len(), variables })
}

pub const RAW_CSV_HEADER: [&str; 11] = [
    "replication",
    "variable",
    "area",
    "covered",
    "are",
    "relative_error",
    "cv",
    "cv_pass",
    "rhat_max",
    "usable",
    "failure",
];

/// One row per (replication, variable, area). Floats are written in
/// shortest round-trip form so aggregates recompute exactly.
pub fn write_raw_csv(records: &[ReplicationRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RAW_CSV_HEADER)?;
    for r in records {
        for v in &r.variables {
            for (d, area) in Area::publication_areas(v.covered.len() - 1).into_iter().enumerate() {
                w.write_record([
                    r.replication.to_string(),
                    v.variable.to_string(),
                    area.to_string(),
                    v.covered[d].to_string(),
                    v.are[d].to_string(),
                    v.relative_error[d].to_string(),
                    v.cv[d].to_string(),
                    v.cv_pass.to_string(),
                    v.rhat_max.to_string(),
                    v.usable.to_string(),
                    v.failure.clone().unwrap_or_default(),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn parse<T: std::str::FromStr>(field: &str, what: &str) -> Result<T> {
    field.parse().map_err(|_| Error::Invalid(format!("bad {what} value {field:?}")))
}

/// Rebuilds replication records from a raw CSV; the sub-sample size is not
/// stored and reads back as zero.
pub fn read_raw_csv(path: &Path) -> Result<Vec<ReplicationRecord>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(path)?;
    let mut records: Vec<ReplicationRecord> = Vec::new();
    for row in reader.records() {
        let row = row?;
        let b: usize = parse(&row[0], "replication")?;
        let var = Variable::parse(&row[1]).ok_or_else(|| Error::Invalid(format!("unknown variable {:?}", &row[1])))?;
        if records.last().is_none_or(|r| r.replication != b) {
            records.push(ReplicationRecord { replication: b, n: 0, variables: vec![] });
        }
        let rep = records.last_mut().expect("pushed");
        if rep.variables.last().is_none_or(|v| v.variable != var) {
            rep.variables.push(VariableRecord {
                variable: var,
                covered: vec![],
                are: vec![],
                relative_error: vec![],
                cv: vec![],
                cv_pass: parse(&row[7], "cv_pass")?,
                rhat_max: parse(&row[8], "rhat_max")?,
                usable: parse(&row[9], "usable")?,
                failure: Some(row[10].to_string()).filter(|s| !s.is_empty()),
            });
        }
        let v = rep.variables.last_mut().expect("pushed");
        v.covered.push(parse(&row[3], "covered")?);
        v.are.push(parse(&row[4], "are")?);
        v.relative_error.push(parse(&row[5], "relative_error")?);
        v.cv.push(parse(&row[6], "cv")?);
    }
    Ok(records)
}

pub const SUMMARY_CSV_HEADER: [&str; 12] = [
    "Variable",
    "Replications",
    "Usable",
    "Failure Rate",
    "Coverage",
    "MC SD",
    "Share SD",
    "National Relative Bias",
    "Domain MARE",
    "Domain Max ARE",
    "CV Gate Pass Rate",
    "Per-Area Coverage",
];

pub fn write_summary_csv(result: &MCResult, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_CSV_HEADER)?;
    for v in &result.variables {
        let per_area: Vec<String> = v.coverage_by_area.iter().map(|c| format!("{c:.3}")).collect();
        w.write_record([
            v.variable.label().to_string(),
            v.replications.to_string(),
            v.usable.to_string(),
            format!("{:.4}", v.failure_rate),
            format!("{:.4}", v.coverage_mean),
            format!("{:.4}", v.coverage_sd),
            format!("{:.4}", v.coverage_share_sd),
            format!("{:+.4}", v.national_bias_mean),
            format!("{:.4}", v.mare_mean),
            format!("{:.4}", v.max_are_mean),
            format!("{:.4}", v.cv_pass_rate),
            per_area.join(" "),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
