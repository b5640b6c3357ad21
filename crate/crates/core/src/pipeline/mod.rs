//! Config-driven end-to-end run: `synth → baseline → allocate → reduce →
//! mc → report`. Every stage reads its inputs from artifacts written by
//! earlier stages in the output directory, so any stage can be rerun alone.

mod report;
mod tables;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::allocation::{
    bethel_solve, build_variance_inputs, neyman_allocation, nso_max_allocation, AllocationProblem, BethelOptions,
    BethelSolution, InputOptions, InputWarning, PrecisionTargets,
};
use crate::area::Variable;
use crate::error::{Error, Result};
use crate::estimators::direct_estimates;
use crate::hb::{PosteriorSummary, Prior, SamplerSettings};
use crate::mc::{self, MCConfig, MCContext};
use crate::popgen::{
    export_population, import_population, synthesize, PopulationConfig, SyntheticPopulation, TruthRegistry,
};
use crate::reduction::{
    alpha_grid, between_stratum_variance, prior_grid_search, run_reduction, validate_grid, GateThresholds,
    PriorGridResult, ReductionContext, ReductionResult, TruthProxy, DEFAULT_NU_GRID,
};
use crate::rng::Streams;
use crate::sampling::{baseline_allocation, draw_stratified, summarize_baseline, Allocation, BaselineSummary, Sample};

pub use report::{report, Check, RunReport};
pub use tables::TABLE_FILES;

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_COPY: &str = "config.toml";
pub const POPULATION_CSV: &str = "population.csv";
pub const POPULATION_JSON: &str = "population.json";
pub const BASELINE_SAMPLE: &str = "baseline_sample.json";
pub const BASELINE_SUMMARY: &str = "baseline_summary.json";
pub const ALLOCATION_PROBLEM: &str = "allocation_problem.json";
pub const ALLOCATIONS: &str = "allocations.json";
pub const MASTER_SAMPLE: &str = "master_sample.json";
pub const REDUCTION: &str = "reduction.json";
pub const GATE_REPORTS: &str = "gate_reports.csv";
pub const MC_RESULT: &str = "mc.json";
pub const MC_RAW: &str = "mc_raw.csv";
pub const MC_SUMMARY: &str = "mc_summary.csv";
pub const REPORT: &str = "report.md";

pub fn posterior_file(var: Variable) -> String {
    format!("posterior_{var}.json")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetConfig {
    pub national: f64,
    pub domain: f64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self { national: 0.03, domain: 0.08 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Neyman,
    NsoMax,
    Bethel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocationConfig {
    pub methods: Vec<Method>,
    pub inputs: InputOptions,
    pub bethel: BethelOptions,
}

impl Default for AllocationConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Neyman, Method::NsoMax, Method::Bethel],
            inputs: InputOptions::default(),
            bethel: BethelOptions::default(),
        }
    }
}

/// Reference for the accuracy gates and prior calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyKind {
    /// Simulation truth.
    #[default]
    Truth,
    /// Direct estimates from the baseline sample, standing in for the
    /// previous survey cycle.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReductionConfig {
    pub alpha_grid: Vec<f64>,
    pub thresholds: GateThresholds,
    pub proxy: ProxyKind,
    pub calibrate_priors: bool,
    pub nu_grid: Vec<f64>,
    /// `ν` of the prior used before calibration.
    pub default_nu: f64,
    /// Number of log-spaced `s²` candidates around the baseline centre.
    pub s2_points: usize,
    /// Spacing of the `s²` candidates in decades.
    pub s2_step: f64,
}

impl Default for ReductionConfig {
    fn default() -> Self {
        Self {
            alpha_grid: alpha_grid(0.05).expect("valid step"),
            thresholds: GateThresholds::default(),
            proxy: ProxyKind::Truth,
            calibrate_priors: true,
            nu_grid: DEFAULT_NU_GRID.to_vec(),
            default_nu: 5.0,
            s2_points: 7,
            s2_step: 0.5,
        }
    }
}

impl ReductionConfig {
    /// `centre·10^{step·(i − (points−1)/2)}`.
    pub fn s2_values(&self, centre: f64) -> Vec<f64> {
        let mid = (self.s2_points as f64 - 1.0) / 2.0;
        (0..self.s2_points).map(|i| centre * 10f64.powf(self.s2_step * (i as f64 - mid))).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McSettings {
    pub enabled: bool,
    pub replications: usize,
    pub threads: usize,
}

impl Default for McSettings {
    fn default() -> Self {
        Self { enabled: true, replications: 100, threads: 0 }
    }
}

/// Acceptance checks evaluated by the report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckConfig {
    pub min_alpha: f64,
    pub min_cv_pass_rate: f64,
    pub max_abs_bias: f64,
    pub max_failure_rate: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self { min_alpha: 0.5, min_cv_pass_rate: 0.90, max_abs_bias: 0.02, max_failure_rate: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed of every sample draw, fit and replication. The population has
    /// its own seed in `population.seed`.
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// TOML population settings; replaces `population` when given.
    pub population_file: Option<PathBuf>,
    pub population: PopulationConfig,
    pub baseline_fraction: f64,
    /// Inflate direct-estimate variances by the stratum design effects.
    pub apply_deff: bool,
    pub targets: TargetConfig,
    pub allocation: AllocationConfig,
    pub reduction: ReductionConfig,
    pub hb: SamplerSettings,
    pub mc: McSettings,
    pub checks: CheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 20_240_601,
            out: None,
            population_file: None,
            population: PopulationConfig::desk(),
            baseline_fraction: 0.05,
            apply_deff: true,
            targets: TargetConfig::default(),
            allocation: AllocationConfig::default(),
            reduction: ReductionConfig::default(),
            hb: SamplerSettings::default(),
            mc: McSettings::default(),
            checks: CheckConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses TOML and resolves `population_file` relative to `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut config: RunConfig = toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        if let Some(p) = &config.population_file {
            let path = if p.is_absolute() { p.clone() } else { base.join(p) };
            if !path.exists() {
                return Err(Error::config("population_file", format!("{} does not exist", path.display())));
            }
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            config.population = PopulationConfig::from_toml(&text)?;
            config.population_file = Some(path);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::config("config", format!("{} does not exist", path.display())));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        self.population.validate()?;
        if !(self.baseline_fraction > 0.0 && self.baseline_fraction <= 1.0) {
            return Err(Error::config("baseline_fraction", "must lie in (0, 1]"));
        }
        self.targets(self.population.domains).validate()?;
        let methods = &self.allocation.methods;
        if !methods.contains(&Method::Bethel) {
            return Err(Error::config("allocation.methods", "bethel is required by later stages"));
        }
        if methods.contains(&Method::NsoMax) && !methods.contains(&Method::Neyman) {
            return Err(Error::config("allocation.methods", "nso_max needs neyman"));
        }
        validate_grid(&self.reduction.alpha_grid)?;
        self.reduction.thresholds.validate()?;
        let r = &self.reduction;
        if r.nu_grid.is_empty() || r.nu_grid.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::config("reduction.nu_grid", "needs positive values"));
        }
        if !(r.default_nu > 0.0) || r.s2_points == 0 || !(r.s2_step >= 0.0) {
            return Err(Error::config("reduction", "default_nu, s2_points and s2_step must be positive"));
        }
        if self.mc.enabled && self.mc.replications == 0 {
            return Err(Error::config("mc.replications", "must be at least 1"));
        }
        Ok(())
    }

    pub fn targets(&self, domains: usize) -> PrecisionTargets {
        PrecisionTargets::uniform(Variable::ALL.len(), domains, self.targets.national, self.targets.domain)
    }

    /// Resolved configuration as written next to the artifacts.
    pub fn to_toml(&self) -> Result<String> {
        let mut copy = self.clone();
        copy.out = None;
        copy.population_file = None;
        Ok(toml::to_string(&copy)?)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Synth,
    Baseline,
    Allocate,
    Reduce,
    Mc,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] =
        [Stage::Synth, Stage::Baseline, Stage::Allocate, Stage::Reduce, Stage::Mc, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Baseline => "baseline",
            Stage::Allocate => "allocate",
            Stage::Reduce => "reduce",
            Stage::Mc => "mc",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config("stage", format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub seconds: f64,
    pub ok: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub population_seed: u64,
    pub stages: Vec<StageRecord>,
    pub failed_stage: Option<String>,
    pub files: Vec<FileRecord>,
}

impl RunManifest {
    fn new(config: &RunConfig) -> Result<Self> {
        Ok(Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config.hash()?,
            seed: config.seed,
            population_seed: config.population.seed,
            stages: vec![],
            failed_stage: None,
            files: vec![],
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("corrupt manifest {}: {e}", path.display())))
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }

    pub fn file(&self, name: &str) -> Option<&FileRecord> {
        self.files.iter().find(|f| f.path == name)
    }

    /// Hashes every file in the directory except the manifest itself.
    fn refresh_files(&mut self, dir: &Path) -> Result<()> {
        let mut files = Vec::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name == MANIFEST || !entry.path().is_file() {
                continue;
            }
            let bytes = fs::read(entry.path()).map_err(|e| Error::io(&entry.path(), e))?;
            files.push(FileRecord { path: name, sha256: sha256_hex(&bytes) });
        }
        files.sort_by(|a, b| a.path.cmp(&b.path));
        self.files = files;
        Ok(())
    }
}

fn save_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(&path, e))
}

fn load_json<T: for<'de> Deserialize<'de>>(dir: &Path, name: &str) -> Result<T> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Output of the allocation stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationArtifacts {
    pub targets: PrecisionTargets,
    /// One per variable when Neyman was requested.
    pub neyman: Vec<Allocation>,
    pub nso_max: Option<Allocation>,
    pub bethel: BethelSolution,
    pub warnings: Vec<InputWarning>,
}

/// Output of the reduction stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionArtifacts {
    pub proxy: ProxyKind,
    /// Combined `α*` under the pre-calibration priors.
    pub initial_alpha: f64,
    pub initial_priors: [Prior; 3],
    pub prior_grids: Vec<PriorGridResult>,
    /// Priors of the final search, indexed by `Variable::index()`.
    pub priors: [Prior; 3],
    pub result: ReductionResult,
}

fn load_population(dir: &Path) -> Result<(SyntheticPopulation, TruthRegistry)> {
    import_population(&dir.join(POPULATION_CSV), &dir.join(POPULATION_JSON))
}

fn stage_synth(config: &RunConfig, dir: &Path) -> Result<()> {
    let (pop, truth) = synthesize(&config.population)?;
    export_population(&pop, &truth, &dir.join(POPULATION_CSV), &dir.join(POPULATION_JSON))
}

fn stage_baseline(config: &RunConfig, dir: &Path) -> Result<()> {
    let (pop, _) = load_population(dir)?;
    let streams = Streams::new(config.seed);
    let alloc = baseline_allocation(&pop, config.baseline_fraction)?;
    let sample = draw_stratified(&pop, &alloc, &streams, "baseline")?;
    let summary = summarize_baseline(&sample, &pop)?;
    save_json(dir, BASELINE_SAMPLE, &sample)?;
    save_json(dir, BASELINE_SUMMARY, &summary)?;
    direct_estimates(&sample, &pop, config.apply_deff)?.write_csv(&dir.join("baseline_direct.csv"))
}

fn stage_allocate(config: &RunConfig, dir: &Path) -> Result<()> {
    let (pop, _) = load_population(dir)?;
    let summary: BaselineSummary = load_json(dir, BASELINE_SUMMARY)?;
    let (inputs, warnings) = build_variance_inputs(&summary, &pop, config.allocation.inputs)?;
    for w in &warnings {
        log::warn!("stratum {} {}: {}", w.stratum, w.variable, w.message);
    }
    let targets = config.targets(pop.n_domains());
    let methods = &config.allocation.methods;
    let neyman = if methods.contains(&Method::Neyman) {
        (0..inputs.n_variables())
            .map(|k| neyman_allocation(&inputs, k, targets.national[k]))
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![]
    };
    let nso_max = if methods.contains(&Method::NsoMax) { Some(nso_max_allocation(&neyman)?) } else { None };
    let bethel = bethel_solve(&inputs, &targets, config.allocation.bethel)?;
    bethel.allocation.write_csv(&dir.join("bethel_allocation.csv"))?;
    let problem = AllocationProblem { inputs: inputs.clone(), targets: targets.clone() };
    problem.save(&dir.join(ALLOCATION_PROBLEM))?;
    let artifacts = AllocationArtifacts { targets, neyman, nso_max, bethel, warnings };
    save_json(dir, ALLOCATIONS, &artifacts)?;
    tables::write_allocation_tables(dir, &artifacts, &inputs, None)
}

fn stage_reduce(config: &RunConfig, dir: &Path) -> Result<()> {
    let (pop, truth) = load_population(dir)?;
    let baseline: Sample = load_json(dir, BASELINE_SAMPLE)?;
    let alloc: AllocationArtifacts = load_json(dir, ALLOCATIONS)?;
    let problem = AllocationProblem::load(&dir.join(ALLOCATION_PROBLEM))?;
    let streams = Streams::new(config.seed);
    let master = draw_stratified(&pop, &alloc.bethel.allocation, &streams, "master")?;
    save_json(dir, MASTER_SAMPLE, &master)?;

    let proxy = match config.reduction.proxy {
        ProxyKind::Truth => TruthProxy::from_registry(&truth),
        ProxyKind::Direct => TruthProxy::from_direct(&direct_estimates(&baseline, &pop, config.apply_deff)?),
    };
    let r = &config.reduction;
    let mut centres = [0.0; 3];
    for var in Variable::ALL {
        centres[var.index()] = between_stratum_variance(var, &baseline, &pop, config.apply_deff)?;
    }
    let initial_priors = Variable::ALL.map(|v| Prior { nu: r.default_nu, s2: centres[v.index()] });
    let mut ctx = ReductionContext {
        pop: &pop,
        master: &master,
        truth: &proxy,
        targets: &alloc.targets,
        thresholds: r.thresholds,
        settings: config.hb,
        priors: initial_priors,
        apply_deff: config.apply_deff,
        seed: config.seed,
    };
    let first = run_reduction(&Variable::ALL, &r.alpha_grid, &ctx)?;
    let mut prior_grids = Vec::new();
    let result = if r.calibrate_priors {
        for var in Variable::ALL {
            let s2 = r.s2_values(centres[var.index()]);
            let grid = prior_grid_search(var, &r.nu_grid, &s2, first.alpha_star, &ctx)?;
            ctx.priors[var.index()] = grid.prior();
            prior_grids.push(grid);
        }
        run_reduction(&Variable::ALL, &r.alpha_grid, &ctx)?
    } else {
        first.clone()
    };
    result.write_gate_csv(&dir.join(GATE_REPORTS))?;

    let mut posteriors = Vec::new();
    for var in Variable::ALL {
        let (_, summary) = ctx.fit(var, result.alpha_star, ctx.priors[var.index()], "gates")?;
        summary.write_report(&dir.join(posterior_file(var)))?;
        posteriors.push(summary);
    }
    let artifacts = ReductionArtifacts {
        proxy: r.proxy,
        initial_alpha: first.alpha_star,
        initial_priors,
        prior_grids,
        priors: ctx.priors,
        result,
    };
    save_json(dir, REDUCTION, &artifacts)?;
    tables::write_allocation_tables(dir, &alloc, &problem.inputs, Some(artifacts.result.n_hb))?;
    tables::write_hb_tables(dir, &posteriors, &truth, &alloc.targets)
}

fn stage_mc(config: &RunConfig, dir: &Path) -> Result<()> {
    if !config.mc.enabled {
        log::info!("Monte Carlo stage disabled");
        return Ok(());
    }
    let (pop, truth) = load_population(dir)?;
    let alloc: AllocationArtifacts = load_json(dir, ALLOCATIONS)?;
    let reduction: ReductionArtifacts = load_json(dir, REDUCTION)?;
    let mc_config = MCConfig {
        replications: config.mc.replications,
        allocation: alloc.bethel.allocation.clone(),
        alpha: reduction.result.alpha_star,
        variables: Variable::ALL.to_vec(),
        priors: reduction.priors,
        settings: config.hb,
        apply_deff: config.apply_deff,
        rhat_limit: config.reduction.thresholds.rhat,
        seed: config.seed,
        threads: config.mc.threads,
    };
    let ctx = MCContext { pop: &pop, truth: &truth, targets: &alloc.targets };
    let records = mc::run_mc(&mc_config, ctx)?;
    mc::write_raw_csv(&records, &dir.join(MC_RAW))?;
    let result = mc::aggregate(&records)?;
    result.save(&dir.join(MC_RESULT))?;
    mc::write_summary_csv(&result, &dir.join(MC_SUMMARY))?;
    tables::write_mc_tables(dir, &result)
}

fn execute(stage: Stage, config: &RunConfig, dir: &Path) -> Result<()> {
    match stage {
        Stage::Synth => stage_synth(config, dir),
        Stage::Baseline => stage_baseline(config, dir),
        Stage::Allocate => stage_allocate(config, dir),
        Stage::Reduce => stage_reduce(config, dir),
        Stage::Mc => stage_mc(config, dir),
        Stage::Report => report(dir).map(|_| ()),
    }
}

/// Runs one stage and records it in the manifest, including on failure.
pub fn run_stage(config: &RunConfig, dir: &Path, stage: Stage) -> Result<RunManifest> {
    config.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let hash = config.hash()?;
    let mut manifest = match RunManifest::load(dir) {
        Ok(m) if m.config_hash == hash => m,
        _ => RunManifest::new(config)?,
    };
    let config_path = dir.join(CONFIG_COPY);
    fs::write(&config_path, config.to_toml()?).map_err(|e| Error::io(&config_path, e))?;

    log::info!("stage {stage}");
    let start = Instant::now();
    let outcome = execute(stage, config, dir);
    let record = StageRecord {
        stage: stage.name().to_string(),
        seconds: start.elapsed().as_secs_f64(),
        ok: outcome.is_ok(),
        error: outcome.as_ref().err().map(|e| e.to_string()),
    };
    manifest.stages.retain(|s| s.stage != record.stage);
    manifest.stages.push(record);
    manifest.stages.sort_by_key(|s| Stage::from_str(&s.stage).ok());
    manifest.failed_stage = manifest.stages.iter().find(|s| !s.ok).map(|s| s.stage.clone());
    manifest.refresh_files(dir)?;
    manifest.save(dir)?;
    outcome.map(|_| manifest)
}

/// Every stage in order, stopping at the first failure.
pub fn run_pipeline(config: &RunConfig, dir: &Path) -> Result<RunManifest> {
    let mut manifest = None;
    for stage in Stage::ALL {
        manifest = Some(run_stage(config, dir, stage)?);
    }
    Ok(manifest.expect("at least one stage"))
}

/// Loads the fitted posterior report of a variable from a run directory.
pub fn load_posterior(dir: &Path, var: Variable) -> Result<PosteriorSummary> {
    load_json(dir, &posterior_file(var))
}

pub fn load_allocations(dir: &Path) -> Result<AllocationArtifacts> {
    load_json(dir, ALLOCATIONS)
}

pub fn load_reduction(dir: &Path) -> Result<ReductionArtifacts> {
    load_json(dir, REDUCTION)
}
