//! Markdown run report and acceptance checks.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::allocation::{cv_table, AllocationProblem};
use crate::area::Variable;
use crate::error::{Error, Result};
use crate::mc::MCResult;

use super::tables::{T1, T2, T3, T4, T5, T6, T7, T8};
use super::{
    load_allocations, load_posterior, load_reduction, RunConfig, RunManifest, ALLOCATION_PROBLEM, CONFIG_COPY,
    MC_RESULT, REPORT,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub markdown: String,
    pub checks: Vec<Check>,
}

impl RunReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

const TOL: f64 = 1e-9;

fn check(name: &str, outcome: Result<(bool, String)>) -> Check {
    let (pass, detail) = match outcome {
        Ok(r) => r,
        Err(e) => (false, format!("not available: {e}")),
    };
    Check { name: name.to_string(), pass, detail }
}

fn compute_checks(dir: &Path, config: &RunConfig) -> Vec<Check> {
    let mut checks = vec![
        check(
            "bethel_feasible",
            load_allocations(dir).map(|a| {
                let bad: Vec<String> = a
                    .bethel
                    .cells
                    .iter()
                    .filter(|c| c.cv_rounded > c.target * (1.0 + TOL))
                    .map(|c| format!("{}@{}", c.variable, c.area))
                    .collect();
                (bad.is_empty(), format!("{} cells over target: {}", bad.len(), bad.join(" ")))
            }),
        ),
        check(
            "nso_max_deficient",
            load_allocations(dir).and_then(|a| {
                let problem = AllocationProblem::load(&dir.join(ALLOCATION_PROBLEM))?;
                let nso = a.nso_max.ok_or_else(|| Error::Invalid("NSO-max allocation not requested".into()))?;
                let table = cv_table(&nso, &problem.inputs)?;
                let mut over = 0;
                for (d, row) in table.iter().enumerate() {
                    for (k, cv) in row.iter().enumerate() {
                        if *cv > a.targets.get(d, k) * (1.0 + TOL) {
                            over += 1;
                        }
                    }
                }
                Ok((over > 0, format!("{over} cells over target under the NSO-max design")))
            }),
        ),
        check(
            "reduction_alpha",
            load_reduction(dir).map(|r| {
                let a = r.result.alpha_star;
                (a + TOL >= config.checks.min_alpha, format!("alpha* = {a:.2}, minimum {:.2}", config.checks.min_alpha))
            }),
        ),
        check(
            "minimax_recheck",
            load_reduction(dir).map(|r| {
                let failing: Vec<String> =
                    r.result.recheck.iter().filter(|g| !g.eligible).map(|g| g.variable.to_string()).collect();
                (r.result.recheck_pass, format!("failing at the combined size: {}", failing.join(" ")))
            }),
        ),
        check(
            "hb_cv_targets",
            load_allocations(dir).and_then(|a| {
                let mut over = Vec::new();
                for var in Variable::ALL {
                    let post = load_posterior(dir, var)?;
                    for (d, s) in post.areas.iter().enumerate() {
                        if s.cv > a.targets.get(d, var.index()) * (1.0 + TOL) {
                            over.push(format!("{var}@{}", s.area));
                        }
                    }
                }
                Ok((over.is_empty(), format!("{} cells over target: {}", over.len(), over.join(" "))))
            }),
        ),
    ];
    if config.mc.enabled {
        let mc = MCResult::load(&dir.join(MC_RESULT));
        let limits = config.checks;
        let per_var = |name: &str, f: &dyn Fn(&crate::mc::VariableSummary) -> (bool, String)| {
            check(
                name,
                mc.as_ref().map_err(|e| Error::Invalid(e.to_string())).map(|r| {
                    let parts: Vec<(bool, String)> = r.variables.iter().map(f).collect();
                    let detail = parts.iter().map(|p| p.1.clone()).collect::<Vec<_>>().join("; ");
                    (parts.iter().all(|p| p.0), detail)
                }),
            )
        };
        checks.push(per_var("mc_cv_pass_rate", &|v| {
            (v.cv_pass_rate + TOL >= limits.min_cv_pass_rate, format!("{} {:.2}", v.variable, v.cv_pass_rate))
        }));
        checks.push(per_var("mc_national_bias", &|v| {
            (v.national_bias_mean.abs() <= limits.max_abs_bias, format!("{} {:+.4}", v.variable, v.national_bias_mean))
        }));
        checks.push(per_var("mc_failure_rate", &|v| {
            (v.failure_rate <= limits.max_failure_rate + TOL, format!("{} {:.2}", v.variable, v.failure_rate))
        }));
    }
    checks
}

fn read_csv(path: &Path) -> Option<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).ok()?;
    let header = r.headers().ok()?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|x| x.iter().map(String::from).collect()))
        .collect::<std::result::Result<Vec<Vec<String>>, _>>()
        .ok()?;
    Some((header, rows))
}

fn over(cell: &str, target: &str) -> bool {
    matches!((cell.parse::<f64>(), target.parse::<f64>()), (Ok(c), Ok(t)) if c > t * (1.0 + TOL))
}

/// Bolds CV cells over their target in the single-variable table.
fn mark_t2(row: &mut [String]) {
    let (nat, dom) = (row[5].clone(), row[6].clone());
    for (i, target) in [(1, &nat), (2, &dom), (3, &nat), (4, &dom)] {
        if over(&row[i], target) {
            row[i] = format!("**{}**", row[i]);
        }
    }
}

fn markdown_table(out: &mut String, header: &[String], rows: &[Vec<String>]) {
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
    for r in rows {
        let _ = writeln!(out, "| {} |", r.join(" | "));
    }
}

const SECTIONS: [(&str, &str); 8] = [
    (T1, "Sample sizes by design"),
    (T2, "Single-variable designs against all targets"),
    (T3, "Bethel design CVs"),
    (T4, "HB CVs at the reduced size"),
    (T5, "Single-sample accuracy at the reduced size"),
    (T6, "Monte Carlo accuracy"),
    (T7, "Monte Carlo interval coverage"),
    (T8, "Monte Carlo CV pass rate"),
];

/// Assembles `report.md` from the artifacts of a run directory.
pub fn report(dir: &Path) -> Result<RunReport> {
    let manifest = RunManifest::load(dir)?;
    let config_path = dir.join(CONFIG_COPY);
    if !config_path.exists() {
        return Err(Error::MissingArtifact(config_path));
    }
    let config = RunConfig::load(&config_path)?;
    let checks = compute_checks(dir, &config);

    let mut md = String::new();
    let _ = writeln!(md, "# Survey design run\n");
    let _ = writeln!(md, "- tool version: {}", manifest.tool_version);
    let _ = writeln!(md, "- config sha256: {}", manifest.config_hash);
    let _ = writeln!(md, "- seed: {}, population seed: {}", manifest.seed, manifest.population_seed);
    if let Ok(r) = load_reduction(dir) {
        let _ = writeln!(md, "- alpha*: {:.2}, n*: {}, n_HB: {}", r.result.alpha_star, r.result.n_star, r.result.n_hb);
        for v in &r.result.variables {
            if let Some(w) = &v.warning {
                let _ = writeln!(md, "- warning ({}): {w}", v.variable);
            }
        }
    }
    for (i, (file, title)) in SECTIONS.iter().enumerate() {
        let _ = writeln!(md, "\n## Table {}: {title}\n", i + 1);
        match read_csv(&dir.join(file)) {
            Some((header, mut rows)) => {
                if *file == T2 {
                    rows.iter_mut().for_each(|r| mark_t2(r));
                }
                markdown_table(&mut md, &header, &rows);
            }
            None => {
                let _ = writeln!(md, "_not produced_");
            }
        }
    }
    let _ = writeln!(md, "\n## Checks\n");
    for c in &checks {
        let _ = writeln!(md, "- {} **{}**: {}", c.name, if c.pass { "PASS" } else { "FAIL" }, c.detail);
    }
    let path = dir.join(REPORT);
    fs::write(&path, &md).map_err(|e| Error::io(&path, e))?;
    Ok(RunReport { markdown: md, checks })
}
