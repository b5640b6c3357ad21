//! CSV result tables written by the allocation, reduction and Monte Carlo
//! stages.

use std::path::Path;

use crate::allocation::{cv_table, PrecisionTargets, VarianceInputs};
use crate::area::{Area, Variable};
use crate::error::{Error, Result};
use crate::estimators::{write_cv_table, CvRow};
use crate::hb::PosteriorSummary;
use crate::mc::MCResult;
use crate::popgen::TruthRegistry;
use crate::reduction::absolute_relative_error;

use super::AllocationArtifacts;

pub const T1: &str = "t1_sample_sizes.csv";
pub const T2: &str = "t2_single_variable_cv.csv";
pub const T3: &str = "t3_bethel_cv.csv";
pub const T4: &str = "t4_hb_cv.csv";
pub const T5: &str = "t5_single_sample_accuracy.csv";
pub const T6: &str = "t6_mc_accuracy.csv";
pub const T7: &str = "t7_mc_coverage.csv";
pub const T8: &str = "t8_cv_pass.csv";

pub const TABLE_FILES: [&str; 8] = [T1, T2, T3, T4, T5, T6, T7, T8];

pub const T1_HEADER: [&str; 5] = ["Variable", "Neyman", "NSO Max", "Bethel", "HB Combined"];
pub const T2_HEADER: [&str; 7] = [
    "Variable",
    "Neyman National CV",
    "Neyman Worst-Domain CV",
    "NSO-Max National CV",
    "NSO-Max Worst-Domain CV",
    "National Target",
    "Domain Target",
];
pub const T5_HEADER: [&str; 6] =
    ["Variable", "Nat. Rel. Bias", "Domain MARE", "Domain Max ARE", "Coverage Cases", "Empirical Coverage"];
pub const T6_HEADER: [&str; 5] =
    ["Variable", "MC Mean Nat. Rel. Bias", "MC Mean Domain MARE", "MC Mean Domain Max ARE", "Usable Replications"];
pub const T7_HEADER: [&str; 3] = ["Variable", "MC Mean Coverage", "MC SD"];
pub const T8_HEADER: [&str; 2] = ["Variable", "CV Gate Pass Rate"];

fn write_rows<const W: usize>(path: &Path, header: [&str; W], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn f4(x: f64) -> String {
    format!("{x:.4}")
}

/// National CV and the domain CV with the largest CV-to-target ratio,
/// reported with that domain's target.
fn cv_row(var: Variable, cvs: &[f64], targets: &PrecisionTargets) -> CvRow {
    let k = var.index();
    let worst = (1..cvs.len())
        .max_by(|&a, &b| (cvs[a] / targets.get(a, k)).total_cmp(&(cvs[b] / targets.get(b, k))))
        .unwrap_or(0);
    CvRow {
        variable: var,
        national_cv: cvs[0],
        national_target: targets.get(0, k),
        worst_domain_cv: if worst == 0 { 0.0 } else { cvs[worst] },
        domain_target: targets.get(worst.max(1).min(targets.domain.len()), k),
    }
}

fn allocation_cvs(table: &[Vec<f64>], k: usize) -> Vec<f64> {
    table.iter().map(|row| row[k]).collect()
}

/// Tables of sample sizes, single-variable CVs and Bethel CVs. `n_hb` fills
/// the last column of the sample-size table once reduction has run.
pub fn write_allocation_tables(
    dir: &Path,
    alloc: &AllocationArtifacts,
    inputs: &VarianceInputs,
    n_hb: Option<usize>,
) -> Result<()> {
    let nso = alloc.nso_max.as_ref().map(|a| a.total().to_string()).unwrap_or_default();
    let bethel = alloc.bethel.allocation.total().to_string();
    let hb = n_hb.map(|n| n.to_string()).unwrap_or_default();
    let t1: Vec<Vec<String>> = Variable::ALL
        .iter()
        .map(|v| {
            let ney = alloc.neyman.get(v.index()).map(|a| a.total().to_string()).unwrap_or_default();
            vec![v.label().to_string(), ney, nso.clone(), bethel.clone(), hb.clone()]
        })
        .collect();
    write_rows(&dir.join(T1), T1_HEADER, &t1)?;

    let mut t2 = Vec::new();
    if let Some(nso_alloc) = &alloc.nso_max {
        let nso_table = cv_table(nso_alloc, inputs)?;
        for (k, ney) in alloc.neyman.iter().enumerate() {
            let var = Variable::from_index(k).ok_or_else(|| Error::Invalid(format!("variable index {k}")))?;
            let ney_row = cv_row(var, &allocation_cvs(&cv_table(ney, inputs)?, k), &alloc.targets);
            let nso_row = cv_row(var, &allocation_cvs(&nso_table, k), &alloc.targets);
            t2.push(vec![
                var.label().to_string(),
                f4(ney_row.national_cv),
                f4(ney_row.worst_domain_cv),
                f4(nso_row.national_cv),
                f4(nso_row.worst_domain_cv),
                format!("{:.2}", nso_row.national_target),
                format!("{:.2}", nso_row.domain_target),
            ]);
        }
    }
    write_rows(&dir.join(T2), T2_HEADER, &t2)?;

    let bethel_table = cv_table(&alloc.bethel.allocation, inputs)?;
    let t3: Vec<CvRow> =
        Variable::ALL.iter().map(|&v| cv_row(v, &allocation_cvs(&bethel_table, v.index()), &alloc.targets)).collect();
    write_cv_table(&t3, &dir.join(T3))
}

/// CV and single-sample accuracy tables of the fits at the reduced size.
/// `posteriors` is indexed by `Variable::index()`.
pub fn write_hb_tables(
    dir: &Path,
    posteriors: &[PosteriorSummary],
    truth: &TruthRegistry,
    targets: &PrecisionTargets,
) -> Result<()> {
    let mut t4 = Vec::new();
    let mut t5 = Vec::new();
    for (k, post) in posteriors.iter().enumerate() {
        let var = Variable::from_index(k).ok_or_else(|| Error::Invalid(format!("variable index {k}")))?;
        let cvs: Vec<f64> = post.areas.iter().map(|a| a.cv).collect();
        t4.push(cv_row(var, &cvs, targets));

        let areas = Area::publication_areas(post.areas.len() - 1);
        let national = truth.mean(Area::National, var);
        let bias = (post.areas[0].mean - national) / national;
        let ares: Vec<f64> = areas[1..]
            .iter()
            .map(|&a| absolute_relative_error(post.area(a).map_or(f64::NAN, |s| s.mean), truth.mean(a, var)))
            .collect();
        let mare = ares.iter().sum::<f64>() / ares.len().max(1) as f64;
        let max_are = ares.iter().cloned().fold(0.0, f64::max);
        let covered = areas.iter().filter(|&&a| post.area(a).is_some_and(|s| s.covers(truth.mean(a, var)))).count();
        t5.push(vec![
            var.label().to_string(),
            f4(bias),
            f4(mare),
            f4(max_are),
            format!("{covered}/{}", areas.len()),
            f4(covered as f64 / areas.len() as f64),
        ]);
    }
    write_cv_table(&t4, &dir.join(T4))?;
    write_rows(&dir.join(T5), T5_HEADER, &t5)
}

pub fn write_mc_tables(dir: &Path, result: &MCResult) -> Result<()> {
    let mut t6 = Vec::new();
    let mut t7 = Vec::new();
    let mut t8 = Vec::new();
    for v in &result.variables {
        let label = v.variable.label().to_string();
        t6.push(vec![
            label.clone(),
            f4(v.national_bias_mean),
            f4(v.mare_mean),
            f4(v.max_are_mean),
            format!("{}/{}", v.usable, v.replications),
        ]);
        t7.push(vec![label.clone(), f4(v.coverage_mean), f4(v.coverage_sd)]);
        t8.push(vec![label, f4(v.cv_pass_rate)]);
    }
    write_rows(&dir.join(T6), T6_HEADER, &t6)?;
    write_rows(&dir.join(T7), T7_HEADER, &t7)?;
    write_rows(&dir.join(T8), T8_HEADER, &t8)
}
