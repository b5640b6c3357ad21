//! Stratified simple random sampling without replacement, the baseline
//! sample and nested sub-sampling.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::area::Variable;
use crate::error::{Error, Result};
use crate::numeric::{round_half_even, sample_variance};
use crate::popgen::{SyntheticPopulation, N_COVARIATES};
use crate::rng::Streams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Provenance {
    Baseline { fraction: f64 },
    Neyman { variable: String },
    NsoMax,
    Bethel,
    HbReduced { alpha: f64 },
    Custom,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Baseline { fraction } => write!(f, "baseline({fraction})"),
            Provenance::Neyman { variable } => write!(f, "neyman({variable})"),
            Provenance::NsoMax => f.write_str("nso_max"),
            Provenance::Bethel => f.write_str("bethel"),
            Provenance::HbReduced { alpha } => write!(f, "hb_reduced({alpha})"),
            Provenance::Custom => f.write_str("custom"),
        }
    }
}

/// Integer stratum sample sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub sizes: Vec<usize>,
    pub provenance: Provenance,
}

impl Allocation {
    pub fn new(sizes: Vec<usize>, provenance: Provenance) -> Self {
        Self { sizes, provenance }
    }

    pub fn total(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn validate(&self, stratum_sizes: &[usize]) -> Result<()> {
        if self.sizes.len() != stratum_sizes.len() {
            return Err(Error::Allocation(format!(
                "{} strata allocated, population has {}",
                self.sizes.len(),
                stratum_sizes.len()
            )));
        }
        for (h, (&n, &cap)) in self.sizes.iter().zip(stratum_sizes).enumerate() {
            if n > cap {
                return Err(Error::stratum(h, format!("allocation {n} exceeds stratum size {cap}")));
            }
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["stratum", "n_h"])?;
        for (h, n) in self.sizes.iter().enumerate() {
            w.write_record([h.to_string(), n.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Selected units grouped by stratum, each group sorted by unit id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub units: Vec<Vec<usize>>,
    pub allocation: Allocation,
    /// Stream path the selection was drawn from.
    pub lineage: String,
    pub seed: u64,
}

impl Sample {
    pub fn total(&self) -> usize {
        self.units.iter().map(Vec::len).sum()
    }

    /// Per-unit nesting keys, aligned with `units`.
    pub fn nesting_keys(&self) -> Vec<Vec<f64>> {
        let streams = Streams::new(self.seed);
        self.units
            .iter()
            .enumerate()
            .map(|(h, units)| {
                let mut rng = streams.stream(&format!("{}/nesting/{h}", self.lineage));
                units.iter().map(|_| rng.random::<f64>()).collect()
            })
            .collect()
    }

    /// Manifest of unit ids with stratum and nesting key.
    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        w.write_record(["unit_id", "stratum", "key"])?;
        for (h, (units, keys)) in self.units.iter().zip(self.nesting_keys()).enumerate() {
            for (u, k) in units.iter().zip(keys) {
                w.write_record([u.to_string(), h.to_string(), k.to_string()])?;
            }
        }
        w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// `n⁽⁰⁾_h = max{2, ⌊fraction·N_h⌉}` clamped to `N_h`.
pub fn baseline_allocation(pop: &SyntheticPopulation, fraction: f64) -> Result<Allocation> {
    baseline_sizes(&pop.stratum_sizes(), fraction)
        .map(|sizes| Allocation::new(sizes, Provenance::Baseline { fraction }))
}

pub fn baseline_sizes(stratum_sizes: &[usize], fraction: f64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("fraction", "must lie in (0, 1]"));
    }
    stratum_sizes
        .iter()
        .enumerate()
        .map(|(h, &n)| {
            if n < 2 {
                return Err(Error::stratum(h, format!("stratum has {n} unit(s); the baseline needs at least 2")));
            }
            let target = round_half_even(fraction * n as f64) as usize;
            Ok(target.max(2).min(n))
        })
        .collect()
}

/// Draws `n_h` distinct units uniformly from every stratum. Stratum `h`
/// uses the stream `{lineage}/{h}` under `streams`.
pub fn draw_stratified(
    pop: &SyntheticPopulation,
    allocation: &Allocation,
    streams: &Streams,
    lineage: &str,
) -> Result<Sample> {
    allocation.validate(&pop.stratum_sizes())?;
    let units: Vec<Vec<usize>> = pop
        .strata
        .par_iter()
        .zip(allocation.sizes.par_iter())
        .enumerate()
        .map(|(h, (info, &n))| {
            let mut rng = streams.stream(&format!("{lineage}/{h}"));
            let mut picked: Vec<usize> =
                rand::seq::index::sample(&mut rng, info.size, n).into_iter().map(|i| info.offset + i).collect();
            picked.sort_unstable();
            picked
        })
        .collect();
    Ok(Sample { units, allocation: allocation.clone(), lineage: lineage.to_string(), seed: streams.seed() })
}

/// `⌊n_h (1 − n_h/N_h) / δ_h⌉`, floored at 1.
pub fn effective_sample_size(n: usize, stratum_size: usize, deff: f64) -> usize {
    let n_f = n as f64;
    let raw = n_f * (1.0 - n_f / stratum_size as f64) / deff;
    (round_half_even(raw) as usize).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subsample {
    pub sample: Sample,
    /// Strata whose rounded size was zero and were raised to one unit.
    pub floored: Vec<usize>,
}

/// Keeps the `⌊fraction·n_h⌉` master units with the smallest nesting keys in
/// every stratum. The keys depend only on the master, so decreasing
/// fractions give nested samples.
pub fn nested_subsample(master: &Sample, fraction: f64) -> Result<Subsample> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("fraction", "must lie in (0, 1]"));
    }
    let keys = master.nesting_keys();
    let mut floored = Vec::new();
    let mut units = Vec::with_capacity(master.units.len());
    for (h, (group, k)) in master.units.iter().zip(keys).enumerate() {
        let mut m = round_half_even(fraction * group.len() as f64) as usize;
        if m == 0 && !group.is_empty() {
            log::warn!("stratum {h}: sub-sample rounded to zero units, keeping one");
            floored.push(h);
            m = 1;
        }
        let mut order: Vec<usize> = (0..group.len()).collect();
        order.sort_by(|&a, &b| k[a].total_cmp(&k[b]).then(a.cmp(&b)));
        let mut chosen: Vec<usize> = order[..m].iter().map(|&i| group[i]).collect();
        chosen.sort_unstable();
        units.push(chosen);
    }
    let sizes = units.iter().map(Vec::len).collect();
    let sample = Sample {
        units,
        allocation: Allocation::new(sizes, Provenance::HbReduced { alpha: 1.0 - fraction }),
        lineage: master.lineage.clone(),
        seed: master.seed,
    };
    Ok(Subsample { sample, floored })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumSummary {
    pub n: usize,
    pub n_eff: usize,
    /// Indexed by `Variable::index()`.
    pub means: [f64; 3],
    pub sds: [f64; 3],
    pub covariate_means: [f64; N_COVARIATES],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub strata: Vec<StratumSummary>,
}

impl BaselineSummary {
    pub fn mean(&self, h: usize, var: Variable) -> f64 {
        self.strata[h].means[var.index()]
    }

    pub fn sd(&self, h: usize, var: Variable) -> f64 {
        self.strata[h].sds[var.index()]
    }
}

/// Stratum means, SDs (denominator `n − 1`) and effective sizes.
pub fn summarize_baseline(sample: &Sample, pop: &SyntheticPopulation) -> Result<BaselineSummary> {
    let strata = sample
        .units
        .iter()
        .enumerate()
        .map(|(h, units)| {
            if units.len() < 2 {
                return Err(Error::stratum(h, format!("baseline has {} unit(s); need at least 2", units.len())));
            }
            let info = &pop.strata[h];
            let mut means = [0.0; 3];
            let mut sds = [0.0; 3];
            for var in Variable::ALL {
                let xs: Vec<f64> = units.iter().map(|&i| pop.value(var, i)).collect();
                means[var.index()] = xs.iter().sum::<f64>() / xs.len() as f64;
                sds[var.index()] = sample_variance(&xs).sqrt();
            }
            let mut covariate_means = [0.0; N_COVARIATES];
            for &i in units {
                for (c, v) in covariate_means.iter_mut().enumerate() {
                    *v += pop.covariates[i][c];
                }
            }
            covariate_means.iter_mut().for_each(|v| *v /= units.len() as f64);
            Ok(StratumSummary {
                n: units.len(),
                n_eff: effective_sample_size(units.len(), info.size, info.deff),
                means,
                sds,
                covariate_means,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BaselineSummary { strata })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::area::Area;
    use crate::popgen::{synthesize, PopulationConfig};

    fn pop() -> SyntheticPopulation {
        let cfg =
            PopulationConfig { total_size: 5_000, strata: 10, domains: 2, seed: 3, ..PopulationConfig::default() };
        synthesize(&cfg).unwrap().0
    }

    #[test]
    fn baseline_rule() {
        assert_eq!(baseline_sizes(&[10_000], 0.05).unwrap(), vec![500]);
        assert_eq!(baseline_sizes(&[20], 0.05).unwrap(), vec![2]);
        assert_eq!(baseline_sizes(&[2], 0.05).unwrap(), vec![2]);
        assert!(matches!(baseline_sizes(&[10, 1], 0.05), Err(Error::Stratum { stratum: 1, .. })));
        assert!(baseline_sizes(&[10], 0.0).is_err());
    }

    #[test]
    fn effective_sizes() {
        assert_eq!(effective_sample_size(500, 10_000, 1.15), 413);
        assert_eq!(effective_sample_size(100, 1_000_000, 1.0), 100);
        assert_eq!(effective_sample_size(40, 40, 1.1), 1);
    }

    #[test]
    fn census_stratum_reproduces_truth() {
        let pop = pop();
        let (_, truth) = synthesize(&pop.config).unwrap();
        let alloc = Allocation::new(pop.stratum_sizes(), Provenance::Custom);
        let s = draw_stratified(&pop, &alloc, &Streams::new(1), "census").unwrap();
        let summary = summarize_baseline(&s, &pop).unwrap();
        for h in 0..pop.n_strata() {
            for var in Variable::ALL {
                let t = truth.mean(Area::Stratum(h), var);
                assert!((summary.mean(h, var) - t).abs() <= 1e-12 * t.abs().max(1.0));
            }
        }
    }

    #[test]
    fn draws_are_distinct_and_deterministic() {
        let pop = pop();
        let alloc = Allocation::new(vec![7; 10], Provenance::Custom);
        let a = draw_stratified(&pop, &alloc, &Streams::new(5), "m").unwrap();
        let b = draw_stratified(&pop, &alloc, &Streams::new(5), "m").unwrap();
        assert_eq!(a, b);
        for (h, units) in a.units.iter().enumerate() {
            assert_eq!(units.len(), 7);
            assert!(units.windows(2).all(|w| w[0] < w[1]));
            assert!(units.iter().all(|&u| pop.stratum_of(u) == h));
        }
    }

    #[test]
    fn over_allocation_is_rejected() {
        let pop = pop();
        let mut sizes = pop.stratum_sizes();
        sizes[3] += 1;
        let alloc = Allocation::new(sizes, Provenance::Custom);
        assert!(draw_stratified(&pop, &alloc, &Streams::new(1), "x").is_err());
    }

    #[test]
    fn empty_stratum_group_is_allowed() {
        let pop = pop();
        let mut sizes = vec![3; 10];
        sizes[0] = 0;
        let s = draw_stratified(&pop, &Allocation::new(sizes, Provenance::Custom), &Streams::new(1), "x").unwrap();
        assert!(s.units[0].is_empty());
        assert!(summarize_baseline(&s, &pop).is_err());
    }

    #[test]
    fn inclusion_frequency_is_uniform() {
        // One stratum of 1,000 units, n = 50, 10,000 fresh draws.
        let cfg = PopulationConfig { total_size: 1_000, strata: 1, domains: 1, seed: 1, ..PopulationConfig::default() };
        let (pop, _) = synthesize(&cfg).unwrap();
        let alloc = Allocation::new(vec![50], Provenance::Custom);
        let reps = 10_000;
        let mut hits = 0usize;
        for r in 0..reps {
            let s = draw_stratified(&pop, &alloc, &Streams::new(r), "inc").unwrap();
            hits += usize::from(s.units[0].binary_search(&123).is_ok());
        }
        let p = 0.05;
        let se = (p * (1.0 - p) / reps as f64).sqrt();
        let freq = hits as f64 / reps as f64;
        assert!((freq - p).abs() < 3.0 * se, "frequency {freq}");
    }

    #[test]
    fn subsample_identity_exact_size_and_nesting() {
        let pop = pop();
        let alloc = Allocation::new(vec![100.min(pop.strata[0].size); 10], Provenance::Bethel);
        let master = draw_stratified(&pop, &alloc, &Streams::new(2), "master").unwrap();
        let full = nested_subsample(&master, 1.0).unwrap();
        assert_eq!(full.sample.units, master.units);
        let s08 = nested_subsample(&master, 0.8).unwrap().sample;
        let s05 = nested_subsample(&master, 0.5).unwrap().sample;
        let s02 = nested_subsample(&master, 0.2).unwrap().sample;
        for h in 0..10 {
            assert!(s05.units[h].iter().all(|u| s08.units[h].binary_search(u).is_ok()));
            assert!(s08.units[h].iter().all(|u| master.units[h].binary_search(u).is_ok()));
            assert_eq!(s02.units[h].len(), 20);
        }
        assert_eq!(nested_subsample(&master, 0.5).unwrap().sample, s05);
    }

    #[test]
    fn subsample_floors_at_one() {
        let pop = pop();
        let alloc = Allocation::new(vec![2; 10], Provenance::Bethel);
        let master = draw_stratified(&pop, &alloc, &Streams::new(2), "master").unwrap();
        let sub = nested_subsample(&master, 0.1).unwrap();
        assert_eq!(sub.floored.len(), 10);
        assert!(sub.sample.units.iter().all(|u| u.len() == 1));
    }

    #[test]
    fn hand_computed_hours_summary() {
        let xs = [20.0, 30.0, 40.0, 50.0];
        let sd = sample_variance(&xs).sqrt();
        assert!((sd - (500.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((crate::numeric::mean(&xs) - 35.0).abs() < 1e-15);
    }

    #[test]
    fn manifest_lists_every_unit() {
        let pop = pop();
        let alloc = Allocation::new(vec![4; 10], Provenance::Custom);
        let s = draw_stratified(&pop, &alloc, &Streams::new(2), "m").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        s.write_manifest(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 41);
    }
}
