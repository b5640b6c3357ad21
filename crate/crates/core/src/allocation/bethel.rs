//! Minimum-cost allocation under one CV bound per (area, variable) cell.
//!
//! With `x_h = 1/n_h` every bound is linear, `Σ_h a_{hc} x_h ≤ b_c`, and the
//! cost `Σ c_h / x_h` is convex, so a KKT point is the optimum. The solver
//! iterates normalised multipliers `λ`: the direction `w_h = √(Σ λ_c a_{hc} / c_h)`
//! is scaled by the smallest `t` that makes every bound hold, and each `λ_c`
//! is then reweighted by its constraint ratio. Constraints are divided by
//! their right-hand sides, so the multipliers refer to unit bounds.

use serde::{Deserialize, Serialize};

use super::{ceil_tolerant, cv_of, PrecisionTargets, VarianceInputs};
use crate::error::{Error, Result};
use crate::sampling::{Allocation, Provenance};

const POLISH_EVERY: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BethelOptions {
    pub max_iterations: usize,
    pub residual_tol: f64,
    pub multiplier_tol: f64,
    pub damping: f64,
    pub exponent: f64,
    /// Relative slack below which a bound counts as active.
    pub active_tol: f64,
}

impl Default for BethelOptions {
    fn default() -> Self {
        Self {
            max_iterations: 10_000,
            residual_tol: 1e-9,
            multiplier_tol: 1e-10,
            damping: 0.5,
            exponent: 2.0,
            active_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    /// Publication index, 0 = national.
    pub area: usize,
    pub variable: String,
    pub target: f64,
    pub cv_continuous: f64,
    pub cv_rounded: f64,
    /// `1 − V/V_max` at the continuous solution.
    pub slack: f64,
    pub active: bool,
    pub multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BethelSolution {
    pub continuous: Vec<f64>,
    pub allocation: Allocation,
    pub iterations: usize,
    pub residual: f64,
    pub multiplier_change: f64,
    pub cells: Vec<CellReport>,
}

impl BethelSolution {
    pub fn continuous_cost(&self, inputs: &VarianceInputs) -> f64 {
        self.continuous.iter().zip(&inputs.strata).map(|(n, s)| n * s.cost).sum()
    }
}

struct Constraint {
    area: usize,
    k: usize,
    /// Sparse `(h, a_{hc})` with `a > 0`.
    terms: Vec<(usize, f64)>,
    bound: f64,
}

struct Problem {
    lo: Vec<f64>,
    hi: Vec<f64>,
    cost: Vec<f64>,
    constraints: Vec<Constraint>,
}

impl Problem {
    fn build(inputs: &VarianceInputs, targets: &PrecisionTargets) -> Result<Self> {
        inputs.validate()?;
        targets.validate()?;
        if targets.national.len() != inputs.n_variables() || targets.domain.len() != inputs.domains {
            return Err(Error::Invalid("targets do not match the problem shape".into()));
        }
        let h_count = inputs.n_strata();
        let lo: Vec<f64> = inputs.strata.iter().map(|s| s.n_min.min(s.size)).collect();
        let hi: Vec<f64> = inputs.strata.iter().map(|s| s.size).collect();
        let cost = inputs.strata.iter().map(|s| s.cost).collect();
        let mut constraints = Vec::new();
        for d in 0..=inputs.domains {
            for k in 0..inputs.n_variables() {
                let terms: Vec<(usize, f64)> =
                    (0..h_count).map(|h| (h, inputs.coefficient(h, d, k))).filter(|&(_, a)| a > 0.0).collect();
                let gy = targets.get(d, k) * inputs.totals[d][k];
                // The finite-population part is constant in n and moves to the bound.
                let bound = gy * gy + terms.iter().map(|&(h, a)| a / hi[h]).sum::<f64>();
                // Unit right-hand sides keep the multipliers free of each
                // variable's measurement scale.
                let terms = terms.into_iter().map(|(h, a)| (h, a / bound)).collect();
                constraints.push(Constraint { area: d, k, terms, bound: 1.0 });
            }
        }
        let problem = Self { lo, hi, cost, constraints };
        for c in &problem.constraints {
            if problem.value(c, &problem.hi) > c.bound * (1.0 + 1e-12) {
                return Err(Error::Allocation(format!(
                    "cell (d={}, {}) cannot be met even by a census",
                    c.area, inputs.variables[c.k]
                )));
            }
        }
        Ok(problem)
    }

    fn value(&self, c: &Constraint, n: &[f64]) -> f64 {
        c.terms.iter().map(|&(h, a)| a / n[h]).sum()
    }

    fn ratios(&self, n: &[f64]) -> Vec<f64> {
        self.constraints.iter().map(|c| self.value(c, n) / c.bound).collect()
    }

    fn direction(&self, lambda: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.lo.len()];
        for (c, &l) in self.constraints.iter().zip(lambda) {
            if l > 0.0 {
                for &(h, a) in &c.terms {
                    acc[h] += l * a;
                }
            }
        }
        acc.iter().zip(&self.cost).map(|(s, c)| (s / c).sqrt()).collect()
    }

    fn at(&self, w: &[f64], t: f64) -> Vec<f64> {
        w.iter().enumerate().map(|(h, &wh)| (t * wh).clamp(self.lo[h], self.hi[h])).collect()
    }

    fn max_ratio(&self, n: &[f64]) -> f64 {
        self.ratios(n).into_iter().fold(0.0, f64::max)
    }

    /// Smallest `t` with every bound satisfied at `clip(t·w)`. Between
    /// consecutive clip breakpoints `V_c(t) = A_c/t + B_c`, so the crossing
    /// is solved exactly.
    fn scale(&self, w: &[f64]) -> (f64, Vec<f64>) {
        let mut breaks: Vec<f64> = Vec::with_capacity(2 * w.len());
        for (h, &wh) in w.iter().enumerate() {
            if wh > 0.0 {
                breaks.push(self.lo[h] / wh);
                breaks.push(self.hi[h] / wh);
            }
        }
        breaks.sort_by(f64::total_cmp);
        breaks.dedup();
        let Some(&first) = breaks.first() else {
            return (0.0, self.lo.clone());
        };
        if self.max_ratio(&self.at(w, first)) <= 1.0 {
            return (first, self.at(w, first));
        }
        // First breakpoint that is feasible; the last one puts every
        // positive-weight stratum at N_h.
        let (mut lo_i, mut hi_i) = (0usize, breaks.len() - 1);
        if self.max_ratio(&self.at(w, breaks[hi_i])) > 1.0 {
            return (breaks[hi_i], self.at(w, breaks[hi_i]));
        }
        while hi_i - lo_i > 1 {
            let mid = (lo_i + hi_i) / 2;
            if self.max_ratio(&self.at(w, breaks[mid])) <= 1.0 {
                hi_i = mid;
            } else {
                lo_i = mid;
            }
        }
        let (t0, t1) = (breaks[lo_i], breaks[hi_i]);
        let mid = 0.5 * (t0 + t1);
        let mut t = t0;
        for c in &self.constraints {
            let (mut a_free, mut b_fixed) = (0.0, 0.0);
            for &(h, a) in &c.terms {
                let x = mid * w[h];
                if w[h] > 0.0 && x > self.lo[h] && x < self.hi[h] {
                    a_free += a / w[h];
                } else {
                    b_fixed += a / (mid * w[h]).clamp(self.lo[h], self.hi[h]);
                }
            }
            let room = c.bound - b_fixed;
            if a_free > 0.0 && room > 0.0 {
                t = t.max(a_free / room);
            }
        }
        let t = t.min(t1);
        let n = self.at(w, t);
        if self.max_ratio(&n) <= 1.0 + 1e-12 {
            (t, n)
        } else {
            (t1, self.at(w, t1))
        }
    }

    /// `n_h = clip(√(Σ μ_c a_{hc} / c_h))` with the clip flags.
    fn from_multipliers(&self, mu: &[f64], set: &[usize]) -> (Vec<f64>, Vec<bool>) {
        let mut acc = vec![0.0; self.lo.len()];
        for (&c, &m) in set.iter().zip(mu) {
            for &(h, a) in &self.constraints[c].terms {
                acc[h] += m * a;
            }
        }
        let mut free = vec![false; acc.len()];
        let n = acc
            .iter()
            .enumerate()
            .map(|(h, &s)| {
                let x = (s.max(0.0) / self.cost[h]).sqrt();
                free[h] = x > self.lo[h] && x < self.hi[h];
                x.clamp(self.lo[h], self.hi[h])
            })
            .collect();
        (n, free)
    }

    /// Newton's method on the KKT system restricted to a guessed active set,
    /// with the set corrected for negative multipliers and violated bounds.
    /// Returns unnormalised multipliers for every constraint and the
    /// allocation, or `None` when no KKT point is certified.
    fn polish(&self, lambda: &[f64], t: f64, n: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        let ratios = self.ratios(n);
        let mut set: Vec<usize> =
            (0..self.constraints.len()).filter(|&c| lambda[c] > 0.0 && ratios[c] > 1.0 - 1e-3).collect();
        let mut mu: Vec<f64> = set.iter().map(|&c| t * t * lambda[c]).collect();
        for _ in 0..2 * self.constraints.len() + 2 {
            if set.is_empty() {
                return None;
            }
            mu = self.newton(&set, mu)?;
            let (alloc, _) = self.from_multipliers(&mu, &set);
            let ratios = self.ratios(&alloc);
            let most_negative = (0..set.len()).min_by(|&a, &b| mu[a].total_cmp(&mu[b]))?;
            if mu[most_negative] < -1e-14 {
                set.remove(most_negative);
                mu.remove(most_negative);
                continue;
            }
            let violated = (0..self.constraints.len())
                .filter(|c| !set.contains(c))
                .max_by(|&a, &b| ratios[a].total_cmp(&ratios[b]));
            if let Some(c) = violated.filter(|&c| ratios[c] > 1.0 + 1e-12) {
                set.push(c);
                mu.push(0.0);
                continue;
            }
            let mut full = vec![0.0; self.constraints.len()];
            for (&c, &m) in set.iter().zip(&mu) {
                full[c] = m.max(0.0);
            }
            return Some((full, alloc));
        }
        None
    }

    fn newton(&self, set: &[usize], mut mu: Vec<f64>) -> Option<Vec<f64>> {
        let residual = |mu: &[f64]| -> Vec<f64> {
            let (n, _) = self.from_multipliers(mu, set);
            set.iter().map(|&c| self.value(&self.constraints[c], &n) - 1.0).collect()
        };
        let norm = |f: &[f64]| f.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let mut f = residual(&mu);
        for _ in 0..100 {
            if norm(&f) < 1e-13 {
                return Some(mu);
            }
            let (n, free) = self.from_multipliers(&mu, set);
            let k = set.len();
            let mut jac = nalgebra::DMatrix::<f64>::zeros(k, k);
            for (i, &c) in set.iter().enumerate() {
                for &(h, a) in &self.constraints[c].terms {
                    if !free[h] {
                        continue;
                    }
                    // d(a/n_h)/dμ_e = −a/n_h² · a_e/(2 c_h n_h)
                    let scale = -a / (2.0 * self.cost[h] * n[h].powi(3));
                    for (j, &e) in set.iter().enumerate() {
                        if let Some(&(_, ae)) = self.constraints[e].terms.iter().find(|x| x.0 == h) {
                            jac[(i, j)] += scale * ae;
                        }
                    }
                }
            }
            let rhs = nalgebra::DVector::from_iterator(k, f.iter().map(|x| -x));
            let step = jac.svd(true, true).solve(&rhs, 1e-14).ok()?;
            let mut alpha = 1.0;
            loop {
                let trial: Vec<f64> = mu.iter().zip(step.iter()).map(|(m, d)| m + alpha * d).collect();
                let ft = residual(&trial);
                if norm(&ft) < norm(&f) || alpha < 1e-6 {
                    mu = trial;
                    f = ft;
                    break;
                }
                alpha *= 0.5;
            }
        }
        (norm(&f) < 1e-11).then_some(mu)
    }
}

/// Solves the continuous relaxation, then rounds up and removes surplus
/// units greedily while every bound still holds.
pub fn bethel_solve(
    inputs: &VarianceInputs,
    targets: &PrecisionTargets,
    options: BethelOptions,
) -> Result<BethelSolution> {
    let problem = Problem::build(inputs, targets)?;
    let m = problem.constraints.len();
    let live: Vec<bool> = problem.constraints.iter().map(|c| !c.terms.is_empty()).collect();
    let n_live = live.iter().filter(|&&x| x).count();
    let mut lambda: Vec<f64> = live.iter().map(|&l| if l && n_live > 0 { 1.0 / n_live as f64 } else { 0.0 }).collect();

    let mut n = problem.scale(&problem.direction(&lambda)).1;
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    let mut change = f64::INFINITY;
    while iterations < options.max_iterations {
        iterations += 1;
        let ratios = problem.ratios(&n);
        let mut next: Vec<f64> = (0..m)
            .map(|c| {
                if !live[c] {
                    0.0
                } else if lambda[c] == 0.0 && ratios[c] >= 1.0 - 1e-12 {
                    // Re-enter a binding bound that had been dropped.
                    1e-6
                } else {
                    lambda[c] * ratios[c].powf(options.exponent)
                }
            })
            .collect();
        normalise(&mut next);
        for c in 0..m {
            next[c] = options.damping * lambda[c] + (1.0 - options.damping) * next[c];
            if next[c] < 1e-15 {
                next[c] = 0.0;
            }
        }
        normalise(&mut next);
        change = lambda.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        lambda = next;
        let t;
        (t, n) = problem.scale(&problem.direction(&lambda));
        let ratios = problem.ratios(&n);
        residual = (0..m)
            .map(|c| {
                let violation = (ratios[c] - 1.0).max(0.0);
                let slackness = if lambda[c] > 1e-8 { (1.0 - ratios[c]).abs() } else { 0.0 };
                violation.max(slackness)
            })
            .fold(0.0, f64::max);
        if residual < options.residual_tol && change < options.multiplier_tol {
            break;
        }
        // Near-ties between constraints make the plain iteration crawl; jump
        // to the KKT point and let the next update confirm it is fixed.
        if iterations % POLISH_EVERY == 0 {
            if let Some((mut mu, _)) = problem.polish(&lambda, t, &n) {
                normalise(&mut mu);
                lambda = mu;
                n = problem.scale(&problem.direction(&lambda)).1;
            }
        }
    }
    if !(residual < options.residual_tol && change < options.multiplier_tol) {
        return Err(Error::NoConvergence { iterations, residual, multiplier_change: change });
    }

    let rounded = round_allocation(&problem, &n);
    let sizes: Vec<f64> = rounded.clone();
    let final_ratios = problem.ratios(&n);
    let mut cells = Vec::with_capacity(m);
    for (c, con) in problem.constraints.iter().enumerate() {
        cells.push(CellReport {
            area: con.area,
            variable: inputs.variables[con.k].clone(),
            target: targets.get(con.area, con.k),
            cv_continuous: cv_of(&n, inputs, con.area, con.k)?,
            cv_rounded: cv_of(&sizes, inputs, con.area, con.k)?,
            slack: 1.0 - final_ratios[c],
            active: 1.0 - final_ratios[c] < options.active_tol,
            multiplier: lambda[c],
        });
    }
    Ok(BethelSolution {
        continuous: n,
        allocation: Allocation::new(rounded.iter().map(|&x| x as usize).collect(), Provenance::Bethel),
        iterations,
        residual,
        multiplier_change: change,
        cells,
    })
}

fn normalise(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    }
}

fn round_allocation(problem: &Problem, continuous: &[f64]) -> Vec<f64> {
    let mut n: Vec<f64> = continuous
        .iter()
        .enumerate()
        .map(|(h, &x)| ceil_tolerant(x).clamp(problem.lo[h].ceil(), problem.hi[h]))
        .collect();
    let mut values: Vec<f64> = problem.constraints.iter().map(|c| problem.value(c, &n)).collect();
    let feasible = |values: &[f64]| problem.constraints.iter().zip(values).all(|(c, v)| *v <= c.bound);
    // The tolerant ceiling can land a hair under the continuous optimum.
    while !feasible(&values) {
        let worst = (0..values.len())
            .max_by(|&a, &b| {
                (values[a] / problem.constraints[a].bound).total_cmp(&(values[b] / problem.constraints[b].bound))
            })
            .expect("at least one constraint");
        let Some(&(h, _)) = problem.constraints[worst]
            .terms
            .iter()
            .filter(|&&(h, _)| n[h] < problem.hi[h])
            .max_by(|x, y| (x.1 / (n[x.0] * n[x.0])).total_cmp(&(y.1 / (n[y.0] * n[y.0]))))
        else {
            break;
        };
        apply_step(problem, &mut n, &mut values, h, 1.0);
    }
    // Greedy removal, most expensive strata first.
    loop {
        let mut best: Option<(usize, f64, f64)> = None;
        for h in 0..n.len() {
            if n[h] - 1.0 < problem.lo[h].ceil() {
                continue;
            }
            let mut worst = 0.0f64;
            let mut ok = true;
            for (c, con) in problem.constraints.iter().enumerate() {
                if let Some(&(_, a)) = con.terms.iter().find(|t| t.0 == h) {
                    let v = values[c] + a * (1.0 / (n[h] - 1.0) - 1.0 / n[h]);
                    if v > con.bound {
                        ok = false;
                        break;
                    }
                    worst = worst.max(v / con.bound);
                }
            }
            if !ok {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, cost, w)) => problem.cost[h] > cost || (problem.cost[h] == cost && worst < w),
            };
            if better {
                best = Some((h, problem.cost[h], worst));
            }
        }
        match best {
            Some((h, _, _)) => apply_step(problem, &mut n, &mut values, h, -1.0),
            None => break,
        }
    }
    n
}

fn apply_step(problem: &Problem, n: &mut [f64], values: &mut [f64], h: usize, step: f64) {
    let old = n[h];
    n[h] += step;
    for (c, con) in problem.constraints.iter().enumerate() {
        if let Some(&(_, a)) = con.terms.iter().find(|t| t.0 == h) {
            values[c] += a * (1.0 / n[h] - 1.0 / old);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{neyman_continuous, StratumInputs};
    use super::*;

    fn single(sizes: &[f64], s: &[f64], y: f64) -> VarianceInputs {
        VarianceInputs {
            variables: vec!["y".into()],
            domains: 1,
            strata: sizes.iter().map(|&n| StratumInputs { size: n, domain: 0, cost: 1.0, n_min: 1.0 }).collect(),
            s2: s.iter().map(|x| vec![x * x]).collect(),
            deff: vec![vec![1.0]; sizes.len()],
            totals: vec![vec![y], vec![y]],
        }
    }

    #[test]
    fn single_constraint_matches_neyman() {
        let inputs = single(&[1000.0, 2000.0, 500.0], &[2.0, 1.0, 4.0], 10_000.0);
        let targets = PrecisionTargets { national: vec![0.02], domain: vec![vec![0.5]] };
        let sol = bethel_solve(&inputs, &targets, BethelOptions::default()).unwrap();
        let ney = neyman_continuous(&inputs, 0, 0.02).unwrap();
        for (a, b) in sol.continuous.iter().zip(&ney) {
            assert!((a - b).abs() < 1e-6 * b, "{a} vs {b}");
        }
        assert!(sol.cells[0].active);
    }
}
