//! Logit-normal binomial model by Metropolis-within-Gibbs.
//!
//! Covariates other than the intercept are standardised inside the sampler;
//! the prior is carried over exactly through `β = Tβ̃`, so only the mixing
//! changes. Each sweep updates every `v_h` and `β̃_j` by adaptive scalar
//! random-walk Metropolis, shifts each coefficient against the random
//! effects by an exact Gaussian draw along that line, and draws `σ²_v` from
//! its scaled inverse-χ² conditional.

use rand::Rng;
use rand_distr::{Binomial, StandardNormal};
use rayon::prelude::*;

use super::{
    chain_offset, draw_scaled_inv_chi2, summarize, weighted_least_squares, AreaData, ChainDraws, Family, HBSpec,
    Observations, PosteriorDraws, PosteriorSummary,
};
use crate::error::{Error, Result};
use crate::numeric::{log1p_exp, logistic};
use crate::rng::Streams;

const ADAPT_BATCH: usize = 50;

/// Affine standardisation of the non-intercept columns.
struct Design {
    z: Vec<Vec<f64>>,
    centre: Vec<f64>,
    scale: Vec<f64>,
}

impl Design {
    fn new(raw: &[Vec<f64>]) -> Self {
        let (h, p) = (raw.len(), raw[0].len());
        let intercept = raw.iter().all(|r| r[0] == 1.0);
        let mut centre = vec![0.0; p];
        let mut scale = vec![1.0; p];
        if intercept {
            for j in 1..p {
                let m = raw.iter().map(|r| r[j]).sum::<f64>() / h as f64;
                let sd = (raw.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / h as f64).sqrt();
                if sd > 0.0 {
                    centre[j] = m;
                    scale[j] = sd;
                }
            }
        }
        let z = raw.iter().map(|r| (0..p).map(|j| (r[j] - centre[j]) / scale[j]).collect()).collect();
        Self { z, centre, scale }
    }

    fn to_raw(&self, bt: &[f64]) -> Vec<f64> {
        let mut b: Vec<f64> = bt.iter().zip(&self.scale).map(|(x, s)| x / s).collect();
        b[0] = bt[0] - (1..bt.len()).map(|j| self.centre[j] * b[j]).sum::<f64>();
        b
    }

    fn to_std(&self, b: &[f64]) -> Vec<f64> {
        let mut bt: Vec<f64> = b.iter().zip(&self.scale).map(|(x, s)| x * s).collect();
        bt[0] = b[0] + (1..b.len()).map(|j| self.centre[j] * b[j]).sum::<f64>();
        bt
    }
}

fn loglik(y: f64, n: f64, eta: f64) -> f64 {
    y * eta - n * log1p_exp(eta)
}

pub fn fit_binomial_logit(spec: &HBSpec, data: &AreaData) -> Result<(PosteriorDraws, PosteriorSummary)> {
    spec.validate(data)?;
    let Observations::Binomial { successes, trials } = &data.observations else {
        return Err(Error::Invalid("binomial model needs count data".into()));
    };
    let y: Vec<f64> = successes.iter().map(|&v| v as f64).collect();
    let n: Vec<f64> = trials.iter().map(|&v| v as f64).collect();
    let design = Design::new(&spec.covariates);
    let unsampled: Option<Vec<u64>> = if spec.settings.finite_population {
        let mut out = Vec::with_capacity(n.len());
        for (h, (w, t)) in data.weights.iter().zip(trials).enumerate() {
            if w.fract() != 0.0 || *w < *t as f64 {
                return Err(Error::stratum(h, "finite-population means need an integer N_h of at least n_h"));
            }
            out.push(*w as u64 - t);
        }
        Some(out)
    } else {
        None
    };

    // Empirical-logit fit for starting values.
    let logits: Vec<f64> = y.iter().zip(&n).map(|(y, n)| ((y + 0.5) / (n - y + 0.5)).ln()).collect();
    let weights: Vec<f64> = y.iter().zip(&n).map(|(y, n)| 1.0 / (1.0 / (y + 0.5) + 1.0 / (n - y + 0.5))).collect();
    let (beta0, se) = weighted_least_squares(&spec.covariates, &logits, &weights)?;

    let streams = Streams::new(spec.seed);
    let chains: Vec<Result<ChainDraws>> = (0..spec.settings.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = streams.stream(&format!("hb/binomial/chain/{c}"));
            run_chain(spec, &design, &y, &n, unsampled.as_deref(), &beta0, &se, &weights, c, &mut rng)
        })
        .collect();
    let draws = PosteriorDraws { family: Family::BinomialLogit, chains: chains.into_iter().collect::<Result<_>>()? };
    if let Some(a) = draws.min_acceptance().filter(|a| *a < 0.05) {
        log::warn!("binomial sampler acceptance fell to {a:.3}");
    }
    let summary = summarize(&draws, data, spec.settings.cv_definition);
    Ok((draws, summary))
}

#[allow(clippy::too_many_arguments)]
fn run_chain<R: Rng>(
    spec: &HBSpec,
    design: &Design,
    y: &[f64],
    n: &[f64],
    unsampled: Option<&[u64]>,
    beta0: &[f64],
    se: &[f64],
    info: &[f64],
    c: usize,
    rng: &mut R,
) -> Result<ChainDraws> {
    let s = &spec.settings;
    let (h_count, p) = (y.len(), beta0.len());
    let tau2 = s.tau2_beta;
    let offset = chain_offset(c, s.chains, s.jitter_se);
    let start: Vec<f64> = beta0.iter().zip(se).map(|(b, e)| b + offset * e).collect();
    let mut bt = design.to_std(&start);
    let mut sigma2 =
        spec.fixed_sigma2.unwrap_or(spec.prior.s2 * 2f64.powf(offset / s.jitter_se.max(f64::MIN_POSITIVE)));
    let mut v = vec![0.0; h_count];
    let mut lin: Vec<f64> = design.z.iter().map(|z| dot(z, &bt)).collect();
    // Raw-scale change per unit step of each standardised coefficient.
    let directions: Vec<Vec<f64>> = (0..p)
        .map(|j| {
            let mut e = vec![0.0; p];
            e[j] = 1.0;
            design.to_raw(&e)
        })
        .collect();

    let log_prior_beta = |bt: &[f64]| -> f64 {
        let b = design.to_raw(bt);
        -b.iter().map(|x| x * x).sum::<f64>() / (2.0 * tau2)
    };
    let start_lp: f64 = (0..h_count).map(|h| loglik(y[h], n[h], lin[h])).sum::<f64>() + log_prior_beta(&bt);
    if !start_lp.is_finite() {
        return Err(Error::Fit("log-posterior is not finite at the starting values".into()));
    }

    let total_info: f64 = info.iter().sum();
    let mut sd_v: Vec<f64> = info.iter().map(|w| 2.4 / (1.0 / sigma2 + w).sqrt()).collect();
    let mut sd_b = vec![2.4 / total_info.sqrt(); p];
    let mut acc_v = vec![0usize; h_count];
    let mut acc_b = vec![0usize; p];
    let mut batch_v = vec![0usize; h_count];
    let mut batch_b = vec![0usize; p];

    let mut out = ChainDraws {
        beta: Vec::with_capacity(s.draws),
        sigma2: Vec::with_capacity(s.draws),
        v: Vec::with_capacity(s.draws),
        means: Vec::with_capacity(s.draws),
        acceptance_v: vec![],
        acceptance_beta: vec![],
    };
    let total = s.burn_in + s.draws;
    for it in 0..total {
        for h in 0..h_count {
            let prop = v[h] + sd_v[h] * rng.sample::<f64, _>(StandardNormal);
            let eta = lin[h];
            let log_ratio = loglik(y[h], n[h], eta + prop)
                - loglik(y[h], n[h], eta + v[h])
                - (prop * prop - v[h] * v[h]) / (2.0 * sigma2);
            if rng.random::<f64>().ln() < log_ratio {
                v[h] = prop;
                batch_v[h] += 1;
                if it >= s.burn_in {
                    acc_v[h] += 1;
                }
            }
        }
        for j in 0..p {
            let step = sd_b[j] * rng.sample::<f64, _>(StandardNormal);
            let mut prop = bt.clone();
            prop[j] += step;
            let mut log_ratio = log_prior_beta(&prop) - log_prior_beta(&bt);
            for h in 0..h_count {
                let old = lin[h] + v[h];
                log_ratio += loglik(y[h], n[h], old + step * design.z[h][j]) - loglik(y[h], n[h], old);
            }
            if rng.random::<f64>().ln() < log_ratio {
                bt = prop;
                for h in 0..h_count {
                    lin[h] += step * design.z[h][j];
                }
                batch_b[j] += 1;
                if it >= s.burn_in {
                    acc_b[j] += 1;
                }
            }
        }
        // β̃_j + δ with v_h − δ z̃_hj leaves every linear predictor
        // unchanged and the conditional of δ is Gaussian; these exact line
        // moves break the β–v ridge that scalar updates crawl along.
        for j in 0..p {
            let b = design.to_raw(&bt);
            let u = &directions[j];
            let zz: f64 = design.z.iter().map(|z| z[j] * z[j]).sum();
            let zv: f64 = design.z.iter().zip(&v).map(|(z, x)| z[j] * x).sum();
            let uu: f64 = u.iter().map(|x| x * x).sum();
            let ub: f64 = u.iter().zip(&b).map(|(x, y)| x * y).sum();
            let prec = zz / sigma2 + uu / tau2;
            let centre = (zv / sigma2 - ub / tau2) / prec;
            let delta = centre + rng.sample::<f64, _>(StandardNormal) / prec.sqrt();
            bt[j] += delta;
            for ((x, l), z) in v.iter_mut().zip(lin.iter_mut()).zip(&design.z) {
                *x -= delta * z[j];
                *l += delta * z[j];
            }
        }
        if spec.fixed_sigma2.is_none() {
            let ss: f64 = v.iter().map(|x| x * x).sum();
            sigma2 = draw_scaled_inv_chi2(rng, spec.prior.nu, spec.prior.s2, ss, h_count);
        }
        if it < s.burn_in && (it + 1) % ADAPT_BATCH == 0 {
            let k = ((it + 1) / ADAPT_BATCH) as f64;
            let delta = (0.1f64).min(1.0 / k.sqrt());
            let tune = |sd: &mut f64, count: &mut usize| {
                let rate = *count as f64 / ADAPT_BATCH as f64;
                *sd *= if rate > s.target_acceptance { delta.exp() } else { (-delta).exp() };
                *count = 0;
            };
            sd_v.iter_mut().zip(batch_v.iter_mut()).for_each(|(sd, n)| tune(sd, n));
            sd_b.iter_mut().zip(batch_b.iter_mut()).for_each(|(sd, n)| tune(sd, n));
        }
        if it >= s.burn_in {
            out.beta.push(design.to_raw(&bt));
            out.sigma2.push(sigma2);
            let rates = lin.iter().zip(&v).map(|(l, x)| logistic(l + x));
            let means = match unsampled {
                None => rates.collect(),
                Some(rest) => rates
                    .enumerate()
                    .map(|(h, p)| {
                        let extra = Binomial::new(rest[h], p).map_or(0, |b| rng.sample(b));
                        (y[h] + extra as f64) / (n[h] + rest[h] as f64)
                    })
                    .collect(),
            };
            out.means.push(means);
            out.v.push(v.clone());
        }
    }
    let kept = s.draws as f64;
    out.acceptance_v = acc_v.iter().map(|&a| a as f64 / kept).collect();
    out.acceptance_beta = acc_b.iter().map(|&a| a as f64 / kept).collect();
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
