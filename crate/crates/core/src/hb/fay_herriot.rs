//! Fay–Herriot model by Gibbs sampling. Given `σ²_v`, `(β, θ)` is drawn
//! jointly and exactly: `β` from its Gaussian conditional with `θ`
//! integrated out (`θ̂_h ~ N(z_hᵀβ, ψ_h + σ²_v)`), then each `θ_h` from the
//! precision-weighted blend of `θ̂_h` and `z_hᵀβ`. `σ²_v` then follows its
//! scaled inverse-χ² conditional.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{
    chain_offset, draw_scaled_inv_chi2, summarize, AreaData, ChainDraws, Family, HBSpec, Observations, PosteriorDraws,
    PosteriorSummary,
};
use crate::error::{Error, Result};
use crate::rng::Streams;

pub fn fit_fay_herriot(spec: &HBSpec, data: &AreaData) -> Result<(PosteriorDraws, PosteriorSummary)> {
    spec.validate(data)?;
    let Observations::Gaussian { theta_hat, psi } = &data.observations else {
        return Err(Error::Invalid("Fay–Herriot model needs direct estimates".into()));
    };
    let h = theta_hat.len();
    let p = spec.n_coefficients();
    let z = DMatrix::from_fn(h, p, |i, j| spec.covariates[i][j]);
    let streams = Streams::new(spec.seed);
    let chains: Vec<Result<ChainDraws>> = (0..spec.settings.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = streams.stream(&format!("hb/fay_herriot/chain/{c}"));
            run_chain(spec, &z, theta_hat, psi, c, &mut rng)
        })
        .collect();
    let draws = PosteriorDraws { family: Family::GaussianArea, chains: chains.into_iter().collect::<Result<_>>()? };
    let summary = summarize(&draws, data, spec.settings.cv_definition);
    Ok((draws, summary))
}

fn run_chain<R: Rng>(
    spec: &HBSpec,
    z: &DMatrix<f64>,
    theta_hat: &[f64],
    psi: &[f64],
    c: usize,
    rng: &mut R,
) -> Result<ChainDraws> {
    let s = &spec.settings;
    let (h_count, p) = z.shape();
    let offset = chain_offset(c, s.chains, s.jitter_se);
    let mut sigma2 =
        spec.fixed_sigma2.unwrap_or(spec.prior.s2 * 2f64.powf(offset / s.jitter_se.max(f64::MIN_POSITIVE)));
    let y = DVector::from_column_slice(theta_hat);
    let mut out = ChainDraws {
        beta: Vec::with_capacity(s.draws),
        sigma2: Vec::with_capacity(s.draws),
        v: Vec::with_capacity(s.draws),
        means: Vec::with_capacity(s.draws),
        acceptance_v: vec![],
        acceptance_beta: vec![],
    };
    for it in 0..s.burn_in + s.draws {
        let w = DVector::from_iterator(h_count, psi.iter().map(|p| 1.0 / (p + sigma2)));
        let wz = DMatrix::from_fn(h_count, p, |i, j| w[i] * z[(i, j)]);
        let mut precision = z.transpose() * &wz;
        for j in 0..p {
            precision[(j, j)] += 1.0 / s.tau2_beta;
        }
        let chol = precision.cholesky().ok_or_else(|| Error::Fit("β precision is not positive definite".into()))?;
        let centre = chol.solve(&(wz.transpose() * &y));
        let eps = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let noise = chol
            .l()
            .transpose()
            .solve_upper_triangular(&eps)
            .ok_or_else(|| Error::Fit("singular Cholesky factor".into()))?;
        let beta = centre + noise;
        let fitted = z * &beta;

        let mut theta = vec![0.0; h_count];
        let mut v = vec![0.0; h_count];
        for h in 0..h_count {
            let prec = 1.0 / psi[h] + 1.0 / sigma2;
            let m = (theta_hat[h] / psi[h] + fitted[h] / sigma2) / prec;
            theta[h] = m + rng.sample::<f64, _>(StandardNormal) / prec.sqrt();
            v[h] = theta[h] - fitted[h];
        }
        if spec.fixed_sigma2.is_none() {
            let ss: f64 = v.iter().map(|x| x * x).sum();
            sigma2 = draw_scaled_inv_chi2(rng, spec.prior.nu, spec.prior.s2, ss, h_count);
        }
        if it >= s.burn_in {
            out.beta.push(beta.iter().copied().collect());
            out.sigma2.push(sigma2);
            out.v.push(v);
            out.means.push(theta);
        }
    }
    Ok(out)
}
