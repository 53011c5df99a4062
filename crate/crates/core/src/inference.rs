//! Likelihood evaluation and maximum-likelihood fitting.
//!
//! The initial distribution is always the stationary distribution of the
//! transition matrix. Two independent recursions are provided: a log-space
//! forward pass ([`log_likelihood`]) and a scaled forward–backward pass that
//! also yields posteriors and the analytic gradient used by the optimizer.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupling::CouplingKind;
use crate::emissions::{stream_log_densities, ObservationSet, StateMap};
use crate::error::{ChmmError, Result};
use crate::model::{Model, ModelSpec, WorkingParameters};
use crate::optim::{minimize, BfgsOptions, Termination};
use crate::tpm::PROB_FLOOR;

/// `T × K` matrix of log emission densities.
#[derive(Debug, Clone)]
pub(crate) struct LogEmissions {
    pub k: usize,
    pub values: Vec<f64>,
}

impl LogEmissions {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.k..(t + 1) * self.k]
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.k
    }
}

pub(crate) fn log_emissions(model: &Model, data: &ObservationSet) -> Result<LogEmissions> {
    model.spec().check_data(data)?;
    let map = model.state_map();
    let k = map.latent_dim();
    let mut values = vec![0.0; data.len() * k];
    for t in 0..data.len() {
        let per_stream = stream_log_densities(model.emissions(), data, t);
        let row = &mut values[t * k..(t + 1) * k];
        for (kk, slot) in row.iter_mut().enumerate() {
            for (m, d) in per_stream.iter().enumerate() {
                if let Some(d) = d {
                    *slot += d[map.state_of(kk, m)];
                }
            }
        }
        if let Some(bad) = row.iter().find(|v| v.is_nan() || **v == f64::INFINITY) {
            return Err(ChmmError::Numeric(format!(
                "emission log-density {bad} at time index {t}"
            )));
        }
        if row.iter().all(|v| *v == f64::NEG_INFINITY) {
            return Err(ChmmError::DataModelMismatch { t });
        }
    }
    Ok(LogEmissions { k, values })
}

/// Log-likelihood by the log-space forward recursion
/// `log α_t(j) = log Σ_i exp(log α_{t−1}(i)) γ_ij + log f_j(y_t)`,
/// normalizing each step by its maximum (log-sum-exp).
pub fn log_likelihood(model: &Model, data: &ObservationSet) -> Result<f64> {
    let em = log_emissions(model, data)?;
    let delta = model.stationary()?;
    let gamma = model.tpm();
    forward_log_space(delta.probs(), gamma.entries(), &em)
}

/// Log-likelihood of a model with the structure of `template` at `working`.
pub fn log_likelihood_working(
    template: &Model,
    working: &WorkingParameters,
    data: &ObservationSet,
) -> Result<f64> {
    log_likelihood(&template.with_working(&working.values)?, data)
}

fn forward_log_space(delta: &[f64], gamma: &[f64], em: &LogEmissions) -> Result<f64> {
    let k = em.k;
    if em.len() == 0 {
        return Ok(0.0);
    }
    let mut la: Vec<f64> = delta
        .iter()
        .zip(em.row(0))
        .map(|(d, e)| d.ln() + e)
        .collect();
    let mut scaled = vec![0.0; k];
    let mut next = vec![0.0; k];
    for t in 0..em.len() {
        if t > 0 {
            let shift = max_of(&la);
            for (s, &l) in scaled.iter_mut().zip(&la) {
                *s = (l - shift).exp();
            }
            next.iter_mut().for_each(|v| *v = 0.0);
            for (i, &s) in scaled.iter().enumerate() {
                if s == 0.0 {
                    continue;
                }
                for (n, g) in next.iter_mut().zip(&gamma[i * k..(i + 1) * k]) {
                    *n += s * g;
                }
            }
            for ((l, n), e) in la.iter_mut().zip(&next).zip(em.row(t)) {
                *l = shift + n.ln() + e;
            }
        }
        if max_of(&la) == f64::NEG_INFINITY {
            return Err(ChmmError::DataModelMismatch { t });
        }
    }
    Ok(log_sum_exp(&la))
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = max_of(v);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Output of the scaled forward–backward pass.
pub(crate) struct ForwardBackward {
    pub loglik: f64,
    /// `T × K` smoothed state probabilities.
    pub posteriors: Vec<f64>,
    /// `∂ℓ/∂Γ` including the dependence of the stationary start on Γ.
    pub d_gamma: Option<Vec<f64>>,
}

pub(crate) fn forward_backward(
    delta: &[f64],
    gamma: &[f64],
    em: &LogEmissions,
    want_gradient: bool,
) -> Result<ForwardBackward> {
    let k = em.k;
    let t_len = em.len();
    if t_len == 0 {
        return Ok(ForwardBackward {
            loglik: 0.0,
            posteriors: Vec::new(),
            d_gamma: want_gradient.then(|| vec![0.0; k * k]),
        });
    }
    // p_t(k) = exp(log f_k(y_t) − max_k log f_k(y_t))
    let mut p = vec![0.0; t_len * k];
    let mut shifts = vec![0.0; t_len];
    for t in 0..t_len {
        let row = em.row(t);
        let m = max_of(row);
        shifts[t] = m;
        for (dst, e) in p[t * k..(t + 1) * k].iter_mut().zip(row) {
            *dst = (e - m).exp();
        }
    }

    let mut alpha = vec![0.0; t_len * k];
    let mut scale = vec![0.0; t_len];
    for t in 0..t_len {
        let (prev, cur) = alpha.split_at_mut(t * k);
        let cur = &mut cur[..k];
        if t == 0 {
            cur.copy_from_slice(delta);
        } else {
            let prev = &prev[(t - 1) * k..];
            cur.iter_mut().for_each(|v| *v = 0.0);
            for (i, &a) in prev.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (c, g) in cur.iter_mut().zip(&gamma[i * k..(i + 1) * k]) {
                    *c += a * g;
                }
            }
        }
        for (c, pt) in cur.iter_mut().zip(&p[t * k..(t + 1) * k]) {
            *c *= pt;
        }
        let c: f64 = cur.iter().sum();
        if !(c > 0.0) || !c.is_finite() {
            return Err(ChmmError::DataModelMismatch { t });
        }
        cur.iter_mut().for_each(|v| *v /= c);
        scale[t] = c;
    }
    let loglik: f64 = scale.iter().map(|c| c.ln()).sum::<f64>() + shifts.iter().sum::<f64>();

    let mut posteriors = vec![0.0; t_len * k];
    let mut d_gamma = want_gradient.then(|| vec![0.0; k * k]);
    let mut beta = vec![1.0; k];
    let mut w = vec![0.0; k];
    for t in (0..t_len).rev() {
        let post = &mut posteriors[t * k..(t + 1) * k];
        for ((q, a), b) in post.iter_mut().zip(&alpha[t * k..(t + 1) * k]).zip(&beta) {
            *q = a * b;
        }
        let s: f64 = post.iter().sum();
        post.iter_mut().for_each(|v| *v /= s);
        if t == 0 {
            if let Some(dg) = d_gamma.as_mut() {
                // ∂ℓ/∂δ_k, then through δ(Γ): dδ = δ dΓ Z with Z = (I − Γ + 1δ)⁻¹.
                let g0: Vec<f64> = (0..k).map(|j| p[j] * beta[j] / scale[0]).collect();
                add_stationary_gradient(delta, gamma, &g0, dg)?;
            }
            break;
        }
        // w_j = p_t(j) β̂_t(j) / c_t
        for j in 0..k {
            w[j] = p[t * k + j] * beta[j] / scale[t];
        }
        if let Some(dg) = d_gamma.as_mut() {
            let prev = &alpha[(t - 1) * k..t * k];
            for (i, &a) in prev.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (d, wj) in dg[i * k..(i + 1) * k].iter_mut().zip(&w) {
                    *d += a * wj;
                }
            }
        }
        for (i, b) in beta.iter_mut().enumerate() {
            *b = gamma[i * k..(i + 1) * k]
                .iter()
                .zip(&w)
                .map(|(g, wj)| g * wj)
                .sum();
        }
    }
    Ok(ForwardBackward {
        loglik,
        posteriors,
        d_gamma,
    })
}

fn add_stationary_gradient(delta: &[f64], gamma: &[f64], g0: &[f64], dg: &mut [f64]) -> Result<()> {
    let k = delta.len();
    if k == 1 {
        return Ok(());
    }
    let a = DMatrix::from_fn(k, k, |i, j| {
        (if i == j { 1.0 } else { 0.0 }) - gamma[i * k + j] + delta[j]
    });
    let x = a
        .lu()
        .solve(&DVector::from_column_slice(g0))
        .ok_or_else(|| ChmmError::Numeric("fundamental matrix is singular".into()))?;
    for i in 0..k {
        for j in 0..k {
            dg[i * k + j] += delta[i] * x[j];
        }
    }
    Ok(())
}

/// Smoothed posteriors `Pr(S_t = k | y_1..T)` as a `T × K` row-major matrix.
pub(crate) fn posteriors(model: &Model, data: &ObservationSet) -> Result<(f64, Vec<f64>)> {
    let em = log_emissions(model, data)?;
    let delta = model.stationary()?;
    let fb = forward_backward(delta.probs(), model.tpm().entries(), &em, false)?;
    Ok((fb.loglik, fb.posteriors))
}

/// Log-likelihood and its gradient with respect to `model.to_working()`.
pub fn loglik_and_gradient(model: &Model, data: &ObservationSet) -> Result<(f64, Vec<f64>)> {
    let em = log_emissions(model, data)?;
    let gamma = model.tpm();
    let delta = model.stationary()?;
    let fb = forward_backward(delta.probs(), gamma.entries(), &em, true)?;
    let space = model.space();
    let mut grad = model
        .coupling()
        .working_gradient(space, fb.d_gamma.as_deref().unwrap());

    let map = model.state_map();
    let k = map.latent_dim();
    let n = space.states_per_chain();
    let emissions = model.emissions();
    let mut offset = grad.len();
    grad.resize(offset + emissions.num_working(), 0.0);
    let mut marginal = vec![0.0; n];
    for (m, e) in emissions.streams().iter().enumerate() {
        let per = e.params_per_state();
        let block = &mut grad[offset..offset + e.num_working()];
        for t in 0..data.len() {
            let Some(y) = data.value(t, m) else { continue };
            marginal.iter_mut().for_each(|v| *v = 0.0);
            for (kk, &q) in fb.posteriors[t * k..(t + 1) * k].iter().enumerate() {
                marginal[map.state_of(kk, m)] += q;
            }
            let x = data.covariate_row(t, m);
            for (s, &wgt) in marginal.iter().enumerate() {
                if wgt > 0.0 {
                    e.accumulate_gradient(s, y, x, wgt, &mut block[s * per..(s + 1) * per]);
                }
            }
        }
        offset += e.num_working();
    }
    Ok((fb.loglik, grad))
}

/// Central finite-difference gradient of [`log_likelihood`] on the working scale.
pub fn numerical_gradient(model: &Model, data: &ObservationSet, step: f64) -> Result<Vec<f64>> {
    let w = model.to_working().values;
    (0..w.len())
        .map(|p| {
            let h = step * w[p].abs().max(1.0);
            let mut up = w.clone();
            let mut dn = w.clone();
            up[p] += h;
            dn[p] -= h;
            let fu = log_likelihood(&model.with_working(&up)?, data)?;
            let fd = log_likelihood(&model.with_working(&dn)?, data)?;
            Ok((fu - fd) / (2.0 * h))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub restarts: usize,
    pub seed: u64,
    /// Gradient infinity-norm threshold on the working scale.
    pub tolerance: f64,
    pub rel_tolerance: f64,
    pub max_iter: usize,
    pub compute_std_errors: bool,
    /// Start restart 0 here instead of at a randomized start.
    pub initial: Option<Model>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            restarts: 10,
            seed: 1,
            tolerance: 1e-6,
            rel_tolerance: 1e-9,
            max_iter: 1000,
            compute_std_errors: true,
            initial: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartRecord {
    pub seed: u64,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub termination: Termination,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedParameter {
    pub name: String,
    pub value: f64,
    pub std_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub spec: ModelSpec,
    pub model: Model,
    pub working: WorkingParameters,
    pub natural: Vec<NamedParameter>,
    pub loglik: f64,
    pub aic: f64,
    pub std_errors: Option<Vec<f64>>,
    pub restarts: Vec<RestartRecord>,
    pub warnings: Vec<String>,
    pub num_observations: usize,
    pub data_fingerprint: u64,
}

impl FitResult {
    pub fn num_parameters(&self) -> usize {
        self.spec.num_parameters()
    }

    pub fn parameter(&self, name: &str) -> Option<&NamedParameter> {
        self.natural.iter().find(|p| p.name == name)
    }
}

/// Stable fingerprint of an observation set, used to refuse cross-dataset comparisons.
pub fn data_fingerprint(data: &ObservationSet) -> u64 {
    let mut h = DefaultHasher::new();
    data.len().hash(&mut h);
    data.num_streams().hash(&mut h);
    for t in 0..data.len() {
        for m in 0..data.num_streams() {
            data.value(t, m).map(f64::to_bits).hash(&mut h);
            data.covariate_row(t, m)
                .map(|r| r.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .hash(&mut h);
        }
    }
    h.finish()
}

/// SplitMix64 step; derives independent child seeds from a master seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct RestartOutcome {
    record: RestartRecord,
    model: Option<Model>,
}

fn run_restart(
    spec: &ModelSpec,
    data: &ObservationSet,
    options: &FitOptions,
    index: usize,
) -> RestartOutcome {
    let seed = derive_seed(options.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let failed = |termination| RestartOutcome {
        record: RestartRecord {
            seed,
            loglik: f64::NEG_INFINITY,
            converged: false,
            iterations: 0,
            termination,
            grad_norm: f64::NAN,
        },
        model: None,
    };

    let mut start = None;
    for attempt in 0..20 {
        let candidate = match (&options.initial, index, attempt) {
            (Some(m), 0, 0) => Ok(m.clone()),
            _ => spec.initial_model(data, &mut rng, index > 0 || attempt > 0),
        };
        let Ok(candidate) = candidate else { continue };
        if loglik_and_gradient(&candidate, data).is_ok_and(|(l, g)| {
            l.is_finite() && g.iter().all(|v| v.is_finite())
        }) {
            start = Some(candidate);
            break;
        }
    }
    let Some(start) = start else {
        return failed(Termination::NonFiniteStart);
    };

    let template = start.clone();
    let objective = |w: &[f64]| -> (f64, Vec<f64>) {
        match template
            .with_working(w)
            .and_then(|m| loglik_and_gradient(&m, data))
        {
            Ok((l, g)) if l.is_finite() => (-l, g.into_iter().map(|v| -v).collect()),
            _ => (f64::INFINITY, vec![f64::NAN; w.len()]),
        }
    };
    let out = minimize(
        objective,
        start.to_working().values,
        &BfgsOptions {
            grad_tol: options.tolerance,
            rel_tol: options.rel_tolerance,
            max_iter: options.max_iter,
        },
    );
    let converged = out.converged();
    let grad_norm = out.grad_norm();
    RestartOutcome {
        record: RestartRecord {
            seed,
            loglik: -out.f,
            converged,
            iterations: out.iterations,
            termination: out.termination,
            grad_norm,
        },
        model: template.with_working(&out.x).ok(),
    }
}

/// Maximum-likelihood fit from `options.restarts` starting points (run in parallel).
pub fn fit(spec: &ModelSpec, data: &ObservationSet, options: &FitOptions) -> Result<FitResult> {
    spec.validate()?;
    spec.check_data(data)?;
    if data.is_empty() {
        return Err(ChmmError::Data("cannot fit an empty series".into()));
    }
    let restarts = options.restarts.max(1);
    let outcomes: Vec<RestartOutcome> = (0..restarts)
        .into_par_iter()
        .map(|r| run_restart(spec, data, options, r))
        .collect();

    let best = outcomes
        .iter()
        .filter(|o| o.record.converged && o.model.is_some())
        .max_by(|a, b| a.record.loglik.total_cmp(&b.record.loglik));
    let records: Vec<RestartRecord> = outcomes.iter().map(|o| o.record.clone()).collect();
    let Some(best) = best else {
        return Err(ChmmError::NoConvergence {
            diagnostics: records
                .iter()
                .map(|r| {
                    format!(
                        "seed {}: {:?} after {} iterations (loglik {:.6}, |grad| {:.3e})",
                        r.seed, r.termination, r.iterations, r.loglik, r.grad_norm
                    )
                })
                .collect(),
        });
    };
    let model = best.model.clone().unwrap().ordered();
    finish_fit(spec, model, data, records, options.compute_std_errors)
}

/// Assembles a [`FitResult`] for `model`, which is taken as the optimum.
pub fn finish_fit(
    spec: &ModelSpec,
    model: Model,
    data: &ObservationSet,
    restarts: Vec<RestartRecord>,
    compute_std_errors: bool,
) -> Result<FitResult> {
    let loglik = log_likelihood(&model, data)?;
    let mut warnings = Vec::new();
    if let Some(w) = model.coupling().min_cross_weight() {
        if w < 1e-6 {
            warnings.push(format!(
                "cross-chain mixture weight {w:.3e} below 1e-6: model is effectively independent"
            ));
        }
    }
    let names = model.natural_parameters();
    let mut result = FitResult {
        spec: spec.clone(),
        working: model.to_working(),
        natural: names
            .into_iter()
            .map(|(name, value)| NamedParameter {
                name,
                value,
                std_error: None,
            })
            .collect(),
        aic: aic_value(loglik, spec.num_parameters()),
        loglik,
        model,
        std_errors: None,
        restarts,
        warnings,
        num_observations: data.len(),
        data_fingerprint: data_fingerprint(data),
    };
    if compute_std_errors {
        let se = standard_errors(&result, data)?;
        if let Some(w) = se.warning {
            result.warnings.push(w);
        }
        if let Some(v) = &se.values {
            for (p, s) in result.natural.iter_mut().zip(v) {
                p.std_error = Some(*s);
            }
        }
        result.std_errors = se.values;
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StandardErrors {
    /// Aligned with [`FitResult::natural`]; absent when the Hessian is not positive definite.
    pub values: Option<Vec<f64>>,
    pub warning: Option<String>,
}

/// Negative Hessian of the log-likelihood on the working scale, by central
/// differences of the analytic gradient with step `1e-5·max(1, |θ|)`.
pub fn observed_information(model: &Model, data: &ObservationSet) -> Result<DMatrix<f64>> {
    let w = model.to_working().values;
    let p = w.len();
    let columns: Vec<Vec<f64>> = (0..p)
        .into_par_iter()
        .map(|j| {
            let h = 1e-5 * w[j].abs().max(1.0);
            let mut up = w.clone();
            let mut dn = w.clone();
            up[j] += h;
            dn[j] -= h;
            let (_, gu) = loglik_and_gradient(&model.with_working(&up)?, data)?;
            let (_, gd) = loglik_and_gradient(&model.with_working(&dn)?, data)?;
            Ok(gu.iter().zip(&gd).map(|(a, b)| -(a - b) / (2.0 * h)).collect())
        })
        .collect::<Result<_>>()?;
    let mut info = DMatrix::from_fn(p, p, |i, j| columns[j][i]);
    let sym = (&info + info.transpose()) * 0.5;
    info.copy_from(&sym);
    Ok(info)
}

/// Delta-method standard errors of the natural parameters.
pub fn standard_errors(result: &FitResult, data: &ObservationSet) -> Result<StandardErrors> {
    let model = &result.model;
    let p = result.working.values.len();
    if p == 0 {
        return Ok(StandardErrors {
            values: Some(Vec::new()),
            warning: None,
        });
    }
    let info = observed_information(model, data)?;
    let eig = info.clone().symmetric_eigen();
    let max_ev = eig.eigenvalues.max();
    let min_ev = eig.eigenvalues.min();
    let boundary = model
        .tpm()
        .entries()
        .iter()
        .any(|&g| g <= 1e3 * PROB_FLOOR);
    if !(min_ev > 1e-10 * max_ev.max(1.0)) {
        return Ok(StandardErrors {
            values: None,
            warning: Some(format!(
                "observed information not positive definite (eigenvalues in [{min_ev:.3e}, {max_ev:.3e}]){}; standard errors omitted",
                if boundary { ", parameters at the boundary of the parameter space" } else { "" }
            )),
        });
    }
    let mut inv_diag = eig.eigenvalues.clone();
    inv_diag.iter_mut().for_each(|v| *v = 1.0 / *v);
    let cov = &eig.eigenvectors * DMatrix::from_diagonal(&inv_diag) * eig.eigenvectors.transpose();

    let w = &result.working.values;
    let natural = |x: &[f64]| -> Result<Vec<f64>> {
        Ok(model
            .with_working(x)?
            .natural_parameters()
            .into_iter()
            .map(|(_, v)| v)
            .collect())
    };
    let q = result.natural.len();
    let mut jac = DMatrix::<f64>::zeros(q, p);
    for j in 0..p {
        let h = 1e-6 * w[j].abs().max(1.0);
        let mut up = w.clone();
        let mut dn = w.clone();
        up[j] += h;
        dn[j] -= h;
        let (nu, nd) = (natural(&up)?, natural(&dn)?);
        for i in 0..q {
            jac[(i, j)] = (nu[i] - nd[i]) / (2.0 * h);
        }
    }
    let var = &jac * cov * jac.transpose();
    Ok(StandardErrors {
        values: Some((0..q).map(|i| var[(i, i)].max(0.0).sqrt()).collect()),
        warning: boundary.then(|| {
            "some transition probabilities are at the boundary; their standard errors are unreliable"
                .to_string()
        }),
    })
}

pub fn aic_value(loglik: f64, num_parameters: usize) -> f64 {
    -2.0 * loglik + 2.0 * num_parameters as f64
}

pub fn aic(result: &FitResult) -> f64 {
    aic_value(result.loglik, result.num_parameters())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedModel {
    pub rank: usize,
    pub index: usize,
    pub coupling: CouplingKind,
    pub loglik: f64,
    pub num_parameters: usize,
    pub aic: f64,
    pub delta_aic: f64,
}

/// Ranks fits of the same data by ascending AIC (ties keep input order).
pub fn compare_models(results: &[FitResult]) -> Result<Vec<RankedModel>> {
    let Some(first) = results.first() else {
        return Ok(Vec::new());
    };
    if results
        .iter()
        .any(|r| r.data_fingerprint != first.data_fingerprint)
    {
        return Err(ChmmError::Comparison(
            "models were fitted to different datasets".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..results.len()).collect();
    idx.sort_by(|&a, &b| aic(&results[a]).total_cmp(&aic(&results[b])));
    let best = aic(&results[idx[0]]);
    Ok(idx
        .into_iter()
        .enumerate()
        .map(|(rank, i)| {
            let r = &results[i];
            RankedModel {
                rank: rank + 1,
                index: i,
                coupling: r.spec.coupling,
                loglik: r.loglik,
                num_parameters: r.num_parameters(),
                aic: aic(r),
                delta_aic: aic(r) - best,
            }
        })
        .collect())
}

/// Convenience for callers holding a [`StateMap`]-free latent dimension.
pub fn latent_dim(model: &Model) -> usize {
    let map: StateMap = model.state_map();
    map.latent_dim()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::CouplingSpec;
    use crate::emissions::{ChainEmissions, EmissionFamily, EmissionSpec, NormalParams};
    use crate::state_space::StateSpace;
    use crate::tpm::TransitionMatrix;

    fn one_state_normal(mean: f64, sd: f64) -> Model {
        Model::new(
            StateSpace::new(1, 1).unwrap(),
            CouplingSpec::CartesianFull {
                tpm: TransitionMatrix::identity(1),
            },
            EmissionSpec::new(vec![ChainEmissions::Normal {
                states: vec![NormalParams { mean, sd }],
            }])
            .unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn degenerate_chain_is_iid_sum() {
        let m = one_state_normal(0.3, 1.7);
        let ys = [0.1, -2.0, 4.0, 0.5];
        let data = ObservationSet::from_complete(&ys.iter().map(|&y| vec![y]).collect::<Vec<_>>()).unwrap();
        let ll = log_likelihood(&m, &data).unwrap();
        let oracle: f64 = ys
            .iter()
            .map(|&y| crate::emissions::normal_ln_pdf(y, 0.3, 1.7))
            .sum();
        assert!((ll - oracle).abs() < 1e-12);
    }

    #[test]
    fn empty_series_has_zero_loglik() {
        let m = one_state_normal(0.0, 1.0);
        let data = ObservationSet::from_complete(&[]).unwrap();
        let data = if data.num_streams() == 0 {
            ObservationSet::from_rows(&[], vec![None]).unwrap()
        } else {
            data
        };
        assert_eq!(log_likelihood(&m, &data).unwrap(), 0.0);
    }

    #[test]
    fn all_impossible_time_step_is_reported() {
        let model = Model::new(
            StateSpace::new(1, 1).unwrap(),
            CouplingSpec::CartesianFull { tpm: TransitionMatrix::identity(1) },
            EmissionSpec::new(vec![ChainEmissions::Beta {
                states: vec![crate::emissions::BetaParams { alpha: 2.0, beta: 2.0 }],
            }])
            .unwrap(),
        )
        .unwrap();
        let em = LogEmissions { k: 1, values: vec![-1.0, f64::NEG_INFINITY, -1.0] };
        let err = forward_log_space(&[1.0], &[1.0], &em).unwrap_err();
        assert_eq!(err, ChmmError::DataModelMismatch { t: 1 });
        let data = ObservationSet::from_complete(&[vec![0.5], vec![1.2]]).unwrap();
        assert!(log_likelihood(&model, &data).unwrap_err().is_data_error());
    }

    #[test]
    fn aic_arithmetic() {
        assert_eq!(aic_value(-100.0, 10), 220.0);
    }

    #[test]
    fn k1_standard_error_of_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        use rand_distr::{Distribution, Normal};
        let nd = Normal::new(2.0, 3.0).unwrap();
        let ys: Vec<Vec<f64>> = (0..4000).map(|_| vec![nd.sample(&mut rng)]).collect();
        let data = ObservationSet::from_complete(&ys).unwrap();
        let spec = ModelSpec::uniform(1, 1, CouplingKind::CartesianFull, EmissionFamily::Normal).unwrap();
        let fit = fit(&spec, &data, &FitOptions { restarts: 2, ..Default::default() }).unwrap();
        let sd_hat = fit.parameter("sd[1,1]").unwrap().value;
        let se = fit.parameter("mean[1,1]").unwrap().std_error.unwrap();
        let oracle = sd_hat / (ys.len() as f64).sqrt();
        assert!((se / oracle - 1.0).abs() < 0.05, "{se} vs {oracle}");
        assert!(fit.std_errors.is_some());
    }

    #[test]
    fn derive_seed_is_deterministic_and_spread() {
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
        assert_ne!(derive_seed(7, 3), derive_seed(7, 4));
        assert_ne!(derive_seed(7, 3), derive_seed(8, 3));
    }
}
