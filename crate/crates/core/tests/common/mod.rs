//! Independent reference implementations shared by the integration tests.
//!
//! Nothing here calls the library's recursions: likelihoods, decodings and
//! posteriors are obtained by enumerating every state sequence, and emission
//! densities come from `statrs`.

#![allow(dead_code)]

use chmm::coupling::{MixtureWeights, PairwiseMarginals, StateVectorMarginals};
use chmm::emissions::{BetaParams, NormalParams, StateDensity};
use chmm::*;
use rand::Rng;
use statrs::distribution::{Beta, Continuous, Normal};

pub fn random_row<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -rng.random_range(1e-3..1.0f64).ln()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

pub fn random_tpm<R: Rng>(rng: &mut R, n: usize) -> TransitionMatrix {
    TransitionMatrix::from_rows(&(0..n).map(|_| random_row(rng, n)).collect::<Vec<_>>()).unwrap()
}

pub fn random_coupling<R: Rng>(rng: &mut R, kind: CouplingKind, space: &StateSpace) -> CouplingSpec {
    let (m, n, k) = (space.num_chains(), space.states_per_chain(), space.product_dim());
    match kind {
        CouplingKind::CartesianFull => CouplingSpec::CartesianFull { tpm: random_tpm(rng, k) },
        CouplingKind::SingleChain => CouplingSpec::SingleChain { tpm: random_tpm(rng, n) },
        CouplingKind::IndependentChains => CouplingSpec::IndependentChains {
            tpms: (0..m).map(|_| random_tpm(rng, n)).collect(),
        },
        CouplingKind::CondIndep => CouplingSpec::CondIndep {
            marginals: StateVectorMarginals::new(
                (0..m).map(|_| (0..k).map(|_| random_row(rng, n)).collect()).collect(),
                space,
            )
            .unwrap(),
        },
        CouplingKind::MixtureWeight => CouplingSpec::MixtureWeight {
            marginals: PairwiseMarginals::new(
                (0..m).map(|_| (0..m).map(|_| random_tpm(rng, n)).collect()).collect(),
                space,
            )
            .unwrap(),
            weights: MixtureWeights::new((0..m).map(|_| random_row(rng, m)).collect()).unwrap(),
        },
    }
}

/// Random model with normal emissions, or beta emissions when `beta` is set.
pub fn random_model<R: Rng>(rng: &mut R, m: usize, n: usize, kind: CouplingKind, beta: bool) -> Model {
    let space = StateSpace::new(m, n).unwrap();
    let streams = (0..m)
        .map(|_| {
            if beta {
                ChainEmissions::Beta {
                    states: (0..n)
                        .map(|_| BetaParams {
                            alpha: rng.random_range(0.5..6.0),
                            beta: rng.random_range(0.5..6.0),
                        })
                        .collect(),
                }
            } else {
                ChainEmissions::Normal {
                    states: (0..n)
                        .map(|_| NormalParams {
                            mean: rng.random_range(-2.0..2.0),
                            sd: rng.random_range(0.5..2.0),
                        })
                        .collect(),
                }
            }
        })
        .collect();
    Model::new(space, random_coupling(rng, kind, &space), EmissionSpec::new(streams).unwrap()).unwrap()
}

/// Couplings that are valid for an `m`-chain model.
pub fn kinds_for(m: usize) -> Vec<CouplingKind> {
    if m == 1 {
        vec![CouplingKind::CartesianFull, CouplingKind::IndependentChains, CouplingKind::SingleChain]
    } else {
        CouplingKind::ALL.to_vec()
    }
}

/// Random `(M, N)` with `N^M ≤ 4`.
pub fn random_shape<R: Rng>(rng: &mut R) -> (usize, usize) {
    [(1, 1), (1, 2), (1, 3), (1, 4), (2, 2), (2, 1)][rng.random_range(0..6)]
}

/// Series of random observations (not drawn from the model), with some values missing.
pub fn random_data<R: Rng>(rng: &mut R, model: &Model, t: usize, missing: f64) -> ObservationSet {
    let beta = model.emissions().stream(0).family() == EmissionFamily::Beta;
    let m = model.space().num_chains();
    let rows: Vec<Vec<Option<f64>>> = (0..t)
        .map(|_| {
            (0..m)
                .map(|_| {
                    if rng.random::<f64>() < missing {
                        None
                    } else if beta {
                        Some(rng.random_range(0.02..0.98))
                    } else {
                        Some(rng.random_range(-4.0..4.0))
                    }
                })
                .collect()
        })
        .collect();
    ObservationSet::from_rows(&rows, vec![None; m]).unwrap()
}

/// Chain-`m` state of latent state `k`, recomputed from the mixed-radix rule.
pub fn chain_state(model: &Model, k: usize, m: usize) -> usize {
    if model.coupling().kind() == CouplingKind::SingleChain {
        return k;
    }
    let (mc, n) = (model.space().num_chains(), model.space().states_per_chain());
    (k / n.pow((mc - 1 - m) as u32)) % n
}

pub fn ln_density(model: &Model, m: usize, s: usize, y: f64) -> f64 {
    match model.emissions().stream(m).state(s) {
        StateDensity::Normal(p) => Normal::new(p.mean, p.sd).unwrap().ln_pdf(y),
        StateDensity::Beta(p) => Beta::new(p.alpha, p.beta).unwrap().ln_pdf(y),
        StateDensity::NormalRegression(..) => unimplemented!("oracles cover covariate-free models"),
    }
}

/// `log f(y_t | S_t = k)` with missing values contributing nothing.
pub fn ln_emission(model: &Model, data: &ObservationSet, t: usize, k: usize) -> f64 {
    (0..data.num_streams())
        .filter_map(|m| data.value(t, m).map(|y| ln_density(model, m, chain_state(model, k, m), y)))
        .sum()
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Every latent path with its joint log-probability, in lexicographic order.
pub fn enumerate_paths(model: &Model, data: &ObservationSet) -> Vec<(Vec<usize>, f64)> {
    let gamma = model.tpm();
    let delta = model.stationary().unwrap();
    let k = gamma.dim();
    let t_len = data.len();
    let em: Vec<Vec<f64>> = (0..t_len)
        .map(|t| (0..k).map(|s| ln_emission(model, data, t, s)).collect())
        .collect();
    let total = k.pow(t_len as u32);
    (0..total)
        .map(|code| {
            let path: Vec<usize> = (0..t_len)
                .map(|t| (code / k.pow((t_len - 1 - t) as u32)) % k)
                .collect();
            let mut lp = delta.probs()[path[0]].ln() + em[0][path[0]];
            for t in 1..t_len {
                lp += gamma.get(path[t - 1], path[t]).ln() + em[t][path[t]];
            }
            (path, lp)
        })
        .collect()
}

pub fn enumerated_loglik(model: &Model, data: &ObservationSet) -> f64 {
    let lps: Vec<f64> = enumerate_paths(model, data).into_iter().map(|(_, lp)| lp).collect();
    log_sum_exp(&lps)
}

/// Maximizing path; among exact ties the lexicographically first wins.
pub fn enumerated_viterbi(model: &Model, data: &ObservationSet) -> (Vec<usize>, f64) {
    enumerate_paths(model, data)
        .into_iter()
        .fold((Vec::new(), f64::NEG_INFINITY), |best, (p, lp)| if lp > best.1 { (p, lp) } else { best })
}

/// `Pr(S_t = k | y)` as `[t][k]`.
pub fn enumerated_posteriors(model: &Model, data: &ObservationSet) -> Vec<Vec<f64>> {
    let paths = enumerate_paths(model, data);
    let ll = log_sum_exp(&paths.iter().map(|(_, lp)| *lp).collect::<Vec<_>>());
    let k = model.tpm().dim();
    let mut out = vec![vec![0.0; k]; data.len()];
    for (p, lp) in &paths {
        let w = (lp - ll).exp();
        for (t, &s) in p.iter().enumerate() {
            out[t][s] += w;
        }
    }
    out
}

/// Plain forward algorithm with per-step rescaling, evaluated in probability space.
pub fn scaled_forward(delta: &[f64], gamma: &TransitionMatrix, log_em: &dyn Fn(usize, usize) -> f64, t_len: usize) -> f64 {
    let k = delta.len();
    let mut ll = 0.0;
    let mut phi = delta.to_vec();
    for t in 0..t_len {
        let mut next = vec![0.0; k];
        if t == 0 {
            next.copy_from_slice(&phi);
        } else {
            for i in 0..k {
                for j in 0..k {
                    next[j] += phi[i] * gamma.get(i, j);
                }
            }
        }
        let shift = (0..k).map(|j| log_em(t, j)).fold(f64::NEG_INFINITY, f64::max);
        for (j, v) in next.iter_mut().enumerate() {
            *v *= (log_em(t, j) - shift).exp();
        }
        let s: f64 = next.iter().sum();
        ll += s.ln() + shift;
        phi = next.into_iter().map(|v| v / s).collect();
    }
    ll
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * 1f64.max(a.abs()).max(b.abs())
}
