//! Global (Viterbi) and local (posterior-maximum) state decoding.

use serde::{Deserialize, Serialize};

use crate::emissions::ObservationSet;
use crate::error::{ChmmError, Result};
use crate::inference::{log_emissions, posteriors};
use crate::model::Model;

/// A decoded state sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatePath {
    /// Latent-state index per time step (0-based).
    pub global_path: Vec<usize>,
    /// Chain states per time step, `[t][m]`, 1-based.
    pub per_chain: Vec<Vec<usize>>,
    /// Smoothed state probabilities, `[t][k]`.
    pub posteriors: Vec<Vec<f64>>,
}

impl StatePath {
    pub fn len(&self) -> usize {
        self.global_path.len()
    }

    pub fn is_empty(&self) -> bool {
        self.global_path.is_empty()
    }

    /// Posterior probability of the decoded state at each time step.
    pub fn max_posterior(&self) -> Vec<f64> {
        self.posteriors
            .iter()
            .map(|row| row.iter().copied().fold(0.0, f64::max))
            .collect()
    }
}

/// Most probable latent state sequence, computed in log space.
/// Ties resolve to the lower state index.
pub fn viterbi(model: &Model, data: &ObservationSet) -> Result<Vec<usize>> {
    let em = log_emissions(model, data)?;
    let k = em.k;
    let t_len = em.len();
    if t_len == 0 {
        return Ok(Vec::new());
    }
    let log_delta: Vec<f64> = model.stationary()?.probs().iter().map(|p| p.ln()).collect();
    let log_gamma: Vec<f64> = model.tpm().entries().iter().map(|p| p.ln()).collect();

    let mut score: Vec<f64> = log_delta.iter().zip(em.row(0)).map(|(d, e)| d + e).collect();
    let mut back = vec![0usize; t_len * k];
    let mut next = vec![0.0; k];
    for t in 1..t_len {
        for j in 0..k {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for i in 0..k {
                let v = score[i] + log_gamma[i * k + j];
                if v > best {
                    best = v;
                    arg = i;
                }
            }
            next[j] = best + em.row(t)[j];
            back[t * k + j] = arg;
        }
        std::mem::swap(&mut score, &mut next);
    }
    let (mut state, best) = argmax(&score);
    if best == f64::NEG_INFINITY {
        return Err(ChmmError::DataModelMismatch { t: t_len - 1 });
    }
    let mut path = vec![0; t_len];
    for t in (0..t_len).rev() {
        path[t] = state;
        state = back[t * k + state];
    }
    Ok(path)
}

fn argmax(v: &[f64]) -> (usize, f64) {
    let mut arg = 0;
    let mut best = f64::NEG_INFINITY;
    for (i, &x) in v.iter().enumerate() {
        if x > best {
            best = x;
            arg = i;
        }
    }
    (arg, best)
}

/// Joint log-probability `log p(s_1..T, y_1..T)` of a latent path.
pub fn path_log_probability(model: &Model, data: &ObservationSet, path: &[usize]) -> Result<f64> {
    let em = log_emissions(model, data)?;
    if path.len() != em.len() {
        return Err(ChmmError::Shape(format!(
            "path has {} steps, data has {}",
            path.len(),
            em.len()
        )));
    }
    if path.is_empty() {
        return Ok(0.0);
    }
    let delta = model.stationary()?;
    let gamma = model.tpm();
    let mut lp = delta.probs()[path[0]].ln() + em.row(0)[path[0]];
    for t in 1..path.len() {
        lp += gamma.get(path[t - 1], path[t]).ln() + em.row(t)[path[t]];
    }
    Ok(lp)
}

/// Smoothed posteriors and their per-time argmax path.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDecoding {
    pub posteriors: Vec<Vec<f64>>,
    pub path: Vec<usize>,
}

pub fn local_decode(model: &Model, data: &ObservationSet) -> Result<LocalDecoding> {
    let (_, flat) = posteriors(model, data)?;
    let k = model.state_map().latent_dim();
    let posteriors: Vec<Vec<f64>> = flat.chunks(k).map(<[f64]>::to_vec).collect();
    let path = posteriors.iter().map(|row| argmax(row).0).collect();
    Ok(LocalDecoding { posteriors, path })
}

/// Per-chain marginal posteriors `[t][m][s]`.
pub fn chain_posteriors(model: &Model, local: &LocalDecoding) -> Vec<Vec<Vec<f64>>> {
    let map = model.state_map();
    let (m_count, n) = (map.num_streams(), model.space().states_per_chain());
    local
        .posteriors
        .iter()
        .map(|row| {
            let mut out = vec![vec![0.0; n]; m_count];
            for (k, &q) in row.iter().enumerate() {
                for (m, chain) in out.iter_mut().enumerate() {
                    chain[map.state_of(k, m)] += q;
                }
            }
            out
        })
        .collect()
}

/// 1-based chain states for each latent state in `path`.
pub fn per_chain_states(model: &Model, path: &[usize]) -> Vec<Vec<usize>> {
    path.iter()
        .map(|&k| model.chain_states(k).into_iter().map(|s| s + 1).collect())
        .collect()
}

/// Viterbi path together with smoothed posteriors.
pub fn decode(model: &Model, data: &ObservationSet) -> Result<StatePath> {
    let global_path = viterbi(model, data)?;
    let local = local_decode(model, data)?;
    Ok(StatePath {
        per_chain: per_chain_states(model, &global_path),
        global_path,
        posteriors: local.posteriors,
    })
}

/// Percentage of mismatched chain-state entries, `100·#{(t,m): d ≠ s}/(T·M)`.
pub fn decoding_error(decoded: &[Vec<usize>], truth: &[Vec<usize>]) -> Result<f64> {
    let total = check_paths(decoded, truth)?;
    let wrong: usize = decoded
        .iter()
        .zip(truth)
        .map(|(d, s)| d.iter().zip(s).filter(|(a, b)| a != b).count())
        .sum();
    Ok(100.0 * wrong as f64 / total as f64)
}

/// Percentage of time steps whose full state vector is wrong in at least one chain.
pub fn joint_decoding_error(decoded: &[Vec<usize>], truth: &[Vec<usize>]) -> Result<f64> {
    check_paths(decoded, truth)?;
    let wrong = decoded.iter().zip(truth).filter(|(d, s)| d != s).count();
    Ok(100.0 * wrong as f64 / decoded.len() as f64)
}

fn check_paths(decoded: &[Vec<usize>], truth: &[Vec<usize>]) -> Result<usize> {
    if decoded.len() != truth.len() {
        return Err(ChmmError::Shape(format!(
            "decoded path has {} steps, truth has {}",
            decoded.len(),
            truth.len()
        )));
    }
    let mut total = 0;
    for (t, (d, s)) in decoded.iter().zip(truth).enumerate() {
        if d.len() != s.len() {
            return Err(ChmmError::Shape(format!(
                "time index {t}: {} decoded chains vs {} true chains",
                d.len(),
                s.len()
            )));
        }
        total += d.len();
    }
    if total == 0 {
        return Err(ChmmError::Shape("paths are empty".into()));
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disagreement {
    /// Time indices (0-based) where not all chains share the same state.
    pub indices: Vec<usize>,
    pub fraction: f64,
}

pub fn disagreement_intervals(per_chain: &[Vec<usize>]) -> Result<Disagreement> {
    let m = per_chain.first().map_or(0, Vec::len);
    if m < 2 || per_chain.iter().any(|row| row.len() != m) {
        return Err(ChmmError::Domain(
            "disagreement needs at least two chains of equal length".into(),
        ));
    }
    let indices: Vec<usize> = per_chain
        .iter()
        .enumerate()
        .filter(|(_, row)| row.iter().any(|&s| s != row[0]))
        .map(|(t, _)| t)
        .collect();
    let fraction = indices.len() as f64 / per_chain.len() as f64;
    Ok(Disagreement { indices, fraction })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::CouplingSpec;
    use crate::emissions::{ChainEmissions, EmissionSpec, NormalParams};
    use crate::state_space::StateSpace;
    use crate::tpm::TransitionMatrix;

    fn normal_states(means: &[f64]) -> ChainEmissions {
        ChainEmissions::Normal {
            states: means.iter().map(|&mean| NormalParams { mean, sd: 1.0 }).collect(),
        }
    }

    #[test]
    fn single_state_path_is_all_ones() {
        let model = Model::new(
            StateSpace::new(1, 1).unwrap(),
            CouplingSpec::CartesianFull { tpm: TransitionMatrix::identity(1) },
            EmissionSpec::new(vec![normal_states(&[0.0])]).unwrap(),
        )
        .unwrap();
        let data = ObservationSet::from_complete(&[vec![1.0], vec![-3.0], vec![0.2]]).unwrap();
        let path = decode(&model, &data).unwrap();
        assert_eq!(path.per_chain, vec![vec![1]; 3]);
    }

    #[test]
    fn absorbing_chain_stays_put() {
        // State 2 is absorbing, so the stationary mass sits there.
        let tpm = TransitionMatrix::from_rows(&[vec![0.5, 0.5], vec![0.0, 1.0]]).unwrap();
        let model = Model::new(
            StateSpace::new(1, 2).unwrap(),
            CouplingSpec::CartesianFull { tpm },
            EmissionSpec::new(vec![normal_states(&[0.0, 0.1])]).unwrap(),
        )
        .unwrap();
        let data = ObservationSet::from_complete(&[vec![-5.0], vec![-4.0], vec![0.0]]).unwrap();
        assert_eq!(viterbi(&model, &data).unwrap(), vec![1, 1, 1]);
    }

    #[test]
    fn error_rates() {
        let a = vec![vec![1, 2], vec![2, 2]];
        assert_eq!(decoding_error(&a, &a).unwrap(), 0.0);
        let flip: Vec<Vec<usize>> = a.iter().map(|r| r.iter().map(|s| 3 - s).collect()).collect();
        assert_eq!(decoding_error(&a, &flip).unwrap(), 100.0);
        let one = vec![vec![1, 1], vec![2, 2]];
        assert_eq!(decoding_error(&a, &one).unwrap(), 25.0);
        assert_eq!(joint_decoding_error(&a, &one).unwrap(), 50.0);
        assert!(decoding_error(&a, &a[..1]).is_err());
    }

    #[test]
    fn disagreement() {
        let same = vec![vec![1, 1], vec![2, 2]];
        let d = disagreement_intervals(&same).unwrap();
        assert!(d.indices.is_empty());
        assert_eq!(d.fraction, 0.0);
        let one = vec![vec![1, 1], vec![1, 2], vec![2, 2], vec![1, 1]];
        let d = disagreement_intervals(&one).unwrap();
        assert_eq!(d.indices, vec![1]);
        assert_eq!(d.fraction, 0.25);
        assert!(disagreement_intervals(&[vec![1], vec![2]]).is_err());
    }
}
