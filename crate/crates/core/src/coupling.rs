//! Coupling formulations and their product-space transition matrices.
//!
//! Every formulation is evaluated by converting it to a transition matrix over
//! the product state space, after which the ordinary HMM machinery applies.
//! `SingleChain` is the exception: it keeps an `N`-state latent chain that all
//! observation streams share.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ChmmError, Result};
use crate::state_space::StateSpace;
use crate::tpm::{logit_row, softmax_row, TransitionMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingKind {
    CartesianFull,
    CondIndep,
    MixtureWeight,
    IndependentChains,
    SingleChain,
}

impl CouplingKind {
    pub const ALL: [CouplingKind; 5] = [
        CouplingKind::CartesianFull,
        CouplingKind::CondIndep,
        CouplingKind::MixtureWeight,
        CouplingKind::IndependentChains,
        CouplingKind::SingleChain,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CouplingKind::CartesianFull => "cartesian_full",
            CouplingKind::CondIndep => "cond_indep",
            CouplingKind::MixtureWeight => "mixture_weight",
            CouplingKind::IndependentChains => "independent_chains",
            CouplingKind::SingleChain => "single_chain",
        }
    }

    /// Latent state space for `space` (observation streams × states).
    pub fn latent_space(&self, space: &StateSpace) -> StateSpace {
        match self {
            CouplingKind::SingleChain => StateSpace::new(1, space.states_per_chain())
                .expect("states_per_chain already validated"),
            _ => *space,
        }
    }
}

impl std::fmt::Display for CouplingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CouplingKind {
    type Err = ChmmError;
    fn from_str(s: &str) -> Result<Self> {
        CouplingKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                ChmmError::Domain(format!(
                    "unknown coupling kind `{s}` (expected one of cartesian_full, cond_indep, mixture_weight, independent_chains, single_chain)"
                ))
            })
    }
}

/// `probs[m][i][j]` = Pr(chain m is in state j | product state i at t−1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateVectorMarginals {
    probs: Vec<Vec<Vec<f64>>>,
}

impl StateVectorMarginals {
    pub fn new(probs: Vec<Vec<Vec<f64>>>, space: &StateSpace) -> Result<Self> {
        let out = Self { probs };
        out.validate(space)?;
        Ok(out)
    }

    pub fn validate(&self, space: &StateSpace) -> Result<()> {
        let (m_count, k, n) = (
            space.num_chains(),
            space.product_dim(),
            space.states_per_chain(),
        );
        if self.probs.len() != m_count
            || self
                .probs
                .iter()
                .any(|pm| pm.len() != k || pm.iter().any(|r| r.len() != n))
        {
            return Err(ChmmError::Shape(format!(
                "state-vector marginals must be {m_count} × {k} × {n}"
            )));
        }
        for (m, pm) in self.probs.iter().enumerate() {
            for (i, row) in pm.iter().enumerate() {
                check_distribution(row, &format!("marginal of chain {} given state {i}", m + 1))?;
            }
        }
        Ok(())
    }

    pub fn get(&self, m: usize, i: usize, j: usize) -> f64 {
        self.probs[m][i][j]
    }

    pub fn probs(&self) -> &[Vec<Vec<f64>>] {
        &self.probs
    }
}

/// `tpms[m][n]` is the N×N law of chain m's next state given chain n's previous state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PairwiseMarginals {
    tpms: Vec<Vec<TransitionMatrix>>,
}

impl PairwiseMarginals {
    pub fn new(tpms: Vec<Vec<TransitionMatrix>>, space: &StateSpace) -> Result<Self> {
        let out = Self { tpms };
        out.validate(space)?;
        Ok(out)
    }

    pub fn validate(&self, space: &StateSpace) -> Result<()> {
        let (m_count, n) = (space.num_chains(), space.states_per_chain());
        if self.tpms.len() != m_count
            || self
                .tpms
                .iter()
                .any(|r| r.len() != m_count || r.iter().any(|t| t.dim() != n))
        {
            return Err(ChmmError::Shape(format!(
                "pairwise marginals must be {m_count} × {m_count} matrices of size {n}×{n}"
            )));
        }
        Ok(())
    }

    pub fn get(&self, m: usize, n: usize) -> &TransitionMatrix {
        &self.tpms[m][n]
    }
}

/// `w[m][n]`: weight of chain n's previous state in chain m's transition law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MixtureWeights {
    w: Vec<Vec<f64>>,
}

impl MixtureWeights {
    pub fn new(w: Vec<Vec<f64>>) -> Result<Self> {
        let out = Self { w };
        out.validate()?;
        Ok(out)
    }

    pub fn independent(num_chains: usize) -> Self {
        let w = (0..num_chains)
            .map(|m| (0..num_chains).map(|n| if m == n { 1.0 } else { 0.0 }).collect())
            .collect();
        Self { w }
    }

    pub fn validate(&self) -> Result<()> {
        let m_count = self.w.len();
        if self.w.iter().any(|r| r.len() != m_count) {
            return Err(ChmmError::Shape("mixture weights must be M × M".into()));
        }
        for (m, row) in self.w.iter().enumerate() {
            check_distribution(row, &format!("mixture weights of chain {}", m + 1))?;
        }
        Ok(())
    }

    pub fn get(&self, m: usize, n: usize) -> f64 {
        self.w[m][n]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.w
    }
}

fn check_distribution(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|x| !x.is_finite() || *x < 0.0 || *x > 1.0) {
        return Err(ChmmError::InvalidParameter(format!(
            "{what} has entries outside [0, 1]"
        )));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        return Err(ChmmError::InvalidParameter(format!(
            "{what} sums to {s}, not 1"
        )));
    }
    Ok(())
}

/// A coupling formulation together with its natural parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CouplingSpec {
    CartesianFull {
        tpm: TransitionMatrix,
    },
    CondIndep {
        marginals: StateVectorMarginals,
    },
    MixtureWeight {
        marginals: PairwiseMarginals,
        weights: MixtureWeights,
    },
    IndependentChains {
        tpms: Vec<TransitionMatrix>,
    },
    SingleChain {
        tpm: TransitionMatrix,
    },
}

pub fn build_cartesian(tpm: &TransitionMatrix, space: &StateSpace) -> Result<TransitionMatrix> {
    if tpm.dim() != space.product_dim() {
        return Err(ChmmError::Shape(format!(
            "Cartesian transition matrix must be {k}×{k}, got {d}×{d}",
            k = space.product_dim(),
            d = tpm.dim()
        )));
    }
    Ok(tpm.clone())
}

/// Kronecker product of per-chain matrices in mixed-radix order.
pub fn build_independent(per_chain: &[TransitionMatrix]) -> Result<TransitionMatrix> {
    let first = per_chain
        .first()
        .ok_or_else(|| ChmmError::Shape("need at least one chain".into()))?;
    if per_chain.iter().any(|t| t.dim() != first.dim()) {
        return Err(ChmmError::Shape(
            "all per-chain matrices must share one dimension".into(),
        ));
    }
    Ok(per_chain[1..]
        .iter()
        .fold(first.clone(), |acc, t| acc.kron(t)))
}

/// `Γ[i][j] = Π_m Pr(S_t^(m) = j_m | S_{t−1} = i)`.
pub fn build_cond_indep(
    marginals: &StateVectorMarginals,
    space: &StateSpace,
) -> Result<TransitionMatrix> {
    marginals.validate(space)?;
    Ok(product_of_marginals(space, |m, i, b| marginals.get(m, i, b)))
}

/// Chain m's law is `Σ_n w[m][n]·A_mn(i_n, ·)`; chains are then combined as in
/// [`build_cond_indep`].
pub fn build_mixture_weight(
    marginals: &PairwiseMarginals,
    weights: &MixtureWeights,
    space: &StateSpace,
) -> Result<TransitionMatrix> {
    marginals.validate(space)?;
    weights.validate()?;
    if weights.rows().len() != space.num_chains() {
        return Err(ChmmError::Shape(format!(
            "need {} rows of mixture weights",
            space.num_chains()
        )));
    }
    let p = mixture_marginals(marginals, weights, space);
    Ok(product_of_marginals(space, |m, i, b| p[m][i * space.states_per_chain() + b]))
}

pub fn build_single_chain(tpm: &TransitionMatrix, space: &StateSpace) -> Result<TransitionMatrix> {
    if tpm.dim() != space.states_per_chain() {
        return Err(ChmmError::Shape(format!(
            "single-chain transition matrix must be {n}×{n}, got {d}×{d}",
            n = space.states_per_chain(),
            d = tpm.dim()
        )));
    }
    Ok(tpm.clone())
}

/// `p[m][i·N + b]` = Pr(S_t^(m) = b | S_{t−1} = i) under mixture weights.
fn mixture_marginals(
    marginals: &PairwiseMarginals,
    weights: &MixtureWeights,
    space: &StateSpace,
) -> Vec<Vec<f64>> {
    let (mc, k, n) = (
        space.num_chains(),
        space.product_dim(),
        space.states_per_chain(),
    );
    (0..mc)
        .map(|m| {
            let mut out = vec![0.0; k * n];
            for i in 0..k {
                for src in 0..mc {
                    let w = weights.get(m, src);
                    if w == 0.0 {
                        continue;
                    }
                    let row = marginals.get(m, src).row(space.component(i, src));
                    for b in 0..n {
                        out[i * n + b] += w * row[b];
                    }
                }
            }
            out
        })
        .collect()
}

fn product_of_marginals(
    space: &StateSpace,
    marginal: impl Fn(usize, usize, usize) -> f64,
) -> TransitionMatrix {
    let k = space.product_dim();
    let comps = space.component_table();
    let mut entries = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            entries[i * k + j] = comps[j]
                .iter()
                .enumerate()
                .map(|(m, &b)| marginal(m, i, b))
                .product();
        }
    }
    TransitionMatrix::from_stochastic_unchecked(k, entries)
}

/// Free transition parameters after sum-to-one constraints.
pub fn count_parameters(kind: CouplingKind, space: &StateSpace) -> usize {
    let (m, n, k) = (
        space.num_chains(),
        space.states_per_chain(),
        space.product_dim(),
    );
    match kind {
        CouplingKind::CartesianFull => k * (k - 1),
        CouplingKind::CondIndep => m * k * (n - 1),
        CouplingKind::MixtureWeight => m * m * n * (n - 1) + m * (m - 1),
        CouplingKind::IndependentChains => m * n * (n - 1),
        CouplingKind::SingleChain => n * (n - 1),
    }
}

/// Diagonal mass in [0.7, 0.95] at `diag`, remaining mass spread at random.
fn random_row<R: Rng + ?Sized>(rng: &mut R, len: usize, diag: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    let d = rng.random_range(0.7..0.95);
    let mut off: Vec<f64> = (0..len - 1).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = off.iter().sum();
    off.iter_mut().for_each(|x| *x *= (1.0 - d) / s);
    let mut it = off.into_iter();
    (0..len)
        .map(|j| if j == diag { d } else { it.next().unwrap() })
        .collect()
}

fn random_tpm<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> TransitionMatrix {
    let entries = (0..dim).flat_map(|i| random_row(rng, dim, i)).collect();
    TransitionMatrix::from_stochastic_unchecked(dim, entries)
}

impl CouplingSpec {
    pub fn kind(&self) -> CouplingKind {
        match self {
            CouplingSpec::CartesianFull { .. } => CouplingKind::CartesianFull,
            CouplingSpec::CondIndep { .. } => CouplingKind::CondIndep,
            CouplingSpec::MixtureWeight { .. } => CouplingKind::MixtureWeight,
            CouplingSpec::IndependentChains { .. } => CouplingKind::IndependentChains,
            CouplingSpec::SingleChain { .. } => CouplingKind::SingleChain,
        }
    }

    /// Transition matrix over the latent state space.
    pub fn build(&self, space: &StateSpace) -> Result<TransitionMatrix> {
        match self {
            CouplingSpec::CartesianFull { tpm } => build_cartesian(tpm, space),
            CouplingSpec::CondIndep { marginals } => build_cond_indep(marginals, space),
            CouplingSpec::MixtureWeight { marginals, weights } => {
                build_mixture_weight(marginals, weights, space)
            }
            CouplingSpec::IndependentChains { tpms } => {
                if tpms.len() != space.num_chains()
                    || tpms.iter().any(|t| t.dim() != space.states_per_chain())
                {
                    return Err(ChmmError::Shape(format!(
                        "independent chains need {} matrices of size {n}×{n}",
                        space.num_chains(),
                        n = space.states_per_chain()
                    )));
                }
                build_independent(tpms)
            }
            CouplingSpec::SingleChain { tpm } => build_single_chain(tpm, space),
        }
    }

    /// Randomized starting values as used by the fitting restarts.
    pub fn random<R: Rng + ?Sized>(kind: CouplingKind, space: &StateSpace, rng: &mut R) -> Self {
        let (mc, n, k) = (
            space.num_chains(),
            space.states_per_chain(),
            space.product_dim(),
        );
        match kind {
            CouplingKind::CartesianFull => CouplingSpec::CartesianFull {
                tpm: random_tpm(rng, k),
            },
            CouplingKind::SingleChain => CouplingSpec::SingleChain {
                tpm: random_tpm(rng, n),
            },
            CouplingKind::IndependentChains => CouplingSpec::IndependentChains {
                tpms: (0..mc).map(|_| random_tpm(rng, n)).collect(),
            },
            CouplingKind::CondIndep => CouplingSpec::CondIndep {
                marginals: StateVectorMarginals {
                    probs: (0..mc)
                        .map(|m| {
                            (0..k)
                                .map(|i| random_row(rng, n, space.component(i, m)))
                                .collect()
                        })
                        .collect(),
                },
            },
            CouplingKind::MixtureWeight => CouplingSpec::MixtureWeight {
                marginals: PairwiseMarginals {
                    tpms: (0..mc)
                        .map(|_| (0..mc).map(|_| random_tpm(rng, n)).collect())
                        .collect(),
                },
                weights: MixtureWeights {
                    w: (0..mc).map(|m| random_row(rng, mc, m)).collect(),
                },
            },
        }
    }

    pub fn num_working(&self, space: &StateSpace) -> usize {
        count_parameters(self.kind(), space)
    }

    /// Unconstrained parameters: row logits with the "stay" outcome as reference.
    pub fn to_working(&self, space: &StateSpace) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_working(space));
        match self {
            CouplingSpec::CartesianFull { tpm } | CouplingSpec::SingleChain { tpm } => {
                out.extend(crate::tpm::tpm_to_working(tpm))
            }
            CouplingSpec::IndependentChains { tpms } => {
                for t in tpms {
                    out.extend(crate::tpm::tpm_to_working(t));
                }
            }
            CouplingSpec::CondIndep { marginals } => {
                for (m, pm) in marginals.probs.iter().enumerate() {
                    for (i, row) in pm.iter().enumerate() {
                        out.extend(logit_row(row, space.component(i, m)));
                    }
                }
            }
            CouplingSpec::MixtureWeight { marginals, weights } => {
                for row in &marginals.tpms {
                    for t in row {
                        out.extend(crate::tpm::tpm_to_working(t));
                    }
                }
                for (m, w) in weights.w.iter().enumerate() {
                    out.extend(logit_row(w, m));
                }
            }
        }
        out
    }

    pub fn from_working(kind: CouplingKind, space: &StateSpace, values: &[f64]) -> Result<Self> {
        let expected = count_parameters(kind, space);
        if values.len() != expected {
            return Err(ChmmError::Shape(format!(
                "{kind} coupling needs {expected} working values, got {}",
                values.len()
            )));
        }
        let (mc, n, k) = (
            space.num_chains(),
            space.states_per_chain(),
            space.product_dim(),
        );
        let per_tpm = n * (n - 1);
        Ok(match kind {
            CouplingKind::CartesianFull => CouplingSpec::CartesianFull {
                tpm: crate::tpm::working_to_tpm(values, k)?,
            },
            CouplingKind::SingleChain => CouplingSpec::SingleChain {
                tpm: crate::tpm::working_to_tpm(values, n)?,
            },
            CouplingKind::IndependentChains => CouplingSpec::IndependentChains {
                tpms: (0..mc)
                    .map(|m| crate::tpm::working_to_tpm(&values[m * per_tpm..(m + 1) * per_tpm], n))
                    .collect::<Result<_>>()?,
            },
            CouplingKind::CondIndep => {
                let w = n - 1;
                let probs = (0..mc)
                    .map(|m| {
                        (0..k)
                            .map(|i| {
                                let off = (m * k + i) * w;
                                softmax_row(&values[off..off + w], space.component(i, m))
                            })
                            .collect()
                    })
                    .collect();
                CouplingSpec::CondIndep {
                    marginals: StateVectorMarginals { probs },
                }
            }
            CouplingKind::MixtureWeight => {
                let (tpm_part, w_part) = values.split_at(mc * mc * per_tpm);
                let mut tpms = Vec::with_capacity(mc);
                for m in 0..mc {
                    let mut row = Vec::with_capacity(mc);
                    for src in 0..mc {
                        let off = (m * mc + src) * per_tpm;
                        row.push(crate::tpm::working_to_tpm(&tpm_part[off..off + per_tpm], n)?);
                    }
                    tpms.push(row);
                }
                let w = (0..mc)
                    .map(|m| softmax_row(&w_part[m * (mc - 1)..(m + 1) * (mc - 1)], m))
                    .collect();
                CouplingSpec::MixtureWeight {
                    marginals: PairwiseMarginals { tpms },
                    weights: MixtureWeights { w },
                }
            }
        })
    }

    /// Maps `∂ℓ/∂Γ` (row-major over the latent space) to the gradient with
    /// respect to [`CouplingSpec::to_working`] values.
    pub fn working_gradient(&self, space: &StateSpace, d_gamma: &[f64]) -> Vec<f64> {
        let (mc, n, k) = (
            space.num_chains(),
            space.states_per_chain(),
            space.product_dim(),
        );
        let mut out = Vec::with_capacity(self.num_working(space));
        match self {
            CouplingSpec::CartesianFull { tpm } | CouplingSpec::SingleChain { tpm } => {
                let d = tpm.dim();
                for i in 0..d {
                    out.extend(softmax_grad(tpm.row(i), &d_gamma[i * d..(i + 1) * d], i));
                }
            }
            CouplingSpec::IndependentChains { tpms } => {
                let comps = space.component_table();
                for m in 0..mc {
                    let mut h = vec![0.0; n * n];
                    for i in 0..k {
                        for j in 0..k {
                            let g = d_gamma[i * k + j];
                            if g == 0.0 {
                                continue;
                            }
                            let others: f64 = (0..mc)
                                .filter(|&o| o != m)
                                .map(|o| tpms[o].get(comps[i][o], comps[j][o]))
                                .product();
                            h[comps[i][m] * n + comps[j][m]] += g * others;
                        }
                    }
                    for a in 0..n {
                        out.extend(softmax_grad(tpms[m].row(a), &h[a * n..(a + 1) * n], a));
                    }
                }
            }
            CouplingSpec::CondIndep { marginals } => {
                let h = marginal_gradient(space, d_gamma, |m, i, b| marginals.get(m, i, b));
                for m in 0..mc {
                    for i in 0..k {
                        out.extend(softmax_grad(
                            &marginals.probs[m][i],
                            &h[m][i * n..(i + 1) * n],
                            space.component(i, m),
                        ));
                    }
                }
            }
            CouplingSpec::MixtureWeight { marginals, weights } => {
                let p = mixture_marginals(marginals, weights, space);
                let h = marginal_gradient(space, d_gamma, |m, i, b| p[m][i * n + b]);
                let mut dw = vec![vec![0.0; mc]; mc];
                for m in 0..mc {
                    for src in 0..mc {
                        let a_mat = marginals.get(m, src);
                        let w = weights.get(m, src);
                        let mut da = vec![0.0; n * n];
                        for i in 0..k {
                            let a = space.component(i, src);
                            for b in 0..n {
                                let hb = h[m][i * n + b];
                                da[a * n + b] += hb * w;
                                dw[m][src] += hb * a_mat.get(a, b);
                            }
                        }
                        for a in 0..n {
                            out.extend(softmax_grad(a_mat.row(a), &da[a * n..(a + 1) * n], a));
                        }
                    }
                }
                for m in 0..mc {
                    out.extend(softmax_grad(&weights.w[m], &dw[m], m));
                }
            }
        }
        out
    }

    /// Relabels the states of chain `m`: old state `s` becomes `perm[s]`.
    pub fn permute_chain(&self, space: &StateSpace, m: usize, perm: &[usize]) -> Self {
        let product_perm = |i: usize| {
            let mut c = space.components(i);
            c[m] = perm[c[m]];
            space.index_of(&c)
        };
        match self {
            CouplingSpec::CartesianFull { tpm } => {
                let pi: Vec<usize> = (0..space.product_dim()).map(product_perm).collect();
                CouplingSpec::CartesianFull {
                    tpm: tpm.permuted(&pi),
                }
            }
            CouplingSpec::SingleChain { tpm } => CouplingSpec::SingleChain {
                tpm: tpm.permuted(perm),
            },
            CouplingSpec::IndependentChains { tpms } => {
                let mut tpms = tpms.clone();
                tpms[m] = tpms[m].permuted(perm);
                CouplingSpec::IndependentChains { tpms }
            }
            CouplingSpec::CondIndep { marginals } => {
                let mut probs = marginals.probs.clone();
                for (mm, pm) in marginals.probs.iter().enumerate() {
                    for (i, row) in pm.iter().enumerate() {
                        let target = &mut probs[mm][product_perm(i)];
                        for (b, &p) in row.iter().enumerate() {
                            let nb = if mm == m { perm[b] } else { b };
                            target[nb] = p;
                        }
                    }
                }
                CouplingSpec::CondIndep {
                    marginals: StateVectorMarginals { probs },
                }
            }
            CouplingSpec::MixtureWeight { marginals, weights } => {
                let n = space.states_per_chain();
                let tpms = marginals
                    .tpms
                    .iter()
                    .enumerate()
                    .map(|(dst, row)| {
                        row.iter()
                            .enumerate()
                            .map(|(src, t)| {
                                let mut e = vec![0.0; n * n];
                                for a in 0..n {
                                    for b in 0..n {
                                        let na = if src == m { perm[a] } else { a };
                                        let nb = if dst == m { perm[b] } else { b };
                                        e[na * n + nb] = t.get(a, b);
                                    }
                                }
                                TransitionMatrix::from_stochastic_unchecked(n, e)
                            })
                            .collect()
                    })
                    .collect();
                CouplingSpec::MixtureWeight {
                    marginals: PairwiseMarginals { tpms },
                    weights: weights.clone(),
                }
            }
        }
    }

    /// Flattened natural parameters with labels (1-based), for reporting.
    pub fn natural_parameters(&self, space: &StateSpace) -> Vec<(String, f64)> {
        let label = |i: usize| -> String {
            let c: Vec<String> = space
                .components(i)
                .iter()
                .map(|s| (s + 1).to_string())
                .collect();
            format!("({})", c.join(","))
        };
        let mut out = Vec::new();
        match self {
            CouplingSpec::CartesianFull { tpm } => {
                for i in 0..tpm.dim() {
                    for j in 0..tpm.dim() {
                        out.push((format!("gamma[{}->{}]", label(i), label(j)), tpm.get(i, j)));
                    }
                }
            }
            CouplingSpec::SingleChain { tpm } => {
                for i in 0..tpm.dim() {
                    for j in 0..tpm.dim() {
                        out.push((format!("gamma[{}->{}]", i + 1, j + 1), tpm.get(i, j)));
                    }
                }
            }
            CouplingSpec::IndependentChains { tpms } => {
                for (m, t) in tpms.iter().enumerate() {
                    for i in 0..t.dim() {
                        for j in 0..t.dim() {
                            out.push((
                                format!("gamma{}[{}->{}]", m + 1, i + 1, j + 1),
                                t.get(i, j),
                            ));
                        }
                    }
                }
            }
            CouplingSpec::CondIndep { marginals } => {
                for (m, pm) in marginals.probs.iter().enumerate() {
                    for (i, row) in pm.iter().enumerate() {
                        for (j, &p) in row.iter().enumerate() {
                            out.push((format!("p{}[{}->{}]", m + 1, label(i), j + 1), p));
                        }
                    }
                }
            }
            CouplingSpec::MixtureWeight { marginals, weights } => {
                for (m, row) in marginals.tpms.iter().enumerate() {
                    for (src, t) in row.iter().enumerate() {
                        for i in 0..t.dim() {
                            for j in 0..t.dim() {
                                out.push((
                                    format!("p{}|{}[{}->{}]", m + 1, src + 1, i + 1, j + 1),
                                    t.get(i, j),
                                ));
                            }
                        }
                    }
                }
                for (m, w) in weights.w.iter().enumerate() {
                    for (src, &x) in w.iter().enumerate() {
                        out.push((format!("w{}[{}]", m + 1, src + 1), x));
                    }
                }
            }
        }
        out
    }

    /// Smallest cross-chain mixture weight, if this is a mixture-weight model.
    pub fn min_cross_weight(&self) -> Option<f64> {
        match self {
            CouplingSpec::MixtureWeight { weights, .. } => weights
                .w
                .iter()
                .enumerate()
                .flat_map(|(m, r)| r.iter().enumerate().filter(move |(n, _)| *n != m))
                .map(|(_, &x)| x)
                .reduce(f64::min),
            _ => None,
        }
    }
}

/// `H_m[i·N + b] = ∂ℓ/∂Pr(S_t^(m) = b | S_{t−1} = i)` for a product of marginals.
fn marginal_gradient(
    space: &StateSpace,
    d_gamma: &[f64],
    marginal: impl Fn(usize, usize, usize) -> f64,
) -> Vec<Vec<f64>> {
    let (mc, n, k) = (
        space.num_chains(),
        space.states_per_chain(),
        space.product_dim(),
    );
    let comps = space.component_table();
    let mut h = vec![vec![0.0; k * n]; mc];
    for i in 0..k {
        let row: Vec<Vec<f64>> = (0..mc)
            .map(|m| (0..n).map(|b| marginal(m, i, b)).collect())
            .collect();
        for j in 0..k {
            let g = d_gamma[i * k + j];
            if g == 0.0 {
                continue;
            }
            for m in 0..mc {
                let others: f64 = (0..mc)
                    .filter(|&o| o != m)
                    .map(|o| row[o][comps[j][o]])
                    .product();
                h[m][i * n + comps[j][m]] += g * others;
            }
        }
    }
    h
}

/// Gradient of a softmax row with respect to its non-reference logits.
fn softmax_grad(p: &[f64], h: &[f64], reference: usize) -> Vec<f64> {
    let mean: f64 = p.iter().zip(h).map(|(p, h)| p * h).sum();
    p.iter()
        .zip(h)
        .enumerate()
        .filter(|(j, _)| *j != reference)
        .map(|(_, (p, h))| p * (h - mean))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn space(m: usize, n: usize) -> StateSpace {
        StateSpace::new(m, n).unwrap()
    }

    fn assert_stochastic(t: &TransitionMatrix) {
        assert!(t.entries().iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert!(t.max_row_sum_error() <= 1e-12, "{}", t.max_row_sum_error());
    }

    #[test]
    fn parameter_counts_for_three_chains_three_states() {
        let s = space(3, 3);
        assert_eq!(count_parameters(CouplingKind::CartesianFull, &s), 702);
        assert_eq!(count_parameters(CouplingKind::CondIndep, &s), 162);
        assert_eq!(count_parameters(CouplingKind::MixtureWeight, &s), 60);
        assert_eq!(count_parameters(CouplingKind::IndependentChains, &s), 18);
        assert_eq!(count_parameters(CouplingKind::SingleChain, &s), 6);
    }

    #[test]
    fn cartesian_is_pass_through() {
        let s = space(2, 2);
        let id = TransitionMatrix::identity(4);
        assert_eq!(build_cartesian(&id, &s).unwrap(), id);
        assert!(build_cartesian(&TransitionMatrix::identity(3), &s).is_err());
    }

    #[test]
    fn independent_identity_and_entry() {
        let id = TransitionMatrix::identity(2);
        assert_eq!(
            build_independent(&[id.clone(), id]).unwrap(),
            TransitionMatrix::identity(4)
        );
        let a = TransitionMatrix::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        let b = TransitionMatrix::from_rows(&[vec![0.7, 0.3], vec![0.4, 0.6]]).unwrap();
        let g = build_independent(&[a, b]).unwrap();
        assert!((g.get(0, 0) - 0.63).abs() < 1e-15);
    }

    #[test]
    fn independent_stationary_is_outer_product() {
        let a = TransitionMatrix::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        let b = TransitionMatrix::from_rows(&[vec![0.7, 0.3], vec![0.4, 0.6]]).unwrap();
        let da = crate::tpm::stationary_distribution(&a).unwrap();
        let db = crate::tpm::stationary_distribution(&b).unwrap();
        let d = crate::tpm::stationary_distribution(&build_independent(&[a, b]).unwrap()).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((d.probs()[i * 2 + j] - da.probs()[i] * db.probs()[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cond_indep_collapses_to_independent() {
        let s = space(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let CouplingSpec::IndependentChains { tpms } =
            CouplingSpec::random(CouplingKind::IndependentChains, &s, &mut rng)
        else {
            unreachable!()
        };
        let probs = (0..2)
            .map(|m| {
                (0..9)
                    .map(|i| tpms[m].row(s.component(i, m)).to_vec())
                    .collect()
            })
            .collect();
        let marg = StateVectorMarginals::new(probs, &s).unwrap();
        let a = build_cond_indep(&marg, &s).unwrap();
        let b = build_independent(&tpms).unwrap();
        for (x, y) in a.entries().iter().zip(b.entries()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn mixture_with_self_weights_is_independent() {
        let s = space(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let CouplingSpec::MixtureWeight { marginals, .. } =
            CouplingSpec::random(CouplingKind::MixtureWeight, &s, &mut rng)
        else {
            unreachable!()
        };
        let g = build_mixture_weight(&marginals, &MixtureWeights::independent(3), &s).unwrap();
        let own: Vec<_> = (0..3).map(|m| marginals.get(m, m).clone()).collect();
        let ind = build_independent(&own).unwrap();
        for (x, y) in g.entries().iter().zip(ind.entries()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn mixture_of_identical_components() {
        let s = space(2, 2);
        let t = TransitionMatrix::from_rows(&[vec![0.8, 0.2], vec![0.3, 0.7]]).unwrap();
        let marg = PairwiseMarginals::new(vec![vec![t.clone(); 2]; 2], &s).unwrap();
        let w = MixtureWeights::new(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let p = mixture_marginals(&marg, &w, &s);
        // Chain 1's law depends only on its own previous state.
        for i in 0..4 {
            for b in 0..2 {
                assert!((p[0][i * 2 + b] - t.get(s.component(i, 0), b) * 0.5
                    - t.get(s.component(i, 1), b) * 0.5)
                    .abs()
                    < 1e-15);
            }
        }
        // When the sources agree the mixture reduces to the common matrix.
        for a in 0..2 {
            let i = s.index_of(&[a, a]);
            for b in 0..2 {
                assert!((p[0][i * 2 + b] - t.get(a, b)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_chain_shape() {
        let s = space(2, 2);
        let id = TransitionMatrix::identity(2);
        assert_eq!(build_single_chain(&id, &s).unwrap().dim(), 2);
        assert!(build_single_chain(&TransitionMatrix::identity(4), &s).is_err());
    }

    #[test]
    fn working_dimension_matches_count_and_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (m, n) in [(1, 2), (2, 2), (2, 3), (3, 2), (3, 3)] {
            let s = space(m, n);
            for kind in CouplingKind::ALL {
                let spec = CouplingSpec::random(kind, &s, &mut rng);
                let w = spec.to_working(&s);
                assert_eq!(w.len(), count_parameters(kind, &s), "{kind} {m} {n}");
                let back = CouplingSpec::from_working(kind, &s, &w).unwrap();
                let (g1, g2) = (spec.build(&s).unwrap(), back.build(&s).unwrap());
                for (x, y) in g1.entries().iter().zip(g2.entries()) {
                    assert!((x - y).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn working_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for (m, n) in [(2, 2), (2, 3), (3, 2)] {
            let s = space(m, n);
            for kind in CouplingKind::ALL {
                let spec = CouplingSpec::random(kind, &s, &mut rng);
                let dim = spec.build(&s).unwrap().dim();
                // Linear functional ℓ(Γ) = Σ c_ij Γ_ij, so ∂ℓ/∂Γ = c.
                let c: Vec<f64> = (0..dim * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let f = |w: &[f64]| {
                    let g = CouplingSpec::from_working(kind, &s, w)
                        .unwrap()
                        .build(&s)
                        .unwrap();
                    g.entries().iter().zip(&c).map(|(a, b)| a * b).sum::<f64>()
                };
                let w0 = spec.to_working(&s);
                let grad = spec.working_gradient(&s, &c);
                for p in 0..w0.len() {
                    let h = 1e-6;
                    let (mut up, mut dn) = (w0.clone(), w0.clone());
                    up[p] += h;
                    dn[p] -= h;
                    let fd = (f(&up) - f(&dn)) / (2.0 * h);
                    assert!(
                        (fd - grad[p]).abs() < 1e-7,
                        "{kind} ({m},{n}) param {p}: fd {fd} vs {}",
                        grad[p]
                    );
                }
            }
        }
    }

    #[test]
    fn permutation_relabels_consistently() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = space(2, 3);
        let perm = [2, 0, 1];
        for kind in CouplingKind::ALL {
            let spec = CouplingSpec::random(kind, &s, &mut rng);
            let g = spec.build(&s).unwrap();
            let permuted = spec.permute_chain(&s, 1, &perm).build(&s).unwrap();
            let latent = kind.latent_space(&s);
            let map = |i: usize| {
                if kind == CouplingKind::SingleChain {
                    perm[i]
                } else {
                    let mut c = s.components(i);
                    c[1] = perm[c[1]];
                    s.index_of(&c)
                }
            };
            for i in 0..latent.product_dim() {
                for j in 0..latent.product_dim() {
                    assert!((g.get(i, j) - permuted.get(map(i), map(j))).abs() < 1e-15);
                }
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]
            #[test]
            fn every_builder_is_row_stochastic(seed in any::<u64>(), m in 1usize..=3, n in 1usize..=3, k in 0usize..5) {
                let s = StateSpace::new(m, n).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let spec = CouplingSpec::random(CouplingKind::ALL[k], &s, &mut rng);
                assert_stochastic(&spec.build(&s).unwrap());
            }
        }
    }
}
