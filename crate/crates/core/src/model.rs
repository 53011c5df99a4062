//! Complete model descriptions: structure ([`ModelSpec`]) and a fully
//! parameterized [`Model`], plus the working-parameter layout used by the optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coupling::{count_parameters, CouplingKind, CouplingSpec};
use crate::emissions::{
    ChainEmissions, CovariateScaling, EmissionFamily, EmissionSpec, ObservationSet, StateMap,
};
use crate::error::{ChmmError, Result};
use crate::state_space::StateSpace;
use crate::tpm::{stationary_distribution, StationaryDistribution, TransitionMatrix};

/// Structure of a model without parameter values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub space: StateSpace,
    pub coupling: CouplingKind,
    pub families: Vec<EmissionFamily>,
    /// Covariates per stream; must be zero unless the family is a regression.
    pub num_covariates: Vec<usize>,
}

impl ModelSpec {
    /// All streams share one family and no stream has covariates.
    pub fn uniform(
        num_chains: usize,
        states_per_chain: usize,
        coupling: CouplingKind,
        family: EmissionFamily,
    ) -> Result<Self> {
        let spec = Self {
            space: StateSpace::new(num_chains, states_per_chain)?,
            coupling,
            families: vec![family; num_chains],
            num_covariates: vec![0; num_chains],
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.space.num_chains();
        if self.families.len() != m || self.num_covariates.len() != m {
            return Err(ChmmError::Shape(format!(
                "need one emission family and covariate count per chain ({m})"
            )));
        }
        for (i, (f, &p)) in self.families.iter().zip(&self.num_covariates).enumerate() {
            match (f, p) {
                (EmissionFamily::NormalRegression, 0) => {
                    return Err(ChmmError::InvalidParameter(format!(
                        "chain {} is a regression without covariates",
                        i + 1
                    )))
                }
                (EmissionFamily::Normal | EmissionFamily::Beta, p) if p > 0 => {
                    return Err(ChmmError::InvalidParameter(format!(
                        "chain {} has covariates but family {f}",
                        i + 1
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn latent_space(&self) -> StateSpace {
        self.coupling.latent_space(&self.space)
    }

    pub fn num_transition_parameters(&self) -> usize {
        count_parameters(self.coupling, &self.space)
    }

    pub fn num_emission_parameters(&self) -> usize {
        let n = self.space.states_per_chain();
        self.families
            .iter()
            .zip(&self.num_covariates)
            .map(|(f, p)| match f {
                EmissionFamily::NormalRegression => n * (p + 2),
                _ => n * 2,
            })
            .sum()
    }

    /// Free parameters, as used by the AIC.
    pub fn num_parameters(&self) -> usize {
        self.num_transition_parameters() + self.num_emission_parameters()
    }

    pub fn with_coupling(&self, coupling: CouplingKind) -> Self {
        Self {
            coupling,
            ..self.clone()
        }
    }

    /// Checks that `data` fits this structure.
    pub fn check_data(&self, data: &ObservationSet) -> Result<()> {
        if data.num_streams() != self.space.num_chains() {
            return Err(ChmmError::Shape(format!(
                "model has {} streams, data has {}",
                self.space.num_chains(),
                data.num_streams()
            )));
        }
        for (m, (f, &p)) in self.families.iter().zip(&self.num_covariates).enumerate() {
            match (data.covariates(m), p) {
                (None, 0) => {}
                (Some(c), p) if c.num() == p && p > 0 => {}
                (c, _) => {
                    return Err(ChmmError::Data(format!(
                        "stream {} expects {p} covariates, data provides {}",
                        m + 1,
                        c.map_or(0, |c| c.num())
                    )))
                }
            }
            if *f == EmissionFamily::Beta {
                if let Some(t) = (0..data.len())
                    .find(|&t| data.value(t, m).is_some_and(|v| !(v > 0.0 && v < 1.0)))
                {
                    return Err(ChmmError::Data(format!(
                        "beta stream {} has value {} at row {t} outside (0, 1); shift zeros first",
                        m + 1,
                        data.value(t, m).unwrap()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Random starting model for the fitting restarts. `jitter = false`
    /// gives the deterministic quantile start for the emissions.
    pub fn initial_model<R: Rng + ?Sized>(
        &self,
        data: &ObservationSet,
        rng: &mut R,
        jitter: bool,
    ) -> Result<Model> {
        let coupling = CouplingSpec::random(self.coupling, &self.space, rng);
        let streams = (0..self.space.num_chains())
            .map(|m| {
                let scaling = match data.covariates(m) {
                    Some(c) if self.num_covariates[m] > 0 => CovariateScaling::standardizing(c),
                    _ => CovariateScaling::default(),
                };
                ChainEmissions::initial(
                    self.families[m],
                    self.space.states_per_chain(),
                    &data.stream_values(m),
                    self.num_covariates[m],
                    scaling,
                    if jitter { Some(&mut *rng) } else { None },
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Model::new(self.space, coupling, EmissionSpec::new(streams)?)
    }
}

/// Named segment of the working-parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

/// Unconstrained parameter vector with its segment layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkingParameters {
    pub values: Vec<f64>,
    pub layout: Vec<Segment>,
}

/// A fully parameterized (coupled) state-switching model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    space: StateSpace,
    coupling: CouplingSpec,
    emissions: EmissionSpec,
}

impl Model {
    pub fn new(space: StateSpace, coupling: CouplingSpec, emissions: EmissionSpec) -> Result<Self> {
        let model = Self {
            space,
            coupling,
            emissions,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.emissions.num_streams() != self.space.num_chains() {
            return Err(ChmmError::Shape(format!(
                "{} chains but {} emission streams",
                self.space.num_chains(),
                self.emissions.num_streams()
            )));
        }
        if self.emissions.num_states() != self.space.states_per_chain() {
            return Err(ChmmError::Shape(format!(
                "{} states per chain but emissions have {}",
                self.space.states_per_chain(),
                self.emissions.num_states()
            )));
        }
        for s in self.emissions.streams() {
            s.validate()?;
        }
        self.coupling.build(&self.space)?;
        Ok(())
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn coupling(&self) -> &CouplingSpec {
        &self.coupling
    }

    pub fn emissions(&self) -> &EmissionSpec {
        &self.emissions
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            space: self.space,
            coupling: self.coupling.kind(),
            families: self.emissions.streams().iter().map(|e| e.family()).collect(),
            num_covariates: self
                .emissions
                .streams()
                .iter()
                .map(|e| e.num_covariates())
                .collect(),
        }
    }

    pub fn latent_space(&self) -> StateSpace {
        self.coupling.kind().latent_space(&self.space)
    }

    pub fn state_map(&self) -> StateMap {
        match self.coupling.kind() {
            CouplingKind::SingleChain => {
                StateMap::shared(self.space.states_per_chain(), self.space.num_chains())
            }
            _ => StateMap::product(&self.space),
        }
    }

    /// Transition matrix over the latent space.
    pub fn tpm(&self) -> TransitionMatrix {
        self.coupling
            .build(&self.space)
            .expect("validated at construction")
    }

    pub fn stationary(&self) -> Result<StationaryDistribution> {
        stationary_distribution(&self.tpm())
    }

    /// Per-chain states (0-based) of each latent state, `[k][m]`.
    pub fn chain_states(&self, k: usize) -> Vec<usize> {
        let map = self.state_map();
        (0..self.space.num_chains())
            .map(|m| map.state_of(k, m))
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.spec().num_parameters()
    }

    pub fn to_working(&self) -> WorkingParameters {
        let mut values = self.coupling.to_working(&self.space);
        let mut layout = vec![Segment {
            name: format!("transition:{}", self.coupling.kind()),
            start: 0,
            len: values.len(),
        }];
        for (m, e) in self.emissions.streams().iter().enumerate() {
            let w = e.to_working();
            layout.push(Segment {
                name: format!("emission:{}:{}", m + 1, e.family()),
                start: values.len(),
                len: w.len(),
            });
            values.extend(w);
        }
        WorkingParameters { values, layout }
    }

    /// Model with this structure (and covariate scaling) but parameters `values`.
    pub fn with_working(&self, values: &[f64]) -> Result<Self> {
        let nt = self.coupling.num_working(&self.space);
        if values.len() != nt + self.emissions.num_working() {
            return Err(ChmmError::Shape(format!(
                "model needs {} working values, got {}",
                nt + self.emissions.num_working(),
                values.len()
            )));
        }
        let coupling = CouplingSpec::from_working(self.coupling.kind(), &self.space, &values[..nt])?;
        let emissions = self.emissions.with_working(&values[nt..])?;
        Ok(Self {
            space: self.space,
            coupling,
            emissions,
        })
    }

    /// Relabels states so that each chain's states have ascending means.
    /// Single-chain models are ordered by the first stream.
    pub fn ordered(&self) -> Self {
        let n = self.space.states_per_chain();
        let perm_for = |m: usize| -> Vec<usize> {
            let e = self.emissions.stream(m);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| e.state_mean(a).total_cmp(&e.state_mean(b)));
            let mut perm = vec![0; n];
            for (new, &old) in idx.iter().enumerate() {
                perm[old] = new;
            }
            perm
        };
        let mut out = self.clone();
        if self.coupling.kind() == CouplingKind::SingleChain {
            let perm = perm_for(0);
            out.coupling = out.coupling.permute_chain(&self.space, 0, &perm);
            for m in 0..self.space.num_chains() {
                out.emissions = out
                    .emissions
                    .with_stream(m, out.emissions.stream(m).permuted(&perm));
            }
        } else {
            for m in 0..self.space.num_chains() {
                let perm = perm_for(m);
                out.coupling = out.coupling.permute_chain(&self.space, m, &perm);
                out.emissions = out
                    .emissions
                    .with_stream(m, out.emissions.stream(m).permuted(&perm));
            }
        }
        out
    }

    /// Relabels chain `m` with an explicit permutation (old `s` → `perm[s]`).
    pub fn permute_chain(&self, m: usize, perm: &[usize]) -> Self {
        let mut out = self.clone();
        out.coupling = self.coupling.permute_chain(&self.space, m, perm);
        if self.coupling.kind() == CouplingKind::SingleChain {
            for mm in 0..self.space.num_chains() {
                out.emissions = out
                    .emissions
                    .with_stream(mm, out.emissions.stream(mm).permuted(perm));
            }
        } else {
            out.emissions = out
                .emissions
                .with_stream(m, self.emissions.stream(m).permuted(perm));
        }
        out
    }

    /// Labelled natural parameters: transition block, then emissions.
    pub fn natural_parameters(&self) -> Vec<(String, f64)> {
        let mut out = self.coupling.natural_parameters(&self.space);
        out.extend(self.emissions.natural_parameters());
        out
    }

    /// Marginal stationary probability of each chain's states, `[m][s]`.
    pub fn chain_marginal_stationary(&self) -> Result<Vec<Vec<f64>>> {
        let delta = self.stationary()?;
        let map = self.state_map();
        let mut out = vec![vec![0.0; self.space.states_per_chain()]; self.space.num_chains()];
        for (k, &p) in delta.probs().iter().enumerate() {
            for (m, row) in out.iter_mut().enumerate() {
                row[map.state_of(k, m)] += p;
            }
        }
        Ok(out)
    }
}
