//! Product state spaces of coupled chains.
//!
//! A product state is a vector `(s1, ..., sM)` of per-chain states. Internally
//! states are 0-based; the public `encode`/`decode` pair works with the 1-based
//! labels used in reports and files. Chain 1 is the most significant digit, so
//! for two binary chains the order is (1,1), (1,2), (2,1), (2,2).

use serde::{Deserialize, Serialize};

use crate::error::{ChmmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawStateSpace", into = "RawStateSpace")]
pub struct StateSpace {
    num_chains: usize,
    states_per_chain: usize,
    product_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct RawStateSpace {
    num_chains: usize,
    states_per_chain: usize,
}

impl TryFrom<RawStateSpace> for StateSpace {
    type Error = ChmmError;
    fn try_from(raw: RawStateSpace) -> Result<Self> {
        StateSpace::new(raw.num_chains, raw.states_per_chain)
    }
}

impl From<StateSpace> for RawStateSpace {
    fn from(s: StateSpace) -> Self {
        RawStateSpace {
            num_chains: s.num_chains,
            states_per_chain: s.states_per_chain,
        }
    }
}

impl StateSpace {
    pub fn new(num_chains: usize, states_per_chain: usize) -> Result<Self> {
        if num_chains == 0 || states_per_chain == 0 {
            return Err(ChmmError::Domain(format!(
                "state space needs at least one chain and one state (got M={num_chains}, N={states_per_chain})"
            )));
        }
        let product_dim = u32::try_from(num_chains)
            .ok()
            .and_then(|m| states_per_chain.checked_pow(m))
            .ok_or_else(|| {
                ChmmError::Domain(format!(
                    "product state space N^M overflows for N={states_per_chain}, M={num_chains}"
                ))
            })?;
        Ok(Self {
            num_chains,
            states_per_chain,
            product_dim,
        })
    }

    pub fn num_chains(&self) -> usize {
        self.num_chains
    }

    pub fn states_per_chain(&self) -> usize {
        self.states_per_chain
    }

    pub fn product_dim(&self) -> usize {
        self.product_dim
    }

    /// Encodes 1-based chain states into a 0-based product index.
    pub fn encode(&self, chain_states: &[usize]) -> Result<usize> {
        if chain_states.len() != self.num_chains {
            return Err(ChmmError::Shape(format!(
                "expected {} chain states, got {}",
                self.num_chains,
                chain_states.len()
            )));
        }
        let mut index = 0;
        for (m, &s) in chain_states.iter().enumerate() {
            if s < 1 || s > self.states_per_chain {
                return Err(ChmmError::Domain(format!(
                    "state {s} of chain {} outside 1..={}",
                    m + 1,
                    self.states_per_chain
                )));
            }
            index = index * self.states_per_chain + (s - 1);
        }
        Ok(index)
    }

    /// Decodes a 0-based product index into 1-based chain states.
    pub fn decode(&self, index: usize) -> Result<Vec<usize>> {
        if index >= self.product_dim {
            return Err(ChmmError::Domain(format!(
                "product index {index} outside 0..{}",
                self.product_dim
            )));
        }
        Ok(self.components(index).into_iter().map(|s| s + 1).collect())
    }

    /// 0-based chain states of a product index (no bounds check beyond debug).
    pub fn components(&self, index: usize) -> Vec<usize> {
        debug_assert!(index < self.product_dim);
        let mut out = vec![0; self.num_chains];
        let mut rest = index;
        for slot in out.iter_mut().rev() {
            *slot = rest % self.states_per_chain;
            rest /= self.states_per_chain;
        }
        out
    }

    /// 0-based state of chain `m` within product index `index`.
    pub fn component(&self, index: usize, m: usize) -> usize {
        let stride = self
            .states_per_chain
            .pow((self.num_chains - 1 - m) as u32);
        (index / stride) % self.states_per_chain
    }

    /// Product index from 0-based chain states.
    pub fn index_of(&self, components: &[usize]) -> usize {
        components
            .iter()
            .fold(0, |acc, &s| acc * self.states_per_chain + s)
    }

    /// Table `[k][m]` of 0-based chain states for every product index.
    pub fn component_table(&self) -> Vec<Vec<usize>> {
        (0..self.product_dim).map(|k| self.components(k)).collect()
    }
}

/// Encodes 1-based `chain_states` in `space`.
pub fn encode_product_state(chain_states: &[usize], space: &StateSpace) -> Result<usize> {
    space.encode(chain_states)
}
