//! Named stochastic nodes and the observation map.
//!
//! A model is a function that creates a [`BayesianNet`] from an observation
//! map and registers its stochastic nodes with [`BayesianNet::add_node`].
//! Nodes named in the map take the injected value; the rest are sampled.
//! Calling the same function with another map reuses the model.

use std::collections::BTreeMap;

use indexmap::IndexMap;

use crate::distributions::Distribution;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{broadcast_shapes, Tensor};

/// Name → observed tensor.
pub type Observed = BTreeMap<String, Tensor>;

#[derive(Debug, Clone)]
pub struct StochasticNode {
    pub name: String,
    pub dist: Distribution,
    pub is_observed: bool,
    pub value: Tensor,
    pub n_samples: Option<usize>,
}

impl StochasticNode {
    pub fn log_prob(&self) -> Result<Tensor> {
        self.dist.log_prob(&self.value)
    }
}

#[derive(Debug, Clone, Default)]
pub struct BayesianNet {
    nodes: IndexMap<String, StochasticNode>,
    observed: Observed,
}

/// Per-name answer of [`BayesianNet::query`].
#[derive(Debug, Clone)]
pub struct QueryResult {
    pub output: Option<Tensor>,
    pub local_log_prob: Option<Tensor>,
}

impl BayesianNet {
    pub fn new(observed: Observed) -> Self {
        Self { nodes: IndexMap::new(), observed }
    }

    /// Registers `name`. Returns the injected observation when the map holds
    /// one, otherwise a fresh draw (pathwise for reparameterizable families).
    pub fn add_node(
        &mut self,
        name: &str,
        dist: Distribution,
        rng: &mut RngState,
        n_samples: Option<usize>,
    ) -> Result<Tensor> {
        if self.nodes.contains_key(name) {
            return Err(Error::Registration(name.to_string()));
        }
        let (value, is_observed) = match self.observed.get(name) {
            Some(obs) => {
                broadcast_shapes(obs.shape(), &dist.batch_shape()).map_err(|_| {
                    Error::Shape(format!(
                        "observation for `{name}` has shape {:?}, incompatible with distribution batch shape {:?}",
                        obs.shape(),
                        dist.batch_shape()
                    ))
                })?;
                (obs.clone(), true)
            }
            None => (dist.draw(rng, n_samples)?, false),
        };
        let node = StochasticNode {
            name: name.to_string(),
            dist,
            is_observed,
            value: value.clone(),
            n_samples,
        };
        self.nodes.insert(name.to_string(), node);
        Ok(value)
    }

    pub fn node(&self, name: &str) -> Result<&StochasticNode> {
        self.nodes.get(name).ok_or_else(|| Error::Lookup {
            name: name.to_string(),
            known: self.nodes.keys().cloned().collect(),
        })
    }

    pub fn node_names(&self) -> impl Iterator<Item = &str> {
        self.nodes.keys().map(String::as_str)
    }

    pub fn output(&self, name: &str) -> Result<Tensor> {
        Ok(self.node(name)?.value.clone())
    }

    pub fn local_log_prob(&self, name: &str) -> Result<Tensor> {
        self.node(name)?.log_prob()
    }

    pub fn local_log_probs(&self, names: &[&str]) -> Result<Vec<Tensor>> {
        names.iter().map(|n| self.local_log_prob(n)).collect()
    }

    /// Current values and/or local log-densities for each name.
    pub fn query(
        &self,
        names: &[&str],
        outputs: bool,
        local_log_prob: bool,
    ) -> Result<Vec<QueryResult>> {
        names
            .iter()
            .map(|name| {
                let node = self.node(name)?;
                Ok(QueryResult {
                    output: outputs.then(|| node.value.clone()),
                    local_log_prob: if local_log_prob { Some(node.log_prob()?) } else { None },
                })
            })
            .collect()
    }

    /// Observation keys that no registered node consumed.
    pub fn unconsumed_observations(&self) -> Vec<&str> {
        self.observed
            .keys()
            .filter(|k| !self.nodes.contains_key(*k))
            .map(String::as_str)
            .collect()
    }
}

/// Builds a model under an observation map.
pub trait ModelBuilder {
    fn build(&self, observed: &Observed, rng: &mut RngState) -> Result<BayesianNet>;
}

impl<F> ModelBuilder for F
where
    F: Fn(&Observed, &mut RngState) -> Result<BayesianNet>,
{
    fn build(&self, observed: &Observed, rng: &mut RngState) -> Result<BayesianNet> {
        self(observed, rng)
    }
}

/// Builds the model and sums the local log-densities of `node_names`,
/// broadcasting them to a common batch shape.
pub fn log_joint(
    builder: &impl ModelBuilder,
    observed: &Observed,
    node_names: &[&str],
    rng: &mut RngState,
) -> Result<Tensor> {
    let net = builder.build(observed, rng)?;
    let unused = net.unconsumed_observations();
    if !unused.is_empty() {
        log::warn!("observations not consumed by the model: {unused:?}");
    }
    sum_log_probs(&net.local_log_probs(node_names)?)
}

pub(crate) fn sum_log_probs(terms: &[Tensor]) -> Result<Tensor> {
    let mut iter = terms.iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::Contract("log joint over an empty node list".into()))?
        .clone();
    iter.try_fold(first, |acc, t| acc.add(t))
}
