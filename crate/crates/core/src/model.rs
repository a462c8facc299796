//! Generative and inference networks bundled with their parameters.

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::generative::{theta_from_params, BoundGenerative, GenerativeSpec, LorenzTheta};
use crate::inference::{InferenceNet, InferenceSpec};
use crate::params::{BoundParams, ParamSet};
use crate::rng::substream;

pub const INFERENCE_PREFIX: &str = "inf.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub generative: GenerativeSpec,
    pub inference: InferenceSpec,
}

impl ModelSpec {
    pub fn lorenz(rnn_dim: usize) -> Self {
        Self {
            generative: GenerativeSpec::lorenz_default(),
            inference: InferenceSpec {
                obs_dim: 3,
                latent_dim: 3,
                rnn_dim,
            },
        }
    }

    pub fn gated_bernoulli(obs_dim: usize, latent_dim: usize, rnn_dim: usize, emission_hidden: usize) -> Self {
        Self {
            generative: GenerativeSpec::GatedBernoulli {
                latent_dim,
                obs_dim,
                emission_hidden,
            },
            inference: InferenceSpec {
                obs_dim,
                latent_dim,
                rnn_dim,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generative.validate()?;
        self.inference.validate()?;
        if self.generative.obs_dim() != self.inference.obs_dim
            || self.generative.latent_dim() != self.inference.latent_dim
        {
            return Err(Error::Config(format!(
                "generative model is {}→{} but inference network is {}→{}",
                self.generative.latent_dim(),
                self.generative.obs_dim(),
                self.inference.obs_dim,
                self.inference.latent_dim
            )));
        }
        Ok(())
    }
}

/// Parameters of both networks, checkpointed together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub spec: ModelSpec,
    pub params: ParamSet,
}

/// Both networks registered on one graph.
pub struct BoundModel<'g> {
    pub generative: BoundGenerative<'g>,
    pub inference: InferenceNet<'g>,
    pub params: BoundParams<'g>,
}

impl ModelBundle {
    /// Fresh parameters from the `init` substream of `seed`. `theta` sets the
    /// Lorenz starting point and is ignored by the gated family.
    pub fn init(spec: ModelSpec, seed: u64, theta: Option<LorenzTheta>) -> Result<Self> {
        spec.validate()?;
        let mut rng = substream(seed, "init", 0);
        let mut params = ParamSet::new();
        spec.generative.init_params(&mut rng, theta, &mut params);
        spec.inference.init_params(&mut rng, &mut params);
        Ok(Self { spec, params })
    }

    /// Register the parameters on `graph`. With `inference_grad` off the
    /// inference parameters enter as constants.
    pub fn bind<'g>(&self, graph: &'g Graph, inference_grad: bool) -> Result<BoundModel<'g>> {
        let params = self
            .params
            .bind_filtered(graph, |name| inference_grad || !is_inference_param(name));
        Ok(BoundModel {
            generative: self.spec.generative.bind(graph, &params)?,
            inference: self.spec.inference.bind(graph, &params)?,
            params,
        })
    }

    /// Every parameter as a constant, for evaluation.
    pub fn bind_frozen<'g>(&self, graph: &'g Graph) -> Result<BoundModel<'g>> {
        let params = self.params.bind_filtered(graph, |_| false);
        Ok(BoundModel {
            generative: self.spec.generative.bind(graph, &params)?,
            inference: self.spec.inference.bind(graph, &params)?,
            params,
        })
    }

    pub fn theta(&self) -> Option<LorenzTheta> {
        match self.spec.generative {
            GenerativeSpec::Lorenz { .. } => theta_from_params(&self.params),
            GenerativeSpec::GatedBernoulli { .. } => None,
        }
    }
}

pub fn is_inference_param(name: &str) -> bool {
    name.starts_with(INFERENCE_PREFIX)
}
