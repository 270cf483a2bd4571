//! A complete amortized posterior: summary/fusion networks feeding a
//! conditional flow, plus the training-set standardization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::autodiff::{l2_penalty, Graph, ParamStore, Var};
use crate::data::Standardizer;
use crate::error::{invalid, Result};
use crate::flow::{CouplingFlow, DensityEstimator, FlowConfig};
use crate::fusion::{
    apply_missingness, Architecture, FusionConfig, FusionNetwork, MissingnessMask, SourceInput, SourceSpec,
};
use crate::simulators::Task;
use crate::tensor::Tensor;

pub const FUSION_PREFIX: &str = "fusion";
pub const FLOW_PREFIX: &str = "flow";

/// Network sizes shared by every architecture of a benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub model_dim: usize,
    pub embed_dim: usize,
    pub embed_blocks: usize,
    pub embed_attention: AttentionConfig,
    pub cross_attention: AttentionConfig,
    pub flow_blocks: usize,
    pub flow_hidden: usize,
    pub flow_clamp: f64,
}

impl NetworkConfig {
    /// Transformer summaries with layer norm and 10-dimensional embeddings.
    pub fn exp1() -> Self {
        let attention = |ff_layers| AttentionConfig {
            heads: 4,
            key_dim: 32,
            dropout: 0.1,
            residual: true,
            layer_norm: true,
            ff_units: 64,
            ff_layers,
        };
        Self {
            model_dim: 32,
            embed_dim: 10,
            embed_blocks: 2,
            embed_attention: attention(2),
            cross_attention: attention(3),
            flow_blocks: 8,
            flow_hidden: 32,
            flow_clamp: 1.9,
        }
    }

    /// Set transformers without layer norm, 64-dimensional keys and
    /// 12-dimensional embeddings.
    pub fn exp2() -> Self {
        let attention = |ff_layers| AttentionConfig {
            heads: 4,
            key_dim: 64,
            dropout: 0.1,
            residual: true,
            layer_norm: false,
            ff_units: 64,
            ff_layers,
        };
        Self { embed_dim: 12, embed_attention: attention(2), cross_attention: attention(3), ..Self::exp1() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorModel {
    pub task: Task,
    pub architecture: Architecture,
    pub network: NetworkConfig,
    pub fusion: FusionNetwork,
    pub flow: CouplingFlow,
    pub store: ParamStore,
    pub standardizer: Standardizer,
}

/// Network inputs after standardization and missing-data encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub sources: Vec<Tensor>,
    pub presence: Option<Vec<Vec<bool>>>,
}

impl PosteriorModel {
    /// Freshly initialised weights drawn from `seed`.
    pub fn new(task: &Task, architecture: Architecture, network: &NetworkConfig, seed: u64) -> Result<Self> {
        task.validate()?;
        let presence = usize::from(task.missing_rate().is_some());
        let layouts = task.sources();
        let fusion_config = FusionConfig {
            architecture,
            sources: layouts
                .iter()
                .map(|l| SourceSpec {
                    name: l.name.to_string(),
                    rows: l.rows,
                    row_dim: l.dim + presence,
                    kind: l.kind.clone(),
                    embed_dim: network.embed_dim,
                })
                .collect(),
            model_dim: network.model_dim,
            embed_blocks: network.embed_blocks,
            embed_attention: network.embed_attention.clone(),
            cross_attention: network.cross_attention.clone(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let fusion = FusionNetwork::new(&mut store, &mut rng, FUSION_PREFIX, &fusion_config)?;
        let flow_config = FlowConfig {
            dim: task.param_dim(),
            cond_dim: fusion.output_dim(),
            blocks: network.flow_blocks,
            hidden: network.flow_hidden,
            clamp: network.flow_clamp,
        };
        let flow = CouplingFlow::new(&mut store, &mut rng, FLOW_PREFIX, &flow_config)?;
        let dims: Vec<usize> = layouts.iter().map(|l| l.dim).collect();
        Ok(Self {
            task: task.clone(),
            architecture,
            network: network.clone(),
            fusion,
            flow,
            standardizer: Standardizer::identity(task.param_dim(), &dims),
            store,
        })
    }

    pub fn uses_presence(&self) -> bool {
        self.task.missing_rate().is_some()
    }

    /// Standardizes raw sources `[B, rows, d]`.
    pub fn standardize(&self, sources: &[Tensor]) -> Result<Vec<Tensor>> {
        self.standardizer.sources(sources)
    }

    /// Appends presence columns to standardized sources. Tasks without
    /// missing data take no mask.
    pub fn encode(&self, standardized: Vec<Tensor>, mask: Option<&MissingnessMask>) -> Result<Encoded> {
        if !self.uses_presence() {
            if mask.is_some() {
                return Err(invalid("this task does not model missing data"));
            }
            return Ok(Encoded { sources: standardized, presence: None });
        }
        let rows: Vec<usize> = standardized.iter().map(|s| s.len() / s.last_dim()).collect();
        let owned;
        let mask = match mask {
            Some(m) => m,
            None => {
                owned = MissingnessMask::all_present(&rows);
                &owned
            }
        };
        Ok(Encoded { sources: apply_missingness(&standardized, mask)?, presence: Some(mask.sources.clone()) })
    }

    /// Conditioning vectors `[B, c]` inside a graph.
    pub fn condition_graph(&self, g: &mut Graph, encoded: &Encoded) -> Result<Var> {
        let vars = encoded.sources.iter().map(|s| g.constant(s.clone())).collect::<Result<Vec<_>>>()?;
        let inputs: Vec<SourceInput> = vars
            .iter()
            .enumerate()
            .map(|(i, &data)| SourceInput { data, presence: encoded.presence.as_ref().map(|p| p[i].as_slice()) })
            .collect();
        self.fusion.forward(g, &self.store, &inputs)
    }

    /// Batch mean of `-log q(theta | data)` in standardized parameter space,
    /// plus `l2 * sum ||W||^2` over the flow kernels.
    pub fn loss_graph(&self, g: &mut Graph, params: &Tensor, encoded: &Encoded, l2: f64) -> Result<Var> {
        let cond = self.condition_graph(g, encoded)?;
        let theta = g.constant(self.standardizer.params.apply(params)?)?;
        let lp = self.flow.log_prob_graph(g, &self.store, theta, cond)?;
        let mean = g.mean(lp)?;
        let nll = g.scale(mean, -1.0)?;
        match l2_penalty(g, &self.store, &format!("{FLOW_PREFIX}."), l2)? {
            Some(penalty) if l2 > 0.0 => g.add(nll, penalty),
            _ => Ok(nll),
        }
    }

    /// Conditioning vectors for raw sources, in evaluation mode.
    pub fn conditions(&self, sources: &[Tensor], mask: Option<&MissingnessMask>) -> Result<Tensor> {
        let encoded = self.encode(self.standardize(sources)?, mask)?;
        let mut g = Graph::new();
        let c = self.condition_graph(&mut g, &encoded)?;
        Ok(g.value(c).clone())
    }

    /// `log q(theta | data)` in the original parameter space, per dataset.
    pub fn log_prob(&self, params: &Tensor, sources: &[Tensor], mask: Option<&MissingnessMask>) -> Result<Vec<f64>> {
        let cond = self.conditions(sources, mask)?;
        let theta = self.standardizer.params.apply(params)?;
        let jac: f64 = self.standardizer.params.sd.iter().map(|s| s.ln()).sum();
        Ok(self.flow.log_prob(&self.store, &theta, &cond)?.into_iter().map(|l| l - jac).collect())
    }

    /// `count` posterior draws `[count, p]` for one conditioning vector.
    pub fn sample(&self, condition: &Tensor, count: usize, rng: &mut impl Rng) -> Result<Tensor> {
        let z = self.flow.sample(&self.store, condition, count, rng)?;
        self.standardizer.params.invert(&z)
    }
}
