//! Combining several data sources into one conditioning vector.
//!
//! Early fusion lets one source attend to the other before a single summary
//! network; late fusion embeds every source separately and concatenates;
//! hybrid fusion cross-attends in both directions, embeds both results and
//! concatenates. Missing rows are encoded as a fill constant plus a presence
//! column, and the same presence drives attention masking.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{key_mask, AttentionBlock, AttentionConfig};
use crate::autodiff::{Graph, ParamStore, Var};
use crate::embeddings::{check_increasing, EmbedderConfig, SetEmbedder, TemporalEmbedder};
use crate::error::{invalid, Error, Result};
use crate::nn::Dense;
use crate::tensor::Tensor;

/// Fill value for missing rows. It has probability zero under every
/// simulator, so the networks can recognise it.
pub const MISSING_FILL: f64 = -1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "only-x")]
    OnlyX,
    #[serde(rename = "only-y")]
    OnlyY,
    #[serde(rename = "early-x")]
    EarlyToX,
    #[serde(rename = "early-y")]
    EarlyToY,
    #[serde(rename = "late")]
    Late,
    #[serde(rename = "hybrid")]
    Hybrid,
    #[serde(rename = "direct-concat")]
    DirectConcat,
}

impl Architecture {
    pub const ALL: [Architecture; 7] = [
        Architecture::OnlyX,
        Architecture::OnlyY,
        Architecture::EarlyToX,
        Architecture::EarlyToY,
        Architecture::Late,
        Architecture::Hybrid,
        Architecture::DirectConcat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::OnlyX => "only-x",
            Architecture::OnlyY => "only-y",
            Architecture::EarlyToX => "early-x",
            Architecture::EarlyToY => "early-y",
            Architecture::Late => "late",
            Architecture::Hybrid => "hybrid",
            Architecture::DirectConcat => "direct-concat",
        }
    }

    pub fn is_single_source(self) -> bool {
        matches!(self, Architecture::OnlyX | Architecture::OnlyY)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown architecture `{s}`")))
    }
}

/// Number of networks a strategy needs for `sources` sources.
pub fn network_count(architecture: Architecture, sources: usize) -> Result<usize> {
    if sources < 2 {
        return Err(invalid(format!("fusion needs at least two sources, got {sources}")));
    }
    Ok(match architecture {
        Architecture::Late => sources,
        Architecture::EarlyToX | Architecture::EarlyToY => sources * (sources - 1) / 2 + 1,
        Architecture::Hybrid => (1..=sources).product::<usize>() + sources,
        Architecture::OnlyX | Architecture::OnlyY | Architecture::DirectConcat => 1,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum SourceKind {
    /// Exchangeable rows.
    Set,
    /// Rows observed at the given strictly increasing times.
    Series { times: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub name: String,
    /// Rows per dataset.
    pub rows: usize,
    /// Features per row as seen by the networks (including any presence column).
    pub row_dim: usize,
    pub kind: SourceKind,
    pub embed_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub architecture: Architecture,
    pub sources: Vec<SourceSpec>,
    pub model_dim: usize,
    /// Self-attention blocks per summary network.
    pub embed_blocks: usize,
    pub embed_attention: AttentionConfig,
    pub cross_attention: AttentionConfig,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let l = self.sources.len();
        match self.architecture {
            Architecture::EarlyToX | Architecture::EarlyToY | Architecture::Hybrid if l != 2 => {
                return Err(invalid(format!("{} fusion needs exactly two sources, got {l}", self.architecture)))
            }
            _ if l < 2 && !self.architecture.is_single_source() => {
                return Err(invalid(format!("{} fusion needs at least two sources", self.architecture)))
            }
            Architecture::OnlyY if l < 2 => return Err(invalid("only-y needs a second source")),
            Architecture::OnlyX if l < 1 => return Err(invalid("only-x needs a source")),
            Architecture::DirectConcat => {
                let first = &self.sources[0];
                if self.sources.iter().any(|s| s.rows != first.rows || s.row_dim != first.row_dim) {
                    return Err(invalid("direct concatenation needs identical row counts and row widths"));
                }
            }
            _ => {}
        }
        for s in &self.sources {
            if s.rows == 0 || s.row_dim == 0 || s.embed_dim == 0 {
                return Err(invalid(format!("source `{}` has a zero dimension", s.name)));
            }
            if let SourceKind::Series { times } = &s.kind {
                if times.len() != s.rows {
                    return Err(invalid(format!("source `{}` has {} times for {} rows", s.name, times.len(), s.rows)));
                }
                check_increasing(times)?;
            }
        }
        self.embed_attention.validate()?;
        self.cross_attention.validate()
    }

    /// Length of the fused conditioning vector.
    pub fn output_dim(&self) -> usize {
        let s = &self.sources;
        match self.architecture {
            Architecture::OnlyX | Architecture::EarlyToX => s[0].embed_dim,
            Architecture::OnlyY | Architecture::EarlyToY => s[1].embed_dim,
            Architecture::Late => s.iter().map(|s| s.embed_dim).sum(),
            Architecture::Hybrid => s[0].embed_dim + s[1].embed_dim,
            Architecture::DirectConcat => s[0].embed_dim,
        }
    }

    fn embedder_config(&self, input_dim: usize, embed_dim: usize) -> EmbedderConfig {
        EmbedderConfig {
            input_dim,
            model_dim: self.model_dim,
            embed_dim,
            blocks: self.embed_blocks,
            attention: self.embed_attention.clone(),
        }
    }
}

/// One source's data inside a graph: `[B, rows, row_dim]` plus optional row
/// presence `[B * rows]`.
#[derive(Clone, Copy, Debug)]
pub struct SourceInput<'a> {
    pub data: Var,
    pub presence: Option<&'a [bool]>,
}

/// A per-source summary network.
#[derive(Clone, Debug, PartialEq)]
pub enum Summary {
    Set(SetEmbedder),
    Series(TemporalEmbedder, Vec<f64>),
}

impl Summary {
    fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        kind: &SourceKind,
        config: &EmbedderConfig,
    ) -> Result<Self> {
        Ok(match kind {
            SourceKind::Set => Summary::Set(SetEmbedder::new(store, rng, name, config)?),
            SourceKind::Series { times } => {
                Summary::Series(TemporalEmbedder::new(store, rng, name, config)?, times.clone())
            }
        })
    }

    pub fn embed_dim(&self) -> usize {
        match self {
            Summary::Set(e) => e.embed_dim,
            Summary::Series(e, _) => e.embed_dim(),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: SourceInput) -> Result<Var> {
        match self {
            Summary::Set(e) => e.forward(g, store, input.data, input.presence),
            Summary::Series(e, times) => e.forward(g, store, input.data, times, input.presence),
        }
    }
}

fn with_times(g: &mut Graph, x: Var, times: Option<&[f64]>) -> Result<Var> {
    let Some(times) = times else { return Ok(x) };
    let shape = g.shape(x).to_vec();
    let column = g.constant(Tensor::new([times.len(), 1], times.to_vec())?)?;
    let column = g.broadcast_to(column, &[shape[0], shape[1], 1])?;
    g.concat(&[x, column])
}

/// Cross-attention from a query source onto a key/value source. Rows are
/// linearly projected to the model width (time stamps appended first for
/// series) and then pass through one attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttention {
    pub query_proj: Dense,
    pub key_proj: Dense,
    pub block: AttentionBlock,
    pub query_times: Option<Vec<f64>>,
    pub key_times: Option<Vec<f64>>,
}

impl CrossAttention {
    fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        query: &SourceSpec,
        key: &SourceSpec,
        config: &FusionConfig,
    ) -> Result<Self> {
        let times = |s: &SourceSpec| match &s.kind {
            SourceKind::Series { times } => Some(times.clone()),
            SourceKind::Set => None,
        };
        let (qt, kt) = (times(query), times(key));
        let d = config.model_dim;
        let query_proj = Dense::new(store, rng, &format!("{name}.q_in"), query.row_dim + usize::from(qt.is_some()), d)?;
        let key_proj = Dense::new(store, rng, &format!("{name}.kv_in"), key.row_dim + usize::from(kt.is_some()), d)?;
        let block = AttentionBlock::new(store, rng, &format!("{name}.mab"), d, d, d, &config.cross_attention)?;
        Ok(Self { query_proj, key_proj, block, query_times: qt, key_times: kt })
    }

    /// `[B, n_query, model_dim]`: one output row per query row.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, query: SourceInput, key: SourceInput) -> Result<Var> {
        let qs = g.shape(query.data).to_vec();
        let ks = g.shape(key.data).to_vec();
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] {
            return Err(Error::ShapeMismatch { op: "cross attention", left: qs, right: ks });
        }
        let q = with_times(g, query.data, self.query_times.as_deref())?;
        let k = with_times(g, key.data, self.key_times.as_deref())?;
        let q = self.query_proj.forward(g, store, q)?;
        let k = self.key_proj.forward(g, store, k)?;
        let mask = match key.presence {
            Some(p) => {
                if p.len() != ks[0] * ks[1] {
                    return Err(invalid("key presence does not match the key source"));
                }
                key_mask(p, ks[0], qs[1], ks[1])?
            }
            None => None,
        };
        self.block.forward(g, store, q, k, mask.as_ref())
    }
}

/// One embedding after the query source has attended to the key source.
pub fn early_fuse(
    g: &mut Graph,
    store: &ParamStore,
    query: SourceInput,
    key: SourceInput,
    cross: &CrossAttention,
    embedder: &Summary,
) -> Result<Var> {
    let fused = cross.forward(g, store, query, key)?;
    embedder.forward(g, store, SourceInput { data: fused, presence: query.presence })
}

/// Concatenation of independent per-source embeddings.
pub fn late_fuse(g: &mut Graph, store: &ParamStore, sources: &[SourceInput], embedders: &[Summary]) -> Result<Var> {
    if sources.len() != embedders.len() || sources.len() < 2 {
        return Err(invalid(format!("late fusion got {} sources for {} embedders", sources.len(), embedders.len())));
    }
    let parts = sources.iter().zip(embedders).map(|(s, e)| e.forward(g, store, *s)).collect::<Result<Vec<_>>>()?;
    g.concat(&parts)
}

/// Symmetric cross-attention, per-source embedding, concatenation.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_fuse(
    g: &mut Graph,
    store: &ParamStore,
    x: SourceInput,
    y: SourceInput,
    cross_x: &CrossAttention,
    cross_y: &CrossAttention,
    embed_x: &Summary,
    embed_y: &Summary,
) -> Result<Var> {
    let a = early_fuse(g, store, x, y, cross_x, embed_x)?;
    let b = early_fuse(g, store, y, x, cross_y, embed_y)?;
    g.concat(&[a, b])
}

#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq)]
pub enum Layout {
    Single { source: usize, embedder: Summary },
    Early { query: usize, key: usize, cross: CrossAttention, embedder: Summary },
    Late { embedders: Vec<Summary> },
    Hybrid { cross: [CrossAttention; 2], embedders: [Summary; 2] },
    DirectConcat { embedder: Summary },
}

/// The summary side of the estimator: maps every source of a dataset batch to
/// `[B, output_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionNetwork {
    pub config: FusionConfig,
    pub layout: Layout,
}

impl FusionNetwork {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, config: &FusionConfig) -> Result<Self> {
        config.validate()?;
        let s = &config.sources;
        let raw = |i: usize| config.embedder_config(s[i].row_dim, s[i].embed_dim);
        let after_cross = |i: usize| config.embedder_config(config.model_dim, s[i].embed_dim);
        let layout = match config.architecture {
            Architecture::OnlyX | Architecture::OnlyY => {
                let i = usize::from(config.architecture == Architecture::OnlyY);
                Layout::Single {
                    source: i,
                    embedder: Summary::new(store, rng, &format!("{name}.embed{i}"), &s[i].kind, &raw(i))?,
                }
            }
            Architecture::EarlyToX | Architecture::EarlyToY => {
                let (q, k) = if config.architecture == Architecture::EarlyToX { (0, 1) } else { (1, 0) };
                Layout::Early {
                    query: q,
                    key: k,
                    cross: CrossAttention::new(store, rng, &format!("{name}.cross{q}"), &s[q], &s[k], config)?,
                    embedder: Summary::new(store, rng, &format!("{name}.embed{q}"), &s[q].kind, &after_cross(q))?,
                }
            }
            Architecture::Late => Layout::Late {
                embedders: (0..s.len())
                    .map(|i| Summary::new(store, rng, &format!("{name}.embed{i}"), &s[i].kind, &raw(i)))
                    .collect::<Result<_>>()?,
            },
            Architecture::Hybrid => Layout::Hybrid {
                cross: [
                    CrossAttention::new(store, rng, &format!("{name}.cross0"), &s[0], &s[1], config)?,
                    CrossAttention::new(store, rng, &format!("{name}.cross1"), &s[1], &s[0], config)?,
                ],
                embedders: [
                    Summary::new(store, rng, &format!("{name}.embed0"), &s[0].kind, &after_cross(0))?,
                    Summary::new(store, rng, &format!("{name}.embed1"), &s[1].kind, &after_cross(1))?,
                ],
            },
            Architecture::DirectConcat => {
                let width = s.iter().map(|s| s.row_dim).sum();
                let cfg = config.embedder_config(width, s[0].embed_dim);
                Layout::DirectConcat { embedder: Summary::new(store, rng, &format!("{name}.embed"), &s[0].kind, &cfg)? }
            }
        };
        Ok(Self { config: config.clone(), layout })
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    /// `sources` holds one input per configured source, in order.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, sources: &[SourceInput]) -> Result<Var> {
        if sources.len() != self.config.sources.len() {
            return Err(invalid(format!("expected {} sources, got {}", self.config.sources.len(), sources.len())));
        }
        for (input, spec) in sources.iter().zip(&self.config.sources) {
            let shape = g.shape(input.data);
            if shape.len() != 3 || shape[1] != spec.rows || shape[2] != spec.row_dim {
                return Err(Error::ShapeMismatch {
                    op: "fusion input",
                    left: shape.to_vec(),
                    right: vec![spec.rows, spec.row_dim],
                });
            }
        }
        match &self.layout {
            Layout::Single { source, embedder } => embedder.forward(g, store, sources[*source]),
            Layout::Early { query, key, cross, embedder } => {
                early_fuse(g, store, sources[*query], sources[*key], cross, embedder)
            }
            Layout::Late { embedders } => late_fuse(g, store, sources, embedders),
            Layout::Hybrid { cross, embedders } => {
                hybrid_fuse(g, store, sources[0], sources[1], &cross[0], &cross[1], &embedders[0], &embedders[1])
            }
            Layout::DirectConcat { embedder } => {
                let data = sources.iter().map(|s| s.data).collect::<Vec<_>>();
                let joined = g.concat(&data)?;
                let presence = joint_presence(sources);
                embedder.forward(g, store, SourceInput { data: joined, presence: presence.as_deref() })
            }
        }
    }
}

/// A concatenated row is present when any of its parts is.
fn joint_presence(sources: &[SourceInput]) -> Option<Vec<bool>> {
    let masks: Vec<&[bool]> = sources.iter().filter_map(|s| s.presence).collect();
    if masks.len() < sources.len() {
        return None;
    }
    let n = masks[0].len();
    Some((0..n).map(|i| masks.iter().any(|m| m[i])).collect())
}

/// Row presence per source (`true` = observed) and the fill value written
/// into absent rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingnessMask {
    pub sources: Vec<Vec<bool>>,
    pub fill: f64,
}

impl MissingnessMask {
    pub fn all_present(rows: &[usize]) -> Self {
        Self { sources: rows.iter().map(|&n| vec![true; n]).collect(), fill: MISSING_FILL }
    }

    /// Independent `Bernoulli(1 - rate)` presence per row.
    pub fn draw(rows: &[usize], rates: &[f64], rng: &mut impl Rng) -> Result<Self> {
        if rows.len() != rates.len() {
            return Err(invalid("one missing rate per source is required"));
        }
        let mut sources = Vec::with_capacity(rows.len());
        for (&n, &rate) in rows.iter().zip(rates) {
            if !(0.0..1.0).contains(&rate) {
                return Err(invalid(format!("missing rate {rate} outside [0, 1)")));
            }
            sources.push((0..n).map(|_| rng.random::<f64>() >= rate).collect());
        }
        Ok(Self { sources, fill: MISSING_FILL })
    }
}

/// Overwrites absent rows with the fill value and appends the presence as a
/// final 0/1 column. Each tensor is `[rows, d]` or `[B, rows, d]` with one
/// mask entry per row overall.
pub fn apply_missingness(data: &[Tensor], mask: &MissingnessMask) -> Result<Vec<Tensor>> {
    if data.len() != mask.sources.len() {
        return Err(invalid(format!("{} sources but {} masks", data.len(), mask.sources.len())));
    }
    data.iter()
        .zip(&mask.sources)
        .map(|(x, present)| {
            if x.rank() < 2 {
                return Err(invalid("source data must have at least two axes"));
            }
            let d = x.last_dim();
            let rows = x.len() / d.max(1);
            if present.len() != rows {
                return Err(invalid(format!("mask has {} entries for {rows} rows", present.len())));
            }
            let mut out = Vec::with_capacity(rows * (d + 1));
            for (row, &p) in x.data().chunks(d).zip(present) {
                if p {
                    out.extend_from_slice(row);
                    out.push(1.0);
                } else {
                    out.extend(std::iter::repeat_n(mask.fill, d));
                    out.push(0.0);
                }
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = d + 1;
            Tensor::new(shape, out)
        })
        .collect()
}
