//! The gene prioritization network: a GATv2 encoder over the patient
//! subgraph, a memory-augmented patient encoder and a transformer gene
//! encoder.

pub mod checkpoint;
pub mod gat;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamId, ParamStore, Tape, Var};
use crate::kg::{PatientSubgraph, SubgraphOptions};
use crate::kg::{KnowledgeGraph, DEFAULT_EDGE_ATTR_DIM};
use crate::scalar::Scalar;
pub use gat::{EdgeIndex, GatLayer, GatOutput};
use layers::{filled, maybe_dropout, normal, reborrow, LayerNorm, Linear, SelfAttention};

/// Clamp range of the contrastive temperature.
pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 10.0;
pub const TAU_INIT: f64 = 0.12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("subgraph has no node features; attach embeddings or use random embedding mode")]
    MissingFeatures,
    #[error("feature dimension mismatch: model expects {expected}, input has {found}")]
    FeatureDim { expected: usize, found: usize },
    #[error("edge attribute dimension mismatch: model expects {expected}, subgraph has {found}")]
    EdgeAttrDim { expected: usize, found: usize },
    #[error("node table has {rows} rows but the subgraph references node {index}")]
    NodeOutOfRange { index: usize, rows: usize },
    #[error("no phenotype nodes to encode")]
    EmptyPhenotypes,
    #[error("no candidate genes to encode")]
    EmptyCandidates,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Source of the input node features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingMode {
    /// Fixed features loaded with the graph.
    #[default]
    Pretrained,
    /// A learnable per-node table drawn from N(0, 1/sqrt(d_in)).
    Random,
    /// Pretrained features on subgraphs restricted to the patient's own phenotypes.
    PhenotypesOnly,
}

impl std::str::FromStr for EmbeddingMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pretrained" => Ok(Self::Pretrained),
            "random" => Ok(Self::Random),
            "phenotypes-only" => Ok(Self::PhenotypesOnly),
            _ => Err(format!("unknown embedding mode {s:?} (pretrained | random | phenotypes-only)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnConfig {
    pub layers: usize,
    pub heads: usize,
    /// Widths of the `layers - 1` hidden blocks, heads concatenated.
    pub hidden_dims: Vec<usize>,
    pub out_dim: usize,
    pub dropout: f64,
    pub negative_slope: f64,
    pub edge_attr_dim: usize,
}

impl Default for GnnConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            heads: 2,
            hidden_dims: vec![1024, 256],
            out_dim: 512,
            dropout: 0.4,
            negative_slope: 0.2,
            edge_attr_dim: DEFAULT_EDGE_ATTR_DIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientEncoderConfig {
    pub memory_slots: usize,
    pub heads: usize,
    pub pheno_hidden: usize,
    pub patient_hidden: usize,
    pub negative_slope: f64,
}

impl Default for PatientEncoderConfig {
    fn default() -> Self {
        Self { memory_slots: 128, heads: 4, pheno_hidden: 512, patient_hidden: 512, negative_slope: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneEncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
}

impl Default for GeneEncoderConfig {
    fn default() -> Self {
        Self { layers: 4, heads: 8, ff_dim: 2048, dropout: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub embedding_mode: EmbeddingMode,
    /// Rows of the learnable node table in random mode; 0 otherwise.
    pub node_count: usize,
    pub gnn: GnnConfig,
    pub patient: PatientEncoderConfig,
    pub gene: GeneEncoderConfig,
}

impl ModelConfig {
    /// Full-size dimensions for the given input width.
    pub fn full(input_dim: usize) -> Self {
        Self {
            input_dim,
            embedding_mode: EmbeddingMode::Pretrained,
            node_count: 0,
            gnn: GnnConfig::default(),
            patient: PatientEncoderConfig::default(),
            gene: GeneEncoderConfig::default(),
        }
    }

    /// Narrow dimensions that train in minutes on one CPU core.
    pub fn small(input_dim: usize) -> Self {
        Self {
            input_dim,
            embedding_mode: EmbeddingMode::Pretrained,
            node_count: 0,
            gnn: GnnConfig { hidden_dims: vec![64, 32], out_dim: 32, dropout: 0.1, ..GnnConfig::default() },
            patient: PatientEncoderConfig { memory_slots: 8, heads: 4, pheno_hidden: 64, patient_hidden: 64, negative_slope: 0.01 },
            gene: GeneEncoderConfig { layers: 2, heads: 4, ff_dim: 64, dropout: 0.1 },
        }
    }

    /// Sets the embedding mode, sizing the node table from `graph` in random mode.
    pub fn with_mode(mut self, mode: EmbeddingMode, graph: &KnowledgeGraph) -> Self {
        self.embedding_mode = mode;
        self.node_count = if mode == EmbeddingMode::Random { graph.node_count() } else { 0 };
        if mode != EmbeddingMode::Random {
            if let Some(d) = graph.feature_dim() {
                self.input_dim = d;
            }
        }
        self
    }

    /// Subgraph construction matching the embedding mode.
    pub fn subgraph_options(&self) -> SubgraphOptions {
        SubgraphOptions { patient_phenotypes_only: self.embedding_mode == EmbeddingMode::PhenotypesOnly }
    }

    pub fn embedding_dim(&self) -> usize {
        self.gnn.out_dim
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        let g = &self.gnn;
        if self.input_dim == 0 || g.out_dim == 0 {
            return bad("input and output dimensions must be positive".into());
        }
        if g.layers == 0 || g.heads == 0 {
            return bad("gnn needs at least one layer and one head".into());
        }
        if g.hidden_dims.len() + 1 != g.layers {
            return bad(format!("{} gnn layers need {} hidden dims, got {}", g.layers, g.layers - 1, g.hidden_dims.len()));
        }
        if let Some(d) = g.hidden_dims.iter().find(|&&d| d == 0 || d % g.heads != 0) {
            return bad(format!("hidden dim {d} is not a positive multiple of {} heads", g.heads));
        }
        for (name, rate) in [("gnn", g.dropout), ("gene", self.gene.dropout)] {
            if !(0.0..1.0).contains(&rate) {
                return bad(format!("{name} dropout {rate} outside [0, 1)"));
            }
        }
        let d = g.out_dim;
        if self.patient.heads == 0 || d % self.patient.heads != 0 {
            return bad(format!("embedding dim {d} not divisible by {} patient heads", self.patient.heads));
        }
        if self.gene.heads == 0 || d % self.gene.heads != 0 {
            return bad(format!("embedding dim {d} not divisible by {} gene heads", self.gene.heads));
        }
        if self.patient.pheno_hidden == 0 || self.patient.patient_hidden == 0 || self.gene.ff_dim == 0 {
            return bad("hidden widths must be positive".into());
        }
        if self.embedding_mode == EmbeddingMode::Random && self.node_count == 0 {
            return bad("random embedding mode needs the graph node count".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct GeneLayer {
    attn: SelfAttention,
    norm1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    norm2: LayerNorm,
}

#[derive(Debug, Clone)]
struct Handles {
    table: Option<ParamId>,
    gat: Vec<GatLayer>,
    gat_norms: Vec<LayerNorm>,
    proj: Linear,
    pheno1: Linear,
    pheno2: Linear,
    memory: Option<ParamId>,
    patient_norm: LayerNorm,
    patient_attn: SelfAttention,
    patient1: Linear,
    patient2: Linear,
    genes: Vec<GeneLayer>,
    log_tau: ParamId,
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Node embeddings, `n x d`.
    pub nodes: Var,
    /// Patient embedding before normalization, `1 x d`.
    pub patient: Var,
    /// Candidate gene embeddings before normalization, `L x d`.
    pub genes: Var,
    /// Per GATv2 layer attention weights.
    pub attention: Vec<Var>,
}

/// Unit-norm embeddings from an evaluation-mode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedded<T> {
    pub patient: Vec<T>,
    pub genes: Vec<Vec<T>>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    pub params: ParamStore<T>,
    h: Handles,
}

impl<T: Scalar> Model<T> {
    /// Builds a freshly initialized model; `seed` fixes every initial value.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = &mut store;
        let d = config.gnn.out_dim;

        let table = (config.embedding_mode == EmbeddingMode::Random).then(|| {
            let std = 1.0 / (config.input_dim as f64).sqrt();
            s.add("embedding.table", normal(&mut rng, config.node_count, config.input_dim, std))
        });

        let g = &config.gnn;
        let mut gat = Vec::with_capacity(g.layers);
        let mut gat_norms = Vec::new();
        let mut din = config.input_dim;
        for (l, &hd) in g.hidden_dims.iter().enumerate() {
            gat.push(GatLayer::new(s, &mut rng, &format!("gnn.{l}"), din, g.edge_attr_dim, g.heads, hd / g.heads, true));
            gat_norms.push(LayerNorm::new(s, &format!("gnn.{l}.norm"), hd));
            din = hd;
        }
        gat.push(GatLayer::new(s, &mut rng, &format!("gnn.{}", g.layers - 1), din, g.edge_attr_dim, g.heads, d, false));
        let proj = Linear::new(s, &mut rng, "gnn.proj", d, d);

        let p = &config.patient;
        let pheno1 = Linear::new(s, &mut rng, "patient.pheno.0", d, p.pheno_hidden);
        let pheno2 = Linear::new(s, &mut rng, "patient.pheno.1", p.pheno_hidden, d);
        let memory = (p.memory_slots > 0).then(|| s.add("patient.memory", normal(&mut rng, p.memory_slots, d, 1.0)));
        let patient_norm = LayerNorm::new(s, "patient.attn.norm", d);
        let patient_attn = SelfAttention::new(s, &mut rng, "patient.attn", d, p.heads);
        let patient1 = Linear::new(s, &mut rng, "patient.out.0", d, p.patient_hidden);
        let patient2 = Linear::new(s, &mut rng, "patient.out.1", p.patient_hidden, d);

        let ge = &config.gene;
        let genes = (0..ge.layers)
            .map(|l| GeneLayer {
                attn: SelfAttention::new(s, &mut rng, &format!("gene.{l}.attn"), d, ge.heads),
                norm1: LayerNorm::new(s, &format!("gene.{l}.norm1"), d),
                ff1: Linear::new(s, &mut rng, &format!("gene.{l}.ff.0"), d, ge.ff_dim),
                ff2: Linear::new(s, &mut rng, &format!("gene.{l}.ff.1"), ge.ff_dim, d),
                norm2: LayerNorm::new(s, &format!("gene.{l}.norm2"), d),
            })
            .collect();
        let log_tau = s.add("log_tau", filled(1, 1, TAU_INIT.ln()));

        let h = Handles {
            table,
            gat,
            gat_norms,
            proj,
            pheno1,
            pheno2,
            memory,
            patient_norm,
            patient_attn,
            patient1,
            patient2,
            genes,
            log_tau,
        };
        Ok(Self { config, params: store, h })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn log_tau_id(&self) -> ParamId {
        self.h.log_tau
    }

    pub fn tau(&self) -> T {
        self.params.get(self.h.log_tau).values()[0].exp()
    }

    /// Keeps the temperature inside `[TAU_MIN, TAU_MAX]`.
    pub fn clamp_tau(&mut self) {
        let v = &mut self.params.get_mut(self.h.log_tau).values_mut()[0];
        *v = v.max(T::of(TAU_MIN.ln())).min(T::of(TAU_MAX.ln()));
    }

    /// Checks that the graph provides what this model consumes.
    pub fn check_graph(&self, graph: &KnowledgeGraph) -> Result<(), ModelError> {
        if graph.edge_attr_dim() != self.config.gnn.edge_attr_dim {
            return Err(ModelError::EdgeAttrDim { expected: self.config.gnn.edge_attr_dim, found: graph.edge_attr_dim() });
        }
        match self.config.embedding_mode {
            EmbeddingMode::Random if graph.node_count() != self.config.node_count => {
                Err(ModelError::NodeOutOfRange { index: graph.node_count().saturating_sub(1), rows: self.config.node_count })
            }
            EmbeddingMode::Random => Ok(()),
            _ => match graph.feature_dim() {
                None => Err(ModelError::MissingFeatures),
                Some(d) if d != self.config.input_dim => Err(ModelError::FeatureDim { expected: self.config.input_dim, found: d }),
                Some(_) => Ok(()),
            },
        }
    }

    fn input_features(&self, tape: &mut Tape<T>, sub: &PatientSubgraph) -> Result<Var, ModelError> {
        let n = sub.node_count();
        if let Some(table) = self.h.table {
            if let Some(&bad) = sub.local_to_global.iter().find(|&&g| g >= self.config.node_count) {
                return Err(ModelError::NodeOutOfRange { index: bad, rows: self.config.node_count });
            }
            let t = tape.param(&self.params, table);
            return Ok(tape.gather_rows(t, &sub.local_to_global)?);
        }
        let feats = sub.features.as_ref().ok_or(ModelError::MissingFeatures)?;
        if sub.feature_dim != self.config.input_dim {
            return Err(ModelError::FeatureDim { expected: self.config.input_dim, found: sub.feature_dim });
        }
        Ok(tape.constant(n, sub.feature_dim, feats.iter().map(|&v| T::of(v as f64)).collect())?)
    }

    /// GATv2 stack followed by the output projection. Returns `n x d` node
    /// embeddings and the attention weights of every layer.
    pub fn gnn_encode(
        &self,
        tape: &mut Tape<T>,
        sub: &PatientSubgraph,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Vec<Var>), ModelError> {
        let g = &self.config.gnn;
        if sub.edge_attr_dim != g.edge_attr_dim {
            return Err(ModelError::EdgeAttrDim { expected: g.edge_attr_dim, found: sub.edge_attr_dim });
        }
        let edges = EdgeIndex::from_subgraph(sub);
        let slope = T::of(g.negative_slope);
        let mut x = self.input_features(tape, sub)?;
        let mut attention = Vec::with_capacity(g.layers);
        let last = self.h.gat.len() - 1;
        for (l, layer) in self.h.gat.iter().enumerate() {
            let o = layer.forward(tape, &self.params, x, &edges, slope)?;
            attention.push(o.attention);
            x = o.out;
            if l < last {
                x = self.h.gat_norms[l].forward(tape, &self.params, x)?;
                x = tape.leaky_relu(x, slope);
                x = maybe_dropout(tape, x, g.dropout, reborrow(&mut rng))?;
            }
        }
        let z = self.h.proj.forward(tape, &self.params, x)?;
        Ok((z, attention))
    }

    /// Patient embedding from the phenotype rows of `z`, `1 x d`.
    pub fn encode_patient(&self, tape: &mut Tape<T>, z: Var, phenotype_mask: &[bool]) -> Result<Var, ModelError> {
        let rows: Vec<usize> = phenotype_mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        if rows.is_empty() {
            return Err(ModelError::EmptyPhenotypes);
        }
        let slope = T::of(self.config.patient.negative_slope);
        let ph = tape.gather_rows(z, &rows)?;
        let ph = self.h.pheno1.forward(tape, &self.params, ph)?;
        let ph = tape.relu(ph);
        let ph = self.h.pheno2.forward(tape, &self.params, ph)?;
        let ph = tape.leaky_relu(ph, slope);
        let seq = match self.h.memory {
            Some(m) => {
                let m = tape.param(&self.params, m);
                tape.concat_rows(&[ph, m])?
            }
            None => ph,
        };
        let normed = self.h.patient_norm.forward(tape, &self.params, seq)?;
        let attended = self.h.patient_attn.forward(tape, &self.params, normed)?;
        let seq = tape.add(seq, attended)?;
        let mut mask = vec![true; rows.len()];
        mask.resize(rows.len() + self.config.patient.memory_slots, false);
        let pooled = tape.masked_mean(seq, &mask)?;
        let p = self.h.patient1.forward(tape, &self.params, pooled)?;
        let p = tape.leaky_relu(p, slope);
        Ok(self.h.patient2.forward(tape, &self.params, p)?)
    }

    /// Gene embeddings for `candidates` (local indices), `L x d`, row `j`
    /// belonging to candidate `j`.
    pub fn encode_genes(
        &self,
        tape: &mut Tape<T>,
        z: Var,
        candidates: &[usize],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        if candidates.is_empty() {
            return Err(ModelError::EmptyCandidates);
        }
        let rate = self.config.gene.dropout;
        let mut x = tape.gather_rows(z, candidates)?;
        for layer in &self.h.genes {
            let a = layer.attn.forward(tape, &self.params, x)?;
            let a = maybe_dropout(tape, a, rate, reborrow(&mut rng))?;
            let r = tape.add(x, a)?;
            x = layer.norm1.forward(tape, &self.params, r)?;
            let f = layer.ff1.forward(tape, &self.params, x)?;
            let f = tape.relu(f);
            let f = maybe_dropout(tape, f, rate, reborrow(&mut rng))?;
            let f = layer.ff2.forward(tape, &self.params, f)?;
            let f = maybe_dropout(tape, f, rate, reborrow(&mut rng))?;
            let r = tape.add(x, f)?;
            x = layer.norm2.forward(tape, &self.params, r)?;
        }
        Ok(x)
    }

    /// Full pass. Dropout is active only when `rng` is supplied.
    pub fn forward(&self, tape: &mut Tape<T>, sub: &PatientSubgraph, mut rng: Option<&mut ChaCha8Rng>) -> Result<ForwardOutput, ModelError> {
        let (nodes, attention) = self.gnn_encode(tape, sub, reborrow(&mut rng))?;
        let patient = self.encode_patient(tape, nodes, &sub.phenotype_mask)?;
        let genes = self.encode_genes(tape, nodes, &sub.candidate_genes, rng)?;
        Ok(ForwardOutput { nodes, patient, genes, attention })
    }

    /// Evaluation-mode embeddings, normalized to unit length.
    pub fn embed(&self, sub: &PatientSubgraph) -> Result<Embedded<T>, ModelError> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, sub, None)?;
        let p = tape.l2_normalize(out.patient);
        let g = tape.l2_normalize(out.genes);
        let d = tape.shape(g).1;
        Ok(Embedded { patient: tape.value(p).to_vec(), genes: tape.value(g).chunks(d).map(<[T]>::to_vec).collect() })
    }
}
