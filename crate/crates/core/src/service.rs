//! Request handling behind the HTTP ranking API, kept transport-free so it
//! can be exercised directly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{rank_prepared, EvalError};
use crate::kg::{KnowledgeGraph, NodeType};
use crate::model::Model;
use crate::patient::{prepare_patient, CandidateSource, PatientError, PatientRecord, Preparation};
use crate::scalar::Scalar;

pub const DEFAULT_K: usize = 2;
pub const MAX_K: usize = 4;
pub const DEFAULT_SEARCH_LIMIT: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankRequest {
    pub phenotypes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_genes: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedGene {
    pub gene: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub symbol: Option<String>,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgraphStats {
    pub nodes: usize,
    pub edges: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankResponse {
    pub ranking: Vec<RankedGene>,
    pub subgraph: SubgraphStats,
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhenotypeMatch {
    pub id: String,
    pub index: usize,
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown phenotype id(s): {}", .0.join(", "))]
    UnknownPhenotypes(Vec<String>),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Patient(#[from] PatientError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl ServiceError {
    /// HTTP status for the error: 422 for unknown ids, 400 for malformed
    /// requests, 500 otherwise.
    pub fn status(&self) -> u16 {
        match self {
            Self::UnknownPhenotypes(_) => 422,
            Self::InvalidRequest(_) => 400,
            _ => 500,
        }
    }

    /// JSON error body; unknown ids are listed under `unknown`.
    pub fn payload(&self) -> serde_json::Value {
        match self {
            Self::UnknownPhenotypes(ids) => serde_json::json!({ "error": self.to_string(), "unknown": ids }),
            _ => serde_json::json!({ "error": self.to_string() }),
        }
    }
}

/// An immutable graph and model pair answering ranking requests.
pub struct Ranker<T> {
    graph: KnowledgeGraph,
    model: Model<T>,
}

impl<T: Scalar> Ranker<T> {
    pub fn new(graph: KnowledgeGraph, model: Model<T>) -> Result<Self, crate::model::ModelError> {
        model.check_graph(&graph)?;
        Ok(Self { graph, model })
    }

    pub fn graph(&self) -> &KnowledgeGraph {
        &self.graph
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    /// Ranks the request's candidates, or its k-hop genes when none are given.
    pub fn rank(&self, request: &RankRequest) -> Result<RankResponse, ServiceError> {
        if request.phenotypes.is_empty() {
            return Err(ServiceError::InvalidRequest("phenotypes must be nonempty".into()));
        }
        let k = request.k.unwrap_or(DEFAULT_K);
        if !(1..=MAX_K).contains(&k) {
            return Err(ServiceError::InvalidRequest(format!("k must lie in [1, {MAX_K}], got {k}")));
        }
        if request.top == Some(0) {
            return Err(ServiceError::InvalidRequest("top must be >= 1".into()));
        }
        let unknown: Vec<String> = request
            .phenotypes
            .iter()
            .filter(|id| self.graph.index_of(id).is_none_or(|i| self.graph.node_type(i) != NodeType::Phenotype))
            .cloned()
            .collect();
        if !unknown.is_empty() {
            return Err(ServiceError::UnknownPhenotypes(unknown));
        }
        let record = PatientRecord {
            id: "request".into(),
            phenotypes: request.phenotypes.clone(),
            candidate_genes: request.candidate_genes.clone(),
            true_gene: None,
        };
        let source = if request.candidate_genes.is_some() { CandidateSource::Provided { k } } else { CandidateSource::KHop { k } };
        let prep = match prepare_patient(&self.graph, &record, source, self.model.config().subgraph_options())? {
            Preparation::Ready(p) => p,
            Preparation::Excluded(_) => return Ok(RankResponse { ranking: Vec::new(), subgraph: SubgraphStats::default(), excluded: true }),
        };
        let (list, _) = rank_prepared(&self.model, &self.graph, &prep)?;
        let cap = request.top.unwrap_or(usize::MAX);
        let ranking = list
            .entries
            .into_iter()
            .take(cap)
            .map(|e| {
                let symbol = self.graph.index_of(&e.gene).and_then(|i| self.graph.node(i).symbol.clone());
                RankedGene { gene: e.gene, symbol, score: e.score }
            })
            .collect();
        let subgraph = SubgraphStats { nodes: prep.subgraph.node_count(), edges: prep.subgraph.edge_count() };
        Ok(RankResponse { ranking, subgraph, excluded: false })
    }

    pub fn search_phenotypes(&self, query: &str, limit: usize) -> Vec<PhenotypeMatch> {
        search_phenotypes(&self.graph, query, limit)
    }
}

/// Phenotype ids containing `query`, ignoring case, in id order.
pub fn search_phenotypes(graph: &KnowledgeGraph, query: &str, limit: usize) -> Vec<PhenotypeMatch> {
    let needle = query.to_lowercase();
    let mut hits: Vec<PhenotypeMatch> = graph
        .nodes_of_type(NodeType::Phenotype)
        .filter(|&i| graph.node(i).external_id.to_lowercase().contains(&needle))
        .map(|i| PhenotypeMatch { id: graph.node(i).external_id.clone(), index: i })
        .collect();
    hits.sort_by(|a, b| a.id.cmp(&b.id));
    hits.truncate(limit);
    hits
}
