//! Typed, immutable knowledge graph and patient-subgraph extraction.

mod io;
mod subgraph;
pub mod synthetic;

pub use io::{load_graph, load_graph_dir, read_embeddings, write_embeddings, write_graph_dir, EMBEDDINGS_MAGIC};
pub use subgraph::{PatientSubgraph, SubgraphOptions};

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default one-hot edge attribute width.
pub const DEFAULT_EDGE_ATTR_DIM: usize = 15;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate external id {0}")]
    DuplicateId(String),
    #[error("node indices must be contiguous from 0; expected {expected}, found {found}")]
    NonContiguous { expected: usize, found: usize },
    #[error("unknown node type {0:?}")]
    UnknownNodeType(String),
    #[error("edge endpoint {0} is not a declared node")]
    DanglingEndpoint(String),
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("relation kind {relation} does not fit edge attribute dimension {dim}")]
    RelationOutOfRange { relation: usize, dim: usize },
    #[error("embedding file has {found} rows but the graph has {expected} nodes")]
    EmbeddingRowMismatch { expected: usize, found: usize },
    #[error("embedding file is malformed: {0}")]
    BadEmbeddings(String),
    #[error("node index {0} out of range")]
    InvalidIndex(usize),
    #[error("node {0} is not a phenotype")]
    NotPhenotype(String),
    #[error("empty phenotype set")]
    EmptyPhenotypes,
    #[error("empty candidate set")]
    EmptyCandidates,
    #[error("empty node set")]
    EmptyNodeSet,
    #[error("candidate {0} is unreachable from every phenotype")]
    UnreachableCandidate(String),
    #[error("patient subgraph cannot be connected: component containing {0} is isolated")]
    Disconnected(String),
}

/// The seven biomedical entity kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeType {
    Phenotype,
    Disease,
    GeneProtein,
    Pathway,
    MolecularFunction,
    CellularComponent,
    BiologicalProcess,
}

impl NodeType {
    pub const ALL: [NodeType; 7] = [
        NodeType::Phenotype,
        NodeType::Disease,
        NodeType::GeneProtein,
        NodeType::Pathway,
        NodeType::MolecularFunction,
        NodeType::CellularComponent,
        NodeType::BiologicalProcess,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NodeType::Phenotype => "Phenotype",
            NodeType::Disease => "Disease",
            NodeType::GeneProtein => "GeneProtein",
            NodeType::Pathway => "Pathway",
            NodeType::MolecularFunction => "MolecularFunction",
            NodeType::CellularComponent => "CellularComponent",
            NodeType::BiologicalProcess => "BiologicalProcess",
        }
    }
}

impl fmt::Display for NodeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NodeType {
    type Err = GraphError;

    /// Accepts the canonical names and the PrimeKG spellings
    /// (`effect/phenotype`, `gene/protein`, `biological_process`, ...).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Ok(match key.as_str() {
            "phenotype" | "effectphenotype" => NodeType::Phenotype,
            "disease" => NodeType::Disease,
            "geneprotein" | "gene" | "protein" => NodeType::GeneProtein,
            "pathway" => NodeType::Pathway,
            "molecularfunction" => NodeType::MolecularFunction,
            "cellularcomponent" => NodeType::CellularComponent,
            "biologicalprocess" => NodeType::BiologicalProcess,
            _ => return Err(GraphError::UnknownNodeType(s.to_string())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRef {
    pub index: usize,
    pub external_id: String,
    pub node_type: NodeType,
    /// Display name such as a gene symbol, when the node file provides one.
    pub symbol: Option<String>,
}

/// An undirected edge, stored once with `src < dst`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub relation: usize,
}

/// Dense node-feature matrix, row-major `rows x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub rows: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl Embeddings {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

/// Immutable typed graph. Safe to share across threads once built.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeGraph {
    nodes: Vec<NodeRef>,
    id_index: HashMap<String, usize>,
    edges: Vec<Edge>,
    /// Per node: `(neighbor, edge index)`, sorted by neighbor then edge.
    adjacency: Vec<Vec<(usize, usize)>>,
    edge_attr_dim: usize,
    embeddings: Option<Embeddings>,
}

impl KnowledgeGraph {
    /// Validates and assembles a graph. Edges are deduplicated as unordered
    /// `(endpoints, relation)` triples.
    pub fn new(nodes: Vec<NodeRef>, edges: impl IntoIterator<Item = Edge>, edge_attr_dim: usize) -> Result<Self, GraphError> {
        let mut id_index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if n.index != i {
                return Err(GraphError::NonContiguous { expected: i, found: n.index });
            }
            if id_index.insert(n.external_id.clone(), i).is_some() {
                return Err(GraphError::DuplicateId(n.external_id.clone()));
            }
        }
        let mut canonical = Vec::new();
        for e in edges {
            for end in [e.src, e.dst] {
                if end >= nodes.len() {
                    return Err(GraphError::DanglingEndpoint(end.to_string()));
                }
            }
            if e.src == e.dst {
                return Err(GraphError::SelfLoop(e.src));
            }
            if e.relation >= edge_attr_dim {
                return Err(GraphError::RelationOutOfRange { relation: e.relation, dim: edge_attr_dim });
            }
            canonical.push(Edge { src: e.src.min(e.dst), dst: e.src.max(e.dst), relation: e.relation });
        }
        canonical.sort_unstable();
        canonical.dedup();
        let mut adjacency = vec![Vec::new(); nodes.len()];
        for (k, e) in canonical.iter().enumerate() {
            adjacency[e.src].push((e.dst, k));
            adjacency[e.dst].push((e.src, k));
        }
        adjacency.iter_mut().for_each(|a| a.sort_unstable());
        Ok(Self { nodes, id_index, edges: canonical, adjacency, edge_attr_dim, embeddings: None })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes(&self) -> &[NodeRef] {
        &self.nodes
    }

    pub fn node(&self, index: usize) -> &NodeRef {
        &self.nodes[index]
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge_attr_dim(&self) -> usize {
        self.edge_attr_dim
    }

    /// One-hot attribute row for edge `k`.
    pub fn edge_attr(&self, k: usize) -> Vec<f32> {
        let mut row = vec![0.0; self.edge_attr_dim];
        row[self.edges[k].relation] = 1.0;
        row
    }

    pub fn index_of(&self, external_id: &str) -> Option<usize> {
        self.id_index.get(external_id).copied()
    }

    pub fn node_type(&self, index: usize) -> NodeType {
        self.nodes[index].node_type
    }

    /// Neighbors of `index` as `(neighbor, edge index)` pairs, sorted.
    pub fn neighbors(&self, index: usize) -> &[(usize, usize)] {
        &self.adjacency[index]
    }

    pub fn nodes_of_type(&self, t: NodeType) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().filter(move |n| n.node_type == t).map(|n| n.index)
    }

    pub fn embeddings(&self) -> Option<&Embeddings> {
        self.embeddings.as_ref()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.embeddings.as_ref().map(|e| e.dim)
    }

    /// Attaches a node-feature matrix; its row count must equal the node count.
    pub fn set_embeddings(&mut self, embeddings: Embeddings) -> Result<(), GraphError> {
        if embeddings.rows != self.nodes.len() {
            return Err(GraphError::EmbeddingRowMismatch { expected: self.nodes.len(), found: embeddings.rows });
        }
        if embeddings.dim == 0 || embeddings.values.len() != embeddings.rows * embeddings.dim {
            return Err(GraphError::BadEmbeddings(format!("{} values for {}x{}", embeddings.values.len(), embeddings.rows, embeddings.dim)));
        }
        self.embeddings = Some(embeddings);
        Ok(())
    }

    pub fn clear_embeddings(&mut self) {
        self.embeddings = None;
    }

    pub(crate) fn check_index(&self, i: usize) -> Result<(), GraphError> {
        if i < self.nodes.len() {
            Ok(())
        } else {
            Err(GraphError::InvalidIndex(i))
        }
    }

    /// Node count per type, in [`NodeType::ALL`] order.
    pub fn type_counts(&self) -> Vec<(NodeType, usize)> {
        NodeType::ALL.iter().map(|&t| (t, self.nodes_of_type(t).count())).collect()
    }
}
