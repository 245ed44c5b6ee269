//! Small, connected, typed graphs with the shape of a rare-disease
//! knowledge graph, for tests and desk-scale experiments.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Edge, Embeddings, KnowledgeGraph, NodeRef, NodeType, DEFAULT_EDGE_ATTR_DIM};

/// Relation kinds used by the generator.
pub mod relation {
    pub const DISEASE_PHENOTYPE: usize = 0;
    pub const DISEASE_PROTEIN: usize = 1;
    pub const PHENOTYPE_PHENOTYPE: usize = 2;
    pub const PHENOTYPE_PROTEIN: usize = 3;
    pub const PROTEIN_PROTEIN: usize = 4;
    pub const PATHWAY_PROTEIN: usize = 5;
    pub const PROCESS_PROTEIN: usize = 6;
    pub const FUNCTION_PROTEIN: usize = 7;
    pub const COMPONENT_PROTEIN: usize = 8;
    pub const DISEASE_DISEASE: usize = 9;
    pub const BRIDGE: usize = 14;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGraphConfig {
    pub diseases: usize,
    pub genes: usize,
    pub phenotypes: usize,
    pub pathways: usize,
    pub processes: usize,
    pub functions: usize,
    pub components: usize,
    /// Phenotypes annotated per disease, inclusive range.
    pub phenotypes_per_disease: (usize, usize),
    pub protein_links_per_gene: usize,
    pub phenotype_protein_links: usize,
    /// Width of random node features; `None` leaves the graph featureless.
    pub embedding_dim: Option<usize>,
    pub seed: u64,
}

impl Default for SyntheticGraphConfig {
    /// Roughly 300 nodes.
    fn default() -> Self {
        Self {
            diseases: 40,
            genes: 60,
            phenotypes: 120,
            pathways: 20,
            processes: 30,
            functions: 15,
            components: 15,
            phenotypes_per_disease: (4, 10),
            protein_links_per_gene: 2,
            phenotype_protein_links: 30,
            embedding_dim: None,
            seed: 0,
        }
    }
}

fn external_id(t: NodeType, k: usize) -> String {
    match t {
        NodeType::Phenotype => format!("HP:{:07}", k + 1),
        NodeType::Disease => format!("MONDO:{:07}", k + 1),
        NodeType::GeneProtein => format!("ENSG{:011}", k + 1),
        NodeType::Pathway => format!("R-HSA-{}", 100_000 + k),
        NodeType::MolecularFunction => format!("GO:{:07}", 1_000_000 + k),
        NodeType::CellularComponent => format!("GO:{:07}", 2_000_000 + k),
        NodeType::BiologicalProcess => format!("GO:{:07}", 3_000_000 + k),
    }
}

/// Generates a connected graph. Disease `i` is caused by gene `i % genes`
/// (and sometimes a second gene); diseases annotate random phenotypes, which
/// form a tree; genes interact and map to pathways and GO-like terms.
pub fn generate(config: &SyntheticGraphConfig) -> KnowledgeGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut nodes = Vec::new();
    let block = |t: NodeType, count: usize, nodes: &mut Vec<NodeRef>| -> Vec<usize> {
        (0..count)
            .map(|k| {
                let index = nodes.len();
                let symbol = (t == NodeType::GeneProtein).then(|| format!("GENE{}", k + 1));
                nodes.push(NodeRef { index, external_id: external_id(t, k), node_type: t, symbol });
                index
            })
            .collect()
    };
    let phenos = block(NodeType::Phenotype, config.phenotypes, &mut nodes);
    let diseases = block(NodeType::Disease, config.diseases, &mut nodes);
    let genes = block(NodeType::GeneProtein, config.genes, &mut nodes);
    let pathways = block(NodeType::Pathway, config.pathways, &mut nodes);
    let functions = block(NodeType::MolecularFunction, config.functions, &mut nodes);
    let components = block(NodeType::CellularComponent, config.components, &mut nodes);
    let processes = block(NodeType::BiologicalProcess, config.processes, &mut nodes);

    let mut edges = Vec::new();
    let mut link = |a: usize, b: usize, relation: usize| {
        if a != b {
            edges.push(Edge { src: a, dst: b, relation });
        }
    };
    for k in 1..phenos.len() {
        let parent = rng.random_range(0..k);
        link(phenos[k], phenos[parent], relation::PHENOTYPE_PHENOTYPE);
    }
    if !genes.is_empty() {
        for (i, &d) in diseases.iter().enumerate() {
            link(d, genes[i % genes.len()], relation::DISEASE_PROTEIN);
            if rng.random_bool(0.2) {
                link(d, *genes.choose(&mut rng).expect("non-empty"), relation::DISEASE_PROTEIN);
            }
        }
    }
    if !phenos.is_empty() {
        let (lo, hi) = config.phenotypes_per_disease;
        for &d in &diseases {
            let count = rng.random_range(lo..=hi.max(lo)).min(phenos.len());
            for &p in phenos.choose_multiple(&mut rng, count) {
                link(d, p, relation::DISEASE_PHENOTYPE);
            }
        }
        if !genes.is_empty() {
            for _ in 0..config.phenotype_protein_links {
                link(*phenos.choose(&mut rng).expect("non-empty"), *genes.choose(&mut rng).expect("non-empty"), relation::PHENOTYPE_PROTEIN);
            }
        }
    }
    for &g in &genes {
        for _ in 0..config.protein_links_per_gene {
            link(g, *genes.choose(&mut rng).expect("non-empty"), relation::PROTEIN_PROTEIN);
        }
    }
    for (terms, rel) in [
        (&pathways, relation::PATHWAY_PROTEIN),
        (&processes, relation::PROCESS_PROTEIN),
        (&functions, relation::FUNCTION_PROTEIN),
        (&components, relation::COMPONENT_PROTEIN),
    ] {
        if genes.is_empty() {
            break;
        }
        for (k, &t) in terms.iter().enumerate() {
            link(t, genes[k % genes.len()], rel);
            link(t, *genes.choose(&mut rng).expect("non-empty"), rel);
        }
    }
    for _ in 0..diseases.len() / 8 {
        let (a, b) = (*diseases.choose(&mut rng).expect("non-empty"), *diseases.choose(&mut rng).expect("non-empty"));
        link(a, b, relation::DISEASE_DISEASE);
    }

    let mut graph = KnowledgeGraph::new(nodes, edges.clone(), DEFAULT_EDGE_ATTR_DIM).expect("generator emits valid edges");
    // Bridge stray components into the one holding node 0.
    let dist = graph.bfs_distances(&[0], None, &|_| true);
    let stray: Vec<usize> = (0..graph.node_count()).filter(|&v| dist[v].is_none()).collect();
    if !stray.is_empty() {
        let reached: Vec<usize> = (0..graph.node_count()).filter(|&v| dist[v].is_some()).collect();
        let mut covered = vec![false; graph.node_count()];
        for &s in &stray {
            if covered[s] {
                continue;
            }
            graph.bfs_distances(&[s], None, &|_| true).iter().enumerate().filter(|(_, d)| d.is_some()).for_each(|(v, _)| covered[v] = true);
            edges.push(Edge { src: s, dst: *reached.choose(&mut rng).expect("node 0 is reached"), relation: relation::BRIDGE });
        }
        let nodes = graph.nodes().to_vec();
        graph = KnowledgeGraph::new(nodes, edges, DEFAULT_EDGE_ATTR_DIM).expect("generator emits valid edges");
    }

    if let Some(dim) = config.embedding_dim {
        let normal = Normal::new(0.0f32, 1.0 / (dim as f32).sqrt()).expect("valid std");
        let values = (0..graph.node_count() * dim).map(|_| normal.sample(&mut rng)).collect();
        graph.set_embeddings(Embeddings { rows: graph.node_count(), dim, values }).expect("row count matches");
    }
    graph
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_graph_is_connected_and_typed() {
        let g = generate(&SyntheticGraphConfig::default());
        assert_eq!(g.node_count(), 300);
        assert!(g.bfs_distances(&[0], None, &|_| true).iter().all(Option::is_some));
        let counts: std::collections::HashMap<_, _> = g.type_counts().into_iter().collect();
        assert_eq!(counts[&NodeType::GeneProtein], 60);
        assert_eq!(counts[&NodeType::Phenotype], 120);
        assert!(g.edges().iter().all(|e| e.relation < 15));
    }

    #[test]
    fn deterministic_per_seed() {
        let c = SyntheticGraphConfig { embedding_dim: Some(8), ..Default::default() };
        assert_eq!(generate(&c), generate(&c));
        let other = generate(&SyntheticGraphConfig { seed: 1, ..c.clone() });
        assert_ne!(generate(&c).edges(), other.edges());
        assert_eq!(generate(&c).feature_dim(), Some(8));
    }
}
