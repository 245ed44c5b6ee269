//! End-to-end finite-difference check of the full loss through every
//! parameter group on a six-node subgraph.

use super::{grad_check, GradReport};
use phenokg_core::autodiff::{ParamStore, Tape, Var};
use phenokg_core::kg::{Edge, Embeddings, KnowledgeGraph, NodeRef, NodeType, PatientSubgraph, SubgraphOptions};
use phenokg_core::losses::{gene_loss, patient_sim_loss, total_loss, GeneLossConfig, MemoryBank, SimLossConfig};
use phenokg_core::model::{EmbeddingMode, GeneEncoderConfig, GnnConfig, Model, ModelConfig, PatientEncoderConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-4;

pub fn six_node_graph(feature_dim: usize, seed: u64) -> KnowledgeGraph {
    let layout = [
        ("HP:1", NodeType::Phenotype),
        ("HP:2", NodeType::Phenotype),
        ("D:1", NodeType::Disease),
        ("G:1", NodeType::GeneProtein),
        ("G:2", NodeType::GeneProtein),
        ("G:3", NodeType::GeneProtein),
    ];
    let nodes = layout
        .iter()
        .enumerate()
        .map(|(index, (id, t))| NodeRef { index, external_id: id.to_string(), node_type: *t, symbol: None })
        .collect();
    let e = |src, dst, relation| Edge { src, dst, relation };
    let mut g = KnowledgeGraph::new(nodes, [e(0, 1, 2), e(0, 2, 0), e(1, 2, 0), e(2, 3, 1), e(1, 4, 3), e(3, 5, 4)], 15).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..6 * feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    g.set_embeddings(Embeddings { rows: 6, dim: feature_dim, values }).unwrap();
    g
}

pub fn tiny_model(mode: EmbeddingMode) -> ModelConfig {
    ModelConfig {
        input_dim: 5,
        embedding_mode: mode,
        node_count: if mode == EmbeddingMode::Random { 6 } else { 0 },
        gnn: GnnConfig { hidden_dims: vec![6, 4], out_dim: 4, dropout: 0.4, ..GnnConfig::default() },
        patient: PatientEncoderConfig { memory_slots: 2, heads: 2, pheno_hidden: 5, patient_hidden: 5, negative_slope: 0.01 },
        gene: GeneEncoderConfig { layers: 2, heads: 2, ff_dim: 6, dropout: 0.1 },
    }
}

pub fn subgraph(g: &KnowledgeGraph) -> PatientSubgraph {
    let sub = g.shortest_path_subgraph(&[0, 1], &[3, 4, 5], SubgraphOptions::default()).unwrap();
    assert_eq!(sub.node_count(), 6);
    sub
}

pub fn full_loss(model: &Model<f64>, sub: &PatientSubgraph, bank: &MemoryBank<f64>, t: &mut Tape<f64>, s: &ParamStore<f64>) -> Var {
    let mut m = model.clone();
    m.params = s.clone();
    let out = m.forward(t, sub, None).unwrap();
    let log_tau = t.param(s, m.log_tau_id());
    let gene = gene_loss(t, out.patient, out.genes, 1, &GeneLossConfig::default(), log_tau).unwrap().loss;
    let sim = patient_sim_loss(t, &[out.patient], &[4], bank, &SimLossConfig::default()).unwrap();
    total_loss(t, Some(gene), Some(sim)).unwrap()
}

pub fn bank() -> MemoryBank<f64> {
    let mut b = MemoryBank::new(4);
    let unit = |v: [f64; 4]| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect::<Vec<_>>()
    };
    b.push(&[unit([0.3, -0.2, 0.5, 0.1]), unit([-0.4, 0.6, 0.1, 0.2]), unit([0.1, 0.1, -0.7, 0.3])], &[4, 3, 4]).unwrap();
    b
}

/// Checks every parameter coordinate of a freshly initialized model.
pub fn check(mode: EmbeddingMode) -> (GradReport, usize) {
    let g = six_node_graph(5, 11);
    let sub = subgraph(&g);
    let model = Model::<f64>::new(tiny_model(mode), 3).unwrap();
    let bank = bank();
    let report = grad_check(&model.params, 1e-6, 1e-4, usize::MAX, |t, s| full_loss(&model, &sub, &bank, t, s));
    (report, model.params.len())
}
