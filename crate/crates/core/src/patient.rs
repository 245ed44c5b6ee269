//! Patient records, the `patients.jsonl` format, and a seeded cohort simulator.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{GraphError, KnowledgeGraph, NodeType, PatientSubgraph, SubgraphOptions};

#[derive(Debug, Error)]
pub enum PatientError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("patient {patient}: unknown phenotype id {id}")]
    UnknownPhenotype { patient: String, id: String },
    #[error("patient {patient}: {id} is not a phenotype node")]
    NotPhenotype { patient: String, id: String },
    #[error("patient {0}: empty phenotype list")]
    EmptyPhenotypes(String),
    #[error("patient {patient}: unknown gene id {id}")]
    UnknownGene { patient: String, id: String },
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
    #[error("no gene in the graph has a phenotype within two hops")]
    NoEligibleGene,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// One patient as stored on disk: HPO terms, optional candidate genes and
/// the optional causative gene, all as external ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    #[serde(rename = "positive_phenotypes")]
    pub phenotypes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_genes: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_gene: Option<String>,
}

/// A record with every id mapped to a graph node index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedPatient {
    pub id: String,
    pub phenotypes: Vec<usize>,
    pub candidates: Option<Vec<usize>>,
    pub true_gene: Option<usize>,
}

fn dedup(ids: &[String]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    ids.iter().filter(|s| seen.insert(s.as_str())).cloned().collect()
}

impl PatientRecord {
    /// Maps ids to node indices. Unknown phenotypes are errors; unknown
    /// candidate genes are skipped.
    pub fn resolve(&self, graph: &KnowledgeGraph) -> Result<ResolvedPatient, PatientError> {
        if self.phenotypes.is_empty() {
            return Err(PatientError::EmptyPhenotypes(self.id.clone()));
        }
        let mut phenotypes = Vec::new();
        for id in dedup(&self.phenotypes) {
            let idx = graph
                .index_of(&id)
                .ok_or_else(|| PatientError::UnknownPhenotype { patient: self.id.clone(), id: id.clone() })?;
            if graph.node_type(idx) != NodeType::Phenotype {
                return Err(PatientError::NotPhenotype { patient: self.id.clone(), id });
            }
            phenotypes.push(idx);
        }
        let candidates = self.candidate_genes.as_ref().map(|c| {
            dedup(c)
                .iter()
                .filter_map(|id| {
                    let idx = graph.index_of(id);
                    if idx.is_none() {
                        log::warn!("patient {}: candidate {id} not in graph, skipped", self.id);
                    }
                    idx
                })
                .collect()
        });
        let true_gene = match &self.true_gene {
            Some(id) => Some(
                graph
                    .index_of(id)
                    .ok_or_else(|| PatientError::UnknownGene { patient: self.id.clone(), id: id.clone() })?,
            ),
            None => None,
        };
        Ok(ResolvedPatient { id: self.id.clone(), phenotypes, candidates, true_gene })
    }
}

/// Reads `patients.jsonl`, keeping only records whose causative gene (when
/// given) exists in the graph.
pub fn load_patients(path: &Path, graph: &KnowledgeGraph) -> Result<Vec<PatientRecord>, PatientError> {
    let text = fs::read_to_string(path).map_err(|source| PatientError::Io { path: path.display().to_string(), source })?;
    let mut out = Vec::new();
    let mut dropped = 0usize;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut rec: PatientRecord =
            serde_json::from_str(line).map_err(|e| PatientError::Malformed { line: i + 1, message: e.to_string() })?;
        rec.phenotypes = dedup(&rec.phenotypes);
        match rec.resolve(graph) {
            Ok(_) => out.push(rec),
            Err(PatientError::UnknownGene { patient, id }) if rec.true_gene.as_deref() == Some(id.as_str()) => {
                log::warn!("patient {patient}: causative gene {id} missing from graph, record dropped");
                dropped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if dropped > 0 {
        log::warn!("{dropped} record(s) dropped for causative genes missing from the graph");
    }
    Ok(out)
}

pub fn write_patients(path: &Path, records: &[PatientRecord]) -> Result<(), PatientError> {
    let io = |source| PatientError::Io { path: path.display().to_string(), source };
    let mut f = fs::File::create(path).map_err(io)?;
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(f, "{line}").map_err(|source| PatientError::Io { path: path.display().to_string(), source })?;
    }
    Ok(())
}

/// Where a patient's genes to rank come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateSource {
    /// The record's own list, falling back to a `k`-hop harvest without one.
    Provided { k: usize },
    /// Genes within `k` hops of the phenotypes; provided lists are ignored.
    KHop { k: usize },
}

impl Default for CandidateSource {
    fn default() -> Self {
        Self::Provided { k: 2 }
    }
}

/// A patient ready for a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedPatient {
    pub id: String,
    pub subgraph: PatientSubgraph,
    /// Global causative gene, if labeled.
    pub true_gene: Option<usize>,
    /// Position of the causative gene in the candidate list, if present.
    pub true_position: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Preparation {
    Ready(Box<PreparedPatient>),
    /// Left out of ranking; the reason is human readable.
    Excluded(String),
}

/// Resolves a record and builds its subgraph. Provided candidates that no
/// phenotype reaches are dropped. In `KHop` mode a labeled patient whose
/// causative gene falls outside the harvest is excluded.
pub fn prepare_patient(
    graph: &KnowledgeGraph,
    record: &PatientRecord,
    source: CandidateSource,
    opts: SubgraphOptions,
) -> Result<Preparation, PatientError> {
    let r = record.resolve(graph)?;
    let harvest = |k: usize| graph.candidate_genes_from_khop_with(&r.phenotypes, k, opts);
    let (candidates, khop) = match (source, &r.candidates) {
        (CandidateSource::Provided { .. }, Some(c)) => {
            let allowed = |v: usize| !opts.patient_phenotypes_only || graph.node_type(v) != NodeType::Phenotype || r.phenotypes.contains(&v);
            let dist = graph.bfs_distances(&r.phenotypes, None, &allowed);
            let (kept, lost): (Vec<usize>, Vec<usize>) = c.iter().partition(|&&g| dist[g].is_some());
            if !lost.is_empty() {
                log::warn!("patient {}: {} candidate(s) unreachable from its phenotypes, dropped", r.id, lost.len());
            }
            (kept, false)
        }
        (CandidateSource::Provided { k }, None) | (CandidateSource::KHop { k }, _) => (harvest(k)?, true),
    };
    if candidates.is_empty() {
        return Ok(Preparation::Excluded("no reachable candidate genes".into()));
    }
    let true_position = r.true_gene.and_then(|g| candidates.iter().position(|&c| c == g));
    if khop && r.true_gene.is_some() && true_position.is_none() {
        return Ok(Preparation::Excluded("causative gene outside the k-hop neighborhood".into()));
    }
    let subgraph = graph.shortest_path_subgraph(&r.phenotypes, &candidates, opts)?;
    Ok(Preparation::Ready(Box::new(PreparedPatient { id: r.id, subgraph, true_gene: r.true_gene, true_position })))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatorConfig {
    pub n_patients: usize,
    pub phenotypes_mean: f64,
    pub phenotypes_sd: f64,
    /// Uniformly random phenotypes added on top of the gene-linked ones.
    pub noise_phenotypes: usize,
    /// Candidates besides the causative gene.
    pub distractor_candidates: usize,
    /// Share of distractors drawn from genes sharing a phenotype with the
    /// causative gene.
    pub hard_fraction: f64,
    /// Restrict causative genes to this many eligible genes, so that
    /// patients share diagnoses.
    pub causative_pool: Option<usize>,
    pub seed: u64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            n_patients: 100,
            phenotypes_mean: 7.9,
            phenotypes_sd: 6.6,
            noise_phenotypes: 1,
            distractor_candidates: 19,
            hard_fraction: 0.5,
            causative_pool: None,
            seed: 0,
        }
    }
}

impl SimulatorConfig {
    pub fn validate(&self) -> Result<(), PatientError> {
        if self.n_patients < 1 {
            return Err(PatientError::InvalidConfig("n_patients must be >= 1".into()));
        }
        if !(self.phenotypes_sd >= 0.0) || !self.phenotypes_mean.is_finite() {
            return Err(PatientError::InvalidConfig("phenotype count distribution must be finite with sd >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) {
            return Err(PatientError::InvalidConfig("hard_fraction must lie in [0, 1]".into()));
        }
        if self.causative_pool == Some(0) {
            return Err(PatientError::InvalidConfig("causative_pool must be >= 1".into()));
        }
        Ok(())
    }
}

/// Phenotype nodes within two hops of `gene`, sorted.
fn two_hop_phenotypes(graph: &KnowledgeGraph, gene: usize) -> Vec<usize> {
    graph
        .k_hop_nodes(&[gene], 2)
        .expect("gene index is valid")
        .into_iter()
        .filter(|&v| graph.node_type(v) == NodeType::Phenotype)
        .collect()
}

/// Generates a deterministic cohort. Each patient owns an RNG stream keyed
/// by `(seed, patient index)`.
pub fn simulate_cohort(graph: &KnowledgeGraph, config: &SimulatorConfig) -> Result<Vec<PatientRecord>, PatientError> {
    config.validate()?;
    let genes: Vec<usize> = graph.nodes_of_type(NodeType::GeneProtein).collect();
    let all_phenotypes: Vec<usize> = graph.nodes_of_type(NodeType::Phenotype).collect();
    let neighborhoods: Vec<Vec<usize>> = genes.iter().map(|&g| two_hop_phenotypes(graph, g)).collect();
    let eligible: Vec<usize> = (0..genes.len()).filter(|&k| !neighborhoods[k].is_empty()).collect();
    if eligible.is_empty() {
        return Err(PatientError::NoEligibleGene);
    }
    let pool: Vec<usize> = match config.causative_pool {
        Some(k) if k < eligible.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(u64::MAX);
            let mut picked: Vec<usize> = eligible.choose_multiple(&mut rng, k).copied().collect();
            picked.sort_unstable();
            picked
        }
        _ => eligible,
    };
    let count_dist = Normal::new(config.phenotypes_mean, config.phenotypes_sd).expect("validated");
    let id = |v: usize| graph.node(v).external_id.clone();

    let mut cohort = Vec::with_capacity(config.n_patients);
    for i in 0..config.n_patients {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(i as u64);
        let k_true = *pool.choose(&mut rng).expect("pool is non-empty");
        let neigh = &neighborhoods[k_true];

        let wanted = count_dist.sample(&mut rng).round().clamp(1.0, neigh.len() as f64) as usize;
        let mut phenos: Vec<usize> = neigh.choose_multiple(&mut rng, wanted).copied().collect();
        let others: Vec<usize> = all_phenotypes.iter().copied().filter(|p| !phenos.contains(p)).collect();
        phenos.extend(others.choose_multiple(&mut rng, config.noise_phenotypes.min(others.len())));

        let true_set: BTreeSet<usize> = neigh.iter().copied().collect();
        let hard: Vec<usize> = (0..genes.len())
            .filter(|&k| k != k_true && neighborhoods[k].iter().any(|p| true_set.contains(p)))
            .collect();
        let n_hard = ((config.distractor_candidates as f64) * config.hard_fraction).round() as usize;
        let mut chosen: Vec<usize> = hard.choose_multiple(&mut rng, n_hard.min(hard.len())).copied().collect();
        let rest: Vec<usize> = (0..genes.len()).filter(|k| *k != k_true && !chosen.contains(k)).collect();
        let remaining = config.distractor_candidates.saturating_sub(chosen.len()).min(rest.len());
        chosen.extend(rest.choose_multiple(&mut rng, remaining));
        chosen.push(k_true);
        chosen.shuffle(&mut rng);

        cohort.push(PatientRecord {
            id: format!("sim{i:05}"),
            phenotypes: phenos.into_iter().map(id).collect(),
            candidate_genes: Some(chosen.iter().map(|&k| id(genes[k])).collect()),
            true_gene: Some(id(genes[k_true])),
        });
    }
    Ok(cohort)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::synthetic::{generate, SyntheticGraphConfig};
    use crate::kg::{Edge, NodeRef};

    fn tiny_graph() -> KnowledgeGraph {
        let nodes = vec![
            NodeRef { index: 0, external_id: "HP:1".into(), node_type: NodeType::Phenotype, symbol: None },
            NodeRef { index: 1, external_id: "D:1".into(), node_type: NodeType::Disease, symbol: None },
            NodeRef { index: 2, external_id: "G:1".into(), node_type: NodeType::GeneProtein, symbol: None },
        ];
        KnowledgeGraph::new(nodes, [Edge { src: 0, dst: 1, relation: 0 }, Edge { src: 1, dst: 2, relation: 1 }], 15).unwrap()
    }

    fn load_str(body: &str) -> Result<Vec<PatientRecord>, PatientError> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("patients.jsonl");
        fs::write(&p, body).unwrap();
        load_patients(&p, &tiny_graph())
    }

    #[test]
    fn loads_single_record() {
        let recs = load_str(r#"{"id":"p1","positive_phenotypes":["HP:1"],"true_gene":"G:1"}"#).unwrap();
        assert_eq!(recs.len(), 1);
        let r = recs[0].resolve(&tiny_graph()).unwrap();
        assert_eq!((r.phenotypes, r.true_gene, r.candidates), (vec![0], Some(2), None));
    }

    #[test]
    fn drops_records_with_missing_causative_gene() {
        let body = "{\"id\":\"p1\",\"positive_phenotypes\":[\"HP:1\"],\"true_gene\":\"G:1\"}\n{\"id\":\"p2\",\"positive_phenotypes\":[\"HP:1\"],\"true_gene\":\"G:404\"}\n";
        let recs = load_str(body).unwrap();
        assert_eq!(recs.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), vec!["p1"]);
    }

    #[test]
    fn load_errors() {
        assert!(matches!(load_str(r#"{"id":"p1","positive_phenotypes":[]}"#), Err(PatientError::EmptyPhenotypes(_))));
        assert!(matches!(load_str(r#"{"id":"p1","positive_phenotypes":["HP:2"]}"#), Err(PatientError::UnknownPhenotype { .. })));
        assert!(matches!(load_str("{not json"), Err(PatientError::Malformed { line: 1, .. })));
        assert!(matches!(load_str(r#"{"id":"p1","positive_phenotypes":["G:1"]}"#), Err(PatientError::NotPhenotype { .. })));
    }

    #[test]
    fn single_patient_phenotypes_near_true_gene() {
        let g = generate(&SyntheticGraphConfig::default());
        let cfg = SimulatorConfig { n_patients: 1, distractor_candidates: 0, noise_phenotypes: 0, seed: 7, ..Default::default() };
        let cohort = simulate_cohort(&g, &cfg).unwrap();
        let p = cohort[0].resolve(&g).unwrap();
        let near = g.k_hop_nodes(&[p.true_gene.unwrap()], 2).unwrap();
        assert!(p.phenotypes.iter().all(|ph| near.contains(ph)));
        assert_eq!(p.candidates.unwrap(), vec![p.true_gene.unwrap()]);
    }

    #[test]
    fn deterministic_given_seed() {
        let g = generate(&SyntheticGraphConfig::default());
        let cfg = SimulatorConfig { n_patients: 10, seed: 3, ..Default::default() };
        assert_eq!(simulate_cohort(&g, &cfg).unwrap(), simulate_cohort(&g, &cfg).unwrap());
        let other = simulate_cohort(&g, &SimulatorConfig { seed: 4, ..cfg.clone() }).unwrap();
        assert_ne!(simulate_cohort(&g, &cfg).unwrap(), other);
    }

    #[test]
    fn candidate_lists_of_twenty() {
        let g = generate(&SyntheticGraphConfig::default());
        let cfg = SimulatorConfig { n_patients: 50, distractor_candidates: 19, seed: 11, ..Default::default() };
        for rec in simulate_cohort(&g, &cfg).unwrap() {
            let c = rec.candidate_genes.as_ref().unwrap();
            assert_eq!(c.len(), 20);
            assert_eq!(c.iter().collect::<BTreeSet<_>>().len(), 20);
            assert!(c.contains(rec.true_gene.as_ref().unwrap()));
            let r = rec.resolve(&g).unwrap();
            let near = g.k_hop_nodes(&r.phenotypes, 2).unwrap();
            assert!(near.contains(&r.true_gene.unwrap()));
        }
    }

    #[test]
    fn causative_pool_limits_diagnoses() {
        let g = generate(&SyntheticGraphConfig::default());
        let cfg = SimulatorConfig { n_patients: 60, causative_pool: Some(5), seed: 1, ..Default::default() };
        let genes: BTreeSet<_> = simulate_cohort(&g, &cfg).unwrap().into_iter().map(|r| r.true_gene).collect();
        assert!(genes.len() <= 5);
    }

    #[test]
    fn no_eligible_gene() {
        let nodes = vec![NodeRef { index: 0, external_id: "G".into(), node_type: NodeType::GeneProtein, symbol: None }];
        let g = KnowledgeGraph::new(nodes, [], 15).unwrap();
        assert!(matches!(simulate_cohort(&g, &SimulatorConfig::default()), Err(PatientError::NoEligibleGene)));
    }

    #[test]
    fn jsonl_round_trip() {
        let g = generate(&SyntheticGraphConfig::default());
        let cohort = simulate_cohort(&g, &SimulatorConfig { n_patients: 5, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("patients.jsonl");
        write_patients(&p, &cohort).unwrap();
        let first = fs::read(&p).unwrap();
        let back = load_patients(&p, &g).unwrap();
        assert_eq!(back, cohort);
        write_patients(&p, &back).unwrap();
        assert_eq!(fs::read(&p).unwrap(), first);
    }

    fn two_component_graph() -> KnowledgeGraph {
        let n = |i: usize, id: &str, t| NodeRef { index: i, external_id: id.into(), node_type: t, symbol: None };
        let nodes = vec![
            n(0, "HP:1", NodeType::Phenotype),
            n(1, "D:1", NodeType::Disease),
            n(2, "G:1", NodeType::GeneProtein),
            n(3, "G:2", NodeType::GeneProtein),
            n(4, "G:3", NodeType::GeneProtein),
        ];
        let e = |a, b| Edge { src: a, dst: b, relation: 0 };
        KnowledgeGraph::new(nodes, [e(0, 1), e(1, 2), e(2, 3)], 15).unwrap()
    }

    fn record(cands: Option<&[&str]>, gene: &str) -> PatientRecord {
        PatientRecord {
            id: "p".into(),
            phenotypes: vec!["HP:1".into()],
            candidate_genes: cands.map(|c| c.iter().map(|s| s.to_string()).collect()),
            true_gene: Some(gene.into()),
        }
    }

    #[test]
    fn prepare_drops_unreachable_candidates() {
        let g = two_component_graph();
        let rec = record(Some(&["G:3", "G:2", "G:1"]), "G:1");
        let Preparation::Ready(p) = prepare_patient(&g, &rec, CandidateSource::default(), SubgraphOptions::default()).unwrap() else {
            panic!("expected a prepared patient")
        };
        let globals: Vec<usize> = p.subgraph.candidate_genes.iter().map(|&l| p.subgraph.local_to_global[l]).collect();
        assert_eq!(globals, vec![3, 2]);
        assert_eq!(p.true_position, Some(1));
    }

    #[test]
    fn prepare_khop_excludes_distant_causative_gene() {
        let g = two_component_graph();
        let near = prepare_patient(&g, &record(None, "G:1"), CandidateSource::KHop { k: 2 }, SubgraphOptions::default()).unwrap();
        assert!(matches!(near, Preparation::Ready(p) if p.true_position == Some(0)));
        let far = prepare_patient(&g, &record(None, "G:2"), CandidateSource::KHop { k: 2 }, SubgraphOptions::default()).unwrap();
        assert!(matches!(far, Preparation::Excluded(_)));
        let none = prepare_patient(&g, &record(Some(&["G:3"]), "G:3"), CandidateSource::default(), SubgraphOptions::default()).unwrap();
        assert!(matches!(none, Preparation::Excluded(_)));
    }
}
