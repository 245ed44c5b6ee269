//! Ranking, retrieval metrics and evaluation reports.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::KnowledgeGraph;
use crate::model::{Model, ModelError};
use crate::patient::{prepare_patient, CandidateSource, PatientError, PatientRecord, PreparedPatient, Preparation};
use crate::scalar::Scalar;

pub const NDCG_KS: [usize; 8] = [1, 3, 5, 10, 25, 50, 75, 100];
pub const TOP_Q: [usize; 7] = [25, 50, 100, 170, 300, 500, 1000];
pub const HITS: [usize; 4] = [1, 3, 5, 10];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Patient(#[from] PatientError),
    #[error("dimension mismatch: patient has {patient}, gene {gene} has {found}")]
    DimensionMismatch { patient: usize, gene: String, found: usize },
    #[error("{genes} gene embeddings but {ids} ids")]
    IdCount { genes: usize, ids: usize },
    #[error("nothing to rank")]
    EmptyCandidates,
    #[error("gene {0} appears twice")]
    DuplicateGene(String),
    #[error("reference set is empty")]
    EmptyReference,
    #[error("cutoff must be >= 1")]
    ZeroCutoff,
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub gene: String,
    pub score: f64,
}

/// Candidates sorted by descending score, ties by ascending gene id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedGeneList {
    pub patient: String,
    pub entries: Vec<RankedEntry>,
}

impl RankedGeneList {
    /// 1-based position of `gene`.
    pub fn rank_of(&self, gene: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.gene == gene).map(|i| i + 1)
    }
}

/// Orders genes by `<p, g>`.
pub fn rank<T: Scalar>(patient: &str, p: &[T], genes: &[Vec<T>], ids: &[String]) -> Result<RankedGeneList, EvalError> {
    if genes.len() != ids.len() {
        return Err(EvalError::IdCount { genes: genes.len(), ids: ids.len() });
    }
    if genes.is_empty() {
        return Err(EvalError::EmptyCandidates);
    }
    let mut seen = HashSet::new();
    let mut scored = Vec::with_capacity(genes.len());
    for (g, id) in genes.iter().zip(ids) {
        if g.len() != p.len() {
            return Err(EvalError::DimensionMismatch { patient: p.len(), gene: id.clone(), found: g.len() });
        }
        if !seen.insert(id.as_str()) {
            return Err(EvalError::DuplicateGene(id.clone()));
        }
        let s: T = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
        scored.push((s, id));
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then_with(|| a.1.cmp(b.1)));
    Ok(RankedGeneList {
        patient: patient.to_string(),
        entries: scored.into_iter().map(|(s, id)| RankedEntry { gene: id.clone(), score: s.as_f64() }).collect(),
    })
}

/// `1 / rank`, or 0 with `false` when the gene is absent.
pub fn reciprocal_rank(list: &RankedGeneList, gene: &str) -> (f64, bool) {
    match list.rank_of(gene) {
        Some(r) => (1.0 / r as f64, true),
        None => (0.0, false),
    }
}

/// Single-relevant nDCG: `1 / log2(rank + 1)` within the cutoff.
pub fn ndcg_at_k(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

pub fn hits_at(rank: Option<usize>, j: usize) -> f64 {
    if rank.is_some_and(|r| r <= j) {
        1.0
    } else {
        0.0
    }
}

pub fn mean_reciprocal_rank(ranks: &[Option<usize>]) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().map(|r| r.map_or(0.0, |r| 1.0 / r as f64)).sum::<f64>() / ranks.len() as f64
}

/// An embedding tagged with its causative gene.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbedding<T> {
    pub embedding: Vec<T>,
    pub label: String,
}

fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na: T = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb: T = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    let eps = T::of(crate::autodiff::NORMALIZE_EPS);
    dot / (na.max(eps) * nb.max(eps))
}

/// 0-based position, among the neighbors of each test item sorted by
/// descending cosine similarity (ties by reference order), of the first
/// neighbor sharing its label. With `loo`, test and reference are the same
/// set and an item never neighbors itself.
fn first_match_positions<T: Scalar>(test: &[LabeledEmbedding<T>], reference: &[LabeledEmbedding<T>], loo: bool) -> Vec<Option<usize>> {
    test.iter()
        .enumerate()
        .map(|(i, t)| {
            let mut sims: Vec<(T, usize)> = reference
                .iter()
                .enumerate()
                .filter(|(j, _)| !(loo && *j == i))
                .map(|(j, r)| (cosine(&t.embedding, &r.embedding), j))
                .collect();
            sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
            sims.iter().position(|&(_, j)| reference[j].label == t.label)
        })
        .collect()
}

fn match_fractions(positions: &[Option<usize>], qs: &[usize], available: usize) -> Result<Vec<(usize, f64)>, EvalError> {
    if qs.contains(&0) {
        return Err(EvalError::ZeroCutoff);
    }
    Ok(qs
        .iter()
        .map(|&q| {
            let eff = if q > available {
                log::warn!("top-q cutoff {q} exceeds the {available} reference patients; clamped");
                available
            } else {
                q
            };
            let hits = positions.iter().filter(|p| p.is_some_and(|p| p < eff)).count();
            (q, if positions.is_empty() { 0.0 } else { hits as f64 / positions.len() as f64 })
        })
        .collect())
}

/// Fraction of test patients with a same-gene reference among their `q`
/// nearest references, for each `q`.
pub fn top_q_match<T: Scalar>(test: &[LabeledEmbedding<T>], reference: &[LabeledEmbedding<T>], qs: &[usize]) -> Result<Vec<(usize, f64)>, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    match_fractions(&first_match_positions(test, reference, false), qs, reference.len())
}

/// [`top_q_match`] of a set against itself, each patient excluded from its
/// own neighbors.
pub fn top_q_match_loo<T: Scalar>(set: &[LabeledEmbedding<T>], qs: &[usize]) -> Result<Vec<(usize, f64)>, EvalError> {
    if set.len() < 2 {
        return Err(EvalError::EmptyReference);
    }
    match_fractions(&first_match_positions(set, set, true), qs, set.len() - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientOutcome {
    pub id: String,
    /// 1-based rank of the causative gene; null when absent or excluded.
    pub rank: Option<usize>,
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub mrr: f64,
    pub ndcg: BTreeMap<usize, f64>,
    pub hits: BTreeMap<usize, f64>,
    pub top_q: BTreeMap<usize, f64>,
    pub patients: Vec<PatientOutcome>,
}

impl EvaluationReport {
    /// Aggregates over non-excluded patients.
    pub fn from_outcomes(patients: Vec<PatientOutcome>, ndcg_ks: &[usize], hits: &[usize], top_q: &[(usize, f64)]) -> Self {
        let ranks: Vec<Option<usize>> = patients.iter().filter(|p| !p.excluded).map(|p| p.rank).collect();
        let mean = |f: &dyn Fn(Option<usize>) -> f64| {
            if ranks.is_empty() {
                0.0
            } else {
                ranks.iter().map(|&r| f(r)).sum::<f64>() / ranks.len() as f64
            }
        };
        Self {
            mrr: mean_reciprocal_rank(&ranks),
            ndcg: ndcg_ks.iter().map(|&k| (k, mean(&|r| ndcg_at_k(r, k)))).collect(),
            hits: hits.iter().map(|&j| (j, mean(&|r| hits_at(r, j)))).collect(),
            top_q: top_q.iter().copied().collect(),
            patients,
        }
    }

    pub fn evaluated(&self) -> usize {
        self.patients.iter().filter(|p| !p.excluded).count()
    }

    pub fn excluded(&self) -> usize {
        self.patients.len() - self.evaluated()
    }

    pub fn write(&self, path: &Path) -> Result<(), EvalError> {
        let body = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, body + "\n").map_err(|source| EvalError::Io { path: path.display().to_string(), source })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub source: CandidateSource,
    pub ndcg_ks: Vec<usize>,
    pub hits: Vec<usize>,
    pub top_q: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { source: CandidateSource::default(), ndcg_ks: NDCG_KS.to_vec(), hits: HITS.to_vec(), top_q: TOP_Q.to_vec() }
    }
}

/// Evaluation-mode ranking of one prepared patient, with its unit-norm
/// patient embedding.
pub fn rank_prepared<T: Scalar>(model: &Model<T>, graph: &KnowledgeGraph, prep: &PreparedPatient) -> Result<(RankedGeneList, Vec<T>), EvalError> {
    let emb = model.embed(&prep.subgraph)?;
    let sub = &prep.subgraph;
    let ids: Vec<String> = sub.candidate_genes.iter().map(|&l| graph.node(sub.local_to_global[l]).external_id.clone()).collect();
    Ok((rank(&prep.id, &emb.patient, &emb.genes, &ids)?, emb.patient))
}

/// Ranks every patient and aggregates metrics. Top-q uses `reference` when
/// given, else leave-one-out within the evaluated patients. Also returns the
/// labeled patient embeddings.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    graph: &KnowledgeGraph,
    patients: &[PatientRecord],
    config: &EvalConfig,
    reference: Option<&[LabeledEmbedding<T>]>,
) -> Result<(EvaluationReport, Vec<LabeledEmbedding<T>>), EvalError> {
    model.check_graph(graph)?;
    let opts = model.config().subgraph_options();
    let mut outcomes = Vec::with_capacity(patients.len());
    let mut embedded = Vec::new();
    for rec in patients {
        let Some(gene) = rec.true_gene.clone() else {
            log::warn!("patient {} has no causative gene; excluded", rec.id);
            outcomes.push(PatientOutcome { id: rec.id.clone(), rank: None, excluded: true });
            continue;
        };
        match prepare_patient(graph, rec, config.source, opts)? {
            Preparation::Excluded(why) => {
                log::info!("patient {} excluded: {why}", rec.id);
                outcomes.push(PatientOutcome { id: rec.id.clone(), rank: None, excluded: true });
            }
            Preparation::Ready(prep) => {
                let (list, p) = rank_prepared(model, graph, &prep)?;
                outcomes.push(PatientOutcome { id: rec.id.clone(), rank: list.rank_of(&gene), excluded: false });
                embedded.push(LabeledEmbedding { embedding: p, label: gene });
            }
        }
    }
    let top_q = match reference {
        Some(r) if !r.is_empty() => top_q_match(&embedded, r, &config.top_q)?,
        Some(_) => Vec::new(),
        None if embedded.len() >= 2 => top_q_match_loo(&embedded, &config.top_q)?,
        None => Vec::new(),
    };
    Ok((EvaluationReport::from_outcomes(outcomes, &config.ndcg_ks, &config.hits, &top_q), embedded))
}

/// Unit-norm embeddings of labeled, rankable patients.
pub fn embed_patients<T: Scalar>(
    model: &Model<T>,
    graph: &KnowledgeGraph,
    patients: &[PatientRecord],
    source: CandidateSource,
) -> Result<Vec<LabeledEmbedding<T>>, EvalError> {
    let opts = model.config().subgraph_options();
    let mut out = Vec::new();
    for rec in patients {
        let Some(gene) = &rec.true_gene else { continue };
        if let Preparation::Ready(prep) = prepare_patient(graph, rec, source, opts)? {
            out.push(LabeledEmbedding { embedding: model.embed(&prep.subgraph)?.patient, label: gene.clone() });
        }
    }
    Ok(out)
}
