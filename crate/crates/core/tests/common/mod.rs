#![allow(dead_code)]

pub mod e2e;
pub mod ops;

use phenokg_core::autodiff::{ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
    let values = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::matrix(rows, cols, values).unwrap()
}

/// Result of comparing tape gradients to central differences.
#[derive(Debug)]
pub struct GradReport {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

/// Relative error with a floor so that vanishing components are judged
/// against an absolute scale instead of amplifying round-off.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central finite differences on every scalar of every parameter (or a
/// strided subset when `max_per_param` is smaller than the parameter).
pub fn grad_check<F>(store: &ParamStore<f64>, step: f64, floor: f64, max_per_param: usize, loss: F) -> GradReport
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var,
{
    let mut analytic = store.clone();
    analytic.zero_grads();
    let mut tape = Tape::new();
    let l = loss(&mut tape, &analytic);
    tape.backward(l, &mut analytic).unwrap();

    let eval = |s: &ParamStore<f64>| {
        let mut t = Tape::new();
        let v = loss(&mut t, s);
        t.scalar(v)
    };

    let mut report = GradReport { max_rel: 0.0, worst: String::new(), checked: 0 };
    for id in store.ids() {
        let n = store.get(id).len();
        let stride = n.div_ceil(max_per_param).max(1);
        let grad = analytic.get(id).grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        for i in (0..n).step_by(stride) {
            let mut plus = store.clone();
            plus.get_mut(id).values_mut()[i] += step;
            let mut minus = store.clone();
            minus.get_mut(id).values_mut()[i] -= step;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let err = rel_err(grad[i], numeric, floor);
            report.checked += 1;
            if err > report.max_rel {
                report.max_rel = err;
                report.worst = format!("{}[{i}]: analytic {} numeric {}", store.name(id), grad[i], numeric);
            }
        }
    }
    report
}

/// Random typed graph: the first `n / 4` nodes are phenotypes, the next
/// `n / 4` genes, the rest mixed. Edges appear independently with
/// probability `density`; the graph may be disconnected.
pub fn random_kg(seed: u64, n: usize, density: f64) -> phenokg_core::kg::KnowledgeGraph {
    use phenokg_core::kg::{Edge, KnowledgeGraph, NodeRef, NodeType};
    let mut r = rng(seed);
    let quarter = (n / 4).max(1);
    let others = [NodeType::Disease, NodeType::Pathway, NodeType::MolecularFunction, NodeType::CellularComponent, NodeType::BiologicalProcess];
    let nodes = (0..n)
        .map(|index| {
            let node_type = if index < quarter {
                NodeType::Phenotype
            } else if index < 2 * quarter {
                NodeType::GeneProtein
            } else {
                others[r.random_range(0..others.len())]
            };
            NodeRef { index, external_id: format!("N{index}"), node_type, symbol: None }
        })
        .collect();
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if r.random_bool(density) {
                edges.push(Edge { src: a, dst: b, relation: r.random_range(0..15) });
            }
        }
    }
    KnowledgeGraph::new(nodes, edges, 15).unwrap()
}

/// Breadth-first hop distances from `sources`, written independently of the library.
pub fn bfs_oracle(g: &phenokg_core::kg::KnowledgeGraph, sources: &[usize]) -> Vec<Option<usize>> {
    let n = g.node_count();
    let mut adj = vec![Vec::new(); n];
    for e in g.edges() {
        adj[e.src].push(e.dst);
        adj[e.dst].push(e.src);
    }
    let mut dist = vec![None; n];
    let mut queue = std::collections::VecDeque::new();
    for &s in sources {
        if dist[s].is_none() {
            dist[s] = Some(0);
            queue.push_back(s);
        }
    }
    while let Some(v) = queue.pop_front() {
        for &w in &adj[v] {
            if dist[w].is_none() {
                dist[w] = Some(dist[v].unwrap() + 1);
                queue.push_back(w);
            }
        }
    }
    dist
}
