//! Breadth-first neighborhoods, deterministic shortest paths and induced
//! patient subgraphs.

use std::collections::{BTreeSet, VecDeque};

use super::{GraphError, KnowledgeGraph, NodeType};

const UNREACHED: u32 = u32::MAX;

/// Extraction switches shared by both construction modes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SubgraphOptions {
    /// Forbid phenotype nodes other than the patient's own, so the subgraph
    /// carries no knowledge-graph phenotype augmentation.
    pub patient_phenotypes_only: bool,
}

/// A patient's local view of the knowledge graph.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientSubgraph {
    /// Global index of every local node, strictly increasing.
    pub local_to_global: Vec<usize>,
    /// Undirected local edges `(a, b)` with `a < b`.
    pub local_edges: Vec<(usize, usize)>,
    pub local_edge_relations: Vec<usize>,
    pub edge_attr_dim: usize,
    /// Marks the patient's phenotype terms.
    pub phenotype_mask: Vec<bool>,
    /// Marks every gene/protein node.
    pub gene_mask: Vec<bool>,
    /// Local indices of the genes to rank, in caller order.
    pub candidate_genes: Vec<usize>,
    pub true_gene: Option<usize>,
    /// Row-major `n x feature_dim` copy of the global features, if any.
    pub features: Option<Vec<f32>>,
    pub feature_dim: usize,
    /// Patient phenotypes left out because no candidate is reachable from them.
    pub dropped_phenotypes: Vec<usize>,
}

impl PatientSubgraph {
    pub fn node_count(&self) -> usize {
        self.local_to_global.len()
    }

    pub fn edge_count(&self) -> usize {
        self.local_edges.len()
    }

    pub fn local_index(&self, global: usize) -> Option<usize> {
        self.local_to_global.binary_search(&global).ok()
    }

    /// One-hot `edge_count x edge_attr_dim` attribute matrix.
    pub fn edge_attrs(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.edge_count() * self.edge_attr_dim];
        for (k, &r) in self.local_edge_relations.iter().enumerate() {
            out[k * self.edge_attr_dim + r] = 1.0;
        }
        out
    }

    pub fn phenotype_count(&self) -> usize {
        self.phenotype_mask.iter().filter(|&&m| m).count()
    }

    pub fn component_count(&self) -> usize {
        let mut parent: Vec<usize> = (0..self.node_count()).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for &(a, b) in &self.local_edges {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra] = rb;
            }
        }
        (0..self.node_count()).filter(|&i| find(&mut parent, i) == i).count()
    }

    /// Relabels nodes so that old local node `i` becomes `perm[i]`.
    ///
    /// The result no longer has sorted `local_to_global`; it exists to test
    /// that encoders are equivariant to node order.
    pub fn permuted(&self, perm: &[usize]) -> PatientSubgraph {
        let n = self.node_count();
        assert_eq!(perm.len(), n);
        let mut out = self.clone();
        for i in 0..n {
            out.local_to_global[perm[i]] = self.local_to_global[i];
            out.phenotype_mask[perm[i]] = self.phenotype_mask[i];
            out.gene_mask[perm[i]] = self.gene_mask[i];
        }
        out.local_edges = self.local_edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
        out.candidate_genes = self.candidate_genes.iter().map(|&c| perm[c]).collect();
        out.true_gene = self.true_gene.map(|t| perm[t]);
        if let Some(f) = &self.features {
            let d = self.feature_dim;
            let mut nf = vec![0.0; f.len()];
            for i in 0..n {
                nf[perm[i] * d..(perm[i] + 1) * d].copy_from_slice(&f[i * d..(i + 1) * d]);
            }
            out.features = Some(nf);
        }
        out
    }
}

impl KnowledgeGraph {
    /// Hop distances from the nearest source; `None` marks unreachable nodes.
    /// Only nodes passing `allowed` are expanded past (sources always are).
    pub fn bfs_distances(&self, sources: &[usize], max_depth: Option<usize>, allowed: &dyn Fn(usize) -> bool) -> Vec<Option<usize>> {
        self.bfs_raw(sources, max_depth, allowed).into_iter().map(|d| (d != UNREACHED).then_some(d as usize)).collect()
    }

    fn bfs_raw(&self, sources: &[usize], max_depth: Option<usize>, allowed: &dyn Fn(usize) -> bool) -> Vec<u32> {
        let mut dist = vec![UNREACHED; self.node_count()];
        let mut queue = VecDeque::new();
        for &s in sources {
            if dist[s] == UNREACHED {
                dist[s] = 0;
                queue.push_back(s);
            }
        }
        while let Some(u) = queue.pop_front() {
            let d = dist[u];
            if max_depth.is_some_and(|m| d as usize >= m) {
                continue;
            }
            for &(v, _) in self.neighbors(u) {
                if dist[v] == UNREACHED && allowed(v) {
                    dist[v] = d + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Every node within `k` hops of any seed, sorted.
    pub fn k_hop_nodes(&self, seeds: &[usize], k: usize) -> Result<Vec<usize>, GraphError> {
        self.k_hop_nodes_filtered(seeds, k, &|_| true)
    }

    pub fn k_hop_nodes_filtered(&self, seeds: &[usize], k: usize, allowed: &dyn Fn(usize) -> bool) -> Result<Vec<usize>, GraphError> {
        for &s in seeds {
            self.check_index(s)?;
        }
        let dist = self.bfs_raw(seeds, Some(k), allowed);
        Ok((0..self.node_count()).filter(|&v| dist[v] != UNREACHED).collect())
    }

    fn check_phenotypes(&self, phenotypes: &[usize]) -> Result<(), GraphError> {
        for &p in phenotypes {
            self.check_index(p)?;
            if self.node_type(p) != NodeType::Phenotype {
                return Err(GraphError::NotPhenotype(self.node(p).external_id.clone()));
            }
        }
        Ok(())
    }

    fn phenotype_filter<'a>(&'a self, phenotypes: &'a [usize], opts: SubgraphOptions) -> impl Fn(usize) -> bool + 'a {
        move |v| !opts.patient_phenotypes_only || self.node_type(v) != NodeType::Phenotype || phenotypes.contains(&v)
    }

    /// Gene/protein nodes in the union of each phenotype's `k`-hop
    /// neighborhood, sorted by index.
    pub fn candidate_genes_from_khop(&self, phenotypes: &[usize], k: usize) -> Result<Vec<usize>, GraphError> {
        self.candidate_genes_from_khop_with(phenotypes, k, SubgraphOptions::default())
    }

    pub fn candidate_genes_from_khop_with(&self, phenotypes: &[usize], k: usize, opts: SubgraphOptions) -> Result<Vec<usize>, GraphError> {
        self.check_phenotypes(phenotypes)?;
        let allowed = self.phenotype_filter(phenotypes, opts);
        let near = self.k_hop_nodes_filtered(phenotypes, k, &allowed)?;
        Ok(near.into_iter().filter(|&v| self.node_type(v) == NodeType::GeneProtein).collect())
    }

    /// Walks the lexicographically smallest minimum-length path from `from`
    /// to the BFS root that produced `dist_to_target`.
    fn walk_down(&self, from: usize, dist_to_target: &[u32], allowed: &dyn Fn(usize) -> bool) -> Vec<usize> {
        let mut path = vec![from];
        let mut cur = from;
        while dist_to_target[cur] > 0 {
            let want = dist_to_target[cur] - 1;
            let next = self
                .neighbors(cur)
                .iter()
                .map(|&(v, _)| v)
                .find(|&v| dist_to_target[v] == want && (want == 0 || allowed(v)))
                .expect("BFS layers guarantee a predecessor");
            path.push(next);
            cur = next;
        }
        path
    }

    /// Lexicographically smallest shortest path (by node-index sequence)
    /// from `from` to `to`, if one exists.
    pub fn shortest_path(&self, from: usize, to: usize) -> Option<Vec<usize>> {
        let dist = self.bfs_raw(&[to], None, &|_| true);
        (dist[from] != UNREACHED).then(|| self.walk_down(from, &dist, &|_| true))
    }

    /// Builds a patient subgraph from one deterministic shortest path per
    /// reachable (phenotype, candidate) pair plus connectivity fill.
    ///
    /// Phenotypes that reach no candidate are dropped and recorded in
    /// [`PatientSubgraph::dropped_phenotypes`].
    pub fn shortest_path_subgraph(&self, phenotypes: &[usize], candidates: &[usize], opts: SubgraphOptions) -> Result<PatientSubgraph, GraphError> {
        if phenotypes.is_empty() {
            return Err(GraphError::EmptyPhenotypes);
        }
        if candidates.is_empty() {
            return Err(GraphError::EmptyCandidates);
        }
        self.check_phenotypes(phenotypes)?;
        for &c in candidates {
            self.check_index(c)?;
        }
        let phenotypes = dedup_stable(phenotypes);
        let candidates = dedup_stable(candidates);
        let allowed = self.phenotype_filter(&phenotypes, opts);

        let mut members: BTreeSet<usize> = BTreeSet::new();
        let mut reaches_any = vec![false; phenotypes.len()];
        for &c in &candidates {
            let dist = self.bfs_raw(&[c], None, &allowed);
            let mut reached = false;
            for (k, &p) in phenotypes.iter().enumerate() {
                if dist[p] != UNREACHED {
                    members.extend(self.walk_down(p, &dist, &allowed));
                    reached = true;
                    reaches_any[k] = true;
                }
            }
            if !reached {
                return Err(GraphError::UnreachableCandidate(self.node(c).external_id.clone()));
            }
        }
        let dropped: Vec<usize> = phenotypes.iter().zip(&reaches_any).filter(|(_, &r)| !r).map(|(&p, _)| p).collect();
        if !dropped.is_empty() {
            log::warn!("{} phenotype(s) reach no candidate and were left out", dropped.len());
        }
        self.connect_components(&mut members, &allowed)?;

        let nodes: Vec<usize> = members.into_iter().collect();
        let mut sg = self.induce_subgraph(&nodes)?;
        let kept: BTreeSet<usize> = phenotypes.iter().copied().filter(|p| !dropped.contains(p)).collect();
        sg.phenotype_mask = sg.local_to_global.iter().map(|g| kept.contains(g)).collect();
        sg.candidate_genes = candidates.iter().map(|&c| sg.local_index(c).expect("candidate lies on its own path")).collect();
        sg.dropped_phenotypes = dropped;
        Ok(sg)
    }

    /// Joins the components of the subgraph induced by `members`: the
    /// component holding the lowest index is linked to the nearest other
    /// component through a global shortest path, until one remains.
    fn connect_components(&self, members: &mut BTreeSet<usize>, allowed: &dyn Fn(usize) -> bool) -> Result<(), GraphError> {
        loop {
            let label = self.component_labels(members);
            let first = *members.iter().next().expect("non-empty member set");
            let root = label[&first];
            if label.values().all(|&l| l == root) {
                return Ok(());
            }
            let sources: Vec<usize> = members.iter().copied().filter(|m| label[m] == root).collect();
            // Layered BFS recording the smallest-index parent of each node.
            let mut parent = vec![usize::MAX; self.node_count()];
            let mut seen = vec![false; self.node_count()];
            sources.iter().for_each(|&s| seen[s] = true);
            let mut layer = sources;
            let target = loop {
                let mut next = BTreeSet::new();
                for &u in &layer {
                    for &(v, _) in self.neighbors(u) {
                        if !seen[v] && (allowed(v) || members.contains(&v)) {
                            seen[v] = true;
                            parent[v] = u;
                            next.insert(v);
                        }
                    }
                }
                if next.is_empty() {
                    return Err(GraphError::Disconnected(self.node(first).external_id.clone()));
                }
                if let Some(&t) = next.iter().find(|v| label.get(v).is_some_and(|&l| l != root)) {
                    break t;
                }
                layer = next.into_iter().collect();
            };
            let mut cur = target;
            while parent[cur] != usize::MAX {
                members.insert(cur);
                cur = parent[cur];
            }
        }
    }

    fn component_labels(&self, members: &BTreeSet<usize>) -> std::collections::HashMap<usize, usize> {
        let mut label = std::collections::HashMap::new();
        for &start in members {
            if label.contains_key(&start) {
                continue;
            }
            label.insert(start, start);
            let mut stack = vec![start];
            while let Some(u) = stack.pop() {
                for &(v, _) in self.neighbors(u) {
                    if members.contains(&v) && !label.contains_key(&v) {
                        label.insert(v, start);
                        stack.push(v);
                    }
                }
            }
        }
        label
    }

    /// Induced subgraph over `nodes` with local indices in ascending global
    /// order. Phenotype mask marks every phenotype node; candidates are every
    /// gene node.
    pub fn induce_subgraph(&self, nodes: &[usize]) -> Result<PatientSubgraph, GraphError> {
        if nodes.is_empty() {
            return Err(GraphError::EmptyNodeSet);
        }
        for &v in nodes {
            self.check_index(v)?;
        }
        let mut local_to_global = nodes.to_vec();
        local_to_global.sort_unstable();
        local_to_global.dedup();
        let local = |g: usize| local_to_global.binary_search(&g).ok();

        let mut local_edges = Vec::new();
        let mut local_edge_relations = Vec::new();
        for (a, &ga) in local_to_global.iter().enumerate() {
            for &(gb, k) in self.neighbors(ga) {
                if gb > ga {
                    if let Some(b) = local(gb) {
                        local_edges.push((a, b));
                        local_edge_relations.push(self.edges()[k].relation);
                    }
                }
            }
        }
        let phenotype_mask: Vec<bool> = local_to_global.iter().map(|&g| self.node_type(g) == NodeType::Phenotype).collect();
        let gene_mask: Vec<bool> = local_to_global.iter().map(|&g| self.node_type(g) == NodeType::GeneProtein).collect();
        let candidate_genes = (0..local_to_global.len()).filter(|&i| gene_mask[i]).collect();
        let (features, feature_dim) = match self.embeddings() {
            Some(e) => (Some(local_to_global.iter().flat_map(|&g| e.row(g).iter().copied()).collect()), e.dim),
            None => (None, 0),
        };
        Ok(PatientSubgraph {
            local_to_global,
            local_edges,
            local_edge_relations,
            edge_attr_dim: self.edge_attr_dim(),
            phenotype_mask,
            gene_mask,
            candidate_genes,
            true_gene: None,
            features,
            feature_dim,
            dropped_phenotypes: Vec::new(),
        })
    }
}

fn dedup_stable(xs: &[usize]) -> Vec<usize> {
    let mut seen = BTreeSet::new();
    xs.iter().copied().filter(|x| seen.insert(*x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{Edge, NodeRef};

    fn graph(types: &[NodeType], edges: &[(usize, usize)]) -> KnowledgeGraph {
        let nodes = types
            .iter()
            .enumerate()
            .map(|(i, &t)| NodeRef { index: i, external_id: format!("N{i}"), node_type: t, symbol: None })
            .collect();
        KnowledgeGraph::new(nodes, edges.iter().map(|&(s, d)| Edge { src: s, dst: d, relation: 0 }), 15).unwrap()
    }

    use NodeType::{Disease as D, GeneProtein as G, Phenotype as P};

    #[test]
    fn k_hop_on_path() {
        // p - a - g
        let g = graph(&[P, D, G], &[(0, 1), (1, 2)]);
        assert_eq!(g.k_hop_nodes(&[0], 0).unwrap(), vec![0]);
        assert_eq!(g.k_hop_nodes(&[0], 1).unwrap(), vec![0, 1]);
        assert_eq!(g.k_hop_nodes(&[0], 2).unwrap(), vec![0, 1, 2]);
        assert!(matches!(g.k_hop_nodes(&[3], 1), Err(GraphError::InvalidIndex(3))));
    }

    #[test]
    fn khop_candidates() {
        let g = graph(&[P, D, G], &[(0, 1), (1, 2)]);
        assert_eq!(g.candidate_genes_from_khop(&[0], 2).unwrap(), vec![2]);
        assert!(g.candidate_genes_from_khop(&[0], 1).unwrap().is_empty());
        assert!(matches!(g.candidate_genes_from_khop(&[1], 2), Err(GraphError::NotPhenotype(_))));
    }

    #[test]
    fn shortest_paths_per_candidate() {
        // p=0, a=1, g1=2 (distance 2); b=3, c=4, g2=5 (distance 3)
        let g = graph(&[P, D, G, D, D, G], &[(0, 1), (1, 2), (0, 3), (3, 4), (4, 5)]);
        let sg = g.shortest_path_subgraph(&[0], &[2, 5], SubgraphOptions::default()).unwrap();
        assert_eq!(sg.local_to_global, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(sg.candidate_genes, vec![2, 5]);
        assert_eq!(sg.phenotype_mask, vec![true, false, false, false, false, false]);
        assert_eq!(sg.component_count(), 1);
    }

    #[test]
    fn adjacent_pair() {
        let g = graph(&[P, G, D], &[(0, 1), (1, 2)]);
        let sg = g.shortest_path_subgraph(&[0], &[1], SubgraphOptions::default()).unwrap();
        assert_eq!((sg.node_count(), sg.edge_count()), (2, 1));
    }

    #[test]
    fn unreachable_candidate() {
        let g = graph(&[P, G, G], &[(0, 1)]);
        assert!(matches!(
            g.shortest_path_subgraph(&[0], &[1, 2], SubgraphOptions::default()),
            Err(GraphError::UnreachableCandidate(id)) if id == "N2"
        ));
        assert!(matches!(g.shortest_path_subgraph(&[], &[1], SubgraphOptions::default()), Err(GraphError::EmptyPhenotypes)));
    }

    #[test]
    fn lexicographic_tie_break() {
        // Two shortest routes 0-1-3 and 0-2-3; the smaller index wins.
        let g = graph(&[P, D, D, G], &[(0, 2), (2, 3), (0, 1), (1, 3)]);
        assert_eq!(g.shortest_path(0, 3).unwrap(), vec![0, 1, 3]);
        let sg = g.shortest_path_subgraph(&[0], &[3], SubgraphOptions::default()).unwrap();
        assert_eq!(sg.local_to_global, vec![0, 1, 3]);
    }

    #[test]
    fn isolated_phenotype_is_dropped() {
        let g = graph(&[P, G, P], &[(0, 1)]);
        let sg = g.shortest_path_subgraph(&[0, 2], &[1], SubgraphOptions::default()).unwrap();
        assert_eq!(sg.dropped_phenotypes, vec![2]);
        assert_eq!(sg.phenotype_count(), 1);
    }

    #[test]
    fn patient_only_mode_avoids_foreign_phenotypes() {
        // 0(P, patient) - 1(P, foreign) - 2(G); detour 0 - 3(D) - 4(D) - 2
        let g = graph(&[P, P, G, D, D], &[(0, 1), (1, 2), (0, 3), (3, 4), (4, 2)]);
        let full = g.shortest_path_subgraph(&[0], &[2], SubgraphOptions::default()).unwrap();
        assert_eq!(full.local_to_global, vec![0, 1, 2]);
        let only = g.shortest_path_subgraph(&[0], &[2], SubgraphOptions { patient_phenotypes_only: true }).unwrap();
        assert_eq!(only.local_to_global, vec![0, 2, 3, 4]);
        assert_eq!(g.candidate_genes_from_khop_with(&[0], 2, SubgraphOptions { patient_phenotypes_only: true }).unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn induced_edges() {
        let tri = graph(&[P, D, G], &[(0, 1), (1, 2), (0, 2)]);
        assert_eq!(tri.induce_subgraph(&[0, 1]).unwrap().edge_count(), 1);
        let all = tri.induce_subgraph(&[2, 0, 1]).unwrap();
        assert_eq!(all.edge_count(), 3);
        assert_eq!(all.local_to_global, vec![0, 1, 2]);
        assert!(matches!(tri.induce_subgraph(&[]), Err(GraphError::EmptyNodeSet)));
        assert!(matches!(tri.induce_subgraph(&[7]), Err(GraphError::InvalidIndex(7))));
    }

    #[test]
    fn permutation_relabels_consistently() {
        let g = graph(&[P, D, G], &[(0, 1), (1, 2)]);
        let sg = g.shortest_path_subgraph(&[0], &[2], SubgraphOptions::default()).unwrap();
        let p = sg.permuted(&[2, 0, 1]);
        assert_eq!(p.local_to_global, vec![1, 2, 0]);
        assert_eq!(p.candidate_genes, vec![1]);
        assert_eq!(p.phenotype_mask, vec![false, false, true]);
        assert_eq!(p.component_count(), 1);
    }
}
