//! TSV node/edge files and the binary embedding container.
//!
//! * `nodes.tsv`: `index<TAB>external_id<TAB>node_type[<TAB>symbol]`, optional header.
//! * `edges.tsv`: `src<TAB>dst<TAB>relation_kind`; endpoints are node indices
//!   (external ids are also accepted), optional header.
//! * `embeddings.bin`: `PKGE`, u32 LE rows, u32 LE dim, rows*dim f32 LE.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Edge, Embeddings, GraphError, KnowledgeGraph, NodeRef};

pub const EMBEDDINGS_MAGIC: &[u8; 4] = b"PKGE";

fn read(path: &Path) -> Result<String, GraphError> {
    fs::read_to_string(path).map_err(|source| GraphError::Io { path: path.display().to_string(), source })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GraphError + '_ {
    move |source| GraphError::Io { path: path.display().to_string(), source }
}

/// Non-empty lines with their 1-based line numbers; a first line whose
/// `key` field is not an integer is treated as a header.
fn data_lines(text: &str, key: usize) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
        .enumerate()
        .filter(move |(k, (_, l))| !(*k == 0 && l.split('\t').nth(key).is_none_or(|f| f.trim().parse::<usize>().is_err())))
        .map(|(_, (n, l))| (n, l.split('\t').map(str::trim).collect()))
}

fn parse_nodes(text: &str) -> Result<Vec<NodeRef>, GraphError> {
    let mut nodes = Vec::new();
    for (line, fields) in data_lines(text, 0) {
        if fields.len() < 3 {
            return Err(GraphError::Parse { line, message: format!("expected 3 or 4 fields, got {}", fields.len()) });
        }
        let index = fields[0]
            .parse()
            .map_err(|_| GraphError::Parse { line, message: format!("bad index {:?}", fields[0]) })?;
        let symbol = fields.get(3).filter(|s| !s.is_empty()).map(|s| s.to_string());
        nodes.push(NodeRef { index, external_id: fields[1].to_string(), node_type: fields[2].parse()?, symbol });
    }
    nodes.sort_by_key(|n| n.index);
    Ok(nodes)
}

fn parse_edges(text: &str, nodes: &[NodeRef]) -> Result<Vec<Edge>, GraphError> {
    let by_id: std::collections::HashMap<&str, usize> = nodes.iter().map(|n| (n.external_id.as_str(), n.index)).collect();
    let endpoint = |s: &str| -> Result<usize, GraphError> {
        match s.parse::<usize>() {
            Ok(i) if i < nodes.len() => Ok(i),
            Ok(_) => Err(GraphError::DanglingEndpoint(s.to_string())),
            Err(_) => by_id.get(s).copied().ok_or_else(|| GraphError::DanglingEndpoint(s.to_string())),
        }
    };
    let mut edges = Vec::new();
    for (line, fields) in data_lines(text, 2) {
        if fields.len() < 3 {
            return Err(GraphError::Parse { line, message: format!("expected 3 fields, got {}", fields.len()) });
        }
        let relation = fields[2]
            .parse()
            .map_err(|_| GraphError::Parse { line, message: format!("bad relation kind {:?}", fields[2]) })?;
        edges.push(Edge { src: endpoint(fields[0])?, dst: endpoint(fields[1])?, relation });
    }
    Ok(edges)
}

/// Loads and validates a graph from node and edge TSV files.
pub fn load_graph(node_file: &Path, edge_file: &Path, edge_attr_dim: usize) -> Result<KnowledgeGraph, GraphError> {
    let nodes = parse_nodes(&read(node_file)?)?;
    let edges = parse_edges(&read(edge_file)?, &nodes)?;
    KnowledgeGraph::new(nodes, edges, edge_attr_dim)
}

/// Loads `nodes.tsv` and `edges.tsv` from `dir`, plus `embeddings.bin` when present.
pub fn load_graph_dir(dir: &Path, edge_attr_dim: usize) -> Result<KnowledgeGraph, GraphError> {
    let mut g = load_graph(&dir.join("nodes.tsv"), &dir.join("edges.tsv"), edge_attr_dim)?;
    g.attach_embeddings(&dir.join("embeddings.bin"))?;
    Ok(g)
}

/// Writes the graph (and its embeddings, if any) in the canonical directory layout.
pub fn write_graph_dir(graph: &KnowledgeGraph, dir: &Path) -> Result<(), GraphError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut nodes = String::from("index\texternal_id\tnode_type\tsymbol\n");
    for n in graph.nodes() {
        nodes.push_str(&format!("{}\t{}\t{}\t{}\n", n.index, n.external_id, n.node_type, n.symbol.as_deref().unwrap_or("")));
    }
    let mut edges = String::from("src_index\tdst_index\trelation_kind\n");
    for e in graph.edges() {
        edges.push_str(&format!("{}\t{}\t{}\n", e.src, e.dst, e.relation));
    }
    let np = dir.join("nodes.tsv");
    fs::write(&np, nodes).map_err(io_err(&np))?;
    let ep = dir.join("edges.tsv");
    fs::write(&ep, edges).map_err(io_err(&ep))?;
    if let Some(emb) = graph.embeddings() {
        write_embeddings(emb, &dir.join("embeddings.bin"))?;
    }
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<Embeddings, GraphError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 12 || &bytes[..4] != EMBEDDINGS_MAGIC {
        return Err(GraphError::BadEmbeddings("missing PKGE header".into()));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if dim == 0 {
        return Err(GraphError::BadEmbeddings("feature dimension is zero".into()));
    }
    let payload = &bytes[12..];
    let expected = rows * dim * 4;
    if payload.len() != expected {
        return Err(GraphError::BadEmbeddings(format!("payload has {} bytes, header implies {expected}", payload.len())));
    }
    let values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok(Embeddings { rows, dim, values })
}

pub fn write_embeddings(emb: &Embeddings, path: &Path) -> Result<(), GraphError> {
    let mut buf = Vec::with_capacity(12 + emb.values.len() * 4);
    buf.extend_from_slice(EMBEDDINGS_MAGIC);
    buf.extend_from_slice(&(emb.rows as u32).to_le_bytes());
    buf.extend_from_slice(&(emb.dim as u32).to_le_bytes());
    for v in &emb.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}

impl KnowledgeGraph {
    /// Attaches features from an embedding file. A missing file leaves the
    /// graph without features.
    pub fn attach_embeddings(&mut self, path: &Path) -> Result<(), GraphError> {
        if !path.exists() {
            log::info!("no embedding file at {}; node features left unset", path.display());
            return Ok(());
        }
        let emb = read_embeddings(path)?;
        self.set_embeddings(emb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::NodeType;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    fn tiny(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
        let n = write(dir, "nodes.tsv", "index\texternal_id\tnode_type\n0\tHP:1\tPhenotype\n1\tMONDO:1\tDisease\n2\tG:1\tGeneProtein\n");
        let e = write(dir, "edges.tsv", "0\t1\t0\n1\t2\t1\n");
        (n, e)
    }

    #[test]
    fn loads_minimal_graph() {
        let dir = tempfile::tempdir().unwrap();
        let (n, e) = tiny(dir.path());
        let g = load_graph(&n, &e, 15).unwrap();
        assert_eq!(g.node_count(), 3);
        assert_eq!(g.edge_count(), 2);
        assert_eq!(g.node_type(2), NodeType::GeneProtein);
        assert_eq!(g.neighbors(1), &[(0, 0), (2, 1)]);
        // Idempotent load.
        assert_eq!(g, load_graph(&n, &e, 15).unwrap());
    }

    #[test]
    fn rejects_dangling_external_id() {
        let dir = tempfile::tempdir().unwrap();
        let (n, _) = tiny(dir.path());
        let e = write(dir.path(), "bad.tsv", "HP:9999999\t1\t0\n");
        match load_graph(&n, &e, 15) {
            Err(GraphError::DanglingEndpoint(id)) => assert_eq!(id, "HP:9999999"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_unknown_type_and_wide_relation() {
        let dir = tempfile::tempdir().unwrap();
        let n = write(dir.path(), "n.tsv", "0\tA\tAnatomy\n");
        let e = write(dir.path(), "e.tsv", "");
        assert!(matches!(load_graph(&n, &e, 15), Err(GraphError::UnknownNodeType(_))));
        let (n, _) = tiny(dir.path());
        let e = write(dir.path(), "e2.tsv", "0\t1\t16\n");
        assert!(matches!(load_graph(&n, &e, 15), Err(GraphError::RelationOutOfRange { relation: 16, dim: 15 })));
        assert!(load_graph(&n, &e, 17).is_ok());
    }

    #[test]
    fn embeddings_shape_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let (n, e) = tiny(dir.path());
        let mut g = load_graph(&n, &e, 15).unwrap();
        let emb = Embeddings { rows: 3, dim: 4, values: (0..12).map(|v| v as f32).collect() };
        let p = dir.path().join("embeddings.bin");
        write_embeddings(&emb, &p).unwrap();
        g.attach_embeddings(&p).unwrap();
        assert_eq!(g.embeddings().unwrap().row(2), &[8.0, 9.0, 10.0, 11.0]);

        let five = Embeddings { rows: 5, dim: 4, values: vec![0.0; 20] };
        write_embeddings(&five, &p).unwrap();
        assert!(matches!(g.attach_embeddings(&p), Err(GraphError::EmbeddingRowMismatch { expected: 3, found: 5 })));

        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_embeddings(&p), Err(GraphError::BadEmbeddings(_))));

        let mut fresh = load_graph(&n, &e, 15).unwrap();
        fresh.attach_embeddings(&dir.path().join("absent.bin")).unwrap();
        assert!(fresh.embeddings().is_none());
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (n, e) = tiny(dir.path());
        let mut g = load_graph(&n, &e, 15).unwrap();
        g.set_embeddings(Embeddings { rows: 3, dim: 2, values: vec![0.5; 6] }).unwrap();
        let out = dir.path().join("out");
        write_graph_dir(&g, &out).unwrap();
        assert_eq!(load_graph_dir(&out, 15).unwrap(), g);
    }
}
