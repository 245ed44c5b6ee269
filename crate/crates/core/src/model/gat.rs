//! GATv2 message passing with one-hot edge attributes.
//!
//! score(i <- j) = a . LeakyReLU(W_dst h_i + W_src h_j + W_edge e_ij), normalized
//! over the incoming edges of `i`; messages are `W_src h_j`.

use rand_chacha::ChaCha8Rng;

use super::layers::{filled, glorot};
use crate::autodiff::{AutodiffError, ParamId, ParamStore, Tape, Var};
use crate::kg::PatientSubgraph;
use crate::scalar::Scalar;

/// Directed message list of a subgraph: both directions of every edge plus a
/// self-loop on every node, the latter with an all-zero attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeIndex<T> {
    pub nodes: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    /// `src.len() x attr_dim`, row-major.
    pub attrs: Vec<T>,
    pub attr_dim: usize,
}

impl<T: Scalar> EdgeIndex<T> {
    pub fn from_subgraph(sub: &PatientSubgraph) -> Self {
        let n = sub.node_count();
        let d = sub.edge_attr_dim;
        let total = 2 * sub.edge_count() + n;
        let (mut src, mut dst) = (Vec::with_capacity(total), Vec::with_capacity(total));
        let mut attrs = vec![T::zero(); total * d];
        for (k, (&(a, b), &rel)) in sub.local_edges.iter().zip(&sub.local_edge_relations).enumerate() {
            src.extend([a, b]);
            dst.extend([b, a]);
            if rel < d {
                attrs[(2 * k) * d + rel] = T::one();
                attrs[(2 * k + 1) * d + rel] = T::one();
            }
        }
        src.extend(0..n);
        dst.extend(0..n);
        Self { nodes: n, src, dst, attrs, attr_dim: d }
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// Parameters of one GATv2 layer. Heads are concatenated, or averaged when
/// `concat` is false.
#[derive(Debug, Clone, Copy)]
pub struct GatLayer {
    pub w_src: ParamId,
    pub w_dst: ParamId,
    pub w_edge: ParamId,
    pub att: ParamId,
    pub bias: ParamId,
    pub heads: usize,
    pub head_dim: usize,
    pub concat: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct GatOutput {
    pub out: Var,
    /// Attention weights, one row per directed message and one column per head.
    pub attention: Var,
}

impl GatLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        edge_dim: usize,
        heads: usize,
        head_dim: usize,
        concat: bool,
    ) -> Self {
        let hc = heads * head_dim;
        let w_src = store.add(format!("{name}.w_src"), glorot(rng, din, hc));
        let w_dst = store.add(format!("{name}.w_dst"), glorot(rng, din, hc));
        let w_edge = store.add(format!("{name}.w_edge"), glorot(rng, edge_dim, hc));
        let att = store.add(format!("{name}.att"), glorot(rng, 1, hc));
        let width = if concat { hc } else { head_dim };
        let bias = store.add(format!("{name}.bias"), filled(1, width, 0.0));
        Self { w_src, w_dst, w_edge, att, bias, heads, head_dim, concat }
    }

    pub fn out_dim(&self) -> usize {
        if self.concat {
            self.heads * self.head_dim
        } else {
            self.head_dim
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        edges: &EdgeIndex<T>,
        slope: T,
    ) -> Result<GatOutput, AutodiffError> {
        let (h, c) = (self.heads, self.head_dim);
        let hc = h * c;
        let n = edges.nodes;
        let w_src = tape.param(store, self.w_src);
        let w_dst = tape.param(store, self.w_dst);
        let w_edge = tape.param(store, self.w_edge);
        let att = tape.param(store, self.att);
        let bias = tape.param(store, self.bias);

        let xs = tape.matmul(x, w_src)?;
        let xd = tape.matmul(x, w_dst)?;
        let e = tape.constant(edges.len(), edges.attr_dim, edges.attrs.clone())?;
        let xe = tape.matmul(e, w_edge)?;
        let from = tape.gather_rows(xs, &edges.src)?;
        let to = tape.gather_rows(xd, &edges.dst)?;
        let pre = tape.add(from, to)?;
        let pre = tape.add(pre, xe)?;
        let act = tape.leaky_relu(pre, slope);
        let weighted = tape.mul_row(act, att)?;

        // Block indicator mapping the hc columns onto their heads.
        let mut head_sum = vec![T::zero(); hc * h];
        for j in 0..hc {
            head_sum[j * h + j / c] = T::one();
        }
        let s = tape.constant(hc, h, head_sum)?;
        let scores = tape.matmul(weighted, s)?;
        let alpha = tape.segment_softmax(scores, &edges.dst, n)?;
        let st = tape.transpose(s);
        let alpha_wide = tape.matmul(alpha, st)?;
        let msg = tape.mul(alpha_wide, from)?;
        let mut out = tape.scatter_add_rows(msg, &edges.dst, n)?;
        if !self.concat {
            let mut avg = vec![T::zero(); hc * c];
            let inv = T::one() / T::of(h as f64);
            for j in 0..hc {
                avg[j * c + j % c] = inv;
            }
            let avg = tape.constant(hc, c, avg)?;
            out = tape.matmul(out, avg)?;
        }
        let out = tape.add_row(out, bias)?;
        Ok(GatOutput { out, attention: alpha })
    }
}
