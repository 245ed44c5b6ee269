//! Dense building blocks shared by the encoders.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::{AutodiffError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;

pub(crate) fn glorot<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<T> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
    let values = (0..rows * cols).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::matrix(rows, cols, values).expect("sized")
}

pub(crate) fn normal<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let values = (0..rows * cols).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::matrix(rows, cols, values).expect("sized")
}

pub(crate) fn filled<T: Scalar>(rows: usize, cols: usize, v: f64) -> Tensor<T> {
    Tensor::matrix(rows, cols, vec![T::of(v); rows * cols]).expect("sized")
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, din: usize, dout: usize) -> Self {
        let w = store.add(format!("{name}.weight"), glorot(rng, din, dout));
        let b = store.add(format!("{name}.bias"), filled(1, dout, 0.0));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var, AutodiffError> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), filled(1, dim, 1.0));
        let bias = store.add(format!("{name}.bias"), filled(1, dim, 0.0));
        Self { gain, bias }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var, AutodiffError> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Multi-head scaled dot-product self-attention over the rows of its input.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            out: Linear::new(store, rng, &format!("{name}.out"), dim, dim),
            heads,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var, AutodiffError> {
        let dim = tape.shape(x).1;
        let hd = dim / self.heads;
        let q = self.q.forward(tape, store, x)?;
        let k = self.k.forward(tape, store, x)?;
        let v = self.v.forward(tape, store, x)?;
        let widths = vec![hd; self.heads];
        let (qs, ks, vs) = (tape.split_cols(q, &widths)?, tape.split_cols(k, &widths)?, tape.split_cols(v, &widths)?);
        let inv_sqrt = T::one() / T::of(hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let kt = tape.transpose(ks[h]);
            let scores = tape.matmul(qs[h], kt)?;
            let scores = tape.scale(scores, inv_sqrt);
            let attn = tape.softmax_rows(scores)?;
            heads.push(tape.matmul(attn, vs[h])?);
        }
        let joined = tape.concat_cols(&heads)?;
        self.out.forward(tape, store, joined)
    }
}

/// Applies dropout when an RNG is supplied (training), identity otherwise.
pub(crate) fn maybe_dropout<T: Scalar>(tape: &mut Tape<T>, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var, AutodiffError> {
    match rng {
        Some(r) if rate > 0.0 => tape.dropout(x, rate, true, r),
        _ => Ok(x),
    }
}

pub(crate) fn reborrow<'a>(rng: &'a mut Option<&mut ChaCha8Rng>) -> Option<&'a mut ChaCha8Rng> {
    rng.as_mut().map(|r| &mut **r)
}

