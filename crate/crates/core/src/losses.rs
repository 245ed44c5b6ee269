//! Gene triplet loss with semi-hard negative mining, the norm regularizer,
//! and the memory-bank patient similarity loss.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("true index {index} outside candidate list of {len}")]
    TrueIndexOutOfRange { index: usize, len: usize },
    #[error("empty candidate list")]
    NoCandidates,
    #[error("empty batch")]
    EmptyBatch,
    #[error("{embeddings} embeddings but {labels} labels")]
    LabelCount { embeddings: usize, labels: usize },
    #[error("non-finite {0} loss")]
    NonFinite(&'static str),
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneLossConfig {
    pub margin: f64,
    pub reg_weight: f64,
}

impl Default for GeneLossConfig {
    fn default() -> Self {
        Self { margin: 0.3, reg_weight: 0.03 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimLossConfig {
    pub alpha: f64,
    pub delta: f64,
    pub bank_capacity: usize,
}

impl Default for SimLossConfig {
    fn default() -> Self {
        Self { alpha: 0.5, delta: 0.8, bank_capacity: 1024 }
    }
}

impl GeneLossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.margin >= 0.0 && self.reg_weight >= 0.0) {
            return Err(LossError::InvalidConfig("margin and regularization weight must be >= 0".into()));
        }
        Ok(())
    }
}

impl SimLossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.alpha > 0.0) || !(0.0..=1.0).contains(&self.delta) {
            return Err(LossError::InvalidConfig("alpha must be > 0 and delta in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Picks the negative for the triplet term: the most similar negative among
/// those with `sim < sim_true - margin`, or the most similar negative overall
/// when none qualifies. Ties go to the lower index. `None` without negatives.
pub fn mine_negative<T: Scalar>(sims: &[T], true_index: usize, margin: T) -> Option<usize> {
    let cutoff = sims[true_index] - margin;
    let argmax = |pred: &dyn Fn(T) -> bool| {
        let mut best: Option<usize> = None;
        for (i, &s) in sims.iter().enumerate() {
            if i != true_index && pred(s) && best.is_none_or(|b| s > sims[b]) {
                best = Some(i);
            }
        }
        best
    };
    argmax(&|s| s < cutoff).or_else(|| argmax(&|_| true))
}

#[derive(Debug, Clone)]
pub struct GeneLossOutput<T> {
    pub loss: Var,
    pub triplet: T,
    pub reg: T,
    /// Temperature-scaled similarities, one per candidate.
    pub sims: Vec<T>,
    pub negative: Option<usize>,
}

/// Triplet loss on `sim_i = cos(p, g_i) / tau` plus the unit-norm regularizer
/// on the raw embeddings. `log_tau` is a 1x1 value.
pub fn gene_loss<T: Scalar>(
    tape: &mut Tape<T>,
    patient: Var,
    genes: Var,
    true_index: usize,
    config: &GeneLossConfig,
    log_tau: Var,
) -> Result<GeneLossOutput<T>, LossError> {
    let len = tape.shape(genes).0;
    if len == 0 {
        return Err(LossError::NoCandidates);
    }
    if true_index >= len {
        return Err(LossError::TrueIndexOutOfRange { index: true_index, len });
    }
    let pn = tape.l2_normalize(patient);
    let gn = tape.l2_normalize(genes);
    let pt = tape.transpose(pn);
    let cos = tape.matmul(gn, pt)?;
    let neg_log_tau = tape.scale(log_tau, -T::one());
    let inv_tau = tape.exp(neg_log_tau);
    let sims = tape.mul_scalar_var(cos, inv_tau)?;
    let sim_values = tape.value(sims).to_vec();

    let negative = mine_negative(&sim_values, true_index, T::of(config.margin));
    let triplet = match negative {
        Some(k) => {
            let s_neg = tape.element(sims, k, 0)?;
            let s_pos = tape.element(sims, true_index, 0)?;
            let gap = tape.sub(s_neg, s_pos)?;
            let gap = tape.add_scalar(gap, T::of(config.margin));
            tape.relu(gap)
        }
        None => tape.constant(1, 1, vec![T::zero()])?,
    };
    let p_norm = tape.row_norm(patient);
    let g_norms = tape.row_norm(genes);
    let g_mean = tape.mean(g_norms)?;
    let total_norm = tape.add(p_norm, g_mean)?;
    let dev = tape.add_scalar(total_norm, T::of(-2.0));
    let dev = tape.abs(dev);
    let reg = tape.scale(dev, T::of(config.reg_weight));
    let loss = tape.add(triplet, reg)?;
    Ok(GeneLossOutput { loss, triplet: tape.scalar(triplet), reg: tape.scalar(reg), sims: sim_values, negative })
}

/// Fixed-capacity circular store of past unit-norm patient embeddings and
/// their causative gene labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank<T> {
    capacity: usize,
    slots: Vec<(Vec<T>, usize)>,
    cursor: usize,
}

impl<T: Scalar> MemoryBank<T> {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, slots: Vec::with_capacity(capacity.min(4096)), cursor: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Entries in slot order.
    pub fn slots(&self) -> &[(Vec<T>, usize)] {
        &self.slots
    }

    /// Entries from oldest to newest.
    pub fn chronological(&self) -> Vec<&(Vec<T>, usize)> {
        if self.slots.len() < self.capacity {
            return self.slots.iter().collect();
        }
        self.slots[self.cursor..].iter().chain(&self.slots[..self.cursor]).collect()
    }

    /// Writes entries at the cursor, overwriting the oldest once full.
    pub fn push(&mut self, embeddings: &[Vec<T>], labels: &[usize]) -> Result<(), LossError> {
        if embeddings.len() != labels.len() {
            return Err(LossError::LabelCount { embeddings: embeddings.len(), labels: labels.len() });
        }
        if self.capacity == 0 {
            if !embeddings.is_empty() {
                log::warn!("memory bank has capacity 0; push ignored");
            }
            return Ok(());
        }
        for (e, &l) in embeddings.iter().zip(labels) {
            if self.slots.len() < self.capacity {
                self.slots.push((e.clone(), l));
            } else {
                self.slots[self.cursor] = (e.clone(), l);
            }
            self.cursor = (self.cursor + 1) % self.capacity;
        }
        Ok(())
    }

    /// Restores a bank from its raw parts, as stored in checkpoints.
    pub fn from_parts(capacity: usize, slots: Vec<(Vec<T>, usize)>, cursor: usize) -> Result<Self, LossError> {
        if slots.len() > capacity || (capacity > 0 && cursor >= capacity) || (capacity == 0 && cursor != 0) {
            return Err(LossError::InvalidConfig(format!("bank state {} entries, cursor {cursor}, capacity {capacity}", slots.len())));
        }
        Ok(Self { capacity, slots, cursor })
    }
}

/// Pair terms averaged per group: within-batch same/different gene pairs
/// (`i < j`) and batch-by-bank same/different gene pairs. Embeddings are
/// normalized before use; the bank is taken as already unit-norm.
pub fn patient_sim_loss<T: Scalar>(
    tape: &mut Tape<T>,
    batch: &[Var],
    labels: &[usize],
    bank: &MemoryBank<T>,
    config: &SimLossConfig,
) -> Result<Var, LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if batch.len() != labels.len() {
        return Err(LossError::LabelCount { embeddings: batch.len(), labels: labels.len() });
    }
    let b = batch.len();
    let stacked = tape.concat_rows(batch)?;
    let pn = tape.l2_normalize(stacked);
    let pt = tape.transpose(pn);
    let mut total = tape.constant(1, 1, vec![T::zero()])?;

    let within = tape.matmul(pn, pt)?;
    let same = |i: usize, j: usize| labels[i] == labels[j];
    let upper = |i: usize, j: usize| i < j;
    total = add_group_terms(tape, total, within, b, b, &|i, j| upper(i, j) && same(i, j), &|i, j| upper(i, j) && !same(i, j), config)?;

    if !bank.is_empty() {
        let k = bank.len();
        let d = tape.shape(pn).1;
        let mut values = Vec::with_capacity(k * d);
        for (e, _) in bank.slots() {
            values.extend_from_slice(e);
        }
        let bank_t = tape.constant(d, k, transpose(&values, k, d))?;
        let cross = tape.matmul(pn, bank_t)?;
        let bl: Vec<usize> = bank.slots().iter().map(|(_, l)| *l).collect();
        total = add_group_terms(tape, total, cross, b, k, &|i, j| labels[i] == bl[j], &|i, j| labels[i] != bl[j], config)?;
    }
    Ok(total)
}

fn transpose<T: Scalar>(v: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); v.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = v[r * cols + c];
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn add_group_terms<T: Scalar>(
    tape: &mut Tape<T>,
    acc: Var,
    sims: Var,
    rows: usize,
    cols: usize,
    pull_pair: &dyn Fn(usize, usize) -> bool,
    push_pair: &dyn Fn(usize, usize) -> bool,
    config: &SimLossConfig,
) -> Result<Var, LossError> {
    let mut acc = acc;
    let mask = |pred: &dyn Fn(usize, usize) -> bool| {
        let mut m = vec![T::zero(); rows * cols];
        let mut count = 0usize;
        for i in 0..rows {
            for j in 0..cols {
                if pred(i, j) {
                    m[i * cols + j] = T::one();
                    count += 1;
                }
            }
        }
        (m, count)
    };
    let (pull_mask, pull_count) = mask(pull_pair);
    if pull_count > 0 {
        let scaled = tape.scale(sims, T::one() / T::of(config.alpha));
        let ls = tape.log_sigmoid(scaled);
        let m = tape.constant(rows, cols, pull_mask)?;
        let picked = tape.mul(ls, m)?;
        let s = tape.sum(picked);
        let term = tape.scale(s, -T::one() / T::of(pull_count as f64));
        acc = tape.add(acc, term)?;
    }
    let (push_mask, push_count) = mask(push_pair);
    if push_count > 0 {
        let shifted = tape.add_scalar(sims, T::of(config.delta - 1.0));
        let hinge = tape.relu(shifted);
        let m = tape.constant(rows, cols, push_mask)?;
        let picked = tape.mul(hinge, m)?;
        let s = tape.sum(picked);
        let term = tape.scale(s, T::one() / T::of(push_count as f64));
        acc = tape.add(acc, term)?;
    }
    Ok(acc)
}

/// Sum of the enabled loss terms; a disabled term contributes nothing.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, gene: Option<Var>, sim: Option<Var>) -> Result<Var, LossError> {
    for (name, v) in [("gene", gene), ("similarity", sim)] {
        if let Some(v) = v {
            if !tape.scalar(v).is_finite() {
                return Err(LossError::NonFinite(name));
            }
        }
    }
    Ok(match (gene, sim) {
        (Some(g), Some(s)) => tape.add(g, s)?,
        (Some(v), None) | (None, Some(v)) => v,
        (None, None) => tape.constant(1, 1, vec![T::zero()])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn consts(tape: &mut Tape<f64>, rows: &[&[f64]]) -> Var {
        let c = rows[0].len();
        tape.constant(rows.len(), c, rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    /// Unit vector at cosine `s` against [1, 0].
    fn at(s: f64) -> [f64; 2] {
        [s, (1.0 - s * s).sqrt()]
    }

    fn run(neg: &[f64]) -> GeneLossOutput<f64> {
        let mut tape = Tape::new();
        let p = consts(&mut tape, &[&[1.0, 0.0]]);
        let mut rows: Vec<[f64; 2]> = vec![[0.8, 0.6]];
        rows.extend(neg.iter().map(|&s| at(s)));
        let refs: Vec<&[f64]> = rows.iter().map(|r| &r[..]).collect();
        let g = consts(&mut tape, &refs);
        let log_tau = tape.constant(1, 1, vec![0.0]).unwrap();
        let cfg = GeneLossConfig { margin: 0.3, reg_weight: 0.03 };
        gene_loss(&mut tape, p, g, 0, &cfg, log_tau).unwrap()
    }

    #[test]
    fn falls_back_to_hardest_negative() {
        let out = run(&[0.6, 1.0]);
        assert_eq!(out.negative, Some(2));
        assert!((out.triplet - 0.5).abs() < 1e-12);
        assert!(out.reg.abs() < 1e-12);
    }

    #[test]
    fn picks_hardest_semi_hard_negative() {
        let out = run(&[0.4, 0.45]);
        assert_eq!(out.negative, Some(2));
        assert_eq!(out.triplet, 0.0);
    }

    #[test]
    fn single_candidate_leaves_only_reg() {
        let mut tape = Tape::new();
        let p = consts(&mut tape, &[&[2.0, 0.0]]);
        let g = consts(&mut tape, &[&[0.0, 1.0]]);
        let log_tau = tape.constant(1, 1, vec![0.12f64.ln()]).unwrap();
        let out = gene_loss(&mut tape, p, g, 0, &GeneLossConfig::default(), log_tau).unwrap();
        assert_eq!(out.negative, None);
        assert_eq!(out.triplet, 0.0);
        assert!((tape.scalar(out.loss) - 0.03).abs() < 1e-12);
    }

    #[test]
    fn gene_loss_errors() {
        let mut tape = Tape::new();
        let p = consts(&mut tape, &[&[1.0, 0.0]]);
        let g = consts(&mut tape, &[&[1.0, 0.0]]);
        let t = tape.constant(1, 1, vec![0.0]).unwrap();
        assert!(matches!(gene_loss(&mut tape, p, g, 1, &GeneLossConfig::default(), t), Err(LossError::TrueIndexOutOfRange { .. })));
    }

    #[test]
    fn bank_is_circular() {
        let e = |v: f64| vec![v];
        let mut bank = MemoryBank::<f64>::new(2);
        bank.push(&[e(1.0), e(2.0)], &[1, 2]).unwrap();
        assert_eq!(bank.slots(), &[(e(1.0), 1), (e(2.0), 2)]);
        bank.push(&[e(3.0)], &[3]).unwrap();
        assert_eq!(bank.slots(), &[(e(3.0), 3), (e(2.0), 2)]);
        let order: Vec<usize> = bank.chronological().iter().map(|(_, l)| *l).collect();
        assert_eq!(order, vec![2, 3]);
        let mut b = MemoryBank::<f64>::new(2);
        b.push(&[e(1.0), e(2.0), e(3.0)], &[1, 2, 3]).unwrap();
        let order: Vec<usize> = b.chronological().iter().map(|(_, l)| *l).collect();
        assert_eq!(order, vec![2, 3]);
        let mut z = MemoryBank::<f64>::new(0);
        z.push(&[e(1.0)], &[1]).unwrap();
        assert!(z.is_empty());
        assert!(b.push(&[e(1.0)], &[]).is_err());
    }

    fn sim_loss(a: &[f64], b: &[f64], la: usize, lb: usize) -> f64 {
        let mut tape = Tape::new();
        let x = tape.constant(1, 2, a.to_vec()).unwrap();
        let y = tape.constant(1, 2, b.to_vec()).unwrap();
        let v = patient_sim_loss(&mut tape, &[x, y], &[la, lb], &MemoryBank::new(4), &SimLossConfig::default()).unwrap();
        tape.scalar(v)
    }

    #[test]
    fn pull_and_push_values() {
        let pull = sim_loss(&[1.0, 0.0], &[3.0, 0.0], 7, 7);
        assert!((pull - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
        assert!((pull - 0.1269).abs() < 1e-4);
        assert_eq!(sim_loss(&[1.0, 0.0], &at(0.1), 1, 2), 0.0);
        assert!((sim_loss(&[1.0, 0.0], &at(0.5), 1, 2) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn cross_terms_use_bank() {
        let mut bank = MemoryBank::<f64>::new(4);
        bank.push(&[vec![1.0, 0.0], at(0.5).to_vec()], &[1, 2]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(1, 2, vec![1.0, 0.0]).unwrap();
        let v = patient_sim_loss(&mut tape, &[x], &[1], &bank, &SimLossConfig::default()).unwrap();
        let expect = (1.0 + (-2.0f64).exp()).ln() + 0.3;
        assert!((tape.scalar(v) - expect).abs() < 1e-12);
    }

    #[test]
    fn total_loss_arms() {
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(1, 1, vec![0.5]).unwrap();
        let s = tape.constant(1, 1, vec![0.3]).unwrap();
        let both = total_loss(&mut tape, Some(g), Some(s)).unwrap();
        assert!((tape.scalar(both) - 0.8).abs() < 1e-15);
        let only = total_loss(&mut tape, Some(g), None).unwrap();
        assert_eq!(tape.scalar(only), 0.5);
        let nan = tape.constant(1, 1, vec![f64::NAN]).unwrap();
        assert!(matches!(total_loss(&mut tape, Some(nan), None), Err(LossError::NonFinite("gene"))));
    }
}
