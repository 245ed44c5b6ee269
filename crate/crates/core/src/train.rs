//! Batch training with AdamW, cosine warm restarts, early stopping on
//! validation MRR, and resumable checkpoints.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::autodiff::{AdamW, AdamWConfig, AutodiffError, LrSchedule, Tape, Tensor};
use crate::eval::{rank_prepared, EvalError};
use crate::kg::KnowledgeGraph;
use crate::losses::{gene_loss, patient_sim_loss, total_loss, GeneLossConfig, LossError, MemoryBank, SimLossConfig};
use crate::model::checkpoint::Checkpoint;
use crate::model::{Model, ModelConfig, ModelError};
use crate::patient::{prepare_patient, CandidateSource, PatientError, PatientRecord, PreparedPatient, Preparation};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Patient(#[from] PatientError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no trainable patients: every record lacks a reachable causative gene")]
    NoTrainablePatients,
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss { epoch: usize, batch: usize, detail: String },
    #[error("checkpoint state: {0}")]
    State(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Which loss terms are optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossArms {
    Gene,
    Sim,
    #[default]
    Both,
}

impl LossArms {
    pub fn gene(self) -> bool {
        matches!(self, Self::Gene | Self::Both)
    }

    pub fn sim(self) -> bool {
        matches!(self, Self::Sim | Self::Both)
    }
}

impl std::str::FromStr for LossArms {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gene" => Ok(Self::Gene),
            "sim" => Ok(Self::Sim),
            "both" => Ok(Self::Both),
            _ => Err(format!("unknown loss arms {s:?} (gene | sim | both)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub optimizer: AdamWConfig,
    pub arms: LossArms,
    pub gene_loss: GeneLossConfig,
    pub sim_loss: SimLossConfig,
    pub candidates: CandidateSource,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 135,
            patience: 25,
            batch_size: 16,
            schedule: LrSchedule::default(),
            optimizer: AdamWConfig::default(),
            arms: LossArms::Both,
            gene_loss: GeneLossConfig::default(),
            sim_loss: SimLossConfig::default(),
            candidates: CandidateSource::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if self.patience > self.max_epochs {
            return bad(format!("patience {} exceeds max_epochs {}", self.patience, self.max_epochs));
        }
        self.schedule.validate().map_err(TrainError::InvalidConfig)?;
        self.gene_loss.validate()?;
        self.sim_loss.validate()?;
        Ok(())
    }
}

/// One row of the progress stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_mrr: f64,
    pub lr: f64,
}

impl std::fmt::Display for EpochLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}\t{:.6}\t{:.6}\t{:e}", self.epoch, self.loss, self.val_mrr, self.lr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_mrr: Vec<f64>,
    pub lr: Vec<f64>,
    /// Epoch of the retained checkpoint; `None` before any epoch ran.
    pub best_epoch: Option<usize>,
    pub best_val_mrr: f64,
    pub stopped_early: bool,
    pub checkpoint: PathBuf,
    /// Training patients left out, with the reason.
    pub skipped: Vec<(String, String)>,
}

impl TrainReport {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }

    pub fn write(&self, path: &Path) -> Result<(), TrainError> {
        let body = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, body + "\n").map_err(|source| TrainError::Io { path: path.display().to_string(), source })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Progress {
    next_epoch: usize,
    since_best: usize,
    adam_step: u64,
    bank_capacity: usize,
    bank_cursor: usize,
    bank_labels: Vec<usize>,
    report: TrainReport,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub model: Model<T>,
    pub optimizer: AdamW<T>,
    pub bank: MemoryBank<T>,
    pub config: TrainConfig,
    pub next_epoch: usize,
    pub since_best: usize,
    pub report: TrainReport,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const REPORT_FILE: &str = "report.json";

impl<T: Scalar> TrainState<T> {
    pub fn fresh(model_config: ModelConfig, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let model = Model::new(model_config, config.seed)?;
        let optimizer = AdamW::new(config.optimizer, &model.params);
        let bank = MemoryBank::new(config.sim_loss.bank_capacity);
        Ok(Self { model, optimizer, bank, config, next_epoch: 0, since_best: 0, report: TrainReport::default() })
    }

    pub fn finished(&self) -> bool {
        self.report.stopped_early || self.next_epoch >= self.config.max_epochs
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let progress = Progress {
            next_epoch: self.next_epoch,
            since_best: self.since_best,
            adam_step: self.optimizer.step,
            bank_capacity: self.bank.capacity(),
            bank_cursor: self.bank.cursor(),
            bank_labels: self.bank.slots().iter().map(|(_, l)| *l).collect(),
            report: self.report.clone(),
        };
        let mut extra = Map::new();
        extra.insert("train".into(), serde_json::to_value(&self.config).expect("config serializes"));
        extra.insert("progress".into(), serde_json::to_value(&progress).expect("progress serializes"));
        let mut ck = self.model.to_checkpoint(extra);
        for (k, (name, t)) in self.model.params.iter().enumerate() {
            let shape = t.shape().to_vec();
            ck.tensors.push((format!("adam.m/{name}"), Tensor::new(shape.clone(), self.optimizer.first[k].clone()).expect("sized")));
            ck.tensors.push((format!("adam.v/{name}"), Tensor::new(shape, self.optimizer.second[k].clone()).expect("sized")));
        }
        let d = self.model.config().embedding_dim();
        let flat: Vec<T> = self.bank.slots().iter().flat_map(|(e, _)| e.iter().copied()).collect();
        ck.tensors.push(("bank".into(), Tensor::new(vec![self.bank.len(), d], flat).expect("sized")));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self, TrainError> {
        let model = Model::from_checkpoint(ck)?;
        let get = |k: &str| ck.meta.get(k).cloned().ok_or_else(|| TrainError::State(format!("missing {k}")));
        let config: TrainConfig = serde_json::from_value(get("train")?).map_err(|e| TrainError::State(e.to_string()))?;
        let progress: Progress = serde_json::from_value(get("progress")?).map_err(|e| TrainError::State(e.to_string()))?;
        let mut optimizer = AdamW::new(config.optimizer, &model.params);
        optimizer.step = progress.adam_step;
        for (k, (name, t)) in model.params.iter().enumerate() {
            for (prefix, slot) in [("adam.m", &mut optimizer.first[k]), ("adam.v", &mut optimizer.second[k])] {
                let key = format!("{prefix}/{name}");
                let stored = ck.tensor(&key).ok_or_else(|| TrainError::State(format!("missing {key}")))?;
                if stored.shape() != t.shape() {
                    return Err(TrainError::State(format!("{key} has shape {:?}", stored.shape())));
                }
                slot.copy_from_slice(stored.values());
            }
        }
        let bank_t = ck.tensor("bank").ok_or_else(|| TrainError::State("missing bank".into()))?;
        let d = model.config().embedding_dim();
        if bank_t.len() != progress.bank_labels.len() * d {
            return Err(TrainError::State("bank size disagrees with its labels".into()));
        }
        let slots = bank_t.values().chunks(d.max(1)).map(<[T]>::to_vec).zip(progress.bank_labels.iter().copied()).collect();
        let bank = MemoryBank::from_parts(progress.bank_capacity, slots, progress.bank_cursor)?;
        Ok(Self { model, optimizer, bank, config, next_epoch: progress.next_epoch, since_best: progress.since_best, report: progress.report })
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Builds subgraphs once; patients without a rankable causative gene are
/// returned separately with the reason.
pub fn prepare_cohort(
    graph: &KnowledgeGraph,
    patients: &[PatientRecord],
    source: CandidateSource,
    model_config: &ModelConfig,
) -> Result<(Vec<PreparedPatient>, Vec<(String, String)>), TrainError> {
    let opts = model_config.subgraph_options();
    let mut ready = Vec::new();
    let mut skipped = Vec::new();
    for rec in patients {
        if rec.true_gene.is_none() {
            skipped.push((rec.id.clone(), "no causative gene".into()));
            continue;
        }
        match prepare_patient(graph, rec, source, opts)? {
            Preparation::Ready(p) if p.true_position.is_some() => ready.push(*p),
            Preparation::Ready(_) => skipped.push((rec.id.clone(), "causative gene unreachable or not a candidate".into())),
            Preparation::Excluded(why) => skipped.push((rec.id.clone(), why)),
        }
    }
    for (id, why) in &skipped {
        log::warn!("patient {id} skipped: {why}");
    }
    Ok((ready, skipped))
}

/// Evaluation-mode MRR over prepared patients; 0 for an empty set.
pub fn mrr_of<T: Scalar>(model: &Model<T>, graph: &KnowledgeGraph, patients: &[PreparedPatient]) -> Result<f64, TrainError> {
    if patients.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for p in patients {
        let (list, _) = rank_prepared(model, graph, p)?;
        let gene = &graph.node(p.true_gene.expect("prepared with a label")).external_id;
        total += list.rank_of(gene).map_or(0.0, |r| 1.0 / r as f64);
    }
    Ok(total / patients.len() as f64)
}

/// Runs one epoch of optimization and returns the mean batch loss.
fn run_epoch<T: Scalar>(state: &mut TrainState<T>, train: &[PreparedPatient], epoch: usize, lr: f64) -> Result<f64, TrainError> {
    let cfg = state.config.clone();
    let mut rng = epoch_rng(cfg.seed, epoch);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut loss_sum = 0.0;
    let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
    for (b, batch) in batches.iter().enumerate() {
        let mut tape = Tape::new();
        let log_tau = tape.param(&state.model.params, state.model.log_tau_id());
        let mut gene_terms = Vec::with_capacity(batch.len());
        let mut patients = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for &i in batch.iter() {
            let p = &train[i];
            let out = state.model.forward(&mut tape, &p.subgraph, Some(&mut rng))?;
            if cfg.arms.gene() {
                let pos = p.true_position.expect("prepared with a label");
                gene_terms.push(gene_loss(&mut tape, out.patient, out.genes, pos, &cfg.gene_loss, log_tau)?.loss);
            }
            patients.push(out.patient);
            labels.push(p.true_gene.expect("prepared with a label"));
        }
        let gene = if gene_terms.is_empty() {
            None
        } else {
            let stacked = tape.concat_rows(&gene_terms)?;
            Some(tape.mean(stacked)?)
        };
        let sim = if cfg.arms.sim() { Some(patient_sim_loss(&mut tape, &patients, &labels, &state.bank, &cfg.sim_loss)?) } else { None };
        let total = total_loss(&mut tape, gene, sim).map_err(|e| TrainError::NonFiniteLoss { epoch, batch: b, detail: e.to_string() })?;
        loss_sum += tape.scalar(total).as_f64();
        let normalized: Vec<Vec<T>> = patients.iter().map(|&v| unit(tape.value(v))).collect();
        tape.backward(total, &mut state.model.params)?;
        state
            .optimizer
            .step(&mut state.model.params, lr)
            .map_err(|e| TrainError::NonFiniteLoss { epoch, batch: b, detail: e.to_string() })?;
        state.model.clamp_tau();
        state.bank.push(&normalized, &labels)?;
    }
    Ok(loss_sum / batches.len().max(1) as f64)
}

fn unit<T: Scalar>(v: &[T]) -> Vec<T> {
    let n = v.iter().map(|&x| x * x).sum::<T>().sqrt().max(T::of(crate::autodiff::NORMALIZE_EPS));
    v.iter().map(|&x| x / n).collect()
}

/// A training run over prepared cohorts writing into `out_dir`.
pub struct Trainer<'a, T> {
    graph: &'a KnowledgeGraph,
    train: Vec<PreparedPatient>,
    val: Vec<PreparedPatient>,
    out_dir: PathBuf,
    pub state: TrainState<T>,
    best: Option<Model<T>>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(
        graph: &'a KnowledgeGraph,
        train: &[PatientRecord],
        val: &[PatientRecord],
        state: TrainState<T>,
        out_dir: &Path,
    ) -> Result<Self, TrainError> {
        state.config.validate()?;
        state.model.check_graph(graph)?;
        let (train_prep, skipped) = prepare_cohort(graph, train, state.config.candidates, state.model.config())?;
        if train_prep.is_empty() {
            return Err(TrainError::NoTrainablePatients);
        }
        let (val_prep, _) = prepare_cohort(graph, val, state.config.candidates, state.model.config())?;
        std::fs::create_dir_all(out_dir).map_err(|source| TrainError::Io { path: out_dir.display().to_string(), source })?;
        let mut state = state;
        state.report.skipped = skipped;
        state.report.checkpoint = out_dir.join(BEST_CHECKPOINT);
        Ok(Self { graph, train: train_prep, val: val_prep, out_dir: out_dir.to_path_buf(), state, best: None })
    }

    pub fn train_patients(&self) -> &[PreparedPatient] {
        &self.train
    }

    /// Validation MRR, or training MRR when there is no validation set.
    fn score(&self) -> Result<f64, TrainError> {
        let set = if self.val.is_empty() { &self.train } else { &self.val };
        mrr_of(&self.state.model, self.graph, set)
    }

    /// Trains until `max_epochs` or early stop, reporting each epoch.
    pub fn run(&mut self, progress: &mut dyn FnMut(&EpochLog)) -> Result<TrainReport, TrainError> {
        while !self.state.finished() {
            let epoch = self.state.next_epoch;
            let lr = self.state.config.schedule.lr_at(epoch);
            let loss = run_epoch(&mut self.state, &self.train, epoch, lr)?;
            let val_mrr = self.score()?;
            let r = &mut self.state.report;
            r.train_loss.push(loss);
            r.val_mrr.push(val_mrr);
            r.lr.push(lr);
            if r.best_epoch.is_none() || val_mrr > r.best_val_mrr {
                r.best_epoch = Some(epoch);
                r.best_val_mrr = val_mrr;
                self.state.since_best = 0;
                let mut meta = Map::new();
                meta.insert("train".into(), serde_json::to_value(&self.state.config).expect("config serializes"));
                meta.insert("epoch".into(), json!(epoch));
                self.state.model.to_checkpoint(meta).write(&self.out_dir.join(BEST_CHECKPOINT))?;
                self.best = Some(self.state.model.clone());
            } else {
                self.state.since_best += 1;
            }
            self.state.next_epoch = epoch + 1;
            if self.state.since_best >= self.state.config.patience && self.state.config.patience > 0 {
                self.state.report.stopped_early = true;
            }
            self.state.to_checkpoint().write(&self.out_dir.join(LAST_CHECKPOINT))?;
            progress(&EpochLog { epoch, loss, val_mrr, lr });
        }
        self.state.report.write(&self.out_dir.join(REPORT_FILE))?;
        Ok(self.state.report.clone())
    }

    /// The model of the best epoch so far, loading it from disk after a resume.
    pub fn best_model(&self) -> Result<Model<T>, TrainError> {
        match &self.best {
            Some(m) => Ok(m.clone()),
            None => Ok(Model::load(&self.out_dir.join(BEST_CHECKPOINT))?),
        }
    }
}

/// Fresh run: returns the report and the best model.
pub fn train<T: Scalar>(
    graph: &KnowledgeGraph,
    train: &[PatientRecord],
    val: &[PatientRecord],
    model_config: ModelConfig,
    config: TrainConfig,
    out_dir: &Path,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<(TrainReport, Model<T>), TrainError> {
    let state = TrainState::fresh(model_config, config)?;
    let mut t = Trainer::new(graph, train, val, state, out_dir)?;
    let report = t.run(progress)?;
    Ok((report, t.best_model()?))
}

/// Continues a run from a `last.ckpt`, optionally raising `max_epochs`.
/// A finished run is returned unchanged.
pub fn resume<T: Scalar>(
    checkpoint: &Path,
    graph: &KnowledgeGraph,
    train: &[PatientRecord],
    val: &[PatientRecord],
    max_epochs: Option<usize>,
    out_dir: &Path,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<(TrainReport, Model<T>), TrainError> {
    let mut state = TrainState::<T>::from_checkpoint(&Checkpoint::read(checkpoint)?)?;
    if let Some(m) = max_epochs {
        state.config.max_epochs = m;
    }
    if state.finished() {
        log::info!("run already finished at epoch {}; nothing to do", state.next_epoch);
    }
    let mut t = Trainer::new(graph, train, val, state, out_dir)?;
    let report = t.run(progress)?;
    Ok((report, t.best_model()?))
}

/// Metadata value from a checkpoint, for callers inspecting runs.
pub fn checkpoint_meta(path: &Path) -> Result<Value, TrainError> {
    Ok(Checkpoint::<f64>::read(path)?.meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::synthetic::{generate, SyntheticGraphConfig};
    use crate::model::{GeneEncoderConfig, GnnConfig, PatientEncoderConfig};
    use crate::patient::{simulate_cohort, SimulatorConfig};

    fn micro_config(input_dim: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            embedding_mode: Default::default(),
            node_count: 0,
            gnn: GnnConfig { hidden_dims: vec![8, 8], out_dim: 8, dropout: 0.1, ..GnnConfig::default() },
            patient: PatientEncoderConfig { memory_slots: 2, heads: 2, pheno_hidden: 8, patient_hidden: 8, negative_slope: 0.01 },
            gene: GeneEncoderConfig { layers: 1, heads: 2, ff_dim: 8, dropout: 0.1 },
        }
    }

    fn setup() -> (KnowledgeGraph, Vec<PatientRecord>) {
        let g = generate(&SyntheticGraphConfig { embedding_dim: Some(4), ..Default::default() });
        let cohort = simulate_cohort(&g, &SimulatorConfig { n_patients: 6, distractor_candidates: 4, seed: 2, ..Default::default() }).unwrap();
        (g, cohort)
    }

    #[test]
    fn early_stop_after_patience() {
        let (g, cohort) = setup();
        let dir = tempfile::tempdir().unwrap();
        // lr 0 keeps validation MRR constant.
        let cfg = TrainConfig {
            max_epochs: 10,
            patience: 1,
            batch_size: 3,
            schedule: LrSchedule { lr_max: 0.0, ..Default::default() },
            optimizer: AdamWConfig { weight_decay: 0.0, ..Default::default() },
            ..Default::default()
        };
        let (report, _) = train::<f64>(&g, &cohort[..4], &cohort[4..], micro_config(4), cfg, dir.path(), &mut |_| {}).unwrap();
        assert_eq!(report.epochs(), 2);
        assert!(report.stopped_early);
        assert_eq!(report.best_epoch, Some(0));
        assert!(dir.path().join(BEST_CHECKPOINT).exists());
        assert!(dir.path().join(REPORT_FILE).exists());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { patience: 200, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
        assert_eq!("sim".parse::<LossArms>().unwrap(), LossArms::Sim);
    }

    #[test]
    fn state_round_trips_through_checkpoint() {
        let (g, cohort) = setup();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { max_epochs: 2, patience: 2, batch_size: 2, ..Default::default() };
        train::<f64>(&g, &cohort, &[], micro_config(4), cfg, dir.path(), &mut |_| {}).unwrap();
        let ck = Checkpoint::<f64>::read(&dir.path().join(LAST_CHECKPOINT)).unwrap();
        let state = TrainState::from_checkpoint(&ck).unwrap();
        assert_eq!(state.next_epoch, 2);
        assert_eq!(state.bank.len(), 12);
        assert_eq!(state.to_checkpoint().to_bytes(), ck.to_bytes());
    }

    #[test]
    fn no_trainable_patients() {
        let (g, mut cohort) = setup();
        cohort.iter_mut().for_each(|r| r.true_gene = None);
        let dir = tempfile::tempdir().unwrap();
        let r = train::<f64>(&g, &cohort, &[], micro_config(4), TrainConfig::default(), dir.path(), &mut |_| {});
        assert!(matches!(r, Err(TrainError::NoTrainablePatients)));
    }
}
