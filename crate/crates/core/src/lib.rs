//! Phenotype-driven causative-gene prioritization over a biomedical
//! knowledge graph: patient subgraphs, a GATv2 encoder, memory-augmented
//! patient and transformer gene encoders, contrastive training and ranking.
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision.

pub mod autodiff;
pub mod eval;
pub mod kg;
pub mod losses;
pub mod model;
pub mod patient;
pub mod scalar;
pub mod service;
pub mod train;

pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
pub type ParamStore32 = autodiff::ParamStore<f32>;
pub type MemoryBank64 = losses::MemoryBank<f64>;
pub type MemoryBank32 = losses::MemoryBank<f32>;
pub type TrainState64 = train::TrainState<f64>;
pub type TrainState32 = train::TrainState<f32>;
pub type Ranker64 = service::Ranker<f64>;
pub type Ranker32 = service::Ranker<f32>;
