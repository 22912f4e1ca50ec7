//! Training, feature caching, checkpoints and online inference.

pub mod ablation;
pub mod cache;
pub mod checkpoint;
pub mod online;
pub mod train;

pub use cache::{cache_features, cache_key, load_cached, CacheReport};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use online::{online_infer, video_features, OnlineRecognizer, VideoPrediction};
pub use train::{lr_at, train_backbone, train_transformer, CachedVideo, EpochLog, OptimizerKind, TrainConfig, TrainOutcome};
