//! The CDC network: layer configs, forward/backward, windows, training and
//! checkpoints.

pub mod checkpoint;
pub mod config;
pub mod model;
pub mod train;
pub mod window;

pub use checkpoint::{config_manifest, load_checkpoint, parse_config_manifest, save_checkpoint};
pub use config::{Layer, LayerKind, NetworkConfig, ToyOptions};
pub use model::{build_network, FcWeights, ForwardCache, ForwardMode, Init, LayerParams, Network};
pub use train::{
    batch_gradients, frame_accuracy, train, train_step, SgdConfig, SgdState, TrainOptions,
};
pub use window::{predict_video, slice_training_windows, slice_video, VideoWindow};
