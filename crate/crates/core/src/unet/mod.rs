//! 4D U-Net, optimizer, training loop and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod model;
pub mod train;

pub use adam::{adam_step, AdamConfig, AdamState, Plateau};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use model::{build_unet, ConvBlock, GradTape, UNet4D, UNet4DConfig};
pub use train::{evaluate, split_indices, train, EpochRecord, Sample, TrainConfig, TrainReport};
