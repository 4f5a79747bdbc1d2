//! Neural operators shared by both branches.

mod conv;
pub mod init;
mod linear;
mod loss;
mod norm;
mod pool;

pub use conv::{conv3d, Conv3d, TemporalPad};
pub use linear::Linear;
pub use loss::cross_entropy;
pub use norm::{batchnorm3d, BatchNorm3d};
pub use pool::{global_avgpool, spatial_avgpool, spatial_avgpool2, temporal_maxpool2};

/// Whether batch statistics and dropout are live.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}
