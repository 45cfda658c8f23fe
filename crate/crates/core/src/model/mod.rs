//! Fully convolutional architectures and their receptive-field geometry.

mod arch;
mod fcn;
mod presets;
mod rf;

pub use arch::{ArchitectureSpec, InputShape, LayerSpec};
pub use fcn::{FcnModel, ForwardVars};
pub use presets::{preset, Preset, PresetOptions, PRESET_ALPHA};
pub use rf::{receptive_field, RfInfo};
