//! Test and benchmarking plumbing: the binary wire codec, file formats and
//! the synthetic scene generator.

pub mod codec;
pub mod files;
pub mod scene;

pub use codec::{decode, encode, CodecError, WireMessage, WIRE_VERSION};
pub use files::{load_keypoint_file, FileError, KeypointFormat};
pub use scene::{generate_scene, Arrival, DeviceSpec, Layout, Scene, SceneConfig};
