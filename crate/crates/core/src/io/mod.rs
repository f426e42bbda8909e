//! Point cloud files, dataset manifests and the synthetic scene generator.

pub mod format;
pub mod manifest;
pub mod synth;

pub use format::{cloud_from_bytes, cloud_to_bytes, read_cloud, write_cloud};
pub use manifest::{AgentEntry, BoxRecord, DatasetManifest, Frame, FrameManifest};
pub use synth::{generate_dataset, generate_frame, SynthSpec};
