//! File formats and run manifests: the operational shell around the library.
//!
//! Everything here is a bit-exact contract: the checkpoint binary layout,
//! the video container directory, the line-oriented config / report /
//! storyboard texts, and the run manifest that makes a CLI invocation
//! reproducible.

pub mod checkpoint;
pub mod config;
pub mod manifest;
pub mod report;
pub mod story;
pub mod video;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointContents};
pub use config::Config;
pub use manifest::write_run_manifest;
pub use report::{parse_report, report_to_text};
pub use story::parse_storyboard;
pub use video::{read_ppm_frame, read_video, write_ppm_frame, write_video};
