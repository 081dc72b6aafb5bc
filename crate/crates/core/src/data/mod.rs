//! Data model, container format and dataset directories.

pub mod batch;
pub mod container;
pub mod io;
pub mod schema;
pub mod splits;

pub use batch::{argmax, mask_labels, Scene, SceneBatch, ShiftMetadata, SlotBatch};
pub use io::{load_dataset, load_slots, save_dataset, save_slots, DatasetManifest};
pub use schema::{presets, PropertyEntry, PropertyKind, PropertySchema};
pub use splits::{make_splits, SplitSizes, Splits};
