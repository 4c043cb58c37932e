//! Multimodal samples: file format, interval alignment, masks, synthetic
//! generation and splitting.

mod align;
mod io;
mod split;
mod synth;
mod types;

pub use align::{align_to_reference, build_masks, prepare, AlignMode};
pub use io::{load_dataset, read_dataset, save_dataset, write_dataset};
pub use split::{split, Split};
pub use synth::{class_histogram, motif_group, render_motif, synth_generate, SynthSpec, MOTIF_GRID};
pub use types::{AlignedSample, ModalitySequence, Modality, EMOTIONS, NUM_CLASSES};
