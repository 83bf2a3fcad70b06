//! EEG ingestion for motor-imagery decoding: EDF/EDF+ parsing, montage
//! selection, trial extraction, zero-phase band-pass filtering, windowing
//! and standardisation.

pub mod cache;
pub mod dataset;
pub mod edf;
pub mod filter;
pub mod recording;
pub mod window;

pub use recording::{Montage, Recording, TaskId, Trial};
pub use window::{Split, Window};
