pub mod bundle;
pub mod classifier;
pub mod cwt;
pub mod eeg_io;
pub mod evaluation;
pub mod importance;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod scalogram;
pub mod stages;
pub mod synth;
