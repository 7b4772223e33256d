pub mod cli;
pub mod colorspace;
pub mod grading;
pub mod mat3;
pub mod micro_cnn;
pub mod nuclei;
pub mod numerics;
pub mod patterns;
pub mod pipeline;
pub mod regions;
pub mod slide_io;
pub mod stain;
pub mod synth;
pub mod tumor_mask;
