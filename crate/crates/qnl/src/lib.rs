pub mod assets;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod digest;
pub mod embed;
pub mod eval;
pub mod export;
pub mod kg;
pub mod llm;
pub mod pipeline;
pub mod scoring;
