//! Self-supervised pre-training and supervised fine-tuning of heterogeneous
//! graph transformers on article-centred social context graphs.

pub mod corpusgen;
pub mod encoder;
pub mod eval;
pub mod hetgraph;
pub mod numerics;
pub mod objectives;
pub mod trainer;
