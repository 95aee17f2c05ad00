//! Contrastive image-network pretraining at desk scale.
//!
//! Dual encoders map 3D volumes and functional connectivity networks (FCNs)
//! into a shared unit-sphere embedding space. Training combines a symmetric
//! contrastive loss, masked-volume reconstruction, and image-network matching
//! with hard negatives. Trained encoders are evaluated by linear probing and by
//! network prompting, which classifies a volume by its average similarity to
//! group-level reference FCN embeddings.

pub mod error;
pub mod cli;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod model;
pub mod objectives;
pub mod prompting;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
