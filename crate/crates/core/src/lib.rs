//! Orthogonal compatible aligned (OCA) representation learning for
//! backward-compatible retrieval: old and new embedding models whose
//! features can be compared directly, plus the retrieval metrics used to
//! check that they can.

pub mod datagen;
pub mod error;
pub mod linalg;
pub mod losses;
pub mod nn;
pub mod par;
pub mod retrieval;
pub mod trainer;

pub use error::{Error, Location, Result};
pub use losses::{LossBreakdown, LossSpec, Mode};
pub use par::Exec;
pub use trainer::{ModelBundle, Part, Prototypes, Role, TrainConfig};
