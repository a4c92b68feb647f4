//! Desk-scale multilingual translation laboratory: hand-built autodiff,
//! four transformer variants (encoder-decoder, causal and prefix
//! decoder-only, two-stage decoder-only), instruction-level contrastive
//! learning, a synthetic cipher-language corpus, and SVCCA-based
//! linguistic-preference analysis.

pub mod analysis;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};
