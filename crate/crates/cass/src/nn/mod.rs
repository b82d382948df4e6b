//! Minimal f64 neural-net layers with hand-written backward passes.
//!
//! Every layer follows one convention: `forward` takes the parameter store
//! and an input, returning the output plus a cache; `backward` takes the
//! cache and the upstream gradient, accumulates parameter gradients into
//! the store, and returns the input gradient. Gradient correctness for each
//! layer is pinned by central-finite-difference tests.

pub mod act;
pub mod attention;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod pool;
pub mod store;

pub use act::{Gelu, Relu};
pub use attention::MultiHeadAttention;
pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::{GroupNorm, LayerNorm};
pub use pool::GlobalAvgPool;
pub use store::{ParamId, ParamStore, ParamTensor};
