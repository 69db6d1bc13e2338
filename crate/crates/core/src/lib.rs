//! Tree-based capsule networks for program classification.
//!
//! The pipeline takes abstract syntax trees in a canonical JSON form,
//! embeds node types, applies continuous-binary-tree convolution, groups
//! the result into primary variable capsules, routes them to a fixed set of
//! static capsules and then dynamically to one code capsule per class.
//! Class scores are the code capsule lengths.

pub mod ast;
pub mod capsules;
pub mod conv;
pub mod embeddings;
pub mod io;
pub mod model;
pub mod tensor;
pub mod training;

pub use ast::{AstNode, Sample, Tree, Vocabulary};
pub use model::{ModelConfig, TreeCaps, Variant};
pub use tensor::{Graph, Real, Tensor, Var};
