//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation applied during a forward pass and
//! replays them backwards to produce gradients. Trainable parameters live
//! outside the graph as plain [`Tensor`]s and are bound into a fresh graph
//! on every forward pass with [`Graph::param`].
//!
//! ```
//! use factsurv_autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(0, &Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum_all(sq);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).unwrap(), &[2.0, 4.0]);
//! ```

mod error;
mod gradcheck;
mod graph;
mod optim;
mod rng;
mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{gradcheck, gradcheck_fourth_order, GradcheckReport};
pub use graph::{CustomOp, Gradients, Graph, NodeId, MASK_SENTINEL};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use rng::Xoshiro256;
pub use tensor::Tensor;
