//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Graph`] records operations as they are built. Each node caches its
//! forward value, so building a graph also evaluates it whenever all of its
//! inputs are bound. Placeholders ([`Graph::placeholder`]) defer evaluation
//! until [`Graph::evaluate`] binds them. [`Graph::backward`] walks the nodes
//! in reverse and returns gradients for every trainable parameter that the
//! loss depends on.
//!
//! The engine is generic over [`Real`], which is implemented for `f32`
//! (training) and `f64` (gradient checks).
//!
//! ```
//! use ctxasr_nn::{Graph, ParamStore, Tensor};
//!
//! let mut params = ParamStore::<f64>::new();
//! let x = params.add("x", Tensor::row(vec![2.0, 3.0])).unwrap();
//!
//! let mut g = Graph::new();
//! let xn = g.param(&params, x);
//! let sq = g.mul(xn, xn).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[4.0, 6.0]);
//! ```

mod error;
mod gradcheck;
mod graph;
mod ops;
mod optim;
mod params;
mod real;
mod rng;
mod tensor;

pub use error::{NnError, Result};
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use graph::{Graph, NodeId};
pub use ops::{AttnMask, CustomOp};
pub use optim::{adam_step, AdamConfig, NoamSchedule, OptimizerState};
pub use params::{Gradients, ParamEntry, ParamId, ParamStore};
pub use real::Real;
pub use rng::SeedTree;
pub use tensor::Tensor;
