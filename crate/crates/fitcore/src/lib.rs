//! Model fitting for differentiable programs.
//!
//! `fitcore` fits anything expressible with its small reverse-mode
//! autodiff core through a [`trial::Trial`]: a Keras-style engine whose
//! every step can be observed and altered by [`callbacks`] operating on
//! a shared mutable [`state::State`], while [`metrics`] trees stream
//! per-step statistics into aggregates. Checkpoints round-trip bit-exact
//! through [`persistence`].
//!
//! The narrative guide lives in the `book/` directory of the repository;
//! its code snippets compile and run as part of this crate's doc tests.
//!
//! ```
//! use fitcore::prelude::*;
//!
//! // y = 3x fits in a few gradient steps.
//! struct Line { w: Parameter }
//! impl Model for Line {
//!     fn parameters(&self) -> Vec<Parameter> { vec![self.w.clone()] }
//!     fn forward(&mut self, x: &Tensor, _: Option<&mut State>) -> Result<Tensor> {
//!         x.matmul(self.w.tensor())
//!     }
//! }
//!
//! let w = Parameter::new("w", Tensor::from_vec(vec![0.0], [1, 1], true)?)?;
//! let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], [4, 1], false)?;
//! let y = Tensor::from_vec(vec![3.0, 6.0, 9.0, 12.0], [4, 1], false)?;
//!
//! let optimizer = Sgd::new(vec![w.clone()], 0.05, 0.0)?;
//! let mut trial = Trial::new(Line { w }, optimizer)
//!     .with_criterion(Criterion::Mse)
//!     .with_metric_key("loss")?
//!     .with_train_generator(VecGenerator::new(vec![Batch::supervised(x, y)]));
//! let history = trial.run(100)?;
//! assert!(history.last().unwrap()["loss"] < 1e-6);
//! # fitcore::error::Result::Ok(())
//! ```

#[cfg(doctest)]
mod book;

pub mod autodiff;
pub mod callbacks;
pub mod error;
pub mod metrics;
pub mod optim;
pub mod persistence;
pub mod state;
pub mod trial;

/// The names most programs need.
pub mod prelude {
    pub use crate::autodiff::{concat, zero_grad, Parameter, Shape, Tensor};
    pub use crate::callbacks::{
        add_to_loss, bind, checkpointer, console_logger, csv_logger, early_stopping,
        l2_weight_decay, lr_decay, Callback, CallbackList, Direction, Hook, SaveMode,
    };
    pub use crate::error::{Error, Result};
    pub use crate::metrics::{
        build_default, register_default, standard_tree, wrap_mean, wrap_running_mean,
        wrap_std, MetricNode, MetricTree,
    };
    pub use crate::optim::{Sgd, SgdState};
    pub use crate::state::{keys, state_key, State, StateKey, StateValue};
    pub use crate::trial::{
        binary_cross_entropy, hinge, mse, Batch, BatchGenerator, Criterion, History,
        Model, Trial, TrialStateRecord, VecGenerator,
    };
}
