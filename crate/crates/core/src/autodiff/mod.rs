//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records one forward pass. Values are computed eagerly; each
//! recorded node remembers how to push its output gradient back to its
//! inputs. Parameters live outside the tape in a [`ParamStore`] and are
//! copied onto it with [`Tape::param`], so a tape can be discarded after
//! every step. A tape is single-threaded; independent samples get
//! independent tapes.

mod gradcheck;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{
    finite_diff_check, finite_diff_check_store, finite_diff_check_with, relative_error,
    GradCheckOptions, GradCheckReport, ParamReport,
};
pub use params::{GradientMap, Param, ParamId, ParamStore};
pub use tape::{Activation, Tape, Var};
pub use tensor::Tensor;
