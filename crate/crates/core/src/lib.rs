//! Equation-oriented flowsheet optimization with full-space, surrogate and
//! implicit-function formulations.

// Guards written as `!(x > 0.0)` also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod expr;
pub mod incidence;
pub mod model;
pub mod sqsolve;
pub mod implicit;
pub mod nlp;
pub mod flowsheet;
pub mod surrogate;
pub mod sweep;
