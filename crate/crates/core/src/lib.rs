// Negated float comparisons below are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Simulation entry points take scale, seed, worker and guard settings explicitly.
#![allow(clippy::too_many_arguments)]

pub mod analysis;
pub mod cli;
pub mod ensemble;
pub mod limits;
pub mod model;
pub mod models;
pub mod pdp;
pub mod rate_expr;
pub mod rng;
pub mod ssa;
