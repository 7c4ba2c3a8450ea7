//! Graphical residual flows: normalizing flows whose residual blocks are
//! masked to follow a Bayesian network, with exact log-determinants and
//! numerical inversion.

pub mod autodiff;
pub mod data;
pub mod flow;
pub mod graph;
pub mod inversion;
pub mod masks;
pub mod tensor;
pub mod train;
