pub mod alignment;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod contrastive;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod optim;
pub mod plots;
pub mod reflect;
pub mod train;
