pub mod dataset;
pub mod expert;
pub mod gridworld;
pub mod rng;
pub mod nn;
pub mod goalid;
pub mod eval;
pub mod discrim;
pub mod planner;
pub mod cli;
