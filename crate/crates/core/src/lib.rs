//! Graph-structured visual imitation at desk scale: hierarchical visual
//! entity graphs, a relative-arrangement imitation cost, a kinematic
//! tabletop simulator with a noisy detector, scripted demonstrators, and
//! time-varying linear-Gaussian policy search.

pub mod cost;
pub mod demo;
pub mod dynamics;
pub mod graph;
pub mod lqr;
pub mod pi2;
pub mod policy;
pub mod quadcost;
pub mod shape;
pub mod sim;
pub mod trace;
pub mod train;
