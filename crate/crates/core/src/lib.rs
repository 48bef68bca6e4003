//! Multi-branch driving planner with kinematic trajectory refinement.
//!
//! The library is organized around a planning pipeline with three branches —
//! a trajectory-vocabulary scorer, a discrete control decoder, and a diffusion
//! policy producing smooth control proposals — fused by nearest-neighbor
//! matching through a kinematic bicycle model and a control ensemble. A
//! deterministic 2D micro-simulator with reactive agents provides closed-loop
//! evaluation and scripted-expert demonstrations for training.

pub mod cli;
pub mod diffusion;
pub mod geom;
pub mod heads;
pub mod kinematics;
pub mod nn;
pub mod refine;
pub mod simloop;
pub mod teachers;
pub mod world;
