//! Physics-based refinement of hand-object interaction trajectories.

pub mod contact;
pub mod diffcore;
pub mod energy;
pub mod eval;
pub mod forces;
pub mod geometry;
pub mod kinematics;
pub mod refine;
pub mod scene;
pub mod scenegen;
