//! Target-reaching for a humanoid arm and head: kinematics, the reaching
//! task, an actor-critic policy trained with PPO, a damped-least-squares IK
//! checker and a depth-image target estimator.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chain;
pub mod config;
pub mod env;
pub mod ik;
pub mod io;
pub mod objective;
pub mod percept;
pub mod policy;
pub mod ppo;
