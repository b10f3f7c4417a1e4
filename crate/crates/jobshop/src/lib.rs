//! Job-shop scheduling on a heterogeneous disjunctive graph.
//!
//! The shop floor is a graph with one `op` node per operation and two typed
//! arc sets: directed `precedes` arcs for within-job order and symmetric
//! `competes` arcs cliquing operations that share a machine. A typed-attention
//! policy network ([`nn`]) is trained with PPO ([`ppo`]) to dispatch
//! operations one at a time; dispatching heuristics and an exact brute-force
//! solver ([`heuristics`]) plus evaluation and significance testing
//! ([`eval`], [`stats`]) round out the toolkit.

pub mod env;
pub mod eval;
pub mod graph;
pub mod heuristics;
pub mod instance;
pub mod nn;
pub mod ppo;
pub mod rng;
pub mod stats;

pub use env::ScheduleState;
pub use graph::HeteroGraph;
pub use instance::JsspInstance;
pub use nn::{Arch, ModelConfig, PolicyModel};
pub use ppo::TrainConfig;
