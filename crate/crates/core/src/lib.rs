//! Continual imitation learning with task-specific adapters.
//!
//! A self-contained stack: a minimal f64 autodiff engine ([`tensor`]), a
//! transformer policy with frozen encoders, FiLM fusion and a GMM action
//! head ([`policy`]), pluggable parameter-efficient adapters ([`adapters`]),
//! a synthetic pick-and-place benchmark with scripted experts ([`bench`]),
//! and a continual-learning harness with forward/backward-transfer metrics
//! ([`harness`]). Checkpoints and adapter bundles persist through
//! [`checkpoint`]; [`config`] holds the experiment schema and profiles.

pub mod adapters;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod driver;
pub mod harness;
pub mod policy;
pub mod rng;
pub mod tensor;
