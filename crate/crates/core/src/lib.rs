//! Robust pricing of time-invariant exotics through optimal Skorokhod
//! embedding on a binomial lattice, with dual super-replication certificates
//! and the pathwise calculus needed to check them.

pub mod measures;
pub mod paths;
pub mod timechange;
pub mod strategies;
pub mod lp;
pub mod embedding;
pub mod duality;
pub mod superrep;
pub mod pipeline;
