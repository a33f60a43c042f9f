//! Helpers shared by integration tests and the acceptance run.
#![allow(dead_code)]

pub mod registry;
pub mod corpus;
pub mod workloads;
pub mod fuzz;
