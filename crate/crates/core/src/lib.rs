//! Userspace eBPF runtime: bytecode, verifier, interpreter, shared-memory
//! maps, object loading, in-process hooking and a replayable control plane.

pub mod attach;
pub mod bench;
pub mod control;
pub mod engine;
pub mod fixtures;
pub mod helpers;
pub mod isa;
pub mod loader;
pub mod maps;
pub mod targets;
pub mod verifier;
