//! Deterministic model of Windows LSASS credential dumping and the defenses
//! against it.
//!
//! A [`world::World`] holds one simulated machine: a SAM account database,
//! the in-memory logon-session store, processes with tokens and privileges,
//! and the SAM ALPC port. [`attacks`] runs dump techniques against a world
//! as explicit step traces; [`defenses`] installs prevention policies that
//! block, redact, or terminate along the way. Everything is synchronous and
//! reproducible: identical inputs give identical worlds, byte for byte.

pub mod attacks;
pub mod authcore;
pub mod defenses;
pub mod md4;
pub mod procmodel;
pub mod world;

pub use world::World;
