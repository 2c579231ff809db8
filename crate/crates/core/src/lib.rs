//! Distributed and decentralized H2 controller synthesis for interconnected
//! discrete-time systems.
//!
//! Networks of linear subsystems coupled over an undirected graph are modeled
//! in [`netmodel`]. [`analysis`] certifies stability and an H2 bound from
//! per-node matrix inequalities coupled only through neighbor multipliers;
//! [`synthesis`] solves the corresponding existence programs and reconstructs
//! structured dynamic output-feedback controllers node by node. [`sdp`]
//! lowers the matrix-inequality programs to a conic solver and re-verifies
//! returned solutions independently. [`bench`] generates benchmark models,
//! simulates closed loops, and measures how synthesis cost scales with
//! network size; [`io`] defines the on-disk document formats.

pub mod analysis;
pub mod bench;
pub mod io;
pub mod mat;
pub mod netmodel;
pub mod sdp;
pub mod synthesis;
