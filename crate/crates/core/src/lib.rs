//! Resonance graphs, block normal forms and a truncated KAM iteration for the
//! completely resonant nonlinear Schrödinger equation on the d-dimensional torus.
//!
//! The crate is organised around the pipeline
//!
//! ```text
//! lattice -> graph -> poly -> blocks -> final_graph -> { melnikov, strat, kam }
//! ```
//!
//! * [`lattice`]: integer lattice primitives, the maps `eta`, `pi`, `pi2` and the
//!   edge sets `X_q`.
//! * [`graph`]: the geometric graph on a finite lattice box, connected components,
//!   genericity checks, roots, colors and phase vectors.
//! * [`poly`]: exact polynomials in `sqrt(xi)` with rational coefficients.
//! * [`blocks`]: block matrices of combinatorial graphs, eigenvalue catalogs and
//!   Fitting decompositions.
//! * [`final_graph`]: the graph on (root, eigenvalue-branch) pairs and the
//!   assembled block-diagonal normal form.
//! * [`melnikov`]: non-resonance (Melnikov) verification and measure scans.
//! * [`strat`]: optimal presentations, cuts and lattice stratifications.
//! * [`ham`] / [`kam`]: truncated Hamiltonian algebra and the KAM step.

pub mod blocks;
pub mod final_graph;
pub mod graph;
pub mod ham;
pub mod intlin;
pub mod kam;
pub mod lattice;
pub mod melnikov;
pub mod numeric;
pub mod poly;
pub mod strat;

pub use lattice::{EdgeColor, EdgeLabel, LatticeVector, TangentialSites};
