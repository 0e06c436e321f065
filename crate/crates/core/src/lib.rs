//! Semidefinite relaxations for unbalanced three-phase optimal power flow
//! with wye and delta connected devices, and exact solution recovery.

// Links the system OpenBLAS used by the interior-point solver.
extern crate openblas_src;

pub mod bfm;
pub mod bim;
pub mod blocks;
pub mod conic;
pub mod cost;
pub mod equivalence;
pub mod feeder;
pub mod hermlin;
pub mod oracle;
pub mod recovery;
pub mod registry;
pub mod relax;
