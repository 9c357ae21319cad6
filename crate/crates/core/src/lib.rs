//! Oblivious ellipsoid algorithm for `A^T x <= u`: returns a feasible point or a
//! certificate `λ >= 0, Aλ = 0, u^T λ < 0` of infeasibility.

pub mod bench;
pub mod certificates;
pub mod ellipsoid;
pub mod error;
pub mod generate;
pub mod io;
pub mod oea;
pub mod problem;
pub mod seap;
pub mod tau;
pub mod variants;

pub use error::{Error, Result};
