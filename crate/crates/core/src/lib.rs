//! Thermodynamic measures of multipartite quantum correlation.
//!
//! The crate computes the multipartite work deficit, its one-way variant and
//! global quantum discord. Few-body states are handled exactly through a
//! restarted Riemannian optimizer; matrix product states are handled through
//! segment bounds that only ever optimize measurements on short windows,
//! including thermodynamic-limit windows built from the transfer-matrix fixed
//! point and coarse-grained blocks.
//!
//! All entropies are in nats.
//!
//! ```
//! use wdeficit::{exact, optimize::OptimizerConfig, states};
//!
//! let ghz = states::ghz(3).unwrap();
//! let res = exact::deficit_exact(&ghz, &OptimizerConfig::default().with_restarts(4)).unwrap();
//! assert!((res.value - 2f64.ln()).abs() < 1e-6);
//! ```

pub mod bounds;
pub mod error;
pub mod exact;
pub mod measurement;
pub mod mps;
pub mod numerics;
pub mod optimize;
pub mod states;

pub use error::{Error, Result};

/// Scalar used by everything above the numerics layer.
pub type Real = f64;
pub type C64 = num_complex::Complex<f64>;
pub type CMat = nalgebra::DMatrix<C64>;
pub type CVec = nalgebra::DVector<C64>;
pub type Operator = numerics::HermitianOperator<f64>;

/// Largest dense dimension accepted by default (`d^N` for states, `d^l` for windows).
pub const DEFAULT_DENSE_CAP: usize = 1 << 14;
