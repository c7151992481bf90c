//! Controller design for polynomial nonlinear mechanical systems via
//! spectral submanifold (SSM) reduction.
//!
//! The pipeline: lift a second-order mechanical model to first-order form,
//! compute the autonomous SSM of a master modal subspace, rank and select a
//! linear correction basis, assemble the extended linear-quadratic problem
//! induced by the offline SSM trajectory, and solve it with backward Riccati
//! and compensation sweeps. Receding-horizon runs re-anchor the design on the
//! full-model state at segment boundaries.

pub mod elqr;
pub mod error;
pub mod linred;
pub mod mechmodel;
pub mod ode;
pub mod poly;
pub mod spectral;
pub mod ssm;

pub use error::Error;

/// Complex double used throughout.
pub type C64 = num_complex::Complex64;

extern "C" {
    fn openblas_set_num_threads(n: std::os::raw::c_int);
}

/// Pin BLAS to a single thread, once per process.
///
/// Two reasons: OpenBLAS's threaded factorizations use caller-stack buffers
/// that overflow the 2 MiB default thread stack, and threaded reductions
/// reorder sums, breaking byte-identical reruns. The matrices here are
/// small, so nothing is lost. Called automatically by every solver entry
/// point; exposed for callers that drive LAPACK directly.
pub fn init_blas_single_thread() {
    use std::sync::Once;
    static ONCE: Once = Once::new();
    ONCE.call_once(|| unsafe { openblas_set_num_threads(1) });
}

/// SHA-256 of a file, hex-encoded. Artifact files carry this stamp of the
/// model document they were derived from, so stale mixes are detectable.
pub fn file_sha256(path: &std::path::Path) -> error::Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
