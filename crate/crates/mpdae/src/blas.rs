//! Sanity barrier for the linear-algebra backend.
//!
//! OpenBLAS selects vectorised kernels from the CPUID in its own load-time
//! constructor. On some virtualised x86-64 hosts the AVX-512 kernels return
//! wrong results without any error, which would silently corrupt every
//! factorisation in this crate. The kernel choice is latched before any Rust
//! code runs, so it cannot be repaired from inside the process; it can only
//! be detected, and fixed by restarting with `OPENBLAS_CORETYPE` pinned to a
//! sane generation (the workspace `.cargo/config.toml` pins `Haswell`, and
//! the command line binary re-executes itself with the pin when needed).

use std::sync::OnceLock;

use ndarray::{Array1, Array2};
use ndarray_linalg::Solve;

use crate::error::{Error, Result};

static VERIFIED: OnceLock<std::result::Result<(), String>> = OnceLock::new();

/// Solves a small reference system once per process and fails loudly if the
/// backend returns garbage. Called from every entry point that leads into
/// LAPACK.
pub fn verify_backend() -> Result<()> {
    VERIFIED
        .get_or_init(|| {
            let n = 48;
            let a = Array2::from_shape_fn((n, n), |(i, j)| {
                let x = ((i * 131 + j * 17 + 7) % 1000) as f64 / 1000.0 - 0.5;
                if i == j {
                    x + 4.0
                } else {
                    x
                }
            });
            let b = Array1::from_shape_fn(n, |i| (i % 7) as f64 - 3.0);
            let x = match a.solve(&b) {
                Ok(x) => x,
                Err(e) => return Err(format!("reference solve failed: {e}")),
            };
            let residual = (&a.dot(&x) - &b)
                .iter()
                .fold(0.0f64, |m, &v| m.max(v.abs()));
            if residual < 1e-8 {
                Ok(())
            } else {
                Err(format!(
                    "reference 48x48 solve has residual {residual:.3e}; the BLAS kernels of this \
                     process are broken. Restart with OPENBLAS_CORETYPE=Haswell (see README)."
                ))
            }
        })
        .clone()
        .map_err(Error::SingularMatrix)
}

/// For binaries: if the backend is broken and no kernel pin is set, re-execute
/// the current process with `OPENBLAS_CORETYPE=Haswell`. Returns only when the
/// backend verifies (or the pin was already present, to avoid exec loops).
pub fn exec_with_stable_kernels_if_needed() {
    if verify_backend().is_ok() {
        return;
    }
    if std::env::var_os("OPENBLAS_CORETYPE").is_some() {
        // Already pinned and still broken; let callers surface the error.
        return;
    }
    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        if let Ok(exe) = std::env::current_exe() {
            let err = std::process::Command::new(exe)
                .args(std::env::args_os().skip(1))
                .env("OPENBLAS_CORETYPE", "Haswell")
                .exec();
            eprintln!("failed to re-execute with pinned BLAS kernels: {err}");
        }
    }
}
