//! placeholder
use pyo3::prelude::*;

#[pymodule]
fn mpdae_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
