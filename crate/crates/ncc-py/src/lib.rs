use pyo3::prelude::*;

#[pymodule]
fn ncc_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
