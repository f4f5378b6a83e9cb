use pyo3::prelude::*;

#[pymodule]
fn llp_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
