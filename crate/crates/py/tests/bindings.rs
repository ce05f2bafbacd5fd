use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module(f: impl for<'py> FnOnce(Python<'py>, &Bound<'py, PyDict>)) {
    Python::initialize();
    Python::attach(|py| {
        let m = pyo3::wrap_pymodule!(mast_py::mast_py)(py);
        let g = PyDict::new(py);
        g.set_item("m", m).unwrap();
        f(py, &g);
    });
}

fn run(py: Python<'_>, g: &Bound<'_, PyDict>, code: &str) {
    let c = std::ffi::CString::new(code).unwrap();
    if let Err(e) = py.run(&c, Some(g), None) {
        panic!("{code}\n{e}");
    }
}

#[test]
fn metrics_round_trip_through_python() {
    with_module(|py, g| {
        run(py, g, "assert m.spl([(True, 4.0, 8.0), (False, 4.0, 20.0)]) == 0.25");
        run(py, g, "assert not m.episode_success(True, 500, 0.0)");
        run(py, g, "assert m.position_indices(1) == [2, 1, 2, 1, 0, 1, 2, 1, 2]");
        run(py, g, "assert 'MaAST' in m.variants()");
    });
}

#[test]
fn errors_map_to_python_exceptions() {
    with_module(|py, g| {
        run(py, g, "try:\n    m.spl([(True, 0.0, 1.0)])\nexcept ValueError:\n    pass\nelse:\n    raise AssertionError");
        run(py, g, "try:\n    m.Policy('Nope')\nexcept ValueError:\n    pass\nelse:\n    raise AssertionError");
        run(py, g, "try:\n    m.World.load('/nonexistent/w.txt')\nexcept OSError:\n    pass\nelse:\n    raise AssertionError");
    });
}

#[test]
fn simulator_turns_in_place() {
    with_module(|py, g| {
        run(
            py,
            g,
            "w = m.World.generate(seed=1)\n\
             s = m.Simulator(w, seed=2)\n\
             x, y, h = s.pose()\n\
             assert s.step('right')['pose'] == (x, y, (h + 1) % 4)\n\
             assert s.step('left')['pose'] == (x, y, h)\n\
             assert m.World.from_text(w.to_text()) == w",
        );
    });
}
