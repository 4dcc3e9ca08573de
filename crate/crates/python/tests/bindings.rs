use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module<F: FnOnce(Python<'_>, &Bound<'_, PyDict>)>(f: F) {
    Python::initialize();
    Python::attach(|py| {
        let module = pyo3::wrap_pymodule!(saml::saml)(py);
        let globals = PyDict::new(py);
        globals.set_item("saml", module).unwrap();
        f(py, &globals);
    });
}

fn run(py: Python<'_>, globals: &Bound<'_, PyDict>, code: &str) {
    let code = std::ffi::CString::new(code).unwrap();
    py.run(&code, Some(globals), None).unwrap();
}

#[test]
fn metrics_are_exposed() {
    with_module(|py, g| {
        run(
            py,
            g,
            "assert saml.auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75\n\
             assert abs(saml.rela_impr(0.6392, 0.6348) - 3.26) < 0.005\n\
             try:\n    saml.rela_impr(0.7, 0.5)\n    raise AssertionError\nexcept ValueError:\n    pass\n",
        );
    });
}

#[test]
fn synth_train_predict_round_trip() {
    with_module(|py, g| {
        run(
            py,
            g,
            r#"
spec = """
num_scenarios = 2
samples_per_scenario = [80, 40]
similarity = [[1.0, 0.5], [0.5, 1.0]]
scenario_weights = [1.0, 1.0]
num_users = 20
num_items = 15
num_user_groups = 2
num_item_categories = 3
"""
data = saml.synth(spec, seed=3)
assert len(data) == 120
cfg = "[model]\nheads = 1\nhidden = [4, 2]\n[optim]\nepochs = 1\n"
model, log = saml.train(cfg, ["variant=no_aux"], data)
assert model.variant == "no_aux" and len(log) == 1
p = model.predict(data, "all")
assert len(p) == 120
try:
    model.predict(data, "validation")
    raise AssertionError
except ValueError:
    pass
"#,
        );
    });
}
