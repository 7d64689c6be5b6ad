//! Exercises the module through an embedded interpreter.

use pyo3::ffi::c_str;
use pyo3::prelude::*;

#[test]
fn module_round_trip() {
    use stablab::stablab as module;
    pyo3::append_to_inittab!(module);
    Python::initialize();
    Python::attach(|py| {
        py.run(
            c_str!(
                r#"
import stablab
lb = stablab.PolyLoss.l_beta(0.5)
assert stablab.analyze_minimum(lb)["verdict"] == "StableCycle"
r = stablab.analyze_minimum(stablab.PolyLoss.f_minus(), eta=2.5)
assert abs(r["c0"] - 2.5) < 1e-12, r["c0"]
th = stablab.sgd_thresholds(stablab.LossEnsemble.prop1(0.9))
assert abs(th["eta_meansquare"] - 2 * 1.9 / 1.81) < 1e-12
ens = stablab.LossEnsemble([stablab.PolyLoss.f_a(1.0), stablab.PolyLoss.f_a(0.5)], 1)
assert stablab.sgd_thresholds(ens)["eta_sufficient"] == 2.0
try:
    stablab.PolyLoss(1, [([7], 1.0)])
    raise AssertionError("degree cap not enforced")
except ValueError:
    pass
"#
            ),
            None,
            None,
        )
        .inspect_err(|e| e.print(py))
        .expect("python assertions hold");
    });
}
