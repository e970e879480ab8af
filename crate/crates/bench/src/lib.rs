//! Shared fixtures for the criterion benches.

use sinai_core::dynsys::{ControlProtocol, System};
use sinai_core::ensemble::{sample_canonical, CanonicalSpec, Ensemble};

pub fn kicked_top() -> System {
    System::kicked_top(std::f64::consts::FRAC_PI_2, 5.0)
}

pub fn uniform_sphere_ensemble(samples: usize) -> (System, Ensemble) {
    let sys = kicked_top();
    let ens = sample_canonical(
        &sys,
        &CanonicalSpec {
            beta: 0.0,
            lambda0: 0.0,
            samples,
            seed: 99,
        },
    )
    .expect("sampling");
    (sys, ens)
}

pub fn constant_protocol(horizon: usize) -> ControlProtocol {
    ControlProtocol::constant(0.0, horizon)
}
