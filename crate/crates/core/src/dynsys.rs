//! Dynamical systems: phase states, work protocols, and unit-time maps.
//!
//! A system is the triplet (phase space, volume measure, unit-time
//! automorphism). Three concrete systems are provided:
//!
//! * [`DiskRotation`] -- the unit disk with H = q^2 + theta^2; one step is
//!   the exact rotation by pi about the origin.
//! * [`KickedTop`] -- the classical kicked top on the unit sphere; one step
//!   is a precession about x by `alpha` followed by a torsion about z by
//!   `kappa * Z'` (Z' the post-precession z-coordinate).
//! * [`DrivenOscillator`] -- H = theta^2/2 + lambda q^2/2 with lambda driven
//!   by a [`ControlProtocol`]; the unit step is a fixed-substep leapfrog.
//!
//! [`IntervalShift`] wraps a discrete cell permutation as a piecewise
//! translation of vertical strips of the unit square; it exists so the exact
//! discrete reference implementation can be pushed through the continuous
//! pipeline.
//!
//! All maps are bijections with unit Jacobian determinant on the relevant
//! tangent space, so Liouville's theorem applies step by step.

use serde::Serialize;

use crate::error::{Error, Result};

/// A point in phase space. Planar systems use `(q, theta, 0)`; the kicked
/// top stores a unit 3-vector `(X, Y, Z)`; the interval shift uses
/// `(x, y, 0)` on the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhaseState(pub [f64; 3]);

impl PhaseState {
    pub fn planar(q: f64, theta: f64) -> Self {
        PhaseState([q, theta, 0.0])
    }

    pub fn sphere(x: f64, y: f64, z: f64) -> Self {
        PhaseState([x, y, z])
    }

    pub fn q(&self) -> f64 {
        self.0[0]
    }

    pub fn theta(&self) -> f64 {
        self.0[1]
    }

    pub fn norm(&self) -> f64 {
        let [x, y, z] = self.0;
        (x * x + y * y + z * z).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// 3x3 Jacobian. Planar tangent maps embed a 2x2 block with a trailing 1.
pub type Mat3 = [[f64; 3]; 3];

pub fn mat3_identity() -> Mat3 {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

pub fn mat3_apply(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (i, row) in m.iter().enumerate() {
        out[i] = row[0] * v[0] + row[1] * v[1] + row[2] * v[2];
    }
    out
}

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

type Mat2 = [[f64; 2]; 2];

fn mat2_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    [
        [
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
        ],
        [
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        ],
    ]
}

/// The externally controlled work protocol lambda(t), stored densely as a
/// stepwise-constant schedule on 0..=horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlProtocol {
    values: Vec<f64>,
}

impl ControlProtocol {
    pub fn constant(value: f64, horizon: usize) -> Self {
        ControlProtocol {
            values: vec![value; horizon + 1],
        }
    }

    /// Builds a stepwise-constant schedule from `(step, value)` breakpoints.
    /// The first breakpoint must be at step 0; later values hold until the
    /// next breakpoint.
    pub fn from_points(points: &[(usize, f64)], horizon: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::config("protocol needs at least one (step, value) point"));
        }
        if points[0].0 != 0 {
            return Err(Error::config("protocol schedule must start at step 0"));
        }
        let mut values = Vec::with_capacity(horizon + 1);
        let mut idx = 0;
        for t in 0..=horizon {
            while idx + 1 < points.len() && points[idx + 1].0 <= t {
                idx += 1;
            }
            if idx + 1 < points.len() && points[idx + 1].0 < points[idx].0 {
                return Err(Error::config("protocol points must be sorted by step"));
            }
            values.push(points[idx].1);
        }
        Ok(ControlProtocol { values })
    }

    pub fn horizon(&self) -> usize {
        self.values.len() - 1
    }

    /// lambda at integer step t (clamped to the horizon).
    pub fn value_at(&self, t: usize) -> f64 {
        let i = t.min(self.values.len() - 1);
        self.values[i]
    }

    /// The time-reversed protocol, schedule(T - t).
    pub fn reversed(&self) -> Self {
        let mut values = self.values.clone();
        values.reverse();
        ControlProtocol { values }
    }

    pub fn is_constant(&self) -> bool {
        self.values.windows(2).all(|w| w[0] == w[1])
    }
}

/// Exact rotation of the unit disk by pi per unit time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiskRotation;

/// Classical kicked top on the unit sphere.
///
/// The stroboscopic map conserves only the total angular momentum, so
/// [`System::hamiltonian`] exposes |J|^2; the canonical density on the sphere
/// is then uniform at every beta, which is the regime the examples use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KickedTop {
    /// Precession angle about the x-axis (named `alpha_top` in configs to
    /// avoid clashing with partition-cell labels).
    pub alpha: f64,
    /// Torsion strength; the kick rotates about z by `kappa * Z'`.
    pub kappa: f64,
    /// Rescale to the unit sphere after every step. The drift without it is
    /// below 1e-12 over 1e6 steps; the flag exists so tests can measure it.
    pub renormalize: bool,
}

impl KickedTop {
    pub fn new(alpha: f64, kappa: f64) -> Self {
        KickedTop {
            alpha,
            kappa,
            renormalize: true,
        }
    }
}

/// Harmonic oscillator H = theta^2/2 + lambda q^2/2 with driven stiffness.
///
/// The unit-time step is a `substeps`-stage leapfrog with lambda held
/// constant within the step. Because the force is linear, the composed
/// substeps collapse to a single symplectic 2x2 matrix, which is what the
/// stepper applies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DrivenOscillator {
    pub substeps: u32,
}

impl Default for DrivenOscillator {
    fn default() -> Self {
        // 64 substeps leave a leapfrog phase error of ~1.7e-5 per unit time,
        // which fails the 1e-6 checks; 512 brings it to ~2.7e-7.
        DrivenOscillator { substeps: 512 }
    }
}

impl DrivenOscillator {
    /// Composed one-unit-time leapfrog matrix for fixed lambda, built by
    /// repeated squaring of the substep matrix (kick-drift-kick).
    pub fn unit_matrix(&self, lambda: f64) -> Mat2 {
        let dt = 1.0 / self.substeps as f64;
        // K(dt/2) D(dt) K(dt/2) acting on (q, theta)
        let sub = [
            [1.0 - lambda * dt * dt / 2.0, dt],
            [-lambda * dt * (1.0 - lambda * dt * dt / 4.0), 1.0 - lambda * dt * dt / 2.0],
        ];
        debug_assert!(self.substeps.is_power_of_two());
        let mut acc = sub;
        let mut n = self.substeps;
        while n > 1 {
            acc = mat2_mul(&acc, &acc);
            n /= 2;
        }
        acc
    }
}

/// A permutation of `n` vertical strips of the unit square, acting as an
/// affine horizontal rearrangement. With strip widths constant along
/// permutation orbits the map is a piecewise translation and preserves
/// Lebesgue measure exactly.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntervalShift {
    pub widths: Vec<f64>,
    pub perm: Vec<usize>,
    starts: Vec<f64>,
    inverse_perm: Vec<usize>,
}

impl IntervalShift {
    pub fn new(widths: Vec<f64>, perm: Vec<usize>) -> Result<Self> {
        let n = widths.len();
        if perm.len() != n || n == 0 {
            return Err(Error::config("interval shift needs matching widths/perm"));
        }
        let mut seen = vec![false; n];
        for &p in &perm {
            if p >= n || seen[p] {
                return Err(Error::config("perm is not a bijection"));
            }
            seen[p] = true;
        }
        let total: f64 = widths.iter().sum();
        if (total - 1.0).abs() > 1e-9 || widths.iter().any(|&w| w <= 0.0) {
            return Err(Error::config("strip widths must be positive and sum to 1"));
        }
        let mut starts = Vec::with_capacity(n);
        let mut acc = 0.0;
        for &w in &widths {
            starts.push(acc);
            acc += w;
        }
        let mut inverse_perm = vec![0; n];
        for (i, &p) in perm.iter().enumerate() {
            inverse_perm[p] = i;
        }
        Ok(IntervalShift {
            widths,
            perm,
            starts,
            inverse_perm,
        })
    }

    fn strip_of(&self, x: f64) -> usize {
        // linear scan; strip counts are small by construction
        let mut i = self.widths.len() - 1;
        for (k, &s) in self.starts.iter().enumerate().skip(1) {
            if x < s {
                i = k - 1;
                break;
            }
        }
        i
    }

    fn forward(&self, x: f64) -> f64 {
        let i = self.strip_of(x);
        let j = self.perm[i];
        self.starts[j] + (x - self.starts[i]) * self.widths[j] / self.widths[i]
    }

    fn backward(&self, x: f64) -> f64 {
        let j = self.strip_of(x);
        let i = self.inverse_perm[j];
        self.starts[i] + (x - self.starts[j]) * self.widths[i] / self.widths[j]
    }
}

/// Chart used for sampling, quadrature, and partition cells.
///
/// The chart coordinates are chosen so the invariant volume measure is
/// uniform: `(u = r^2, phi)` on the disk, `(z, phi)` on the sphere. Bounded
/// charts are normalized to total volume 1; the plane keeps Lebesgue measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Chart {
    Disk,
    Sphere,
    Plane,
    Square,
}

impl Chart {
    /// Chart rectangle covering the whole (bounded) domain, as
    /// `[[lo0, hi0], [lo1, hi1]]`. `None` for the unbounded plane.
    pub fn domain(&self) -> Option<[[f64; 2]; 2]> {
        use std::f64::consts::TAU;
        match self {
            Chart::Disk => Some([[0.0, 1.0], [0.0, TAU]]),
            Chart::Sphere => Some([[-1.0, 1.0], [0.0, TAU]]),
            Chart::Plane => None,
            Chart::Square => Some([[0.0, 1.0], [0.0, 1.0]]),
        }
    }

    /// Volume per unit chart area (normalized measure on bounded charts,
    /// Lebesgue on the plane).
    pub fn density(&self) -> f64 {
        use std::f64::consts::TAU;
        match self {
            Chart::Disk => 1.0 / TAU,
            Chart::Sphere => 1.0 / (2.0 * TAU),
            Chart::Plane => 1.0,
            Chart::Square => 1.0,
        }
    }

    pub fn is_bounded(&self) -> bool {
        !matches!(self, Chart::Plane)
    }
}

/// One of the concrete dynamical systems.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum System {
    Disk(DiskRotation),
    Top(KickedTop),
    Oscillator(DrivenOscillator),
    Shift(IntervalShift),
}

impl System {
    pub fn disk() -> Self {
        System::Disk(DiskRotation)
    }

    pub fn kicked_top(alpha: f64, kappa: f64) -> Self {
        System::Top(KickedTop::new(alpha, kappa))
    }

    pub fn oscillator() -> Self {
        System::Oscillator(DrivenOscillator::default())
    }

    pub fn chart(&self) -> Chart {
        match self {
            System::Disk(_) => Chart::Disk,
            System::Top(_) => Chart::Sphere,
            System::Oscillator(_) => Chart::Plane,
            System::Shift(_) => Chart::Square,
        }
    }

    /// Energy function used by canonical sampling and work accounting.
    pub fn hamiltonian(&self, s: PhaseState, lambda: f64) -> f64 {
        match self {
            System::Disk(_) => s.q() * s.q() + s.theta() * s.theta(),
            // Squared total angular momentum: the only smooth invariant of
            // the stroboscopic map (the delta kick exchanges precession and
            // torsion energy every period).
            System::Top(_) => {
                let [x, y, z] = s.0;
                x * x + y * y + z * z
            }
            System::Oscillator(_) => {
                0.5 * s.theta() * s.theta() + 0.5 * lambda * s.q() * s.q()
            }
            System::Shift(_) => 0.0,
        }
    }

    pub fn in_domain(&self, s: PhaseState) -> bool {
        if !s.is_finite() {
            return false;
        }
        match self {
            System::Disk(_) => s.q() * s.q() + s.theta() * s.theta() <= 1.0 + 1e-9,
            System::Top(_) => (s.norm() - 1.0).abs() <= 1e-6,
            System::Oscillator(_) => true,
            System::Shift(_) => {
                (0.0..1.0).contains(&s.0[0]) && (0.0..1.0).contains(&s.0[1])
            }
        }
    }

    /// Anti-canonical time-reversal involution: momenta flip for planar
    /// systems, (Y, Z) -> (-Y, -Z) for the top (reversal of angular
    /// momentum that commutes with the precession axis), identity for the
    /// interval shift.
    pub fn time_reverse(&self, s: PhaseState) -> PhaseState {
        match self {
            System::Disk(_) | System::Oscillator(_) => PhaseState::planar(s.q(), -s.theta()),
            System::Top(_) => PhaseState([s.0[0], -s.0[1], -s.0[2]]),
            System::Shift(_) => s,
        }
    }

    /// Chart coordinates of a state.
    pub fn to_chart(&self, s: PhaseState) -> [f64; 2] {
        use std::f64::consts::TAU;
        match self {
            System::Disk(_) => {
                let u = s.q() * s.q() + s.theta() * s.theta();
                let phi = s.theta().atan2(s.q()).rem_euclid(TAU);
                [u.min(1.0), phi]
            }
            System::Top(_) => {
                let [x, y, z] = s.0;
                let phi = y.atan2(x).rem_euclid(TAU);
                [z.clamp(-1.0, 1.0), phi]
            }
            System::Oscillator(_) => [s.q(), s.theta()],
            System::Shift(_) => [s.0[0], s.0[1]],
        }
    }

    pub fn from_chart(&self, c: [f64; 2]) -> PhaseState {
        match self {
            System::Disk(_) => {
                let r = c[0].max(0.0).sqrt();
                PhaseState::planar(r * c[1].cos(), r * c[1].sin())
            }
            System::Top(_) => {
                let z = c[0].clamp(-1.0, 1.0);
                let r = (1.0 - z * z).max(0.0).sqrt();
                PhaseState([r * c[1].cos(), r * c[1].sin(), z])
            }
            System::Oscillator(_) => PhaseState::planar(c[0], c[1]),
            System::Shift(_) => PhaseState([c[0], c[1], 0.0]),
        }
    }

    pub fn stepper(&self, lambda: f64) -> Stepper<'_> {
        let op = match self {
            System::Disk(_) => StepOp::Disk,
            System::Top(t) => StepOp::Top {
                ca: t.alpha.cos(),
                sa: t.alpha.sin(),
                kappa: t.kappa,
                renormalize: t.renormalize,
            },
            System::Oscillator(o) => {
                let m = o.unit_matrix(lambda);
                let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
                let minv = [
                    [m[1][1] / det, -m[0][1] / det],
                    [-m[1][0] / det, m[0][0] / det],
                ];
                StepOp::Linear { m, minv }
            }
            System::Shift(_) => StepOp::Shift,
        };
        Stepper {
            system: self,
            lambda,
            op,
        }
    }

    /// One application of the unit-time automorphism phi.
    pub fn step(&self, s: PhaseState, lambda: f64) -> PhaseState {
        self.stepper(lambda).apply(s)
    }

    /// The inverse automorphism psi = phi^-1.
    pub fn inverse_step(&self, s: PhaseState, lambda: f64) -> PhaseState {
        self.stepper(lambda).apply_inverse(s)
    }

    /// Jacobian of `step` at `s`.
    pub fn tangent(&self, s: PhaseState, lambda: f64) -> Mat3 {
        self.stepper(lambda).tangent(s)
    }
}

#[derive(Debug, Clone, Copy)]
enum StepOp {
    Disk,
    Top {
        ca: f64,
        sa: f64,
        kappa: f64,
        renormalize: bool,
    },
    Linear {
        m: Mat2,
        minv: Mat2,
    },
    Shift,
}

/// Unit-time map prepared for a fixed control value. For the oscillator this
/// holds the composed leapfrog matrix, so stepping a large ensemble does not
/// repeat the substep composition.
#[derive(Debug, Clone, Copy)]
pub struct Stepper<'a> {
    system: &'a System,
    lambda: f64,
    op: StepOp,
}

impl<'a> Stepper<'a> {
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn apply(&self, s: PhaseState) -> PhaseState {
        match self.op {
            StepOp::Disk => PhaseState::planar(-s.q(), -s.theta()),
            StepOp::Top {
                ca,
                sa,
                kappa,
                renormalize,
            } => {
                let [x, y, z] = s.0;
                // precession about x
                let y1 = y * ca - z * sa;
                let z1 = y * sa + z * ca;
                // torsion about z by kappa * z1
                let (sp, cp) = (kappa * z1).sin_cos();
                let mut out = [x * cp - y1 * sp, x * sp + y1 * cp, z1];
                if renormalize {
                    let n = (out[0] * out[0] + out[1] * out[1] + out[2] * out[2]).sqrt();
                    out = [out[0] / n, out[1] / n, out[2] / n];
                }
                PhaseState(out)
            }
            StepOp::Linear { m, .. } => PhaseState::planar(
                m[0][0] * s.q() + m[0][1] * s.theta(),
                m[1][0] * s.q() + m[1][1] * s.theta(),
            ),
            StepOp::Shift => {
                let shift = match self.system {
                    System::Shift(sh) => sh,
                    _ => unreachable!(),
                };
                PhaseState([shift.forward(s.0[0]), s.0[1], 0.0])
            }
        }
    }

    pub fn apply_inverse(&self, s: PhaseState) -> PhaseState {
        match self.op {
            StepOp::Disk => PhaseState::planar(-s.q(), -s.theta()),
            StepOp::Top {
                ca,
                sa,
                kappa,
                renormalize,
            } => {
                let [x, y, z] = s.0;
                // undo torsion (z is untouched by the kick), then precession
                let (sp, cp) = (-kappa * z).sin_cos();
                let x1 = x * cp - y * sp;
                let y1 = x * sp + y * cp;
                let y0 = y1 * ca + z * sa;
                let z0 = -y1 * sa + z * ca;
                let mut out = [x1, y0, z0];
                if renormalize {
                    let n = (out[0] * out[0] + out[1] * out[1] + out[2] * out[2]).sqrt();
                    out = [out[0] / n, out[1] / n, out[2] / n];
                }
                PhaseState(out)
            }
            StepOp::Linear { minv, .. } => PhaseState::planar(
                minv[0][0] * s.q() + minv[0][1] * s.theta(),
                minv[1][0] * s.q() + minv[1][1] * s.theta(),
            ),
            StepOp::Shift => {
                let shift = match self.system {
                    System::Shift(sh) => sh,
                    _ => unreachable!(),
                };
                PhaseState([shift.backward(s.0[0]), s.0[1], 0.0])
            }
        }
    }

    pub fn tangent(&self, s: PhaseState) -> Mat3 {
        match self.op {
            StepOp::Disk => [[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]],
            StepOp::Top { ca, sa, kappa, .. } => {
                let [x, y, z] = s.0;
                let y1 = y * ca - z * sa;
                let z1 = y * sa + z * ca;
                let (sp, cp) = (kappa * z1).sin_cos();
                let rx: Mat3 = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
                // d/ds'' of R_z(kappa z') s' is R_z plus the phase gradient
                // term kappa * (dR_z/dphi s') (x) e_z
                let gx = kappa * (-sp * x - cp * y1);
                let gy = kappa * (cp * x - sp * y1);
                let jk: Mat3 = [
                    [cp, -sp, gx],
                    [sp, cp, gy],
                    [0.0, 0.0, 1.0],
                ];
                mat3_mul(&jk, &rx)
            }
            StepOp::Linear { m, .. } => [
                [m[0][0], m[0][1], 0.0],
                [m[1][0], m[1][1], 0.0],
                [0.0, 0.0, 1.0],
            ],
            StepOp::Shift => {
                let shift = match self.system {
                    System::Shift(sh) => sh,
                    _ => unreachable!(),
                };
                let i = shift.strip_of(s.0[0]);
                let j = shift.perm[i];
                let scale = shift.widths[j] / shift.widths[i];
                [[scale, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
            }
        }
    }
}

/// Steppers resolved for every step of a protocol. Building this once per
/// experiment keeps the per-sample cost of driven evolution at a single
/// matrix application.
pub struct PreparedProtocol<'a> {
    steppers: Vec<Stepper<'a>>,
}

impl<'a> PreparedProtocol<'a> {
    pub fn new(system: &'a System, protocol: &ControlProtocol) -> Self {
        let horizon = protocol.horizon();
        let mut steppers = Vec::with_capacity(horizon);
        let mut last: Option<(f64, Stepper<'a>)> = None;
        for t in 0..horizon {
            let lambda = protocol.value_at(t);
            let stepper = match &last {
                Some((l, st)) if *l == lambda => *st,
                _ => system.stepper(lambda),
            };
            last = Some((lambda, stepper));
            steppers.push(stepper);
        }
        PreparedProtocol { steppers }
    }

    pub fn horizon(&self) -> usize {
        self.steppers.len()
    }

    pub fn stepper(&self, t: usize) -> &Stepper<'a> {
        &self.steppers[t]
    }
}

/// Evolves one initial condition through the full protocol, returning the
/// trajectory s_0..s_T.
pub fn evolve(
    system: &System,
    s0: PhaseState,
    protocol: &ControlProtocol,
) -> Result<Vec<PhaseState>> {
    if !system.in_domain(s0) {
        return Err(Error::LeftDomain {
            step: 0,
            detail: format!("initial state {:?} outside domain", s0.0),
        });
    }
    let prepared = PreparedProtocol::new(system, protocol);
    let mut out = Vec::with_capacity(prepared.horizon() + 1);
    out.push(s0);
    let mut s = s0;
    for t in 0..prepared.horizon() {
        s = prepared.stepper(t).apply(s);
        if !system.in_domain(s) {
            return Err(Error::LeftDomain {
                step: t + 1,
                detail: format!("state {:?} outside domain", s.0),
            });
        }
        out.push(s);
    }
    Ok(out)
}

/// Jacobians of the step map along a trajectory (one map per step).
pub fn tangent_evolve(
    system: &System,
    s0: PhaseState,
    protocol: &ControlProtocol,
    steps: usize,
) -> Result<Vec<Mat3>> {
    let prepared = PreparedProtocol::new(system, protocol);
    let mut maps = Vec::with_capacity(steps);
    let mut s = s0;
    for t in 0..steps {
        let stepper = prepared.stepper(t.min(prepared.horizon().saturating_sub(1)));
        maps.push(stepper.tangent(s));
        s = stepper.apply(s);
        if !system.in_domain(s) {
            return Err(Error::LeftDomain {
                step: t + 1,
                detail: format!("state {:?} outside domain", s.0),
            });
        }
    }
    Ok(maps)
}

/// Determinant of a tangent map restricted to the plane orthogonal to
/// `before`/`after` (sphere) or the (q, theta) block (planar systems).
pub fn tangent_det(system: &System, m: &Mat3, before: PhaseState, after: PhaseState) -> f64 {
    match system {
        System::Top(_) => {
            let s = before.0;
            let pick = if s[0].abs() < 0.9 {
                [1.0, 0.0, 0.0]
            } else {
                [0.0, 1.0, 0.0]
            };
            let u1 = cross(s, pick);
            let u1 = normalize(u1);
            let u2 = normalize(cross(s, u1));
            let w1 = mat3_apply(m, u1);
            let w2 = mat3_apply(m, u2);
            dot(after.0, cross(w1, w2))
        }
        _ => m[0][0] * m[1][1] - m[0][1] * m[1][0],
    }
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = dot(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Purpose};
    use rand::Rng;
    use std::f64::consts::PI;

    fn random_sphere_state(rng: &mut impl Rng) -> PhaseState {
        let z: f64 = rng.gen_range(-1.0..1.0);
        let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let r = (1.0 - z * z).sqrt();
        PhaseState([r * phi.cos(), r * phi.sin(), z])
    }

    #[test]
    fn disk_rotation_negates_components() {
        let sys = System::disk();
        let s = sys.step(PhaseState::planar(0.5, 0.0), 0.0);
        assert!((s.q() + 0.5).abs() < 1e-15);
        assert!(s.theta().abs() < 1e-15);
    }

    #[test]
    fn kicked_top_x_axis_is_fixed_point() {
        let sys = System::kicked_top(PI / 2.0, 5.0);
        let s = sys.step(PhaseState::sphere(1.0, 0.0, 0.0), 0.0);
        assert!((s.0[0] - 1.0).abs() < 1e-12);
        assert!(s.0[1].abs() < 1e-12);
        assert!(s.0[2].abs() < 1e-12);
    }

    #[test]
    fn invertibility_on_random_states() {
        let mut rng = substream(11, Purpose::Ensemble, 0);
        for (name, sys) in [
            ("top", System::kicked_top(PI / 2.0, 5.0)),
            ("disk", System::disk()),
            ("osc", System::oscillator()),
        ] {
            for _ in 0..10_000 {
                let s = match &sys {
                    System::Top(_) => random_sphere_state(&mut rng),
                    System::Disk(_) => {
                        let u: f64 = rng.gen();
                        let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                        PhaseState::planar(u.sqrt() * phi.cos(), u.sqrt() * phi.sin())
                    }
                    _ => PhaseState::planar(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)),
                };
                let lambda = 1.7;
                let back = sys.inverse_step(sys.step(s, lambda), lambda);
                for i in 0..3 {
                    assert!(
                        (back.0[i] - s.0[i]).abs() < 1e-10,
                        "{name}: roundtrip failed: {:?} vs {:?}",
                        back.0,
                        s.0
                    );
                }
            }
        }
    }

    #[test]
    fn tangent_determinants_are_one() {
        let mut rng = substream(12, Purpose::Ensemble, 0);
        let top = System::kicked_top(PI / 2.0, 5.0);
        for _ in 0..1000 {
            let s = random_sphere_state(&mut rng);
            let m = top.tangent(s, 0.0);
            let det = tangent_det(&top, &m, s, top.step(s, 0.0));
            assert!((det - 1.0).abs() < 1e-8, "det = {det}");
        }
        let osc = System::oscillator();
        let m = osc.tangent(PhaseState::planar(0.3, -0.2), 2.5);
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        assert!((det - 1.0).abs() < 1e-8);
    }

    #[test]
    fn oscillator_energy_after_100_steps() {
        // exact harmonic solution keeps H = 0.5 for s0 = (1, 0), lambda = 1
        let sys = System::oscillator();
        let protocol = ControlProtocol::constant(1.0, 100);
        let traj = evolve(&sys, PhaseState::planar(1.0, 0.0), &protocol).unwrap();
        let h = sys.hamiltonian(traj[100], 1.0);
        assert!((h - 0.5).abs() < 1e-6, "H = {h}");
    }

    #[test]
    fn oscillator_tangent_trace_matches_exact_flow() {
        // exact one-step flow matrix at lambda = 1 has trace 2 cos(1)
        let sys = System::oscillator();
        let m = sys.tangent(PhaseState::planar(0.2, 0.1), 1.0);
        let trace = m[0][0] + m[1][1];
        assert!((trace - 2.0 * 1.0f64.cos()).abs() < 1e-6, "trace = {trace}");
    }

    #[test]
    fn energy_conserved_per_step_for_exact_maps() {
        let mut rng = substream(13, Purpose::Ensemble, 0);
        let top = System::kicked_top(PI / 2.0, 5.0);
        let disk = System::disk();
        for _ in 0..1000 {
            let s = random_sphere_state(&mut rng);
            let dh = (top.hamiltonian(top.step(s, 0.0), 0.0) - top.hamiltonian(s, 0.0)).abs();
            assert!(dh < 1e-8);
            let u: f64 = rng.gen();
            let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let sd = PhaseState::planar(u.sqrt() * phi.cos(), u.sqrt() * phi.sin());
            let dh = (disk.hamiltonian(disk.step(sd, 0.0), 0.0) - disk.hamiltonian(sd, 0.0)).abs();
            assert!(dh < 1e-8);
        }
    }

    #[test]
    fn oscillator_energy_drift_over_1000_steps() {
        let sys = System::oscillator();
        let protocol = ControlProtocol::constant(1.0, 1000);
        let traj = evolve(&sys, PhaseState::planar(0.7, 0.3), &protocol).unwrap();
        let h0 = sys.hamiltonian(traj[0], 1.0);
        let hmax = traj
            .iter()
            .map(|&s| (sys.hamiltonian(s, 1.0) - h0).abs())
            .fold(0.0, f64::max);
        assert!(hmax < 1e-6, "drift = {hmax}");
    }

    #[test]
    fn kicked_top_norm_drift_below_1e12_over_1e6_steps() {
        let mut sys = KickedTop::new(PI / 2.0, 5.0);
        sys.renormalize = false;
        let sys = System::Top(sys);
        let mut s = PhaseState::sphere(0.6, 0.64, 0.48); // unit by construction
        let stepper = sys.stepper(0.0);
        for _ in 0..1_000_000 {
            s = stepper.apply(s);
        }
        assert!((s.norm() - 1.0).abs() < 1e-12, "norm drift {}", s.norm() - 1.0);
    }

    #[test]
    fn protocol_reversal_and_stepwise_values() {
        let p = ControlProtocol::from_points(&[(0, 1.0), (3, 4.0)], 5).unwrap();
        assert_eq!(p.value_at(0), 1.0);
        assert_eq!(p.value_at(2), 1.0);
        assert_eq!(p.value_at(3), 4.0);
        assert_eq!(p.value_at(5), 4.0);
        let r = p.reversed();
        assert_eq!(r.value_at(0), 4.0);
        assert_eq!(r.value_at(2), 4.0);
        assert_eq!(r.value_at(3), 1.0);
    }

    #[test]
    fn disk_tangent_is_pi_rotation() {
        let sys = System::disk();
        let protocol = ControlProtocol::constant(0.0, 4);
        let maps = tangent_evolve(&sys, PhaseState::planar(0.2, 0.3), &protocol, 4).unwrap();
        for m in maps {
            assert_eq!(m[0][0], -1.0);
            assert_eq!(m[1][1], -1.0);
            assert_eq!(m[0][1], 0.0);
        }
    }
}
