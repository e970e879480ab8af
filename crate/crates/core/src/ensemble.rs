//! Canonical-ensemble sampling, partition functions, free energies, and
//! pushforward cell probabilities.
//!
//! Initial states follow rho_0 = e^{-beta H(s; lambda_0)} / Z(lambda_0).
//! beta = 0 is admitted on bounded phase spaces as the uniform state, with
//! S[rho_0] = 0 under the v(Gamma) = 1 normalization. Z is evaluated by
//! midpoint quadrature on the chart grid with resolution doubled until the
//! relative change drops below 1e-6.
//!
//! Everything is deterministic for a fixed seed: samples draw from
//! per-index RNG substreams and reductions run in index order, so results
//! do not depend on the number of worker threads.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynsys::{ControlProtocol, PhaseState, PreparedProtocol, System};
use crate::error::{Error, Result};
use crate::partition::Cell;
use crate::rng::{substream, Purpose};

/// Canonical initial-state specification.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CanonicalSpec {
    pub beta: f64,
    pub lambda0: f64,
    pub samples: usize,
    pub seed: u64,
}

/// An i.i.d. sample of initial conditions (uniform weights).
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub states: Vec<PhaseState>,
    pub spec: CanonicalSpec,
}

/// Smallest energy value on the domain, used as the rejection envelope.
fn min_energy(system: &System) -> f64 {
    match system {
        System::Disk(_) => 0.0,
        System::Top(_) => 1.0,
        System::Oscillator(_) => 0.0,
        System::Shift(_) => 0.0,
    }
}

/// Draws i.i.d. canonical samples. Bounded charts use rejection against the
/// uniform proposal; the oscillator samples its exact Gaussian marginals.
pub fn sample_canonical(system: &System, spec: &CanonicalSpec) -> Result<Ensemble> {
    if spec.beta < 0.0 {
        return Err(Error::config("beta must be >= 0"));
    }
    if spec.samples == 0 {
        return Err(Error::config("sample count must be positive"));
    }
    if spec.beta == 0.0 && !system.chart().is_bounded() {
        return Err(Error::config(
            "beta = 0 requires a bounded phase space (uniform state undefined on the plane)",
        ));
    }

    let h_min = min_energy(system);
    let max_tries_per_sample = 1_000_000u64;

    let results: Vec<(PhaseState, u64)> = (0..spec.samples)
        .into_par_iter()
        .map(|i| -> Result<(PhaseState, u64)> {
            let mut rng = substream(spec.seed, Purpose::Ensemble, i as u64);
            match system {
                System::Oscillator(_) => {
                    let sq = Normal::new(0.0, 1.0 / (spec.beta * spec.lambda0).sqrt())
                        .map_err(|e| Error::config(format!("bad oscillator spec: {e}")))?;
                    let st = Normal::new(0.0, 1.0 / spec.beta.sqrt())
                        .map_err(|e| Error::config(format!("bad oscillator spec: {e}")))?;
                    Ok((
                        PhaseState::planar(sq.sample(&mut rng), st.sample(&mut rng)),
                        1,
                    ))
                }
                _ => {
                    let domain = system.chart().domain().expect("bounded chart");
                    let mut tries = 0u64;
                    loop {
                        tries += 1;
                        if tries > max_tries_per_sample {
                            return Err(Error::config(format!(
                                "rejection acceptance rate below 1e-4 at beta = {}",
                                spec.beta
                            )));
                        }
                        let p = [
                            rng.gen_range(domain[0][0]..domain[0][1]),
                            rng.gen_range(domain[1][0]..domain[1][1]),
                        ];
                        let s = system.from_chart(p);
                        if spec.beta == 0.0 {
                            return Ok((s, tries));
                        }
                        let h = system.hamiltonian(s, spec.lambda0);
                        let accept = (-spec.beta * (h - h_min)).exp();
                        if rng.gen::<f64>() < accept {
                            return Ok((s, tries));
                        }
                    }
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let total_tries: u64 = results.iter().map(|(_, t)| t).sum();
    let acceptance = spec.samples as f64 / total_tries as f64;
    if acceptance < 1e-4 {
        return Err(Error::config(format!(
            "rejection acceptance rate {acceptance:.2e} below 1e-4"
        )));
    }
    Ok(Ensemble {
        states: results.into_iter().map(|(s, _)| s).collect(),
        spec: *spec,
    })
}

/// Quadrature result with a resolution-halving error estimate.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Quadrature {
    pub value: f64,
    pub error: f64,
    pub resolution: usize,
}

fn quadrature_box(system: &System, beta: f64, lambda: f64) -> ([[f64; 2]; 2], f64) {
    match system.chart().domain() {
        Some(d) => (d, system.chart().density()),
        None => {
            // truncate the Gaussian domain at 8 sigma in each coordinate
            let sq = 1.0 / (beta * lambda).sqrt();
            let st = 1.0 / beta.sqrt();
            ([[-8.0 * sq, 8.0 * sq], [-8.0 * st, 8.0 * st]], 1.0)
        }
    }
}

fn midpoint_integral(
    system: &System,
    beta: f64,
    lambda: f64,
    f: impl Fn(f64) -> f64 + Sync,
) -> Result<Quadrature> {
    let (dom, density) = quadrature_box(system, beta, lambda);
    let mut prev: Option<f64> = None;
    let mut n = 64usize;
    loop {
        let dx = (dom[0][1] - dom[0][0]) / n as f64;
        let dy = (dom[1][1] - dom[1][0]) / n as f64;
        let total: f64 = (0..n)
            .into_par_iter()
            .map(|i| {
                let x = dom[0][0] + (i as f64 + 0.5) * dx;
                let mut row = 0.0;
                for j in 0..n {
                    let y = dom[1][0] + (j as f64 + 0.5) * dy;
                    let s = system.from_chart([x, y]);
                    let h = system.hamiltonian(s, lambda);
                    row += f(h);
                }
                row
            })
            .sum::<f64>()
            * dx
            * dy
            * density;
        if let Some(p) = prev {
            let err = (total - p).abs();
            if err <= 1e-6 * total.abs().max(1e-300) || n >= 2048 {
                return Ok(Quadrature {
                    value: total,
                    error: err,
                    resolution: n,
                });
            }
        }
        prev = Some(total);
        n *= 2;
    }
}

/// Z(lambda) = integral of e^{-beta H} over the (normalized) volume measure.
pub fn partition_function(system: &System, beta: f64, lambda: f64) -> Result<Quadrature> {
    if beta < 0.0 {
        return Err(Error::config("beta must be >= 0"));
    }
    if beta == 0.0 && !system.chart().is_bounded() {
        return Err(Error::config("Z diverges at beta = 0 on the plane"));
    }
    midpoint_integral(system, beta, lambda, |h| (-beta * h).exp())
}

/// Canonical mean energy by the same quadrature.
pub fn mean_energy_canonical(system: &System, beta: f64, lambda: f64) -> Result<Quadrature> {
    let z = partition_function(system, beta, lambda)?;
    let num = midpoint_integral(system, beta, lambda, |h| h * (-beta * h).exp())?;
    Ok(Quadrature {
        value: num.value / z.value,
        error: (num.error + num.value.abs() * z.error / z.value.abs()) / z.value.abs(),
        resolution: num.resolution,
    })
}

/// F = -ln(Z) / beta. Undefined at beta = 0; callers use the entropy
/// directly there.
pub fn free_energy(beta: f64, z: f64) -> Result<f64> {
    if beta <= 0.0 {
        return Err(Error::config("free energy undefined at beta = 0"));
    }
    Ok(-z.ln() / beta)
}

/// Shannon differential entropy of the canonical state,
/// S[rho_0] = beta (<H> - F). Exactly 0 for the uniform beta = 0 state on a
/// volume-1 domain. This value is also S[rho_t] for all t by Liouville.
pub fn equilibrium_entropy(system: &System, beta: f64, lambda: f64) -> Result<f64> {
    if beta == 0.0 {
        if system.chart().is_bounded() {
            return Ok(0.0);
        }
        return Err(Error::config("beta = 0 entropy undefined on the plane"));
    }
    let z = partition_function(system, beta, lambda)?;
    let f = free_energy(beta, z.value)?;
    let h = mean_energy_canonical(system, beta, lambda)?;
    Ok(beta * (h.value - f))
}

/// Order-independent mean: chunk sums are computed in parallel but combined
/// in index order, so the result is bit-identical for any thread count.
pub fn deterministic_mean(values: &[f64]) -> f64 {
    const CHUNK: usize = 4096;
    let partials: Vec<f64> = values
        .par_chunks(CHUNK)
        .map(|c| c.iter().sum::<f64>())
        .collect();
    partials.iter().sum::<f64>() / values.len() as f64
}

/// Mean Hamiltonian of a state population at fixed lambda.
pub fn mean_hamiltonian(system: &System, states: &[PhaseState], lambda: f64) -> f64 {
    const CHUNK: usize = 4096;
    let partials: Vec<f64> = states
        .par_chunks(CHUNK)
        .map(|c| c.iter().map(|&s| system.hamiltonian(s, lambda)).sum::<f64>())
        .collect();
    partials.iter().sum::<f64>() / states.len() as f64
}

/// Advances every state through protocol steps `[from, to)` in place.
pub fn advance_states(
    system: &System,
    protocol: &ControlProtocol,
    states: &mut [PhaseState],
    from: usize,
    to: usize,
) -> Result<()> {
    let prepared = PreparedProtocol::new(system, protocol);
    let bad = states
        .par_iter_mut()
        .enumerate()
        .filter_map(|(idx, s)| {
            for t in from..to {
                *s = prepared.stepper(t).apply(*s);
                if !system.in_domain(*s) {
                    return Some((idx, t + 1));
                }
            }
            None
        })
        .min_by_key(|&(idx, _)| idx);
    if let Some((idx, step)) = bad {
        return Err(Error::LeftDomain {
            step,
            detail: format!("sample {idx} left the domain"),
        });
    }
    Ok(())
}

/// Writes the ensemble as a CSV state table: sample id followed by the
/// phase coordinates in the system's natural naming.
pub fn write_states_csv(
    path: &std::path::Path,
    system: &System,
    ensemble: &Ensemble,
) -> crate::error::Result<()> {
    use std::fmt::Write as _;
    let mut out = String::new();
    let planar = !matches!(system, System::Top(_));
    out.push_str(if planar { "id,q,theta\n" } else { "id,x,y,z\n" });
    for (i, s) in ensemble.states.iter().enumerate() {
        if planar {
            let _ = writeln!(out, "{i},{},{}", s.q(), s.theta());
        } else {
            let _ = writeln!(out, "{i},{},{},{}", s.0[0], s.0[1], s.0[2]);
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Fraction of evolved samples inside a cell, with binomial standard error.
/// This estimates p[phi^{-t}(cell)] when the states were evolved to time t.
pub fn pushforward_cell_probability(
    system: &System,
    states_at_t: &[PhaseState],
    cell: &Cell,
) -> (f64, f64) {
    const CHUNK: usize = 4096;
    let hits: usize = states_at_t
        .par_chunks(CHUNK)
        .map(|c| {
            c.iter()
                .filter(|&&s| cell.contains(system.to_chart(s)))
                .count()
        })
        .sum();
    let m = states_at_t.len() as f64;
    let p = hits as f64 / m;
    (p, (p * (1.0 - p) / m).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynsys::{tangent_evolve, Chart, Mat3};
    use crate::partition::Partition;
    use std::f64::consts::{PI, TAU};

    fn spec(beta: f64, samples: usize) -> CanonicalSpec {
        CanonicalSpec {
            beta,
            lambda0: 1.0,
            samples,
            seed: 2024,
        }
    }

    #[test]
    fn uniform_disk_radial_moment() {
        // uniform on the disk: <q^2 + theta^2> = <u> = 1/2
        let sys = System::disk();
        let ens = sample_canonical(&sys, &spec(0.0, 100_000)).unwrap();
        let mean = deterministic_mean(
            &ens.states
                .iter()
                .map(|s| sys.hamiltonian(*s, 0.0))
                .collect::<Vec<_>>(),
        );
        // Var(u) = 1/12 for u ~ U(0,1)
        let sigma = (1.0f64 / 12.0 / 100_000.0).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn oscillator_momentum_variance_is_gaussian() {
        let sys = System::oscillator();
        let ens = sample_canonical(&sys, &spec(1.0, 100_000)).unwrap();
        let var = deterministic_mean(
            &ens.states
                .iter()
                .map(|s| s.theta() * s.theta())
                .collect::<Vec<_>>(),
        );
        // Var(theta^2) = 2 sigma^4 = 2
        let sigma = (2.0f64 / 100_000.0).sqrt();
        assert!((var - 1.0).abs() < 3.0 * sigma, "var {var}");
    }

    #[test]
    fn uniform_sphere_mean_z_vanishes() {
        let sys = System::kicked_top(PI / 2.0, 5.0);
        let ens = sample_canonical(&sys, &spec(0.0, 100_000)).unwrap();
        let mean = deterministic_mean(&ens.states.iter().map(|s| s.0[2]).collect::<Vec<_>>());
        let sigma = (1.0f64 / 3.0 / 100_000.0).sqrt();
        assert!(mean.abs() < 3.0 * sigma, "mean z = {mean}");
    }

    #[test]
    fn oscillator_partition_function_matches_gaussian_integral() {
        let sys = System::oscillator();
        for (beta, lambda) in [(1.0, 1.0), (1.0, 4.0), (2.0, 0.5)] {
            let z = partition_function(&sys, beta, lambda).unwrap();
            let exact = TAU / (beta * lambda.sqrt());
            assert!(
                (z.value - exact).abs() / exact < 1e-6,
                "Z = {} vs {exact}",
                z.value
            );
        }
    }

    #[test]
    fn partition_function_is_one_at_beta_zero() {
        let z = partition_function(&System::disk(), 0.0, 0.0).unwrap();
        assert!((z.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disk_partition_function_quadrature_vs_monte_carlo() {
        let sys = System::disk();
        let beta = 1.0;
        let z = partition_function(&sys, beta, 0.0).unwrap();
        // MC oracle: mean of e^{-beta u} over uniform samples
        let ens = sample_canonical(&sys, &spec(0.0, 200_000)).unwrap();
        let vals: Vec<f64> = ens
            .states
            .iter()
            .map(|s| (-beta * sys.hamiltonian(*s, 0.0)).exp())
            .collect();
        let mc = deterministic_mean(&vals);
        let var = deterministic_mean(&vals.iter().map(|v| (v - mc) * (v - mc)).collect::<Vec<_>>());
        let se = (var / vals.len() as f64).sqrt();
        assert!((z.value - mc).abs() < 3.0 * se, "quad {} mc {mc}", z.value);
    }

    #[test]
    fn free_energy_oracle_values() {
        let sys = System::oscillator();
        let z1 = partition_function(&sys, 1.0, 1.0).unwrap();
        let f1 = free_energy(1.0, z1.value).unwrap();
        assert!((f1 + TAU.ln()).abs() < 1e-6, "F = {f1}");
        let z4 = partition_function(&sys, 1.0, 4.0).unwrap();
        let f4 = free_energy(1.0, z4.value).unwrap();
        // Delta F = ln(lambda_f / lambda_0) / (2 beta)
        assert!((f4 - f1 - 0.5 * 4.0f64.ln()).abs() < 1e-6);
        assert!(free_energy(0.0, 1.0).is_err());
    }

    #[test]
    fn legendre_identity_for_canonical_state() {
        // <H> - S/beta = F within quadrature error
        let sys = System::oscillator();
        let (beta, lambda) = (1.0, 1.0);
        let z = partition_function(&sys, beta, lambda).unwrap();
        let f = free_energy(beta, z.value).unwrap();
        let h = mean_energy_canonical(&sys, beta, lambda).unwrap();
        let s = equilibrium_entropy(&sys, beta, lambda).unwrap();
        assert!((h.value - s / beta - f).abs() < 1e-4);
    }

    #[test]
    fn sampled_energy_distribution_passes_ks_test() {
        // canonical oscillator energies are Exponential(beta)
        let sys = System::oscillator();
        let beta = 1.0;
        let ens = sample_canonical(&sys, &spec(beta, 50_000)).unwrap();
        let mut h: Vec<f64> = ens
            .states
            .iter()
            .map(|s| sys.hamiltonian(*s, 1.0))
            .collect();
        h.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = h.len() as f64;
        let mut d: f64 = 0.0;
        for (i, &x) in h.iter().enumerate() {
            let cdf = 1.0 - (-beta * x).exp();
            let lo = i as f64 / n;
            let hi = (i + 1) as f64 / n;
            d = d.max((cdf - lo).abs()).max((cdf - hi).abs());
        }
        // 1% critical value of the Kolmogorov distribution
        assert!(d < 1.628 / n.sqrt(), "KS statistic {d}");
    }

    #[test]
    fn pushforward_probabilities() {
        let sys = System::disk();
        let ens = sample_canonical(&sys, &spec(0.0, 100_000)).unwrap();
        let trivial = Partition::trivial(Chart::Disk).unwrap();
        let (p, _) = pushforward_cell_probability(&sys, &ens.states, &trivial.cells[0]);
        assert_eq!(p, 1.0);

        let halves = Partition::halves(Chart::Disk, "q").unwrap();
        let mut states = ens.states.clone();
        advance_states(&sys, &ControlProtocol::constant(0.0, 3), &mut states, 0, 3).unwrap();
        let (p, se) = pushforward_cell_probability(&sys, &states, &halves.cells[0]);
        assert!((p - 0.5).abs() < 3.0 * se, "p = {p}");
    }

    #[test]
    fn liouville_keeps_differential_entropy_constant() {
        // Propagate the exact Gaussian covariance with the tangent maps; the
        // differential entropy depends only on det(Sigma), which must stay
        // fixed because every tangent determinant is 1.
        let sys = System::oscillator();
        let protocol = ControlProtocol::from_points(&[(0, 1.0), (5, 4.0)], 50).unwrap();
        let maps: Vec<Mat3> =
            tangent_evolve(&sys, PhaseState::planar(0.1, 0.2), &protocol, 50).unwrap();
        let beta = 1.0;
        let mut cov = [[1.0 / (beta * 1.0), 0.0], [0.0, 1.0 / beta]];
        let det0: f64 = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
        for m in maps {
            let a = [[m[0][0], m[0][1]], [m[1][0], m[1][1]]];
            let mut next = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    let mut acc = 0.0;
                    for k in 0..2 {
                        for l in 0..2 {
                            acc += a[i][k] * cov[k][l] * a[j][l];
                        }
                    }
                    next[i][j] = acc;
                }
            }
            cov = next;
            let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
            // S_t - S_0 = 0.5 ln(det_t / det_0)
            assert!((0.5 * (det / det0).ln()).abs() < 1e-8);
        }
    }

    #[test]
    fn identical_seeds_give_identical_ensembles() {
        let sys = System::kicked_top(PI / 2.0, 5.0);
        let a = sample_canonical(&sys, &spec(0.0, 20_000)).unwrap();
        let b = sample_canonical(&sys, &spec(0.0, 20_000)).unwrap();
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn state_table_round_trips_through_csv() {
        let sys = System::oscillator();
        let ens = sample_canonical(&sys, &spec(1.0, 50)).unwrap();
        let path = std::env::temp_dir().join(format!("sinai-states-{}.csv", std::process::id()));
        write_states_csv(&path, &sys, &ens).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("id,q,theta"));
        for (i, line) in lines.enumerate() {
            let mut cols = line.split(',');
            assert_eq!(cols.next().unwrap().parse::<usize>().unwrap(), i);
            let q: f64 = cols.next().unwrap().parse().unwrap();
            let th: f64 = cols.next().unwrap().parse().unwrap();
            assert_eq!(q, ens.states[i].q());
            assert_eq!(th, ens.states[i].theta());
        }
        let _ = std::fs::remove_file(path);
    }
}
