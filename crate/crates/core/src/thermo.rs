//! Work accounting, fluctuation-relation checks, relative-entropy
//! dissipation estimates, and assembly of the dissipation lower bound.
//!
//! Per trajectory W = H(s_T; lambda_T) - H(s_0; lambda_0); the dissipated
//! work is <W_d> = <W> - Delta F. For an initially canonical, isolated
//! system Liouville's theorem gives the per-time identity
//!
//!   beta <W_d>_t = beta(<H>_t - F(lambda_t)) - S[rho_0],
//!
//! and coarse-graining bounds it from below per time step by
//!
//!   beta <W_d>_t >= beta(<H>_t - F(lambda_t)) - [e_t - c_t - d_t],
//!
//! with e_t the conditional symbol entropy of the partition. Cesaro
//! averages of both sides over the reliable window give the reported bound;
//! the slack reduces algebraically to e_t - c_t - d_t - S[rho_0], which is
//! the coarse-graining inequality itself.

use rand::Rng;
use serde::Serialize;

use crate::dynsys::{ControlProtocol, PhaseState, PreparedProtocol, System};
use crate::ensemble::{
    advance_states, deterministic_mean, equilibrium_entropy, free_energy, mean_hamiltonian,
    partition_function, Ensemble,
};
use crate::entropy::{block_entropy_curve, c_term, d_term, CTerm, PathStats, TermEstimate};
use crate::error::{Error, Result};
use crate::partition::{BackwardPools, Partition};
use crate::rng::{substream, Purpose};

/// Per-ensemble work statistics.
#[derive(Debug, Clone, Serialize)]
pub struct WorkRecord {
    pub beta: f64,
    pub w_mean: f64,
    pub w_std_err: f64,
    pub delta_f: f64,
    pub wd_mean: f64,
    pub wd_std_err: f64,
    #[serde(skip)]
    pub works: Vec<f64>,
}

/// Evolves the ensemble through the whole protocol and collects work values.
pub fn work_ensemble(
    system: &System,
    protocol: &ControlProtocol,
    ensemble: &Ensemble,
) -> Result<WorkRecord> {
    let beta = ensemble.spec.beta;
    let lambda0 = protocol.value_at(0);
    let horizon = protocol.horizon();
    let lambda_t = protocol.value_at(horizon);

    let delta_f = if protocol.is_constant() {
        0.0
    } else if beta > 0.0 {
        let z0 = partition_function(system, beta, lambda0)?;
        let zt = partition_function(system, beta, lambda_t)?;
        free_energy(beta, zt.value)? - free_energy(beta, z0.value)?
    } else {
        return Err(Error::config(
            "free energy unavailable: beta = 0 with a driven protocol",
        ));
    };

    let mut finals = ensemble.states.clone();
    advance_states(system, protocol, &mut finals, 0, horizon)?;
    let works: Vec<f64> = ensemble
        .states
        .iter()
        .zip(&finals)
        .map(|(&s0, &st)| system.hamiltonian(st, lambda_t) - system.hamiltonian(s0, lambda0))
        .collect();

    let w_mean = deterministic_mean(&works);
    let var = deterministic_mean(
        &works
            .iter()
            .map(|w| (w - w_mean) * (w - w_mean))
            .collect::<Vec<_>>(),
    );
    let w_std_err = (var / works.len() as f64).sqrt();
    Ok(WorkRecord {
        beta,
        w_mean,
        w_std_err,
        delta_f,
        wd_mean: w_mean - delta_f,
        wd_std_err: w_std_err,
        works,
    })
}

/// Jarzynski consistency check |<e^{-beta W}> - e^{-beta Delta F}| with a
/// bootstrap standard error.
#[derive(Debug, Clone, Serialize)]
pub struct JarzynskiCheck {
    pub deviation: f64,
    pub std_err: f64,
    pub mean_exp_work: f64,
    pub target: f64,
    pub pass_3sigma: bool,
}

pub fn jarzynski_check(
    record: &WorkRecord,
    resamples: usize,
    seed: u64,
) -> Result<JarzynskiCheck> {
    if record.beta <= 0.0 {
        return Err(Error::config("Jarzynski check needs beta > 0"));
    }
    let beta = record.beta;
    let exp_works: Vec<f64> = record.works.iter().map(|&w| (-beta * w).exp()).collect();
    let mean = deterministic_mean(&exp_works);
    let target = (-beta * record.delta_f).exp();
    let n = exp_works.len();
    let mut means = Vec::with_capacity(resamples);
    for r in 0..resamples {
        let mut rng = substream(seed, Purpose::Bootstrap, r as u64);
        let mut acc = 0.0;
        for _ in 0..n {
            acc += exp_works[rng.gen_range(0..n)];
        }
        means.push(acc / n as f64);
    }
    let bmean = deterministic_mean(&means);
    let bvar = deterministic_mean(
        &means
            .iter()
            .map(|m| (m - bmean) * (m - bmean))
            .collect::<Vec<_>>(),
    );
    let std_err = bvar.sqrt();
    let deviation = (mean - target).abs();
    Ok(JarzynskiCheck {
        deviation,
        std_err,
        mean_exp_work: mean,
        target,
        // integrator-precision floor keeps exactly-zero-work protocols from
        // failing on a vanishing bootstrap width
        pass_3sigma: deviation <= (3.0 * std_err).max(1e-6),
    })
}

/// Histogram Kullback-Leibler estimate of beta <W_d>.
#[derive(Debug, Clone, Serialize)]
pub struct KlEstimate {
    pub value: f64,
    pub std_err: f64,
    /// forward-occupied cells with no backward mass; their reference count
    /// was clipped to one
    pub clipped_cells: usize,
    pub clipped_mass: f64,
}

/// KL divergence between the forward density and the time-reversed-protocol
/// density, both coarse-grained on `partition`. Backward states are
/// momentum-flipped before binning. By coarse-graining monotonicity the
/// value approaches beta <W_d> from below as the partition refines.
pub fn relative_entropy_dissipation(
    system: &System,
    partition: &Partition,
    forward: &[PhaseState],
    backward: &[PhaseState],
) -> Result<KlEstimate> {
    if forward.is_empty() || backward.is_empty() {
        return Err(Error::config("empty ensemble in relative entropy estimate"));
    }
    let n = partition.len();
    let mut fc = vec![0u64; n];
    let mut bc = vec![0u64; n];
    for &s in forward {
        let id = partition
            .locate(system.to_chart(s))
            .ok_or_else(|| Error::config("forward state not covered by partition"))?;
        fc[id as usize] += 1;
    }
    for &s in backward {
        let flipped = system.time_reverse(s);
        let id = partition
            .locate(system.to_chart(flipped))
            .ok_or_else(|| Error::config("backward state not covered by partition"))?;
        bc[id as usize] += 1;
    }
    let mf = forward.len() as f64;
    let mb = backward.len() as f64;
    let mut kl = 0.0;
    let mut var_f = 0.0;
    let mut var_b = 0.0;
    let mut clipped_cells = 0;
    let mut clipped_mass = 0.0;
    for i in 0..n {
        if fc[i] == 0 {
            continue;
        }
        let p = fc[i] as f64 / mf;
        let q = if bc[i] == 0 {
            clipped_cells += 1;
            clipped_mass += p;
            1.0 / mb
        } else {
            bc[i] as f64 / mb
        };
        let term = (p / q).ln();
        kl += p * term;
        var_f += p * term * term;
        var_b += p * p / q;
    }
    // delta method over both multinomials
    let var = (var_f - kl * kl).max(0.0) / mf + (var_b - 1.0).max(0.0) / mb;
    Ok(KlEstimate {
        value: kl.max(0.0),
        std_err: var.sqrt(),
        clipped_cells,
        clipped_mass,
    })
}

/// One averaged depth of the bound.
#[derive(Debug, Clone, Serialize)]
pub struct BoundRow {
    pub t: usize,
    /// conditional symbol entropy e_t = H_{t+1} - H_t
    pub e: f64,
    pub e_err: f64,
    pub c: f64,
    pub c_err: f64,
    pub c_omitted_bound: f64,
    pub d: f64,
    pub d_err: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundTerms {
    /// symbolic entropy rate actually used on the right-hand side (Cesaro
    /// mean of e_t over the window)
    pub h: f64,
    pub c_bar: f64,
    pub d_bar: f64,
    #[serde(rename = "entropy_S0")]
    pub entropy_s0: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundErrors {
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub h: f64,
    pub c_bar: f64,
    pub d_bar: f64,
}

/// All terms of the dissipation bound for one (system, protocol, partition)
/// experiment, Cesaro-averaged over the reliable depth window.
#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub i_bar: f64,
    pub terms: BoundTerms,
    pub errors: BoundErrors,
    pub partition_id: String,
    /// averaging horizon T: depths 1..=T entered the Cesaro means
    pub horizon: usize,
    pub config_hash: String,
    pub per_t: Vec<BoundRow>,
    /// family or Pesin Kolmogorov-Sinai estimate, carried for reference
    /// next to the window rate in `terms.h`
    pub h_reference: Option<f64>,
}

pub struct BoundInputs<'a> {
    pub system: &'a System,
    pub protocol: &'a ControlProtocol,
    pub partition: &'a Partition,
    pub ensemble: &'a Ensemble,
    pub stats: &'a PathStats,
    pub pools: &'a BackwardPools,
    /// depths 1..=horizon to average; must be reliable for the table sizes
    pub horizon: usize,
    pub config_hash: String,
    pub h_reference: Option<f64>,
}

pub fn bound_report(inputs: &BoundInputs<'_>) -> Result<BoundReport> {
    let BoundInputs {
        system,
        protocol,
        partition,
        ensemble,
        stats,
        pools,
        horizon,
        ..
    } = inputs;
    let beta = ensemble.spec.beta;
    let lambda0 = protocol.value_at(0);
    let horizon = (*horizon).min(stats.depth).max(1);
    let driven = !protocol.is_constant();
    if driven && beta == 0.0 {
        return Err(Error::config("bound undefined: beta = 0 with driving"));
    }
    let s0_entropy = equilibrium_entropy(system, beta, lambda0)?;

    // per-step mean energies and free energies (driven runs only; undriven
    // equilibrium uses the identity beta(<H> - F) = S[rho_0] exactly)
    let mut work_side = vec![0.0; horizon + 1];
    if driven {
        let mut states = ensemble.states.clone();
        let prepared = PreparedProtocol::new(system, protocol);
        let mut f_cache: Vec<(f64, f64)> = Vec::new();
        for t in 0..=horizon {
            if t > 0 {
                let stepper = prepared.stepper(t - 1);
                states.iter_mut().for_each(|s| *s = stepper.apply(*s));
            }
            let lambda_t = protocol.value_at(t);
            let f_t = match f_cache.iter().find(|(l, _)| *l == lambda_t) {
                Some((_, f)) => *f,
                None => {
                    let z = partition_function(system, beta, lambda_t)?;
                    let f = free_energy(beta, z.value)?;
                    f_cache.push((lambda_t, f));
                    f
                }
            };
            let h_t = mean_hamiltonian(system, &states, lambda_t);
            work_side[t] = beta * (h_t - f_t);
        }
    } else {
        for w in work_side.iter_mut() {
            *w = s0_entropy;
        }
    }

    let curve = block_entropy_curve(stats, true);
    let mut rows = Vec::with_capacity(horizon);
    for t in 1..=horizon {
        let e = curve.h[t] - curve.h[t - 1];
        let e_err = entropy_se(stats, t) + entropy_se(stats, t - 1);
        let c: CTerm = c_term(stats, pools, t)?;
        let d: TermEstimate = d_term(stats, partition, t)?;
        let lhs = work_side[t] - s0_entropy;
        let rhs = work_side[t] - (e - c.value - d.value);
        rows.push(BoundRow {
            t,
            e,
            e_err,
            c: c.value,
            c_err: c.std_err,
            c_omitted_bound: c.omitted_mass_bound,
            d: d.value,
            d_err: d.std_err,
            lhs,
            rhs,
            slack: lhs - rhs,
        });
    }

    let nt = rows.len() as f64;
    let mean = |f: &dyn Fn(&BoundRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / nt;
    let rms = |f: &dyn Fn(&BoundRow) -> f64| {
        (rows.iter().map(|r| f(r).powi(2)).sum::<f64>()).sqrt() / nt
    };
    let h_bar = mean(&|r| r.e);
    let c_bar = mean(&|r| r.c);
    let d_bar = mean(&|r| r.d);
    let lhs = mean(&|r| r.lhs);
    let rhs = mean(&|r| r.rhs);
    let h_err = rms(&|r| r.e_err);
    let c_err = rms(&|r| r.c_err);
    let d_err = rms(&|r| r.d_err);
    let slack_err = (h_err.powi(2) + c_err.powi(2) + d_err.powi(2)).sqrt();

    Ok(BoundReport {
        lhs,
        rhs,
        slack: lhs - rhs,
        i_bar: h_bar - c_bar - d_bar,
        terms: BoundTerms {
            h: h_bar,
            c_bar,
            d_bar,
            entropy_s0: s0_entropy,
            beta,
        },
        errors: BoundErrors {
            lhs: 0.0,
            rhs: slack_err,
            slack: slack_err,
            h: h_err,
            c_bar: c_err,
            d_bar: d_err,
        },
        partition_id: partition.id.clone(),
        horizon,
        config_hash: inputs.config_hash.clone(),
        per_t: rows,
        h_reference: inputs.h_reference,
    })
}

/// Delta-method standard error of a plug-in block entropy.
fn entropy_se(stats: &PathStats, t: usize) -> f64 {
    let m = stats.trajectories as f64;
    let mut h = 0.0;
    let mut second = 0.0;
    for &c in stats.table(t).values() {
        let p = c as f64 / m;
        let l = p.ln();
        h -= p * l;
        second += p * l * l;
    }
    ((second - h * h).max(0.0) / m).sqrt()
}

/// Ensemble-level second law: <W_d> must not be below -3 standard errors.
pub fn second_law_ok(record: &WorkRecord) -> bool {
    record.wd_mean >= -3.0 * record.wd_std_err.max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynsys::Chart;
    use crate::ensemble::{sample_canonical, CanonicalSpec};
    use std::f64::consts::LN_2;

    fn osc_ensemble(beta: f64, lambda0: f64, m: usize, seed: u64) -> (System, Ensemble) {
        let sys = System::oscillator();
        let ens = sample_canonical(
            &sys,
            &CanonicalSpec {
                beta,
                lambda0,
                samples: m,
                seed,
            },
        )
        .unwrap();
        (sys, ens)
    }

    #[test]
    fn constant_protocol_dissipates_nothing() {
        let (sys, ens) = osc_ensemble(1.0, 1.0, 20_000, 5);
        let protocol = ControlProtocol::constant(1.0, 50);
        let record = work_ensemble(&sys, &protocol, &ens).unwrap();
        for &w in record.works.iter().take(100) {
            assert!(w.abs() < 1e-6, "work {w} for constant protocol");
        }
        assert!(record.wd_mean.abs() <= 3.0 * record.wd_std_err.max(1e-9));
        assert!(second_law_ok(&record));
    }

    #[test]
    fn quench_work_matches_gaussian_oracle() {
        // instantaneous quench lambda 1 -> 4 at beta = 1:
        // W = (lambda_f - lambda_0) q^2 / 2 with <q^2> = 1, so <W> = 3/2,
        // Delta F = ln(4)/2 = ln 2, beta <W_d> = 3/2 - ln 2
        let (sys, ens) = osc_ensemble(1.0, 1.0, 100_000, 6);
        let protocol = quench_protocol(1.0, 4.0, 1);
        let record = work_ensemble(&sys, &protocol, &ens).unwrap();
        assert!((record.delta_f - LN_2).abs() < 1e-6, "dF = {}", record.delta_f);
        assert!(
            (record.w_mean - 1.5).abs() < 3.0 * record.w_std_err,
            "<W> = {} +- {}",
            record.w_mean,
            record.w_std_err
        );
        let wd_exact = 1.5 - LN_2;
        assert!(
            (record.wd_mean - wd_exact).abs() < 3.0 * record.wd_std_err,
            "<W_d> = {}",
            record.wd_mean
        );
        assert!(second_law_ok(&record));
    }

    /// Quench encoding: one step at lambda_0 (a canonical-invariant
    /// rotation, so the work statistics are exactly those of the
    /// instantaneous jump), then lambda_f for the rest of the run.
    pub fn quench_protocol(lambda0: f64, lambda_f: f64, horizon: usize) -> ControlProtocol {
        ControlProtocol::from_points(&[(0, lambda0), (1, lambda_f)], horizon.max(1)).unwrap()
    }

    #[test]
    fn jarzynski_holds_for_quench_and_reverse() {
        let (sys, ens) = osc_ensemble(1.0, 1.0, 100_000, 7);
        let protocol = quench_protocol(1.0, 4.0, 2);
        let record = work_ensemble(&sys, &protocol, &ens).unwrap();
        let check = jarzynski_check(&record, 200, 11).unwrap();
        assert!(
            check.pass_3sigma,
            "deviation {} vs 3 sigma {}",
            check.deviation,
            3.0 * check.std_err
        );
        // target <e^{-W}> = e^{-ln 2} = 1/2
        assert!((check.target - 0.5).abs() < 1e-9);

        let (sys, ens) = osc_ensemble(1.0, 4.0, 100_000, 8);
        let protocol = quench_protocol(4.0, 1.0, 2);
        let record = work_ensemble(&sys, &protocol, &ens).unwrap();
        let check = jarzynski_check(&record, 200, 12).unwrap();
        assert!(
            check.pass_3sigma,
            "reverse deviation {} vs 3 sigma {}",
            check.deviation,
            3.0 * check.std_err
        );
    }

    #[test]
    fn jarzynski_is_exact_for_undriven_disk() {
        let sys = System::disk();
        let ens = sample_canonical(
            &sys,
            &CanonicalSpec {
                beta: 1.0,
                lambda0: 0.0,
                samples: 10_000,
                seed: 9,
            },
        )
        .unwrap();
        let record = work_ensemble(&sys, &ControlProtocol::constant(0.0, 8), &ens).unwrap();
        let check = jarzynski_check(&record, 100, 13).unwrap();
        assert_eq!(check.deviation, 0.0);
    }

    #[test]
    fn relative_entropy_vanishes_without_driving() {
        let (sys, fwd) = osc_ensemble(1.0, 1.0, 50_000, 14);
        let (_, bwd) = osc_ensemble(1.0, 1.0, 50_000, 15);
        let mut fstates = fwd.states.clone();
        advance_states(&sys, &ControlProtocol::constant(1.0, 10), &mut fstates, 0, 10).unwrap();
        let part = Partition::plane_grid(5.0, 6, 6).unwrap();
        let kl = relative_entropy_dissipation(&sys, &part, &fstates, &bwd.states).unwrap();
        // histogram KL of two finite samples of the same density has a
        // positive plug-in bias of roughly (K-1)(1/M_f + 1/M_b)/2
        let bias = (part.len() as f64) * (1.0 / 50_000.0);
        assert!(
            kl.value <= 3.0 * kl.std_err + 2.0 * bias,
            "kl = {} se = {}",
            kl.value,
            kl.std_err
        );
    }

    #[test]
    fn relative_entropy_is_monotone_and_below_direct_estimate() {
        // reversed quench 4 -> 1: the reference equilibrium is wider than
        // the evolved density, so no clipping occurs on a moderate grid
        let beta = 1.0;
        let (sys, ens) = osc_ensemble(beta, 4.0, 100_000, 16);
        let protocol = quench_protocol(4.0, 1.0, 1);
        let record = work_ensemble(&sys, &protocol, &ens).unwrap();
        let direct = beta * record.wd_mean;

        let mut fstates = ens.states.clone();
        advance_states(&sys, &protocol, &mut fstates, 0, 1).unwrap();
        // backward process starts equilibrated at the final stiffness; at
        // the comparison time (forward end) it has evolved zero steps
        let bwd = sample_canonical(
            &sys,
            &CanonicalSpec {
                beta,
                lambda0: 1.0,
                samples: 100_000,
                seed: 17,
            },
        )
        .unwrap();

        let mut last = 0.0;
        for bins in [2usize, 4, 8, 16] {
            let part = Partition::plane_grid(5.0, bins, bins).unwrap();
            let kl = relative_entropy_dissipation(&sys, &part, &fstates, &bwd.states).unwrap();
            assert!(
                kl.value + 1e-12 >= last,
                "refinement decreased KL: {last} -> {}",
                kl.value
            );
            assert!(
                kl.value <= direct + 3.0 * (kl.std_err + beta * record.wd_std_err),
                "kl {} direct {direct}",
                kl.value
            );
            last = kl.value;
        }
        // fine grid comes close to the full value from below
        assert!(last > 0.6 * direct, "kl {last} vs direct {direct}");
    }

    #[test]
    fn bound_is_tight_for_disk_trivial_and_halves() {
        let sys = System::disk();
        let ens = sample_canonical(
            &sys,
            &CanonicalSpec {
                beta: 0.0,
                lambda0: 0.0,
                samples: 20_000,
                seed: 18,
            },
        )
        .unwrap();
        let protocol = ControlProtocol::constant(0.0, 8);

        for (part, expect_slack, expect_i) in [
            (Partition::trivial(Chart::Disk).unwrap(), 0.0, 0.0),
            (
                Partition::halves(Chart::Disk, "q").unwrap(),
                1.0 - LN_2,
                1.0 - LN_2,
            ),
        ] {
            let stats = PathStats::collect(&sys, &protocol, &part, &ens, 8).unwrap();
            let pools = BackwardPools::build(&sys, &protocol, &part, 8, 8, 10_000, 19).unwrap();
            let report = bound_report(&BoundInputs {
                system: &sys,
                protocol: &protocol,
                partition: &part,
                ensemble: &ens,
                stats: &stats,
                pools: &pools,
                horizon: 8,
                config_hash: String::new(),
                h_reference: None,
            })
            .unwrap();
            assert!(
                (report.slack - expect_slack).abs() < 1e-9,
                "slack {} vs {expect_slack}",
                report.slack
            );
            assert!((report.i_bar - expect_i).abs() < 1e-9);
            assert_eq!(report.lhs, 0.0);
        }
    }
}
