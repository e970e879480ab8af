//! Exact reference implementation on finite discrete systems.
//!
//! A [`DiscreteSystem`] is a permutation of N cells with assigned volumes
//! and initial probabilities: the desk-scale version of the triplet
//! (phase space, measure, automorphism). Every entropy-pipeline formula has
//! a closed form here, evaluated by enumerating the N orbits, so the
//! coarse-graining inequality
//!
//!   e_t - S[rho_t] - c_t - d_t >= 0
//!
//! can be checked to float precision with zero sampling error. Volumes are
//! drawn constant along permutation orbits: the map must preserve the
//! volume measure for Liouville-based identities (time-reversed volumes,
//! S[rho_t] constancy) to apply, exactly as for the Hamiltonian systems.
//!
//! [`DiscreteSystem::as_interval_system`] reinterprets the permutation as a
//! strip rearrangement of the unit square so the same object can be pushed
//! through the continuous Monte Carlo pipeline and compared against the
//! exact values.

use rand::Rng;
use serde::Serialize;
use std::collections::BTreeMap;

use crate::dynsys::{IntervalShift, System};
use crate::error::{Error, Result};
use crate::partition::{Cell, ChartRect, Partition};
use crate::rng::{substream, Purpose};

pub const MAX_CELLS: usize = 16;
pub const MAX_DEPTH: usize = 8;

/// Permutation dynamics on N weighted cells.
#[derive(Debug, Clone, Serialize)]
pub struct DiscreteSystem {
    pub perm: Vec<usize>,
    pub volumes: Vec<f64>,
    pub p0: Vec<f64>,
}

impl DiscreteSystem {
    pub fn new(perm: Vec<usize>, volumes: Vec<f64>, p0: Vec<f64>) -> Result<Self> {
        let n = perm.len();
        if n == 0 || n > MAX_CELLS {
            return Err(Error::config(format!("cell count must be 1..={MAX_CELLS}")));
        }
        if volumes.len() != n || p0.len() != n {
            return Err(Error::config("perm, volumes, p0 must have equal length"));
        }
        let mut seen = vec![false; n];
        for &p in &perm {
            if p >= n || seen[p] {
                return Err(Error::config("perm is not a bijection"));
            }
            seen[p] = true;
        }
        if volumes.iter().any(|&v| v <= 0.0) {
            return Err(Error::config("volumes must be positive"));
        }
        if (volumes.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("volumes must sum to 1"));
        }
        if p0.iter().any(|&p| p < 0.0) || (p0.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("p0 must be a probability vector"));
        }
        Ok(DiscreteSystem { perm, volumes, p0 })
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// Volume preservation: v must be constant along orbits.
    pub fn is_volume_preserving(&self) -> bool {
        self.perm
            .iter()
            .enumerate()
            .all(|(i, &j)| (self.volumes[i] - self.volumes[j]).abs() < 1e-12)
    }

    /// p0 invariant under the permutation (stationary symbolic process).
    pub fn is_stationary(&self) -> bool {
        self.perm
            .iter()
            .enumerate()
            .all(|(i, &j)| (self.p0[i] - self.p0[j]).abs() < 1e-12)
    }

    /// Random instance with orbit-constant volumes and free p0.
    pub fn random(n: usize, rng: &mut impl Rng) -> Self {
        assert!(n >= 1 && n <= MAX_CELLS);
        // random permutation by Fisher-Yates
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        // volumes drawn per orbit, shared across the orbit
        let mut volumes = vec![0.0; n];
        let mut visited = vec![false; n];
        let mut orbit_weights = Vec::new();
        let mut orbits: Vec<Vec<usize>> = Vec::new();
        for start in 0..n {
            if visited[start] {
                continue;
            }
            let mut orbit = Vec::new();
            let mut i = start;
            while !visited[i] {
                visited[i] = true;
                orbit.push(i);
                i = perm[i];
            }
            orbit_weights.push(rng.gen_range(0.2..1.0) * orbit.len() as f64);
            orbits.push(orbit);
        }
        let total: f64 = orbit_weights.iter().sum();
        for (orbit, w) in orbits.iter().zip(&orbit_weights) {
            let v = w / total / orbit.len() as f64;
            for &i in orbit {
                volumes[i] = v;
            }
        }
        let mut p0: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
        let tp: f64 = p0.iter().sum();
        p0.iter_mut().for_each(|p| *p /= tp);
        DiscreteSystem::new(perm, volumes, p0).expect("random instance is valid")
    }

    /// Stationary variant: p0 also constant along orbits.
    pub fn random_stationary(n: usize, rng: &mut impl Rng) -> Self {
        let mut sys = Self::random(n, rng);
        let n = sys.len();
        let mut visited = vec![false; n];
        let mut p0 = vec![0.0; n];
        let mut total = 0.0;
        for start in 0..n {
            if visited[start] {
                continue;
            }
            let mut orbit = Vec::new();
            let mut i = start;
            while !visited[i] {
                visited[i] = true;
                orbit.push(i);
                i = sys.perm[i];
            }
            let w: f64 = rng.gen_range(0.05..1.0);
            for &i in &orbit {
                p0[i] = w;
                total += w;
            }
        }
        p0.iter_mut().for_each(|p| *p /= total);
        sys.p0 = p0;
        sys
    }

    /// Continuous realization: vertical strips of the unit square with the
    /// cell volumes as widths, permuted horizontally.
    pub fn as_interval_system(&self) -> Result<System> {
        Ok(System::Shift(IntervalShift::new(
            self.volumes.clone(),
            self.perm.clone(),
        )?))
    }

    /// Partition of the strip system whose cells are the groups.
    pub fn strip_partition(&self, grouping: &[usize]) -> Result<Partition> {
        let groups = validate_grouping(self.len(), grouping)?;
        let mut starts = Vec::with_capacity(self.len());
        let mut acc = 0.0;
        for &w in &self.volumes {
            starts.push(acc);
            acc += w;
        }
        let mut cells = Vec::with_capacity(groups);
        for g in 0..groups {
            let rects: Vec<ChartRect> = (0..self.len())
                .filter(|&i| grouping[i] == g)
                .map(|i| ChartRect {
                    lo: [starts[i], 0.0],
                    hi: [starts[i] + self.volumes[i], 1.0],
                })
                .collect();
            let volume: f64 = rects.iter().map(ChartRect::area).sum();
            cells.push(Cell {
                id: g as u16,
                rects,
                volume,
                unbounded: false,
            });
        }
        Ok(Partition::from_cells(
            format!("strips{}g{}", self.len(), groups),
            crate::dynsys::Chart::Square,
            cells,
        ))
    }
}

fn validate_grouping(n: usize, grouping: &[usize]) -> Result<usize> {
    if grouping.len() != n {
        return Err(Error::config("grouping length must match cell count"));
    }
    let groups = grouping.iter().max().map_or(0, |&g| g + 1);
    for g in 0..groups {
        if !grouping.contains(&g) {
            return Err(Error::config("grouping indices must be contiguous from 0"));
        }
    }
    Ok(groups)
}

/// Exact joint distribution of symbol paths (g_0, ..., g_depth). For a
/// permutation there are at most N distinct paths, one per starting cell.
pub fn exact_path_distribution(
    sys: &DiscreteSystem,
    grouping: &[usize],
    depth: usize,
) -> Result<Vec<(Vec<u16>, f64)>> {
    if depth > MAX_DEPTH {
        return Err(Error::config(format!("oracle depth capped at {MAX_DEPTH}")));
    }
    validate_grouping(sys.len(), grouping)?;
    let mut dist: BTreeMap<Vec<u16>, f64> = BTreeMap::new();
    for start in 0..sys.len() {
        if sys.p0[start] == 0.0 {
            continue;
        }
        let mut path = Vec::with_capacity(depth + 1);
        let mut i = start;
        for _ in 0..=depth {
            path.push(grouping[i] as u16);
            i = sys.perm[i];
        }
        *dist.entry(path).or_insert(0.0) += sys.p0[start];
    }
    Ok(dist.into_iter().collect())
}

/// All exact per-depth terms of the coarse-graining inequality.
#[derive(Debug, Clone, Serialize)]
pub struct ExactTerms {
    pub depth: usize,
    /// H_t for t = 1..=depth+1 symbols
    pub block_entropy: Vec<f64>,
    /// e_t = E_hist S[p(g_t | hist)] for t = 1..=depth
    pub conditional_entropy: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
    /// discrete differential entropy S[rho_t] = -sum p_t ln(p_t / v)
    pub s_rho: Vec<f64>,
    /// e_t - d_t: differential entropy of the coarse-grained density
    pub coarse_differential: Vec<f64>,
    /// e_t - s_rho_t - c_t - d_t, nonnegative by the pointwise lemma
    pub slack: Vec<f64>,
}

pub fn exact_terms(sys: &DiscreteSystem, grouping: &[usize], depth: usize) -> Result<ExactTerms> {
    if depth > MAX_DEPTH {
        return Err(Error::config(format!("oracle depth capped at {MAX_DEPTH}")));
    }
    let groups = validate_grouping(sys.len(), grouping)?;
    let n = sys.len();

    // orbit tables: cell_at[t][i] = sigma^t(i)
    let mut cell_at = vec![(0..n).collect::<Vec<usize>>()];
    for t in 1..=depth + 1 {
        let prev = &cell_at[t - 1];
        cell_at.push((0..n).map(|i| sys.perm[prev[i]]).collect());
    }
    // group volumes
    let group_vol: Vec<f64> = (0..groups)
        .map(|g| {
            (0..n)
                .filter(|&i| grouping[i] == g)
                .map(|i| sys.volumes[i])
                .sum()
        })
        .collect();

    let z = |x: f64| if x > 0.0 { -x * x.ln() } else { 0.0 };

    let mut block_entropy = Vec::with_capacity(depth + 1);
    let mut conditional_entropy = Vec::with_capacity(depth);
    let mut c_terms = Vec::with_capacity(depth);
    let mut d_terms = Vec::with_capacity(depth);
    let mut s_rho = Vec::with_capacity(depth);
    let mut coarse_differential = Vec::with_capacity(depth);
    let mut slack = Vec::with_capacity(depth);

    let path_of = |start: usize, len: usize| -> Vec<u16> {
        (0..len).map(|k| grouping[cell_at[k][start]] as u16).collect()
    };

    for syms in 1..=depth + 1 {
        let mut dist: BTreeMap<Vec<u16>, f64> = BTreeMap::new();
        for start in 0..n {
            if sys.p0[start] > 0.0 {
                *dist.entry(path_of(start, syms)).or_insert(0.0) += sys.p0[start];
            }
        }
        block_entropy.push(dist.values().map(|&p| z(p)).sum());
    }

    for t in 1..=depth {
        conditional_entropy.push(block_entropy[t] - block_entropy[t - 1]);

        // c_t: sum over observed paths of p(g_t | hist) * v(region)/v(G_t)
        let mut joint: BTreeMap<Vec<u16>, f64> = BTreeMap::new();
        let mut hist: BTreeMap<Vec<u16>, f64> = BTreeMap::new();
        for start in 0..n {
            if sys.p0[start] > 0.0 {
                *joint.entry(path_of(start, t + 1)).or_insert(0.0) += sys.p0[start];
                *hist.entry(path_of(start, t)).or_insert(0.0) += sys.p0[start];
            }
        }
        let mut overlap_sum = 0.0;
        for (path, &p_path) in &joint {
            let p_hist = hist[&path[..t].to_vec()];
            let p_cond = p_path / p_hist;
            // region at time t: images of the start cells whose symbol
            // sequence matches the path
            let mut region_vol = 0.0;
            for i in 0..n {
                if (0..=t).all(|k| grouping[cell_at[k][i]] as u16 == path[k]) {
                    region_vol += sys.volumes[cell_at[t][i]];
                }
            }
            let vtil = region_vol / group_vol[path[t] as usize];
            overlap_sum += p_cond * vtil;
        }
        c_terms.push(1.0 - overlap_sum);

        // d_t and S[rho_t] from the pushforward
        let mut p_group = vec![0.0; groups];
        let mut s = 0.0;
        for i in 0..n {
            let j = cell_at[t][i];
            p_group[grouping[j] as usize] += sys.p0[i];
            if sys.p0[i] > 0.0 {
                s -= sys.p0[i] * (sys.p0[i] / sys.volumes[j]).ln();
            }
        }
        let d: f64 = (0..groups)
            .filter(|&g| p_group[g] > 0.0)
            .map(|g| -p_group[g] * group_vol[g].ln())
            .sum();
        d_terms.push(d);
        s_rho.push(s);

        let e = conditional_entropy[t - 1];
        coarse_differential.push(e - d);
        slack.push(e - s - c_terms[t - 1] - d);
    }

    Ok(ExactTerms {
        depth,
        block_entropy,
        conditional_entropy,
        c: c_terms,
        d: d_terms,
        s_rho,
        coarse_differential,
        slack,
    })
}

/// The appendix's pointwise lemma x (ln x - ln y) >= x - y on random
/// positive pairs; returns the worst margin.
pub fn pointwise_lemma_margin(pairs: usize, seed: u64) -> f64 {
    let mut rng = substream(seed, Purpose::Oracle, 0);
    let mut worst = f64::INFINITY;
    for _ in 0..pairs {
        let x: f64 = rng.gen_range(1e-6..10.0f64);
        let y: f64 = rng.gen_range(1e-6..10.0f64);
        let margin = x * (x.ln() - y.ln()) - (x - y);
        worst = worst.min(margin);
    }
    worst
}

/// Summary of the random-instance property sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub instances: usize,
    pub depths: usize,
    pub min_slack: f64,
    pub lemma_margin: f64,
    pub violations: usize,
}

/// Checks the exact inequality over random discrete systems with random
/// groupings, plus the pointwise lemma.
pub fn property_sweep(
    instances: usize,
    max_cells: usize,
    max_depth: usize,
    seed: u64,
) -> Result<SweepSummary> {
    let max_cells = max_cells.min(MAX_CELLS);
    let max_depth = max_depth.min(MAX_DEPTH);
    let mut min_slack = f64::INFINITY;
    let mut violations = 0usize;
    for k in 0..instances {
        let mut rng = substream(seed, Purpose::Oracle, 1 + k as u64);
        let n = rng.gen_range(2..=max_cells);
        let sys = DiscreteSystem::random(n, &mut rng);
        let groups = rng.gen_range(1..=n);
        let grouping: Vec<usize> = (0..n)
            .map(|i| if i < groups { i } else { rng.gen_range(0..groups) })
            .collect();
        let terms = exact_terms(&sys, &grouping, max_depth)?;
        for &s in &terms.slack {
            min_slack = min_slack.min(s);
            if s < -1e-12 {
                violations += 1;
            }
        }
    }
    let lemma_margin = pointwise_lemma_margin(100_000, seed ^ 0x9e37);
    Ok(SweepSummary {
        instances,
        depths: max_depth,
        min_slack,
        lemma_margin,
        violations: violations + usize::from(lemma_margin < -1e-12),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn n2_swap() -> DiscreteSystem {
        DiscreteSystem::new(vec![1, 0], vec![0.5, 0.5], vec![0.5, 0.5]).unwrap()
    }

    #[test]
    fn swap_path_distribution_is_two_alternations() {
        let sys = n2_swap();
        let paths = exact_path_distribution(&sys, &[0, 1], 3).unwrap();
        assert_eq!(paths.len(), 2);
        assert_eq!(paths[0].0, vec![0, 1, 0, 1]);
        assert_eq!(paths[1].0, vec![1, 0, 1, 0]);
        assert!((paths[0].1 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identity_permutation_keeps_masses() {
        let sys =
            DiscreteSystem::new(vec![0, 1, 2], vec![0.2, 0.3, 0.5], vec![0.1, 0.2, 0.7]).unwrap();
        let paths = exact_path_distribution(&sys, &[0, 1, 2], 4).unwrap();
        assert_eq!(paths.len(), 3);
        for (path, p) in &paths {
            assert!(path.windows(2).all(|w| w[0] == w[1]));
            let i = path[0] as usize;
            assert!((p - sys.p0[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn cyclic_shift_keeps_masses() {
        let sys = DiscreteSystem::new(
            vec![1, 2, 3, 0],
            vec![0.25; 4],
            vec![0.4, 0.3, 0.2, 0.1],
        )
        .unwrap();
        let paths = exact_path_distribution(&sys, &[0, 1, 2, 3], 5).unwrap();
        assert_eq!(paths.len(), 4);
        let masses: Vec<f64> = paths.iter().map(|(_, p)| *p).collect();
        let mut sorted = masses.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert_eq!(sorted, vec![0.4, 0.3, 0.2, 0.1]);
    }

    #[test]
    fn swap_exact_terms_mirror_the_half_disk_values() {
        let sys = n2_swap();
        let terms = exact_terms(&sys, &[0, 1], 5).unwrap();
        for t in 0..5 {
            assert!((terms.block_entropy[t] - LN_2).abs() < 1e-15);
            assert!(terms.conditional_entropy[t].abs() < 1e-15);
            assert!((terms.c[t] + 1.0).abs() < 1e-15, "c = {}", terms.c[t]);
            assert!((terms.d[t] - LN_2).abs() < 1e-15);
            assert!(terms.s_rho[t].abs() < 1e-15);
            assert!(terms.slack[t] >= 0.0);
            assert!((terms.slack[t] - (1.0 - LN_2)).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_with_trivial_merge_has_all_terms_zero() {
        // p0 = volumes makes rho_0 uniform, so every term vanishes
        let sys =
            DiscreteSystem::new(vec![0, 1, 2], vec![0.2, 0.3, 0.5], vec![0.2, 0.3, 0.5]).unwrap();
        let terms = exact_terms(&sys, &[0, 0, 0], 4).unwrap();
        for t in 0..4 {
            assert!(terms.block_entropy[t].abs() < 1e-15);
            assert!(terms.conditional_entropy[t].abs() < 1e-15);
            assert!(terms.c[t].abs() < 1e-15);
            assert!(terms.d[t].abs() < 1e-15);
            assert!(terms.s_rho[t].abs() < 1e-15);
            assert!(terms.slack[t].abs() < 1e-15);
        }
    }

    #[test]
    fn random_sweep_inequality_holds_exactly() {
        let summary = property_sweep(1000, 8, 5, 424242).unwrap();
        assert_eq!(summary.violations, 0);
        assert!(summary.min_slack >= -1e-12, "min slack {}", summary.min_slack);
        assert!(summary.lemma_margin >= -1e-12);
    }

    #[test]
    fn stationary_systems_have_nonincreasing_increments() {
        for seed in 0..50 {
            let mut rng = substream(777, Purpose::Oracle, seed);
            let sys = DiscreteSystem::random_stationary(6, &mut rng);
            assert!(sys.is_stationary());
            let grouping = [0usize, 0, 1, 1, 2, 2];
            let terms = exact_terms(&sys, &grouping, 6).unwrap();
            for w in terms.conditional_entropy.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "increments rose: {w:?}");
            }
        }
    }

    #[test]
    fn random_volumes_are_orbit_constant() {
        let mut rng = substream(3, Purpose::Oracle, 0);
        for _ in 0..20 {
            let sys = DiscreteSystem::random(9.min(MAX_CELLS), &mut rng);
            assert!(sys.is_volume_preserving());
        }
    }

    #[test]
    fn pointwise_lemma_margin_is_nonnegative() {
        assert!(pointwise_lemma_margin(100_000, 5) >= -1e-12);
    }
}
