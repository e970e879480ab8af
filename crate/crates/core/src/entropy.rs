//! Path statistics, block and conditional entropies, Kolmogorov-Sinai
//! entropy estimation, and the coarse-graining terms c_t and d_t.
//!
//! Notation: blocks are symbol tuples (a_0, ..., a_t); H_t is the Shannon
//! entropy of the length-t block distribution; e_t = H_{t+1} - H_t is the
//! expected conditional entropy E_hist S[p(a_t | a_0..a_{t-1})];
//!
//!   c_t = 1 - sum over paths of p(a_t | hist) v~(hist | a_t)
//!   d_t = - sum over cells of p[phi^{-t}(a)] ln v(a)
//!
//! The entropy rate of a partition is estimated from the block-entropy
//! increments on the reliable window (at least 20 samples per distinct
//! block), accelerated with one Aitken delta-squared step because the
//! increments of chaotic maps approach the rate geometrically from above.
//! The Kolmogorov-Sinai estimate is the supremum of the per-partition rates
//! over the configured grid family.

use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;

use crate::dynsys::{ControlProtocol, PreparedProtocol, System};
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::partition::{symbol_of, BackwardPools, Partition};

/// Minimum samples per distinct block for an entropy value to enter the
/// rate estimate.
pub const SAMPLES_PER_BLOCK: f64 = 20.0;

/// Empirical block-count tables for depths 0..=depth.
#[derive(Debug, Clone)]
pub struct PathStats {
    pub depth: usize,
    pub trajectories: u64,
    pub n_cells: usize,
    /// tables[t] maps blocks of t+1 symbols to counts
    tables: Vec<BTreeMap<Box<[u16]>, u64>>,
}

impl PathStats {
    /// Symbolizes every ensemble member over `depth` steps and tabulates
    /// block counts at every depth. Tables are merged by key, so the result
    /// is independent of the parallel schedule.
    pub fn collect(
        system: &System,
        protocol: &ControlProtocol,
        partition: &Partition,
        ensemble: &Ensemble,
        depth: usize,
    ) -> Result<Self> {
        let m = ensemble.states.len();
        let width = depth + 1;
        let prepared = PreparedProtocol::new(system, protocol);
        if depth > protocol.horizon() {
            return Err(Error::config(format!(
                "path depth {depth} exceeds the protocol horizon {}",
                protocol.horizon()
            )));
        }
        let symbols: Vec<u16> = ensemble
            .states
            .par_chunks(2048)
            .map(|chunk| -> Result<Vec<u16>> {
                let mut out = vec![0u16; chunk.len() * width];
                for (i, &s0) in chunk.iter().enumerate() {
                    let mut s = s0;
                    out[i * width] = symbol_of(system, partition, s)?;
                    for t in 0..depth {
                        s = prepared.stepper(t).apply(s);
                        out[i * width + t + 1] = symbol_of(system, partition, s)?;
                    }
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?
            .concat();
        Ok(Self::from_symbol_matrix(&symbols, m, depth, partition.len()))
    }

    /// Builds tables from a row-major `m x (depth+1)` symbol matrix.
    pub fn from_symbol_matrix(symbols: &[u16], m: usize, depth: usize, n_cells: usize) -> Self {
        let width = depth + 1;
        assert_eq!(symbols.len(), m * width);
        let tables: Vec<BTreeMap<Box<[u16]>, u64>> = (0..width)
            .into_par_iter()
            .map(|t| {
                let mut map: BTreeMap<Box<[u16]>, u64> = BTreeMap::new();
                for i in 0..m {
                    let block = &symbols[i * width..i * width + t + 1];
                    if let Some(v) = map.get_mut(block) {
                        *v += 1;
                    } else {
                        map.insert(block.to_vec().into_boxed_slice(), 1);
                    }
                }
                map
            })
            .collect();
        PathStats {
            depth,
            trajectories: m as u64,
            n_cells,
            tables,
        }
    }

    /// Count table for blocks of `t + 1` symbols.
    pub fn table(&self, t: usize) -> &BTreeMap<Box<[u16]>, u64> {
        &self.tables[t]
    }

    pub fn distinct(&self, t: usize) -> usize {
        self.tables[t].len()
    }

    /// Marginal occupation of the last symbol of depth-t blocks, i.e. the
    /// empirical p[phi^{-t}(a)].
    pub fn marginal_last(&self, t: usize) -> Vec<f64> {
        let mut counts = vec![0u64; self.n_cells];
        for (block, &c) in &self.tables[t] {
            counts[block[t] as usize] += c;
        }
        counts
            .into_iter()
            .map(|c| c as f64 / self.trajectories as f64)
            .collect()
    }

    /// Depth-t tables must marginalize exactly onto depth-(t-1) tables.
    pub fn validate_marginal_consistency(&self) -> Result<()> {
        for t in 1..=self.depth {
            let mut prefix_counts: BTreeMap<&[u16], u64> = BTreeMap::new();
            for (block, &c) in &self.tables[t] {
                *prefix_counts.entry(&block[..t]).or_insert(0) += c;
            }
            for (block, &c) in &self.tables[t - 1] {
                let got = prefix_counts.get(block.as_ref()).copied().unwrap_or(0);
                if got != c {
                    return Err(Error::invariant(format!(
                        "depth-{t} table marginalizes to {got} for block {block:?}, expected {c}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Sum of conditionals out of every observed history must be 1.
    pub fn validate_conditional_normalization(&self) -> Result<()> {
        for t in 1..=self.depth {
            let mut current_prefix: Option<&[u16]> = None;
            let mut acc = 0u64;
            let mut prefix_total = 0u64;
            // blocks are sorted, so equal prefixes are adjacent
            for (block, &c) in &self.tables[t] {
                let prefix = &block[..t];
                if current_prefix != Some(prefix) {
                    if let Some(p) = current_prefix {
                        if acc != prefix_total {
                            return Err(Error::invariant(format!(
                                "conditionals from history {p:?} sum to {acc}/{prefix_total}"
                            )));
                        }
                    }
                    current_prefix = Some(prefix);
                    acc = 0;
                    prefix_total = self.tables[t - 1].get(prefix).copied().unwrap_or(0);
                }
                acc += c;
            }
            if let Some(p) = current_prefix {
                if acc != prefix_total {
                    return Err(Error::invariant(format!(
                        "conditionals from history {p:?} sum to {acc}/{prefix_total}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Shannon entropy of a finite probability vector, S = sum z(p),
/// z(x) = -x ln x with z(0) = 0.
pub fn partition_entropy(probs: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    let mut s = 0.0;
    for &p in probs {
        if p < 0.0 {
            return Err(Error::numerical(format!("negative probability {p}")));
        }
        total += p;
        if p > 0.0 {
            s -= p * p.ln();
        }
    }
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::numerical(format!(
            "probabilities sum to {total}, expected 1"
        )));
    }
    Ok(s)
}

/// Block entropy curve H_t for t = 1..=depth+1 symbols.
#[derive(Debug, Clone, Serialize)]
pub struct BlockEntropyCurve {
    /// plug-in entropies
    pub h_plugin: Vec<f64>,
    /// Miller-Madow corrected entropies (equal to plug-in when disabled)
    pub h: Vec<f64>,
    pub distinct: Vec<usize>,
    /// undersampling flag: distinct blocks > sqrt(M)
    pub flagged: Vec<bool>,
    pub miller_madow: bool,
    pub trajectories: u64,
}

impl BlockEntropyCurve {
    /// Increments g_t = H_{t+1} - H_t (corrected entropies).
    pub fn increments(&self) -> Vec<f64> {
        self.h.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Number of leading depths with at least `SAMPLES_PER_BLOCK` samples
    /// per distinct block.
    pub fn reliable_depths(&self) -> usize {
        let cap = self.trajectories as f64 / SAMPLES_PER_BLOCK;
        self.distinct.iter().take_while(|&&k| k as f64 <= cap).count()
    }
}

/// Plug-in (optionally Miller-Madow corrected) block entropies.
pub fn block_entropy_curve(stats: &PathStats, miller_madow: bool) -> BlockEntropyCurve {
    let m = stats.trajectories as f64;
    let flag_cap = m.sqrt();
    let mut h_plugin = Vec::with_capacity(stats.depth + 1);
    let mut h = Vec::with_capacity(stats.depth + 1);
    let mut distinct = Vec::with_capacity(stats.depth + 1);
    let mut flagged = Vec::with_capacity(stats.depth + 1);
    for t in 0..=stats.depth {
        let table = stats.table(t);
        let mut s = 0.0;
        for &c in table.values() {
            let c = c as f64;
            s += c * c.ln();
        }
        let plugin = m.ln() - s / m;
        let k = table.len();
        let corrected = if miller_madow {
            plugin + (k as f64 - 1.0) / (2.0 * m)
        } else {
            plugin
        };
        h_plugin.push(plugin);
        h.push(corrected);
        distinct.push(k);
        flagged.push(k as f64 > flag_cap);
    }
    BlockEntropyCurve {
        h_plugin,
        h,
        distinct,
        flagged,
        miller_madow,
        trajectories: stats.trajectories,
    }
}

/// How a per-partition entropy rate was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum RateMethod {
    /// Aitken delta-squared extrapolation of the last three increments.
    Aitken,
    /// Mean of the last two increments (flat or non-geometric tail).
    TailMean,
    /// Single usable increment; too shallow to qualify for the supremum.
    LastIncrement,
}

/// Entropy-rate estimate for one partition.
#[derive(Debug, Clone, Serialize)]
pub struct PartitionRate {
    pub partition_id: String,
    pub n_cells: usize,
    pub reliable_depths: usize,
    pub reliable_increments: usize,
    pub rate: Option<f64>,
    pub method: Option<RateMethod>,
    /// Eq.-style quotient H_t / t at the deepest reliable depth.
    pub quotient: Option<f64>,
    /// has enough converged depth to enter the family supremum
    pub qualifies: bool,
}

/// Kolmogorov-Sinai entropy estimate over a partition family.
#[derive(Debug, Clone, Serialize)]
pub struct KseEstimate {
    pub h: f64,
    pub maximizing_partition: String,
    pub per_partition: Vec<PartitionRate>,
    /// no partition reached the converged-window requirement; `h` is then
    /// the smallest shallow rate and only an upper indication
    pub shallow_only: bool,
}

fn partition_rate(id: &str, n_cells: usize, curve: &BlockEntropyCurve) -> PartitionRate {
    let reliable = curve.reliable_depths();
    let increments = curve.increments();
    let usable = reliable.saturating_sub(1).min(increments.len());
    let g = &increments[..usable];
    let quotient = if reliable > 0 {
        Some(curve.h[reliable - 1] / reliable as f64)
    } else {
        None
    };
    let (rate, method, qualifies) = if g.len() >= 4 {
        let (g1, g2, g3) = (g[g.len() - 3], g[g.len() - 2], g[g.len() - 1]);
        let d1 = g2 - g1;
        let d2 = g3 - g2;
        let ratio = if d1 != 0.0 { d2 / d1 } else { f64::NAN };
        if d1 < 0.0 && d2 < 0.0 && (0.05..0.95).contains(&ratio) {
            // geometric tail: one Aitken step lands on the limit
            (Some(g3 - d2 * d2 / (d2 - d1)), Some(RateMethod::Aitken), true)
        } else {
            (Some(0.5 * (g2 + g3)), Some(RateMethod::TailMean), true)
        }
    } else if !g.is_empty() {
        (Some(g[g.len() - 1]), Some(RateMethod::LastIncrement), false)
    } else {
        (None, None, false)
    };
    PartitionRate {
        partition_id: id.to_string(),
        n_cells,
        reliable_depths: reliable,
        reliable_increments: g.len(),
        rate,
        method,
        quotient,
        qualifies,
    }
}

/// Supremum of entropy rates over a family of partitions.
pub fn kse_estimate(family: &[(&Partition, BlockEntropyCurve)]) -> Result<KseEstimate> {
    let per_partition: Vec<PartitionRate> = family
        .iter()
        .map(|(p, curve)| partition_rate(&p.id, p.len(), curve))
        .collect();
    let best_qualified = per_partition
        .iter()
        .filter(|r| r.qualifies && r.rate.is_some())
        .max_by(|a, b| a.rate.partial_cmp(&b.rate).unwrap());
    if let Some(best) = best_qualified {
        return Ok(KseEstimate {
            h: best.rate.unwrap().max(0.0),
            maximizing_partition: best.partition_id.clone(),
            per_partition: per_partition.clone(),
            shallow_only: false,
        });
    }
    // fall back to the least-biased shallow rate; refuse when not even that
    let best_shallow = per_partition
        .iter()
        .filter(|r| r.rate.is_some())
        .min_by(|a, b| a.rate.partial_cmp(&b.rate).unwrap());
    match best_shallow {
        Some(best) => Ok(KseEstimate {
            h: best.rate.unwrap().max(0.0),
            maximizing_partition: best.partition_id.clone(),
            per_partition: per_partition.clone(),
            shallow_only: true,
        }),
        None => Err(Error::refused(
            "no partition has two reliably sampled depths; increase samples or coarsen",
        )),
    }
}

/// A scalar estimate with a standard error.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TermEstimate {
    pub value: f64,
    pub std_err: f64,
}

/// c_t estimate plus the bookkeeping required to judge it.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CTerm {
    pub value: f64,
    pub std_err: f64,
    /// Good-Turing upper bound on the conditional mass omitted because the
    /// corresponding blocks were never observed
    pub omitted_mass_bound: f64,
    pub paths: usize,
}

/// c_t = 1 - sum over observed paths of p(a_t | hist) v~(hist | a_t).
///
/// The sum runs over blocks with nonzero empirical probability; unseen
/// blocks contribute z(0) = 0 and their possible mass is bounded by the
/// per-history Good-Turing estimate reported alongside.
pub fn c_term(stats: &PathStats, pools: &BackwardPools, t: usize) -> Result<CTerm> {
    if t == 0 {
        // convention p(a_0|a_0) := p(a_0), v(a_0|a_0) := 1 gives c_0 = 0
        let total: f64 = stats
            .table(0)
            .values()
            .map(|&c| c as f64 / stats.trajectories as f64)
            .sum();
        return Ok(CTerm {
            value: 1.0 - total,
            std_err: 0.0,
            omitted_mass_bound: 0.0,
            paths: stats.distinct(0),
        });
    }
    if t > pools.depth {
        return Err(Error::config(format!(
            "backward pools only reach depth {}, requested {t}",
            pools.depth
        )));
    }
    let mut sum = 0.0;
    let mut var = 0.0;
    let mut paths = 0usize;
    let mut gt_bound = 0.0;
    let mut current_prefix: Option<Vec<u16>> = None;
    let mut singletons_in_prefix = 0u64;
    let mut prefix_count = 0u64;
    for (block, &count) in stats.table(t) {
        let prefix = &block[..t];
        if current_prefix.as_deref() != Some(prefix) {
            if prefix_count > 0 {
                gt_bound += singletons_in_prefix as f64 / prefix_count as f64;
            }
            current_prefix = Some(prefix.to_vec());
            singletons_in_prefix = 0;
            prefix_count = stats.table(t - 1).get(prefix).copied().unwrap_or(0);
        }
        if count == 1 {
            singletons_in_prefix += 1;
        }
        let hist_count = prefix_count as f64;
        let p_cond = count as f64 / hist_count;
        let (v, se_v) = pools.reversed_volume(block);
        sum += p_cond * v;
        let se_p = (p_cond * (1.0 - p_cond) / hist_count).sqrt();
        var += (p_cond * se_v).powi(2) + (v * se_p).powi(2);
        paths += 1;
    }
    if prefix_count > 0 {
        gt_bound += singletons_in_prefix as f64 / prefix_count as f64;
    }
    Ok(CTerm {
        value: 1.0 - sum,
        std_err: var.sqrt(),
        omitted_mass_bound: gt_bound,
        paths,
    })
}

/// d_t = - sum over cells of p[phi^{-t}(a)] ln v(a), evaluated on the same
/// trajectories as the path statistics. The standard error is the sample
/// standard deviation of -ln v(a_t) over trajectories.
pub fn d_term(stats: &PathStats, partition: &Partition, t: usize) -> Result<TermEstimate> {
    let marginal = stats.marginal_last(t);
    let mut d = 0.0;
    let mut second = 0.0;
    for (p, cell) in marginal.iter().zip(&partition.cells) {
        if *p == 0.0 {
            continue;
        }
        if cell.volume <= 0.0 {
            return Err(Error::invariant(format!(
                "cell {} has zero volume but probability {p}",
                cell.id
            )));
        }
        if cell.unbounded {
            return Err(Error::invariant(format!(
                "unbounded cell {} carries probability {p}; enlarge the partition box",
                cell.id
            )));
        }
        let lv = cell.volume.ln();
        d -= p * lv;
        second += p * lv * lv;
    }
    let m = stats.trajectories as f64;
    let var = (second - d * d).max(0.0) / m;
    Ok(TermEstimate {
        value: d,
        std_err: var.sqrt(),
    })
}

/// Expected entropy of the conditional coarse-grained density.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CoarseGrained {
    /// E_hist S[p(a_t | hist)]: the conditional symbol entropy; satisfies
    /// shannon >= S[rho_t] + c_t + d_t
    pub shannon: f64,
    /// differential entropy of rho^cg, = shannon - d_t; satisfies
    /// differential >= S[rho_t] + c_t
    pub differential: f64,
}

/// Both forms of E S[rho^cg] at depth t. The Shannon form is the chain-rule
/// increment of the plug-in block entropies.
pub fn coarse_grained_entropy(
    stats: &PathStats,
    partition: &Partition,
    t: usize,
) -> Result<CoarseGrained> {
    if t + 1 > stats.depth + 1 || t == 0 {
        return Err(Error::config("coarse-grained entropy needs 1 <= t <= depth"));
    }
    let curve = block_entropy_curve(stats, false);
    let shannon = curve.h_plugin[t] - curve.h_plugin[t - 1];
    let d = d_term(stats, partition, t)?;
    Ok(CoarseGrained {
        shannon,
        differential: shannon - d.value,
    })
}

/// Information term I_t(A) = h - c_t - d_t with propagated error.
pub fn info_term(h: TermEstimate, c: TermEstimate, d: TermEstimate) -> TermEstimate {
    TermEstimate {
        value: h.value - c.value - d.value,
        std_err: (h.std_err.powi(2) + c.std_err.powi(2) + d.std_err.powi(2)).sqrt(),
    }
}
