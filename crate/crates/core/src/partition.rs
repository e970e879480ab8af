//! Finite partitions of phase space, refinement, symbolization, and
//! time-reversed intersection volumes.
//!
//! Cells are finite unions of half-open rectangles in the system chart, so
//! volumes are analytic, membership is a total function (boundary points
//! fall into exactly one cell), and refinement is closed: intersecting two
//! rectangle unions is again a rectangle union.
//!
//! The quantity v~(a_{t-1}, ..., a_0 | a_t) = v[a_t ^ phi(a_{t-1}) ^ ... ^
//! phi^t(a_0)] / v[a_t] is estimated by sampling uniformly inside a_t and
//! walking the inverse map: psi^k(s) must land in a_{t-k}. One seeded pool
//! per cell serves every observed path ending in that cell.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::dynsys::{Chart, ControlProtocol, PhaseState, PreparedProtocol, System};
use crate::error::{Error, Result};
use crate::rng::{substream, Purpose};

/// Half-open chart rectangle `[lo0, hi0) x [lo1, hi1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChartRect {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl ChartRect {
    pub fn area(&self) -> f64 {
        (self.hi[0] - self.lo[0]).max(0.0) * (self.hi[1] - self.lo[1]).max(0.0)
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.lo[0] && p[0] < self.hi[0] && p[1] >= self.lo[1] && p[1] < self.hi[1]
    }

    fn intersect(&self, other: &ChartRect) -> Option<ChartRect> {
        let lo = [self.lo[0].max(other.lo[0]), self.lo[1].max(other.lo[1])];
        let hi = [self.hi[0].min(other.hi[0]), self.hi[1].min(other.hi[1])];
        if lo[0] < hi[0] && lo[1] < hi[1] {
            Some(ChartRect { lo, hi })
        } else {
            None
        }
    }
}

/// One partition element: a union of chart rectangles plus its normalized
/// volume. `unbounded` marks the catch-all cell of plane partitions; its
/// volume is infinite and it must carry no observed probability mass.
#[derive(Debug, Clone, Serialize)]
pub struct Cell {
    pub id: u16,
    pub rects: Vec<ChartRect>,
    pub volume: f64,
    pub unbounded: bool,
}

impl Cell {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.rects.iter().any(|r| r.contains(p))
    }
}

/// Fast path for pure grid partitions: cell id from chart coordinates in
/// O(1) instead of a scan over cells.
#[derive(Debug, Clone, Copy, Serialize)]
struct GridIndex {
    rows: usize,
    cols: usize,
    lo: [f64; 2],
    hi: [f64; 2],
    /// plane grids append an outer cell with id rows*cols
    outer: bool,
}

/// A finite partition of the phase space of one system chart.
#[derive(Debug, Clone, Serialize)]
pub struct Partition {
    pub id: String,
    pub chart: Chart,
    pub cells: Vec<Cell>,
    grid: Option<GridIndex>,
}

impl Partition {
    /// Assembles a partition from explicit cells (no grid fast path).
    pub fn from_cells(id: impl Into<String>, chart: Chart, cells: Vec<Cell>) -> Self {
        Partition {
            id: id.into(),
            chart,
            cells,
            grid: None,
        }
    }

    /// The trivial partition {Gamma}.
    pub fn trivial(chart: Chart) -> Result<Self> {
        let domain = chart
            .domain()
            .ok_or_else(|| Error::config("trivial partition needs a bounded chart"))?;
        let rect = ChartRect {
            lo: [domain[0][0], domain[1][0]],
            hi: [domain[0][1], domain[1][1]],
        };
        Ok(Partition {
            id: "trivial".into(),
            chart,
            cells: vec![Cell {
                id: 0,
                rects: vec![rect],
                volume: 1.0,
                unbounded: false,
            }],
            grid: None,
        })
    }

    /// Equal-volume grid: `rows` bins along the first chart coordinate
    /// (u = r^2 on the disk, z on the sphere) times `cols` bins along the
    /// angle. Both chart coordinates have uniform measure, so every cell has
    /// volume 1/(rows*cols).
    pub fn grid(chart: Chart, rows: usize, cols: usize) -> Result<Self> {
        let domain = chart
            .domain()
            .ok_or_else(|| Error::config("use plane_grid for the unbounded chart"))?;
        if rows == 0 || cols == 0 {
            return Err(Error::config("grid needs rows >= 1 and cols >= 1"));
        }
        let n = rows * cols;
        let vol = 1.0 / n as f64;
        let mut cells = Vec::with_capacity(n);
        for i in 0..rows {
            for j in 0..cols {
                let lo0 = lerp(domain[0][0], domain[0][1], i as f64 / rows as f64);
                let hi0 = lerp(domain[0][0], domain[0][1], (i + 1) as f64 / rows as f64);
                let lo1 = lerp(domain[1][0], domain[1][1], j as f64 / cols as f64);
                let hi1 = lerp(domain[1][0], domain[1][1], (j + 1) as f64 / cols as f64);
                cells.push(Cell {
                    id: (i * cols + j) as u16,
                    rects: vec![ChartRect {
                        lo: [lo0, lo1],
                        hi: [hi0, hi1],
                    }],
                    volume: vol,
                    unbounded: false,
                });
            }
        }
        Ok(Partition {
            id: format!("grid{rows}x{cols}"),
            chart,
            cells,
            grid: Some(GridIndex {
                rows,
                cols,
                lo: [domain[0][0], domain[1][0]],
                hi: [domain[0][1], domain[1][1]],
                outer: false,
            }),
        })
    }

    /// Two half-disk cells split by the sign of q (axis = "q") or theta
    /// (axis = "theta"). Cell 0 is the strictly positive side, cell 1 the
    /// closed non-positive side, matching the convention {[q>0], [q<=0]}.
    pub fn halves(chart: Chart, axis: &str) -> Result<Self> {
        use std::f64::consts::{PI, TAU};
        if chart != Chart::Disk {
            return Err(Error::config("halves partition is defined on the disk chart"));
        }
        // q > 0 <=> phi in (-pi/2, pi/2); theta > 0 <=> phi in (0, pi)
        let (pos, neg) = match axis {
            "q" => (
                vec![
                    ChartRect {
                        lo: [0.0, 0.0],
                        hi: [1.0, PI / 2.0],
                    },
                    ChartRect {
                        lo: [0.0, 1.5 * PI],
                        hi: [1.0, TAU],
                    },
                ],
                vec![ChartRect {
                    lo: [0.0, PI / 2.0],
                    hi: [1.0, 1.5 * PI],
                }],
            ),
            "theta" => (
                vec![ChartRect {
                    lo: [0.0, 0.0],
                    hi: [1.0, PI],
                }],
                vec![ChartRect {
                    lo: [0.0, PI],
                    hi: [1.0, TAU],
                }],
            ),
            other => return Err(Error::config(format!("unknown halves axis {other:?}"))),
        };
        Ok(Partition {
            id: format!("halves_{axis}"),
            chart,
            cells: vec![
                Cell {
                    id: 0,
                    rects: pos,
                    volume: 0.5,
                    unbounded: false,
                },
                Cell {
                    id: 1,
                    rects: neg,
                    volume: 0.5,
                    unbounded: false,
                },
            ],
            grid: None,
        })
    }

    /// Grid over `[-half_width, half_width]^2` of the plane, with Lebesgue
    /// cell volumes, plus one unbounded catch-all cell for the tails.
    pub fn plane_grid(half_width: f64, rows: usize, cols: usize) -> Result<Self> {
        if half_width <= 0.0 || rows == 0 || cols == 0 {
            return Err(Error::config("plane grid needs positive extent and bins"));
        }
        let l = half_width;
        let mut cells = Vec::with_capacity(rows * cols + 1);
        for i in 0..rows {
            for j in 0..cols {
                let lo0 = lerp(-l, l, i as f64 / rows as f64);
                let hi0 = lerp(-l, l, (i + 1) as f64 / rows as f64);
                let lo1 = lerp(-l, l, j as f64 / cols as f64);
                let hi1 = lerp(-l, l, (j + 1) as f64 / cols as f64);
                let rect = ChartRect {
                    lo: [lo0, lo1],
                    hi: [hi0, hi1],
                };
                cells.push(Cell {
                    id: (i * cols + j) as u16,
                    rects: vec![rect],
                    volume: rect.area(),
                    unbounded: false,
                });
            }
        }
        cells.push(Cell {
            id: (rows * cols) as u16,
            rects: Vec::new(),
            volume: f64::INFINITY,
            unbounded: true,
        });
        Ok(Partition {
            id: format!("plane{rows}x{cols}"),
            chart: Chart::Plane,
            cells,
            grid: Some(GridIndex {
                rows,
                cols,
                lo: [-l, -l],
                hi: [l, l],
                outer: true,
            }),
        })
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Cell id containing the chart point, if any. Boundary points resolve
    /// to exactly one cell through the half-open convention; points on the
    /// closed upper domain edge are folded into the last bin.
    pub fn locate(&self, mut p: [f64; 2]) -> Option<u16> {
        if let Some(g) = &self.grid {
            for k in 0..2 {
                if p[k] == g.hi[k] {
                    p[k] = g.hi[k] - (g.hi[k] - g.lo[k]) * 1e-15;
                }
            }
            let inside = p[0] >= g.lo[0] && p[0] < g.hi[0] && p[1] >= g.lo[1] && p[1] < g.hi[1];
            if !inside {
                return g.outer.then_some((g.rows * g.cols) as u16);
            }
            let i = ((p[0] - g.lo[0]) / (g.hi[0] - g.lo[0]) * g.rows as f64) as usize;
            let j = ((p[1] - g.lo[1]) / (g.hi[1] - g.lo[1]) * g.cols as f64) as usize;
            let i = i.min(g.rows - 1);
            let j = j.min(g.cols - 1);
            return Some((i * g.cols + j) as u16);
        }
        // lowest-id wins, which with disjoint cells is the unique match
        for cell in &self.cells {
            if cell.contains(p) {
                return Some(cell.id);
            }
        }
        // fold the closed upper edges of the chart domain into the cells
        if let Some(domain) = self.chart.domain() {
            let mut q = p;
            let mut moved = false;
            for k in 0..2 {
                if q[k] == domain[k][1] {
                    q[k] = domain[k][1] - (domain[k][1] - domain[k][0]) * 1e-15;
                    moved = true;
                }
            }
            if moved {
                for cell in &self.cells {
                    if cell.contains(q) {
                        return Some(cell.id);
                    }
                }
            }
        }
        None
    }

    /// Sum of finite cell volumes (should be 1 on bounded charts).
    pub fn total_volume(&self) -> f64 {
        self.cells
            .iter()
            .filter(|c| !c.unbounded)
            .map(|c| c.volume)
            .sum()
    }

    /// Checks pairwise disjointness and coverage on a seeded uniform sample.
    pub fn validate_cover(&self, system: &System, samples: usize, seed: u64) -> Result<()> {
        if self.chart.is_bounded() {
            let total = self.total_volume();
            if (total - 1.0).abs() > 1e-12 {
                return Err(Error::invariant(format!(
                    "partition {} volumes sum to {total}, expected 1",
                    self.id
                )));
            }
        }
        let mut rng = substream(seed, Purpose::CellVolume, 0);
        for k in 0..samples {
            let p = sample_chart_point(system, &mut rng);
            let hits = self.cells.iter().filter(|c| c.contains(p)).count();
            let located = self.locate(p).is_some();
            if hits > 1 {
                return Err(Error::invariant(format!(
                    "partition {}: point {p:?} lies in {hits} cells (sample {k})",
                    self.id
                )));
            }
            if !located && !matches!(self.chart, Chart::Plane) {
                return Err(Error::invariant(format!(
                    "partition {}: point {p:?} not covered",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Uniform chart point w.r.t. the invariant measure (bounded charts only;
/// the plane draws from the partition-box proposal during validation).
pub fn sample_chart_point(system: &System, rng: &mut impl Rng) -> [f64; 2] {
    let chart = system.chart();
    match chart.domain() {
        Some(d) => [
            rng.gen_range(d[0][0]..d[0][1]),
            rng.gen_range(d[1][0]..d[1][1]),
        ],
        None => [rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0)],
    }
}

/// Refinement A v B: all nonempty pairwise intersections, renumbered in
/// (a, b) lexicographic order. Empty intersections are dropped.
pub fn refine(a: &Partition, b: &Partition) -> Result<Partition> {
    if a.chart != b.chart {
        return Err(Error::config("refinement requires partitions over the same chart"));
    }
    let mut cells = Vec::new();
    for ca in &a.cells {
        for cb in &b.cells {
            if ca.unbounded || cb.unbounded {
                if ca.unbounded && cb.unbounded {
                    cells.push(Cell {
                        id: cells.len() as u16,
                        rects: Vec::new(),
                        volume: f64::INFINITY,
                        unbounded: true,
                    });
                }
                continue;
            }
            let mut rects = Vec::new();
            for ra in &ca.rects {
                for rb in &cb.rects {
                    if let Some(r) = ra.intersect(rb) {
                        rects.push(r);
                    }
                }
            }
            if rects.is_empty() {
                continue;
            }
            let area: f64 = rects.iter().map(ChartRect::area).sum();
            let volume = area * a.chart.density();
            if volume <= 0.0 {
                continue;
            }
            cells.push(Cell {
                id: cells.len() as u16,
                rects,
                volume,
                unbounded: false,
            });
        }
    }
    Ok(Partition {
        id: format!("{}^{}", a.id, b.id),
        chart: a.chart,
        cells,
        grid: None,
    })
}

/// Sequence of cell ids visited by a trajectory.
pub type SymbolPath = Vec<u16>;

/// Symbol of one state.
pub fn symbol_of(system: &System, partition: &Partition, s: PhaseState) -> Result<u16> {
    partition.locate(system.to_chart(s)).ok_or_else(|| {
        Error::config(format!(
            "state {:?} not covered by partition {}",
            s.0, partition.id
        ))
    })
}

/// Symbolizes a full trajectory.
pub fn symbolize(
    system: &System,
    partition: &Partition,
    traj: &[PhaseState],
) -> Result<SymbolPath> {
    traj.iter()
        .map(|&s| symbol_of(system, partition, s))
        .collect()
}

/// Draws `n` points uniformly inside a cell (w.r.t. the chart measure,
/// which is the invariant volume measure). Rectangles are chosen
/// area-proportionally, so no rejection is involved.
pub fn sample_in_cell(
    system: &System,
    cell: &Cell,
    rng: &mut impl Rng,
    n: usize,
) -> Result<Vec<PhaseState>> {
    if cell.unbounded || cell.rects.is_empty() {
        return Err(Error::config("cannot sample inside an unbounded cell"));
    }
    let total: f64 = cell.rects.iter().map(ChartRect::area).sum();
    if total <= 0.0 {
        return Err(Error::config("cell has zero volume"));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut pick = rng.gen_range(0.0..total);
        let mut rect = &cell.rects[cell.rects.len() - 1];
        for r in &cell.rects {
            let a = r.area();
            if pick < a {
                rect = r;
                break;
            }
            pick -= a;
        }
        let p = [
            rng.gen_range(rect.lo[0]..rect.hi[0]),
            rng.gen_range(rect.lo[1]..rect.hi[1]),
        ];
        out.push(system.from_chart(p));
    }
    Ok(out)
}

/// Per-cell backward-symbol pools used to estimate reversed intersection
/// volumes. Pool `cell -> depth k -> symbol of psi^k(sample)`.
pub struct BackwardPools {
    /// `strings[cell][sample * depth + (k-1)]` = cell of psi^k(sample)
    strings: Vec<Vec<u16>>,
    pub depth: usize,
    pub samples_per_cell: usize,
    /// prefix-count maps, one per depth t: cell -> (backward string of
    /// length t -> count)
    counts: Vec<Vec<HashMap<Box<[u16]>, u32>>>,
}

impl BackwardPools {
    /// Builds pools for paths that END at time `at_step` of the protocol
    /// (the inverse chain then visits lambda_{at_step-1}, ...). For undriven
    /// protocols `at_step` is irrelevant beyond its depth.
    pub fn build(
        system: &System,
        protocol: &ControlProtocol,
        partition: &Partition,
        at_step: usize,
        depth: usize,
        samples_per_cell: usize,
        seed: u64,
    ) -> Result<Self> {
        let depth = depth.min(at_step).max(0);
        let prepared = PreparedProtocol::new(system, protocol);
        let strings: Vec<Vec<u16>> = partition
            .cells
            .par_iter()
            .map(|cell| -> Result<Vec<u16>> {
                if cell.unbounded {
                    return Ok(Vec::new());
                }
                let mut rng = substream(seed, Purpose::CellVolume, cell.id as u64);
                let pts = sample_in_cell(system, cell, &mut rng, samples_per_cell)?;
                let mut row = vec![0u16; samples_per_cell * depth];
                for (i, &p0) in pts.iter().enumerate() {
                    let mut s = p0;
                    for k in 1..=depth {
                        let stepper = prepared.stepper(at_step - k);
                        s = stepper.apply_inverse(s);
                        row[i * depth + (k - 1)] = symbol_of(system, partition, s)?;
                    }
                }
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut counts: Vec<Vec<HashMap<Box<[u16]>, u32>>> = Vec::with_capacity(depth);
        for t in 1..=depth {
            let per_cell: Vec<HashMap<Box<[u16]>, u32>> = strings
                .par_iter()
                .map(|row| {
                    let mut map: HashMap<Box<[u16]>, u32> = HashMap::new();
                    if row.is_empty() {
                        return map;
                    }
                    for i in 0..samples_per_cell {
                        let key: Box<[u16]> =
                            row[i * depth..i * depth + t].to_vec().into_boxed_slice();
                        *map.entry(key).or_insert(0) += 1;
                    }
                    map
                })
                .collect();
            counts.push(per_cell);
        }
        Ok(BackwardPools {
            strings,
            depth,
            samples_per_cell,
            counts,
        })
    }

    /// v~(a_{t-1}, ..., a_0 | a_t) with its binomial standard error, for the
    /// path block `(a_0, ..., a_t)`. Depth-0 blocks return 1 by the
    /// convention v(a_0 | a_0) := 1.
    pub fn reversed_volume(&self, block: &[u16]) -> (f64, f64) {
        let t = block.len() - 1;
        if t == 0 {
            return (1.0, 0.0);
        }
        assert!(t <= self.depth, "pool depth {} < path depth {t}", self.depth);
        let cell = block[t] as usize;
        // backward key: (a_{t-1}, a_{t-2}, ..., a_0)
        let key: Vec<u16> = block[..t].iter().rev().copied().collect();
        let count = self.counts[t - 1][cell]
            .get(key.as_slice())
            .copied()
            .unwrap_or(0) as f64;
        let n = self.samples_per_cell as f64;
        let v = count / n;
        let se = (v * (1.0 - v) / n).sqrt();
        (v, se)
    }

    pub fn is_empty(&self) -> bool {
        self.strings.is_empty()
    }
}

/// Direct Monte Carlo estimate of the reversed intersection volume of one
/// path, independent of the pooled tables (used to spot-check them).
pub fn reversed_intersection_volume(
    system: &System,
    protocol: &ControlProtocol,
    partition: &Partition,
    block: &[u16],
    at_step: usize,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let t = block.len() - 1;
    if t == 0 {
        return Ok((1.0, 0.0));
    }
    let cell = partition
        .cells
        .get(block[t] as usize)
        .ok_or_else(|| Error::config("path references an unknown cell"))?;
    if cell.volume <= 0.0 {
        return Err(Error::config("zero-volume terminal cell"));
    }
    let prepared = PreparedProtocol::new(system, protocol);
    let mut rng = substream(seed, Purpose::CellVolume, 1 << 20 | cell.id as u64);
    let pts = sample_in_cell(system, cell, &mut rng, samples)?;
    let mut hits = 0usize;
    for &p0 in &pts {
        let mut s = p0;
        let mut ok = true;
        for k in 1..=t {
            s = prepared.stepper(at_step - k).apply_inverse(s);
            if symbol_of(system, partition, s)? != block[t - k] {
                ok = false;
                break;
            }
        }
        if ok {
            hits += 1;
        }
    }
    let v = hits as f64 / samples as f64;
    let se = (v * (1.0 - v) / samples as f64).sqrt();
    Ok((v, se))
}

/// Partition specification as it appears in experiment configs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    Trivial,
    Grid {
        chart: String,
        rows: usize,
        cols: usize,
    },
    Halves {
        axis: String,
    },
}

impl PartitionSpec {
    pub fn build(&self, system: &System, plane_half_width: f64) -> Result<Partition> {
        let chart = system.chart();
        match self {
            PartitionSpec::Trivial => Partition::trivial(chart),
            PartitionSpec::Halves { axis } => Partition::halves(chart, axis),
            PartitionSpec::Grid {
                chart: name,
                rows,
                cols,
            } => {
                let expected = match chart {
                    Chart::Disk => "disk",
                    Chart::Sphere => "sphere",
                    Chart::Plane => "plane",
                    Chart::Square => "square",
                };
                if name != expected {
                    return Err(Error::config(format!(
                        "partition chart {name:?} does not match the system chart {expected:?}"
                    )));
                }
                if chart == Chart::Plane {
                    Partition::plane_grid(plane_half_width, *rows, *cols)
                } else {
                    Partition::grid(chart, *rows, *cols)
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynsys::evolve;
    use std::f64::consts::PI;

    #[test]
    fn refine_with_trivial_is_identity() {
        let a = Partition::grid(Chart::Sphere, 2, 2).unwrap();
        let t = Partition::trivial(Chart::Sphere).unwrap();
        let r = refine(&a, &t).unwrap();
        assert_eq!(r.len(), a.len());
        for (ca, cr) in a.cells.iter().zip(&r.cells) {
            assert!((ca.volume - cr.volume).abs() < 1e-15);
        }
    }

    #[test]
    fn refine_is_idempotent() {
        let a = Partition::grid(Chart::Disk, 2, 3).unwrap();
        let r = refine(&a, &a).unwrap();
        assert_eq!(r.len(), a.len());
        assert!((r.total_volume() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn refining_orthogonal_halves_gives_quarter_disks() {
        let q = Partition::halves(Chart::Disk, "q").unwrap();
        let t = Partition::halves(Chart::Disk, "theta").unwrap();
        let r = refine(&q, &t).unwrap();
        assert_eq!(r.len(), 4);
        for cell in &r.cells {
            assert!((cell.volume - 0.25).abs() < 1e-12, "volume {}", cell.volume);
        }
    }

    #[test]
    fn halves_symbolization_alternates_under_disk_rotation() {
        let sys = System::disk();
        let part = Partition::halves(Chart::Disk, "q").unwrap();
        let protocol = ControlProtocol::constant(0.0, 6);
        let traj = evolve(&sys, PhaseState::planar(0.5, 0.1), &protocol).unwrap();
        let path = symbolize(&sys, &part, &traj).unwrap();
        assert_eq!(path, vec![0, 1, 0, 1, 0, 1, 0]);
    }

    #[test]
    fn trivial_partition_gives_constant_path() {
        let sys = System::kicked_top(PI / 2.0, 5.0);
        let part = Partition::trivial(Chart::Sphere).unwrap();
        let protocol = ControlProtocol::constant(0.0, 5);
        let traj = evolve(&sys, PhaseState::sphere(0.6, 0.64, 0.48), &protocol).unwrap();
        let path = symbolize(&sys, &part, &traj).unwrap();
        assert!(path.iter().all(|&s| s == 0));
    }

    #[test]
    fn grid_partitions_cover_and_are_disjoint() {
        for (sys, part) in [
            (System::disk(), Partition::grid(Chart::Disk, 3, 4).unwrap()),
            (
                System::kicked_top(PI / 2.0, 5.0),
                Partition::grid(Chart::Sphere, 4, 4).unwrap(),
            ),
            (System::disk(), Partition::halves(Chart::Disk, "q").unwrap()),
        ] {
            part.validate_cover(&sys, 100_000, 5).unwrap();
        }
    }

    #[test]
    fn symbolization_is_deterministic() {
        let sys = System::kicked_top(PI / 2.0, 5.0);
        let part = Partition::grid(Chart::Sphere, 2, 4).unwrap();
        let protocol = ControlProtocol::constant(0.0, 32);
        let traj = evolve(&sys, PhaseState::sphere(0.48, 0.6, 0.64), &protocol).unwrap();
        let a = symbolize(&sys, &part, &traj).unwrap();
        let b = symbolize(&sys, &part, &traj).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reversed_volume_conventions() {
        let sys = System::disk();
        let part = Partition::halves(Chart::Disk, "q").unwrap();
        let protocol = ControlProtocol::constant(0.0, 8);
        let pools =
            BackwardPools::build(&sys, &protocol, &part, 4, 3, 20_000, 99).unwrap();
        // depth-0 convention
        assert_eq!(pools.reversed_volume(&[1]), (1.0, 0.0));
        // alternating-consistent path: the rotation maps one half onto the
        // other, so the intersection is all of the terminal cell
        let (v, _) = pools.reversed_volume(&[0, 1, 0]);
        assert_eq!(v, 1.0);
        // inconsistent path has empty intersection
        let (v, _) = pools.reversed_volume(&[0, 0]);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn pooled_and_direct_reversed_volumes_agree() {
        let sys = System::kicked_top(PI / 2.0, 5.0);
        let part = Partition::grid(Chart::Sphere, 1, 4).unwrap();
        let protocol = ControlProtocol::constant(0.0, 6);
        let pools = BackwardPools::build(&sys, &protocol, &part, 6, 2, 40_000, 7).unwrap();
        let block = [1u16, 2, 0];
        let (vp, sp) = pools.reversed_volume(&block);
        let (vd, sd) =
            reversed_intersection_volume(&sys, &protocol, &part, &block, 6, 40_000, 8).unwrap();
        assert!(
            (vp - vd).abs() < 4.0 * (sp * sp + sd * sd).sqrt().max(1e-4),
            "pooled {vp} vs direct {vd}"
        );
    }

    #[test]
    fn plane_grid_has_outer_cell() {
        let part = Partition::plane_grid(4.0, 4, 4).unwrap();
        assert_eq!(part.len(), 17);
        assert!(part.cells[16].unbounded);
        assert_eq!(part.locate([10.0, 0.0]), Some(16));
        assert_eq!(part.locate([-3.9, 3.9]), Some(3));
    }
}
