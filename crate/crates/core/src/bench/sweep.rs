use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::flops::{anchor_explicit_flops, anchor_flops, vanilla_flops, Scalar};
use super::kernels;
use crate::error::{Error, Result};
use crate::seeded_rng;

/// Default ceiling on a single `n x n` buffer: 2 GiB.
pub const DEFAULT_MEMORY_CEILING: u64 = 2 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mechanism {
    Vanilla,
    AnchorFast,
    AnchorExplicit,
}

impl Mechanism {
    pub fn label(self) -> &'static str {
        match self {
            Mechanism::Vanilla => "vanilla",
            Mechanism::AnchorFast => "anchor-fast",
            Mechanism::AnchorExplicit => "anchor-explicit",
        }
    }

    fn uses_anchors(self) -> bool {
        self != Mechanism::Vanilla
    }

    fn is_quadratic(self) -> bool {
        self != Mechanism::AnchorFast
    }

    pub fn flops(self, n: usize, m: usize, d: usize) -> u64 {
        let (n, m, d) = (n as u64, m as u64, d as u64);
        match self {
            Mechanism::Vanilla => vanilla_flops(n, d),
            Mechanism::AnchorFast => anchor_flops(n, m, d),
            Mechanism::AnchorExplicit => anchor_explicit_flops(n, m, d),
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "vanilla" => Ok(Mechanism::Vanilla),
            "anchor-fast" => Ok(Mechanism::AnchorFast),
            "anchor-explicit" => Ok(Mechanism::AnchorExplicit),
            other => Err(Error::Argument(format!(
                "unknown mechanism {other:?} (expected vanilla, anchor-fast or anchor-explicit)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    fn bytes(self) -> u64 {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub mechanisms: Vec<Mechanism>,
    pub ns: Vec<usize>,
    pub ms: Vec<usize>,
    pub ds: Vec<usize>,
    pub heads: usize,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Run heads on separate threads inside the timed region.
    pub parallel_heads: bool,
    /// Bytes allowed for one quadratic buffer.
    pub memory_ceiling: u64,
}

impl Default for SweepSpec {
    /// The complexity-scaling grid: `n` from 512 to 8192, `d = 64`, `m = 32`.
    fn default() -> Self {
        SweepSpec {
            mechanisms: vec![Mechanism::Vanilla, Mechanism::AnchorFast],
            ns: vec![512, 1024, 2048, 4096, 8192],
            ms: vec![32],
            ds: vec![64],
            heads: 1,
            reps: 5,
            warmup: 1,
            seed: 0,
            precision: Precision::F64,
            parallel_heads: false,
            memory_ceiling: DEFAULT_MEMORY_CEILING,
        }
    }
}

/// One `(mechanism, n, m, d)` point of a sweep. `m` is 0 for vanilla.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cell {
    pub mechanism: Mechanism,
    pub n: usize,
    pub m: usize,
    pub d: usize,
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} n={} m={} d={}",
            self.mechanism, self.n, self.m, self.d
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRecord {
    /// Mechanism label, suffixed with `/f32` and/or `/par` for non-default modes.
    pub mechanism: String,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub heads: usize,
    pub reps: usize,
    pub wall_ns_median: u64,
    pub flops: u64,
    /// Sum of all output entries.
    pub checksum: f64,
}

pub fn record_label(mechanism: Mechanism, precision: Precision, parallel: bool) -> String {
    let mut label = mechanism.label().to_string();
    if precision == Precision::F32 {
        label.push_str("/f32");
    }
    if parallel {
        label.push_str("/par");
    }
    label
}

/// Sorted, de-duplicated cell grid for `spec`, with every quadratic cell
/// checked against the memory ceiling.
pub fn sweep_cells(spec: &SweepSpec) -> Result<Vec<Cell>> {
    let mut cells = Vec::new();
    for &mechanism in &spec.mechanisms {
        for &n in &spec.ns {
            for &d in &spec.ds {
                if mechanism.uses_anchors() {
                    cells.extend(spec.ms.iter().map(|&m| Cell { mechanism, n, m, d }));
                } else {
                    cells.push(Cell {
                        mechanism,
                        n,
                        m: 0,
                        d,
                    });
                }
            }
        }
    }
    cells.sort();
    cells.dedup();
    for c in &cells {
        if c.n == 0 || c.d == 0 || (c.mechanism.uses_anchors() && c.m == 0) {
            return Err(Error::Argument(format!("degenerate cell {c}")));
        }
        if c.mechanism.is_quadratic() {
            let bytes = (c.n as u64) * (c.n as u64) * spec.precision.bytes();
            if bytes > spec.memory_ceiling {
                return Err(Error::Capacity(format!(
                    "cell {c} needs a {bytes}-byte n x n buffer, above the {}-byte ceiling",
                    spec.memory_ceiling
                )));
            }
        }
    }
    Ok(cells)
}

struct HeadInputs<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    ws: Vec<T>,
}

fn cell_inputs<T: Scalar>(cell: &Cell, heads: usize, seed: u64) -> Vec<HeadInputs<T>> {
    let mut rng = seeded_rng(seed);
    let mut draw = |len: usize, std: f64| -> Vec<T> {
        (0..len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::from_f64(z * std)
            })
            .collect()
    };
    let (n, d, m) = (cell.n, cell.d, cell.m.max(1));
    (0..heads)
        .map(|_| HeadInputs {
            q: draw(n * d, 1.0),
            k: draw(n * d, 1.0),
            v: draw(n * d, 1.0),
            ws: draw(m * d, 1.0 / (d as f64).sqrt()),
        })
        .collect()
}

fn run_head<T: Scalar>(cell: &Cell, h: &HeadInputs<T>) -> Vec<T> {
    let (n, m, d) = (cell.n, cell.m, cell.d);
    match cell.mechanism {
        Mechanism::Vanilla => kernels::vanilla(&h.q, &h.k, &h.v, n, d),
        Mechanism::AnchorFast => kernels::anchor_fast(&h.k, &h.v, &h.ws, n, m, d),
        Mechanism::AnchorExplicit => kernels::anchor_explicit(&h.k, &h.v, &h.ws, n, m, d),
    }
}

fn run_cell<T: Scalar + Send + Sync>(cell: &Cell, inputs: &[HeadInputs<T>], parallel: bool) -> f64 {
    let outputs: Vec<Vec<T>> = if parallel && inputs.len() > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = inputs
                .iter()
                .map(|h| s.spawn(move || run_head(cell, h)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("head thread panicked"))
                .collect()
        })
    } else {
        inputs.iter().map(|h| run_head(cell, h)).collect()
    };
    outputs.iter().flatten().map(|x| x.to_f64()).sum()
}

fn time_cell<T: Scalar + Send + Sync>(cell: &Cell, spec: &SweepSpec) -> (u64, f64) {
    let inputs = cell_inputs::<T>(cell, spec.heads, spec.seed);
    let mut checksum = None;
    for _ in 0..spec.warmup {
        checksum = Some(run_cell(cell, &inputs, spec.parallel_heads));
    }
    let mut times = Vec::with_capacity(spec.reps);
    for _ in 0..spec.reps {
        let start = Instant::now();
        let sum = std::hint::black_box(run_cell(cell, &inputs, spec.parallel_heads));
        times.push((start.elapsed().as_nanos() as u64).max(1));
        if let Some(prev) = checksum {
            assert_eq!(
                sum.to_bits(),
                prev.to_bits(),
                "checksum changed between reps of {cell:?}"
            );
        }
        checksum = Some(sum);
    }
    times.sort_unstable();
    (times[times.len() / 2], checksum.unwrap_or(0.0))
}

pub fn run_cell_record(cell: &Cell, spec: &SweepSpec) -> BenchRecord {
    let (wall_ns_median, checksum) = match spec.precision {
        Precision::F64 => time_cell::<f64>(cell, spec),
        Precision::F32 => time_cell::<f32>(cell, spec),
    };
    BenchRecord {
        mechanism: record_label(
            cell.mechanism,
            spec.precision,
            spec.parallel_heads && spec.heads > 1,
        ),
        n: cell.n,
        m: cell.m,
        d: cell.d,
        heads: spec.heads,
        reps: spec.reps,
        wall_ns_median,
        flops: cell.mechanism.flops(cell.n, cell.m, cell.d) * spec.heads as u64,
        checksum,
    }
}

/// Times every cell sequentially, in sorted cell order. `progress` is called
/// after each record.
pub fn run_sweep_with(
    spec: &SweepSpec,
    mut progress: impl FnMut(&BenchRecord),
) -> Result<Vec<BenchRecord>> {
    if spec.reps < 3 {
        return Err(Error::Argument(format!(
            "reps must be >= 3, got {}",
            spec.reps
        )));
    }
    if spec.warmup < 1 {
        return Err(Error::Argument("warmup must be >= 1".into()));
    }
    if spec.heads < 1 {
        return Err(Error::Argument("heads must be >= 1".into()));
    }
    let cells = sweep_cells(spec)?;
    let mut records = Vec::with_capacity(cells.len());
    for cell in &cells {
        let r = run_cell_record(cell, spec);
        progress(&r);
        records.push(r);
    }
    Ok(records)
}

pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<BenchRecord>> {
    run_sweep_with(spec, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mechanisms: Vec<Mechanism>, ns: Vec<usize>) -> SweepSpec {
        SweepSpec {
            mechanisms,
            ns,
            ms: vec![4],
            ds: vec![8],
            reps: 3,
            ..SweepSpec::default()
        }
    }

    #[test]
    fn empty_sweep_is_empty() {
        assert!(run_sweep(&small(vec![], vec![64])).unwrap().is_empty());
        assert!(run_sweep(&small(vec![Mechanism::AnchorFast], vec![]))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn single_cell_record() {
        let recs = run_sweep(&small(vec![Mechanism::AnchorFast], vec![64])).unwrap();
        assert_eq!(recs.len(), 1);
        let r = &recs[0];
        assert_eq!((r.reps, r.n, r.m, r.d, r.heads), (3, 64, 4, 8, 1));
        assert!(r.wall_ns_median > 0);
        assert_eq!(r.flops, anchor_flops(64, 4, 8));
        assert_eq!(r.mechanism, "anchor-fast");
    }

    #[test]
    fn cells_are_sorted_and_vanilla_ignores_m() {
        let mut spec = small(
            vec![Mechanism::AnchorFast, Mechanism::Vanilla],
            vec![128, 64],
        );
        spec.ms = vec![8, 4];
        let cells = sweep_cells(&spec).unwrap();
        let labels: Vec<String> = cells.iter().map(|c| c.to_string()).collect();
        assert_eq!(
            labels,
            [
                "vanilla n=64 m=0 d=8",
                "vanilla n=128 m=0 d=8",
                "anchor-fast n=64 m=4 d=8",
                "anchor-fast n=64 m=8 d=8",
                "anchor-fast n=128 m=4 d=8",
                "anchor-fast n=128 m=8 d=8",
            ]
        );
    }

    #[test]
    fn memory_ceiling_names_cell() {
        let mut spec = small(
            vec![Mechanism::Vanilla, Mechanism::AnchorFast],
            vec![1 << 15],
        );
        spec.memory_ceiling = DEFAULT_MEMORY_CEILING;
        let err = sweep_cells(&spec).unwrap_err();
        assert!(matches!(err, Error::Capacity(_)));
        assert!(err.to_string().contains("vanilla n=32768"), "{err}");
        spec.mechanisms = vec![Mechanism::AnchorFast];
        assert!(sweep_cells(&spec).is_ok());
    }

    #[test]
    fn checksums_are_reproducible_and_paths_agree() {
        let spec = small(
            vec![Mechanism::AnchorFast, Mechanism::AnchorExplicit],
            vec![50, 100],
        );
        let a = run_sweep(&spec).unwrap();
        let b = run_sweep(&spec).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.checksum.to_bits(), y.checksum.to_bits());
        }
        for n in [50, 100] {
            let fast = a
                .iter()
                .find(|r| r.n == n && r.mechanism == "anchor-fast")
                .unwrap();
            let explicit = a
                .iter()
                .find(|r| r.n == n && r.mechanism == "anchor-explicit")
                .unwrap();
            assert!(
                (fast.checksum - explicit.checksum).abs() <= 1e-9 * fast.checksum.abs().max(1.0)
            );
        }
    }

    #[test]
    fn multi_head_and_f32_modes() {
        let mut spec = small(vec![Mechanism::AnchorFast], vec![40]);
        spec.heads = 3;
        let seq = run_sweep(&spec).unwrap();
        spec.parallel_heads = true;
        let par = run_sweep(&spec).unwrap();
        assert_eq!(par[0].mechanism, "anchor-fast/par");
        assert_eq!(seq[0].checksum.to_bits(), par[0].checksum.to_bits());
        assert_eq!(seq[0].flops, 3 * anchor_flops(40, 4, 8));
        spec.precision = Precision::F32;
        let f32 = run_sweep(&spec).unwrap();
        assert_eq!(f32[0].mechanism, "anchor-fast/f32/par");
        assert!((f32[0].checksum - seq[0].checksum).abs() < 1e-2);
    }

    #[test]
    fn rejects_too_few_reps() {
        let mut spec = small(vec![Mechanism::AnchorFast], vec![16]);
        spec.reps = 2;
        assert!(run_sweep(&spec).is_err());
    }

    #[test]
    fn mechanism_parse() {
        assert_eq!(
            "anchor-fast".parse::<Mechanism>().unwrap(),
            Mechanism::AnchorFast
        );
        assert!("flash".parse::<Mechanism>().is_err());
    }
}
