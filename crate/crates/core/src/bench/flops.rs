//! FLOP accounting.
//!
//! Convention shared by the closed forms and the instrumented kernels:
//!
//! - a multiply and an add are one FLOP each, so an inner product of length
//!   `d` accumulated from zero costs `2d`;
//! - a softmax entry costs 3: the max shift (sub), the `exp`, and the
//!   normalizing division;
//! - dividing by a column mass costs 1;
//! - reductions that only build normalizers (row max, row sum, column mass)
//!   and the `1/sqrt(d)` logit scaling are overhead and are not counted.
//!
//! [`Counted`] tallies exactly the counted operations, and tracks overhead
//! separately, so a kernel run with it can be compared to the closed forms
//! with zero tolerance.

use std::cell::Cell;
use std::ops::{Add, Div, Mul, Sub};

pub use crate::reference::{vanilla_flops, SOFTMAX_FLOPS_PER_ENTRY};

/// Arithmetic needed by the benchmark kernels.
pub trait Scalar:
    Copy
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
{
    fn zero() -> Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    /// Addition into a normalizer. Not a FLOP under the convention.
    fn accumulate(self, x: Self) -> Self;
    /// Multiplication by the logit scale. Not a FLOP under the convention.
    fn rescale(self, s: Self) -> Self;
}

impl Scalar for f64 {
    fn zero() -> Self {
        0.0
    }
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn accumulate(self, x: Self) -> Self {
        self + x
    }
    fn rescale(self, s: Self) -> Self {
        self * s
    }
}

impl Scalar for f32 {
    fn zero() -> Self {
        0.0
    }
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn accumulate(self, x: Self) -> Self {
        self + x
    }
    fn rescale(self, s: Self) -> Self {
        self * s
    }
}

thread_local! {
    static COUNTED: Cell<u64> = const { Cell::new(0) };
    static OVERHEAD: Cell<u64> = const { Cell::new(0) };
}

fn bump(cell: &'static std::thread::LocalKey<Cell<u64>>) {
    cell.with(|c| c.set(c.get() + 1));
}

/// `f64` that counts every arithmetic operation performed on it on the
/// current thread.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Counted(pub f64);

macro_rules! counted_op {
    ($tr:ident, $method:ident, $op:tt) => {
        impl $tr for Counted {
            type Output = Counted;
            fn $method(self, rhs: Counted) -> Counted {
                bump(&COUNTED);
                Counted(self.0 $op rhs.0)
            }
        }
    };
}

counted_op!(Add, add, +);
counted_op!(Sub, sub, -);
counted_op!(Mul, mul, *);
counted_op!(Div, div, /);

impl Scalar for Counted {
    fn zero() -> Self {
        Counted(0.0)
    }
    fn from_f64(x: f64) -> Self {
        Counted(x)
    }
    fn to_f64(self) -> f64 {
        self.0
    }
    fn exp(self) -> Self {
        bump(&COUNTED);
        Counted(self.0.exp())
    }
    fn accumulate(self, x: Self) -> Self {
        bump(&OVERHEAD);
        Counted(self.0 + x.0)
    }
    fn rescale(self, s: Self) -> Self {
        bump(&OVERHEAD);
        Counted(self.0 * s.0)
    }
}

/// Operation tallies from one instrumented run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpTally {
    pub flops: u64,
    pub overhead: u64,
}

/// Runs `f` and returns what it counted on this thread.
pub fn count_ops<R>(f: impl FnOnce() -> R) -> (R, OpTally) {
    COUNTED.with(|c| c.set(0));
    OVERHEAD.with(|c| c.set(0));
    let out = f();
    let tally = OpTally {
        flops: COUNTED.with(Cell::get),
        overhead: OVERHEAD.with(Cell::get),
    };
    (out, tally)
}

/// Closed-form FLOPs of the fast anchor path:
/// affinity `2nmd + 3nm`, `A^T V` `2nmd`, mass division `md`, `A M2` `2nmd`.
pub fn anchor_flops(n: u64, m: u64, d: u64) -> u64 {
    let nm = n * m;
    2 * nm * d + SOFTMAX_FLOPS_PER_ENTRY * nm + 2 * nm * d + m * d + 2 * nm * d
}

/// Closed-form FLOPs of the explicit anchor path: affinity `2nmd + 3nm`,
/// `A diag(delta)^-1` `nm`, `S_t` `2n^2m`, `S_t V` `2n^2d`.
pub fn anchor_explicit_flops(n: u64, m: u64, d: u64) -> u64 {
    let nm = n * m;
    2 * nm * d + SOFTMAX_FLOPS_PER_ENTRY * nm + nm + 2 * n * n * m + 2 * n * n * d
}
