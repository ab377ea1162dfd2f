//! Dense tensors and tape-based reverse-mode differentiation.
//!
//! Everything is generic over [`Real`] so the same graph code runs in single
//! precision for training and double precision for gradient checks.

mod kernels;
mod tape;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::sync::atomic::{AtomicUsize, Ordering};

use num_traits::Float;
use thiserror::Error;

pub use kernels::{matmul_nn, matmul_nt, matmul_tn};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Epsilon used by every layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Floating-point element type.
pub trait Real:
    Float + Debug + Display + Default + Send + Sync + AddAssign + SubAssign + MulAssign + DivAssign + Sum + 'static
{
    fn of(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable does not belong to this tape")]
    NoTape,
    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("cross_entropy: every target is ignored")]
    NoTargets,
}

static THREADS: AtomicUsize = AtomicUsize::new(1);

/// Selects the numeric path: 1 is the single-threaded reference path, larger
/// values enable row-parallel matrix products on the rayon pool.
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}
