//! A small reverse-mode autodiff engine and the layers built on it.
//!
//! Computation is recorded on a [`Graph`] tape: every op appends a node whose
//! value is computed eagerly, and [`Graph::backward`] walks the tape in reverse.
//! All kernels are generic over [`Scalar`] so the same model code runs in `f32`
//! for training and in `f64` for finite-difference gradient checks.

mod graph;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;
mod tensor;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub use gradcheck::{gradient_check, GradCheckReport};
pub use graph::{softplus, stable_sigmoid, Activation, Gradients, Graph, Var};
pub use layers::{
    positional_encoding, Dense, EncoderBlock, LayerNorm, LstmLayer, MultiHeadAttention, ParamId, ParamStore, Parameter,
};
pub use loss::LossKind;
pub use optim::{adam_step, AdamConfig, AdamState};
pub use tensor::Tensor;

/// Element type of tensors.
pub trait Scalar: Float + NumAssign + FromPrimitive + ToPrimitive + Default + Debug + Sum + Send + Sync + 'static {
    /// `c = op(a) * op(b)` (or `c += ...` when `accumulate`), row-major, where
    /// `op(a)` is `m x k` and `op(b)` is `k x n`. A transposed operand is
    /// stored in its untransposed layout (`k x m` / `n x k`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, c: &mut [Self], accumulate: bool);

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    // Logical (rows x cols) view of a buffer stored either as-is or as its
    // transpose.
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, a_t);
                let (rsb, csb) = strides(k, n, b_t);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the assertion above guarantees every strided access
                // stays inside the three slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);
