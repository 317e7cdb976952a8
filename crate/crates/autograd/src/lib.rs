//! Reverse-mode automatic differentiation over dense CPU tensors.
//!
//! Every backward rule is written in terms of differentiable [`Var`] ops, so
//! calling [`grad`] with `create_graph = true` yields gradients that can be
//! differentiated again (needed for gradient penalties).

mod ops;
mod optim;
mod tensor;
mod var;

pub use optim::Adam;
pub use tensor::{broadcast_shape, contiguous_strides, numel, Tensor};
pub use var::{grad, grad_with_seed, is_grad_enabled, kink_signature, no_grad, NoGradGuard, Var};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

/// Element type of tensors: implemented for `f32` and `f64`.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const DTYPE: &'static str;

    /// `c = a·b` for row/column strided matrices (`m×k` times `k×n`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    ) {
        Self::gemm_impl(m, k, n, a, rsa, csa, b, rsb, csb, Self::zero(), c, rsc, csc)
    }

    /// `c += a·b`.
    #[allow(clippy::too_many_arguments)]
    fn gemm_acc(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    ) {
        Self::gemm_impl(m, k, n, a, rsa, csa, b, rsb, csb, Self::one(), c, rsc, csc)
    }

    #[allow(clippy::too_many_arguments)]
    fn gemm_impl(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );

    fn to_bits64(self) -> u64;
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows > 0 && cols > 0 {
        assert!((rows - 1) * rs + (cols - 1) * cs < len, "gemm operand out of bounds");
    }
}

macro_rules! impl_float {
    ($t:ty, $gemm:path, $name:literal, $bits:expr) => {
        impl Float for $t {
            const DTYPE: &'static str = $name;

            fn gemm_impl(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                check_extent(a.len(), m, k, rsa, csa);
                check_extent(b.len(), k, n, rsb, csb);
                check_extent(c.len(), m, n, rsc, csc);
                if k == 0 {
                    if beta == 0.0 {
                        for i in 0..m {
                            for j in 0..n {
                                c[i * rsc + j * csc] = 0.0;
                            }
                        }
                    }
                    return;
                }
                // SAFETY: extents checked above; matrixmultiply reads/writes
                // only within the described strided views.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    );
                }
            }

            fn to_bits64(self) -> u64 {
                $bits(self)
            }
        }
    };
}

impl_float!(f32, matrixmultiply::sgemm, "f32", |x: f32| x.to_bits() as u64);
impl_float!(f64, matrixmultiply::dgemm, "f64", |x: f64| x.to_bits());
