//! Floating-point element types. Training and inference run in `f32`;
//! gradient checks and oracles run in `f64`.

use core::fmt::{Debug, Display};
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a * b + beta * c` on strided row/column layouts.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`. When `beta` is zero `c`
    /// is not read.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self;

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn cst(v: f64) -> Self {
        Self::from_f64_lossy(v)
    }
}

fn max_offset(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows as isize - 1) as usize * rs as usize + (cols as isize - 1) as usize * cs as usize
}

#[allow(clippy::too_many_arguments)]
fn check_gemm<T>(m: usize, k: usize, n: usize, a: &[T], rsa: isize, csa: isize, b: &[T], rsb: isize, csb: isize, c: &[T], rsc: isize, csc: isize) {
    assert!(rsa >= 0 && csa >= 0 && rsb >= 0 && csb >= 0 && rsc >= 0 && csc >= 0);
    if m > 0 && k > 0 {
        assert!(max_offset(m, k, rsa, csa) < a.len(), "gemm: lhs out of bounds");
    }
    if k > 0 && n > 0 {
        assert!(max_offset(k, n, rsb, csb) < b.len(), "gemm: rhs out of bounds");
    }
    if m > 0 && n > 0 {
        assert!(max_offset(m, n, rsc, csc) < c.len(), "gemm: output out of bounds");
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[allow(clippy::too_many_arguments)]
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                check_gemm(m, k, n, a, rsa, csa, b, rsb, csb, c, rsc, csc);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every index touched by the kernel was bounds-checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }

            #[inline]
            fn from_f64_lossy(v: f64) -> Self {
                v as $t
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Sum that does not depend on the order of the inputs: the values are sorted
/// under IEEE total order before accumulation, so any permutation of the same
/// multiset produces the same bits.
pub fn order_invariant_sum<T: Real>(values: &mut [T]) -> T {
    values.sort_unstable_by(|a, b| total_cmp(*a, *b));
    let mut acc = T::zero();
    for &v in values.iter() {
        acc += v;
    }
    acc
}

#[inline]
pub fn total_cmp<T: Real>(a: T, b: T) -> core::cmp::Ordering {
    a.as_f64().total_cmp(&b.as_f64())
}
