//! Scalar abstraction: the whole engine is generic over `f32` (training
//! precision) and `f64` (verification precision, used by gradient checks).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssign};

/// Element type of tensors. Implemented for `f32` and `f64` only.
pub trait Scalar:
    Float + NumAssign + Sum + Send + Sync + Debug + Display + 'static
{
    /// Checkpoint dtype code (0 = f32, 1 = f64).
    const DTYPE_CODE: u8;

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// General strided matrix multiply: `c = alpha * a@b + beta * c`.
    ///
    /// `a` is m x k with strides (rsa, csa), `b` is k x n with (rsb, csb),
    /// `c` is m x n with (rsc, csc). Strides may describe transposed views.
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

    fn to_le_bytes_vec(self) -> Vec<u8>;

    fn from_le_slice(bytes: &[u8]) -> Self;

    /// Byte width of one scalar in checkpoint files.
    const BYTE_WIDTH: usize;
}

// The slice-extent assertions keep the unsafe matrixmultiply calls in bounds
// for every stride combination we use (plain and transposed views).
fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let max = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(max >= 0 && (max as usize) < len, "gemm stride out of bounds");
}

impl Scalar for f32 {
    const DTYPE_CODE: u8 = 0;
    const BYTE_WIDTH: usize = 4;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

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
        check_extent(a.len(), m, k, rsa, csa);
        check_extent(b.len(), k, n, rsb, csb);
        check_extent(c.len(), m, n, rsc, csc);
        unsafe {
            matrixmultiply::sgemm(
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

    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE_CODE: u8 = 1;
    const BYTE_WIDTH: usize = 8;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

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
        check_extent(a.len(), m, k, rsa, csa);
        check_extent(b.len(), k, n, rsb, csb);
        check_extent(c.len(), m, n, rsc, csc);
        unsafe {
            matrixmultiply::dgemm(
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

    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
}

/// splitmix64 step, used to derive independent sub-seeds from a base seed.
pub fn mix_seed(mut state: u64, salt: u64) -> u64 {
    state = state.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(salt);
    let mut z = state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a stream seed from a base seed and a list of salts (epoch, index, ...).
pub fn derive_seed(base: u64, salts: &[u64]) -> u64 {
    let mut s = base;
    for (i, &salt) in salts.iter().enumerate() {
        s = mix_seed(s, salt.wrapping_add(i as u64 + 1));
    }
    s
}
