//! Scalar abstraction for the network kernels.
//!
//! Forward and backward passes are written once over [`Scalar`]. Running
//! them over [`Dual`] numbers pushes a tangent through the whole backward
//! pass, which yields Hessian-vector products of a loss (forward-over-reverse
//! differentiation). The GTK term needs exactly that: the derivative of a
//! function of a gradient.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Scalar:
    Copy
    + Debug
    + Default
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    fn from_f64(v: f64) -> Self;

    /// Primal value.
    fn value(self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn scale(self, k: f64) -> Self {
        self * Self::from_f64(k)
    }

    /// `c = op(a) * op(b)` (or `c += ...` when `accumulate`), row-major.
    ///
    /// `a` is `m x k` (stored `k x m` when `a_t`), `b` is `k x n` (stored
    /// `n x k` when `b_t`), `c` is `m x n`.
    #[allow(clippy::too_many_arguments)]
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
        naive_gemm(m, k, n, a, a_t, b, b_t, c, accumulate)
    }
}

#[allow(clippy::too_many_arguments)]
fn naive_gemm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    a_t: bool,
    b: &[S],
    b_t: bool,
    c: &mut [S],
    accumulate: bool,
) {
    if !accumulate {
        c[..m * n].iter_mut().for_each(|v| *v = S::zero());
    }
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = if a_t { a[p * m + i] } else { a[i * k + p] };
            if b_t {
                for (j, cj) in row.iter_mut().enumerate() {
                    *cj += aip * b[j * k + p];
                }
            } else {
                let brow = &b[p * n..(p + 1) * n];
                for (cj, &bj) in row.iter_mut().zip(brow) {
                    *cj += aip * bj;
                }
            }
        }
    }
}

/// Strides for a row-major `rows x cols` operand, possibly stored transposed.
fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

#[allow(clippy::too_many_arguments)]
fn dgemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = strides(m, k, a_t);
    let (rsb, csb) = strides(k, n, b_t);
    // SAFETY: bounds checked above; strides describe the row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
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

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }

    fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], accumulate: bool) {
        dgemm(m, k, n, a, a_t, b, b_t, c, if accumulate { 1.0 } else { 0.0 })
    }
}

/// First-order dual number `re + eps * ε` with `ε² = 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub eps: f64,
}

impl Dual {
    pub const fn new(re: f64, eps: f64) -> Self {
        Self { re, eps }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.eps + o.eps)
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.eps - o.eps)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.eps + self.eps * o.re)
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, o: Dual) -> Dual {
        let re = self.re / o.re;
        Dual::new(re, (self.eps - re * o.eps) / o.re)
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.eps)
    }
}

impl AddAssign for Dual {
    #[inline]
    fn add_assign(&mut self, o: Dual) {
        self.re += o.re;
        self.eps += o.eps;
    }
}

impl SubAssign for Dual {
    #[inline]
    fn sub_assign(&mut self, o: Dual) {
        self.re -= o.re;
        self.eps -= o.eps;
    }
}

impl MulAssign for Dual {
    #[inline]
    fn mul_assign(&mut self, o: Dual) {
        *self = *self * o;
    }
}

impl Scalar for Dual {
    #[inline]
    fn from_f64(v: f64) -> Self {
        Dual::new(v, 0.0)
    }
    #[inline]
    fn value(self) -> f64 {
        self.re
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, e * self.eps)
    }
    #[inline]
    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.eps / self.re)
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual::new(t, (1.0 - t * t) * self.eps)
    }

    // (A + εA')(B + εB') = AB + ε(A'B + AB'), three real products.
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Dual],
        a_t: bool,
        b: &[Dual],
        b_t: bool,
        c: &mut [Dual],
        accumulate: bool,
    ) {
        let a = &a[..m * k];
        let b = &b[..k * n];
        let (a_re, a_eps): (Vec<f64>, Vec<f64>) = a.iter().map(|d| (d.re, d.eps)).unzip();
        let (b_re, b_eps): (Vec<f64>, Vec<f64>) = b.iter().map(|d| (d.re, d.eps)).unzip();
        let mut re = vec![0.0; m * n];
        let mut eps = vec![0.0; m * n];
        dgemm(m, k, n, &a_re, a_t, &b_re, b_t, &mut re, 0.0);
        if a_eps.iter().any(|&v| v != 0.0) {
            dgemm(m, k, n, &a_eps, a_t, &b_re, b_t, &mut eps, 1.0);
        }
        if b_eps.iter().any(|&v| v != 0.0) {
            dgemm(m, k, n, &a_re, a_t, &b_eps, b_t, &mut eps, 1.0);
        }
        let out = &mut c[..m * n];
        if accumulate {
            for ((o, r), e) in out.iter_mut().zip(re).zip(eps) {
                o.re += r;
                o.eps += e;
            }
        } else {
            for ((o, r), e) in out.iter_mut().zip(re).zip(eps) {
                *o = Dual::new(r, e);
            }
        }
    }
}

/// Logistic sigmoid, evaluated on the stable branch for the primal sign.
#[inline]
pub fn sigmoid<S: Scalar>(z: S) -> S {
    let one = S::from_f64(1.0);
    if z.value() >= 0.0 {
        one / (one + (-z).exp())
    } else {
        let e = z.exp();
        e / (one + e)
    }
}
