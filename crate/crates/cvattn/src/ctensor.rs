//! Dense complex tensors stored as split real/imaginary arrays, plus the
//! plain numeric kernels (matmul, hermitian transpose, row softmax, abs/sgn,
//! 2x2 SPD square roots, 1-d convolution) that the differentiable layers and
//! the property suites build on.
//!
//! Split storage keeps the real part, imaginary part and magnitude views
//! copy-free, which every attention variant consumes.

use crate::error::{CvError, Result};
use crate::scalar::Scalar;

/// Dense complex tensor: row-major data, `re` and `im` of equal length.
#[derive(Clone, Debug, PartialEq)]
pub struct CTensor<T> {
    shape: Vec<usize>,
    re: Vec<T>,
    im: Vec<T>,
}

impl<T: Scalar> CTensor<T> {
    pub fn new(shape: &[usize], re: Vec<T>, im: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if re.len() != numel || im.len() != numel {
            return Err(CvError::ShapeMismatch {
                context: "CTensor::new",
                expected: format!("{numel} elements for shape {shape:?}"),
                got: format!("re {} / im {}", re.len(), im.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            re,
            im,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            re: vec![T::zero(); numel],
            im: vec![T::zero(); numel],
        }
    }

    /// Real-valued tensor (imaginary part all zero).
    pub fn from_re(shape: &[usize], re: Vec<T>) -> Result<Self> {
        let im = vec![T::zero(); re.len()];
        Self::new(shape, re, im)
    }

    /// Build from (re, im) pairs in row-major order.
    pub fn from_pairs(shape: &[usize], pairs: &[(f64, f64)]) -> Result<Self> {
        let re = pairs.iter().map(|p| T::from_f64(p.0)).collect();
        let im = pairs.iter().map(|p| T::from_f64(p.1)).collect();
        Self::new(shape, re, im)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.re[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    /// Row count of a 2-d tensor. Panics on other ranks (programming error).
    pub fn rows(&self) -> usize {
        assert_eq!(self.ndim(), 2, "rows() needs a 2-d tensor, got {:?}", self.shape);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.ndim(), 2, "cols() needs a 2-d tensor, got {:?}", self.shape);
        self.shape[1]
    }

    pub fn re(&self) -> &[T] {
        &self.re
    }

    pub fn im(&self) -> &[T] {
        &self.im
    }

    pub fn re_mut(&mut self) -> &mut [T] {
        &mut self.re
    }

    pub fn im_mut(&mut self) -> &mut [T] {
        &mut self.im
    }

    /// Simultaneous mutable views of both components.
    pub fn components_mut(&mut self) -> (&mut [T], &mut [T]) {
        (&mut self.re, &mut self.im)
    }

    /// (re, im) at flat index.
    pub fn at(&self, idx: usize) -> (T, T) {
        (self.re[idx], self.im[idx])
    }

    /// (re, im) at (row, col) of a 2-d tensor.
    pub fn at2(&self, i: usize, j: usize) -> (T, T) {
        let idx = i * self.cols() + j;
        (self.re[idx], self.im[idx])
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.len() {
            return Err(CvError::ShapeMismatch {
                context: "CTensor::reshaped",
                expected: format!("{} elements", self.len()),
                got: format!("shape {shape:?}"),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "CTensor::add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "CTensor::sub", |a, b| a - b)
    }

    fn zip_with(&self, other: &Self, context: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(CvError::ShapeMismatch {
                context,
                expected: format!("{:?}", self.shape),
                got: format!("{:?}", other.shape),
            });
        }
        let re = self.re.iter().zip(&other.re).map(|(&a, &b)| f(a, b)).collect();
        let im = self.im.iter().zip(&other.im).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self {
            shape: self.shape.clone(),
            re,
            im,
        })
    }

    pub fn neg(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            re: self.re.iter().map(|&v| -v).collect(),
            im: self.im.iter().map(|&v| -v).collect(),
        }
    }

    /// Multiply by a real scalar.
    pub fn scale(&self, s: T) -> Self {
        Self {
            shape: self.shape.clone(),
            re: self.re.iter().map(|&v| v * s).collect(),
            im: self.im.iter().map(|&v| v * s).collect(),
        }
    }

    /// Elementwise complex product.
    pub fn mul_elem(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(CvError::ShapeMismatch {
                context: "CTensor::mul_elem",
                expected: format!("{:?}", self.shape),
                got: format!("{:?}", other.shape),
            });
        }
        let n = self.len();
        let mut re = Vec::with_capacity(n);
        let mut im = Vec::with_capacity(n);
        for i in 0..n {
            re.push(self.re[i] * other.re[i] - self.im[i] * other.im[i]);
            im.push(self.re[i] * other.im[i] + self.im[i] * other.re[i]);
        }
        Ok(Self {
            shape: self.shape.clone(),
            re,
            im,
        })
    }

    pub fn conj(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            re: self.re.clone(),
            im: self.im.iter().map(|&v| -v).collect(),
        }
    }

    /// Transpose of a 2-d tensor (no conjugation).
    pub fn transpose(&self) -> Self {
        let (n, m) = (self.rows(), self.cols());
        let mut out = Self::zeros(&[m, n]);
        for i in 0..n {
            for j in 0..m {
                out.re[j * n + i] = self.re[i * m + j];
                out.im[j * n + i] = self.im[i * m + j];
            }
        }
        out
    }

    /// Conjugate transpose of a 2-d tensor.
    pub fn hermitian(&self) -> Self {
        let (n, m) = (self.rows(), self.cols());
        let mut out = Self::zeros(&[m, n]);
        for i in 0..n {
            for j in 0..m {
                out.re[j * n + i] = self.re[i * m + j];
                out.im[j * n + i] = -self.im[i * m + j];
            }
        }
        out
    }

    /// Elementwise magnitude, as a real-valued tensor.
    pub fn cabs(&self) -> Self {
        let re = self
            .re
            .iter()
            .zip(&self.im)
            .map(|(&r, &i)| (r * r + i * i).sqrt())
            .collect();
        Self {
            shape: self.shape.clone(),
            re,
            im: vec![T::zero(); self.len()],
        }
    }

    /// Elementwise z/|z|, with 0 mapping to 1.
    pub fn csgn(&self) -> Self {
        let n = self.len();
        let mut re = Vec::with_capacity(n);
        let mut im = Vec::with_capacity(n);
        let drift = if csgn_mutation_enabled() {
            T::from_f64(1e-3)
        } else {
            T::zero()
        };
        for i in 0..n {
            let (r, m) = csgn_scalar(self.re[i], self.im[i]);
            re.push(r + drift);
            im.push(m);
        }
        Self {
            shape: self.shape.clone(),
            re,
            im,
        }
    }

    /// Elementwise multiplication by exp(i*alpha).
    pub fn rotate(&self, alpha: T) -> Self {
        let (c, s) = (alpha.cos(), alpha.sin());
        let n = self.len();
        let mut re = Vec::with_capacity(n);
        let mut im = Vec::with_capacity(n);
        for i in 0..n {
            re.push(self.re[i] * c - self.im[i] * s);
            im.push(self.re[i] * s + self.im[i] * c);
        }
        Self {
            shape: self.shape.clone(),
            re,
            im,
        }
    }

    /// Largest |delta| over both components against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        let mut worst = T::zero();
        for i in 0..self.len() {
            worst = worst.max((self.re[i] - other.re[i]).abs());
            worst = worst.max((self.im[i] - other.im[i]).abs());
        }
        worst
    }

    pub fn max_abs(&self) -> T {
        let mut worst = T::zero();
        for i in 0..self.len() {
            worst = worst.max(self.re[i].abs()).max(self.im[i].abs());
        }
        worst
    }

    pub fn max_abs_im(&self) -> T {
        self.im.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn validate_finite(&self, context: &'static str) -> Result<()> {
        for i in 0..self.len() {
            if !self.re[i].is_finite() || !self.im[i].is_finite() {
                return Err(CvError::InvalidArgument(format!(
                    "{context}: non-finite entry at flat index {i}"
                )));
            }
        }
        Ok(())
    }

    /// Convert element type, e.g. for moving a canonical f64 dataset to f32.
    pub fn cast<U: Scalar>(&self) -> CTensor<U> {
        CTensor {
            shape: self.shape.clone(),
            re: self.re.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
            im: self.im.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Mutation hook for the verification suite: while enabled, `csgn` drifts off
/// the unit circle by 1e-3 on the real component. The invariant checks must
/// notice; a suite that still passes under this fault would prove nothing.
static CSGN_MUTATION: std::sync::atomic::AtomicBool = std::sync::atomic::AtomicBool::new(false);

pub fn set_csgn_mutation(enabled: bool) {
    CSGN_MUTATION.store(enabled, std::sync::atomic::Ordering::SeqCst);
}

fn csgn_mutation_enabled() -> bool {
    CSGN_MUTATION.load(std::sync::atomic::Ordering::Relaxed)
}

pub(crate) fn csgn_scalar<T: Scalar>(re: T, im: T) -> (T, T) {
    let mag = (re * re + im * im).sqrt();
    if mag == T::zero() {
        (T::one(), T::zero())
    } else {
        (re / mag, im / mag)
    }
}

/// C += A * B over real arrays, row-major, ikj order.
fn gemm_acc<T: Scalar>(n: usize, k: usize, m: usize, a: &[T], b: &[T], c: &mut [T], sign: T) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * m..(i + 1) * m];
        for (kk, &aik) in arow.iter().enumerate() {
            let f = aik * sign;
            if f == T::zero() {
                continue;
            }
            let brow = &b[kk * m..(kk + 1) * m];
            for j in 0..m {
                crow[j] = crow[j] + f * brow[j];
            }
        }
    }
}

/// Complex matrix product C = A * B with the split multiplication rule:
/// C_re = A_re B_re - A_im B_im, C_im = A_re B_im + A_im B_re.
pub fn cmatmul<T: Scalar>(a: &CTensor<T>, b: &CTensor<T>) -> Result<CTensor<T>> {
    if a.ndim() != 2 || b.ndim() != 2 {
        return Err(CvError::InvalidArgument(format!(
            "cmatmul needs 2-d operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (n, ka) = (a.shape[0], a.shape[1]);
    let (kb, m) = (b.shape[0], b.shape[1]);
    if ka != kb {
        return Err(CvError::ShapeMismatch {
            context: "cmatmul",
            expected: format!("inner dim {ka}"),
            got: format!("inner dim {kb}"),
        });
    }
    let mut out = CTensor::zeros(&[n, m]);
    gemm_acc(n, ka, m, &a.re, &b.re, &mut out.re, T::one());
    gemm_acc(n, ka, m, &a.im, &b.im, &mut out.re, -T::one());
    gemm_acc(n, ka, m, &a.re, &b.im, &mut out.im, T::one());
    gemm_acc(n, ka, m, &a.im, &b.re, &mut out.im, T::one());
    Ok(out)
}

/// Row-wise softmax of a real-valued 2-d tensor.
///
/// Stabilized by row-max subtraction; entries equal to -inf map to exactly 0.
/// A row with no finite entry is an error (mask construction forbids it).
pub fn softmax_rows<T: Scalar>(x: &CTensor<T>) -> Result<CTensor<T>> {
    let (n, m) = (x.rows(), x.cols());
    debug_assert!(x.max_abs_im() == T::zero(), "softmax_rows expects a real tensor");
    let mut out = CTensor::zeros(&[n, m]);
    for i in 0..n {
        let row = &x.re[i * m..(i + 1) * m];
        let mut mx = T::neg_infinity();
        for &v in row {
            if v > mx {
                mx = v;
            }
        }
        if mx == T::neg_infinity() {
            return Err(CvError::FullyMaskedRow { row: i });
        }
        let orow = &mut out.re[i * m..(i + 1) * m];
        let mut sum = T::zero();
        for j in 0..m {
            // exp(-inf - mx) = 0 exactly, so masked entries carry no weight
            let e = (row[j] - mx).exp();
            orow[j] = e;
            sum = sum + e;
        }
        for v in orow.iter_mut() {
            *v = *v / sum;
        }
    }
    Ok(out)
}

/// Symmetric positive definite 2x2 matrix [[a, b], [b, c]].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spd2<T> {
    pub a: T,
    pub b: T,
    pub c: T,
}

impl<T: Scalar> Spd2<T> {
    /// Validates a > 0, c > 0, b^2 < a*c.
    pub fn new(a: T, b: T, c: T) -> Result<Self> {
        if !(a > T::zero() && c > T::zero() && b * b < a * c) {
            return Err(CvError::NotPositiveDefinite {
                a: a.to_f64(),
                b: b.to_f64(),
                c: c.to_f64(),
            });
        }
        Ok(Self { a, b, c })
    }

    pub fn identity() -> Self {
        Self {
            a: T::one(),
            b: T::zero(),
            c: T::one(),
        }
    }

    pub fn det(&self) -> T {
        self.a * self.c - self.b * self.b
    }

    pub fn trace(&self) -> T {
        self.a + self.c
    }

    /// Matrix square root via the closed form (M + s*I)/t with
    /// s = sqrt(det M), t = sqrt(trace M + 2s).
    pub fn sqrt(&self) -> Spd2<T> {
        let s = self.det().sqrt();
        let t = (self.trace() + (s + s)).sqrt();
        Spd2 {
            a: (self.a + s) / t,
            b: self.b / t,
            c: (self.c + s) / t,
        }
    }

    /// Closed-form 2x2 inverse (adjugate over determinant).
    pub fn inv(&self) -> Spd2<T> {
        let d = self.det();
        Spd2 {
            a: self.c / d,
            b: -self.b / d,
            c: self.a / d,
        }
    }

    /// Inverse square root: the closed-form inverse of `sqrt()`.
    pub fn inv_sqrt(&self) -> Spd2<T> {
        self.sqrt().inv()
    }

    /// Full 2x2 product with another symmetric matrix, row-major [m11, m12, m21, m22].
    pub fn mul_full(&self, other: &Spd2<T>) -> [T; 4] {
        [
            self.a * other.a + self.b * other.b,
            self.a * other.b + self.b * other.c,
            self.b * other.a + self.c * other.b,
            self.b * other.b + self.c * other.c,
        ]
    }

    /// Square root together with the 3x3 Jacobian
    /// d(out.a, out.b, out.c)/d(a, b, c).
    pub fn sqrt_jacobian(&self) -> (Spd2<T>, [[T; 3]; 3]) {
        let (a, b, c) = (self.a, self.b, self.c);
        let s = self.det().sqrt();
        let t = (self.trace() + (s + s)).sqrt();
        let two = T::from_f64(2.0);
        // ds/d(a,b,c)
        let ds = [c / (two * s), -b / s, a / (two * s)];
        // dt/d(a,b,c); d(trace)/da = 1, /db = 0, /dc = 1
        let dtr = [T::one(), T::zero(), T::one()];
        let mut dt = [T::zero(); 3];
        for k in 0..3 {
            dt[k] = (dtr[k] + two * ds[k]) / (two * t);
        }
        let t2 = t * t;
        let mut jac = [[T::zero(); 3]; 3];
        // out.a = (a + s)/t
        for k in 0..3 {
            let dnum = if k == 0 { T::one() + ds[k] } else { ds[k] };
            jac[0][k] = (dnum * t - (a + s) * dt[k]) / t2;
        }
        // out.b = b/t
        for k in 0..3 {
            let dnum = if k == 1 { T::one() } else { T::zero() };
            jac[1][k] = (dnum * t - b * dt[k]) / t2;
        }
        // out.c = (c + s)/t
        for k in 0..3 {
            let dnum = if k == 2 { T::one() + ds[k] } else { ds[k] };
            jac[2][k] = (dnum * t - (c + s) * dt[k]) / t2;
        }
        (
            Spd2 {
                a: (a + s) / t,
                b: b / t,
                c: (c + s) / t,
            },
            jac,
        )
    }

    /// Inverse square root together with its 3x3 Jacobian, by chaining the
    /// adjugate-inverse Jacobian through `sqrt_jacobian`.
    pub fn inv_sqrt_jacobian(&self) -> (Spd2<T>, [[T; 3]; 3]) {
        let (r, jr) = self.sqrt_jacobian();
        let (p, q, w) = (r.a, r.b, r.c);
        let d = r.det();
        let d2 = d * d;
        let two = T::from_f64(2.0);
        // inv = (w, -q, p)/d with d = p*w - q^2
        let ji = [
            [-(w * w) / d2, two * q * w / d2, -(q * q) / d2],
            [q * w / d2, (-d - two * q * q) / d2, q * p / d2],
            [-(q * q) / d2, two * p * q / d2, -(p * p) / d2],
        ];
        let mut jac = [[T::zero(); 3]; 3];
        for i in 0..3 {
            for k in 0..3 {
                let mut acc = T::zero();
                for l in 0..3 {
                    acc = acc + ji[i][l] * jr[l][k];
                }
                jac[i][k] = acc;
            }
        }
        (r.inv(), jac)
    }
}

/// Geometry of a 1-d convolution along the sequence axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub ch_in: usize,
    pub ch_out: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_len(&self, seq: usize) -> Result<usize> {
        if self.stride == 0 || self.kernel == 0 {
            return Err(CvError::InvalidArgument(
                "conv1d stride and kernel must be positive".into(),
            ));
        }
        let padded = seq + 2 * self.padding;
        if padded < self.kernel {
            return Err(CvError::InvalidArgument(format!(
                "conv1d kernel {} exceeds padded length {padded}",
                self.kernel
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }
}

/// Complex cross-correlation: x is seq x ch_in, w is [kernel, ch_in, ch_out]
/// flattened row-major, output is out_len x ch_out.
pub fn conv1d<T: Scalar>(x: &CTensor<T>, w: &CTensor<T>, geom: &ConvGeom) -> Result<CTensor<T>> {
    let seq = x.rows();
    if x.cols() != geom.ch_in {
        return Err(CvError::ShapeMismatch {
            context: "conv1d input channels",
            expected: format!("{}", geom.ch_in),
            got: format!("{}", x.cols()),
        });
    }
    if w.len() != geom.kernel * geom.ch_in * geom.ch_out {
        return Err(CvError::ShapeMismatch {
            context: "conv1d kernel",
            expected: format!("{} weights", geom.kernel * geom.ch_in * geom.ch_out),
            got: format!("{}", w.len()),
        });
    }
    let out_len = geom.out_len(seq)?;
    let (ci, co) = (geom.ch_in, geom.ch_out);
    let mut out = CTensor::zeros(&[out_len, co]);
    for t in 0..out_len {
        let orow_base = t * co;
        for dt in 0..geom.kernel {
            let src = (t * geom.stride + dt) as isize - geom.padding as isize;
            if src < 0 || src as usize >= seq {
                continue;
            }
            let xbase = src as usize * ci;
            let wbase = dt * ci * co;
            for c_in in 0..ci {
                let xr = x.re[xbase + c_in];
                let xi = x.im[xbase + c_in];
                let wrow = wbase + c_in * co;
                for c_out in 0..co {
                    let wr = w.re[wrow + c_out];
                    let wi = w.im[wrow + c_out];
                    out.re[orow_base + c_out] = out.re[orow_base + c_out] + xr * wr - xi * wi;
                    out.im[orow_base + c_out] = out.im[orow_base + c_out] + xr * wi + xi * wr;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `conv1d` for the real-composite convention:
/// per scalar contribution y += x*w, dx += g*conj(w) and dw += g*conj(x).
pub fn conv1d_backward<T: Scalar>(
    x: &CTensor<T>,
    w: &CTensor<T>,
    geom: &ConvGeom,
    grad_out: &CTensor<T>,
) -> (CTensor<T>, CTensor<T>) {
    let seq = x.rows();
    let (ci, co) = (geom.ch_in, geom.ch_out);
    let out_len = grad_out.rows();
    let mut gx = CTensor::zeros(&[seq, ci]);
    let mut gw = CTensor::zeros(&[geom.kernel, ci * co]);
    for t in 0..out_len {
        let orow_base = t * co;
        for dt in 0..geom.kernel {
            let src = (t * geom.stride + dt) as isize - geom.padding as isize;
            if src < 0 || src as usize >= seq {
                continue;
            }
            let xbase = src as usize * ci;
            let wbase = dt * ci * co;
            for c_in in 0..ci {
                let xr = x.re[xbase + c_in];
                let xi = x.im[xbase + c_in];
                let wrow = wbase + c_in * co;
                let mut acc_xr = T::zero();
                let mut acc_xi = T::zero();
                for c_out in 0..co {
                    let gr = grad_out.re[orow_base + c_out];
                    let gi = grad_out.im[orow_base + c_out];
                    let wr = w.re[wrow + c_out];
                    let wi = w.im[wrow + c_out];
                    acc_xr = acc_xr + gr * wr + gi * wi;
                    acc_xi = acc_xi - gr * wi + gi * wr;
                    gw.re[wrow + c_out] = gw.re[wrow + c_out] + gr * xr + gi * xi;
                    gw.im[wrow + c_out] = gw.im[wrow + c_out] - gr * xi + gi * xr;
                }
                gx.re[xbase + c_in] = gx.re[xbase + c_in] + acc_xr;
                gx.im[xbase + c_in] = gx.im[xbase + c_in] + acc_xi;
            }
        }
    }
    (gx, gw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng) -> f64 {
        // Box-Muller
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub(crate) fn random_ct(rng: &mut ChaCha8Rng, shape: &[usize]) -> CTensor<f64> {
        let n: usize = shape.iter().product();
        let re = (0..n).map(|_| randn(rng)).collect();
        let im = (0..n).map(|_| randn(rng)).collect();
        CTensor::new(shape, re, im).unwrap()
    }

    #[test]
    fn cmatmul_i_times_i() {
        let a = CTensor::<f64>::from_pairs(&[1, 1], &[(0.0, 1.0)]).unwrap();
        let c = cmatmul(&a, &a).unwrap();
        assert_eq!(c.at2(0, 0), (-1.0, 0.0));
    }

    #[test]
    fn cmatmul_conjugate_pair() {
        let a = CTensor::<f64>::from_pairs(&[1, 1], &[(1.0, 1.0)]).unwrap();
        let b = CTensor::<f64>::from_pairs(&[1, 1], &[(1.0, -1.0)]).unwrap();
        let c = cmatmul(&a, &b).unwrap();
        assert_eq!(c.at2(0, 0), (2.0, 0.0));
    }

    #[test]
    fn cmatmul_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_ct(&mut rng, &[3, 3]);
        let c = cmatmul(&a, &CTensor::eye(3)).unwrap();
        assert!(c.max_abs_diff(&a) == 0.0);
    }

    #[test]
    fn cmatmul_shape_mismatch() {
        let a = CTensor::<f64>::zeros(&[2, 3]);
        let b = CTensor::<f64>::zeros(&[2, 2]);
        assert!(matches!(cmatmul(&a, &b), Err(CvError::ShapeMismatch { .. })));
    }

    #[test]
    fn hermitian_examples() {
        let a = CTensor::<f64>::from_pairs(&[1, 1], &[(0.0, 1.0)]).unwrap();
        assert_eq!(a.hermitian().at2(0, 0), (0.0, -1.0));

        let b = CTensor::<f64>::from_pairs(&[1, 2], &[(1.0, 2.0), (3.0, 0.0)]).unwrap();
        let bh = b.hermitian();
        assert_eq!(bh.shape(), &[2, 1]);
        assert_eq!(bh.at2(0, 0), (1.0, -2.0));
        assert_eq!(bh.at2(1, 0), (3.0, 0.0));
    }

    #[test]
    fn softmax_uniform_and_analytic() {
        let x = CTensor::<f64>::from_re(&[1, 2], vec![0.0, 0.0]).unwrap();
        let y = softmax_rows(&x).unwrap();
        assert_eq!(y.re(), &[0.5, 0.5]);

        let x = CTensor::<f64>::from_re(&[1, 2], vec![2.0f64.ln(), 0.0]).unwrap();
        let y = softmax_rows(&x).unwrap();
        assert!((y.re()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((y.re()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_masked_entry_exact_zero() {
        let x = CTensor::<f64>::from_re(&[1, 2], vec![f64::NEG_INFINITY, 0.0]).unwrap();
        let y = softmax_rows(&x).unwrap();
        assert_eq!(y.re(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let x = CTensor::<f64>::from_re(&[1, 2], vec![f64::NEG_INFINITY; 2]).unwrap();
        assert!(matches!(
            softmax_rows(&x),
            Err(CvError::FullyMaskedRow { row: 0 })
        ));
    }

    #[test]
    fn softmax_rows_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let mut x = random_ct(&mut rng, &[4, 6]);
            for v in x.im_mut() {
                *v = 0.0;
            }
            let y = softmax_rows(&x).unwrap();
            for i in 0..4 {
                let s: f64 = y.re()[i * 6..(i + 1) * 6].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(y.re()[i * 6..(i + 1) * 6].iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn csgn_345_triangle() {
        let z = CTensor::<f64>::from_pairs(&[1], &[(3.0, 4.0)]).unwrap();
        let s = z.csgn();
        assert!((s.re()[0] - 0.6).abs() < 1e-15);
        assert!((s.im()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn csgn_zero_is_one() {
        let z = CTensor::<f64>::zeros(&[1]);
        let s = z.csgn();
        assert_eq!(s.at(0), (1.0, 0.0));
    }

    #[test]
    fn csgn_unit_modulus() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random_ct(&mut rng, &[64]);
        let mags = z.csgn().cabs();
        for &m in mags.re() {
            assert!((m - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn spd2_sqrt_diagonal_and_identity() {
        let m = Spd2::<f64>::new(4.0, 0.0, 9.0).unwrap();
        let r = m.sqrt();
        assert_eq!((r.a, r.b, r.c), (2.0, 0.0, 3.0));

        let i = Spd2::<f64>::identity();
        let r = i.sqrt();
        assert!((r.a - 1.0).abs() < 1e-15 && r.b.abs() < 1e-15 && (r.c - 1.0).abs() < 1e-15);
    }

    #[test]
    fn spd2_sqrt_squares_back() {
        // oracle: direct 2x2 matrix multiplication of the computed root
        let m = Spd2::<f64>::new(2.0, 1.0, 2.0).unwrap();
        let r = m.sqrt();
        let sq = r.mul_full(&r);
        assert!((sq[0] - 2.0).abs() < 1e-10);
        assert!((sq[1] - 1.0).abs() < 1e-10);
        assert!((sq[2] - 1.0).abs() < 1e-10);
        assert!((sq[3] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn spd2_inv_sqrt_times_sqrt_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            // random eigenvalues log-uniform in [1e-4, 1e4], random rotation
            let l1 = 10f64.powf(rng.gen_range(-4.0..4.0));
            let l2 = 10f64.powf(rng.gen_range(-4.0..4.0));
            let th: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let (ct, st) = (th.cos(), th.sin());
            let a = ct * ct * l1 + st * st * l2;
            let c = st * st * l1 + ct * ct * l2;
            let b = ct * st * (l1 - l2);
            let m = Spd2::new(a, b, c).unwrap();
            let p = m.inv_sqrt().mul_full(&m.sqrt());
            assert!((p[0] - 1.0).abs() < 1e-10, "m11 {} for {m:?}", p[0]);
            assert!(p[1].abs() < 1e-10);
            assert!(p[2].abs() < 1e-10);
            assert!((p[3] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn spd2_rejects_non_pd() {
        assert!(Spd2::<f64>::new(1.0, 2.0, 1.0).is_err());
        assert!(Spd2::<f64>::new(-1.0, 0.0, 1.0).is_err());
        assert!(Spd2::<f64>::new(1.0, 1.0, 1.0).is_err()); // b^2 == ac is not PD
    }

    #[test]
    fn spd2_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let h = 1e-6;
        for _ in 0..20 {
            let a: f64 = rng.gen_range(0.5..3.0);
            let c: f64 = rng.gen_range(0.5..3.0);
            let b: f64 = rng.gen_range(-0.4..0.4) * (a * c).sqrt();
            let m = Spd2::new(a, b, c).unwrap();
            for (which, (_, jac)) in [m.sqrt_jacobian(), m.inv_sqrt_jacobian()]
                .into_iter()
                .enumerate()
            {
                for k in 0..3 {
                    let mut lo = [a, b, c];
                    let mut hi = [a, b, c];
                    lo[k] -= h;
                    hi[k] += h;
                    let at = |v: [f64; 3]| {
                        let s = Spd2::new(v[0], v[1], v[2]).unwrap();
                        let r = if which == 0 { s.sqrt() } else { s.inv_sqrt() };
                        [r.a, r.b, r.c]
                    };
                    let flo = at(lo);
                    let fhi = at(hi);
                    for i in 0..3 {
                        let fd = (fhi[i] - flo[i]) / (2.0 * h);
                        let err = (jac[i][k] - fd).abs() / fd.abs().max(jac[i][k].abs()).max(1.0);
                        assert!(err < 1e-7, "jac[{i}][{k}] {} vs fd {fd}", jac[i][k]);
                    }
                }
            }
        }
    }

    #[test]
    fn conv1d_kernel_one_identity_and_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_ct(&mut rng, &[6, 1]);
        let geom = ConvGeom {
            kernel: 1,
            ch_in: 1,
            ch_out: 1,
            stride: 1,
            padding: 0,
        };
        let w1 = CTensor::<f64>::from_pairs(&[1, 1], &[(1.0, 0.0)]).unwrap();
        assert!(conv1d(&x, &w1, &geom).unwrap().max_abs_diff(&x) == 0.0);

        let wi = CTensor::<f64>::from_pairs(&[1, 1], &[(0.0, 1.0)]).unwrap();
        let y = conv1d(&x, &wi, &geom).unwrap();
        let rotated = x.rotate(std::f64::consts::FRAC_PI_2);
        assert!(y.max_abs_diff(&rotated) < 1e-15);
    }

    #[test]
    fn conv1d_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let geom = ConvGeom {
            kernel: 3,
            ch_in: 2,
            ch_out: 4,
            stride: 2,
            padding: 1,
        };
        let seq = 7;
        let x = random_ct(&mut rng, &[seq, 2]);
        let w = random_ct(&mut rng, &[3, 8]);
        let y = conv1d(&x, &w, &geom).unwrap();
        let out_len = geom.out_len(seq).unwrap();
        assert_eq!(y.shape(), &[out_len, 4]);
        for t in 0..out_len {
            for co in 0..4 {
                let mut acc_r = 0.0;
                let mut acc_i = 0.0;
                for dt in 0..3 {
                    let src = (t * 2 + dt) as isize - 1;
                    if src < 0 || src >= seq as isize {
                        continue;
                    }
                    for ci in 0..2 {
                        let (xr, xi) = x.at2(src as usize, ci);
                        let widx = (dt * 2 + ci) * 4 + co;
                        let (wr, wi) = (w.re()[widx], w.im()[widx]);
                        acc_r += xr * wr - xi * wi;
                        acc_i += xr * wi + xi * wr;
                    }
                }
                let (yr, yi) = y.at2(t, co);
                assert!((yr - acc_r).abs() < 1e-12);
                assert!((yi - acc_i).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hermitian_reverses_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let a = random_ct(&mut rng, &[3, 4]);
            let b = random_ct(&mut rng, &[4, 2]);
            let lhs = cmatmul(&a, &b).unwrap().hermitian();
            let rhs = cmatmul(&b.hermitian(), &a.hermitian()).unwrap();
            assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        }
    }
}
