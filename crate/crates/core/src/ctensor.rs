//! Complex tensors stored as split real/imaginary planes, plus the forward DFT.
//!
//! A [`ComplexTensor`] whose imaginary plane is absent is *purely real*: the
//! imaginary part is identically zero and is never materialized. The real-valued
//! network path uses this to avoid carrying dead zeros through every layer.

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_complex::Complex;
use num_traits::{Float, FloatConst};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn width(self) -> usize {
        match self {
            Precision::Single => 4,
            Precision::Double => 8,
        }
    }
}

/// Floating-point element type of every tensor in the crate.
pub trait Real:
    Float + FloatConst + Default + Debug + Send + Sync + AddAssign + SubAssign + MulAssign + 'static
{
    const PRECISION: Precision;

    /// `c <- alpha * op(a) * op(b) + beta * c` on row-major contiguous matrices,
    /// where `op(a)` is `m x k` and `op(b)` is `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn c(v: f64) -> Self {
        Self::from(v).expect("f64 constant representable")
    }
}

fn gemm_strides(trans: bool, rows: usize, cols: usize) -> (isize, isize) {
    // op(x) is rows x cols; stored matrix is rows x cols (no trans) or cols x rows
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $prec:expr, $gemm:path) => {
        impl Real for $t {
            const PRECISION: Precision = $prec;

            fn gemm(
                trans_a: bool,
                trans_b: bool,
                m: usize,
                n: usize,
                k: usize,
                alpha: Self,
                a: &[Self],
                b: &[Self],
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k, "gemm: lhs too short");
                assert!(b.len() >= k * n, "gemm: rhs too short");
                assert!(c.len() >= m * n, "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = gemm_strides(trans_a, m, k);
                let (rsb, csb) = gemm_strides(trans_b, k, n);
                // SAFETY: lengths checked above; strides describe dense row-major
                // storage of exactly m*k, k*n and m*n elements.
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
                        n as isize,
                        1,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }
        }
    };
}

impl_real!(f32, Precision::Single, matrixmultiply::sgemm);
impl_real!(f64, Precision::Double, matrixmultiply::dgemm);

/// N-dimensional complex array in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTensor<T> {
    pub(crate) shape: Vec<usize>,
    pub(crate) re: Vec<T>,
    pub(crate) im: Option<Vec<T>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> ComplexTensor<T> {
    pub fn new(shape: Vec<usize>, re: Vec<T>, im: Vec<T>) -> Result<Self> {
        let n = numel(&shape);
        if re.len() != n || im.len() != n {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} values, got re={} im={}",
                re.len(),
                im.len()
            )));
        }
        Ok(Self { shape, re, im: Some(im) })
    }

    /// Tensor with an identically zero imaginary part.
    pub fn from_real(shape: Vec<usize>, re: Vec<T>) -> Result<Self> {
        let n = numel(&shape);
        if re.len() != n {
            return Err(Error::shape(format!("shape {shape:?} needs {n} values, got {}", re.len())));
        }
        Ok(Self { shape, re, im: None })
    }

    pub fn from_complex(shape: Vec<usize>, values: &[Complex<T>]) -> Result<Self> {
        let re = values.iter().map(|z| z.re).collect();
        let im = values.iter().map(|z| z.im).collect();
        Self::new(shape, re, im)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self { shape, re: vec![T::zero(); n], im: Some(vec![T::zero(); n]) }
    }

    pub fn real_zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self { shape, re: vec![T::zero(); n], im: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    pub fn is_real(&self) -> bool {
        self.im.is_none()
    }

    pub fn re(&self) -> &[T] {
        &self.re
    }

    /// Imaginary plane, or `None` for a purely real tensor.
    pub fn im(&self) -> Option<&[T]> {
        self.im.as_deref()
    }

    pub fn re_mut(&mut self) -> &mut [T] {
        &mut self.re
    }

    pub fn im_mut(&mut self) -> Option<&mut [T]> {
        self.im.as_deref_mut()
    }

    pub fn get(&self, idx: usize) -> Complex<T> {
        Complex::new(self.re[idx], self.im.as_ref().map_or(T::zero(), |im| im[idx]))
    }

    pub fn to_vec(&self) -> Vec<Complex<T>> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }

    /// Imaginary plane materialized as zeros when absent.
    pub fn im_or_zeros(&self) -> std::borrow::Cow<'_, [T]> {
        match &self.im {
            Some(im) => std::borrow::Cow::Borrowed(im),
            None => std::borrow::Cow::Owned(vec![T::zero(); self.re.len()]),
        }
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<T>, Option<Vec<T>>) {
        (self.shape, self.re, self.im)
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if numel(&shape) != self.len() {
            return Err(Error::shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.re.iter().all(|v| v.is_finite())
            && self.im.as_ref().map_or(true, |im| im.iter().all(|v| v.is_finite()))
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        let re = self.re.iter().zip(&other.re).map(|(&a, &b)| a + b).collect();
        let im = match (&self.im, &other.im) {
            (None, None) => None,
            (Some(a), None) | (None, Some(a)) => Some(a.clone()),
            (Some(a), Some(b)) => Some(a.iter().zip(b).map(|(&a, &b)| a + b).collect()),
        };
        Ok(Self { shape: self.shape.clone(), re, im })
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        if self.is_real() && other.is_real() {
            let re = self.re.iter().zip(&other.re).map(|(&a, &b)| a * b).collect();
            return Ok(Self { shape: self.shape.clone(), re, im: None });
        }
        let (ai, bi) = (self.im_or_zeros(), other.im_or_zeros());
        let n = self.len();
        let mut re = Vec::with_capacity(n);
        let mut im = Vec::with_capacity(n);
        for i in 0..n {
            let (ar, br) = (self.re[i], other.re[i]);
            re.push(ar * br - ai[i] * bi[i]);
            im.push(ar * bi[i] + ai[i] * br);
        }
        Ok(Self { shape: self.shape.clone(), re, im: Some(im) })
    }

    pub fn scale(&self, s: Complex<T>) -> Self {
        if self.is_real() && s.im == T::zero() {
            let re = self.re.iter().map(|&a| a * s.re).collect();
            return Self { shape: self.shape.clone(), re, im: None };
        }
        let im_in = self.im_or_zeros();
        let re = self.re.iter().zip(im_in.iter()).map(|(&x, &y)| x * s.re - y * s.im).collect();
        let im = self.re.iter().zip(im_in.iter()).map(|(&x, &y)| x * s.im + y * s.re).collect();
        Self { shape: self.shape.clone(), re, im: Some(im) }
    }

    pub fn conj(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            re: self.re.clone(),
            im: self.im.as_ref().map(|im| im.iter().map(|&v| -v).collect()),
        }
    }

    /// Per-element magnitude as a purely real tensor.
    pub fn abs(&self) -> Self {
        let re = match &self.im {
            None => self.re.iter().map(|v| v.abs()).collect(),
            Some(im) => self.re.iter().zip(im).map(|(&x, &y)| x.hypot(y)).collect(),
        };
        Self { shape: self.shape.clone(), re, im: None }
    }

    pub fn cast<U: Real>(&self) -> ComplexTensor<U> {
        let conv = |v: &Vec<T>| v.iter().map(|&x| U::from(x).unwrap()).collect::<Vec<U>>();
        ComplexTensor { shape: self.shape.clone(), re: conv(&self.re), im: self.im.as_ref().map(conv) }
    }
}

/// Time-domain complex baseband samples.
#[derive(Debug, Clone, PartialEq)]
pub struct IqFrame<T> {
    samples: ComplexTensor<T>,
    pub sample_rate_hz: f64,
    pub center_freq_hz: f64,
}

impl<T: Real> IqFrame<T> {
    /// Frame of length `L >= 8`, `L` a power of two.
    pub fn new(samples: Vec<Complex<T>>, sample_rate_hz: f64, center_freq_hz: f64) -> Result<Self> {
        let n = samples.len();
        if n < 8 || !n.is_power_of_two() {
            return Err(Error::NonPowerOfTwoLength(n));
        }
        Ok(Self::unchecked(samples, sample_rate_hz, center_freq_hz))
    }

    pub fn cast<U: Real>(&self) -> IqFrame<U> {
        IqFrame { samples: self.samples.cast(), sample_rate_hz: self.sample_rate_hz, center_freq_hz: self.center_freq_hz }
    }

    /// Frame of any nonzero length; only [`dft`] accepts these.
    pub fn unchecked(samples: Vec<Complex<T>>, sample_rate_hz: f64, center_freq_hz: f64) -> Self {
        let n = samples.len();
        let samples = ComplexTensor::from_complex(vec![n], &samples).expect("1-d shape");
        Self { samples, sample_rate_hz, center_freq_hz }
    }

    pub fn samples(&self) -> &ComplexTensor<T> {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// DFT coefficients `R[f]` in natural order `f = 0..L`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumFrame<T> {
    coeffs: ComplexTensor<T>,
    pub bin_width_hz: f64,
}

impl<T: Real> SpectrumFrame<T> {
    pub fn from_coeffs(coeffs: Vec<Complex<T>>, bin_width_hz: f64) -> Self {
        let n = coeffs.len();
        Self { coeffs: ComplexTensor::from_complex(vec![n], &coeffs).expect("1-d"), bin_width_hz }
    }

    pub fn coeffs(&self) -> &ComplexTensor<T> {
        &self.coeffs
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Coefficients rotated so index `L/2` is DC and index 0 is `-f_s/2`.
    ///
    /// Segment labels and model inputs are expressed in this order so that a
    /// signal straddling DC stays one contiguous run of bins.
    pub fn centered(&self) -> Vec<Complex<T>> {
        let v = self.coeffs.to_vec();
        let half = v.len() / 2;
        v[half..].iter().chain(&v[..half]).copied().collect()
    }

    /// Per-bin power `|R[f]|^2` in centered order.
    pub fn centered_power(&self) -> Vec<T> {
        self.centered().iter().map(|z| z.norm_sqr()).collect()
    }
}

/// Direct O(L^2) evaluation of the unnormalized forward DFT.
pub fn dft<T: Real>(frame: &IqFrame<T>) -> SpectrumFrame<T> {
    let x = frame.samples.to_vec();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    for f in 0..n {
        let mut acc = Complex::new(0.0f64, 0.0);
        for (t, v) in x.iter().enumerate() {
            // reduce f*t mod n before scaling to keep the angle exact for large L
            let k = ((f * t) % n) as f64;
            let ang = -2.0 * std::f64::consts::PI * k / n as f64;
            let v = Complex::new(v.re.to_f64().unwrap(), v.im.to_f64().unwrap());
            acc += v * Complex::new(ang.cos(), ang.sin());
        }
        out.push(Complex::new(T::c(acc.re), T::c(acc.im)));
    }
    SpectrumFrame::from_coeffs(out, frame.sample_rate_hz / n as f64)
}

/// Iterative radix-2 decimation-in-time FFT; same output as [`dft`].
pub fn fft<T: Real>(frame: &IqFrame<T>) -> Result<SpectrumFrame<T>> {
    let mut data = frame.samples.to_vec();
    fft_in_place(&mut data)?;
    Ok(SpectrumFrame::from_coeffs(data, frame.sample_rate_hz / frame.len() as f64))
}

pub(crate) fn fft_in_place<T: Real>(data: &mut [Complex<T>]) -> Result<()> {
    let n = data.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::NonPowerOfTwoLength(n));
    }
    let bits = n.trailing_zeros();
    if bits > 0 {
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if j > i {
                data.swap(i, j);
            }
        }
    }
    let twiddles: Vec<Complex<T>> = (0..n / 2)
        .map(|k| {
            let ang = -2.0 * std::f64::consts::PI * k as f64 / n as f64;
            Complex::new(T::c(ang.cos()), T::c(ang.sin()))
        })
        .collect();
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let w = twiddles[k * step];
                let a = data[start + k];
                let b = data[start + k + half] * w;
                data[start + k] = a + b;
                data[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(n: usize, seed: u64) -> IqFrame<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..n).map(|_| Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        IqFrame::unchecked(v, 20e6, 0.0)
    }

    /// Independent textbook summation used as the reference for both transforms.
    fn naive(x: &[Complex<f64>]) -> Vec<Complex<f64>> {
        let n = x.len() as f64;
        (0..x.len())
            .map(|f| {
                x.iter()
                    .enumerate()
                    .map(|(t, v)| v * Complex::from_polar(1.0, -2.0 * std::f64::consts::PI * f as f64 * t as f64 / n))
                    .sum()
            })
            .collect()
    }

    fn max_err(a: &[Complex<f64>], b: &[Complex<f64>]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn impulse_is_flat() {
        let f = IqFrame::unchecked(vec![Complex::new(1.0, 0.0), Complex::default(), Complex::default(), Complex::default()], 4.0, 0.0);
        let s = dft(&f);
        for z in s.coeffs().to_vec() {
            assert!((z - Complex::new(1.0, 0.0)).norm() < 1e-15);
        }
        let mut v = vec![Complex::new(0.0, 0.0); 8];
        v[0] = Complex::new(1.0, 0.0);
        let s = fft(&IqFrame::new(v, 8.0, 0.0).unwrap()).unwrap();
        assert!(s.coeffs().to_vec().iter().all(|z| (z - Complex::new(1.0, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn complex_exponential_lands_in_one_bin() {
        let v: Vec<_> = (0..8).map(|n| Complex::from_polar(1.0, 2.0 * std::f64::consts::PI * 3.0 * n as f64 / 8.0)).collect();
        let frame = IqFrame::new(v, 8.0, 0.0).unwrap();
        for s in [dft(&frame), fft(&frame).unwrap()] {
            for (f, z) in s.coeffs().to_vec().iter().enumerate() {
                let want = if f == 3 { 8.0 } else { 0.0 };
                assert!((z - Complex::new(want, 0.0)).norm() < 1e-12, "bin {f}: {z}");
            }
        }
    }

    #[test]
    fn dft_matches_summation_oracle() {
        let frame = random_frame(64, 7);
        let got = dft(&frame).coeffs().to_vec();
        assert!(max_err(&got, &naive(&frame.samples().to_vec())) < 1e-9);
    }

    #[test]
    fn fft_matches_dft() {
        for (n, seed) in [(8, 1), (64, 2), (1024, 3)] {
            let frame = random_frame(n, seed);
            let a = fft(&frame).unwrap().coeffs().to_vec();
            let b = dft(&frame).coeffs().to_vec();
            assert!(max_err(&a, &b) < 1e-9, "L={n}");
        }
    }

    #[test]
    fn parseval() {
        let frame = random_frame(1024, 11);
        let time: f64 = frame.samples().to_vec().iter().map(|z| z.norm_sqr()).sum();
        let freq: f64 = fft(&frame).unwrap().coeffs().to_vec().iter().map(|z| z.norm_sqr()).sum::<f64>() / 1024.0;
        assert!(((time - freq) / time).abs() < 1e-9);
    }

    #[test]
    fn fft_rejects_non_power_of_two() {
        let frame = random_frame(12, 0);
        assert!(matches!(fft(&frame), Err(Error::NonPowerOfTwoLength(12))));
        assert!(IqFrame::<f64>::new(vec![Complex::default(); 4], 1.0, 0.0).is_err());
        assert_eq!(dft(&frame).len(), 12);
    }

    #[test]
    fn elementwise_anchors() {
        let a = ComplexTensor::from_complex(vec![1], &[Complex::new(1.0, 1.0)]).unwrap();
        let b = ComplexTensor::from_complex(vec![1], &[Complex::new(1.0, -1.0)]).unwrap();
        assert_eq!(a.mul(&b).unwrap().get(0), Complex::new(2.0, 0.0));
        let c = ComplexTensor::from_complex(vec![1], &[Complex::new(3.0, 4.0)]).unwrap();
        assert_eq!(c.abs().get(0), Complex::new(5.0, 0.0));
        assert!(c.abs().is_real());
        assert_eq!(c.conj().get(0), Complex::new(3.0, -4.0));
    }

    #[test]
    fn mul_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut draw = || -> Vec<Complex<f64>> { (0..24).map(|_| Complex::new(rng.gen(), rng.gen())).collect() };
        let (x, y) = (draw(), draw());
        let a = ComplexTensor::from_complex(vec![2, 3, 4], &x).unwrap();
        let b = ComplexTensor::from_complex(vec![2, 3, 4], &y).unwrap();
        let got = a.mul(&b).unwrap().to_vec();
        for i in 0..24 {
            assert!((got[i] - x[i] * y[i]).norm() < 1e-15);
        }
        let sum = a.add(&b).unwrap().to_vec();
        assert!((sum[5] - (x[5] + y[5])).norm() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let a = ComplexTensor::<f64>::zeros(vec![2, 3]);
        let b = ComplexTensor::<f64>::zeros(vec![3, 2]);
        assert!(matches!(a.add(&b), Err(Error::ShapeMismatch(_))));
        assert!(matches!(a.mul(&b), Err(Error::ShapeMismatch(_))));
        assert!(ComplexTensor::new(vec![2], vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn real_tensors_stay_real() {
        let a = ComplexTensor::from_real(vec![3], vec![1.0, -2.0, 3.0]).unwrap();
        assert!(a.mul(&a).unwrap().is_real());
        assert!(a.scale(Complex::new(2.0, 0.0)).is_real());
        let z = a.scale(Complex::new(0.0, 1.0));
        assert_eq!(z.get(1), Complex::new(0.0, -2.0));
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        f64::gemm(false, false, 2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        f64::gemm(true, false, 2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        f64::gemm(false, true, 2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn dft_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
                let u = random_frame(64, seed);
                let v = random_frame(64, seed.wrapping_add(1));
                let mix: Vec<_> = u.samples().to_vec().iter().zip(v.samples().to_vec())
                    .map(|(x, y)| x * a + y * b).collect();
                let lhs = fft(&IqFrame::new(mix, 1.0, 0.0).unwrap()).unwrap().coeffs().to_vec();
                let (fu, fv) = (dft(&u).coeffs().to_vec(), dft(&v).coeffs().to_vec());
                for f in 0..64 {
                    prop_assert!((lhs[f] - (fu[f] * a + fv[f] * b)).norm() < 1e-9);
                }
            }
        }
    }
}
