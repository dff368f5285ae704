//! Forward and backward passes of the complex layer primitives.
//!
//! Every complex parameter `w = w_x + j w_y` is differentiated as two independent
//! real parameters, so each gradient is the pair `(dL/dw_x, dL/dw_y)`. Layers are
//! pure functions of `(input, params)`; backward passes take the forward input
//! and recompute whatever intermediate they need.
//!
//! Activations are `[batch, channels, length]` (or `[batch, features]` for the
//! linear layer). A purely real input combined with purely real parameters keeps
//! the whole computation real, which is how the real-valued counterpart network
//! reuses these kernels.

use num_complex::Complex;

use crate::ctensor::{ComplexTensor, Real};
use crate::error::{Error, Result};

/// Gradient of a loss with respect to one (possibly complex) parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct WirtingerGrad<T> {
    pub shape: Vec<usize>,
    /// dL/dw_x
    pub d_x: Vec<T>,
    /// dL/dw_y; `None` for a real parameter.
    pub d_y: Option<Vec<T>>,
}

impl<T: Real> WirtingerGrad<T> {
    pub fn zeros_like(p: &ComplexTensor<T>) -> Self {
        Self {
            shape: p.shape.clone(),
            d_x: vec![T::zero(); p.len()],
            d_y: p.im.as_ref().map(|_| vec![T::zero(); p.len()]),
        }
    }

    pub fn scaled(&self, s: T) -> Self {
        Self {
            shape: self.shape.clone(),
            d_x: self.d_x.iter().map(|&v| v * s).collect(),
            d_y: self.d_y.as_ref().map(|d| d.iter().map(|&v| v * s).collect()),
        }
    }

    pub fn accumulate(&mut self, other: &Self) {
        for (a, &b) in self.d_x.iter_mut().zip(&other.d_x) {
            *a += b;
        }
        if let (Some(a), Some(b)) = (self.d_y.as_mut(), other.d_y.as_ref()) {
            for (a, &b) in a.iter_mut().zip(b) {
                *a += b;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_x.iter().all(|v| v.is_finite()) && self.d_y.as_ref().map_or(true, |d| d.iter().all(|v| v.is_finite()))
    }
}

fn dims3<T>(t: &ComplexTensor<T>) -> Result<(usize, usize, usize)> {
    match t.shape[..] {
        [b, c, l] => Ok((b, c, l)),
        _ => Err(Error::shape(format!("expected [batch, channels, length], got {:?}", t.shape))),
    }
}

fn planes<T: Real>(t: &ComplexTensor<T>, complex: bool) -> Vec<std::borrow::Cow<'_, [T]>> {
    let mut v = vec![std::borrow::Cow::Borrowed(&t.re[..])];
    if complex {
        v.push(t.im_or_zeros());
    }
    v
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Complex 1-D convolution `W = A + jB` with complex bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    /// `[out_ch, in_ch, kernel]`; real plane is `A`, imaginary plane is `B`.
    pub weight: ComplexTensor<T>,
    /// `[out_ch]`
    pub bias: ComplexTensor<T>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad<T> {
    pub weight: WirtingerGrad<T>,
    pub bias: WirtingerGrad<T>,
}

impl<T: Real> ConvParams<T> {
    pub fn new(weight: ComplexTensor<T>, bias: ComplexTensor<T>, stride: usize, padding: usize) -> Result<Self> {
        let (out_ch, _, kernel) = dims3(&weight)?;
        if kernel == 0 || stride == 0 {
            return Err(Error::ConfigInvalid("kernel and stride must be positive".into()));
        }
        if bias.shape != [out_ch] {
            return Err(Error::shape(format!("bias {:?} for {out_ch} output channels", bias.shape)));
        }
        Ok(Self { weight, bias, stride, padding })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape[2]
    }

    pub fn out_len(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        (padded >= self.kernel()).then(|| (padded - self.kernel()) / self.stride + 1)
    }

    fn is_complex(&self) -> bool {
        !(self.weight.is_real() && self.bias.is_real())
    }

    /// Block weight `[[A, -B], [B, A]]` of shape `[P*out, P*in*k]`.
    fn block_weight(&self, complex: bool) -> Vec<T> {
        let (co, cik) = (self.out_channels(), self.in_channels() * self.kernel());
        let a = &self.weight.re;
        if !complex {
            return a.clone();
        }
        let b = self.weight.im_or_zeros();
        let cols = 2 * cik;
        let mut w = vec![T::zero(); 2 * co * cols];
        for o in 0..co {
            for r in 0..cik {
                let (av, bv) = (a[o * cik + r], b[o * cik + r]);
                w[o * cols + r] = av;
                w[o * cols + cik + r] = -bv;
                w[(co + o) * cols + r] = bv;
                w[(co + o) * cols + cik + r] = av;
            }
        }
        w
    }
}

struct ConvGeom {
    batch: usize,
    cin: usize,
    len: usize,
    k: usize,
    stride: usize,
    pad: usize,
    lout: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k
    }

    fn cols(&self) -> usize {
        self.batch * self.lout
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, out: &mut [T]) {
    let cols = g.cols();
    for ci in 0..g.cin {
        for t in 0..g.k {
            let row = &mut out[(ci * g.k + t) * cols..(ci * g.k + t + 1) * cols];
            for bi in 0..g.batch {
                let src = &x[(bi * g.cin + ci) * g.len..(bi * g.cin + ci + 1) * g.len];
                let dst = &mut row[bi * g.lout..(bi + 1) * g.lout];
                for (o, d) in dst.iter_mut().enumerate() {
                    let pos = (o * g.stride + t) as isize - g.pad as isize;
                    *d = if pos >= 0 && (pos as usize) < g.len { src[pos as usize] } else { T::zero() };
                }
            }
        }
    }
}

fn col2im<T: Real>(cols_buf: &[T], g: &ConvGeom, x: &mut [T]) {
    let cols = g.cols();
    for ci in 0..g.cin {
        for t in 0..g.k {
            let row = &cols_buf[(ci * g.k + t) * cols..(ci * g.k + t + 1) * cols];
            for bi in 0..g.batch {
                let dst = &mut x[(bi * g.cin + ci) * g.len..(bi * g.cin + ci + 1) * g.len];
                let src = &row[bi * g.lout..(bi + 1) * g.lout];
                for (o, &s) in src.iter().enumerate() {
                    let pos = (o * g.stride + t) as isize - g.pad as isize;
                    if pos >= 0 && (pos as usize) < g.len {
                        dst[pos as usize] += s;
                    }
                }
            }
        }
    }
}

fn conv_geom<T: Real>(input: &ComplexTensor<T>, p: &ConvParams<T>) -> Result<ConvGeom> {
    let (batch, cin, len) = dims3(input)?;
    if cin != p.in_channels() {
        return Err(Error::shape(format!("conv expects {} input channels, got {cin}", p.in_channels())));
    }
    let lout = p
        .out_len(len)
        .ok_or_else(|| Error::shape(format!("padded length {} shorter than kernel {}", len + 2 * p.padding, p.kernel())))?;
    Ok(ConvGeom { batch, cin, len, k: p.kernel(), stride: p.stride, pad: p.padding, lout })
}

fn stacked_cols<T: Real>(input: &ComplexTensor<T>, g: &ConvGeom, complex: bool) -> Vec<T> {
    let n_planes = if complex { 2 } else { 1 };
    let plane_len = g.rows() * g.cols();
    let mut cols = vec![T::zero(); n_planes * plane_len];
    for (p, x) in planes(input, complex).iter().enumerate() {
        im2col(x, g, &mut cols[p * plane_len..(p + 1) * plane_len]);
    }
    cols
}

/// `(A*x - B*y) + j(B*x + A*y) + bias`, `*` being cross-correlation with zero padding.
pub fn cconv1d_forward<T: Real>(input: &ComplexTensor<T>, p: &ConvParams<T>) -> Result<ComplexTensor<T>> {
    let g = conv_geom(input, p)?;
    let complex = p.is_complex() || !input.is_real();
    let n_planes = if complex { 2 } else { 1 };
    let cols = stacked_cols(input, &g, complex);
    let w = p.block_weight(complex);
    let co = p.out_channels();
    let ncols = g.cols();
    let mut big = vec![T::zero(); n_planes * co * ncols];
    T::gemm(false, false, n_planes * co, ncols, n_planes * g.rows(), T::one(), &w, &cols, T::zero(), &mut big);

    let bias_im = p.bias.im_or_zeros();
    let bias = [&p.bias.re[..], &bias_im[..]];
    let out_len = g.batch * co * g.lout;
    let mut out_planes: Vec<Vec<T>> = (0..n_planes).map(|_| vec![T::zero(); out_len]).collect();
    for (pl, out) in out_planes.iter_mut().enumerate() {
        for o in 0..co {
            let row = &big[(pl * co + o) * ncols..(pl * co + o + 1) * ncols];
            let b = bias[pl][o];
            for bi in 0..g.batch {
                let dst = &mut out[(bi * co + o) * g.lout..(bi * co + o + 1) * g.lout];
                for (d, &s) in dst.iter_mut().zip(&row[bi * g.lout..(bi + 1) * g.lout]) {
                    *d = s + b;
                }
            }
        }
    }
    let shape = vec![g.batch, co, g.lout];
    let mut it = out_planes.into_iter();
    let re = it.next().unwrap();
    Ok(match it.next() {
        Some(im) => ComplexTensor { shape, re, im: Some(im) },
        None => ComplexTensor { shape, re, im: None },
    })
}

/// Gradients of [`cconv1d_forward`] given the upstream gradient of its output.
pub fn cconv1d_backward<T: Real>(
    input: &ComplexTensor<T>,
    p: &ConvParams<T>,
    upstream: &ComplexTensor<T>,
) -> Result<(ComplexTensor<T>, ConvGrad<T>)> {
    let g = conv_geom(input, p)?;
    let co = p.out_channels();
    if upstream.shape != [g.batch, co, g.lout] {
        return Err(Error::shape(format!("upstream {:?}, forward output [{}, {co}, {}]", upstream.shape, g.batch, g.lout)));
    }
    let complex = p.is_complex() || !input.is_real();
    let n_planes = if complex { 2 } else { 1 };
    let ncols = g.cols();
    let rows = g.rows();

    // upstream reordered to [P*out, batch*lout]
    let mut d_big = vec![T::zero(); n_planes * co * ncols];
    for (pl, up) in planes(upstream, complex).iter().enumerate() {
        for o in 0..co {
            let dst = &mut d_big[(pl * co + o) * ncols..(pl * co + o + 1) * ncols];
            for bi in 0..g.batch {
                dst[bi * g.lout..(bi + 1) * g.lout].copy_from_slice(&up[(bi * co + o) * g.lout..(bi * co + o + 1) * g.lout]);
            }
        }
    }

    let cols = stacked_cols(input, &g, complex);
    let wcols = n_planes * rows;
    let mut dw_big = vec![T::zero(); n_planes * co * wcols];
    T::gemm(false, true, n_planes * co, wcols, ncols, T::one(), &d_big, &cols, T::zero(), &mut dw_big);

    let mut d_a = vec![T::zero(); co * rows];
    let mut d_b = complex.then(|| vec![T::zero(); co * rows]);
    for o in 0..co {
        for r in 0..rows {
            if let Some(d_b) = d_b.as_mut() {
                // W_big = [[A, -B], [B, A]]
                d_a[o * rows + r] = dw_big[o * wcols + r] + dw_big[(co + o) * wcols + rows + r];
                d_b[o * rows + r] = dw_big[(co + o) * wcols + r] - dw_big[o * wcols + rows + r];
            } else {
                d_a[o * rows + r] = dw_big[o * wcols + r];
            }
        }
    }
    let weight_grad = WirtingerGrad {
        shape: p.weight.shape.clone(),
        d_x: d_a,
        d_y: if p.weight.is_real() { None } else { d_b },
    };

    let sums: Vec<T> = (0..n_planes * co)
        .map(|r| d_big[r * ncols..(r + 1) * ncols].iter().fold(T::zero(), |a, &b| a + b))
        .collect();
    let bias_grad = WirtingerGrad {
        shape: vec![co],
        d_x: sums[..co].to_vec(),
        d_y: (!p.bias.is_real() && complex).then(|| sums[co..].to_vec()),
    };

    let w = p.block_weight(complex);
    let mut d_cols = vec![T::zero(); wcols * ncols];
    T::gemm(true, false, wcols, ncols, n_planes * co, T::one(), &w, &d_big, T::zero(), &mut d_cols);
    let in_len = g.batch * g.cin * g.len;
    let plane_len = rows * ncols;
    let mut d_re = vec![T::zero(); in_len];
    col2im(&d_cols[..plane_len], &g, &mut d_re);
    let d_im = (!input.is_real()).then(|| {
        let mut d = vec![T::zero(); in_len];
        col2im(&d_cols[plane_len..], &g, &mut d);
        d
    });
    let input_grad = ComplexTensor { shape: input.shape.clone(), re: d_re, im: d_im };
    Ok((input_grad, ConvGrad { weight: weight_grad, bias: bias_grad }))
}

// ---------------------------------------------------------------------------
// Split activations and pooling
// ---------------------------------------------------------------------------

fn map_planes<T: Real>(z: &ComplexTensor<T>, f: impl Fn(T) -> T) -> ComplexTensor<T> {
    ComplexTensor {
        shape: z.shape.clone(),
        re: z.re.iter().map(|&v| f(v)).collect(),
        im: z.im.as_ref().map(|im| im.iter().map(|&v| f(v)).collect()),
    }
}

fn zip_planes<T: Real>(z: &ComplexTensor<T>, up: &ComplexTensor<T>, f: impl Fn(T, T) -> T) -> Result<ComplexTensor<T>> {
    if z.shape != up.shape {
        return Err(Error::shape(format!("upstream {:?} vs input {:?}", up.shape, z.shape)));
    }
    let im = match (&z.im, &up.im) {
        (Some(a), Some(b)) => Some(a.iter().zip(b).map(|(&a, &b)| f(a, b)).collect()),
        (Some(a), None) => Some(a.iter().map(|&a| f(a, T::zero())).collect()),
        (None, _) => None,
    };
    Ok(ComplexTensor { shape: z.shape.clone(), re: z.re.iter().zip(&up.re).map(|(&a, &b)| f(a, b)).collect(), im })
}

/// `ReLU(x) + j ReLU(y)`
pub fn crelu<T: Real>(z: &ComplexTensor<T>) -> ComplexTensor<T> {
    map_planes(z, |v| v.max(T::zero()))
}

pub fn crelu_backward<T: Real>(z: &ComplexTensor<T>, upstream: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
    zip_planes(z, upstream, |x, g| if x > T::zero() { g } else { T::zero() })
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `sigmoid(x) + j sigmoid(y)`
pub fn csigmoid<T: Real>(z: &ComplexTensor<T>) -> ComplexTensor<T> {
    map_planes(z, sigmoid)
}

pub fn csigmoid_backward<T: Real>(z: &ComplexTensor<T>, upstream: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
    zip_planes(z, upstream, |x, g| {
        let s = sigmoid(x);
        g * s * (T::one() - s)
    })
}

/// Non-overlapping mean over windows of `window` samples along the last axis.
pub fn cavgpool<T: Real>(z: &ComplexTensor<T>, window: usize) -> Result<ComplexTensor<T>> {
    let (b, c, l) = dims3(z)?;
    if window == 0 || l % window != 0 {
        return Err(Error::LengthNotDivisible { len: l, parts: window });
    }
    let lo = l / window;
    let inv = T::one() / T::c(window as f64);
    let pool = |x: &[T]| -> Vec<T> { x.chunks_exact(window).map(|w| w.iter().fold(T::zero(), |a, &v| a + v) * inv).collect() };
    Ok(ComplexTensor { shape: vec![b, c, lo], re: pool(&z.re), im: z.im.as_deref().map(pool) })
}

pub fn cavgpool_backward<T: Real>(z: &ComplexTensor<T>, window: usize, upstream: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
    let (b, c, l) = dims3(z)?;
    if window == 0 || l % window != 0 {
        return Err(Error::LengthNotDivisible { len: l, parts: window });
    }
    if upstream.shape != [b, c, l / window] {
        return Err(Error::shape(format!("upstream {:?}", upstream.shape)));
    }
    let inv = T::one() / T::c(window as f64);
    let spread = |g: &[T]| -> Vec<T> { g.iter().flat_map(|&v| std::iter::repeat(v * inv).take(window)).collect() };
    let im = z.im.as_ref().map(|_| spread(&upstream.im_or_zeros()));
    Ok(ComplexTensor { shape: z.shape.clone(), re: spread(&upstream.re), im })
}

/// Average pooling down to exactly `target` positions.
pub fn cavgpool_to<T: Real>(z: &ComplexTensor<T>, target: usize) -> Result<ComplexTensor<T>> {
    let (_, _, l) = dims3(z)?;
    cavgpool(z, adaptive_window(l, target)?)
}

pub fn adaptive_window(len: usize, target: usize) -> Result<usize> {
    if target == 0 || len % target != 0 {
        return Err(Error::LengthNotDivisible { len, parts: target });
    }
    Ok(len / target)
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// `out = (w_x x - w_y y + b_x) + j(w_y x + w_x y + b_y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<T> {
    /// `[out, in]`
    pub weight: ComplexTensor<T>,
    /// `[out]`
    pub bias: ComplexTensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad<T> {
    pub weight: WirtingerGrad<T>,
    pub bias: WirtingerGrad<T>,
}

impl<T: Real> LinearParams<T> {
    pub fn new(weight: ComplexTensor<T>, bias: ComplexTensor<T>) -> Result<Self> {
        if weight.shape.len() != 2 || bias.shape != [weight.shape[0]] {
            return Err(Error::shape(format!("linear weight {:?}, bias {:?}", weight.shape, bias.shape)));
        }
        Ok(Self { weight, bias })
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape[1]
    }

    fn is_complex(&self) -> bool {
        !(self.weight.is_real() && self.bias.is_real())
    }

    fn block_weight(&self, complex: bool) -> Vec<T> {
        let (o, i) = (self.out_features(), self.in_features());
        if !complex {
            return self.weight.re.clone();
        }
        let (a, b) = (&self.weight.re, self.weight.im_or_zeros());
        let cols = 2 * i;
        let mut w = vec![T::zero(); 2 * o * cols];
        for r in 0..o {
            for c in 0..i {
                let (av, bv) = (a[r * i + c], b[r * i + c]);
                w[r * cols + c] = av;
                w[r * cols + i + c] = -bv;
                w[(o + r) * cols + c] = bv;
                w[(o + r) * cols + i + c] = av;
            }
        }
        w
    }
}

fn dims2<T>(t: &ComplexTensor<T>) -> Result<(usize, usize)> {
    match t.shape[..] {
        [b, f] => Ok((b, f)),
        _ => Err(Error::shape(format!("expected [batch, features], got {:?}", t.shape))),
    }
}

/// Input rows laid out as `[batch, P*in]`: real features then imaginary features.
fn stacked_rows<T: Real>(z: &ComplexTensor<T>, b: usize, f: usize, complex: bool) -> Vec<T> {
    if !complex {
        return z.re.clone();
    }
    let im = z.im_or_zeros();
    let mut out = Vec::with_capacity(2 * b * f);
    for r in 0..b {
        out.extend_from_slice(&z.re[r * f..(r + 1) * f]);
        out.extend_from_slice(&im[r * f..(r + 1) * f]);
    }
    out
}

pub fn clinear_forward<T: Real>(z: &ComplexTensor<T>, p: &LinearParams<T>) -> Result<ComplexTensor<T>> {
    let (b, f) = dims2(z)?;
    if f != p.in_features() {
        return Err(Error::shape(format!("linear expects {} features, got {f}", p.in_features())));
    }
    let complex = p.is_complex() || !z.is_real();
    let n_planes = if complex { 2 } else { 1 };
    let o = p.out_features();
    let rows = stacked_rows(z, b, f, complex);
    let w = p.block_weight(complex);
    let mut out = vec![T::zero(); b * n_planes * o];
    T::gemm(false, true, b, n_planes * o, n_planes * f, T::one(), &rows, &w, T::zero(), &mut out);
    let bias_im = p.bias.im_or_zeros();
    let mut re = vec![T::zero(); b * o];
    let mut im = complex.then(|| vec![T::zero(); b * o]);
    for r in 0..b {
        let row = &out[r * n_planes * o..(r + 1) * n_planes * o];
        for k in 0..o {
            re[r * o + k] = row[k] + p.bias.re[k];
            if let Some(im) = im.as_mut() {
                im[r * o + k] = row[o + k] + bias_im[k];
            }
        }
    }
    Ok(ComplexTensor { shape: vec![b, o], re, im })
}

pub fn clinear_backward<T: Real>(
    z: &ComplexTensor<T>,
    p: &LinearParams<T>,
    upstream: &ComplexTensor<T>,
) -> Result<(ComplexTensor<T>, LinearGrad<T>)> {
    let (b, f) = dims2(z)?;
    let o = p.out_features();
    if f != p.in_features() || upstream.shape != [b, o] {
        return Err(Error::shape(format!("linear backward: input {:?}, upstream {:?}", z.shape, upstream.shape)));
    }
    let complex = p.is_complex() || !z.is_real();
    let n_planes = if complex { 2 } else { 1 };
    let up = stacked_rows(upstream, b, o, complex);
    let rows = stacked_rows(z, b, f, complex);
    let mut dw_big = vec![T::zero(); n_planes * o * n_planes * f];
    T::gemm(true, false, n_planes * o, n_planes * f, b, T::one(), &up, &rows, T::zero(), &mut dw_big);
    let wc = n_planes * f;
    let mut d_wx = vec![T::zero(); o * f];
    let mut d_wy = complex.then(|| vec![T::zero(); o * f]);
    for r in 0..o {
        for c in 0..f {
            if let Some(d_wy) = d_wy.as_mut() {
                d_wx[r * f + c] = dw_big[r * wc + c] + dw_big[(o + r) * wc + f + c];
                d_wy[r * f + c] = dw_big[(o + r) * wc + c] - dw_big[r * wc + f + c];
            } else {
                d_wx[r * f + c] = dw_big[r * wc + c];
            }
        }
    }
    let mut d_bx = vec![T::zero(); o];
    let mut d_by = vec![T::zero(); o];
    for r in 0..b {
        let row = &up[r * n_planes * o..(r + 1) * n_planes * o];
        for k in 0..o {
            d_bx[k] += row[k];
            if complex {
                d_by[k] += row[o + k];
            }
        }
    }
    let w = p.block_weight(complex);
    let mut d_rows = vec![T::zero(); b * n_planes * f];
    T::gemm(false, false, b, n_planes * f, n_planes * o, T::one(), &up, &w, T::zero(), &mut d_rows);
    let mut d_re = vec![T::zero(); b * f];
    let mut d_im = (!z.is_real()).then(|| vec![T::zero(); b * f]);
    for r in 0..b {
        let row = &d_rows[r * n_planes * f..(r + 1) * n_planes * f];
        d_re[r * f..(r + 1) * f].copy_from_slice(&row[..f]);
        if let Some(d_im) = d_im.as_mut() {
            d_im[r * f..(r + 1) * f].copy_from_slice(&row[f..]);
        }
    }
    let grad = LinearGrad {
        weight: WirtingerGrad { shape: p.weight.shape.clone(), d_x: d_wx, d_y: if p.weight.is_real() { None } else { d_wy } },
        bias: WirtingerGrad { shape: vec![o], d_x: d_bx, d_y: (!p.bias.is_real()).then_some(d_by) },
    };
    Ok((ComplexTensor { shape: z.shape.clone(), re: d_re, im: d_im }, grad))
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Symmetric 2x2 covariance `[[xx, xy], [xy, yy]]` of (re, im) pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cov2<T> {
    pub xx: T,
    pub xy: T,
    pub yy: T,
}

impl<T: Real> Cov2<T> {
    pub fn identity() -> Self {
        Self { xx: T::one(), xy: T::zero(), yy: T::one() }
    }

    fn det(&self) -> T {
        self.xx * self.yy - self.xy * self.xy
    }

    fn is_spd(&self) -> bool {
        self.xx > T::zero() && self.det() > T::zero() && self.det().is_finite()
    }

    /// Inverse principal square root via the 2x2 closed form:
    /// `sqrt(V) = (V + sI)/t` with `s = sqrt(det V)`, `t = sqrt(tr V + 2s)`.
    pub fn inv_sqrt(&self) -> Option<[[T; 2]; 2]> {
        if !self.is_spd() {
            return None;
        }
        let s = self.det().sqrt();
        let t = (self.xx + self.yy + s + s).sqrt();
        let d = s * t;
        Some([[(self.yy + s) / d, -self.xy / d], [-self.xy / d, (self.xx + s) / d]])
    }
}

/// Complex batch normalization parameters and running statistics.
///
/// A real-valued network uses purely real `gamma`/`beta`, which selects
/// ordinary per-channel standardization of the real plane.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams<T> {
    pub gamma: ComplexTensor<T>,
    pub beta: ComplexTensor<T>,
    pub running_mean: ComplexTensor<T>,
    /// One covariance per channel; only `xx` is meaningful in the real case.
    pub running_cov: Vec<Cov2<T>>,
    pub momentum: T,
    pub epsilon: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnGrad<T> {
    pub gamma: WirtingerGrad<T>,
    pub beta: WirtingerGrad<T>,
}

/// Per-channel statistics of one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<Complex<T>>,
    pub cov: Vec<Cov2<T>>,
}

impl<T: Real> BnParams<T> {
    pub fn complex(channels: usize) -> Self {
        Self {
            gamma: ComplexTensor::new(vec![channels], vec![T::one(); channels], vec![T::zero(); channels]).unwrap(),
            beta: ComplexTensor::zeros(vec![channels]),
            running_mean: ComplexTensor::zeros(vec![channels]),
            running_cov: vec![Cov2::identity(); channels],
            momentum: T::c(0.1),
            epsilon: T::c(1e-5),
        }
    }

    pub fn real(channels: usize) -> Self {
        Self {
            gamma: ComplexTensor::from_real(vec![channels], vec![T::one(); channels]).unwrap(),
            beta: ComplexTensor::real_zeros(vec![channels]),
            running_mean: ComplexTensor::real_zeros(vec![channels]),
            running_cov: vec![Cov2::identity(); channels],
            momentum: T::c(0.1),
            epsilon: T::c(1e-5),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_complex(&self) -> bool {
        !self.gamma.is_real()
    }

    /// Exponential moving average update of the running statistics.
    pub fn absorb(&mut self, stats: &BatchStats<T>) {
        let m = self.momentum;
        let keep = T::one() - m;
        for (c, (mu, cov)) in stats.mean.iter().zip(&stats.cov).enumerate() {
            self.running_mean.re[c] = keep * self.running_mean.re[c] + m * mu.re;
            if let Some(im) = self.running_mean.im.as_mut() {
                im[c] = keep * im[c] + m * mu.im;
            }
            let r = &mut self.running_cov[c];
            r.xx = keep * r.xx + m * cov.xx;
            r.xy = keep * r.xy + m * cov.xy;
            r.yy = keep * r.yy + m * cov.yy;
        }
    }
}

fn channel_values<T: Real>(plane: &[T], b: usize, c: usize, l: usize, ch: usize) -> impl Iterator<Item = usize> + '_ {
    let _ = plane;
    (0..b).flat_map(move |bi| {
        let start = (bi * c + ch) * l;
        start..start + l
    })
}

fn batch_stats<T: Real>(z: &ComplexTensor<T>, complex: bool) -> Result<BatchStats<T>> {
    let (b, c, l) = dims3(z)?;
    let n = b * l;
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let inv_n = T::one() / T::c(n as f64);
    let im = z.im_or_zeros();
    let mut mean = Vec::with_capacity(c);
    let mut cov = Vec::with_capacity(c);
    for ch in 0..c {
        let (mut sx, mut sy) = (T::zero(), T::zero());
        for i in channel_values(&z.re, b, c, l, ch) {
            sx += z.re[i];
            sy += im[i];
        }
        let (mx, my) = (sx * inv_n, sy * inv_n);
        let (mut vxx, mut vxy, mut vyy) = (T::zero(), T::zero(), T::zero());
        for i in channel_values(&z.re, b, c, l, ch) {
            let (ux, uy) = (z.re[i] - mx, im[i] - my);
            vxx += ux * ux;
            vxy += ux * uy;
            vyy += uy * uy;
        }
        if complex {
            mean.push(Complex::new(mx, my));
            cov.push(Cov2 { xx: vxx * inv_n, xy: vxy * inv_n, yy: vyy * inv_n });
        } else {
            mean.push(Complex::new(mx, T::zero()));
            cov.push(Cov2 { xx: vxx * inv_n, xy: T::zero(), yy: T::one() });
        }
    }
    Ok(BatchStats { mean, cov })
}

fn check_bn_shape<T: Real>(z: &ComplexTensor<T>, p: &BnParams<T>) -> Result<(usize, usize, usize)> {
    let (b, c, l) = dims3(z)?;
    if c != p.channels() {
        return Err(Error::shape(format!("batchnorm has {} channels, input {c}", p.channels())));
    }
    if !p.is_complex() && !z.is_real() {
        return Err(Error::shape("real batchnorm applied to complex input".to_string()));
    }
    Ok((b, c, l))
}

fn with_eps<T: Real>(cov: &Cov2<T>, eps: T) -> Cov2<T> {
    Cov2 { xx: cov.xx + eps, xy: cov.xy, yy: cov.yy + eps }
}

/// `gamma * V^{-1/2} (z - mu) + beta`, with `V` the (re, im) covariance plus `eps I`.
///
/// Train mode normalizes with batch statistics and returns them so the caller
/// can fold them into the running averages with [`BnParams::absorb`].
pub fn cbatchnorm_forward<T: Real>(
    z: &ComplexTensor<T>,
    p: &BnParams<T>,
    mode: BnMode,
) -> Result<(ComplexTensor<T>, Option<BatchStats<T>>)> {
    let (b, c, l) = check_bn_shape(z, p)?;
    let complex = p.is_complex();
    let stats = match mode {
        BnMode::Train => Some(batch_stats(z, complex)?),
        BnMode::Eval => None,
    };
    let mut re = vec![T::zero(); z.len()];
    let mut im = complex.then(|| vec![T::zero(); z.len()]);
    let z_im = z.im_or_zeros();
    for ch in 0..c {
        let (mean, cov) = match &stats {
            Some(s) => (s.mean[ch], s.cov[ch]),
            None => (p.running_mean.get(ch), p.running_cov[ch]),
        };
        let gamma = p.gamma.get(ch);
        let beta = p.beta.get(ch);
        if complex {
            let w = with_eps(&cov, p.epsilon).inv_sqrt().ok_or(Error::SingularCovariance { channel: ch })?;
            let im = im.as_mut().unwrap();
            for i in channel_values(&z.re, b, c, l, ch) {
                let (ux, uy) = (z.re[i] - mean.re, z_im[i] - mean.im);
                let nx = w[0][0] * ux + w[0][1] * uy;
                let ny = w[1][0] * ux + w[1][1] * uy;
                re[i] = gamma.re * nx - gamma.im * ny + beta.re;
                im[i] = gamma.im * nx + gamma.re * ny + beta.im;
            }
        } else {
            let var = cov.xx + p.epsilon;
            if !(var > T::zero()) {
                return Err(Error::SingularCovariance { channel: ch });
            }
            let inv = T::one() / var.sqrt();
            for i in channel_values(&z.re, b, c, l, ch) {
                re[i] = gamma.re * (z.re[i] - mean.re) * inv + beta.re;
            }
        }
    }
    Ok((ComplexTensor { shape: z.shape.clone(), re, im }, stats))
}

/// Train-mode gradients of [`cbatchnorm_forward`] (batch statistics are
/// differentiated through).
pub fn cbatchnorm_backward<T: Real>(
    z: &ComplexTensor<T>,
    p: &BnParams<T>,
    upstream: &ComplexTensor<T>,
) -> Result<(ComplexTensor<T>, BnGrad<T>)> {
    let (b, c, l) = check_bn_shape(z, p)?;
    if upstream.shape != z.shape {
        return Err(Error::shape(format!("upstream {:?} vs input {:?}", upstream.shape, z.shape)));
    }
    let complex = p.is_complex();
    let stats = batch_stats(z, complex)?;
    let n = T::c((b * l) as f64);
    let inv_n = T::one() / n;
    let z_im = z.im_or_zeros();
    let g_im = upstream.im_or_zeros();
    let mut d_re = vec![T::zero(); z.len()];
    let mut d_im = complex.then(|| vec![T::zero(); z.len()]);
    let mut d_gamma = (vec![T::zero(); c], vec![T::zero(); c]);
    let mut d_beta = (vec![T::zero(); c], vec![T::zero(); c]);
    let two = T::c(2.0);
    let half = T::c(0.5);

    for ch in 0..c {
        let mean = stats.mean[ch];
        let gamma = p.gamma.get(ch);
        if !complex {
            let var = stats.cov[ch].xx + p.epsilon;
            let inv = T::one() / var.sqrt();
            let (mut sum_g, mut sum_gn) = (T::zero(), T::zero());
            for i in channel_values(&z.re, b, c, l, ch) {
                let nx = (z.re[i] - mean.re) * inv;
                sum_g += upstream.re[i];
                sum_gn += upstream.re[i] * nx;
            }
            d_gamma.0[ch] = sum_gn;
            d_beta.0[ch] = sum_g;
            for i in channel_values(&z.re, b, c, l, ch) {
                let nx = (z.re[i] - mean.re) * inv;
                d_re[i] = gamma.re * inv * (upstream.re[i] - sum_g * inv_n - nx * sum_gn * inv_n);
            }
            continue;
        }

        let v = with_eps(&stats.cov[ch], p.epsilon);
        let w = v.inv_sqrt().ok_or(Error::SingularCovariance { channel: ch })?;
        // pass 1: parameter grads, dL/dn, and G = sum dn u^T
        let (mut gxx, mut gxy, mut gyx, mut gyy) = (T::zero(), T::zero(), T::zero(), T::zero());
        for i in channel_values(&z.re, b, c, l, ch) {
            let (ux, uy) = (z.re[i] - mean.re, z_im[i] - mean.im);
            let nx = w[0][0] * ux + w[0][1] * uy;
            let ny = w[1][0] * ux + w[1][1] * uy;
            let (ox, oy) = (upstream.re[i], g_im[i]);
            d_beta.0[ch] += ox;
            d_beta.1[ch] += oy;
            d_gamma.0[ch] += ox * nx + oy * ny;
            d_gamma.1[ch] += oy * nx - ox * ny;
            // dn = Gamma^T g with Gamma = [[gr, -gi], [gi, gr]]
            let dnx = gamma.re * ox + gamma.im * oy;
            let dny = -gamma.im * ox + gamma.re * oy;
            gxx += dnx * ux;
            gxy += dnx * uy;
            gyx += dny * ux;
            gyy += dny * uy;
        }
        // W = P / D, P = [[vyy+s, -vxy], [-vxy, vxx+s]], D = s t
        let s = v.det().sqrt();
        let t = (v.xx + v.yy + two * s).sqrt();
        let dd = s * t;
        let q = gxx * (v.yy + s) - (gxy + gyx) * v.xy + gyy * (v.xx + s);
        let grad_theta = |ds: T, dpxx: T, dpyy: T, dpxy: T, dtrace: T| -> T {
            let dt = (dtrace + two * ds) * half / t;
            let d_d = t * ds + s * dt;
            (gxx * dpxx + gyy * dpyy + (gxy + gyx) * dpxy) / dd - q * d_d / (dd * dd)
        };
        let ds_xx = v.yy * half / s;
        let ds_yy = v.xx * half / s;
        let ds_xy = -v.xy / s;
        let g_vxx = grad_theta(ds_xx, ds_xx, T::one() + ds_xx, T::zero(), T::one());
        let g_vyy = grad_theta(ds_yy, T::one() + ds_yy, ds_yy, T::zero(), T::one());
        let g_vxy = grad_theta(ds_xy, ds_xy, ds_xy, -T::one(), T::zero());

        // pass 2: dL/du, then remove the mean
        let (mut sum_x, mut sum_y) = (T::zero(), T::zero());
        let d_im = d_im.as_mut().unwrap();
        for i in channel_values(&z.re, b, c, l, ch) {
            let (ux, uy) = (z.re[i] - mean.re, z_im[i] - mean.im);
            let (ox, oy) = (upstream.re[i], g_im[i]);
            let dnx = gamma.re * ox + gamma.im * oy;
            let dny = -gamma.im * ox + gamma.re * oy;
            let mut dux = w[0][0] * dnx + w[1][0] * dny;
            let mut duy = w[0][1] * dnx + w[1][1] * dny;
            dux += (two * g_vxx * ux + g_vxy * uy) * inv_n;
            duy += (two * g_vyy * uy + g_vxy * ux) * inv_n;
            d_re[i] = dux;
            d_im[i] = duy;
            sum_x += dux;
            sum_y += duy;
        }
        let (mx, my) = (sum_x * inv_n, sum_y * inv_n);
        for i in channel_values(&z.re, b, c, l, ch) {
            d_re[i] -= mx;
            d_im[i] -= my;
        }
    }

    let grad_of = |p: &ComplexTensor<T>, d: (Vec<T>, Vec<T>)| WirtingerGrad {
        shape: vec![c],
        d_x: d.0,
        d_y: (!p.is_real()).then_some(d.1),
    };
    let grad = BnGrad { gamma: grad_of(&p.gamma, d_gamma), beta: grad_of(&p.beta, d_beta) };
    // a real input into a complex layer only receives the real-plane gradient
    let d_im = if z.is_real() { None } else { d_im };
    Ok((ComplexTensor { shape: z.shape.clone(), re: d_re, im: d_im }, grad))
}
