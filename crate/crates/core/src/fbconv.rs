//! Standard and filter-basis (FB) 2D convolutions with analytic gradients,
//! and the change-of-basis rules between spatial and interspace
//! coefficients.
//!
//! All convolutions are cross-correlations with zero padding:
//! `Y[a][i][j] = sum_{b,m,n} h[a][b][m][n] * X[b][m + i*s - pad][n + j*s - pad]`.
//!
//! A filter basis holds `N` elements of shape `K x K`. A layer in interspace
//! form stores coefficients `lambda` of shape `co x ci x N` and reconstructs
//! each spatial filter as `h[a][b] = sum_n lambda[a][b][n] * g[n]`. The
//! forward pass never builds `h`: it correlates every basis element with
//! every input channel once (`Z`), then combines the unmasked coefficients
//! with those responses.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Error, Result};
use crate::tensor::{norm2, Tensor};

/// Largest condition number of `Psi` accepted by [`to_interspace`].
pub const MAX_CONDITION: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvArgs {
    pub stride: usize,
    pub padding: usize,
}

impl Default for ConvArgs {
    fn default() -> Self {
        Self { stride: 1, padding: 0 }
    }
}

impl ConvArgs {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }

    /// Output extents `(d1, d2)` for an `h x w` input and a `k x k` kernel.
    pub fn output_dims(&self, h: usize, w: usize, k: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return param_err("stride must be positive");
        }
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if k == 0 || k > hp || k > wp {
            return shape_err(format!("kernel {k} does not fit padded input {hp}x{wp}"));
        }
        if (hp - k) % self.stride != 0 || (wp - k) % self.stride != 0 {
            return shape_err(format!(
                "stride {} does not tile padded input {hp}x{wp} with kernel {k}",
                self.stride
            ));
        }
        Ok(((hp - k) / self.stride + 1, (wp - k) / self.stride + 1))
    }
}

/// Counts floating point operations; one multiply-add is two FLOPs.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct FlopCounter {
    pub flops: u64,
}

impl FlopCounter {
    #[inline]
    pub(crate) fn mac(&mut self, n: usize) {
        self.flops += 2 * n as u64;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterBasis {
    pub id: usize,
    /// `N x K x K`.
    elements: Tensor,
    pub trainable: bool,
}

impl FilterBasis {
    pub fn new(id: usize, elements: Tensor, trainable: bool) -> Result<Self> {
        let s = elements.shape();
        if s.len() != 3 || s[1] != s[2] || s[0] == 0 || s[1] == 0 {
            return shape_err(format!("basis elements must be N x K x K, got {s:?}"));
        }
        Ok(Self { id, elements, trainable })
    }

    /// The standard basis: element `n` is one at pixel `n` (row-major) and zero elsewhere.
    pub fn standard(id: usize, k: usize) -> Self {
        let kk = k * k;
        let mut e = Tensor::zeros(&[kk, k, k]);
        for n in 0..kk {
            e.data_mut()[n * kk + n] = 1.0;
        }
        Self { id, elements: e, trainable: true }
    }

    pub fn len(&self) -> usize {
        self.elements.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn k(&self) -> usize {
        self.elements.shape()[1]
    }

    pub fn element(&self, n: usize) -> &[f64] {
        let kk = self.k() * self.k();
        &self.elements.data()[n * kk..(n + 1) * kk]
    }

    pub fn elements(&self) -> &Tensor {
        &self.elements
    }

    pub fn elements_mut(&mut self) -> &mut Tensor {
        &mut self.elements
    }

    /// `K^2 x N` matrix whose column `m` is the flattened element `g^(m)`,
    /// i.e. `Psi[n][m] = <g^(m), e^(n)>`.
    pub fn psi(&self) -> DMatrix<f64> {
        let kk = self.k() * self.k();
        DMatrix::from_fn(kk, self.len(), |n, m| self.element(m)[n])
    }
}

/// Interspace coefficients `co x ci x N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FbCoefficients {
    pub values: Tensor,
}

impl FbCoefficients {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 3 {
            return shape_err(format!("coefficients must be co x ci x N, got {:?}", values.shape()));
        }
        Ok(Self { values })
    }

    pub fn co(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn ci(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn n(&self) -> usize {
        self.values.shape()[2]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruningMask {
    shape: Vec<usize>,
    bits: Vec<bool>,
}

impl PruningMask {
    pub fn ones(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), bits: vec![true; shape.iter().product()] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), bits: vec![false; shape.iter().product()] }
    }

    pub fn from_bits(shape: &[usize], bits: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != bits.len() {
            return shape_err(format!("mask shape {shape:?} vs {} bits", bits.len()));
        }
        Ok(Self { shape: shape.to_vec(), bits })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn sparsity(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        1.0 - self.popcount() as f64 / self.bits.len() as f64
    }

    /// Zeroes every masked entry of `t`.
    pub fn apply(&self, t: &mut Tensor) {
        debug_assert_eq!(t.len(), self.bits.len());
        for (v, &b) in t.data_mut().iter_mut().zip(&self.bits) {
            if !b {
                *v = 0.0;
            }
        }
    }

    /// True if every kept position of `self` is also kept in `other`.
    pub fn is_subset_of(&self, other: &PruningMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::from_vec(&self.shape, data).expect("mask shape")
    }
}

/// `psi` and its inverse for a complete basis (`N = K^2`).
#[derive(Debug, Clone)]
pub struct BasisTransform {
    pub psi: DMatrix<f64>,
    pub psi_inv: DMatrix<f64>,
    pub condition: f64,
}

impl BasisTransform {
    pub fn new(basis: &FilterBasis) -> Result<Self> {
        let kk = basis.k() * basis.k();
        if basis.len() != kk {
            return param_err(format!(
                "change of basis needs N = K^2 = {kk} elements, basis has {}",
                basis.len()
            ));
        }
        let psi = basis.psi();
        let sv = psi.clone().singular_values();
        let smax = sv.max();
        let smin = sv.min();
        let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if !(condition <= MAX_CONDITION) {
            return Err(Error::Numeric(format!(
                "basis transform is ill-conditioned (condition number {condition:e})"
            )));
        }
        let psi_inv = psi
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numeric(format!("singular basis (condition number {condition:e})")))?;
        Ok(Self { psi, psi_inv, condition })
    }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

/// `out[i][j] += scale * sum_{m,n} filt[m][n] * x[m + i*s - pad][n + j*s - pad]`.
#[allow(clippy::too_many_arguments)]
#[inline]
fn correlate_acc(
    out: &mut [f64],
    (d1, d2): (usize, usize),
    x: &[f64],
    (h, w): (usize, usize),
    filt: &[f64],
    k: usize,
    args: ConvArgs,
    scale: f64,
) {
    let (s, pad) = (args.stride as isize, args.padding as isize);
    for m in 0..k {
        for n in 0..k {
            let f = filt[m * k + n] * scale;
            if f == 0.0 {
                continue;
            }
            accumulate_shifted(out, (d1, d2), x, (h, w), m as isize - pad, n as isize - pad, s, f);
        }
    }
}

/// `out[i][j] += f * x[r0 + i*s][c0 + j*s]`, skipping out-of-range pixels.
#[allow(clippy::too_many_arguments)]
#[inline]
fn accumulate_shifted(
    out: &mut [f64],
    (d1, d2): (usize, usize),
    x: &[f64],
    (h, w): (usize, usize),
    r0: isize,
    c0: isize,
    s: isize,
    f: f64,
) {
    for i in 0..d1 {
        let r = r0 + i as isize * s;
        if r < 0 || r >= h as isize {
            continue;
        }
        let xrow = &x[r as usize * w..(r as usize + 1) * w];
        let orow = &mut out[i * d2..(i + 1) * d2];
        if s == 1 && c0 >= 0 && c0 as usize + d2 <= w {
            let c0 = c0 as usize;
            for (o, xv) in orow.iter_mut().zip(&xrow[c0..c0 + d2]) {
                *o += f * xv;
            }
        } else {
            for (j, o) in orow.iter_mut().enumerate() {
                let c = c0 + j as isize * s;
                if c >= 0 && c < w as isize {
                    *o += f * xrow[c as usize];
                }
            }
        }
    }
}

/// `out[m][n] += sum_{i,j} dy[i][j] * x[m + i*s - pad][n + j*s - pad]` (kernel gradient).
fn kernel_grad_acc(
    out: &mut [f64],
    k: usize,
    dy: &[f64],
    (d1, d2): (usize, usize),
    x: &[f64],
    (h, w): (usize, usize),
    args: ConvArgs,
) {
    let (s, pad) = (args.stride as isize, args.padding as isize);
    for m in 0..k {
        for n in 0..k {
            let mut acc = 0.0;
            for i in 0..d1 {
                let r = m as isize - pad + i as isize * s;
                if r < 0 || r >= h as isize {
                    continue;
                }
                for j in 0..d2 {
                    let c = n as isize - pad + j as isize * s;
                    if c < 0 || c >= w as isize {
                        continue;
                    }
                    acc += dy[i * d2 + j] * x[r as usize * w + c as usize];
                }
            }
            out[m * k + n] += acc;
        }
    }
}

/// `dx[m + i*s - pad][n + j*s - pad] += filt[m][n] * dy[i][j]` (input gradient).
fn input_grad_acc(
    dx: &mut [f64],
    (h, w): (usize, usize),
    filt: &[f64],
    k: usize,
    dy: &[f64],
    (d1, d2): (usize, usize),
    args: ConvArgs,
) {
    let (s, pad) = (args.stride as isize, args.padding as isize);
    for m in 0..k {
        for n in 0..k {
            let f = filt[m * k + n];
            if f == 0.0 {
                continue;
            }
            for i in 0..d1 {
                let r = m as isize - pad + i as isize * s;
                if r < 0 || r >= h as isize {
                    continue;
                }
                for j in 0..d2 {
                    let c = n as isize - pad + j as isize * s;
                    if c < 0 || c >= w as isize {
                        continue;
                    }
                    dx[r as usize * w + c as usize] += f * dy[i * d2 + j];
                }
            }
        }
    }
}

fn check_input(x: &Tensor, ci: usize) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() != 3 || s[0] != ci {
        return shape_err(format!("input must be {ci} x H x W, got {s:?}"));
    }
    Ok((s[1], s[2]))
}

// ---------------------------------------------------------------------------
// Standard convolution
// ---------------------------------------------------------------------------

/// Cross-correlation of `x: ci x H x W` with `h: co x ci x K x K`.
pub fn conv2d(h: &Tensor, x: &Tensor, args: ConvArgs) -> Result<Tensor> {
    conv2d_masked(h, None, x, args, &mut FlopCounter::default())
}

/// [`conv2d`] that skips masked weights and counts the multiply-adds it performs.
pub fn conv2d_masked(
    h: &Tensor,
    mask: Option<&PruningMask>,
    x: &Tensor,
    args: ConvArgs,
    counter: &mut FlopCounter,
) -> Result<Tensor> {
    let hs = h.shape();
    if hs.len() != 4 || hs[2] != hs[3] {
        return shape_err(format!("weights must be co x ci x K x K, got {hs:?}"));
    }
    let (co, ci, k) = (hs[0], hs[1], hs[2]);
    if let Some(m) = mask {
        if m.len() != h.len() {
            return shape_err("mask not congruent to weights");
        }
    }
    let (hh, ww) = check_input(x, ci)?;
    let (d1, d2) = args.output_dims(hh, ww, k)?;
    let plane = hh * ww;
    let mut y = Tensor::zeros(&[co, d1, d2]);
    let kk = k * k;
    let (s, pad) = (args.stride as isize, args.padding as isize);
    for a in 0..co {
        let out = &mut y.data_mut()[a * d1 * d2..(a + 1) * d1 * d2];
        for b in 0..ci {
            let xb = &x.data()[b * plane..(b + 1) * plane];
            let base = (a * ci + b) * kk;
            for t in 0..kk {
                if let Some(m) = mask {
                    if !m.bits()[base + t] {
                        continue;
                    }
                }
                counter.mac(d1 * d2);
                let f = h.data()[base + t];
                let (mi, ni) = ((t / k) as isize, (t % k) as isize);
                accumulate_shifted(out, (d1, d2), xb, (hh, ww), mi - pad, ni - pad, s, f);
            }
        }
    }
    Ok(y)
}

/// Gradients of a standard convolution: `(dL/dh, dL/dx)`.
pub fn conv2d_backward(h: &Tensor, x: &Tensor, dy: &Tensor, args: ConvArgs) -> Result<(Tensor, Tensor)> {
    let hs = h.shape();
    let (co, ci, k) = (hs[0], hs[1], hs[2]);
    let (hh, ww) = check_input(x, ci)?;
    let (d1, d2) = args.output_dims(hh, ww, k)?;
    if dy.shape() != [co, d1, d2] {
        return shape_err(format!("dL/dy must be {:?}, got {:?}", [co, d1, d2], dy.shape()));
    }
    let kk = k * k;
    let plane = hh * ww;
    let mut dh = Tensor::zeros(hs);
    let mut dx = Tensor::zeros(x.shape());
    for a in 0..co {
        let dya = &dy.data()[a * d1 * d2..(a + 1) * d1 * d2];
        for b in 0..ci {
            let xb = &x.data()[b * plane..(b + 1) * plane];
            let base = (a * ci + b) * kk;
            kernel_grad_acc(&mut dh.data_mut()[base..base + kk], k, dya, (d1, d2), xb, (hh, ww), args);
            input_grad_acc(
                &mut dx.data_mut()[b * plane..(b + 1) * plane],
                (hh, ww),
                &h.data()[base..base + kk],
                k,
                dya,
                (d1, d2),
                args,
            );
        }
    }
    Ok((dh, dx))
}

// ---------------------------------------------------------------------------
// Filter-basis convolution
// ---------------------------------------------------------------------------

fn check_fb(basis: &FilterBasis, coeffs: &FbCoefficients, mask: &PruningMask) -> Result<()> {
    if coeffs.n() != basis.len() {
        return Err(Error::Config(format!(
            "coefficients hold {} entries per filter, basis has {} elements",
            coeffs.n(),
            basis.len()
        )));
    }
    if mask.shape() != coeffs.values.shape() {
        return shape_err(format!(
            "mask {:?} not congruent to coefficients {:?}",
            mask.shape(),
            coeffs.values.shape()
        ));
    }
    Ok(())
}

/// FB convolution. Returns the output `co x d1 x d2` and the basis responses
/// `Z: ci x N x d1 x d2` for reuse in [`fb_backward`].
pub fn fb_forward(
    basis: &FilterBasis,
    coeffs: &FbCoefficients,
    mask: &PruningMask,
    x: &Tensor,
    args: ConvArgs,
) -> Result<(Tensor, Tensor)> {
    fb_forward_counted(basis, coeffs, mask, x, args, &mut FlopCounter::default())
}

pub fn fb_forward_counted(
    basis: &FilterBasis,
    coeffs: &FbCoefficients,
    mask: &PruningMask,
    x: &Tensor,
    args: ConvArgs,
    counter: &mut FlopCounter,
) -> Result<(Tensor, Tensor)> {
    check_fb(basis, coeffs, mask)?;
    let (co, ci, nb, k) = (coeffs.co(), coeffs.ci(), basis.len(), basis.k());
    let (hh, ww) = check_input(x, ci)?;
    let (d1, d2) = args.output_dims(hh, ww, k)?;
    let plane = hh * ww;
    let od = d1 * d2;

    // Stage 1: every basis element against every input channel, once.
    let mut z = Tensor::zeros(&[ci, nb, d1, d2]);
    for b in 0..ci {
        let xb = &x.data()[b * plane..(b + 1) * plane];
        for n in 0..nb {
            let zo = &mut z.data_mut()[(b * nb + n) * od..(b * nb + n + 1) * od];
            correlate_acc(zo, (d1, d2), xb, (hh, ww), basis.element(n), k, args, 1.0);
            counter.mac(k * k * od);
        }
    }

    // Stage 2: combine the unmasked coefficients.
    let mut y = Tensor::zeros(&[co, d1, d2]);
    let lam = coeffs.values.data();
    let bits = mask.bits();
    for a in 0..co {
        let ya = &mut y.data_mut()[a * od..(a + 1) * od];
        for b in 0..ci {
            for n in 0..nb {
                let idx = (a * ci + b) * nb + n;
                if !bits[idx] {
                    continue;
                }
                counter.mac(od);
                let l = lam[idx];
                let zb = &z.data()[(b * nb + n) * od..(b * nb + n + 1) * od];
                for (yv, zv) in ya.iter_mut().zip(zb) {
                    *yv += l * zv;
                }
            }
        }
    }
    Ok((y, z))
}

#[derive(Debug, Clone)]
pub struct FbGradients {
    /// `co x ci x N`, zero at masked positions.
    pub d_lambda: Tensor,
    /// `N x K x K`.
    pub d_basis: Tensor,
    /// `ci x H x W`.
    pub d_x: Tensor,
}

/// Backward pass of [`fb_forward`].
pub fn fb_backward(
    basis: &FilterBasis,
    coeffs: &FbCoefficients,
    mask: &PruningMask,
    x: &Tensor,
    z_cache: &Tensor,
    dl_dy: &Tensor,
    args: ConvArgs,
) -> Result<FbGradients> {
    check_fb(basis, coeffs, mask)?;
    let (co, ci, nb, k) = (coeffs.co(), coeffs.ci(), basis.len(), basis.k());
    let (hh, ww) = check_input(x, ci)?;
    let (d1, d2) = args.output_dims(hh, ww, k)?;
    if z_cache.shape() != [ci, nb, d1, d2] {
        return shape_err(format!(
            "basis responses must be {:?}, got {:?}",
            [ci, nb, d1, d2],
            z_cache.shape()
        ));
    }
    if dl_dy.shape() != [co, d1, d2] {
        return shape_err(format!("dL/dy must be {:?}, got {:?}", [co, d1, d2], dl_dy.shape()));
    }
    let od = d1 * d2;
    let kk = k * k;
    let plane = hh * ww;
    let lam = coeffs.values.data();
    let bits = mask.bits();

    // dL/dlambda[a][b][n] = <dL/dY[a], Z[b][n]>
    let mut d_lambda = Tensor::zeros(coeffs.values.shape());
    for a in 0..co {
        let dya = &dl_dy.data()[a * od..(a + 1) * od];
        for b in 0..ci {
            for n in 0..nb {
                let idx = (a * ci + b) * nb + n;
                if !bits[idx] {
                    continue;
                }
                let zb = &z_cache.data()[(b * nb + n) * od..(b * nb + n + 1) * od];
                d_lambda.data_mut()[idx] = dya.iter().zip(zb).map(|(p, q)| p * q).sum();
            }
        }
    }

    // dL/dg[n] = sum_{a,b} mask * lambda[a][b][n] * dL/dh[a][b],  dL/dh[a][b] = dL/dY[a] * X[b]
    let mut d_basis = Tensor::zeros(basis.elements().shape());
    let mut dh = vec![0.0; kk];
    for a in 0..co {
        let dya = &dl_dy.data()[a * od..(a + 1) * od];
        for b in 0..ci {
            let base = (a * ci + b) * nb;
            if !(0..nb).any(|n| bits[base + n] && lam[base + n] != 0.0) {
                continue;
            }
            dh.iter_mut().for_each(|v| *v = 0.0);
            let xb = &x.data()[b * plane..(b + 1) * plane];
            kernel_grad_acc(&mut dh, k, dya, (d1, d2), xb, (hh, ww), args);
            for n in 0..nb {
                if !bits[base + n] {
                    continue;
                }
                let l = lam[base + n];
                let gn = &mut d_basis.data_mut()[n * kk..(n + 1) * kk];
                for (g, d) in gn.iter_mut().zip(&dh) {
                    *g += l * d;
                }
            }
        }
    }

    // dL/dX through the reconstructed (masked) spatial filters.
    let h = to_spatial_masked(basis, coeffs, Some(mask));
    let mut d_x = Tensor::zeros(x.shape());
    for a in 0..co {
        let dya = &dl_dy.data()[a * od..(a + 1) * od];
        for b in 0..ci {
            let base = (a * ci + b) * kk;
            input_grad_acc(
                &mut d_x.data_mut()[b * plane..(b + 1) * plane],
                (hh, ww),
                &h.data()[base..base + kk],
                k,
                dya,
                (d1, d2),
                args,
            );
        }
    }
    Ok(FbGradients { d_lambda, d_basis, d_x })
}

// ---------------------------------------------------------------------------
// Change of basis
// ---------------------------------------------------------------------------

/// Spatial filters `co x ci x K x K` from interspace coefficients.
pub fn to_spatial(basis: &FilterBasis, coeffs: &FbCoefficients) -> Result<Tensor> {
    if coeffs.n() != basis.len() {
        return Err(Error::Config(format!(
            "coefficients hold {} entries per filter, basis has {} elements",
            coeffs.n(),
            basis.len()
        )));
    }
    Ok(to_spatial_masked(basis, coeffs, None))
}

pub(crate) fn to_spatial_masked(
    basis: &FilterBasis,
    coeffs: &FbCoefficients,
    mask: Option<&PruningMask>,
) -> Tensor {
    let (co, ci, nb, k) = (coeffs.co(), coeffs.ci(), basis.len(), basis.k());
    let kk = k * k;
    let mut h = Tensor::zeros(&[co, ci, k, k]);
    let lam = coeffs.values.data();
    for f in 0..co * ci {
        let hf = &mut h.data_mut()[f * kk..(f + 1) * kk];
        for n in 0..nb {
            if let Some(m) = mask {
                if !m.bits()[f * nb + n] {
                    continue;
                }
            }
            let l = lam[f * nb + n];
            if l == 0.0 {
                continue;
            }
            for (hv, g) in hf.iter_mut().zip(basis.element(n)) {
                *hv += l * g;
            }
        }
    }
    h
}

/// Interspace coefficients of spatial filters `h`, `lambda = Psi^-1 * phi` per filter.
pub fn to_interspace(basis: &FilterBasis, h: &Tensor) -> Result<FbCoefficients> {
    let t = BasisTransform::new(basis)?;
    let hs = h.shape();
    let k = basis.k();
    if hs.len() != 4 || hs[2] != k || hs[3] != k {
        return shape_err(format!("filters must be co x ci x {k} x {k}, got {hs:?}"));
    }
    let kk = k * k;
    let mut out = Tensor::zeros(&[hs[0], hs[1], kk]);
    for f in 0..hs[0] * hs[1] {
        let phi = nalgebra::DVector::from_column_slice(&h.data()[f * kk..(f + 1) * kk]);
        let lam = &t.psi_inv * phi;
        out.data_mut()[f * kk..(f + 1) * kk].copy_from_slice(lam.as_slice());
    }
    FbCoefficients::new(out)
}

/// `dL/dlambda = Psi^T * dL/dphi`, applied to each consecutive `K^2` block of `dl_dphi`.
pub fn transform_gradient(psi: &DMatrix<f64>, dl_dphi: &[f64]) -> Result<Vec<f64>> {
    let rows = psi.nrows();
    if rows == 0 || dl_dphi.len() % rows != 0 {
        return shape_err(format!("gradient length {} is not a multiple of {rows}", dl_dphi.len()));
    }
    let mut out = Vec::with_capacity(dl_dphi.len() / rows * psi.ncols());
    for block in dl_dphi.chunks(rows) {
        let g = nalgebra::DVector::from_column_slice(block);
        out.extend_from_slice((psi.transpose() * g).as_slice());
    }
    Ok(out)
}

/// `H_std = Psi^-T * H_fb * Psi^-1` for a flattened whole-network index set.
pub fn transform_hessian(psi_inv: &DMatrix<f64>, h_fb: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !psi_inv.is_square() || !h_fb.is_square() || psi_inv.nrows() != h_fb.nrows() {
        return shape_err(format!(
            "Hessian {}x{} and transform {}x{} are incompatible",
            h_fb.nrows(),
            h_fb.ncols(),
            psi_inv.nrows(),
            psi_inv.ncols()
        ));
    }
    Ok(psi_inv.transpose() * h_fb * psi_inv)
}

/// Block-diagonal matrix, one block per filter of the flattened index set.
pub fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let r: usize = blocks.iter().map(|b| b.nrows()).sum();
    let c: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(r, c);
    let (mut r0, mut c0) = (0, 0);
    for b in blocks {
        out.view_mut((r0, c0), (b.nrows(), b.ncols())).copy_from(*b);
        r0 += b.nrows();
        c0 += b.ncols();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientBounds {
    /// `(||dL/dlambda||_F, ||F||_F * ||dL/dh||_F)`
    pub coeffs: (f64, f64),
    /// `(||dL/dF||_F, ||lambda||_F * ||dL/dh||_F)`
    pub basis: (f64, f64),
}

/// Both sides of the Cauchy–Schwarz bounds on the interspace gradients,
/// given the spatial gradient `dl_dh: co x ci x K x K`.
pub fn gradient_bound_check(
    basis: &FilterBasis,
    coeffs: &FbCoefficients,
    dl_dh: &Tensor,
) -> Result<GradientBounds> {
    let (co, ci, nb, k) = (coeffs.co(), coeffs.ci(), basis.len(), basis.k());
    if coeffs.n() != nb {
        return Err(Error::Config("coefficient / basis size mismatch".into()));
    }
    if dl_dh.shape() != [co, ci, k, k] {
        return shape_err(format!("dL/dh must be {:?}, got {:?}", [co, ci, k, k], dl_dh.shape()));
    }
    let kk = k * k;
    let mut d_lambda = vec![0.0; co * ci * nb];
    let mut d_basis = vec![0.0; nb * kk];
    for f in 0..co * ci {
        let dh = &dl_dh.data()[f * kk..(f + 1) * kk];
        for n in 0..nb {
            let g = basis.element(n);
            d_lambda[f * nb + n] = g.iter().zip(dh).map(|(a, b)| a * b).sum();
            let l = coeffs.values.data()[f * nb + n];
            for (acc, d) in d_basis[n * kk..(n + 1) * kk].iter_mut().zip(dh) {
                *acc += l * d;
            }
        }
    }
    let dh_norm = norm2(dl_dh.data());
    Ok(GradientBounds {
        coeffs: (norm2(&d_lambda), norm2(basis.elements().data()) * dh_norm),
        basis: (norm2(&d_basis), norm2(coeffs.values.data()) * dh_norm),
    })
}
