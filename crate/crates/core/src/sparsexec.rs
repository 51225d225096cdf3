//! Compressed sparse row matrices and a dense-vs-CSR timing harness for
//! convolutions lowered to matrix-vector products.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::fbconv::{ConvArgs, FbCoefficients, FilterBasis, PruningMask};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsrMatrix {
    pub rows: usize,
    pub cols: usize,
    pub row_offsets: Vec<usize>,
    pub col_indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Checks offsets, index bounds and strictly increasing columns per row.
    pub fn validate(&self) -> Result<()> {
        let ok_offsets = self.row_offsets.len() == self.rows + 1
            && self.row_offsets.first() == Some(&0)
            && self.row_offsets.last() == Some(&self.values.len())
            && self.row_offsets.windows(2).all(|w| w[0] <= w[1])
            && self.col_indices.len() == self.values.len();
        if !ok_offsets {
            return shape_err("inconsistent CSR offsets");
        }
        for r in 0..self.rows {
            let cols = &self.col_indices[self.row_offsets[r]..self.row_offsets[r + 1]];
            if cols.iter().any(|&c| c >= self.cols) || cols.windows(2).any(|w| w[0] >= w[1]) {
                return shape_err(format!("row {r}: column indices out of range or unsorted"));
            }
        }
        Ok(())
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.rows, self.cols]);
        for r in 0..self.rows {
            for k in self.row_offsets[r]..self.row_offsets[r + 1] {
                t.data_mut()[r * self.cols + self.col_indices[k]] = self.values[k];
            }
        }
        t
    }
}

fn matrix_dims(m: &Tensor) -> Result<(usize, usize)> {
    match m.shape() {
        [r, c] => Ok((*r, *c)),
        s => shape_err(format!("expected a matrix, got shape {s:?}")),
    }
}

/// Keeps entries with `|v| > tol`.
pub fn csr_from_dense(m: &Tensor, tol: f64) -> Result<CsrMatrix> {
    let (rows, cols) = matrix_dims(m)?;
    let mut row_offsets = Vec::with_capacity(rows + 1);
    let mut col_indices = Vec::new();
    let mut values = Vec::new();
    row_offsets.push(0);
    for r in 0..rows {
        for (c, &v) in m.data()[r * cols..(r + 1) * cols].iter().enumerate() {
            if v.abs() > tol {
                col_indices.push(c);
                values.push(v);
            }
        }
        row_offsets.push(values.len());
    }
    Ok(CsrMatrix { rows, cols, row_offsets, col_indices, values })
}

pub fn csr_matvec(a: &CsrMatrix, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != a.cols {
        return shape_err(format!("vector of {} for {} columns", x.len(), a.cols));
    }
    let mut y = vec![0.0; a.rows];
    csr_matvec_into(a, x, &mut y);
    Ok(y)
}

#[inline]
fn csr_matvec_into(a: &CsrMatrix, x: &[f64], y: &mut [f64]) {
    for (r, out) in y.iter_mut().enumerate() {
        let (lo, hi) = (a.row_offsets[r], a.row_offsets[r + 1]);
        *out = a.col_indices[lo..hi].iter().zip(&a.values[lo..hi]).map(|(&c, v)| v * x[c]).sum();
    }
}

pub fn dense_matvec(m: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    let (rows, cols) = matrix_dims(m)?;
    if x.len() != cols {
        return shape_err(format!("vector of {} for {cols} columns", x.len()));
    }
    let mut y = vec![0.0; rows];
    dense_matvec_into(m.data(), cols, x, &mut y);
    Ok(y)
}

#[inline]
fn dense_matvec_into(data: &[f64], cols: usize, x: &[f64], y: &mut [f64]) {
    for (r, out) in y.iter_mut().enumerate() {
        *out = data[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// A convolution lowered to one matrix-vector product per output position:
/// every row `(alpha, position)` holds filter `alpha` flattened over
/// `(beta, K, K)`, and the vector is one `ci K^2` input patch. The filter
/// bank is repeated for each of the `d1 d2` positions so that the matrix has
/// the full `co d1 d2` rows of the layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoweredConv {
    pub matrix: Tensor,
}

impl LoweredConv {
    pub fn shape(&self) -> (usize, usize) {
        (self.matrix.shape()[0], self.matrix.shape()[1])
    }
}

fn filter_rows(h: &Tensor) -> Result<(usize, usize)> {
    match h.shape() {
        [co, ci, k1, k2] if k1 == k2 => Ok((*co, ci * k1 * k2)),
        s => shape_err(format!("weights must be co x ci x K x K, got {s:?}")),
    }
}

/// Spatial layer `h` (masked entries already zero) on an input of `h x w`.
pub fn lower_conv_to_matvec(h: &Tensor, input_hw: (usize, usize), args: ConvArgs) -> Result<LoweredConv> {
    let (co, cols) = filter_rows(h)?;
    let k = h.shape()[2];
    let (d1, d2) = args.output_dims(input_hw.0, input_hw.1, k)?;
    let positions = d1 * d2;
    let mut m = Tensor::zeros(&[co * positions, cols]);
    for a in 0..co {
        let row = &h.data()[a * cols..(a + 1) * cols];
        for p in 0..positions {
            let r = a * positions + p;
            m.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(row);
        }
    }
    Ok(LoweredConv { matrix: m })
}

/// Interspace layer in two stages: a dense block-diagonal basis stage
/// `(ci N) x (ci K^2)` applied to the patch, independent of the mask, and a
/// sparse coefficient stage `(co d1 d2) x (ci N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoweredFbConv {
    pub basis_stage: Tensor,
    pub coeff_stage: LoweredConv,
}

pub fn lower_fb_to_matvec(
    basis: &FilterBasis,
    coeffs: &FbCoefficients,
    mask: &PruningMask,
    input_hw: (usize, usize),
    args: ConvArgs,
) -> Result<LoweredFbConv> {
    let (co, ci, n, k) = (coeffs.co(), coeffs.ci(), coeffs.n(), basis.k());
    if n != basis.len() || mask.len() != coeffs.values.len() {
        return shape_err("coefficients, basis and mask disagree");
    }
    let kk = k * k;
    let mut stage1 = Tensor::zeros(&[ci * n, ci * kk]);
    for b in 0..ci {
        for e in 0..n {
            let row = (b * n + e) * ci * kk + b * kk;
            stage1.data_mut()[row..row + kk].copy_from_slice(basis.element(e));
        }
    }
    let mut lam = coeffs.values.clone();
    mask.apply(&mut lam);
    // a co x (ci N) x 1 x 1 "filter" reuses the spatial lowering
    let lam = lam.reshape(&[co, ci * n, 1, 1])?;
    let (d1, d2) = args.output_dims(input_hw.0, input_hw.1, k)?;
    let coeff_stage = lower_conv_to_matvec(&lam, (d1, d2), ConvArgs::default())?;
    Ok(LoweredFbConv { basis_stage: stage1, coeff_stage })
}

/// Patch matrix `(ci K^2) x (d1 d2)` of `x` (zero padding applied).
pub fn im2col(x: &Tensor, k: usize, args: ConvArgs) -> Result<Tensor> {
    let (ci, hh, ww) = match x.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return shape_err(format!("input must be ci x h x w, got {s:?}")),
    };
    let (d1, d2) = args.output_dims(hh, ww, k)?;
    let mut out = Tensor::zeros(&[ci * k * k, d1 * d2]);
    let pad = args.padding as isize;
    for b in 0..ci {
        for i in 0..k {
            for j in 0..k {
                let row = (b * k + i) * k + j;
                for o1 in 0..d1 {
                    for o2 in 0..d2 {
                        let y = (o1 * args.stride + i) as isize - pad;
                        let xq = (o2 * args.stride + j) as isize - pad;
                        if y >= 0 && xq >= 0 && (y as usize) < hh && (xq as usize) < ww {
                            out.data_mut()[row * d1 * d2 + o1 * d2 + o2] =
                                x.data()[(b * hh + y as usize) * ww + xq as usize];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Row-major matrix product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = matrix_dims(a)?;
    let (k2, m) = matrix_dims(b)?;
    if k != k2 {
        return shape_err(format!("inner dimensions {k} and {k2} differ"));
    }
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..n {
        for t in 0..k {
            let av = a.data()[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data()[t * m..(t + 1) * m];
            for (o, bv) in out.data_mut()[i * m..(i + 1) * m].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// Restricts the calling thread to the CPU it currently runs on. Returns
/// whether pinning took effect.
pub fn pin_to_one_core() -> bool {
    #[cfg(target_os = "linux")]
    {
        // SAFETY: plain syscalls on a zero-initialized cpu_set_t owned by this frame.
        unsafe {
            let cpu = libc::sched_getcpu();
            if cpu < 0 {
                return false;
            }
            let mut set: libc::cpu_set_t = std::mem::zeroed();
            libc::CPU_SET(cpu as usize, &mut set);
            libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) == 0
        }
    }
    #[cfg(not(target_os = "linux"))]
    {
        false
    }
}

/// Shape of one benchmarked product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchLayer {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl BenchLayer {
    /// Lowered shape of a `co x ci x K x K` convolution with `d1 x d2` outputs.
    pub fn from_conv(name: &str, co: usize, ci: usize, k: usize, d1: usize, d2: usize) -> Self {
        Self { name: name.into(), rows: co * d1 * d2, cols: ci * k * k }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub layer: String,
    pub p: f64,
    /// Mean seconds per product.
    pub t_dense: f64,
    pub t_csr: f64,
    pub t_dense_median: f64,
    pub t_csr_median: f64,
    /// `t_dense / t_csr` of the means.
    pub speedup: f64,
    pub reps: usize,
    /// Products per timed sample (raised until the timer resolution is below 1%).
    pub inner: usize,
    /// Largest deviation between the dense and CSR results.
    pub max_abs_err: f64,
    /// Raw per-sample seconds per product.
    #[serde(skip)]
    pub dense_samples: Vec<f64>,
    #[serde(skip)]
    pub csr_samples: Vec<f64>,
}

fn timer_resolution() -> Duration {
    let mut best = Duration::from_secs(1);
    for _ in 0..50 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

fn stats(samples: &[f64]) -> (f64, f64) {
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let mid = s.len() / 2;
    let median = if s.len() % 2 == 0 { 0.5 * (s[mid - 1] + s[mid]) } else { s[mid] };
    (mean, median)
}

/// Times dense and CSR products for each layer and sparsity, single-threaded
/// after one warm-up product. Weights are Gaussian with exactly
/// `round((1-p) rows cols)` nonzeros at random positions.
pub fn bench_speedup(layers: &[BenchLayer], sparsities: &[f64], reps: usize, rng: &mut Rng) -> Result<Vec<BenchRow>> {
    if reps == 0 {
        return param_err("at least one repetition required");
    }
    let resolution = timer_resolution().as_secs_f64();
    let mut rows = Vec::new();
    for layer in layers {
        for &p in sparsities {
            if !(0.0..=1.0).contains(&p) {
                return param_err(format!("sparsity {p} outside [0, 1]"));
            }
            let len = layer.rows * layer.cols;
            let mut dense = Tensor::zeros(&[layer.rows, layer.cols]);
            let nnz = ((1.0 - p) * len as f64).round() as usize;
            for i in rng.choose(len, nnz) {
                // nonzero by construction so the CSR count is exact
                dense.data_mut()[i] = rng.standard_normal() + 4.0 * rng.standard_normal().signum();
            }
            let csr = csr_from_dense(&dense, 0.0)?;
            let x: Vec<f64> = (0..layer.cols).map(|_| rng.standard_normal()).collect();
            let mut yd = vec![0.0; layer.rows];
            let mut yc = vec![0.0; layer.rows];
            dense_matvec_into(dense.data(), layer.cols, &x, &mut yd);
            csr_matvec_into(&csr, &x, &mut yc);
            let max_abs_err = yd.iter().zip(&yc).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

            let time = |inner: usize, f: &mut dyn FnMut()| {
                let t = Instant::now();
                for _ in 0..inner {
                    f();
                }
                t.elapsed().as_secs_f64()
            };
            let mut inner = 1;
            loop {
                let fast = time(inner, &mut || csr_matvec_into(&csr, &x, &mut yc));
                if fast >= 100.0 * resolution || inner >= 1 << 20 {
                    break;
                }
                inner *= 2;
            }
            let mut ds = Vec::with_capacity(reps);
            let mut cs = Vec::with_capacity(reps);
            for _ in 0..reps {
                ds.push(time(inner, &mut || dense_matvec_into(dense.data(), layer.cols, &x, &mut yd)) / inner as f64);
                cs.push(time(inner, &mut || csr_matvec_into(&csr, &x, &mut yc)) / inner as f64);
            }
            std::hint::black_box((&yd, &yc));
            let (t_dense, t_dense_median) = stats(&ds);
            let (t_csr, t_csr_median) = stats(&cs);
            rows.push(BenchRow {
                layer: layer.name.clone(),
                p,
                t_dense,
                t_csr,
                t_dense_median,
                t_csr_median,
                speedup: t_dense / t_csr,
                reps,
                inner,
                max_abs_err,
                dense_samples: ds,
                csr_samples: cs,
            });
        }
    }
    Ok(rows)
}
