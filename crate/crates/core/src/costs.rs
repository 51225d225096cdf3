//! Closed-form FLOP and memory cost models, pruning-rate accounting, and
//! instrumented checks of the FLOP formulas against the counting kernels.

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};
use crate::fbconv::{conv2d_masked, fb_forward_counted, ConvArgs, FbCoefficients, FilterBasis, FlopCounter, PruningMask};
use crate::model::{ConvGeometry, Layer, Mode, ModelState};
use crate::rng::Rng;
use crate::tensor::normal_sample;

/// Extents of one convolution: `co x ci x K x K` weights, `h x w` input,
/// `d1 x d2` output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub co: usize,
    pub ci: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub d1: usize,
    pub d2: usize,
}

impl LayerDims {
    /// Stride 1, no padding.
    pub fn valid(co: usize, ci: usize, k: usize, h: usize, w: usize) -> Result<Self> {
        if k == 0 || h < k || w < k {
            return param_err(format!("kernel {k} does not fit a {h}x{w} input"));
        }
        Ok(Self { co, ci, k, h, w, d1: h - k + 1, d2: w - k + 1 })
    }

    pub fn weights(&self) -> u64 {
        (self.co * self.ci * self.k * self.k) as u64
    }
}

impl From<&ConvGeometry> for LayerDims {
    fn from(g: &ConvGeometry) -> Self {
        Self { co: g.co, ci: g.ci, k: g.k, h: g.h, w: g.w, d1: g.d1, d2: g.d2 }
    }
}

fn check_rate(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return param_err(format!("pruning rate {p} outside [0, 1]"));
    }
    Ok(())
}

/// Weights surviving at rate `p`, rounded to the nearest integer.
pub fn kept_weights(total: u64, p: f64) -> u64 {
    ((1.0 - p) * total as f64).round() as u64
}

/// `2 co ci K^2 d1 d2 (1-p)`, plus `2 ci K^4 d1 d2` for the basis stage in IP.
pub fn flops_forward(dims: &LayerDims, p: f64, mode: Mode) -> Result<u64> {
    check_rate(p)?;
    Ok(forward_kept(dims, kept_weights(dims.weights(), p), mode, dims.k * dims.k))
}

fn forward_kept(dims: &LayerDims, kept: u64, mode: Mode, basis_len: usize) -> u64 {
    let plane = (dims.d1 * dims.d2) as u64;
    let overhead = match mode {
        Mode::Sp => 0,
        Mode::Ip => 2 * (dims.ci * basis_len * dims.k * dims.k) as u64 * plane,
    };
    2 * kept * plane + overhead
}

/// Backward costs split by the tensor the gradient is taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BackwardFlops {
    pub input: u64,
    pub coeffs: u64,
    pub basis: u64,
}

impl BackwardFlops {
    pub fn total(&self) -> u64 {
        self.input + self.coeffs + self.basis
    }
}

/// Input gradient `2 co ci K^2 h w (1-p)` (IP adds `2 co K^4 h w`), coefficient
/// gradient `2 co ci K^2 d1 d2 (1-p)`, basis gradient (IP only)
/// `2 co ci K^2 (d1 d2 + (1-p) K^2)`.
pub fn flops_backward(dims: &LayerDims, p: f64, mode: Mode) -> Result<BackwardFlops> {
    check_rate(p)?;
    let kept = kept_weights(dims.weights(), p);
    let k2 = (dims.k * dims.k) as u64;
    let hw = (dims.h * dims.w) as u64;
    let plane = (dims.d1 * dims.d2) as u64;
    let mut out = BackwardFlops { input: 2 * kept * hw, coeffs: 2 * kept * plane, basis: 0 };
    if mode == Mode::Ip {
        out.input += 2 * dims.co as u64 * k2 * k2 * hw;
        out.basis = 2 * dims.weights() * plane + 2 * kept * k2;
    }
    Ok(out)
}

/// Runs the counting kernels on a random layer with exactly
/// `kept_weights(co ci K^2, p)` unmasked weights and returns
/// `(formula count, measured count)` for the forward pass.
pub fn verify_flops_by_instrumentation(dims: &LayerDims, p: f64, mode: Mode, rng: &mut Rng) -> Result<(u64, u64)> {
    let expected = flops_forward(dims, p, mode)?;
    let valid = LayerDims::valid(dims.co, dims.ci, dims.k, dims.h, dims.w)?;
    if valid != *dims {
        return param_err("instrumentation needs stride 1 and no padding");
    }
    let (co, ci, k) = (dims.co, dims.ci, dims.k);
    let total = co * ci * k * k;
    let mut bits = vec![false; total];
    for i in rng.choose(total, kept_weights(total as u64, p) as usize) {
        bits[i] = true;
    }
    let mask = PruningMask::from_bits(&[co, ci, k * k], bits)?;
    let x = normal_sample(rng, 0.0, 1.0, &[ci, dims.h, dims.w])?;
    let mut counter = FlopCounter::default();
    match mode {
        Mode::Sp => {
            let h = normal_sample(rng, 0.0, 1.0, &[co, ci, k, k])?;
            let mask = PruningMask::from_bits(h.shape(), mask.bits().to_vec())?;
            conv2d_masked(&h, Some(&mask), &x, ConvArgs::default(), &mut counter)?;
        }
        Mode::Ip => {
            let basis = FilterBasis::standard(0, k);
            let coeffs = FbCoefficients::new(normal_sample(rng, 0.0, 1.0, &[co, ci, k * k])?)?;
            fb_forward_counted(&basis, &coeffs, &mask, &x, ConvArgs::default(), &mut counter)?;
        }
    }
    Ok((expected, counter.flops))
}

/// Forward FLOPs of the whole model at its current masks: every convolution
/// plus the linear layers (`2` per surviving weight).
pub fn model_forward_flops(model: &ModelState) -> u64 {
    let mut total = 0;
    for g in model.conv_geometry() {
        let kept = model.mask(g.layer).map_or(0, |m| m.popcount()) as u64;
        let mode = if g.interspace { Mode::Ip } else { Mode::Sp };
        total += forward_kept(&LayerDims::from(&g), kept, mode, g.basis_len);
    }
    for (i, l) in model.layers.iter().enumerate() {
        if let Layer::Linear { .. } = l {
            total += 2 * model.mask(i).map_or(0, |m| m.popcount()) as u64;
        }
    }
    total
}

/// Fraction of zero parameters counted two ways.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruningRates {
    /// `1 - ||Lambda||_0 / D`
    pub sp: f64,
    /// `1 - (||Lambda||_0 + sum_j ||F_j||_0) / D`
    pub ip: f64,
}

/// `D` is the dense weight count of all convolutions and linear layers
/// (biases and bases excluded). `||Lambda||_0` counts unmasked weights and
/// `||F_j||_0` the nonzero basis entries.
pub fn pruning_rate(model: &ModelState) -> PruningRates {
    let mut d = 0usize;
    let mut kept = 0usize;
    for (i, l) in model.layers.iter().enumerate() {
        let Some(w) = l.weight() else { continue };
        // an FB layer stands in for co ci K^2 spatial weights
        d += match l {
            Layer::FbConv { coeffs, basis, .. } => {
                let k = model.bases[*basis].k();
                coeffs.co() * coeffs.ci() * k * k
            }
            _ => w.len(),
        };
        kept += model.mask(i).map_or(w.len(), |m| m.popcount());
    }
    let basis_nnz: usize = model.bases.iter().map(|b| b.elements().count_nonzero()).sum();
    if d == 0 {
        return PruningRates { sp: 0.0, ip: 0.0 };
    }
    let d = d as f64;
    PruningRates { sp: 1.0 - kept as f64 / d, ip: 1.0 - (kept + basis_nnz) as f64 / d }
}

/// The rate reported in metrics: the IP-style count for IP models.
pub fn model_pruning_rate(model: &ModelState) -> f64 {
    let r = pruning_rate(model);
    match model.options.mode {
        Mode::Sp => r.sp,
        Mode::Ip => r.ip,
    }
}

/// Storage of `d` 32-bit weights at pruning rate `p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub d: u64,
    pub p: f64,
    /// Mask entropy in bits per entry.
    pub entropy_bits: f64,
    pub raw_bytes: f64,
    /// 32-bit values and column indices per nonzero, 32-bit row offsets.
    pub csr_bytes: f64,
    /// `d (S + 32 (1-p))` bits.
    pub entropy_bytes: f64,
    /// `entropy_bytes / raw_bytes = S / 32 + (1 - p)`
    pub entropy_ratio: f64,
}

/// Binary entropy with `0 log 0 = 0`.
pub fn mask_entropy(p: f64) -> f64 {
    let h = |q: f64| if q <= 0.0 { 0.0 } else { -q * q.log2() };
    h(p) + h(1.0 - p)
}

/// `rows` is the row count of the CSR layout (e.g. `co` for a flattened filter bank).
pub fn mem_report(d: u64, p: f64, rows: u64) -> Result<MemoryReport> {
    check_rate(p)?;
    if d == 0 {
        return param_err("memory report needs d > 0");
    }
    let s = mask_entropy(p);
    let nnz = kept_weights(d, p) as f64;
    let raw_bytes = 4.0 * d as f64;
    let entropy_bytes = d as f64 * (s + 32.0 * (1.0 - p)) / 8.0;
    Ok(MemoryReport {
        d,
        p,
        entropy_bits: s,
        raw_bytes,
        csr_bytes: 8.0 * nnz + 4.0 * (rows + 1) as f64,
        entropy_bytes,
        entropy_ratio: entropy_bytes / raw_bytes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FlopBreakdown {
    pub forward: u64,
    pub backward_input: u64,
    pub backward_coeffs: u64,
    pub backward_basis: u64,
}

impl FlopBreakdown {
    fn of(dims: &LayerDims, p: f64, mode: Mode) -> Result<Self> {
        let b = flops_backward(dims, p, mode)?;
        Ok(Self {
            forward: flops_forward(dims, p, mode)?,
            backward_input: b.input,
            backward_coeffs: b.coeffs,
            backward_basis: b.basis,
        })
    }

    fn add(&mut self, o: &Self) {
        self.forward += o.forward;
        self.backward_input += o.backward_input;
        self.backward_coeffs += o.backward_coeffs;
        self.backward_basis += o.backward_basis;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    pub dims: LayerDims,
    pub p: f64,
    pub sp: FlopBreakdown,
    pub ip: FlopBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TotalCost {
    pub p: f64,
    pub sp: FlopBreakdown,
    pub ip: FlopBreakdown,
}

/// One row per (layer, p) plus totals per p.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub totals: Vec<TotalCost>,
}

pub fn cost_report(geometry: &[ConvGeometry], rates: &[f64]) -> Result<CostReport> {
    let mut layers = Vec::new();
    let mut totals = Vec::new();
    for &p in rates {
        let mut total = TotalCost { p, sp: FlopBreakdown::default(), ip: FlopBreakdown::default() };
        for g in geometry {
            let dims = LayerDims::from(g);
            let row = LayerCost {
                layer: g.layer,
                dims,
                p,
                sp: FlopBreakdown::of(&dims, p, Mode::Sp)?,
                ip: FlopBreakdown::of(&dims, p, Mode::Ip)?,
            };
            total.sp.add(&row.sp);
            total.ip.add(&row.ip);
            layers.push(row);
        }
        totals.push(total);
    }
    Ok(CostReport { layers, totals })
}
