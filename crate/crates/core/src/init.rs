//! Initializations for interspace layers.
//!
//! Every scheme draws the coefficients so that the reconstructed spatial
//! filters follow the kaiming-normal distribution `N(0, 2 / (ci K^2))`.

use crate::error::{param_err, Result};
use crate::fbconv::{FbCoefficients, FilterBasis};
use crate::rng::Rng;
use crate::tensor::{normal_sample, Tensor};

/// Pivot norm below which a Gram–Schmidt step is redrawn.
const GS_BREAKDOWN: f64 = 1e-12;

pub fn kaiming_std(ci: usize, k: usize) -> f64 {
    (2.0 / (ci * k * k) as f64).sqrt()
}

/// Standard basis and kaiming-normal coefficients.
pub fn init_standard(rng: &mut Rng, k: usize, co: usize, ci: usize) -> Result<(FilterBasis, FbCoefficients)> {
    let lam = normal_sample(rng, 0.0, kaiming_std(ci, k), &[co, ci, k * k])?;
    Ok((FilterBasis::standard(0, k), FbCoefficients::new(lam)?))
}

/// Random orthonormal basis (modified Gram–Schmidt over Gaussian proto-elements);
/// spatial coefficients are drawn first and mapped with `lambda = Psi^T phi`.
pub fn init_onb(rng: &mut Rng, k: usize, co: usize, ci: usize) -> Result<(FilterBasis, FbCoefficients)> {
    let kk = k * k;
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(kk);
    while q.len() < kk {
        let mut v: Vec<f64> = (0..kk).map(|_| rng.standard_normal()).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < GS_BREAKDOWN {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        q.push(v);
    }
    let basis = FilterBasis::new(0, Tensor::from_vec(&[kk, k, k], q.concat())?, true)?;

    let phi = normal_sample(rng, 0.0, kaiming_std(ci, k), &[co, ci, kk])?;
    let mut lam = Tensor::zeros(&[co, ci, kk]);
    for f in 0..co * ci {
        let pf = &phi.data()[f * kk..(f + 1) * kk];
        for m in 0..kk {
            // (Psi^T phi)_m = <g^(m), phi>
            lam.data_mut()[f * kk + m] = basis.element(m).iter().zip(pf).map(|(g, p)| g * p).sum();
        }
    }
    Ok((basis, FbCoefficients::new(lam)?))
}

/// Random filter dictionary of `n` elements, rescaled pixelwise to mean `1/n`
/// and (population) variance `1/n - 1/n^2`.
pub fn init_random_fd(
    rng: &mut Rng,
    n: usize,
    k: usize,
    co: usize,
    ci: usize,
) -> Result<(FilterBasis, FbCoefficients)> {
    if n == 0 {
        return param_err("filter dictionary needs at least one element");
    }
    let kk = k * k;
    let elements = if n == 1 {
        // mean 1 and variance 0 leave only the all-ones element
        Tensor::full(&[1, k, k], 1.0)
    } else {
        let mut g = normal_sample(rng, 0.0, 1.0, &[n, k, k])?;
        let nf = n as f64;
        let target_std = (1.0 / nf - 1.0 / (nf * nf)).sqrt();
        for px in 0..kk {
            let (mean, std) = loop {
                let col: Vec<f64> = (0..n).map(|e| g.data()[e * kk + px]).collect();
                let mean = col.iter().sum::<f64>() / nf;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf;
                if var > 0.0 {
                    break (mean, var.sqrt());
                }
                for e in 0..n {
                    g.data_mut()[e * kk + px] = rng.standard_normal();
                }
            };
            for e in 0..n {
                let v = &mut g.data_mut()[e * kk + px];
                *v = target_std * (*v - mean) / std + 1.0 / nf;
            }
        }
        g
    };
    let lam = normal_sample(rng, 0.0, kaiming_std(ci, k), &[co, ci, n])?;
    Ok((FilterBasis::new(0, elements, true)?, FbCoefficients::new(lam)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbconv::{to_interspace, to_spatial, BasisTransform};

    #[test]
    fn kaiming_values() {
        assert_eq!(kaiming_std(2, 1), 1.0);
        assert!((kaiming_std(8, 3) - 0.166_666_666_666_666_7).abs() < 1e-12);
        assert!((kaiming_std(1, 3) - 0.471_404_520_791_031_7).abs() < 1e-12);
    }

    #[test]
    fn standard_basis_elements_are_distinct_pixels() {
        let (b, _) = init_standard(&mut Rng::new(1, 0), 3, 2, 2).unwrap();
        let mut seen = vec![false; 9];
        for n in 0..9 {
            let e = b.element(n);
            assert_eq!(e.iter().filter(|v| **v == 1.0).count(), 1);
            assert_eq!(e.iter().filter(|v| **v == 0.0).count(), 8);
            let pos = e.iter().position(|v| *v == 1.0).unwrap();
            assert!(!seen[pos]);
            seen[pos] = true;
        }
    }

    #[test]
    fn standard_init_equals_direct_kaiming_draw() {
        let (b, c) = init_standard(&mut Rng::new(2, 0), 3, 4, 5).unwrap();
        let h = to_spatial(&b, &c).unwrap();
        let direct = normal_sample(&mut Rng::new(2, 0), 0.0, kaiming_std(5, 3), &[4, 5, 3, 3]).unwrap();
        assert_eq!(h.data(), direct.data());
    }

    #[test]
    fn standard_init_std() {
        let (_, c) = init_standard(&mut Rng::new(3, 0), 3, 64, 200).unwrap();
        let v = c.values.data();
        assert!(v.len() >= 100_000);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        let target = kaiming_std(200, 3);
        assert!((sd / target - 1.0).abs() < 0.03);
    }

    #[test]
    fn onb_is_orthonormal_and_reproduces_phi() {
        for k in [1, 2, 3, 5] {
            let mut r = Rng::new(4, k as u64);
            let (b, c) = init_onb(&mut r, k, 3, 2).unwrap();
            let t = BasisTransform::new(&b).unwrap();
            let gram = t.psi.transpose() * &t.psi;
            let kk = k * k;
            assert!((gram - nalgebra::DMatrix::<f64>::identity(kk, kk)).amax() < 1e-10);

            let h = to_spatial(&b, &c).unwrap();
            let back = to_interspace(&b, &h).unwrap();
            let diff = back.values.data().iter().zip(c.values.data()).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
            assert!(diff < 1e-10);
        }
    }

    #[test]
    fn onb_spatial_coefficients_are_the_drawn_phi() {
        // Draw the basis with one generator, then check phi against a clone
        // that skips straight to the coefficient draw.
        let mut r = Rng::new(5, 0);
        let (b, c) = init_onb(&mut r, 3, 2, 3).unwrap();
        let h = to_spatial(&b, &c).unwrap();
        let mut r2 = Rng::new(5, 0);
        let (_, _) = init_onb(&mut r2, 3, 0, 3).unwrap(); // same basis draws, no coefficients
        let phi = normal_sample(&mut r2, 0.0, kaiming_std(3, 3), &[2, 3, 9]).unwrap();
        let diff = h.data().iter().zip(phi.data()).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        assert!(diff < 1e-10);
    }

    #[test]
    fn onb_k1_is_sign() {
        let mut r = Rng::new(6, 0);
        let (b, c) = init_onb(&mut r, 1, 3, 3).unwrap();
        assert_eq!(b.element(0)[0].abs(), 1.0);
        let h = to_spatial(&b, &c).unwrap();
        for (l, p) in c.values.data().iter().zip(h.data()) {
            assert_eq!(l.abs(), p.abs());
        }
    }

    #[test]
    fn random_fd_pixel_moments() {
        for n in 2..=18 {
            let (b, c) = init_random_fd(&mut Rng::new(7, n as u64), n, 3, 2, 2).unwrap();
            assert_eq!(b.len(), n);
            assert_eq!(c.n(), n);
            let nf = n as f64;
            for px in 0..9 {
                let col: Vec<f64> = (0..n).map(|e| b.element(e)[px]).collect();
                let mean = col.iter().sum::<f64>() / nf;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf;
                assert!((mean - 1.0 / nf).abs() < 1e-12, "N={n} mean {mean}");
                assert!((var - (1.0 / nf - 1.0 / (nf * nf))).abs() < 1e-12, "N={n} var {var}");
            }
        }
    }

    #[test]
    fn random_fd_degenerate_sizes() {
        let (b, _) = init_random_fd(&mut Rng::new(8, 0), 1, 3, 1, 1).unwrap();
        assert_eq!(b.len(), 1);
        assert!(b.element(0).iter().all(|v| *v == 1.0));
        assert!(init_random_fd(&mut Rng::new(8, 0), 0, 3, 1, 1).is_err());
    }

    #[test]
    fn random_fd_spatial_moments() {
        // h = sum_n lambda_n g_n has mean 0 and variance sigma_h^2 for any fixed dictionary.
        let (ci, k) = (4, 3);
        let sigma2 = kaiming_std(ci, k).powi(2);
        let mut r = Rng::new(9, 0);
        let mut vals = Vec::new();
        while vals.len() < 100_000 {
            let (b, c) = init_random_fd(&mut r, 6, k, 8, ci).unwrap();
            vals.extend_from_slice(to_spatial(&b, &c).unwrap().data());
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05 * sigma2.sqrt());
        assert!((var / sigma2 - 1.0).abs() < 0.05);
    }
}
