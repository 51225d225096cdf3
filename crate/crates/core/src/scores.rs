//! Pruning scores (random, magnitude, SNIP, GraSP, SynFlow) and mask
//! construction from scores.
//!
//! Scores are computed for the weight tensor of every prunable layer: spatial
//! weights for SP layers, FB coefficients for IP layers.

use crate::data::Dataset;
use crate::error::{param_err, shape_err, Result};
use crate::fbconv::PruningMask;
use crate::model::ModelState;
use crate::rng::Rng;
use crate::tensor::{normal_sample, top_k_indices, Tensor};

/// One score tensor per scored layer, congruent to that layer's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub layers: Vec<usize>,
    pub scores: Vec<Tensor>,
}

impl ScoreSet {
    pub fn total_len(&self) -> usize {
        self.scores.iter().map(|t| t.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.scores.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    fn from_flat(layers: Vec<usize>, shapes: &[Vec<usize>], flat: Vec<f64>) -> Result<Self> {
        let mut scores = Vec::with_capacity(shapes.len());
        let mut at = 0;
        for s in shapes {
            let n: usize = s.iter().product();
            scores.push(Tensor::from_vec(s, flat[at..at + n].to_vec())?);
            at += n;
        }
        Ok(Self { layers, scores })
    }
}

/// Number of entries kept at rate `p` out of `d`: `floor((1-p) d)`, with a
/// small allowance so that e.g. `p = 0.9, d = 10` keeps 1 despite `1 - 0.9 < 0.1`.
pub fn kept_count(d: usize, p: f64) -> usize {
    (((1.0 - p) * d as f64) + 1e-9).floor().min(d as f64) as usize
}

fn check_rate(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return param_err(format!("pruning rate {p} outside [0, 1]"));
    }
    Ok(())
}

fn weight_shapes(model: &ModelState, layers: &[usize]) -> Vec<Vec<usize>> {
    layers.iter().map(|&l| model.weight(l).expect("scored layer has weights").shape().to_vec()).collect()
}

/// Concatenated weights of `layers`.
pub fn gather_weights(model: &ModelState, layers: &[usize]) -> Vec<f64> {
    layers.iter().flat_map(|&l| model.weight(l).unwrap().data().iter().copied()).collect()
}

/// Inverse of [`gather_weights`].
pub fn scatter_weights(model: &mut ModelState, layers: &[usize], flat: &[f64]) -> Result<()> {
    let total: usize = layers.iter().map(|&l| model.weight(l).map_or(0, |w| w.len())).sum();
    if total != flat.len() {
        return shape_err(format!("{} values for {total} weights", flat.len()));
    }
    let mut at = 0;
    for &l in layers {
        let w = model.weight_mut(l).unwrap();
        let n = w.len();
        w.data_mut().copy_from_slice(&flat[at..at + n]);
        at += n;
    }
    Ok(())
}

/// I.i.d. standard normal scores; independent of the parameter values.
pub fn score_random(model: &ModelState, rng: &mut Rng) -> Result<ScoreSet> {
    let layers = model.prunable_layers();
    let scores = weight_shapes(model, &layers)
        .iter()
        .map(|s| normal_sample(rng, 0.0, 1.0, s))
        .collect::<Result<_>>()?;
    Ok(ScoreSet { layers, scores })
}

pub fn score_magnitude(model: &ModelState) -> ScoreSet {
    let layers = model.prunable_layers();
    let scores = layers
        .iter()
        .map(|&l| {
            let mut t = model.weight(l).unwrap().clone();
            t.data_mut().iter_mut().for_each(|v| *v = v.abs());
            t
        })
        .collect();
    ScoreSet { layers, scores }
}

/// `|g * theta|` elementwise.
pub fn snip_from_gradient(theta: &[f64], grad: &[f64]) -> Vec<f64> {
    theta.iter().zip(grad).map(|(t, g)| (t * g).abs()).collect()
}

/// `-(H g) * theta` elementwise.
pub fn grasp_from_hvp(theta: &[f64], hg: &[f64]) -> Vec<f64> {
    theta.iter().zip(hg).map(|(t, h)| -h * t).collect()
}

/// Central-difference Hessian-vector product of the function whose gradient
/// is `grad`: `(grad(theta + eps v) - grad(theta - eps v)) / (2 eps)` with
/// `eps = 1e-4 (1 + max|theta|)`.
pub fn hvp_fd<G>(grad: G, theta: &[f64], v: &[f64]) -> Result<Vec<f64>>
where
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if theta.len() != v.len() {
        return shape_err("direction does not match parameters");
    }
    if v.iter().all(|x| *x == 0.0) {
        return Ok(vec![0.0; v.len()]);
    }
    let eps = 1e-4 * (1.0 + theta.iter().fold(0.0f64, |m, x| m.max(x.abs())));
    let shifted = |sign: f64| -> Vec<f64> { theta.iter().zip(v).map(|(t, d)| t + sign * eps * d).collect() };
    let gp = grad(&shifted(1.0))?;
    let gm = grad(&shifted(-1.0))?;
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect())
}

/// Fixed batches of a scoring pass, drawn from a shuffled order.
pub fn score_batches(data: &Dataset, batch_size: usize, n_batches: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if data.is_empty() || n_batches == 0 || batch_size == 0 {
        return param_err("scoring needs a non-empty batch stream");
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut order);
    Ok((0..n_batches)
        .map(|b| (0..batch_size).map(|j| order[(b * batch_size + j) % order.len()]).collect())
        .collect())
}

/// Loss gradient with respect to the weights of `layers`, averaged over the batches.
fn mean_weight_grad(model: &ModelState, layers: &[usize], data: &Dataset, batches: &[Vec<usize>]) -> Result<Vec<f64>> {
    let slots: Vec<usize> = layers.iter().map(|&l| model.weight_slot(l).unwrap()).collect();
    let mut acc: Vec<f64> = vec![0.0; layers.iter().map(|&l| model.weight(l).unwrap().len()).sum()];
    for b in batches {
        let xs: Vec<&Tensor> = b.iter().map(|&i| &data.images[i]).collect();
        let ys: Vec<usize> = b.iter().map(|&i| data.labels[i]).collect();
        let (_, _, g) = model.loss_and_grads(&xs, &ys, true)?;
        let mut at = 0;
        for &s in &slots {
            for v in g.tensors[s].data() {
                acc[at] += v;
                at += 1;
            }
        }
    }
    let n = batches.len() as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    Ok(acc)
}

pub fn score_snip(model: &ModelState, data: &Dataset, batches: &[Vec<usize>]) -> Result<ScoreSet> {
    if batches.is_empty() {
        return param_err("SNIP needs at least one batch");
    }
    let layers = model.prunable_layers();
    let g = mean_weight_grad(model, &layers, data, batches)?;
    let theta = gather_weights(model, &layers);
    ScoreSet::from_flat(layers.clone(), &weight_shapes(model, &layers), snip_from_gradient(&theta, &g))
}

pub fn score_grasp(model: &ModelState, data: &Dataset, batches: &[Vec<usize>]) -> Result<ScoreSet> {
    if batches.is_empty() {
        return param_err("GraSP needs at least one batch");
    }
    let layers = model.prunable_layers();
    let g = mean_weight_grad(model, &layers, data, batches)?;
    let theta = gather_weights(model, &layers);
    let grad_at = |t: &[f64]| {
        let mut m = model.clone();
        scatter_weights(&mut m, &layers, t)?;
        mean_weight_grad(&m, &layers, data, batches)
    };
    let hg = hvp_fd(grad_at, &theta, &g)?;
    ScoreSet::from_flat(layers.clone(), &weight_shapes(model, &layers), grasp_from_hvp(&theta, &hg))
}

/// `|dR/d|theta|| * |theta|` where `R` is the output sum of the network with
/// absolute-valued weights and bases, zero biases, fed an all-ones input.
pub fn score_synflow(model: &ModelState) -> Result<ScoreSet> {
    let mut lin = model.clone();
    for t in lin.params_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = v.abs());
    }
    for i in 0..lin.layers.len() {
        if let Some(b) = lin.bias_mut(i) {
            b.fill(0.0);
        }
    }
    let ones = Tensor::full(lin.input_shape(), 1.0);
    let cache = lin.forward(&[&ones])?;
    let douts = vec![Tensor::full(cache.logits[0].shape(), 1.0)];
    let grads = lin.backward_from(&cache, douts, false)?;
    let layers = model.prunable_layers();
    let scores = layers
        .iter()
        .map(|&l| {
            let s = lin.weight_slot(l).unwrap();
            let mut t = grads.tensors[s].clone();
            for (v, w) in t.data_mut().iter_mut().zip(lin.weight(l).unwrap().data()) {
                *v = v.abs() * w;
            }
            t
        })
        .collect();
    Ok(ScoreSet { layers, scores })
}

/// Keeps the `floor((1-p) d)` highest scores across all layers.
pub fn mask_global(scores: &ScoreSet, p: f64) -> Result<Vec<PruningMask>> {
    check_rate(p)?;
    let flat = scores.flat();
    let mut bits = vec![false; flat.len()];
    for i in top_k_indices(&flat, kept_count(flat.len(), p))? {
        bits[i] = true;
    }
    let mut out = Vec::with_capacity(scores.scores.len());
    let mut at = 0;
    for t in &scores.scores {
        out.push(PruningMask::from_bits(t.shape(), bits[at..at + t.len()].to_vec())?);
        at += t.len();
    }
    Ok(out)
}

/// Keeps the `floor((1-p_l) d_l)` highest scores of each layer.
pub fn mask_layerwise(scores: &ScoreSet, rates: &[f64]) -> Result<Vec<PruningMask>> {
    if rates.len() != scores.scores.len() {
        return param_err("one pruning rate per scored layer required");
    }
    scores
        .scores
        .iter()
        .zip(rates)
        .map(|(t, &p)| {
            check_rate(p)?;
            let mut bits = vec![false; t.len()];
            for i in top_k_indices(t.data(), kept_count(t.len(), p))? {
                bits[i] = true;
            }
            PruningMask::from_bits(t.shape(), bits)
        })
        .collect()
}

/// Installs masks produced for `scores.layers`.
pub fn install_masks(model: &mut ModelState, layers: &[usize], masks: Vec<PruningMask>) -> Result<()> {
    if layers.len() != masks.len() {
        return param_err("one mask per layer required");
    }
    for (&l, m) in layers.iter().zip(masks) {
        model.set_mask(l, m)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthSpec};
    use crate::model::{streams, BuildOptions, LayerSpec, Mode, ModelSpec, Sharing};
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn mini(mode: Mode, sharing: Sharing, seed: u64) -> ModelState {
        ModelState::build(&ModelSpec::mini_vgg(1, 12, 4), &BuildOptions::new(mode, sharing), seed).unwrap()
    }

    fn data() -> Dataset {
        synth_dataset(&SynthSpec { classes: 4, samples: 40, size: 12, noise: 0.2 }, &mut Rng::new(1, streams::DATA_TRAIN))
            .unwrap()
    }

    #[test]
    fn kept_count_floor() {
        assert_eq!(kept_count(10, 0.85), 1);
        assert_eq!(kept_count(10, 0.9), 1);
        assert_eq!(kept_count(10, 0.0), 10);
        assert_eq!(kept_count(10, 1.0), 0);
        assert_eq!(kept_count(7, 0.5), 3);
    }

    #[test]
    fn global_mask_endpoints() {
        let s = ScoreSet { layers: vec![0, 1], scores: vec![Tensor::full(&[2, 3], 1.0), Tensor::full(&[4], 2.0)] };
        assert!(mask_global(&s, 0.0).unwrap().iter().all(|m| m.popcount() == m.len()));
        assert!(mask_global(&s, 1.0).unwrap().iter().all(|m| m.popcount() == 0));
        let m = mask_global(&s, 0.85).unwrap();
        assert_eq!(m.iter().map(|m| m.popcount()).sum::<usize>(), 1);
        assert_eq!(m[1].bits(), &[true, false, false, false]);
        assert!(mask_global(&s, -0.1).is_err());
        let m = mask_layerwise(&s, &[0.5, 0.25]).unwrap();
        assert_eq!((m[0].popcount(), m[1].popcount()), (3, 3));
    }

    #[test]
    fn random_scores() {
        let m = mini(Mode::Sp, Sharing::Fine, 0);
        let a = score_random(&m, &mut Rng::new(3, 2)).unwrap();
        assert_eq!(a, score_random(&m, &mut Rng::new(3, 2)).unwrap());
        let mut other = m.clone();
        let mut w = gather_weights(&other, &other.prunable_layers());
        w.reverse();
        let layers = other.prunable_layers();
        scatter_weights(&mut other, &layers, &w).unwrap();
        assert_eq!(a, score_random(&other, &mut Rng::new(3, 2)).unwrap());

        // global pruning of i.i.d. scores keeps about 1-p of every layer
        let spec = ModelSpec {
            input: [4, 6, 6],
            layers: vec![
                LayerSpec::Conv { out_channels: 40, kernel: 3, stride: 1, padding: 1, group: None, prunable: true },
                LayerSpec::Conv { out_channels: 30, kernel: 3, stride: 1, padding: 1, group: None, prunable: true },
            ],
        };
        let big = ModelState::build(&spec, &BuildOptions::new(Mode::Sp, Sharing::Fine), 0).unwrap();
        let masks = mask_global(&score_random(&big, &mut Rng::new(1, 1)).unwrap(), 0.7).unwrap();
        for mk in masks {
            let n = mk.len() as f64;
            let sigma = (n * 0.3 * 0.7).sqrt();
            assert!((mk.popcount() as f64 - 0.3 * n).abs() < 3.0 * sigma + 1.0, "{} of {n}", mk.popcount());
        }
    }

    #[test]
    fn magnitude_scores() {
        let spec = ModelSpec { input: [3, 1, 1], layers: vec![LayerSpec::Flatten, LayerSpec::Linear { out_features: 1, prunable: true }] };
        let mut m = ModelState::build(&spec, &BuildOptions::new(Mode::Sp, Sharing::Fine), 0).unwrap();
        m.weight_mut(1).unwrap().data_mut().copy_from_slice(&[-3.0, 0.5, 2.0]);
        assert_eq!(score_magnitude(&m).scores[0].data(), &[3.0, 0.5, 2.0]);
        m.weight_mut(1).unwrap().fill(0.0);
        assert_eq!(score_magnitude(&m).scores[0].data(), &[0.0; 3]);
    }

    #[test]
    fn snip_one_parameter() {
        // L = (lambda x - y)^2 / 2 at lambda = 2, x = y = 1: dL/dlambda = 1
        let (lam, x, y) = (2.0, 1.0, 1.0);
        let g = (lam * x - y) * x;
        assert_eq!(snip_from_gradient(&[lam], &[g]), vec![2.0]);
        assert_eq!(snip_from_gradient(&[0.0, 0.0], &[1.0, -4.0]), vec![0.0, 0.0]);
    }

    fn quad_grad(t: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![t[0], 2.0 * t[1]])
    }

    #[test]
    fn hvp_on_quadratic() {
        let hv = hvp_fd(quad_grad, &[0.3, -0.2], &[1.0, 1.0]).unwrap();
        assert!((hv[0] - 1.0).abs() < 1e-6 && (hv[1] - 2.0).abs() < 1e-6);
        assert_eq!(hvp_fd(quad_grad, &[0.3, -0.2], &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);

        // L = theta^T A theta / 2, theta = (1, 1): g = (1, 2), Hg = (1, 4)
        let theta = [1.0, 1.0];
        let g = quad_grad(&theta).unwrap();
        let hg = hvp_fd(quad_grad, &theta, &g).unwrap();
        let s = grasp_from_hvp(&theta, &hg);
        assert!((s[0] + 1.0).abs() < 1e-6 && (s[1] + 4.0).abs() < 1e-6);
    }

    #[test]
    fn hvp_symmetric_on_network() {
        let m = mini(Mode::Ip, Sharing::Fine, 2);
        let d = data();
        let batches = score_batches(&d, 8, 2, &mut Rng::new(0, 0)).unwrap();
        let layers = m.prunable_layers();
        let theta = gather_weights(&m, &layers);
        let grad = |t: &[f64]| {
            let mut c = m.clone();
            scatter_weights(&mut c, &layers, t)?;
            mean_weight_grad(&c, &layers, &d, &batches)
        };
        let mut rng = Rng::new(4, 4);
        // unit directions keep the perturbation inside one linear region of the ReLU network
        let mut unit = || {
            let v: Vec<f64> = (0..theta.len()).map(|_| rng.standard_normal()).collect();
            let n = crate::tensor::norm2(&v);
            v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let (v, w) = (unit(), unit());
        let hv = hvp_fd(grad, &theta, &v).unwrap();
        let hw = hvp_fd(grad, &theta, &w).unwrap();
        let a: f64 = hv.iter().zip(&w).map(|(x, y)| x * y).sum();
        let b: f64 = hw.iter().zip(&v).map(|(x, y)| x * y).sum();
        assert!((a - b).abs() < 1e-4 * (1.0 + a.abs()), "{a} vs {b}");
    }

    #[test]
    fn snip_gradient_matches_finite_differences() {
        let m = mini(Mode::Ip, Sharing::Coarse, 5);
        let d = data();
        let batches = score_batches(&d, 4, 1, &mut Rng::new(2, 0)).unwrap();
        let layers = m.prunable_layers();
        let g = mean_weight_grad(&m, &layers, &d, &batches).unwrap();
        let theta = gather_weights(&m, &layers);
        let loss = |t: &[f64]| {
            let mut c = m.clone();
            scatter_weights(&mut c, &layers, t).unwrap();
            let b = &batches[0];
            let xs: Vec<&Tensor> = b.iter().map(|&i| &d.images[i]).collect();
            let ys: Vec<usize> = b.iter().map(|&i| d.labels[i]).collect();
            c.loss_and_grads(&xs, &ys, false).unwrap().0
        };
        let mut rng = Rng::new(3, 3);
        let mut checked = 0;
        for _ in 0..40 {
            let j = rng.below(theta.len());
            let eps = 1e-4;
            let mut p = theta.clone();
            p[j] += eps;
            let mut q = theta.clone();
            q[j] -= eps;
            let num = (loss(&p) - loss(&q)) / (2.0 * eps);
            let rel = (g[j] - num).abs() / g[j].abs().max(num.abs()).max(1e-6);
            // a ReLU or pooling kink inside [theta - eps, theta + eps] would spoil the quotient
            if rel < 1e-5 {
                checked += 1;
            }
        }
        assert!(checked >= 38, "{checked}");
    }

    #[test]
    fn empty_batch_stream_rejected() {
        let m = mini(Mode::Sp, Sharing::Fine, 0);
        let d = data();
        assert!(score_snip(&m, &d, &[]).is_err());
        assert!(score_grasp(&m, &d, &[]).is_err());
        assert!(score_batches(&d, 4, 0, &mut Rng::new(0, 0)).is_err());
    }

    #[test]
    fn zero_weights_score_zero() {
        let mut m = mini(Mode::Sp, Sharing::Fine, 1);
        let layers = m.prunable_layers();
        let n = gather_weights(&m, &layers).len();
        scatter_weights(&mut m, &layers, &vec![0.0; n]).unwrap();
        let d = data();
        let b = score_batches(&d, 4, 2, &mut Rng::new(0, 0)).unwrap();
        for s in [score_snip(&m, &d, &b).unwrap(), score_grasp(&m, &d, &b).unwrap(), score_synflow(&m).unwrap()] {
            assert!(s.scores.iter().all(|t| t.data().iter().all(|v| *v == 0.0)));
        }
    }

    fn chain(w1: f64, w2: f64) -> ModelState {
        let spec = ModelSpec {
            input: [1, 1, 1],
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Linear { out_features: 1, prunable: true },
                LayerSpec::Linear { out_features: 1, prunable: true },
            ],
        };
        let mut m = ModelState::build(&spec, &BuildOptions::new(Mode::Sp, Sharing::Fine), 0).unwrap();
        m.weight_mut(1).unwrap().data_mut()[0] = w1;
        m.weight_mut(2).unwrap().data_mut()[0] = w2;
        m.bias_mut(1).unwrap().fill(0.7);
        m
    }

    #[test]
    fn synflow_chain() {
        let s = score_synflow(&chain(2.0, 3.0)).unwrap();
        assert_eq!(s.scores[0].data(), &[6.0]);
        assert_eq!(s.scores[1].data(), &[6.0]);
        let s = score_synflow(&chain(-2.0, 3.0)).unwrap();
        assert_eq!(s.scores[1].data(), &[6.0]);
        let s = score_synflow(&chain(0.0, 3.0)).unwrap();
        assert_eq!((s.scores[0].data()[0], s.scores[1].data()[0]), (0.0, 0.0));
    }

    #[test]
    fn synflow_layer_rescaling_scales_scores() {
        let m = mini(Mode::Sp, Sharing::Fine, 3);
        let base = score_synflow(&m).unwrap();
        let mut scaled = m.clone();
        scaled.weight_mut(3).unwrap().scale(2.5);
        let s = score_synflow(&scaled).unwrap();
        for (a, b) in base.scores.iter().zip(&s.scores) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((2.5 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
        assert_eq!(mask_global(&base, 0.8).unwrap(), mask_global(&s, 0.8).unwrap());
    }

    #[test]
    fn ip_scores_at_standard_basis_equal_sp() {
        let d = data();
        let sp = mini(Mode::Sp, Sharing::Fine, 7);
        let ip = mini(Mode::Ip, Sharing::Coarse, 7);
        let b = score_batches(&d, 8, 2, &mut Rng::new(7, streams::SCORES)).unwrap();
        let pairs = [
            (score_magnitude(&sp), score_magnitude(&ip)),
            (score_snip(&sp, &d, &b).unwrap(), score_snip(&ip, &d, &b).unwrap()),
            (score_grasp(&sp, &d, &b).unwrap(), score_grasp(&ip, &d, &b).unwrap()),
            (score_synflow(&sp).unwrap(), score_synflow(&ip).unwrap()),
        ];
        for (a, c) in pairs {
            for (x, y) in a.flat().iter().zip(c.flat()) {
                assert!((x - y).abs() < 1e-6, "{x} vs {y}");
            }
        }
    }

    proptest! {
        #[test]
        fn global_mask_popcount(values in prop::collection::vec(-5.0f64..5.0, 1..60), p in 0.0f64..=1.0, split in 0usize..60) {
            let split = split % values.len();
            let s = ScoreSet {
                layers: vec![0, 1],
                scores: vec![
                    Tensor::from_vec(&[split], values[..split].to_vec()).unwrap(),
                    Tensor::from_vec(&[values.len() - split], values[split..].to_vec()).unwrap(),
                ],
            };
            let masks = mask_global(&s, p).unwrap();
            prop_assert_eq!(masks.iter().map(|m| m.popcount()).sum::<usize>(), kept_count(values.len(), p));
        }

        #[test]
        fn magnitude_mask_invariant_under_positive_scaling(values in prop::collection::vec(-5.0f64..5.0, 1..40), c in 0.01f64..100.0, p in 0.0f64..=1.0) {
            let mk = |scale: f64| {
                let t = Tensor::from_vec(&[values.len()], values.iter().map(|v| (v * scale).abs()).collect()).unwrap();
                mask_global(&ScoreSet { layers: vec![0], scores: vec![t] }, p).unwrap()
            };
            prop_assert_eq!(mk(1.0), mk(c));
        }
    }
}
