//! Pruning regimes: pruning at initialization (incl. iterative SynFlow),
//! gradual magnitude pruning, dynamic sparse training (SET, RigL), lottery
//! tickets with rewinding, and one-shot pruning of a trained model.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{param_err, Error, Result};
use crate::fbconv::PruningMask;
use crate::model::{streams, train, Grads, Layer, MetricsRow, ModelState, NoHook, Snapshot, TrainConfig, TrainHook};
use crate::rng::Rng;
use crate::scores::{
    install_masks, kept_count, mask_global, mask_layerwise, score_batches, score_grasp, score_magnitude, score_random,
    score_snip, score_synflow, ScoreSet,
};
use crate::tensor::top_k_indices;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Random,
    Magnitude,
    Snip,
    Grasp,
    Synflow,
}

fn check_rate(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return param_err(format!("pruning rate {p} outside [0, 1]"));
    }
    Ok(())
}

/// Rate after round `k` of `rounds` of iterative SynFlow: `1 - (1-p)^(k/rounds)`.
pub fn synflow_rate(p: f64, k: usize, rounds: usize) -> f64 {
    1.0 - (1.0 - p).powf(k as f64 / rounds as f64)
}

/// Scores that rank every masked weight below every unmasked one.
fn exclude_masked(model: &ModelState, mut s: ScoreSet) -> ScoreSet {
    for (t, &l) in s.scores.iter_mut().zip(&s.layers) {
        if let Some(m) = model.mask(l) {
            for (v, keep) in t.data_mut().iter_mut().zip(m.bits()) {
                if !keep {
                    *v = f64::NEG_INFINITY;
                }
            }
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct PaiConfig {
    pub score: ScoreKind,
    pub p: f64,
    pub batch_size: usize,
    /// Batches averaged by SNIP and GraSP.
    pub n_batches: usize,
    pub synflow_rounds: usize,
}

/// Prunes an untrained model globally to rate `p` and installs the masks.
pub fn pai_prune(model: &mut ModelState, cfg: &PaiConfig, data: &Dataset, rng: &mut Rng) -> Result<Vec<PruningMask>> {
    check_rate(cfg.p)?;
    let layers = model.prunable_layers();
    let scores = match cfg.score {
        ScoreKind::Random => score_random(model, rng)?,
        ScoreKind::Magnitude => score_magnitude(model),
        ScoreKind::Snip => score_snip(model, data, &score_batches(data, cfg.batch_size, cfg.n_batches, rng)?)?,
        ScoreKind::Grasp => score_grasp(model, data, &score_batches(data, cfg.batch_size, cfg.n_batches, rng)?)?,
        ScoreKind::Synflow => {
            if cfg.synflow_rounds == 0 {
                return param_err("SynFlow needs at least one round");
            }
            for k in 1..=cfg.synflow_rounds {
                let s = exclude_masked(model, score_synflow(model)?);
                let masks = mask_global(&s, synflow_rate(cfg.p, k, cfg.synflow_rounds))?;
                install_masks(model, &layers, masks)?;
            }
            return Ok(layers.iter().map(|&l| model.mask(l).unwrap().clone()).collect());
        }
    };
    let masks = mask_global(&scores, cfg.p)?;
    install_masks(model, &layers, masks.clone())?;
    Ok(masks)
}

/// Keeps the `k` largest-magnitude unmasked weights across `layers`.
fn magnitude_prune_to(model: &mut ModelState, layers: &[usize], kept: usize) -> Result<()> {
    let mut s = score_magnitude(model);
    let keep: Vec<usize> = s.layers.iter().enumerate().filter(|(_, l)| layers.contains(l)).map(|(i, _)| i).collect();
    s = ScoreSet {
        layers: keep.iter().map(|&i| s.layers[i]).collect(),
        scores: keep.iter().map(|&i| s.scores[i].clone()).collect(),
    };
    let s = exclude_masked(model, s);
    let d = s.total_len();
    let flat: Vec<f64> = s.scores.iter().flat_map(|t| t.data().iter().copied()).collect();
    let mut bits = vec![false; flat.len()];
    for i in top_k_indices(&flat, kept.min(d))? {
        bits[i] = true;
    }
    let mut at = 0;
    for (t, &l) in s.scores.iter().zip(&s.layers) {
        model.set_mask(l, PruningMask::from_bits(t.shape(), bits[at..at + t.len()].to_vec())?)?;
        at += t.len();
    }
    Ok(())
}

fn prunable_len(model: &ModelState, layers: &[usize]) -> usize {
    layers.iter().map(|&l| model.weight(l).map_or(0, |w| w.len())).sum()
}

fn popcount(model: &ModelState, layers: &[usize]) -> usize {
    layers.iter().map(|&l| model.mask(l).map_or(0, |m| m.popcount())).sum()
}

// ---------------------------------------------------------------------------
// Gradual magnitude pruning
// ---------------------------------------------------------------------------

/// Cubic ramp from 0 at `t0` to `p` at `t1`, held at `p` afterwards.
pub fn gmp_rate(t: u64, p: f64, t0: u64, t1: u64) -> f64 {
    if t < t0 {
        0.0
    } else if t >= t1 {
        p
    } else {
        let frac = (t - t0) as f64 / (t1 - t0) as f64;
        p * (1.0 - (1.0 - frac).powi(3))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmpConfig {
    pub p: f64,
    pub t0: u64,
    pub t1: u64,
    pub interval: u64,
}

impl GmpConfig {
    fn validate(&self) -> Result<()> {
        check_rate(self.p)?;
        if self.t0 >= self.t1 || self.interval == 0 {
            return Err(Error::Config(format!(
                "GMP needs t0 < t1 and a positive interval (t0={}, t1={}, N={})",
                self.t0, self.t1, self.interval
            )));
        }
        Ok(())
    }

    fn is_prune_step(&self, t: u64) -> bool {
        t >= self.t0 && t <= self.t1 && ((t - self.t0) % self.interval == 0 || t == self.t1)
    }
}

/// Prunes to the current GMP rate if `step` is a pruning step.
pub fn gmp_step(model: &mut ModelState, step: u64, cfg: &GmpConfig) -> Result<bool> {
    if !cfg.is_prune_step(step) {
        return Ok(false);
    }
    let layers = model.prunable_layers();
    let d = prunable_len(model, &layers);
    let kept = kept_count(d, gmp_rate(step, cfg.p, cfg.t0, cfg.t1)).min(popcount(model, &layers));
    magnitude_prune_to(model, &layers, kept)?;
    Ok(true)
}

pub struct GmpHook {
    pub cfg: GmpConfig,
}

impl TrainHook for GmpHook {
    fn on_step(&mut self, model: &mut ModelState, _grads: &Grads) -> Result<()> {
        gmp_step(model, model.step, &self.cfg).map(|_| ())
    }
}

// ---------------------------------------------------------------------------
// Dynamic sparse training
// ---------------------------------------------------------------------------

/// Layer extents for the Erdos-Renyi-kernel density.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ErkLayer {
    pub co: usize,
    pub ci: usize,
    pub k: usize,
}

impl ErkLayer {
    fn len(&self) -> usize {
        self.co * self.ci * self.k * self.k
    }

    /// Density `eps (co + ci + 2K) / (co ci K^2)` before clamping.
    pub fn density(&self, eps: f64) -> f64 {
        eps * (self.co + self.ci + 2 * self.k) as f64 / self.len() as f64
    }
}

/// Per-layer sparsities `1 - min(1, density(eps))`, with `eps` found by
/// bisection so that `floor((1-p) d)` weights are kept in total. Layers
/// whose density would exceed 1 stay dense and the excess is spread over the
/// others through `eps`.
pub fn erk_sparsities(layers: &[ErkLayer], p: f64) -> Result<Vec<f64>> {
    check_rate(p)?;
    if layers.is_empty() || layers.iter().any(|l| l.len() == 0) {
        return param_err("ERK needs non-empty layers");
    }
    let d: usize = layers.iter().map(|l| l.len()).sum();
    let target = kept_count(d, p) as f64;
    let kept = |eps: f64| layers.iter().map(|l| l.len() as f64 * l.density(eps).min(1.0)).sum::<f64>();
    let mut hi = layers.iter().map(|l| 1.0 / l.density(1.0)).fold(0.0, f64::max);
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if kept(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(layers.iter().map(|l| 1.0 - l.density(hi).min(1.0)).collect())
}

/// Integer kept counts per layer for [`erk_sparsities`], summing to exactly
/// `floor((1-p) d)`; rounding leftovers go to the largest fractional parts.
pub fn erk_counts(layers: &[ErkLayer], p: f64) -> Result<Vec<usize>> {
    let sparsities = erk_sparsities(layers, p)?;
    let exact: Vec<f64> = layers.iter().zip(&sparsities).map(|(l, s)| (1.0 - s) * l.len() as f64).collect();
    let mut counts: Vec<usize> = exact.iter().zip(layers).map(|(e, l)| (e.floor() as usize).min(l.len())).collect();
    let target = kept_count(layers.iter().map(|l| l.len()).sum(), p);
    let mut order: Vec<usize> = (0..layers.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut rest = target.saturating_sub(counts.iter().sum());
    while rest > 0 {
        let before = rest;
        for &i in &order {
            if rest > 0 && counts[i] < layers[i].len() {
                counts[i] += 1;
                rest -= 1;
            }
        }
        if rest == before {
            break;
        }
    }
    Ok(counts)
}

pub fn erk_layers(model: &ModelState, layers: &[usize]) -> Vec<ErkLayer> {
    layers
        .iter()
        .map(|&l| match &model.layers[l] {
            Layer::Conv { weight, .. } => {
                let s = weight.shape();
                ErkLayer { co: s[0], ci: s[1], k: s[2] }
            }
            Layer::FbConv { coeffs, basis, .. } => ErkLayer { co: coeffs.co(), ci: coeffs.ci(), k: model.bases[*basis].k() },
            Layer::Linear { weight, .. } => ErkLayer { co: weight.shape()[0], ci: weight.shape()[1], k: 1 },
            _ => unreachable!("prunable layers carry weights"),
        })
        .collect()
}

/// `p_min + (p_init - p_min)(1 + cos(t pi / T)) / 2`
pub fn dst_rate(t: u64, total: u64, p_init: f64, p_min: f64) -> f64 {
    let frac = if total == 0 { 1.0 } else { (t as f64 / total as f64).min(1.0) };
    p_min + 0.5 * (p_init - p_min) * (1.0 + (frac * std::f64::consts::PI).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DstKind {
    Set,
    Rigl,
}

/// Random ERK-distributed masks at overall rate `p`.
pub fn dst_init(model: &mut ModelState, p: f64, rng: &mut Rng) -> Result<Vec<PruningMask>> {
    let layers = model.prunable_layers();
    let erk = erk_layers(model, &layers);
    let rates: Vec<f64> =
        erk_counts(&erk, p)?.iter().zip(&erk).map(|(&n, l)| 1.0 - n as f64 / l.len() as f64).collect();
    let masks = mask_layerwise(&score_random(model, rng)?, &rates)?;
    install_masks(model, &layers, masks.clone())?;
    Ok(masks)
}

/// Per-layer prune counts: `floor(rate * kept_l)`, with the shortfall to
/// `floor(rate * sum kept)` given to the largest layer (then the next
/// largest, should it run out).
pub fn dst_counts(kept: &[usize], rate: f64) -> Vec<usize> {
    let total = (rate * kept.iter().sum::<usize>() as f64).floor() as usize;
    let mut counts: Vec<usize> = kept.iter().map(|&k| (rate * k as f64).floor() as usize).collect();
    let mut rest = total.saturating_sub(counts.iter().sum());
    let mut order: Vec<usize> = (0..kept.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(kept[i]), i));
    // a layer that runs out of survivors passes the rest to the next largest
    for i in order {
        let add = rest.min(kept[i] - counts[i]);
        counts[i] += add;
        rest -= add;
    }
    counts
}

/// Prunes a fraction `rate` of each layer's surviving weights by magnitude
/// and regrows as many at zero: at random (SET) or by largest dense gradient
/// (RigL, `grads` required). Per-layer popcounts are preserved.
pub fn dst_update(model: &mut ModelState, kind: DstKind, rate: f64, grads: Option<&Grads>, rng: &mut Rng) -> Result<()> {
    check_rate(rate)?;
    if kind == DstKind::Rigl && grads.is_none() {
        return param_err("RigL regrowth needs dense gradients");
    }
    let layers = model.prunable_layers();
    let kept: Vec<usize> = layers.iter().map(|&l| model.mask(l).unwrap().popcount()).collect();
    let counts = dst_counts(&kept, rate);
    for (&l, &n) in layers.iter().zip(&counts) {
        if n == 0 {
            continue;
        }
        let mut bits = model.mask(l).unwrap().bits().to_vec();
        let w = model.weight(l).unwrap();
        let alive: Vec<usize> = (0..bits.len()).filter(|&i| bits[i]).collect();
        let neg_mag: Vec<f64> = alive.iter().map(|&i| -w.data()[i].abs()).collect();
        let pruned: Vec<usize> = top_k_indices(&neg_mag, n)?.into_iter().map(|j| alive[j]).collect();
        let mut candidates: Vec<usize> = (0..bits.len()).filter(|&i| !bits[i]).collect();
        if candidates.len() < n {
            // too few dormant positions: the just-pruned ones compete as well
            candidates.extend(&pruned);
            candidates.sort_unstable();
        }
        for &i in &pruned {
            bits[i] = false;
        }
        let regrown: Vec<usize> = match kind {
            DstKind::Set => rng.choose(candidates.len(), n).into_iter().map(|j| candidates[j]).collect(),
            DstKind::Rigl => {
                let g = &grads.unwrap().tensors[model.weight_slot(l).unwrap()];
                let mag: Vec<f64> = candidates.iter().map(|&i| g.data()[i].abs()).collect();
                top_k_indices(&mag, n)?.into_iter().map(|j| candidates[j]).collect()
            }
        };
        for &i in &regrown {
            bits[i] = true;
        }
        let shape = model.mask(l).unwrap().shape().to_vec();
        model.set_mask(l, PruningMask::from_bits(&shape, bits)?)?;
        let slot = model.weight_slot(l).unwrap();
        for &i in &regrown {
            model.weight_mut(l).unwrap().data_mut()[i] = 0.0;
            model.velocity[slot].data_mut()[i] = 0.0;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DstConfig {
    pub kind: DstKind,
    pub interval: u64,
    /// Total training steps `T` of the cosine decay.
    pub total_steps: u64,
    pub p_init: f64,
    pub p_min: f64,
}

pub struct DstHook {
    pub cfg: DstConfig,
    pub rng: Rng,
}

impl DstHook {
    fn is_update_step(&self, t: u64) -> bool {
        self.cfg.interval > 0 && t > 0 && t % self.cfg.interval == 0 && t < self.cfg.total_steps
    }
}

impl TrainHook for DstHook {
    fn wants_dense_grads(&self, model: &ModelState) -> bool {
        self.cfg.kind == DstKind::Rigl && self.is_update_step(model.step + 1)
    }

    fn on_step(&mut self, model: &mut ModelState, grads: &Grads) -> Result<()> {
        if !self.is_update_step(model.step) {
            return Ok(());
        }
        let rate = dst_rate(model.step, self.cfg.total_steps, self.cfg.p_init, self.cfg.p_min);
        dst_update(model, self.cfg.kind, rate, Some(grads), &mut self.rng)
    }
}

// ---------------------------------------------------------------------------
// Lottery tickets
// ---------------------------------------------------------------------------

/// Rounds of 20% pruning needed to reach `p`.
pub fn lt_rounds(p: f64) -> usize {
    let mut k = 0;
    while 1.0 - 0.8f64.powi(k as i32) < p - 1e-12 {
        k += 1;
    }
    k
}

#[derive(Debug, Clone)]
pub struct LtConfig {
    pub p: f64,
    /// Rewind step.
    pub t0: u64,
    pub train: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct LtOutcome {
    pub snapshot: Snapshot,
    /// Masks of the pruned layers after each round.
    pub round_masks: Vec<Vec<PruningMask>>,
    /// Training histories: one per round plus the final run.
    pub histories: Vec<Vec<MetricsRow>>,
}

struct SnapshotAt {
    step: u64,
    snap: Option<Snapshot>,
}

impl TrainHook for SnapshotAt {
    fn on_step(&mut self, model: &mut ModelState, _grads: &Grads) -> Result<()> {
        if model.step == self.step {
            self.snap = Some(model.snapshot());
        }
        Ok(())
    }
}

/// Restores the snapshot and installs `masks`; surviving weights, bases,
/// momentum and generator state equal the snapshot bit for bit.
pub fn lt_rewind(model: &mut ModelState, snap: &Snapshot, layers: &[usize], masks: &[PruningMask]) -> Result<()> {
    model.restore(snap);
    install_masks(model, layers, masks.to_vec())
}

/// Train, prune 20% of the surviving convolution weights by magnitude,
/// rewind to step `t0`; repeat until `p` is reached, then train once more.
/// Linear layers stay dense.
pub fn lt_run(model: &mut ModelState, data: &Dataset, test: Option<&Dataset>, cfg: &LtConfig) -> Result<LtOutcome> {
    check_rate(cfg.p)?;
    for i in 0..model.layers.len() {
        if matches!(model.layers[i], Layer::Linear { .. }) {
            model.set_prunable(i, false);
        }
    }
    let layers = model.prunable_layers();
    let d = prunable_len(model, &layers);
    let mut hook = SnapshotAt { step: cfg.t0, snap: (cfg.t0 == model.step).then(|| model.snapshot()) };
    let mut histories = vec![train(model, data, test, &cfg.train, &mut hook)?];
    let snap = hook.snap.ok_or_else(|| {
        Error::Config(format!("rewind step {} is beyond the {} training steps", cfg.t0, model.step))
    })?;
    let rounds = lt_rounds(cfg.p);
    let mut round_masks = Vec::new();
    for k in 1..=rounds {
        if k > 1 {
            histories.push(train(model, data, test, &cfg.train, &mut NoHook)?);
        }
        let rate = if k == rounds { cfg.p } else { 1.0 - 0.8f64.powi(k as i32) };
        magnitude_prune_to(model, &layers, kept_count(d, rate))?;
        let masks: Vec<PruningMask> = layers.iter().map(|&l| model.mask(l).unwrap().clone()).collect();
        lt_rewind(model, &snap, &layers, &masks)?;
        round_masks.push(masks);
    }
    if rounds > 0 {
        histories.push(train(model, data, test, &cfg.train, &mut NoHook)?);
    }
    Ok(LtOutcome { snapshot: snap, round_masks, histories })
}

/// One-shot global magnitude pruning of a trained model.
pub fn ft_prune(model: &mut ModelState, p: f64) -> Result<Vec<PruningMask>> {
    check_rate(p)?;
    let layers = model.prunable_layers();
    let d = prunable_len(model, &layers);
    magnitude_prune_to(model, &layers, kept_count(d, p).min(popcount(model, &layers)))?;
    Ok(layers.iter().map(|&l| model.mask(l).unwrap().clone()).collect())
}

// ---------------------------------------------------------------------------
// Configured runs
// ---------------------------------------------------------------------------

/// Reference step budgets the default step constants are scaled from
/// (250 and 160 epochs of 391 steps); desk-scale defaults scale linearly.
pub const REFERENCE_STEPS: u64 = 97_750;
pub const REFERENCE_STEPS_LT: u64 = 62_560;

pub fn scale_steps(constant: u64, reference: u64, total: u64) -> u64 {
    ((constant as f64 * total as f64 / reference as f64).round() as u64).max(1)
}

fn default_batches() -> usize {
    10
}

fn default_rounds() -> usize {
    100
}

fn default_p_init() -> f64 {
    0.5
}

fn default_p_min() -> f64 {
    0.005
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ScheduleConfig {
    Dense,
    Pai {
        score: ScoreKind,
        p: f64,
        #[serde(default = "default_batches")]
        n_batches: usize,
        #[serde(default = "default_rounds")]
        synflow_rounds: usize,
    },
    Gmp {
        p: f64,
        #[serde(default)]
        t0: Option<u64>,
        #[serde(default)]
        t1: Option<u64>,
        #[serde(default)]
        interval: Option<u64>,
    },
    Set {
        p: f64,
        #[serde(default)]
        interval: Option<u64>,
        #[serde(default = "default_p_init")]
        p_init: f64,
        #[serde(default = "default_p_min")]
        p_min: f64,
    },
    Rigl {
        p: f64,
        #[serde(default)]
        interval: Option<u64>,
        #[serde(default = "default_p_init")]
        p_init: f64,
        #[serde(default = "default_p_min")]
        p_min: f64,
    },
    Lt {
        p: f64,
        #[serde(default)]
        t0: Option<u64>,
    },
    Ft {
        p: f64,
        pretrain_epochs: usize,
    },
}

impl ScheduleConfig {
    pub fn target_rate(&self) -> f64 {
        match self {
            ScheduleConfig::Dense => 0.0,
            ScheduleConfig::Pai { p, .. }
            | ScheduleConfig::Gmp { p, .. }
            | ScheduleConfig::Set { p, .. }
            | ScheduleConfig::Rigl { p, .. }
            | ScheduleConfig::Lt { p, .. }
            | ScheduleConfig::Ft { p, .. } => *p,
        }
    }

    pub fn set_target_rate(&mut self, rate: f64) {
        match self {
            ScheduleConfig::Dense => {}
            ScheduleConfig::Pai { p, .. }
            | ScheduleConfig::Gmp { p, .. }
            | ScheduleConfig::Set { p, .. }
            | ScheduleConfig::Rigl { p, .. }
            | ScheduleConfig::Lt { p, .. }
            | ScheduleConfig::Ft { p, .. } => *p = rate,
        }
    }
}

fn append(history: &mut Vec<MetricsRow>, mut part: Vec<MetricsRow>) {
    let offset = history.last().map_or(0, |r| r.epoch);
    for r in &mut part {
        r.epoch += offset;
    }
    history.extend(part);
}

/// Runs a configured schedule end to end; epochs of successive phases are
/// numbered consecutively.
pub fn run_schedule(
    model: &mut ModelState,
    schedule: &ScheduleConfig,
    cfg: &TrainConfig,
    data: &Dataset,
    test: Option<&Dataset>,
    seed: u64,
) -> Result<Vec<MetricsRow>> {
    check_rate(schedule.target_rate())?;
    let mut rng = Rng::new(seed, streams::SCORES);
    let total = cfg.steps_per_epoch(data.len()) * cfg.epochs as u64;
    let mut history = Vec::new();
    match schedule {
        ScheduleConfig::Dense => append(&mut history, train(model, data, test, cfg, &mut NoHook)?),
        ScheduleConfig::Pai { score, p, n_batches, synflow_rounds } => {
            let pai = PaiConfig {
                score: *score,
                p: *p,
                batch_size: cfg.batch_size,
                n_batches: *n_batches,
                synflow_rounds: *synflow_rounds,
            };
            pai_prune(model, &pai, data, &mut rng)?;
            append(&mut history, train(model, data, test, cfg, &mut NoHook)?);
        }
        ScheduleConfig::Gmp { p, t0, t1, interval } => {
            let g = GmpConfig {
                p: *p,
                t0: t0.unwrap_or(total / 10),
                t1: t1.unwrap_or(total / 2),
                interval: interval.unwrap_or((total / 50).max(1)),
            };
            g.validate()?;
            if g.t1 > total {
                return Err(Error::Config(format!("GMP end step {} exceeds {total} training steps", g.t1)));
            }
            append(&mut history, train(model, data, test, cfg, &mut GmpHook { cfg: g })?);
        }
        ScheduleConfig::Set { p, interval, p_init, p_min } | ScheduleConfig::Rigl { p, interval, p_init, p_min } => {
            let (kind, base_interval) = match schedule {
                ScheduleConfig::Set { .. } => (DstKind::Set, 1500),
                _ => (DstKind::Rigl, 4000),
            };
            dst_init(model, *p, &mut rng)?;
            let dst = DstConfig {
                kind,
                interval: interval.unwrap_or_else(|| scale_steps(base_interval, REFERENCE_STEPS, total)),
                total_steps: total,
                p_init: *p_init,
                p_min: *p_min,
            };
            let mut hook = DstHook { cfg: dst, rng: Rng::new(seed, streams::SCHEDULE) };
            append(&mut history, train(model, data, test, cfg, &mut hook)?);
        }
        ScheduleConfig::Lt { p, t0 } => {
            let lt = LtConfig {
                p: *p,
                t0: t0.unwrap_or_else(|| scale_steps(500, REFERENCE_STEPS_LT, total)),
                train: cfg.clone(),
            };
            for h in lt_run(model, data, test, &lt)?.histories {
                append(&mut history, h);
            }
        }
        ScheduleConfig::Ft { p, pretrain_epochs } => {
            let pre = TrainConfig { epochs: *pretrain_epochs, ..cfg.clone() };
            append(&mut history, train(model, data, test, &pre, &mut NoHook)?);
            ft_prune(model, *p)?;
            append(&mut history, train(model, data, test, cfg, &mut NoHook)?);
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::pruning_rate;
    use crate::data::{synth_dataset, SynthSpec};
    use crate::model::{BuildOptions, Mode, ModelSpec, SgdConfig, Sharing};
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn mini(mode: Mode, seed: u64) -> ModelState {
        ModelState::build(&ModelSpec::mini_vgg(1, 12, 4), &BuildOptions::new(mode, Sharing::Fine), seed).unwrap()
    }

    fn data(n: usize) -> Dataset {
        synth_dataset(&SynthSpec { classes: 4, samples: n, size: 12, noise: 0.2 }, &mut Rng::new(2, streams::DATA_TRAIN))
            .unwrap()
    }

    fn train_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            sgd: SgdConfig { lr: 0.05, momentum: 0.9, weight_decay: 5e-4, wd_on_fb: false, wd_on_coeffs: true },
            lr_milestones: vec![],
            lr_gamma: 0.1,
        }
    }

    fn masks_of(m: &ModelState) -> Vec<PruningMask> {
        m.prunable_layers().iter().map(|&l| m.mask(l).unwrap().clone()).collect()
    }

    #[test]
    fn synflow_rate_examples() {
        assert_eq!(synflow_rate(0.9, 0, 100), 0.0);
        assert!((synflow_rate(0.9, 100, 100) - 0.9).abs() < 1e-15);
        assert!((synflow_rate(0.99, 50, 100) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn pai_hits_exact_count() {
        let d = data(32);
        for score in [ScoreKind::Random, ScoreKind::Magnitude, ScoreKind::Snip, ScoreKind::Grasp, ScoreKind::Synflow] {
            let mut m = mini(Mode::Ip, 1);
            let cfg = PaiConfig { score, p: 0.9, batch_size: 8, n_batches: 2, synflow_rounds: 10 };
            pai_prune(&mut m, &cfg, &d, &mut Rng::new(1, streams::SCORES)).unwrap();
            let layers = m.prunable_layers();
            let total = prunable_len(&m, &layers);
            assert_eq!(popcount(&m, &layers), kept_count(total, 0.9), "{score:?}");
            assert!((pruning_rate(&m).sp - 0.9).abs() <= 1.0 / total as f64);
        }
    }

    #[test]
    fn iterative_synflow_masks_are_nested() {
        let mut m = mini(Mode::Sp, 2);
        let mut prev = masks_of(&m);
        for k in 1..=5 {
            let s = exclude_masked(&m, score_synflow(&m).unwrap());
            let masks = mask_global(&s, synflow_rate(0.95, k, 5)).unwrap();
            for (a, b) in masks.iter().zip(&prev) {
                assert!(a.is_subset_of(b));
            }
            let layers = m.prunable_layers();
            install_masks(&mut m, &layers, masks.clone()).unwrap();
            prev = masks;
        }
    }

    #[test]
    fn gmp_rate_examples() {
        assert_eq!(gmp_rate(50, 0.9, 100, 200), 0.0);
        assert_eq!(gmp_rate(100, 0.9, 100, 200), 0.0);
        assert!((gmp_rate(150, 0.9, 100, 200) - 0.7875).abs() < 1e-12);
        assert_eq!(gmp_rate(200, 0.9, 100, 200), 0.9);
        assert_eq!(gmp_rate(500, 0.9, 100, 200), 0.9);
    }

    #[test]
    fn gmp_masks_shrink_and_reach_target() {
        let d = data(32);
        let mut m = mini(Mode::Ip, 3);
        // 4 steps per epoch, 5 epochs = 20 steps
        let cfg = GmpConfig { p: 0.8, t0: 2, t1: 14, interval: 3 };
        struct Watch {
            inner: GmpHook,
            seen: Vec<Vec<PruningMask>>,
            zero_since: Vec<(usize, usize)>,
        }
        impl TrainHook for Watch {
            fn on_step(&mut self, model: &mut ModelState, g: &Grads) -> Result<()> {
                self.inner.on_step(model, g)?;
                for &(l, i) in &self.zero_since {
                    assert_eq!(model.weight(l).unwrap().data()[i], 0.0);
                }
                let masks = masks_of(model);
                for (li, mk) in masks.iter().enumerate() {
                    let l = model.prunable_layers()[li];
                    for (i, b) in mk.bits().iter().enumerate() {
                        if !b && !self.zero_since.contains(&(l, i)) {
                            self.zero_since.push((l, i));
                        }
                    }
                }
                self.seen.push(masks);
                Ok(())
            }
        }
        let mut w = Watch { inner: GmpHook { cfg }, seen: vec![], zero_since: vec![] };
        train(&mut m, &d, None, &train_cfg(5), &mut w).unwrap();
        for pair in w.seen.windows(2) {
            for (a, b) in pair[1].iter().zip(&pair[0]) {
                assert!(a.is_subset_of(b));
            }
        }
        let layers = m.prunable_layers();
        assert_eq!(popcount(&m, &layers), kept_count(prunable_len(&m, &layers), 0.8));
        assert!(GmpConfig { p: 0.5, t0: 5, t1: 5, interval: 1 }.validate().is_err());
    }

    #[test]
    fn erk_examples() {
        let l = ErkLayer { co: 4, ci: 4, k: 3 };
        assert!((1.0 - l.density(1.0) - (1.0 - 14.0 / 144.0)).abs() < 1e-15);
        let single = erk_sparsities(&[l], 0.7).unwrap();
        assert!((single[0] - 0.7).abs() <= 1.0 / 144.0);
        let counts = erk_counts(&[l, ErkLayer { co: 3, ci: 5, k: 3 }, ErkLayer { co: 10, ci: 7, k: 1 }], 0.83).unwrap();
        assert_eq!(counts.iter().sum::<usize>(), kept_count(144 + 135 + 70, 0.83));
        let two = erk_sparsities(&[l, l], 0.6).unwrap();
        assert_eq!(two[0], two[1]);
        // a tiny layer saturates at density 1 and the large one absorbs the rest
        let layers = [ErkLayer { co: 1, ci: 1, k: 3 }, ErkLayer { co: 64, ci: 64, k: 3 }];
        let s = erk_sparsities(&layers, 0.5).unwrap();
        assert_eq!(s[0], 0.0);
        let kept: f64 = layers.iter().zip(&s).map(|(l, p)| l.len() as f64 * (1.0 - p)).sum();
        let d = (9 + 64 * 64 * 9) as f64;
        assert!((kept - (0.5 * d).floor()).abs() < 1e-6);
    }

    #[test]
    fn dst_rate_examples() {
        assert!((dst_rate(0, 100, 0.5, 0.005) - 0.5).abs() < 1e-15);
        assert!((dst_rate(100, 100, 0.5, 0.005) - 0.005).abs() < 1e-15);
        assert!((dst_rate(50, 100, 0.5, 0.005) - 0.2525).abs() < 1e-12);
    }

    #[test]
    fn dst_counts_give_remainder_to_largest() {
        assert_eq!(dst_counts(&[10, 30, 7], 0.5), vec![5, 15, 3]);
        assert_eq!(dst_counts(&[10, 31, 7], 0.5), vec![5, 16, 3]);
        assert_eq!(dst_counts(&[1, 1, 1], 0.9), vec![1, 1, 0]);
        assert_eq!(dst_counts(&[3, 3], 0.0), vec![0, 0]);
    }

    fn three_weight_model() -> ModelState {
        let spec = ModelSpec {
            input: [3, 1, 1],
            layers: vec![crate::model::LayerSpec::Flatten, crate::model::LayerSpec::Linear { out_features: 1, prunable: true }],
        };
        let mut m = ModelState::build(&spec, &BuildOptions::new(Mode::Sp, Sharing::Fine), 0).unwrap();
        m.weight_mut(1).unwrap().data_mut().copy_from_slice(&[5.0, 0.1, 0.0]);
        m.set_mask(1, PruningMask::from_bits(&[1, 3], vec![true, true, false]).unwrap()).unwrap();
        m
    }

    #[test]
    fn dst_hand_example() {
        for kind in [DstKind::Set, DstKind::Rigl] {
            let mut m = three_weight_model();
            let grads = Grads { tensors: vec![Tensor::from_vec(&[1, 3], vec![0.0, 0.0, 1.0]).unwrap(), Tensor::zeros(&[1])] };
            dst_update(&mut m, kind, 0.5, Some(&grads), &mut Rng::new(0, 0)).unwrap();
            assert_eq!(m.mask(1).unwrap().bits(), &[true, false, true]);
            assert_eq!(m.weight(1).unwrap().data(), &[5.0, 0.0, 0.0]);
        }
        let mut m = three_weight_model();
        let before = m.clone();
        dst_update(&mut m, DstKind::Set, 0.0, None, &mut Rng::new(0, 0)).unwrap();
        assert_eq!(m, before);
        assert!(dst_update(&mut m, DstKind::Rigl, 0.5, None, &mut Rng::new(0, 0)).is_err());
    }

    #[test]
    fn dst_training_preserves_layer_popcounts() {
        let d = data(32);
        for kind in [DstKind::Set, DstKind::Rigl] {
            let mut m = mini(Mode::Ip, 4);
            dst_init(&mut m, 0.8, &mut Rng::new(4, 0)).unwrap();
            let counts: Vec<usize> = masks_of(&m).iter().map(|k| k.popcount()).collect();
            struct Check {
                inner: DstHook,
                counts: Vec<usize>,
                changed: bool,
            }
            impl TrainHook for Check {
                fn wants_dense_grads(&self, model: &ModelState) -> bool {
                    self.inner.wants_dense_grads(model)
                }
                fn on_step(&mut self, model: &mut ModelState, g: &Grads) -> Result<()> {
                    let before = masks_of(model);
                    self.inner.on_step(model, g)?;
                    let after = masks_of(model);
                    self.changed |= before != after;
                    let now: Vec<usize> = after.iter().map(|k| k.popcount()).collect();
                    assert_eq!(now, self.counts);
                    Ok(())
                }
            }
            let cfg = DstConfig { kind, interval: 3, total_steps: 16, p_init: 0.5, p_min: 0.005 };
            let mut hook = Check { inner: DstHook { cfg, rng: Rng::new(4, 1) }, counts, changed: false };
            train(&mut m, &d, None, &train_cfg(4), &mut hook).unwrap();
            assert!(hook.changed);
        }
    }

    #[test]
    fn lt_round_counts() {
        assert_eq!(lt_rounds(0.0), 0);
        assert_eq!(lt_rounds(0.488), 3);
        assert_eq!(lt_rounds(0.2), 1);
        assert_eq!(lt_rounds(0.5), 4);
        assert!((1.0 - 0.8f64.powi(3) - 0.488).abs() < 1e-12);
    }

    #[test]
    fn lt_rewinds_survivors_exactly() {
        let d = data(16);
        let mut m = mini(Mode::Ip, 5);
        let cfg = LtConfig { p: 0.5, t0: 3, train: train_cfg(2) };
        let out = lt_run(&mut m, &d, None, &cfg).unwrap();
        assert_eq!(out.snapshot.step, 3);
        assert_eq!(out.round_masks.len(), 4);
        assert_eq!(out.histories.len(), 5);
        // FC layer stays dense
        assert!(!m.layers[7].is_prunable());
        assert_eq!(m.mask(7).unwrap().popcount(), m.mask(7).unwrap().len());
        for pair in out.round_masks.windows(2) {
            for (a, b) in pair[1].iter().zip(&pair[0]) {
                assert!(a.is_subset_of(b));
            }
        }
        let layers = m.prunable_layers();
        let total = prunable_len(&m, &layers);
        for (k, masks) in out.round_masks.iter().enumerate() {
            let kept: usize = masks.iter().map(|x| x.popcount()).sum();
            let rate = 1.0 - kept as f64 / total as f64;
            let expect = if k + 1 == 4 { 0.5 } else { 1.0 - 0.8f64.powi(k as i32 + 1) };
            assert!((rate - expect).abs() <= 1.0 / total as f64);
        }
        // replay the last rewind and compare against the snapshot
        let mut r = m.clone();
        lt_rewind(&mut r, &out.snapshot, &layers, out.round_masks.last().unwrap()).unwrap();
        let snap = out.snapshot.state();
        for (&l, mk) in layers.iter().zip(out.round_masks.last().unwrap()) {
            let (a, b) = (r.weight(l).unwrap().data(), snap.weight(l).unwrap().data());
            for i in 0..a.len() {
                assert_eq!(a[i].to_bits(), if mk.bits()[i] { b[i].to_bits() } else { 0.0f64.to_bits() });
            }
        }
        assert_eq!(r.bases, snap.bases);
        assert_eq!(r.rng, snap.rng);
        assert_eq!(r.step, snap.step);
    }

    #[test]
    fn ft_prune_examples() {
        let m0 = mini(Mode::Sp, 6);
        let mut m = m0.clone();
        ft_prune(&mut m, 0.0).unwrap();
        assert_eq!(m, m0);
        let mut sp = mini(Mode::Sp, 6);
        let mut ip = ModelState::build(&ModelSpec::mini_vgg(1, 12, 4), &BuildOptions::new(Mode::Ip, Sharing::Coarse), 6).unwrap();
        let a = ft_prune(&mut sp, 0.7).unwrap();
        let b = ft_prune(&mut ip, 0.7).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.bits(), y.bits());
        }
    }

    #[test]
    fn schedule_config_parses() {
        let s: ScheduleConfig = serde_json::from_str(r#"{"kind":"pai","score":"snip","p":0.9}"#).unwrap();
        assert_eq!(s, ScheduleConfig::Pai { score: ScoreKind::Snip, p: 0.9, n_batches: 10, synflow_rounds: 100 });
        assert!(serde_json::from_str::<ScheduleConfig>(r#"{"kind":"pai","score":"snip","p":0.9,"x":1}"#).is_err());
        assert_eq!(scale_steps(1500, REFERENCE_STEPS, 640), 10);
    }

    #[test]
    fn every_schedule_reaches_its_rate() {
        let d = data(16);
        let cfg = train_cfg(4);
        let schedules = [
            ScheduleConfig::Pai { score: ScoreKind::Random, p: 0.8, n_batches: 2, synflow_rounds: 5 },
            ScheduleConfig::Gmp { p: 0.8, t0: None, t1: None, interval: None },
            ScheduleConfig::Set { p: 0.8, interval: Some(2), p_init: 0.5, p_min: 0.005 },
            ScheduleConfig::Rigl { p: 0.8, interval: Some(2), p_init: 0.5, p_min: 0.005 },
            ScheduleConfig::Lt { p: 0.36, t0: Some(1) },
            ScheduleConfig::Ft { p: 0.8, pretrain_epochs: 1 },
        ];
        for s in schedules {
            let mut m = mini(Mode::Sp, 7);
            let h = run_schedule(&mut m, &s, &cfg, &d, None, 7).unwrap();
            assert!(h.windows(2).all(|w| w[1].epoch == w[0].epoch + 1), "{s:?}");
            let layers = m.prunable_layers();
            let total = prunable_len(&m, &layers);
            let rate = 1.0 - popcount(&m, &layers) as f64 / total as f64;
            assert!((rate - s.target_rate()).abs() <= 1.0 / total as f64, "{s:?}: {rate}");
        }
    }

    proptest! {
        #[test]
        fn gmp_rate_monotone(t in 0u64..400, dt in 0u64..100, p in 0.0f64..=1.0) {
            prop_assert!(gmp_rate(t, p, 100, 200) <= gmp_rate(t + dt, p, 100, 200));
        }

        #[test]
        fn dst_counts_sum(kept in prop::collection::vec(0usize..500, 1..6), rate in 0.0f64..=1.0) {
            let c = dst_counts(&kept, rate);
            prop_assert!(c.iter().zip(&kept).all(|(a, b)| a <= b));
            let total = (rate * kept.iter().sum::<usize>() as f64).floor() as usize;
            prop_assert_eq!(c.iter().sum::<usize>(), total);
        }
    }

    use crate::tensor::Tensor;
}
