//! Token losses: masked cross-entropy, gradient-harmonized reweighting and
//! virtual adversarial smoothing of the input embeddings.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EmoGraceModel, PassOptions};
use crate::nn::array::log_softmax;
use crate::nn::{softmax_rows, Array, SeedStream, Tape, Var};

pub const DEFAULT_GHL_BINS: usize = 24;
pub const DEFAULT_GHL_MOMENTUM: f64 = 0.75;

fn unmasked_count(mask: &[bool]) -> Result<usize> {
    match mask.iter().filter(|&&m| m).count() {
        0 => Err(Error::invalid("mask", "all positions masked")),
        n => Ok(n),
    }
}

fn check_targets(logits: &Array, targets: &[usize], mask: &[bool]) -> Result<()> {
    if logits.rows() != targets.len() || mask.len() != targets.len() {
        return Err(Error::Shape(format!(
            "logits {:?}, {} targets, {} mask entries",
            logits.shape(),
            targets.len(),
            mask.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(Error::invalid("targets", format!("class {t} out of range")));
    }
    Ok(())
}

/// Mean over unmasked positions of `−log softmax(logits)[target]`.
pub fn cross_entropy(logits: &Array, targets: &[usize], mask: &[bool]) -> Result<f64> {
    check_targets(logits, targets, mask)?;
    let n = unmasked_count(mask)?;
    let total: f64 = (0..targets.len())
        .filter(|&i| mask[i])
        .map(|i| -log_softmax(logits.row(i))[targets[i]])
        .sum();
    Ok(total / n as f64)
}

/// Per-position multipliers for the plain mean: `1/N` where unmasked, 0 elsewhere.
pub fn mean_weights(mask: &[bool]) -> Result<Vec<f64>> {
    let n = unmasked_count(mask)? as f64;
    Ok(mask.iter().map(|&m| if m { 1.0 / n } else { 0.0 }).collect())
}

/// Running bin densities for gradient-harmonized weighting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GhlState {
    bins: usize,
    momentum: f64,
    ema_counts: Vec<f64>,
    initialized: bool,
}

impl GhlState {
    pub fn new(bins: usize, momentum: f64) -> Result<Self> {
        if bins == 0 {
            return Err(Error::invalid("bins", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::invalid("momentum", format!("{momentum} outside [0, 1]")));
        }
        Ok(Self {
            bins,
            momentum,
            ema_counts: vec![0.0; bins],
            initialized: false,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn ema_counts(&self) -> &[f64] {
        &self.ema_counts
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn bin_of(&self, difficulty: f64) -> usize {
        ((difficulty * self.bins as f64).floor().max(0.0) as usize).min(self.bins - 1)
    }

    /// Folds one batch of difficulties into the densities and returns their
    /// weights, normalized to sum to the batch size.
    ///
    /// A bin whose running density is zero (possible with momentum 1) falls
    /// back to the current batch count.
    pub fn update(&mut self, difficulties: &[f64]) -> Vec<f64> {
        if difficulties.is_empty() {
            return Vec::new();
        }
        let bins: Vec<usize> = difficulties.iter().map(|&g| self.bin_of(g)).collect();
        let mut counts = vec![0.0; self.bins];
        for &b in &bins {
            counts[b] += 1.0;
        }
        if self.initialized {
            for (s, r) in self.ema_counts.iter_mut().zip(&counts) {
                *s = self.momentum * *s + (1.0 - self.momentum) * r;
            }
        } else {
            self.ema_counts.clone_from(&counts);
            self.initialized = true;
        }
        let raw: Vec<f64> = bins
            .iter()
            .map(|&b| {
                let s = self.ema_counts[b];
                1.0 / if s > 0.0 { s } else { counts[b] }
            })
            .collect();
        let total: f64 = raw.iter().sum();
        let n = difficulties.len() as f64;
        raw.iter().map(|w| n * w / total).collect()
    }
}

/// Difficulty `1 − p(target)` for each unmasked position, in order.
pub fn difficulties(logits: &Array, targets: &[usize], mask: &[bool]) -> Vec<f64> {
    let probs = softmax_rows(logits);
    (0..targets.len())
        .filter(|&i| mask[i])
        .map(|i| (1.0 - probs.get(i, targets[i])).clamp(0.0, 1.0))
        .collect()
}

/// Per-position loss multipliers `w_i / N` (zero where masked); updates `state`.
pub fn ghl_weights(logits: &Array, targets: &[usize], mask: &[bool], state: &mut GhlState) -> Result<Vec<f64>> {
    check_targets(logits, targets, mask)?;
    let n = unmasked_count(mask)? as f64;
    let mut w = state.update(&difficulties(logits, targets, mask)).into_iter();
    Ok(mask
        .iter()
        .map(|&m| if m { w.next().unwrap_or(0.0) / n } else { 0.0 })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GhlOutput {
    pub loss: f64,
    /// Normalized weights of the unmasked positions; they sum to N.
    pub weights: Vec<f64>,
}

pub fn ghl_loss(logits: &Array, targets: &[usize], mask: &[bool], state: &mut GhlState) -> Result<GhlOutput> {
    check_targets(logits, targets, mask)?;
    let n = unmasked_count(mask)? as f64;
    let weights = state.update(&difficulties(logits, targets, mask));
    let loss = (0..targets.len())
        .filter(|&i| mask[i])
        .zip(&weights)
        .map(|(i, w)| -w * log_softmax(logits.row(i))[targets[i]])
        .sum::<f64>()
        / n;
    Ok(GhlOutput { loss, weights })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VatConfig {
    pub epsilon: f64,
    pub xi: f64,
}

impl Default for VatConfig {
    fn default() -> Self {
        Self { epsilon: 1.0, xi: 1e-3 }
    }
}

impl VatConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(Error::invalid("epsilon", "must be non-negative"));
        }
        if !(self.xi > 0.0) {
            return Err(Error::invalid("xi", "must be positive"));
        }
        Ok(())
    }
}

/// Output distributions the adversarial objective compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VatBranches {
    Ate,
    Both,
}

/// Logits of the selected branches; the AEC branch is fed the soft ATE
/// distribution of the same pass.
pub fn branch_logits(model: &EmoGraceModel, tape: &mut Tape, ids: &[usize], mask: &[bool], perturbation: Option<Var>, branches: VatBranches) -> Vec<Var> {
    let opts = PassOptions {
        dropout: None,
        perturbation,
    };
    let trunk = model.build_trunk(tape, ids, mask, &opts);
    match branches {
        VatBranches::Ate => vec![trunk.ate_logits],
        VatBranches::Both => {
            let dist = tape.softmax_rows(trunk.ate_logits, None);
            let aec = model.build_aec(tape, &trunk, dist, mask, &opts);
            vec![trunk.ate_logits, aec]
        }
    }
}

fn zero_masked_rows(a: &mut Array, mask: &[bool]) {
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            a.row_mut(i).fill(0.0);
        }
    }
}

/// Clean-input distributions and the adversarial embedding perturbation.
#[derive(Debug, Clone)]
pub struct Adversary {
    pub clean: Vec<Array>,
    /// `None` when epsilon is zero or the probe gradient vanishes.
    pub r_adv: Option<Array>,
}

/// One power iteration from a random probe of norm `xi`.
pub fn adversary(model: &EmoGraceModel, ids: &[usize], mask: &[bool], vat: &VatConfig, branches: VatBranches, seed: SeedStream) -> Result<Adversary> {
    vat.validate()?;
    let weights = mean_weights(mask)?;
    let mut tape = Tape::new();
    let clean: Vec<Array> = branch_logits(model, &mut tape, ids, mask, None, branches)
        .into_iter()
        .map(|v| softmax_rows(tape.value(v)))
        .collect();
    if vat.epsilon == 0.0 {
        return Ok(Adversary { clean, r_adv: None });
    }

    let d = model.config.d_model;
    let mut rng = seed.rng();
    let mut r = Array::zeros(&[ids.len(), d]);
    for x in r.data_mut() {
        *x = rng.sample(StandardNormal);
    }
    zero_masked_rows(&mut r, mask);
    let norm = r.l2_norm();
    if norm == 0.0 {
        return Ok(Adversary { clean, r_adv: None });
    }
    r.scale(vat.xi / norm);

    let mut tape = Tape::new();
    let rv = tape.input(r);
    let logits = branch_logits(model, &mut tape, ids, mask, Some(rv), branches);
    let terms: Vec<Var> = logits
        .iter()
        .zip(&clean)
        .map(|(&z, p)| tape.kl_rows(z, p.clone(), &weights))
        .collect();
    let total = tape.sum(&terms);
    let grads = tape.backward(total);
    let Some(g) = grads.get(rv) else {
        return Ok(Adversary { clean, r_adv: None });
    };
    let mut g = g.clone();
    zero_masked_rows(&mut g, mask);
    let gnorm = g.l2_norm();
    if gnorm == 0.0 || !gnorm.is_finite() {
        return Ok(Adversary { clean, r_adv: None });
    }
    g.scale(vat.epsilon / gnorm);
    Ok(Adversary {
        clean,
        r_adv: Some(g),
    })
}

/// Records the adversarial KL term on `tape`; returns `None` when there is no perturbation.
pub fn record_vat(model: &EmoGraceModel, tape: &mut Tape, ids: &[usize], mask: &[bool], adversary: &Adversary, branches: VatBranches) -> Result<Option<Var>> {
    let Some(r_adv) = &adversary.r_adv else {
        return Ok(None);
    };
    let weights = mean_weights(mask)?;
    let rv = tape.input(r_adv.clone());
    let logits = branch_logits(model, tape, ids, mask, Some(rv), branches);
    let terms: Vec<Var> = logits
        .iter()
        .zip(&adversary.clean)
        .map(|(&z, p)| tape.kl_rows(z, p.clone(), &weights))
        .collect();
    Ok(Some(if terms.len() == 1 { terms[0] } else { tape.sum(&terms) }))
}

/// Mean-over-unmasked KL between clean and adversarially perturbed ATE distributions.
pub fn vat_loss(model: &EmoGraceModel, ids: &[usize], mask: &[bool], vat: &VatConfig, seed: SeedStream) -> Result<f64> {
    let adv = adversary(model, ids, mask, vat, VatBranches::Ate, seed)?;
    let mut tape = Tape::new();
    Ok(match record_vat(model, &mut tape, ids, mask, &adv, VatBranches::Ate)? {
        Some(v) => tape.scalar(v),
        None => 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use crate::model::tests::tiny_config;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cross_entropy_examples() {
        let uniform = Array::zeros(&[2, 3]);
        assert_abs_diff_eq!(cross_entropy(&uniform, &[0, 2], &[true, true]).unwrap(), 3f64.ln(), epsilon = 1e-12);
        let z = Array::matrix(1, 2, vec![2.0, 0.0]);
        assert_abs_diff_eq!(cross_entropy(&z, &[0], &[true]).unwrap(), 0.126_928_011_042_972_6, epsilon = 1e-12);
        assert!(cross_entropy(&z, &[0], &[false]).is_err());

        let mut prev = f64::INFINITY;
        for k in 0..10 {
            let z = Array::matrix(1, 2, vec![k as f64, 0.0]);
            let l = cross_entropy(&z, &[0], &[true]).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn masked_rows_are_ignored() {
        let z = Array::matrix(2, 2, vec![2.0, 0.0, -50.0, 50.0]);
        let a = cross_entropy(&z, &[0, 0], &[true, false]).unwrap();
        let b = cross_entropy(&Array::matrix(1, 2, vec![2.0, 0.0]), &[0], &[true]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ghl_hand_example() {
        let mut s = GhlState::new(2, 0.5).unwrap();
        let w = s.update(&[0.1, 0.2, 0.3, 0.9]);
        assert_eq!(w.len(), 4);
        for (a, b) in w.iter().zip([2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 2.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 4.0, epsilon = 1e-12);
        assert_eq!(s.ema_counts(), &[3.0, 1.0]);
    }

    #[test]
    fn ghl_single_bin_is_plain_ce() {
        let z = Array::matrix(3, 3, vec![1.0, 0.2, -1.0, 0.0, 3.0, 0.5, 0.3, 0.3, 0.3]);
        let t = [0, 2, 1];
        let m = [true; 3];
        let ce = cross_entropy(&z, &t, &m).unwrap();
        let mut s = GhlState::new(1, 0.9).unwrap();
        for _ in 0..3 {
            assert_abs_diff_eq!(ghl_loss(&z, &t, &m, &mut s).unwrap().loss, ce, epsilon = 1e-12);
        }
    }

    #[test]
    fn ghl_full_momentum_freezes_densities() {
        let mut s = GhlState::new(4, 1.0).unwrap();
        s.update(&[0.1, 0.1, 0.6]);
        let frozen = s.ema_counts().to_vec();
        s.update(&[0.9, 0.9, 0.9, 0.3]);
        assert_eq!(s.ema_counts(), frozen.as_slice());
    }

    #[test]
    fn ghl_weight_sum_and_exposed_multipliers() {
        let z = Array::matrix(3, 2, vec![0.0, 1.0, 2.0, -1.0, 0.5, 0.5]);
        let mut s = GhlState::new(24, 0.75).unwrap();
        let mult = ghl_weights(&z, &[0, 0, 1], &[true, false, true], &mut s).unwrap();
        assert_eq!(mult[1], 0.0);
        assert_abs_diff_eq!(mult.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(GhlState::new(0, 0.5).is_err());
        assert!(GhlState::new(3, 1.5).is_err());
    }

    #[test]
    fn vat_zero_epsilon_and_norm() {
        let m = init_model(&tiny_config(), 11).unwrap();
        let ids = [3, 4, 5];
        let mask = [true; 3];
        let zero = VatConfig { epsilon: 0.0, xi: 1e-3 };
        assert_eq!(vat_loss(&m, &ids, &mask, &zero, SeedStream::new(1)).unwrap(), 0.0);
        for eps in [0.01, 0.5, 3.0] {
            let cfg = VatConfig { epsilon: eps, xi: 1e-3 };
            let adv = adversary(&m, &ids, &mask, &cfg, VatBranches::Both, SeedStream::new(2)).unwrap();
            let r = adv.r_adv.unwrap();
            assert_abs_diff_eq!(r.l2_norm(), eps, epsilon = 1e-6);
        }
        let cfg = VatConfig::default();
        let a = vat_loss(&m, &ids, &mask, &cfg, SeedStream::new(5)).unwrap();
        assert_eq!(a, vat_loss(&m, &ids, &mask, &cfg, SeedStream::new(5)).unwrap());
        assert!(a >= 0.0 && a.is_finite());
    }

    #[test]
    fn vat_leaves_masked_rows_alone() {
        let m = init_model(&tiny_config(), 12).unwrap();
        let mask = [true, false, true];
        let adv = adversary(&m, &[3, 0, 5], &mask, &VatConfig::default(), VatBranches::Ate, SeedStream::new(3)).unwrap();
        assert!(adv.r_adv.unwrap().row(1).iter().all(|&x| x == 0.0));
    }
}
