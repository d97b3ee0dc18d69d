//! A linear scorer with known visual and linguistic weights.
//!
//! With logits `W_v φ + W_l ψ` and the null condition mapped to `ψ = 0`, the
//! steering residual is exactly `W_l ψ` and the steered logits are
//! `W_v φ + γ W_l ψ`. Everything here checks those identities numerically
//! and derives the coefficient at which steering overturns the visual choice.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::seed;
use crate::steering::{self, argmax};

/// Tolerance used by every exactness check in this module.
pub const TOLERANCE: f64 = 1e-12;

/// Ratio ‖W_v‖ / ‖W_l‖ (Frobenius) used by the constructed fixtures.
pub const DOMINANCE_RATIO: f64 = 10.0;

/// Per-action linear scores over a visual and a linguistic embedding.
///
/// `interaction` weights the elementwise product `φ ⊙ ψ`, standing in for the
/// higher-order term the first-order analysis drops. It is zero unless set.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearScorer {
    pub w_v: Tensor,
    pub w_l: Tensor,
    pub interaction: Tensor,
}

impl LinearScorer {
    /// `w_v` and `w_l` are `[actions, d]`; the interaction term starts at zero.
    pub fn new(w_v: Tensor, w_l: Tensor) -> Result<Self> {
        let interaction = Tensor::zeros(w_v.shape());
        LinearScorer::with_interaction(w_v, w_l, interaction)
    }

    pub fn with_interaction(w_v: Tensor, w_l: Tensor, interaction: Tensor) -> Result<Self> {
        if w_v.shape().len() != 2 || w_v.shape() != w_l.shape() || w_v.shape() != interaction.shape() {
            return Err(Error::Shape {
                layer: "linear scorer".into(),
                expected: w_v.shape().to_vec(),
                got: if w_v.shape() != w_l.shape() {
                    w_l.shape().to_vec()
                } else {
                    interaction.shape().to_vec()
                },
            });
        }
        Ok(LinearScorer { w_v, w_l, interaction })
    }

    pub fn actions(&self) -> usize {
        self.w_v.rows()
    }

    pub fn dim(&self) -> usize {
        self.w_v.cols()
    }

    pub fn has_interaction(&self) -> bool {
        self.interaction.data().iter().any(|&v| v != 0.0)
    }

    fn check_width(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::Shape {
                layer: "linear scorer input".into(),
                expected: vec![self.dim()],
                got: vec![v.len()],
            });
        }
        Ok(())
    }

    /// `W_v φ`.
    pub fn visual(&self, phi: &[f64]) -> Result<Vec<f64>> {
        self.check_width(phi)?;
        Ok(matvec(&self.w_v, phi))
    }

    /// `W_l ψ`.
    pub fn linguistic(&self, psi: &[f64]) -> Result<Vec<f64>> {
        self.check_width(psi)?;
        Ok(matvec(&self.w_l, psi))
    }
}

fn matvec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|a| m.row(a).iter().zip(v).map(|(w, x)| w * x).sum())
        .collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Logits for `φ` and `ψ`; `None` is the null condition and reads as `ψ = 0`.
pub fn linear_score(s: &LinearScorer, phi: &[f64], psi: Option<&[f64]>) -> Result<Vec<f64>> {
    let mut out = s.visual(phi)?;
    let Some(psi) = psi else {
        return Ok(out);
    };
    let lang = s.linguistic(psi)?;
    for (a, o) in out.iter_mut().enumerate() {
        let row = s.interaction.row(a);
        let cross: f64 = row.iter().zip(phi).zip(psi).map(|((u, p), q)| u * p * q).sum();
        *o += lang[a] + cross;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoupling {
    /// max |residual − W_l ψ|
    pub residual_error: f64,
    /// max |steered − (W_v φ + γ W_l ψ)|
    pub steered_error: f64,
}

impl Decoupling {
    pub fn max_error(&self) -> f64 {
        self.residual_error.max(self.steered_error)
    }
}

/// Runs the steering composition on the linear scorer and measures how far it
/// lands from the closed form.
pub fn verify_decoupling(s: &LinearScorer, phi: &[f64], psi: &[f64], gamma: f64) -> Result<Decoupling> {
    if s.has_interaction() {
        return Err(Error::Config(
            "decoupling is only exact without an interaction term".into(),
        ));
    }
    let s_cond = linear_score(s, phi, Some(psi))?;
    let s_null = linear_score(s, phi, None)?;
    let delta = steering::residual(&s_cond, &s_null)?;
    let steered = steering::steer_logits(&s_null, &delta, gamma)?;
    let lang = s.linguistic(psi)?;
    let closed: Vec<f64> = s
        .visual(phi)?
        .iter()
        .zip(&lang)
        .map(|(v, l)| v + gamma * l)
        .collect();
    Ok(Decoupling {
        residual_error: max_abs_diff(&delta, &lang),
        steered_error: max_abs_diff(&steered, &closed),
    })
}

/// Per-action ratio of the linguistic to the visual contribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snr {
    /// `|W_l ψ|_a / |W_v φ|_a`, or `None` where the visual term is zero.
    pub snr_std: Vec<Option<f64>>,
    /// The same ratio measured on the steered logits.
    pub snr_steered: Vec<Option<f64>>,
    /// Actions excluded because `|W_v φ|_a = 0`.
    pub undefined: Vec<usize>,
    /// max |snr_steered − γ·snr_std| / max(1, γ·snr_std) over defined actions.
    /// The ratio is unbounded as `|W_v φ|_a` shrinks, and one rounding step in
    /// the logits grows with it, so the error is taken on the ratio's scale.
    pub scaling_error: f64,
}

/// Signal-to-noise ratios before and after steering. The steered ratio is
/// measured from the steering output, not computed as `γ·snr_std`, so the
/// scaling law is a genuine check.
pub fn snr(s: &LinearScorer, phi: &[f64], psi: &[f64], gamma: f64) -> Result<Snr> {
    let visual = s.visual(phi)?;
    let lang = s.linguistic(psi)?;
    let s_null = linear_score(s, phi, None)?;
    let s_cond = linear_score(s, phi, Some(psi))?;
    let steered = steering::steer_logits(&s_null, &steering::residual(&s_cond, &s_null)?, gamma)?;
    let mut out = Snr {
        snr_std: Vec::with_capacity(visual.len()),
        snr_steered: Vec::with_capacity(visual.len()),
        undefined: Vec::new(),
        scaling_error: 0.0,
    };
    for a in 0..visual.len() {
        if visual[a] == 0.0 {
            out.snr_std.push(None);
            out.snr_steered.push(None);
            out.undefined.push(a);
            continue;
        }
        let base = lang[a].abs() / visual[a].abs();
        let amplified = (steered[a] - s_null[a]).abs() / visual[a].abs();
        let err = (amplified - gamma * base).abs() / (gamma * base).max(1.0);
        out.scaling_error = out.scaling_error.max(err);
        out.snr_std.push(Some(base));
        out.snr_steered.push(Some(amplified));
    }
    Ok(out)
}

/// Smallest γ at which `action_lang` outscores `action_visual` under steering:
/// `γ* = m_v / m_l`, with `m_v` the visual margin of `action_visual` and `m_l`
/// the linguistic margin of `action_lang`. `None` when language does not
/// prefer `action_lang` (`m_l ≤ 0`).
pub fn critical_gamma(
    s: &LinearScorer,
    phi: &[f64],
    psi: &[f64],
    action_visual: usize,
    action_lang: usize,
) -> Result<Option<f64>> {
    let visual = s.visual(phi)?;
    let lang = s.linguistic(psi)?;
    if action_visual >= visual.len() || action_lang >= visual.len() {
        return Err(Error::Config(format!(
            "actions {action_visual}, {action_lang} out of range for {} logits",
            visual.len()
        )));
    }
    if action_lang == action_visual {
        return Err(Error::Config("visual and language actions must differ".into()));
    }
    let s_null = linear_score(s, phi, None)?;
    if argmax(&s_null) != action_visual {
        return Err(Error::Config(format!(
            "action {action_visual} is not the unconditional argmax"
        )));
    }
    let m_v = visual[action_visual] - visual[action_lang];
    let m_l = lang[action_lang] - lang[action_visual];
    if m_l <= 0.0 {
        return Ok(None);
    }
    Ok(Some(m_v / m_l))
}

/// Argmax of the steered logits on the linear scorer.
pub fn steered_action(s: &LinearScorer, phi: &[f64], psi: &[f64], gamma: f64) -> Result<usize> {
    let s_cond = linear_score(s, phi, Some(psi))?;
    let s_null = linear_score(s, phi, None)?;
    let steered = steering::steer_logits(&s_null, &steering::residual(&s_cond, &s_null)?, gamma)?;
    Ok(steering::SteeredDistribution::from_logits(&steered).argmax())
}

fn frobenius(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn gaussian_vec(rng: &mut seed::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect()
}

/// A random scorer with ‖W_v‖ = `ratio`·‖W_l‖, plus `φ` and `ψ`.
pub fn random_instance(actions: usize, d: usize, ratio: f64, seed: u64) -> Result<(LinearScorer, Vec<f64>, Vec<f64>)> {
    let mut rng = seed::rng(seed);
    let w_v = Tensor::from_vec(&[actions, d], gaussian_vec(&mut rng, actions * d))?;
    let mut w_l = Tensor::from_vec(&[actions, d], gaussian_vec(&mut rng, actions * d))?;
    let scale = frobenius(&w_v) / (ratio * frobenius(&w_l));
    w_l.data_mut().iter_mut().for_each(|v| *v *= scale);
    let phi = gaussian_vec(&mut rng, d);
    let psi = gaussian_vec(&mut rng, d);
    Ok((LinearScorer::new(w_v, w_l)?, phi, psi))
}

/// A constructed instance where vision and language disagree.
#[derive(Clone, Debug)]
pub struct FlipInstance {
    pub scorer: LinearScorer,
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    pub action_visual: usize,
    pub action_lang: usize,
}

/// Builds a scorer whose visual logits favour one action and linguistic logits
/// another, with every other action below both of them in both modalities, so
/// the steered argmax can only be one of the two. The weights carry random
/// components orthogonal to `φ` and `ψ`, then `W_l` is rescaled to the given
/// dominance ratio.
pub fn flip_instance(actions: usize, d: usize, ratio: f64, seed: u64) -> Result<FlipInstance> {
    if actions < 2 || d < 2 {
        return Err(Error::Config("flip instances need at least 2 actions and 2 dimensions".into()));
    }
    let mut rng = seed::rng(seed);
    let action_visual = rng.random_range(0..actions);
    let action_lang = (action_visual + rng.random_range(1..actions)) % actions;

    // Target logits: vision prefers `action_visual` by a margin, language
    // prefers `action_lang`; the rest trail in both.
    let mut v = vec![0.0; actions];
    let mut l = vec![0.0; actions];
    let top = rng.random_range(2.0..4.0);
    let margin_v = rng.random_range(0.5..2.0);
    let margin_l = rng.random_range(0.5..2.0);
    for a in 0..actions {
        v[a] = top - margin_v - rng.random_range(0.5..1.5);
        l[a] = -rng.random_range(0.5..1.5);
    }
    v[action_visual] = top;
    v[action_lang] = top - margin_v;
    l[action_visual] = 0.0;
    l[action_lang] = margin_l;

    let phi = gaussian_vec(&mut rng, d);
    let psi = gaussian_vec(&mut rng, d);
    let embed = |target: &[f64], x: &[f64], rng: &mut seed::Rng| -> Result<Tensor> {
        let norm2: f64 = x.iter().map(|v| v * v).sum();
        let mut data = Vec::with_capacity(actions * d);
        for &t in target {
            let noise = gaussian_vec(rng, d);
            let along: f64 = noise.iter().zip(x).map(|(n, xi)| n * xi).sum::<f64>() / norm2;
            data.extend(
                noise
                    .iter()
                    .zip(x)
                    .map(|(n, xi)| n - along * xi + t * xi / norm2),
            );
        }
        Tensor::from_vec(&[actions, d], data)
    };
    let w_v = embed(&v, &phi, &mut rng)?;
    let mut w_l = embed(&l, &psi, &mut rng)?;
    let scale = frobenius(&w_v) / (ratio * frobenius(&w_l));
    w_l.data_mut().iter_mut().for_each(|x| *x *= scale);
    Ok(FlipInstance {
        scorer: LinearScorer::new(w_v, w_l)?,
        phi,
        psi,
        action_visual,
        action_lang,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub name: String,
    pub passed: bool,
    pub instances: usize,
    pub max_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<OracleCheck>,
}

const ACTIONS: usize = 7;
const DIM: usize = 8;

fn gamma_for(rng: &mut seed::Rng) -> f64 {
    rng.random_range(0.0..5.0)
}

/// Decoupling, residual cancellation, SNR scaling and the argmax-flip
/// threshold, each over `n` seeded instances.
pub fn run_oracle(n: usize, seed: u64) -> Result<OracleReport> {
    let mut checks = Vec::new();
    let mut rng = seed::rng_at(seed, &[0]);

    let mut worst = 0.0f64;
    for i in 0..n {
        let (s, phi, psi) = random_instance(ACTIONS, DIM, DOMINANCE_RATIO, seed::derive(seed, &[1, i as u64]))?;
        worst = worst.max(verify_decoupling(&s, &phi, &psi, gamma_for(&mut rng))?.max_error());
    }
    checks.push(OracleCheck {
        name: "decoupling".into(),
        passed: worst <= TOLERANCE,
        instances: n,
        max_error: worst,
    });

    let mut worst = 0.0f64;
    for i in 0..n {
        let (s, phi, psi) = random_instance(ACTIONS, DIM, DOMINANCE_RATIO, seed::derive(seed, &[2, i as u64]))?;
        let other: Vec<f64> = gaussian_vec(&mut rng, DIM);
        let a = steering::residual(&linear_score(&s, &phi, Some(&psi))?, &linear_score(&s, &phi, None)?)?;
        let b = steering::residual(&linear_score(&s, &other, Some(&psi))?, &linear_score(&s, &other, None)?)?;
        worst = worst.max(max_abs_diff(&a, &b));
    }
    checks.push(OracleCheck {
        name: "residual_cancellation".into(),
        passed: worst <= TOLERANCE,
        instances: n,
        max_error: worst,
    });

    let mut worst = 0.0f64;
    for i in 0..n {
        let (s, phi, psi) = random_instance(ACTIONS, DIM, DOMINANCE_RATIO, seed::derive(seed, &[3, i as u64]))?;
        worst = worst.max(snr(&s, &phi, &psi, gamma_for(&mut rng))?.scaling_error);
    }
    checks.push(OracleCheck {
        name: "snr_scaling".into(),
        passed: worst <= TOLERANCE,
        instances: n,
        max_error: worst,
    });

    let flips = flip_check(n.min(100).max(1), seed)?;
    checks.push(flips);

    Ok(OracleReport {
        seed,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

/// Gap around γ* inside which the flip is not asserted.
pub const FLIP_BUFFER: f64 = 0.01;

/// Decodes every constructed instance just below and just above its γ* and
/// counts mismatches with the closed-form prediction. `max_error` holds the
/// number of mismatching instances.
pub fn flip_check(n: usize, seed: u64) -> Result<OracleCheck> {
    let mut failures = 0usize;
    for i in 0..n {
        let inst = flip_instance(ACTIONS, DIM, DOMINANCE_RATIO, seed::derive(seed, &[4, i as u64]))?;
        let gamma_star = critical_gamma(&inst.scorer, &inst.phi, &inst.psi, inst.action_visual, inst.action_lang)?
            .ok_or_else(|| Error::Config("constructed instance has no flip".into()))?;
        let above = steered_action(&inst.scorer, &inst.phi, &inst.psi, gamma_star + FLIP_BUFFER)?;
        let below_ok = gamma_star <= FLIP_BUFFER
            || steered_action(&inst.scorer, &inst.phi, &inst.psi, gamma_star - FLIP_BUFFER)? == inst.action_visual;
        if above != inst.action_lang || !below_ok {
            failures += 1;
        }
    }
    Ok(OracleCheck {
        name: "flip_threshold".into(),
        passed: failures == 0,
        instances: n,
        max_error: failures as f64,
    })
}
