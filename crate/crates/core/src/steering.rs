//! Residual affordance steering.
//!
//! Every decode runs the policy twice, once on the instruction and once on the
//! null condition. The difference is the residual Δ, and the steered scores are
//! `s(a|o,∅) + γ·Δ`. At γ = 1 this is the plain conditional policy; larger γ
//! amplifies whatever the instruction changed. The flow head applies the same
//! composition to velocities at every integration step.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::policy::{Condition, Scorer};
use crate::seed;
use crate::worldsim::{ActionChunk, PrimitiveAction, Scene};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Discrete,
    Flow,
}

impl std::str::FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discrete" => Ok(Head::Discrete),
            "flow" => Ok(Head::Flow),
            other => Err(Error::Unknown {
                kind: "head",
                name: other.to_string(),
            }),
        }
    }
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Head::Discrete => "discrete",
            Head::Flow => "flow",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteeringConfig {
    pub gamma: f64,
    pub head: Head,
    /// Euler steps for the flow head.
    pub denoise_steps: usize,
    pub seed: u64,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        SteeringConfig {
            gamma: 1.0,
            head: Head::Discrete,
            denoise_steps: 10,
            seed: 0,
        }
    }
}

impl SteeringConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::Config(format!("gamma {} must be finite and non-negative", self.gamma)));
        }
        if self.denoise_steps == 0 {
            return Err(Error::Config("denoise_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// A normalized distribution over the seven primitives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteeredDistribution {
    pub probs: Vec<f64>,
}

impl SteeredDistribution {
    pub fn from_logits(logits: &[f64]) -> Self {
        SteeredDistribution {
            probs: nn::softmax(logits),
        }
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            layer: "steering".into(),
            expected: vec![a.len()],
            got: vec![b.len()],
        });
    }
    Ok(())
}

/// `s_cond - s_uncond`, elementwise.
pub fn residual(s_cond: &[f64], s_uncond: &[f64]) -> Result<Vec<f64>> {
    same_len(s_cond, s_uncond)?;
    Ok(s_cond.iter().zip(s_uncond).map(|(c, u)| c - u).collect())
}

/// `s_uncond + gamma * delta`.
pub fn steer_logits(s_uncond: &[f64], delta: &[f64], gamma: f64) -> Result<Vec<f64>> {
    same_len(s_uncond, delta)?;
    let out: Vec<f64> = s_uncond.iter().zip(delta).map(|(u, d)| u + gamma * d).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "steered logits".into(),
        });
    }
    Ok(out)
}

/// Steered logits for one state, using exactly two head evaluations.
pub fn steered_logits<S: Scorer + ?Sized>(
    scorer: &S,
    scene: &Scene,
    condition: &Condition,
    gamma: f64,
) -> Result<Vec<f64>> {
    let s_cond = scorer.score(scene, condition)?;
    let s_null = scorer.score(scene, &Condition::Null)?;
    steer_logits(&s_null, &residual(&s_cond, &s_null)?, gamma)
}

/// Steered distribution and its argmax primitive.
pub fn decode_discrete<S: Scorer + ?Sized>(
    scorer: &S,
    scene: &Scene,
    condition: &Condition,
    cfg: &SteeringConfig,
) -> Result<(SteeredDistribution, PrimitiveAction)> {
    cfg.validate()?;
    let dist = SteeredDistribution::from_logits(&steered_logits(scorer, scene, condition, cfg.gamma)?);
    let action = PrimitiveAction::from_index(dist.argmax()).expect("seven logits");
    Ok((dist, action))
}

fn initial_noise(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = seed::rng(seed);
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

fn clamp_chunk(state: Vec<f64>) -> ActionChunk {
    ActionChunk::from_flat(&state.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect::<Vec<_>>())
}

/// Guided Euler integration from seeded noise at τ = 0 to a chunk at τ = 1,
/// clamped to [-1, 1]. Performs exactly `2 * denoise_steps` velocity calls.
pub fn decode_flow<S: Scorer + ?Sized>(
    scorer: &S,
    scene: &Scene,
    condition: &Condition,
    cfg: &SteeringConfig,
) -> Result<ActionChunk> {
    cfg.validate()?;
    let mut state = initial_noise(3 * scorer.horizon(), cfg.seed);
    let dt = 1.0 / cfg.denoise_steps as f64;
    for i in 0..cfg.denoise_steps {
        let tau = i as f64 * dt;
        let v_cond = scorer.velocity(scene, condition, &state, tau)?;
        let v_null = scorer.velocity(scene, &Condition::Null, &state, tau)?;
        let v = steer_logits(&v_null, &residual(&v_cond, &v_null)?, cfg.gamma)?;
        for (x, dv) in state.iter_mut().zip(&v) {
            *x += dt * dv;
        }
        if state.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("flow state at step {i}"),
            });
        }
    }
    Ok(clamp_chunk(state))
}

/// Unguided integration on the conditional velocity alone, from the same noise
/// as [`decode_flow`].
pub fn integrate_conditional<S: Scorer + ?Sized>(
    scorer: &S,
    scene: &Scene,
    condition: &Condition,
    denoise_steps: usize,
    seed: u64,
) -> Result<ActionChunk> {
    if denoise_steps == 0 {
        return Err(Error::Config("denoise_steps must be at least 1".into()));
    }
    let mut state = initial_noise(3 * scorer.horizon(), seed);
    let dt = 1.0 / denoise_steps as f64;
    for i in 0..denoise_steps {
        let v = scorer.velocity(scene, condition, &state, i as f64 * dt)?;
        for (x, dv) in state.iter_mut().zip(&v) {
            *x += dt * dv;
        }
    }
    Ok(clamp_chunk(state))
}

/// Steered logits at `gamma` minus steered logits at 1.
pub fn steering_gap<S: Scorer + ?Sized>(
    scorer: &S,
    scene: &Scene,
    condition: &Condition,
    gamma: f64,
) -> Result<Vec<f64>> {
    let s_cond = scorer.score(scene, condition)?;
    let s_null = scorer.score(scene, &Condition::Null)?;
    let delta = residual(&s_cond, &s_null)?;
    residual(&steer_logits(&s_null, &delta, gamma)?, &steer_logits(&s_null, &delta, 1.0)?)
}
