//! The toy vision-language-action policy.
//!
//! A scene featurizer and visual MLP produce φ(o); a token embedding table with
//! sinusoidal positions produces ψ(l). Both feed a discrete head (logits over
//! the seven primitives) and a flow head (velocity over an action chunk).
//! Training uses either plain maximum likelihood on the recorded instruction or
//! the expected semantic loss over sampled paraphrases, with condition dropout
//! so that the null-conditioned pass is trained as well.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lang::{self, Grammar, Instruction, TokenSeq, Vocabulary};
use crate::nn::{
    self, Activation, AdamState, Mlp, MlpTrace, ParamId, ParamSet, ScheduleConfig, Tensor,
    TensorRecord,
};
use crate::seed;
use crate::worldsim::{step, Cell, Destination, EpisodeRecord, Intent, PrimitiveAction, Scene};

/// Object slots in the scene features, nearest first.
pub const SLOTS: usize = 4;
const SLOT_WIDTH: usize = 18;
/// Slot features seen by the attention key: all but the presence flag, which
/// is 1 for every slot the softmax ranges over and so cannot tell them apart.
const KEY_WIDTH: usize = SLOT_WIDTH - 1;
const ZONE_WIDTH: usize = 10;
/// Width of [`featurize`]'s output.
pub const FEATURE_DIM: usize = SLOTS * SLOT_WIDTH + 4 * ZONE_WIDTH + 3 + 4;
const GLOBAL_WIDTH: usize = FEATURE_DIM - SLOTS * SLOT_WIDTH;
const TIME_FEATURES: usize = 4;
pub const CHECKPOINT_VERSION: u32 = 1;

fn sign_one_hot(v: i32) -> [f64; 3] {
    match v.signum() {
        -1 => [1.0, 0.0, 0.0],
        0 => [0.0, 1.0, 0.0],
        _ => [0.0, 0.0, 1.0],
    }
}

/// Fixed-size scene description.
///
/// Objects fill [`SLOTS`] slots ordered by (distance to gripper, x, y), so the
/// features never depend on object ids. Each slot holds presence, color and
/// shape one-hots, the scaled offset from the gripper with its signs, and a
/// held flag. Each zone contributes the offset to its nearest cell, an in-zone
/// flag and an occupancy flag. The tail holds the gripper position, a holding
/// flag, and one flag per direction for moves that would have no effect.
pub fn featurize(scene: &Scene) -> Vec<f64> {
    let scale = f64::from((scene.grid_size - 1).max(1));
    let g = scene.gripper;
    let mut f = Vec::with_capacity(FEATURE_DIM);

    let mut objects: Vec<_> = scene.objects.iter().collect();
    objects.sort_by_key(|o| (o.cell.manhattan(g), o.cell.x, o.cell.y));
    for slot in 0..SLOTS {
        match objects.get(slot) {
            Some(o) => {
                let (dx, dy) = (o.cell.x - g.x, o.cell.y - g.y);
                f.push(1.0);
                f.extend((0..4).map(|i| f64::from(u8::from(o.color.index() == i))));
                f.extend((0..4).map(|i| f64::from(u8::from(o.shape.index() == i))));
                f.push(f64::from(dx) / scale);
                f.push(f64::from(dy) / scale);
                f.extend(sign_one_hot(dx));
                f.extend(sign_one_hot(dy));
                f.push(f64::from(u8::from(scene.held == Some(o.id))));
            }
            None => f.extend([0.0; SLOT_WIDTH]),
        }
    }

    for d in Destination::ALL {
        let cells = scene.zone(d);
        let nearest = cells
            .iter()
            .min_by_key(|c| (c.manhattan(g), c.x, c.y))
            .copied()
            .unwrap_or(g);
        let (dx, dy) = (nearest.x - g.x, nearest.y - g.y);
        f.push(f64::from(dx) / scale);
        f.push(f64::from(dy) / scale);
        f.extend(sign_one_hot(dx));
        f.extend(sign_one_hot(dy));
        f.push(f64::from(u8::from(cells.contains(&g))));
        let occupied = scene
            .objects
            .iter()
            .any(|o| scene.held != Some(o.id) && cells.contains(&o.cell));
        f.push(f64::from(u8::from(occupied)));
    }

    f.push(f64::from(g.x) / scale);
    f.push(f64::from(g.y) / scale);
    f.push(f64::from(u8::from(scene.held.is_some())));
    for a in [
        PrimitiveAction::Up,
        PrimitiveAction::Down,
        PrimitiveAction::Left,
        PrimitiveAction::Right,
    ] {
        let (dx, dy) = a.delta();
        let next = Cell::new(g.x + dx, g.y + dy);
        let blocked = !scene.in_bounds(next)
            || (scene.held.is_some()
                && scene
                    .object_at(next)
                    .is_some_and(|o| scene.held != Some(o.id)));
        f.push(f64::from(u8::from(blocked)));
    }
    debug_assert_eq!(f.len(), FEATURE_DIM);
    f
}

fn time_features(tau: f64) -> [f64; TIME_FEATURES] {
    let t = std::f64::consts::PI * tau;
    [tau, t.sin(), t.cos(), (2.0 * t).sin()]
}

/// What the language stream is conditioned on.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Condition {
    /// The null condition ∅, encoded by a learned vector.
    Null,
    Tokens(TokenSeq),
}

impl Condition {
    pub fn is_null(&self) -> bool {
        matches!(self, Condition::Null)
    }
}

/// Which heads a loss covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Heads {
    pub discrete: bool,
    pub flow: bool,
}

impl Heads {
    pub const BOTH: Heads = Heads {
        discrete: true,
        flow: true,
    };
    pub const DISCRETE: Heads = Heads {
        discrete: true,
        flow: false,
    };
    pub const FLOW: Heads = Heads {
        discrete: false,
        flow: true,
    };
}

/// Anything that can play the policy's role at decode time.
pub trait Scorer {
    /// Logits over the seven primitives.
    fn score(&self, scene: &Scene, condition: &Condition) -> Result<Vec<f64>>;

    /// Flow-head velocity for a flattened chunk state at time `tau`.
    fn velocity(
        &self,
        scene: &Scene,
        condition: &Condition,
        chunk_state: &[f64],
        tau: f64,
    ) -> Result<Vec<f64>>;

    fn condition(&self, instruction: &Instruction) -> Condition;

    fn horizon(&self) -> usize;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub max_len: usize,
    pub horizon: usize,
    /// Multiplier on the sinusoidal position table.
    pub position_scale: f64,
    pub activation: Activation,
    /// Hidden layers in each head.
    pub head_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 32,
            hidden: 64,
            max_len: lang::DEFAULT_MAX_LEN,
            horizon: crate::worldsim::DEFAULT_HORIZON,
            position_scale: 0.5,
            activation: Activation::Tanh,
            head_layers: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0
            || self.hidden == 0
            || self.max_len == 0
            || self.horizon == 0
            || self.head_layers == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.position_scale.is_finite() {
            return Err(Error::Config("position_scale must be finite".into()));
        }
        Ok(())
    }
}

/// φ(o) = Σ over present slots of a shared slot network, plus a network over
/// the zone and gripper features. Sharing across slots means that whatever the
/// slot network learns about one object applies to every object.
///
/// Alongside φ the encoder produces a language-addressed readout: the
/// instruction embedding is projected to a query, each present slot's raw
/// features to a key, and the slot network outputs are averaged under the
/// softmax of query·key. This is the only path by which the instruction can
/// pick out one object among several.
#[derive(Clone, Debug)]
struct VisualEncoder {
    slot: Mlp,
    global: Mlp,
    query: Mlp,
    /// `[KEY_WIDTH, d]`, no bias: a shared bias would shift every slot's
    /// score equally and leave the softmax unchanged.
    key: ParamId,
}

struct VisualTrace {
    slot: MlpTrace,
    present: Vec<f64>,
    global: MlpTrace,
}

struct AttendTrace {
    query: MlpTrace,
    key_in: Tensor,
    key: Tensor,
    weights: Vec<f64>,
}

impl VisualEncoder {
    fn forward(&self, params: &ParamSet, features: &Tensor) -> Result<(Tensor, VisualTrace)> {
        let n = features.rows();
        let mut slot_in = Vec::with_capacity(n * SLOTS * SLOT_WIDTH);
        let mut present = Vec::with_capacity(n * SLOTS);
        let mut global_in = Vec::with_capacity(n * GLOBAL_WIDTH);
        for r in 0..n {
            let row = features.row(r);
            for j in 0..SLOTS {
                let block = &row[j * SLOT_WIDTH..(j + 1) * SLOT_WIDTH];
                present.push(block[0]);
                slot_in.extend_from_slice(block);
            }
            global_in.extend_from_slice(&row[SLOTS * SLOT_WIDTH..]);
        }
        let slot = self
            .slot
            .forward(params, Tensor::from_vec(&[n * SLOTS, SLOT_WIDTH], slot_in)?)?;
        let global = self
            .global
            .forward(params, Tensor::from_vec(&[n, GLOBAL_WIDTH], global_in)?)?;
        let mut phi = global.output().clone();
        for r in 0..n {
            let out = phi.row_mut(r);
            for j in 0..SLOTS {
                let w = present[r * SLOTS + j];
                if w != 0.0 {
                    for (o, v) in out.iter_mut().zip(slot.output().row(r * SLOTS + j)) {
                        *o += w * v;
                    }
                }
            }
        }
        Ok((phi, VisualTrace { slot, present, global }))
    }

    /// Slot readout addressed by `psi`. Rows without any present slot read zeros.
    fn attend(&self, params: &ParamSet, trace: &VisualTrace, psi: &Tensor) -> Result<(Tensor, AttendTrace)> {
        let n = psi.rows();
        let d = psi.cols();
        let scale = 1.0 / (d as f64).sqrt();
        let query = self.query.forward(params, psi.clone())?;
        let slot_in = trace.slot.input();
        let key_in: Vec<f64> = (0..slot_in.rows()).flat_map(|i| slot_in.row(i)[1..].to_vec()).collect();
        let key_in = Tensor::from_vec(&[slot_in.rows(), KEY_WIDTH], key_in)?;
        let mut key = Tensor::zeros(&[slot_in.rows(), d]);
        nn::gemm(
            slot_in.rows(),
            KEY_WIDTH,
            d,
            key_in.data(),
            false,
            params.value(self.key).data(),
            false,
            key.data_mut(),
            0.0,
        );
        let values = trace.slot.output();
        let mut out = Tensor::zeros(&[n, d]);
        let mut weights = vec![0.0; n * SLOTS];
        for r in 0..n {
            let q = query.output().row(r);
            let mut best = f64::NEG_INFINITY;
            let mut scores = [f64::NEG_INFINITY; SLOTS];
            for (j, e) in scores.iter_mut().enumerate() {
                if trace.present[r * SLOTS + j] != 0.0 {
                    let k = key.row(r * SLOTS + j);
                    *e = scale * q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>();
                    best = best.max(*e);
                }
            }
            if best == f64::NEG_INFINITY {
                continue;
            }
            let total: f64 = scores.iter().map(|e| (e - best).exp()).sum();
            let row = out.row_mut(r);
            for (j, e) in scores.iter().enumerate() {
                let w = (e - best).exp() / total;
                weights[r * SLOTS + j] = w;
                if w != 0.0 {
                    for (o, v) in row.iter_mut().zip(values.row(r * SLOTS + j)) {
                        *o += w * v;
                    }
                }
            }
        }
        Ok((
            out,
            AttendTrace {
                query,
                key_in,
                key,
                weights,
            },
        ))
    }

    /// Returns the gradient on ψ from the attention readout.
    fn backward(
        &self,
        params: &mut ParamSet,
        trace: &VisualTrace,
        attend: &AttendTrace,
        dphi: Tensor,
        dread: &Tensor,
    ) -> Result<Tensor> {
        let n = dphi.rows();
        let d = dphi.cols();
        let scale = 1.0 / (d as f64).sqrt();
        let values = trace.slot.output();
        let mut dslot = Tensor::zeros(&[n * SLOTS, d]);
        let mut dquery = Tensor::zeros(&[n, d]);
        let mut dkey = Tensor::zeros(&[n * SLOTS, d]);
        for r in 0..n {
            let g = dread.row(r);
            let alpha = &attend.weights[r * SLOTS..(r + 1) * SLOTS];
            let mut dalpha = [0.0; SLOTS];
            for j in 0..SLOTS {
                let w = trace.present[r * SLOTS + j];
                let a = alpha[j];
                dalpha[j] = g.iter().zip(values.row(r * SLOTS + j)).map(|(x, y)| x * y).sum();
                for ((o, p), q) in dslot.row_mut(r * SLOTS + j).iter_mut().zip(dphi.row(r)).zip(g) {
                    *o = w * p + a * q;
                }
            }
            let mean: f64 = alpha.iter().zip(&dalpha).map(|(a, b)| a * b).sum();
            let q = attend.query.output().row(r).to_vec();
            for j in 0..SLOTS {
                let de = scale * alpha[j] * (dalpha[j] - mean);
                if de == 0.0 {
                    continue;
                }
                let k = attend.key.row(r * SLOTS + j);
                for (o, kv) in dquery.row_mut(r).iter_mut().zip(k) {
                    *o += de * kv;
                }
                for (o, qv) in dkey.row_mut(r * SLOTS + j).iter_mut().zip(&q) {
                    *o += de * qv;
                }
            }
        }
        self.slot.backward(params, &trace.slot, dslot)?;
        self.global.backward(params, &trace.global, dphi)?;
        let key_in = &attend.key_in;
        nn::gemm(
            KEY_WIDTH,
            key_in.rows(),
            d,
            key_in.data(),
            true,
            dkey.data(),
            false,
            params.grad_mut(self.key).data_mut(),
            1.0,
        );
        self.query.backward(params, &attend.query, dquery)
    }
}

enum LangTrace {
    Null,
    Blank,
    /// Token ids and the per-position `tanh(E[t] + p)` values.
    Tokens(Vec<(u32, Vec<f64>)>),
}

/// Everything the heads read for a batch of rows.
struct Encoded {
    phi: Tensor,
    psi: Tensor,
    read: Tensor,
}

/// One row of a training batch.
#[derive(Clone, Debug)]
pub(crate) struct Row<'a> {
    pub scene: &'a Scene,
    pub condition: Condition,
    pub action: PrimitiveAction,
    pub chunk: &'a [f64],
    pub noise_seed: u64,
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct PolicyModel {
    config: ModelConfig,
    vocab: Vocabulary,
    params: ParamSet,
    positions: Vec<Vec<f64>>,
    embedding: ParamId,
    null: ParamId,
    visual: VisualEncoder,
    discrete: Mlp,
    flow: Mlp,
}

impl PolicyModel {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let h = config.hidden;
        let act = config.activation;
        let mut rng = seed::rng(seed);
        let mut params = ParamSet::new();
        // Reserved ids start at zero: nothing trains the UNK and MASK rows
        // under plain likelihood, and a zero row adds no content of its own.
        let table: Vec<f64> = (0..vocab.len() * d)
            .map(|i| {
                let id = (i / d) as u32;
                let w: f64 = rng.random_range(-0.5..=0.5);
                if id == lang::UNK || id == lang::MASK { 0.0 } else { w }
            })
            .collect();
        let embedding = params.add("embedding", Tensor::from_vec(&[vocab.len(), d], table)?)?;
        let null_vec: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..=0.5)).collect();
        let null = params.add("null", Tensor::from_vec(&[d], null_vec)?)?;
        let visual = VisualEncoder {
            slot: Mlp::build(&mut params, "visual.slot", &[SLOT_WIDTH, h, d], act, act, 1.0, &mut rng)?,
            global: Mlp::build(&mut params, "visual.global", &[GLOBAL_WIDTH, h, d], act, act, 1.0, &mut rng)?,
            query: Mlp::build(&mut params, "visual.query", &[d, d], act, Activation::Identity, 1.0, &mut rng)?,
            key: {
                let bound = (6.0 / (KEY_WIDTH + d) as f64).sqrt();
                let w = (0..KEY_WIDTH * d).map(|_| rng.random_range(-bound..=bound)).collect();
                params.add("visual.key.w", Tensor::from_vec(&[KEY_WIDTH, d], w)?)?
            },
        };
        let dims = |input: usize, output: usize| {
            let mut v = vec![input];
            v.extend(std::iter::repeat_n(h, config.head_layers));
            v.push(output);
            v
        };
        let discrete = Mlp::build(
            &mut params,
            "discrete",
            &dims(4 * d, PrimitiveAction::COUNT),
            act,
            Activation::Identity,
            1.0,
            &mut rng,
        )?;
        let chunk = 3 * config.horizon;
        let flow = Mlp::build(
            &mut params,
            "flow",
            &dims(4 * d + chunk + TIME_FEATURES, chunk),
            act,
            Activation::Identity,
            1.0,
            &mut rng,
        )?;
        let positions = (0..config.max_len)
            .map(|pos| {
                (0..d)
                    .map(|i| {
                        let rate = 10000f64.powf((i - i % 2) as f64 / d as f64);
                        let angle = pos as f64 / rate;
                        config.position_scale * if i % 2 == 0 { angle.sin() } else { angle.cos() }
                    })
                    .collect()
            })
            .collect();
        Ok(PolicyModel {
            config,
            vocab,
            params,
            positions,
            embedding,
            null,
            visual,
            discrete,
            flow,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Replaces every parameter; names and shapes must match.
    pub fn set_params(&mut self, params: &ParamSet) -> Result<()> {
        self.params.load_records(&params.to_records())
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Zeroes both heads, which makes every logit and velocity zero.
    pub fn zero_heads(&mut self) {
        for layer in self.discrete.layers.iter().chain(&self.flow.layers) {
            self.params.value_mut(layer.weight).fill(0.0);
            self.params.value_mut(layer.bias).fill(0.0);
        }
    }

    pub fn tokens(&self, instruction: &Instruction) -> TokenSeq {
        lang::tokenize(&self.vocab, instruction, self.config.max_len)
    }

    /// φ(o).
    pub fn embed_visual(&self, scene: &Scene) -> Result<Vec<f64>> {
        let x = Tensor::from_vec(&[1, FEATURE_DIM], featurize(scene))?;
        Ok(self.visual.forward(&self.params, &x)?.0.into_data())
    }

    /// ψ(l). The null condition returns the learned null vector; an all-padding
    /// sequence returns zeros.
    pub fn embed_language(&self, condition: &Condition) -> Vec<f64> {
        let (psi, _) = self.encode_language(std::slice::from_ref(condition));
        psi.into_data()
    }

    fn encode_language(&self, conditions: &[Condition]) -> (Tensor, Vec<LangTrace>) {
        let d = self.config.embed_dim;
        let table = self.params.value(self.embedding);
        let mut psi = Tensor::zeros(&[conditions.len(), d]);
        let mut traces = Vec::with_capacity(conditions.len());
        for (r, cond) in conditions.iter().enumerate() {
            let out = psi.row_mut(r);
            match cond {
                Condition::Null => {
                    out.copy_from_slice(self.params.value(self.null).data());
                    traces.push(LangTrace::Null);
                }
                Condition::Tokens(seq) => {
                    let content: Vec<(usize, u32)> = seq.content().collect();
                    if content.is_empty() {
                        traces.push(LangTrace::Blank);
                        continue;
                    }
                    let inv = 1.0 / content.len() as f64;
                    let mut cache = Vec::with_capacity(content.len());
                    for (pos, id) in content {
                        let e = table.row(id as usize);
                        let p = &self.positions[pos.min(self.positions.len() - 1)];
                        let hdn: Vec<f64> = e.iter().zip(p).map(|(a, b)| (a + b).tanh()).collect();
                        for (o, v) in out.iter_mut().zip(&hdn) {
                            *o += inv * v;
                        }
                        cache.push((id, hdn));
                    }
                    traces.push(LangTrace::Tokens(cache));
                }
            }
        }
        (psi, traces)
    }

    fn backward_language(&mut self, traces: &[LangTrace], dpsi: &Tensor) {
        let (emb, null) = (self.embedding, self.null);
        for (r, trace) in traces.iter().enumerate() {
            let g = dpsi.row(r);
            match trace {
                LangTrace::Blank => {}
                LangTrace::Null => {
                    for (a, b) in self.params.grad_mut(null).data_mut().iter_mut().zip(g) {
                        *a += b;
                    }
                }
                LangTrace::Tokens(cache) => {
                    let inv = 1.0 / cache.len() as f64;
                    let grad = self.params.grad_mut(emb);
                    for (id, hdn) in cache {
                        let row = grad.row_mut(*id as usize);
                        for ((a, gi), h) in row.iter_mut().zip(g).zip(hdn) {
                            *a += inv * gi * (1.0 - h * h);
                        }
                    }
                }
            }
        }
    }

    fn features(scenes: &[&Scene]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(scenes.len() * FEATURE_DIM);
        for s in scenes {
            data.extend(featurize(s));
        }
        Tensor::from_vec(&[scenes.len(), FEATURE_DIM], data)
    }

    /// `[φ; ψ; φ ⊙ ψ; read]` per row. The product lets the heads gate scene
    /// features by what the instruction asks for.
    fn joint(enc: &Encoded) -> Result<Tensor> {
        let (phi, psi, read) = (&enc.phi, &enc.psi, &enc.read);
        let n = phi.rows();
        let d = phi.cols();
        let mut data = Vec::with_capacity(n * 4 * d);
        for r in 0..n {
            let (a, b) = (phi.row(r), psi.row(r));
            data.extend_from_slice(a);
            data.extend_from_slice(b);
            data.extend(a.iter().zip(b).map(|(x, y)| x * y));
            data.extend_from_slice(read.row(r));
        }
        Tensor::from_vec(&[n, 4 * d], data)
    }

    fn flow_inputs(enc: &Encoded, states: &[Vec<f64>], taus: &[f64]) -> Result<Tensor> {
        let n = enc.phi.rows();
        let joint = Self::joint(enc)?;
        let width = joint.cols() + states[0].len() + TIME_FEATURES;
        let mut data = Vec::with_capacity(n * width);
        for r in 0..n {
            data.extend_from_slice(joint.row(r));
            data.extend_from_slice(&states[r]);
            data.extend(time_features(taus[r]));
        }
        Tensor::from_vec(&[n, width], data)
    }

    fn head_error(what: &str) -> Error {
        Error::NonFinite {
            context: what.to_string(),
        }
    }

    /// Weighted training loss over `rows`: gradients of `Σ w_r ℓ_r` are added
    /// to the parameter buffers and the unweighted per-row losses returned.
    pub(crate) fn accumulate(&mut self, rows: &[Row<'_>], heads: Heads) -> Result<Vec<f64>> {
        if rows.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let d = self.config.embed_dim;
        let chunk_len = 3 * self.config.horizon;
        let scenes: Vec<&Scene> = rows.iter().map(|r| r.scene).collect();
        let conditions: Vec<Condition> = rows.iter().map(|r| r.condition.clone()).collect();
        let (phi, visual) = self.visual.forward(&self.params, &Self::features(&scenes)?)?;
        let (psi, lang_traces) = self.encode_language(&conditions);
        let (read, attend) = self.visual.attend(&self.params, &visual, &psi)?;
        let enc = Encoded { phi, psi, read };
        let n = rows.len();
        let mut per_row = vec![0.0; n];
        let mut dphi = Tensor::zeros(&[n, d]);
        let mut dpsi = Tensor::zeros(&[n, d]);
        let mut dread = Tensor::zeros(&[n, d]);

        let add_split = |din: &Tensor, dphi: &mut Tensor, dpsi: &mut Tensor, dread: &mut Tensor| {
            for r in 0..n {
                let g = din.row(r);
                let (p, q) = (enc.phi.row(r), enc.psi.row(r));
                for (i, a) in dphi.row_mut(r).iter_mut().enumerate() {
                    *a += g[i] + g[2 * d + i] * q[i];
                }
                for (i, a) in dpsi.row_mut(r).iter_mut().enumerate() {
                    *a += g[d + i] + g[2 * d + i] * p[i];
                }
                for (i, a) in dread.row_mut(r).iter_mut().enumerate() {
                    *a += g[3 * d + i];
                }
            }
        };

        if heads.discrete {
            let trace = self.discrete.forward(&self.params, Self::joint(&enc)?)?;
            let targets: Vec<usize> = rows.iter().map(|r| r.action.index()).collect();
            let (losses, mut grad) = nn::cross_entropy_rows(trace.output(), &targets)?;
            for (r, row) in rows.iter().enumerate() {
                per_row[r] += losses[r];
                grad.row_mut(r).iter_mut().for_each(|g| *g *= row.weight);
            }
            let din = self.discrete.backward(&mut self.params, &trace, grad)?;
            add_split(&din, &mut dphi, &mut dpsi, &mut dread);
        }

        if heads.flow {
            let mut states = Vec::with_capacity(n);
            let mut taus = Vec::with_capacity(n);
            let mut target = Tensor::zeros(&[n, chunk_len]);
            for (r, row) in rows.iter().enumerate() {
                if row.chunk.len() != chunk_len {
                    return Err(Error::Shape {
                        layer: "flow".into(),
                        expected: vec![chunk_len],
                        got: vec![row.chunk.len()],
                    });
                }
                let mut rng = seed::rng(row.noise_seed);
                let noise: Vec<f64> = (0..chunk_len).map(|_| rng.sample(StandardNormal)).collect();
                let tau: f64 = rng.random();
                let state: Vec<f64> = noise
                    .iter()
                    .zip(row.chunk)
                    .map(|(e, x)| (1.0 - tau) * e + tau * x)
                    .collect();
                for (t, (e, x)) in target.row_mut(r).iter_mut().zip(noise.iter().zip(row.chunk)) {
                    *t = x - e;
                }
                states.push(state);
                taus.push(tau);
            }
            let trace = self
                .flow
                .forward(&self.params, Self::flow_inputs(&enc, &states, &taus)?)?;
            let (losses, mut grad) = nn::squared_error_rows(trace.output(), &target)?;
            for (r, row) in rows.iter().enumerate() {
                per_row[r] += losses[r];
                grad.row_mut(r).iter_mut().for_each(|g| *g *= row.weight);
            }
            let din = self.flow.backward(&mut self.params, &trace, grad)?;
            add_split(&din, &mut dphi, &mut dpsi, &mut dread);
        }

        if per_row.iter().any(|l| !l.is_finite()) {
            return Err(Self::head_error("training loss"));
        }
        let visual_net = self.visual.clone();
        let from_read = visual_net.backward(&mut self.params, &visual, &attend, dphi, &dread)?;
        for (a, b) in dpsi.data_mut().iter_mut().zip(from_read.data()) {
            *a += b;
        }
        self.backward_language(&lang_traces, &dpsi);
        Ok(per_row)
    }

    fn head_input(&self, scene: &Scene, condition: &Condition) -> Result<Encoded> {
        let (phi, visual) = self.visual.forward(&self.params, &Self::features(&[scene])?)?;
        let (psi, _) = self.encode_language(std::slice::from_ref(condition));
        let (read, _) = self.visual.attend(&self.params, &visual, &psi)?;
        Ok(Encoded { phi, psi, read })
    }

    fn run(&self, mlp: &Mlp, input: Tensor, what: &str) -> Result<Vec<f64>> {
        let out: MlpTrace = mlp.forward(&self.params, input)?;
        let out = out.into_output();
        if !out.is_finite() {
            return Err(Self::head_error(what));
        }
        Ok(out.into_data())
    }
}

impl Scorer for PolicyModel {
    fn score(&self, scene: &Scene, condition: &Condition) -> Result<Vec<f64>> {
        let enc = self.head_input(scene, condition)?;
        self.run(&self.discrete, Self::joint(&enc)?, "discrete head")
    }

    fn velocity(
        &self,
        scene: &Scene,
        condition: &Condition,
        chunk_state: &[f64],
        tau: f64,
    ) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::Config(format!("flow time {tau} outside [0, 1]")));
        }
        if chunk_state.len() != 3 * self.config.horizon {
            return Err(Error::Shape {
                layer: "flow".into(),
                expected: vec![3 * self.config.horizon],
                got: vec![chunk_state.len()],
            });
        }
        let enc = self.head_input(scene, condition)?;
        let input = Self::flow_inputs(&enc, &[chunk_state.to_vec()], &[tau])?;
        self.run(&self.flow, input, "flow head")
    }

    fn condition(&self, instruction: &Instruction) -> Condition {
        Condition::Tokens(self.tokens(instruction))
    }

    fn horizon(&self) -> usize {
        self.config.horizon
    }
}

/// One supervised state: the scene, what was asked, and what the expert did.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub scene: Scene,
    pub intent: Intent,
    pub instruction: Instruction,
    pub action: PrimitiveAction,
    /// The expert's next `horizon` primitives, flattened chunk encoding.
    pub chunk: Vec<f64>,
}

/// Every state an expert episode passes through, with the expert's next
/// primitive and the chunk of primitives starting there.
pub fn expand_records(records: &[EpisodeRecord], horizon: usize) -> Vec<Sample> {
    let mut out = Vec::new();
    for rec in records {
        let Some(first) = rec.frames.first() else {
            continue;
        };
        let actions = rec.trajectory().primitive_actions();
        let instruction = Instruction::new(&rec.instruction);
        let mut scene = first.scene.clone();
        for i in 0..actions.len() {
            let end = (i + horizon).min(actions.len());
            let chunk = crate::worldsim::ActionChunk::encode(&actions[i..end], scene.held.is_some(), horizon);
            out.push(Sample {
                scene: scene.clone(),
                intent: rec.intent,
                instruction: instruction.clone(),
                action: actions[i],
                chunk: chunk.flat(),
            });
            scene = step(&scene, actions[i]);
        }
    }
    out
}

/// Mean over groups of the mean within each group.
pub fn expected_semantic_average(groups: &[Vec<f64>]) -> f64 {
    groups
        .iter()
        .map(|g| g.iter().sum::<f64>() / g.len() as f64)
        .sum::<f64>()
        / groups.len() as f64
}

/// Where the `K` realizations of each sample come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Realizations {
    /// Fresh draws from the grammar's paraphrase distribution.
    Sampled,
    /// The sample's own instruction, repeated.
    Pinned,
}

fn noise_seed(seed: u64, b: usize, k: usize) -> u64 {
    seed::derive(seed, &[b as u64, k as u64])
}

/// Mean per-sample loss on the recorded instruction. Gradients accumulate into
/// the model's buffers.
pub fn mle_loss(model: &mut PolicyModel, batch: &[Sample], heads: Heads, seed: u64) -> Result<f64> {
    let w = 1.0 / batch.len() as f64;
    let rows: Vec<Row<'_>> = batch
        .iter()
        .enumerate()
        .map(|(b, s)| Row {
            scene: &s.scene,
            condition: model.condition(&s.instruction),
            action: s.action,
            chunk: &s.chunk,
            noise_seed: noise_seed(seed, b, 0),
            weight: w,
        })
        .collect();
    let losses = model.accumulate(&rows, heads)?;
    Ok(losses.iter().sum::<f64>() / batch.len() as f64)
}

fn realizations(
    grammar: &Grammar,
    sample: &Sample,
    k: usize,
    source: Realizations,
    seed: u64,
) -> Result<Vec<Instruction>> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    Ok(match source {
        Realizations::Pinned => vec![sample.instruction.clone(); k],
        Realizations::Sampled => lang::neighborhood(grammar, &sample.intent, k, seed)?.items,
    })
}

fn neighborhood_seed(seed: u64, b: usize) -> u64 {
    seed::derive(seed, &[b as u64, u64::MAX])
}

/// Monte Carlo expected semantic loss: each sample's loss is averaged over `k`
/// realizations of its intent, then averaged over the batch. Gradients
/// accumulate into the model's buffers.
pub fn expected_semantic_loss(
    model: &mut PolicyModel,
    grammar: &Grammar,
    batch: &[Sample],
    k: usize,
    source: Realizations,
    heads: Heads,
    seed: u64,
) -> Result<f64> {
    let w = 1.0 / (batch.len() * k.max(1)) as f64;
    let mut rows = Vec::with_capacity(batch.len() * k);
    for (b, s) in batch.iter().enumerate() {
        for (j, l) in realizations(grammar, s, k, source, neighborhood_seed(seed, b))?
            .iter()
            .enumerate()
        {
            rows.push(Row {
                scene: &s.scene,
                condition: model.condition(l),
                action: s.action,
                chunk: &s.chunk,
                noise_seed: noise_seed(seed, b, j),
                weight: w,
            });
        }
    }
    let losses = model.accumulate(&rows, heads)?;
    let groups: Vec<Vec<f64>> = losses.chunks(k).map(<[f64]>::to_vec).collect();
    Ok(expected_semantic_average(&groups))
}

/// Value of the discrete-head expected semantic loss for any scorer, without
/// gradients.
pub fn semantic_loss_value<S: Scorer + ?Sized>(
    scorer: &S,
    grammar: &Grammar,
    batch: &[Sample],
    k: usize,
    source: Realizations,
    seed: u64,
) -> Result<f64> {
    let mut groups = Vec::with_capacity(batch.len());
    for (b, s) in batch.iter().enumerate() {
        let mut group = Vec::with_capacity(k);
        for l in realizations(grammar, s, k, source, neighborhood_seed(seed, b))? {
            let logits = scorer.score(&s.scene, &scorer.condition(&l))?;
            let t = Tensor::from_vec(&[1, logits.len()], logits)?;
            let (loss, _) = nn::cross_entropy_rows(&t, &[s.action.index()])?;
            group.push(loss[0]);
        }
        groups.push(group);
    }
    Ok(expected_semantic_average(&groups))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Mle,
    Mcsi,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Mle => "mle",
            TrainMode::Mcsi => "mcsi",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Paraphrases per sample in `mcsi` mode.
    pub k: usize,
    /// Probability that a row's condition is replaced by the null condition.
    pub cond_dropout: f64,
    pub batch_size: usize,
    pub schedule: ScheduleConfig,
    pub ema_decay: f64,
    pub seed: u64,
    /// Draw new paraphrases at every step; otherwise each sample keeps one
    /// fixed neighborhood for the whole run.
    pub resample_neighborhoods: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Mle,
            k: 8,
            cond_dropout: 0.1,
            batch_size: 64,
            schedule: ScheduleConfig::default(),
            ema_decay: 0.999,
            seed: 0,
            resample_neighborhoods: true,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.cond_dropout) && self.cond_dropout != 1.0 {
            return Err(Error::Config("cond_dropout must lie in [0, 1]".into()));
        }
        if self.mode == TrainMode::Mcsi && self.k == 0 {
            return Err(Error::Config("k must be at least 1 in mcsi mode".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0, 1)".into()));
        }
        self.schedule.validate()?;
        self.model.validate()
    }

    /// Stable hash of the serialized configuration.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", seed::label(&text))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub mode: TrainMode,
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct Trained {
    pub config: TrainConfig,
    pub model: PolicyModel,
    pub ema: ParamSet,
    pub curve: Vec<CurvePoint>,
}

impl Trained {
    /// The model with EMA weights.
    pub fn ema_model(&self) -> PolicyModel {
        let mut m = self.model.clone();
        m.set_params(&self.ema).expect("ema mirrors the model");
        m
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: self.config.hash(),
            train: self.config.clone(),
            vocabulary: self.model.vocab.clone(),
            num_params: self.model.num_params(),
            steps: self.curve.len(),
            params: self.model.params.to_records(),
            ema: self.ema.to_records(),
        }
    }
}

/// Trains from scratch on `samples`.
pub fn train(samples: &[Sample], grammar: &Grammar, cfg: &TrainConfig) -> Result<Trained> {
    let model = PolicyModel::new(cfg.model.clone(), grammar.vocab().clone(), seed::derive(cfg.seed, &[0]))?;
    train_from(model, samples, grammar, cfg)
}

/// Continues training `model` on `samples` for `cfg.schedule.total_steps`
/// steps with fresh optimizer and EMA state.
pub fn train_from(
    mut model: PolicyModel,
    samples: &[Sample],
    grammar: &Grammar,
    cfg: &TrainConfig,
) -> Result<Trained> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let k = match cfg.mode {
        TrainMode::Mle => 1,
        TrainMode::Mcsi => cfg.k,
    };
    let mut ema = model.params.clone();
    let mut adam = AdamState::new(&model.params);
    let mut curve = Vec::with_capacity(cfg.schedule.total_steps);
    let weight = 1.0 / (cfg.batch_size * k) as f64;
    let token_cache: BTreeMap<&str, TokenSeq> = samples
        .iter()
        .map(|s| (s.instruction.text(), model.tokens(&s.instruction)))
        .collect();

    for t in 0..cfg.schedule.total_steps {
        let mut rng = seed::rng_at(cfg.seed, &[1, t as u64]);
        let mut rows = Vec::with_capacity(cfg.batch_size * k);
        for b in 0..cfg.batch_size {
            let idx = rng.random_range(0..samples.len());
            let s = &samples[idx];
            let texts: Vec<Instruction> = match cfg.mode {
                TrainMode::Mle => vec![s.instruction.clone()],
                TrainMode::Mcsi => {
                    let hood_seed = if cfg.resample_neighborhoods {
                        rng.random()
                    } else {
                        seed::derive(cfg.seed, &[2, idx as u64])
                    };
                    lang::neighborhood(grammar, &s.intent, k, hood_seed)?.items
                }
            };
            for (j, l) in texts.iter().enumerate() {
                let condition = if rng.random::<f64>() < cfg.cond_dropout {
                    Condition::Null
                } else {
                    match token_cache.get(l.text()) {
                        Some(seq) => Condition::Tokens(seq.clone()),
                        None => model.condition(l),
                    }
                };
                rows.push(Row {
                    scene: &s.scene,
                    condition,
                    action: s.action,
                    chunk: &s.chunk,
                    noise_seed: seed::derive(cfg.seed, &[3, t as u64, b as u64, j as u64]),
                    weight,
                });
            }
        }
        model.params.zero_grads();
        let losses = model.accumulate(&rows, Heads::BOTH)?;
        let loss = losses.iter().sum::<f64>() * weight;
        if !loss.is_finite() || loss > 1e3 {
            return Err(Error::Diverged { step: t, loss });
        }
        let lr = nn::opt_step(&mut model.params, t, &cfg.schedule, &mut adam)?;
        nn::ema_update(&mut ema, &model.params, cfg.ema_decay)?;
        curve.push(CurvePoint {
            step: t,
            loss,
            lr,
            mode: cfg.mode,
        });
    }
    Ok(Trained {
        config: cfg.clone(),
        model,
        ema,
        curve,
    })
}

/// Writes the loss curve as CSV with columns step, loss, lr, mode.
pub fn write_curve(curve: &[CurvePoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format("loss curve", e))?;
    for p in curve {
        w.serialize(p).map_err(|e| Error::format("loss curve", e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Which weights of a checkpoint to load.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weights {
    Raw,
    Ema,
}

/// Serialized training result: configuration, vocabulary and both weight sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub train: TrainConfig,
    pub vocabulary: Vocabulary,
    pub num_params: usize,
    pub steps: usize,
    pub params: BTreeMap<String, TensorRecord>,
    pub ema: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::format("checkpoint", e))?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::format("checkpoint", e))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::format(
                "checkpoint",
                format!("version {} is not supported", ck.version),
            ));
        }
        Ok(ck)
    }

    pub fn model(&self, weights: Weights) -> Result<PolicyModel> {
        let mut model = PolicyModel::new(self.train.model.clone(), self.vocabulary.clone(), 0)?;
        model.params.load_records(match weights {
            Weights::Raw => &self.params,
            Weights::Ema => &self.ema,
        })?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldsim::{generate_episodes, BiasedDatasetConfig, Color, Object, Shape};

    fn model(seed: u64) -> PolicyModel {
        PolicyModel::new(ModelConfig::default(), Grammar::builtin().vocab().clone(), seed).unwrap()
    }

    fn scene() -> Scene {
        let mut s = Scene::empty(7, Cell::new(3, 3));
        s.objects = vec![
            Object {
                id: 0,
                color: Color::Red,
                shape: Shape::Cube,
                cell: Cell::new(1, 3),
            },
            Object {
                id: 1,
                color: Color::Blue,
                shape: Shape::Mug,
                cell: Cell::new(4, 5),
            },
            Object {
                id: 2,
                color: Color::Green,
                shape: Shape::Ball,
                cell: Cell::new(5, 1),
            },
        ];
        s
    }

    fn samples(n: usize) -> Vec<Sample> {
        let g = Grammar::builtin();
        let cfg = BiasedDatasetConfig {
            n_episodes: n,
            ..Default::default()
        };
        let (records, _) = generate_episodes(&cfg, &g, &Intent::all()).unwrap();
        expand_records(&records, 4)
    }

    #[test]
    fn feature_width() {
        assert_eq!(featurize(&scene()).len(), FEATURE_DIM);
    }

    #[test]
    fn ids_do_not_matter() {
        let a = scene();
        let mut b = a.clone();
        b.objects[1].id = 2;
        b.objects[2].id = 1;
        b.objects.swap(1, 2);
        let m = model(0);
        assert_eq!(m.embed_visual(&a).unwrap(), m.embed_visual(&b).unwrap());
    }

    #[test]
    fn null_blank_and_order() {
        let m = model(1);
        assert_eq!(m.embed_language(&Condition::Null), m.params().value(m.null).data());
        let blank = m.condition(&Instruction::blank());
        assert!(m.embed_language(&blank).iter().all(|&v| v == 0.0));
        let a = m.embed_language(&m.condition(&Instruction::new("put the red cube")));
        let b = m.embed_language(&m.condition(&Instruction::new("cube red the put")));
        assert_ne!(a, b);
    }

    #[test]
    fn zero_heads_are_uniform() {
        let mut m = model(2);
        m.zero_heads();
        let c = m.condition(&Instruction::new("put the red cube in the bin"));
        let logits = m.score(&scene(), &c).unwrap();
        assert!(logits.iter().all(|&l| l == logits[0]));
        let v = m.velocity(&scene(), &c, &[0.3; 12], 0.5).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn expand_covers_every_primitive() {
        let s = samples(5);
        assert!(s.len() >= 5);
        assert!(s.iter().all(|x| x.chunk.len() == 12));
    }

    #[test]
    fn semantic_average_of_stubbed_losses() {
        assert_eq!(expected_semantic_average(&[vec![1.0, 2.0, 3.0]]), 2.0);
    }

    #[test]
    fn pinned_single_realization_matches_mle() {
        let g = Grammar::builtin();
        let batch: Vec<Sample> = samples(6).into_iter().take(12).collect();
        let mut a = model(3);
        let mut b = a.clone();
        let mle = mle_loss(&mut a, &batch, Heads::BOTH, 9).unwrap();
        let esl = expected_semantic_loss(&mut b, &g, &batch, 1, Realizations::Pinned, Heads::BOTH, 9).unwrap();
        assert!((mle - esl).abs() <= 1e-12);
        assert_eq!(a.params().grads(), b.params().grads());
    }

    #[test]
    fn full_loss_gradients_match_finite_differences() {
        let g = Grammar::builtin();
        let batch: Vec<Sample> = samples(6).into_iter().step_by(3).take(6).collect();
        for heads in [Heads::DISCRETE, Heads::FLOW] {
            let mut m = model(4);
            let mut params = m.params().clone();
            let err = nn::fd_check(
                &mut params,
                |p| {
                    m.set_params(p)?;
                    m.params_mut().zero_grads();
                    let l = expected_semantic_loss(&mut m, &g, &batch, 2, Realizations::Sampled, heads, 5)?;
                    for (dst, src) in p.names().to_vec().iter().zip(m.params().grads().to_vec()) {
                        let id = p.id(dst).unwrap();
                        *p.grad_mut(id) = src;
                    }
                    Ok(l)
                },
                1e-4,
                40,
                7,
            )
            .unwrap();
            assert!(err < 1e-4, "{heads:?}: {err}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let g = Grammar::builtin();
        let cfg = TrainConfig {
            schedule: ScheduleConfig {
                warmup_steps: 2,
                total_steps: 4,
                ..Default::default()
            },
            batch_size: 4,
            ..Default::default()
        };
        let trained = train(&samples(4), &g, &cfg).unwrap();
        let ck = trained.checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let m = back.model(Weights::Raw).unwrap();
        assert_eq!(m.params().values(), trained.model.params.values());
    }
}
