//! Episode runner and experiment harness.
//!
//! Every random choice is drawn from a seed derived from the suite seed and
//! the episode's position, so a variant's success rate does not depend on
//! which other variants run alongside it, and two models evaluated with the
//! same suite see exactly the same scenes and instructions.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lang::{self, Grammar, Instruction, PerturbationSpec};
use crate::policy::{self, Condition, PolicyModel, Scorer, TrainConfig, Trained};
use crate::seed;
use crate::steering::{self, Head, SteeringConfig};
use crate::worldsim::{
    self, check_success, BiasedDatasetConfig, Color, Destination, Intent, PrimitiveAction, Scene,
    Shape, EPISODE_BUDGET,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub success: bool,
    pub steps_used: usize,
    /// At least 90% of the executed primitives left the scene unchanged.
    pub inaction_flag: bool,
}

/// Decodes and executes primitives until the intent is satisfied or the
/// budget of [`EPISODE_BUDGET`] primitives runs out. The flow head decodes a
/// chunk, quantizes each entry against the current grip state and executes
/// them in order.
pub fn run_episode<S: Scorer + ?Sized>(
    scorer: &S,
    steering: &SteeringConfig,
    scene: &Scene,
    intent: &Intent,
    instruction: &Instruction,
    episode_seed: u64,
) -> Result<EpisodeOutcome> {
    steering.validate()?;
    let condition = scorer.condition(instruction);
    let mut scene = scene.clone();
    let mut steps = 0;
    let mut idle = 0;
    let mut decode = 0u64;
    let mut success = check_success(&scene, intent)?;
    while !success && steps < EPISODE_BUDGET {
        let actions = match steering.head {
            Head::Discrete => vec![steering::decode_discrete(scorer, &scene, &condition, steering)?.1],
            Head::Flow => {
                let cfg = SteeringConfig {
                    seed: seed::derive(episode_seed, &[decode]),
                    ..steering.clone()
                };
                let chunk = steering::decode_flow(scorer, &scene, &condition, &cfg)?;
                let mut holding = scene.held.is_some();
                let mut out = Vec::with_capacity(chunk.entries.len());
                // Quantize against the grip state each entry will see.
                for &entry in &chunk.entries {
                    let a = PrimitiveAction::quantize(entry, holding);
                    match a {
                        PrimitiveAction::Grasp => holding = true,
                        PrimitiveAction::Release => holding = false,
                        _ => {}
                    }
                    out.push(a);
                }
                out
            }
        };
        decode += 1;
        for a in actions {
            let next = worldsim::step(&scene, a);
            if next.same_state(&scene) {
                idle += 1;
            }
            scene = next;
            steps += 1;
            success = check_success(&scene, intent)?;
            if success || steps >= EPISODE_BUDGET {
                break;
            }
        }
    }
    Ok(EpisodeOutcome {
        success,
        steps_used: steps,
        inaction_flag: steps > 0 && idle * 10 >= steps * 9,
    })
}

/// A perturbation suite.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteSpec {
    pub variants: Vec<PerturbationSpec>,
    pub episodes_per_variant: usize,
    /// `None` samples from all 64 intents.
    pub intents: Option<Vec<Intent>>,
    pub steering: SteeringConfig,
    pub seed: u64,
    /// Probability that the target is the object nearest the gripper.
    pub distractor_bias: f64,
    pub n_distractors: usize,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        SuiteSpec {
            variants: PerturbationSpec::default_suite(),
            episodes_per_variant: 200,
            intents: None,
            steering: SteeringConfig::default(),
            seed: 0,
            distractor_bias: 0.9,
            n_distractors: 3,
        }
    }
}

impl SuiteSpec {
    pub fn validate(&self) -> Result<()> {
        if self.episodes_per_variant == 0 {
            return Err(Error::Config("episodes_per_variant must be at least 1".into()));
        }
        let mut names: Vec<String> = self.variants.iter().map(|v| v.name()).collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("variant names must be unique".into()));
        }
        for v in &self.variants {
            v.validate()?;
        }
        if matches!(&self.intents, Some(list) if list.is_empty()) {
            return Err(Error::Config("intent list is empty".into()));
        }
        self.steering.validate()
    }

    fn scene_config(&self) -> BiasedDatasetConfig {
        BiasedDatasetConfig {
            distractor_bias: self.distractor_bias,
            n_distractors: self.n_distractors,
            ..Default::default()
        }
    }
}

/// Scene, intent and original instruction for episode `e`; shared by every
/// variant of a suite.
pub fn episode_setup(
    spec: &SuiteSpec,
    grammar: &Grammar,
    episode: usize,
) -> Result<(Intent, Scene, Instruction)> {
    let all = Intent::all();
    let pool = spec.intents.as_deref().unwrap_or(&all);
    let mut rng = seed::rng_at(spec.seed, &[episode as u64, 0]);
    let intent = *pool.choose(&mut rng).expect("nonempty intent pool");
    let scene = worldsim::init_scene(&intent, &spec.scene_config(), seed::derive(spec.seed, &[episode as u64, 1]))?;
    let instruction = lang::realize(grammar, &intent, seed::derive(spec.seed, &[episode as u64, 2]));
    Ok((intent, scene, instruction))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: String,
    pub successes: usize,
    pub episodes: usize,
    pub inaction: usize,
}

impl VariantResult {
    pub fn sr(&self) -> f64 {
        self.successes as f64 / self.episodes as f64
    }
}

/// Results of one model under one steering setting across a suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub gamma: f64,
    pub steps: usize,
    pub seed: u64,
    pub results: Vec<VariantResult>,
}

impl ReportRow {
    /// Arithmetic mean of the variant success rates.
    pub fn average(&self) -> f64 {
        self.results.iter().map(VariantResult::sr).sum::<f64>() / self.results.len() as f64
    }

    pub fn sr(&self, variant: &str) -> Option<f64> {
        self.results.iter().find(|r| r.variant == variant).map(VariantResult::sr)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub rows: Vec<ReportRow>,
}

impl ReportTable {
    pub fn merge(tables: impl IntoIterator<Item = ReportTable>) -> Self {
        ReportTable {
            rows: tables.into_iter().flat_map(|t| t.rows).collect(),
        }
    }

    pub fn row(&self, model: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.model == model)
    }
}

/// Runs every variant of `spec` and tabulates one row labelled `model`.
pub fn run_suite<S: Scorer + ?Sized>(
    scorer: &S,
    model: &str,
    grammar: &Grammar,
    spec: &SuiteSpec,
) -> Result<ReportTable> {
    spec.validate()?;
    let setups: Vec<_> = (0..spec.episodes_per_variant)
        .map(|e| episode_setup(spec, grammar, e))
        .collect::<Result<_>>()?;
    let mut results = Vec::with_capacity(spec.variants.len());
    for variant in &spec.variants {
        let name = variant.name();
        let tag = seed::label(&name);
        let mut successes = 0;
        let mut inaction = 0;
        for (e, (intent, scene, original)) in setups.iter().enumerate() {
            let text = lang::perturb(grammar, original, *variant, seed::derive(spec.seed, &[tag, e as u64]))?;
            let outcome = run_episode(
                scorer,
                &spec.steering,
                scene,
                intent,
                &text,
                seed::derive(spec.seed, &[tag, e as u64, 1]),
            )?;
            successes += usize::from(outcome.success);
            inaction += usize::from(outcome.inaction_flag);
        }
        results.push(VariantResult {
            variant: name,
            successes,
            episodes: spec.episodes_per_variant,
            inaction,
        });
    }
    Ok(ReportTable {
        rows: vec![ReportRow {
            model: model.to_string(),
            gamma: spec.steering.gamma,
            steps: spec.steering.denoise_steps,
            seed: spec.seed,
            results,
        }],
    })
}

pub const DEFAULT_GAMMAS: [f64; 6] = [1.0, 1.25, 1.5, 1.75, 2.0, 3.0];
pub const DEFAULT_STEPS: [usize; 4] = [5, 10, 15, 20];

/// One suite run per (γ, steps) grid point, γ-major.
pub fn ablation_sweep<S: Scorer + ?Sized>(
    scorer: &S,
    model: &str,
    grammar: &Grammar,
    gammas: &[f64],
    steps_list: &[usize],
    spec: &SuiteSpec,
) -> Result<Vec<ReportTable>> {
    if gammas.is_empty() || steps_list.is_empty() {
        return Err(Error::Config("sweep grids must be nonempty".into()));
    }
    let mut out = Vec::with_capacity(gammas.len() * steps_list.len());
    for &gamma in gammas {
        for &steps in steps_list {
            let mut s = spec.clone();
            s.steering.gamma = gamma;
            s.steering.denoise_steps = steps;
            out.push(run_suite(scorer, model, grammar, &s)?);
        }
    }
    Ok(out)
}

/// Jensen–Shannon divergence in nats.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter()
            .zip(m)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * (x / y).ln())
            .sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    (0.5 * kl(p, &m) + 0.5 * kl(q, &m)).max(0.0)
}

/// Mid-trajectory states for consistency measurements: a random intent and
/// scene, advanced by a random number of expert steps.
pub fn sample_states(n_states: usize, seed: u64) -> Result<Vec<(Intent, Scene)>> {
    let all = Intent::all();
    let cfg = BiasedDatasetConfig::default();
    let mut out = Vec::with_capacity(n_states);
    let mut i = 0u64;
    while out.len() < n_states {
        let mut rng = seed::rng_at(seed, &[i, 0]);
        let intent = *all.choose(&mut rng).expect("intents");
        let scene = worldsim::init_scene(&intent, &cfg, seed::derive(seed, &[i, 1]))?;
        i += 1;
        let Ok(traj) = worldsim::expert_rollout(&scene, &intent, 1) else {
            continue;
        };
        let actions = traj.primitive_actions();
        let advance = rng.random_range(0..actions.len());
        let mut s = scene;
        for &a in &actions[..advance] {
            s = worldsim::step(&s, a);
        }
        if check_success(&s, &intent)? {
            continue;
        }
        out.push((intent, s));
    }
    Ok(out)
}

/// Mean pairwise Jensen–Shannon divergence between the decode distributions
/// obtained from `k` paraphrases of the same intent, averaged over states.
pub fn paraphrase_consistency<S: Scorer + ?Sized>(
    scorer: &S,
    grammar: &Grammar,
    states: &[(Intent, Scene)],
    k: usize,
    steering: &SteeringConfig,
    seed: u64,
) -> Result<f64> {
    if k < 2 {
        return Err(Error::Config("consistency needs at least two paraphrases".into()));
    }
    if states.is_empty() {
        return Err(Error::Config("no states to measure".into()));
    }
    let mut total = 0.0;
    for (i, (intent, scene)) in states.iter().enumerate() {
        let hood = lang::neighborhood(grammar, intent, k, seed::derive(seed, &[i as u64]))?;
        let dists: Vec<Vec<f64>> = hood
            .items
            .iter()
            .map(|l| {
                steering::decode_discrete(scorer, scene, &scorer.condition(l), steering).map(|(d, _)| d.probs)
            })
            .collect::<Result<_>>()?;
        let mut sum = 0.0;
        let mut pairs = 0;
        for a in 0..k {
            for b in a + 1..k {
                sum += js_divergence(&dists[a], &dists[b]);
                pairs += 1;
            }
        }
        total += sum / pairs as f64;
    }
    Ok(total / states.len() as f64)
}

/// Holdout protocol for compositional transfer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OodSpec {
    pub holdout_intents: Vec<Intent>,
    /// Pretraining steps on the retained intents.
    pub pretrain_steps: usize,
    /// Episodes in the retained-intent pretraining set.
    pub pretrain_episodes: usize,
    /// Expert demonstrations per holdout intent used for adaptation.
    pub adaptation_demos: usize,
    pub adaptation_steps: Vec<usize>,
    /// Evaluation episodes per holdout intent.
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for OodSpec {
    fn default() -> Self {
        OodSpec {
            holdout_intents: vec![
                Intent::new(Color::Red, Shape::Cube, Destination::Bin),
                Intent::new(Color::Blue, Shape::Mug, Destination::TopShelf),
            ],
            pretrain_steps: 5000,
            pretrain_episodes: 2000,
            adaptation_demos: 20,
            adaptation_steps: vec![10, 100, 1000],
            eval_episodes: 100,
            seed: 0,
        }
    }
}

impl OodSpec {
    /// Every holdout object and destination must appear in some retained
    /// intent, so the shift is purely compositional.
    pub fn validate(&self) -> Result<()> {
        if self.holdout_intents.is_empty() {
            return Err(Error::Config("no holdout intents".into()));
        }
        let retained = self.retained();
        for h in &self.holdout_intents {
            let object_seen = retained.iter().any(|r| r.object() == h.object());
            let zone_seen = retained.iter().any(|r| r.destination == h.destination);
            if !object_seen || !zone_seen {
                return Err(Error::Config(format!("holdout {h} is not compositional")));
            }
        }
        if self.eval_episodes == 0 || self.adaptation_demos == 0 {
            return Err(Error::Config("episode counts must be positive".into()));
        }
        Ok(())
    }

    pub fn retained(&self) -> Vec<Intent> {
        Intent::all()
            .into_iter()
            .filter(|i| !self.holdout_intents.contains(i))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodRow {
    pub steps: usize,
    /// Success rate per holdout intent, in holdout order.
    pub per_task: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub mode: String,
    pub holdout: Vec<String>,
    pub rows: Vec<OodRow>,
}

/// Evaluates `scorer` on each holdout intent separately with unperturbed
/// instructions.
pub fn holdout_success<S: Scorer + ?Sized>(
    scorer: &S,
    grammar: &Grammar,
    spec: &OodSpec,
    steering: &SteeringConfig,
) -> Result<Vec<f64>> {
    spec.holdout_intents
        .iter()
        .enumerate()
        .map(|(i, intent)| {
            let suite = SuiteSpec {
                variants: vec![PerturbationSpec::Origin],
                episodes_per_variant: spec.eval_episodes,
                intents: Some(vec![*intent]),
                steering: steering.clone(),
                seed: seed::derive(spec.seed, &[9, i as u64]),
                ..Default::default()
            };
            Ok(run_suite(scorer, "ood", grammar, &suite)?.rows[0].results[0].sr())
        })
        .collect()
}

/// Pretrains on retained intents, then for each budget fine-tunes a copy on
/// holdout demonstrations and reports per-task success. The adapted raw
/// weights are evaluated; `pretrained` may supply an existing pretraining run.
pub fn ood_protocol(
    spec: &OodSpec,
    train_cfg: &TrainConfig,
    grammar: &Grammar,
    steering: &SteeringConfig,
    pretrained: Option<&Trained>,
) -> Result<OodReport> {
    spec.validate()?;
    let owned;
    let base: &Trained = match pretrained {
        Some(t) => t,
        None => {
            owned = ood_pretrain(spec, train_cfg, grammar)?;
            &owned
        }
    };
    let demo_cfg = BiasedDatasetConfig {
        n_episodes: spec.adaptation_demos * spec.holdout_intents.len(),
        seed: seed::derive(spec.seed, &[2]),
        ..Default::default()
    };
    let (demos, _) = worldsim::generate_episodes(&demo_cfg, grammar, &spec.holdout_intents)?;
    let demo_samples = policy::expand_records(&demos, train_cfg.model.horizon);
    let mut rows = Vec::with_capacity(spec.adaptation_steps.len());
    for &budget in &spec.adaptation_steps {
        let model: PolicyModel = if budget == 0 {
            base.model.clone()
        } else {
            let mut cfg = train_cfg.clone();
            cfg.seed = seed::derive(spec.seed, &[3, budget as u64]);
            cfg.schedule.total_steps = budget;
            cfg.schedule.warmup_steps = budget / 10;
            policy::train_from(base.model.clone(), &demo_samples, grammar, &cfg)?.model
        };
        let per_task = holdout_success(&model, grammar, spec, steering)?;
        let mean = per_task.iter().sum::<f64>() / per_task.len() as f64;
        rows.push(OodRow {
            steps: budget,
            per_task,
            mean,
        });
    }
    Ok(OodReport {
        mode: train_cfg.mode.name().to_string(),
        holdout: spec.holdout_intents.iter().map(|i| i.to_string()).collect(),
        rows,
    })
}

/// The pretraining half of [`ood_protocol`]: retained intents only.
pub fn ood_pretrain(spec: &OodSpec, train_cfg: &TrainConfig, grammar: &Grammar) -> Result<Trained> {
    let data_cfg = BiasedDatasetConfig {
        n_episodes: spec.pretrain_episodes,
        seed: seed::derive(spec.seed, &[1]),
        ..Default::default()
    };
    let (records, _) = worldsim::generate_episodes(&data_cfg, grammar, &spec.retained())?;
    let samples = policy::expand_records(&records, train_cfg.model.horizon);
    let mut cfg = train_cfg.clone();
    cfg.schedule.total_steps = spec.pretrain_steps;
    cfg.schedule.warmup_steps = cfg.schedule.warmup_steps.min(spec.pretrain_steps);
    policy::train(&samples, grammar, &cfg)
}

/// One line of the long-form report CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub model: String,
    pub variant: String,
    pub gamma: f64,
    pub steps: usize,
    pub sr: f64,
    pub n: usize,
    pub seed: u64,
}

pub fn to_records(tables: &[ReportTable]) -> Vec<ReportRecord> {
    let mut out = Vec::new();
    for row in tables.iter().flat_map(|t| &t.rows) {
        for r in &row.results {
            out.push(ReportRecord {
                model: row.model.clone(),
                variant: r.variant.clone(),
                gamma: row.gamma,
                steps: row.steps,
                sr: r.sr(),
                n: r.episodes,
                seed: row.seed,
            });
        }
    }
    out
}

/// Rebuilds tables from CSV records; consecutive records with the same model,
/// γ, steps and seed form one row. Inaction counts are not stored and come back
/// as zero.
pub fn from_records(records: &[ReportRecord]) -> ReportTable {
    let mut rows: Vec<ReportRow> = Vec::new();
    for rec in records {
        let result = VariantResult {
            variant: rec.variant.clone(),
            successes: (rec.sr * rec.n as f64).round() as usize,
            episodes: rec.n,
            inaction: 0,
        };
        match rows.last_mut() {
            Some(row)
                if row.model == rec.model
                    && row.gamma == rec.gamma
                    && row.steps == rec.steps
                    && row.seed == rec.seed
                    && !row.results.iter().any(|r| r.variant == rec.variant) =>
            {
                row.results.push(result)
            }
            _ => rows.push(ReportRow {
                model: rec.model.clone(),
                gamma: rec.gamma,
                steps: rec.steps,
                seed: rec.seed,
                results: vec![result],
            }),
        }
    }
    ReportTable { rows }
}

pub fn write_csv(tables: &[ReportTable], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::format("report csv", e))?;
    w.write_record(["model", "variant", "gamma", "steps", "sr", "n", "seed"])
        .map_err(|e| Error::format("report csv", e))?;
    for rec in to_records(tables) {
        w.serialize(rec).map_err(|e| Error::format("report csv", e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<ReportRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format("report csv", e))?;
    r.deserialize()
        .map(|rec| rec.map_err(|e| Error::format("report csv", e)))
        .collect()
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    model: &'a str,
    gamma: f64,
    steps: usize,
    seed: u64,
    average: f64,
    variants: Vec<(&'a str, f64)>,
}

/// A line chart of `series` (label, points) with x and y axes labelled.
pub fn line_chart_svg(title: &str, x_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 48.0;
    let xs: Vec<f64> = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)).collect();
    let (x0, x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let (x0, x1) = if xs.is_empty() || x1 <= x0 { (0.0, 1.0) } else { (x0, x1) };
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - y.clamp(0.0, 1.0) * (H - 2.0 * PAD);
    let palette = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, xml_escape(title));
    let _ = writeln!(
        s,
        r#"<line x1="{PAD}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}" stroke="black"/>"#,
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#, W / 2.0, H - 12.0, xml_escape(x_label));
    let _ = writeln!(s, r#"<text x="14" y="{}" font-size="12" transform="rotate(-90 14 {})">SR</text>"#, H / 2.0, H / 2.0);
    for (i, (label, points)) in series.iter().enumerate() {
        let color = palette[i % palette.len()];
        let pts: Vec<String> = points.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="10" fill="{color}">{}</text>"#,
            W - PAD + 4.0,
            PAD + 12.0 * i as f64,
            xml_escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Writes `report.csv`, `summary.json`, and per-model SVG charts of success
/// against γ and against denoising steps into `dir`.
pub fn emit_report(tables: &[ReportTable], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(tables, &dir.join("report.csv"))?;
    let rows: Vec<&ReportRow> = tables.iter().flat_map(|t| &t.rows).collect();
    let summary: Vec<SummaryRow<'_>> = rows
        .iter()
        .map(|r| SummaryRow {
            model: &r.model,
            gamma: r.gamma,
            steps: r.steps,
            seed: r.seed,
            average: r.average(),
            variants: r.results.iter().map(|v| (v.variant.as_str(), v.sr())).collect(),
        })
        .collect();
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::format("summary", e))?;
    let path = dir.join("summary.json");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;

    let mut models: Vec<&str> = rows.iter().map(|r| r.model.as_str()).collect();
    models.dedup();
    models.sort_unstable();
    models.dedup();
    for model in models {
        let mine: Vec<&&ReportRow> = rows.iter().filter(|r| r.model == model).collect();
        for (axis, file) in [("gamma", "gamma"), ("denoising steps", "steps")] {
            let mut variants: Vec<&str> = Vec::new();
            for r in &mine {
                for v in &r.results {
                    if !variants.contains(&v.variant.as_str()) {
                        variants.push(&v.variant);
                    }
                }
            }
            let series: Vec<(String, Vec<(f64, f64)>)> = variants
                .iter()
                .map(|&v| {
                    let mut pts: Vec<(f64, f64)> = mine
                        .iter()
                        .filter_map(|r| {
                            let x = if file == "gamma" { r.gamma } else { r.steps as f64 };
                            r.sr(v).map(|y| (x, y))
                        })
                        .collect();
                    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                    (v.to_string(), pts)
                })
                .collect();
            let svg = line_chart_svg(&format!("{model}: SR by {axis}"), axis, &series);
            let safe: String = model
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
                .collect();
            let path = dir.join(format!("{safe}_{file}.svg"));
            std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

/// A scorer that ignores language and executes the scripted expert for a
/// fixed intent. The flow head returns the velocity that carries any state to
/// the expert's chunk.
#[derive(Clone, Debug)]
pub struct ExpertScorer {
    pub intent: Intent,
    pub horizon: usize,
}

impl ExpertScorer {
    fn chunk(&self, scene: &Scene) -> Result<Vec<f64>> {
        let mut s = scene.clone();
        let mut actions = Vec::with_capacity(self.horizon);
        for _ in 0..self.horizon {
            if check_success(&s, &self.intent)? {
                break;
            }
            let a = worldsim::expert_action(&s, &self.intent)?;
            s = worldsim::step(&s, a);
            actions.push(a);
        }
        Ok(worldsim::ActionChunk::encode(&actions, scene.held.is_some(), self.horizon).flat())
    }
}

impl Scorer for ExpertScorer {
    fn score(&self, scene: &Scene, _condition: &Condition) -> Result<Vec<f64>> {
        let a = worldsim::expert_action(scene, &self.intent)?;
        let mut logits = vec![0.0; PrimitiveAction::COUNT];
        logits[a.index()] = 10.0;
        Ok(logits)
    }

    fn velocity(&self, scene: &Scene, _c: &Condition, state: &[f64], tau: f64) -> Result<Vec<f64>> {
        let target = self.chunk(scene)?;
        let remaining = (1.0 - tau).max(1e-9);
        Ok(target.iter().zip(state).map(|(t, x)| (t - x) / remaining).collect())
    }

    fn condition(&self, _instruction: &Instruction) -> Condition {
        Condition::Null
    }

    fn horizon(&self) -> usize {
        self.horizon
    }
}

/// Uniformly random logits, reseeded from the scene state.
#[derive(Clone, Debug)]
pub struct RandomScorer {
    pub seed: u64,
}

impl Scorer for RandomScorer {
    fn score(&self, scene: &Scene, _condition: &Condition) -> Result<Vec<f64>> {
        let key = seed::derive(
            self.seed,
            &[
                u64::from(scene.step_count),
                scene.gripper.x as u64,
                scene.gripper.y as u64,
            ],
        );
        let mut rng = seed::rng(key);
        Ok((0..PrimitiveAction::COUNT).map(|_| rng.random()).collect())
    }

    fn velocity(&self, _s: &Scene, _c: &Condition, state: &[f64], _tau: f64) -> Result<Vec<f64>> {
        Ok(vec![0.0; state.len()])
    }

    fn condition(&self, _instruction: &Instruction) -> Condition {
        Condition::Null
    }

    fn horizon(&self) -> usize {
        worldsim::DEFAULT_HORIZON
    }
}
