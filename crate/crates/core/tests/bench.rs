use steerlab::bench::{
    self, ablation_sweep, emit_report, from_records, line_chart_svg, paraphrase_consistency, read_csv, run_episode,
    run_suite, sample_states, write_csv, ExpertScorer, RandomScorer, ReportTable, SuiteSpec, DEFAULT_GAMMAS,
    DEFAULT_STEPS,
};
use steerlab::lang::{self, Grammar, Instruction, PerturbationSpec};
use steerlab::policy::{Condition, ModelConfig, PolicyModel, Scorer};
use steerlab::steering::{Head, SteeringConfig};
use steerlab::worldsim::{self, BiasedDatasetConfig, Color, Destination, Intent, Scene, Shape};
use steerlab::Result;

fn intent() -> Intent {
    Intent::new(Color::Green, Shape::Mug, Destination::LeftPad)
}

fn model(seed: u64) -> PolicyModel {
    PolicyModel::new(ModelConfig::default(), Grammar::builtin().vocab().clone(), seed).unwrap()
}

fn small_suite(variants: &str, episodes: usize) -> SuiteSpec {
    SuiteSpec {
        variants: PerturbationSpec::parse_list(variants).unwrap(),
        episodes_per_variant: episodes,
        seed: 11,
        ..Default::default()
    }
}

#[test]
fn expert_stub_always_succeeds() {
    let grammar = Grammar::builtin();
    let z = intent();
    let expert = ExpertScorer { intent: z, horizon: 4 };
    let text = lang::realize(&grammar, &z, 0);
    for head in [Head::Discrete, Head::Flow] {
        let steering = SteeringConfig {
            head,
            ..Default::default()
        };
        for e in 0..200 {
            let scene = worldsim::init_scene(&z, &BiasedDatasetConfig::default(), e).unwrap();
            let out = run_episode(&expert, &steering, &scene, &z, &text, e).unwrap();
            assert!(out.success, "{head:?} episode {e}");
        }
    }
}

#[test]
fn expert_stub_scores_one_on_origin() {
    let z = intent();
    let spec = SuiteSpec {
        intents: Some(vec![z]),
        ..small_suite("origin", 200)
    };
    let table = run_suite(&ExpertScorer { intent: z, horizon: 4 }, "expert", &Grammar::builtin(), &spec).unwrap();
    assert_eq!(table.rows[0].sr("origin"), Some(1.0));
}

#[test]
fn random_stub_rarely_succeeds() {
    let table = run_suite(&RandomScorer { seed: 3 }, "random", &Grammar::builtin(), &small_suite("origin", 200)).unwrap();
    let sr = table.rows[0].sr("origin").unwrap();
    assert!(sr < 0.1, "{sr}");
}

#[test]
fn episodes_are_deterministic() {
    let grammar = Grammar::builtin();
    let m = model(1);
    let a = run_suite(&m, "m", &grammar, &small_suite("origin,m4,rand", 5)).unwrap();
    let b = run_suite(&m, "m", &grammar, &small_suite("origin,m4,rand", 5)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn variant_results_do_not_depend_on_the_rest_of_the_suite() {
    let grammar = Grammar::builtin();
    let m = model(2);
    let wide = run_suite(&m, "m", &grammar, &small_suite("blank,origin,m4,multi,r2", 10)).unwrap();
    let narrow = run_suite(&m, "m", &grammar, &small_suite("m4,origin", 10)).unwrap();
    for v in ["origin", "m4"] {
        let pick = |t: &ReportTable| t.rows[0].results.iter().find(|r| r.variant == v).cloned().unwrap();
        assert_eq!(pick(&wide), pick(&narrow), "{v}");
    }
}

#[test]
fn counts_and_average_are_consistent() {
    let table = run_suite(&model(3), "m", &Grammar::builtin(), &small_suite("origin,blank,simple", 7)).unwrap();
    let row = &table.rows[0];
    for r in &row.results {
        assert!(r.successes <= r.episodes);
        assert_eq!(r.sr(), r.successes as f64 / r.episodes as f64);
    }
    let mean = row.results.iter().map(|r| r.sr()).sum::<f64>() / row.results.len() as f64;
    assert!((row.average() - mean).abs() <= 1e-12);
}

#[test]
fn gamma_one_sweep_row_equals_the_baseline() {
    let grammar = Grammar::builtin();
    let m = model(4);
    let spec = small_suite("origin,m6,blank", 8);
    let base = run_suite(&m, "m", &grammar, &spec).unwrap();
    let sweep = ablation_sweep(&m, "m", &grammar, &[1.0, 2.0], &[spec.steering.denoise_steps], &spec).unwrap();
    assert_eq!(sweep[0].rows[0].results, base.rows[0].results);
}

#[test]
fn default_grid_has_24_cells_and_reruns_identically() {
    let grammar = Grammar::builtin();
    let m = model(5);
    let spec = small_suite("origin", 2);
    let a = ablation_sweep(&m, "m", &grammar, &DEFAULT_GAMMAS, &DEFAULT_STEPS, &spec).unwrap();
    assert_eq!(a.len(), 24);
    let b = ablation_sweep(&m, "m", &grammar, &DEFAULT_GAMMAS, &DEFAULT_STEPS, &spec).unwrap();
    assert_eq!(a, b);
}

#[test]
fn empty_report_is_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    write_csv(&[], &path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "model,variant,gamma,steps,sr,n,seed\n");
    assert!(read_csv(&path).unwrap().is_empty());
}

#[test]
fn report_csv_round_trips() {
    let grammar = Grammar::builtin();
    let m = model(6);
    let spec = small_suite("origin,m2,r1", 6);
    let mut tables = ablation_sweep(&m, "mle", &grammar, &[1.0, 1.5], &[5, 10], &spec).unwrap();
    tables.push(run_suite(&m, "other", &grammar, &spec).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a.csv");
    write_csv(&tables, &first).unwrap();

    let back = from_records(&read_csv(&first).unwrap());
    let flat: Vec<_> = tables.iter().flat_map(|t| &t.rows).collect();
    assert_eq!(back.rows.len(), flat.len());
    for (a, b) in back.rows.iter().zip(flat) {
        assert_eq!((&a.model, a.gamma, a.steps, a.seed), (&b.model, b.gamma, b.steps, b.seed));
        for (x, y) in a.results.iter().zip(&b.results) {
            assert_eq!((&x.variant, x.successes, x.episodes), (&y.variant, y.successes, y.episodes));
        }
    }

    let second = dir.path().join("b.csv");
    write_csv(&[back], &second).unwrap();
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
}

#[test]
fn emitted_svgs_are_well_formed() {
    let grammar = Grammar::builtin();
    let m = model(7);
    let tables = ablation_sweep(&m, "mle & <ras>", &grammar, &[1.0, 3.0], &[5, 10], &small_suite("origin,m4", 3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_report(&tables, dir.path()).unwrap();
    let mut svgs = 0;
    for entry in std::fs::read_dir(dir.path()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "svg") {
            let text = std::fs::read_to_string(&path).unwrap();
            let doc = roxmltree::Document::parse(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert_eq!(doc.root_element().tag_name().name(), "svg");
            svgs += 1;
        }
    }
    assert_eq!(svgs, 2);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.as_array().unwrap().len(), 4);
}

#[test]
fn chart_handles_empty_and_hostile_input() {
    for svg in [
        line_chart_svg("a < b & \"c\"", "x", &[]),
        line_chart_svg("t", "x", &[("only".into(), vec![(1.0, 0.5)])]),
        line_chart_svg("t", "x", &[("s".into(), vec![(1.0, 0.0), (1.0, 1.0)])]),
    ] {
        roxmltree::Document::parse(&svg).unwrap();
    }
}

/// Scores every condition as the null condition.
struct Blind(PolicyModel);

impl Scorer for Blind {
    fn score(&self, scene: &Scene, _: &Condition) -> Result<Vec<f64>> {
        self.0.score(scene, &Condition::Null)
    }

    fn velocity(&self, scene: &Scene, _: &Condition, chunk: &[f64], tau: f64) -> Result<Vec<f64>> {
        self.0.velocity(scene, &Condition::Null, chunk, tau)
    }

    fn condition(&self, instruction: &Instruction) -> Condition {
        self.0.condition(instruction)
    }

    fn horizon(&self) -> usize {
        self.0.horizon()
    }
}

#[test]
fn condition_blind_policy_has_zero_divergence() {
    let grammar = Grammar::builtin();
    let states = sample_states(20, 3).unwrap();
    let blind = Blind(model(8));
    let js = paraphrase_consistency(&blind, &grammar, &states, 4, &SteeringConfig::default(), 3).unwrap();
    assert_eq!(js, 0.0);
}

#[test]
fn consistency_needs_two_paraphrases() {
    let states = sample_states(2, 0).unwrap();
    assert!(paraphrase_consistency(&model(0), &Grammar::builtin(), &states, 1, &SteeringConfig::default(), 0).is_err());
    assert!(bench::js_divergence(&[0.5, 0.5], &[1.0, 0.0]) > 0.0);
}
