//! Instruction grammar, intent parser, paraphrase sampler and perturbation
//! engine.
//!
//! The grammar is loaded from a versioned TOML asset (`assets/grammar.toml`)
//! and doubles as a closed vocabulary for the tokenizer. Every sentence the
//! grammar can produce parses back to the intent it was produced from, and the
//! same holds for every meaning-preserving rewrite ([`RewriteKind`]).

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::worldsim::{Color, Destination, Intent, Shape};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const MASK: u32 = 2;
pub const NULL: u32 = 3;
pub const MASK_WORD: &str = "<MASK>";
pub const DEFAULT_MAX_LEN: usize = 24;
/// Neighborhood size used by the `multi` perturbation.
pub const MULTI_NEIGHBORHOOD: usize = 8;

const BUILTIN_GRAMMAR: &str = include_str!("../assets/grammar.toml");
const RESERVED: [&str; 4] = ["<pad>", "<unk>", MASK_WORD, "<null>"];

/// A whitespace-normalized, lowercase instruction.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub struct Instruction(String);

impl Instruction {
    pub fn new(text: &str) -> Self {
        let words: Vec<String> = text
            .split_whitespace()
            .map(|w| {
                if w.eq_ignore_ascii_case(MASK_WORD) {
                    MASK_WORD.to_string()
                } else {
                    w.to_lowercase()
                }
            })
            .collect();
        Instruction(words.join(" "))
    }

    pub fn blank() -> Self {
        Instruction(String::new())
    }

    pub fn text(&self) -> &str {
        &self.0
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.0.split_whitespace()
    }

    pub fn is_blank(&self) -> bool {
        self.0.is_empty()
    }

    fn from_words<S: AsRef<str>>(words: &[S]) -> Self {
        let joined: Vec<&str> = words.iter().map(AsRef::as_ref).collect();
        Instruction::new(&joined.join(" "))
    }
}

impl From<String> for Instruction {
    fn from(s: String) -> Self {
        Instruction::new(&s)
    }
}

impl From<Instruction> for String {
    fn from(i: Instruction) -> Self {
        i.0
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Closed word list: the reserved tokens followed by every grammar word in
/// sorted order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(words: Vec<String>) -> Result<Self> {
        Vocabulary::from_words(words)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

impl Vocabulary {
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < RESERVED.len() || words[..RESERVED.len()] != RESERVED {
            return Err(Error::format("vocabulary", "reserved tokens missing"));
        }
        let index: HashMap<String, u32> = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        if index.len() != words.len() {
            return Err(Error::format("vocabulary", "duplicate words"));
        }
        Ok(Vocabulary { words, index })
    }

    fn build(content: BTreeSet<String>) -> Self {
        let words = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(content.into_iter().filter(|w| !RESERVED.contains(&w.as_str())))
            .collect();
        Vocabulary::from_words(words).expect("reserved tokens are present")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// Fixed-length token ids, padded with [`PAD`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
}

impl TokenSeq {
    /// Ids of the non-padding positions, with their positions.
    pub fn content(&self) -> impl Iterator<Item = (usize, u32)> + '_ {
        self.ids
            .iter()
            .copied()
            .enumerate()
            .filter(|&(_, id)| id != PAD)
    }

    pub fn is_all_pad(&self) -> bool {
        self.ids.iter().all(|&id| id == PAD)
    }
}

/// Whitespace split, vocabulary lookup, pad or truncate to `max_len`. An empty
/// instruction maps to all padding, never to [`NULL`].
pub fn tokenize(vocab: &Vocabulary, instruction: &Instruction, max_len: usize) -> TokenSeq {
    let mut ids: Vec<u32> = instruction
        .words()
        .take(max_len)
        .map(|w| {
            if w == MASK_WORD {
                MASK
            } else {
                vocab.id(w).unwrap_or(UNK)
            }
        })
        .collect();
    ids.resize(max_len, PAD);
    TokenSeq { ids }
}

pub fn detokenize(vocab: &Vocabulary, tokens: &TokenSeq) -> Instruction {
    let words: Vec<&str> = tokens
        .content()
        .map(|(_, id)| vocab.word(id).unwrap_or("<unk>"))
        .collect();
    Instruction::from_words(&words)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GrammarFile {
    version: u32,
    simple: String,
    negation_markers: Vec<String>,
    verbs: Vec<String>,
    colors: BTreeMap<Color, Vec<String>>,
    shapes: BTreeMap<Shape, Vec<String>>,
    descriptions: BTreeMap<Shape, String>,
    zones: BTreeMap<Destination, ZoneFile>,
    templates: TemplateFile,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ZoneFile {
    nouns: Vec<String>,
    preps: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateFile {
    plain: Vec<String>,
    reasoning: Vec<String>,
    negation: Vec<String>,
    distraction_prefix: Vec<String>,
    distraction_suffix: Vec<String>,
}

type Phrase = Vec<String>;

/// Instruction grammar: synonym sets (canonical entry first), templates, the
/// distraction-clause bank, commonsense descriptions and negation templates.
#[derive(Clone, Debug)]
pub struct Grammar {
    pub version: u32,
    pub simple: String,
    verbs: Vec<String>,
    colors: [Vec<String>; 4],
    shapes: [Vec<String>; 4],
    descriptions: [String; 4],
    zone_nouns: [Vec<String>; 4],
    zone_preps: [Vec<String>; 4],
    plain: Vec<String>,
    reasoning: Vec<String>,
    negation: Vec<String>,
    prefixes: Vec<String>,
    suffixes: Vec<String>,
    markers: Vec<Phrase>,
    color_words: HashMap<String, Color>,
    shape_phrases: Vec<(Phrase, Shape)>,
    zone_phrases: Vec<(Phrase, Destination)>,
    vocab: Vocabulary,
}

fn words(s: &str) -> Phrase {
    s.split_whitespace().map(str::to_string).collect()
}

fn indexed<K: Ord + Copy, V: Clone>(
    map: &BTreeMap<K, V>,
    keys: [K; 4],
    what: &str,
) -> Result<[V; 4]>
where
    K: fmt::Debug,
{
    let mut out = Vec::with_capacity(4);
    for k in keys {
        out.push(
            map.get(&k)
                .cloned()
                .ok_or_else(|| Error::format("grammar", format!("{what} entry {k:?} missing")))?,
        );
    }
    Ok(out.try_into().unwrap_or_else(|_| unreachable!()))
}

impl Grammar {
    /// The grammar shipped with the crate.
    pub fn builtin() -> Self {
        Grammar::from_toml(BUILTIN_GRAMMAR).expect("bundled grammar is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: GrammarFile = toml::from_str(text).map_err(|e| Error::format("grammar", e))?;
        if file.version != 1 {
            return Err(Error::format(
                "grammar",
                format!("unsupported version {}", file.version),
            ));
        }
        let colors = indexed(&file.colors, Color::ALL, "color")?;
        let shapes = indexed(&file.shapes, Shape::ALL, "shape")?;
        let descriptions = indexed(&file.descriptions, Shape::ALL, "description")?;
        let zones = indexed(
            &file
                .zones
                .iter()
                .map(|(k, z)| (*k, (z.nouns.clone(), z.preps.clone())))
                .collect(),
            Destination::ALL,
            "zone",
        )?;
        let zone_nouns = zones.clone().map(|z| z.0);
        let zone_preps = zones.map(|z| z.1);

        let mut color_words = HashMap::new();
        for c in Color::ALL {
            for w in &colors[c.index()] {
                if color_words.insert(w.clone(), c).is_some() || w.contains(' ') {
                    return Err(Error::format("grammar", format!("ambiguous color {w:?}")));
                }
            }
        }
        let mut shape_phrases = Vec::new();
        let mut zone_phrases = Vec::new();
        let mut seen = HashSet::new();
        for s in Shape::ALL {
            for p in shapes[s.index()].iter().chain([&descriptions[s.index()]]) {
                if !seen.insert(p.clone()) {
                    return Err(Error::format("grammar", format!("ambiguous shape {p:?}")));
                }
                shape_phrases.push((words(p), s));
            }
        }
        for d in Destination::ALL {
            for p in &zone_nouns[d.index()] {
                if !seen.insert(p.clone()) {
                    return Err(Error::format("grammar", format!("ambiguous zone {p:?}")));
                }
                zone_phrases.push((words(p), d));
            }
        }
        // longest match first
        shape_phrases.sort_by_key(|(p, _)| std::cmp::Reverse(p.len()));
        zone_phrases.sort_by_key(|(p, _)| std::cmp::Reverse(p.len()));
        let mut markers: Vec<Phrase> = file.negation_markers.iter().map(|m| words(m)).collect();
        markers.sort_by_key(|m| std::cmp::Reverse(m.len()));

        let lists = [
            &file.verbs,
            &file.templates.plain,
            &file.templates.reasoning,
            &file.templates.negation,
            &file.templates.distraction_prefix,
            &file.templates.distraction_suffix,
        ];
        if lists.iter().any(|l| l.is_empty())
            || colors.iter().chain(&shapes).chain(&zone_nouns).chain(&zone_preps).any(Vec::is_empty)
        {
            return Err(Error::format("grammar", "empty phrase list"));
        }

        let mut content = BTreeSet::new();
        let all_phrases = lists
            .into_iter()
            .flatten()
            .chain(colors.iter().flatten())
            .chain(shapes.iter().flatten())
            .chain(descriptions.iter())
            .chain(zone_nouns.iter().flatten())
            .chain(zone_preps.iter().flatten())
            .chain(file.negation_markers.iter())
            .chain(std::iter::once(&file.simple));
        for phrase in all_phrases {
            for w in phrase.split_whitespace() {
                if !w.starts_with('{') {
                    content.insert(w.to_string());
                }
            }
        }

        Ok(Grammar {
            version: file.version,
            simple: file.simple,
            verbs: file.verbs,
            colors,
            shapes,
            descriptions,
            zone_nouns,
            zone_preps,
            plain: file.templates.plain,
            reasoning: file.templates.reasoning,
            negation: file.templates.negation,
            prefixes: file.templates.distraction_prefix,
            suffixes: file.templates.distraction_suffix,
            markers,
            color_words,
            shape_phrases,
            zone_phrases,
            vocab: Vocabulary::build(content),
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn plain_templates(&self) -> &[String] {
        &self.plain
    }

    /// Number of distinct plain realizations of `z`.
    pub fn realization_count(&self, z: &Intent) -> usize {
        self.plain.len()
            * self.verbs.len()
            * self.colors[z.color.index()].len()
            * self.shapes[z.shape.index()].len()
            * self.zone_preps[z.destination.index()].len()
            * self.zone_nouns[z.destination.index()].len()
    }

    fn expand(&self, template: &str, slots: &Slots) -> Instruction {
        let mut out = Vec::new();
        for token in template.split_whitespace() {
            match token {
                "{verb}" => out.push(slots.verb.as_str()),
                "{object}" => out.push(slots.object.as_str()),
                "{prep}" => out.push(slots.prep.as_str()),
                "{zone}" => out.push(slots.zone.as_str()),
                "{main}" => out.push(slots.main.as_str()),
                "{other}" => out.push(slots.other.as_str()),
                w => out.push(w),
            }
        }
        Instruction::from_words(&out)
    }

    fn slots(&self, z: &Intent, choice: &WordChoice) -> Slots {
        let pick = |list: &[String], i: usize| list[i % list.len()].clone();
        Slots {
            verb: pick(&self.verbs, choice.verb),
            object: format!(
                "{} {}",
                pick(&self.colors[z.color.index()], choice.color),
                pick(&self.shapes[z.shape.index()], choice.shape)
            ),
            prep: pick(&self.zone_preps[z.destination.index()], choice.prep),
            zone: pick(&self.zone_nouns[z.destination.index()], choice.zone),
            main: String::new(),
            other: String::new(),
        }
    }

    /// Plain template `template` filled with the words selected by `choice`.
    pub fn realize_with(&self, z: &Intent, template: usize, choice: &WordChoice) -> Instruction {
        let t = &self.plain[template % self.plain.len()];
        self.expand(t, &self.slots(z, choice))
    }

    fn random_choice(&self, z: &Intent, rng: &mut seed::Rng) -> WordChoice {
        WordChoice {
            verb: rng.random_range(0..self.verbs.len()),
            color: rng.random_range(0..self.colors[z.color.index()].len()),
            shape: rng.random_range(0..self.shapes[z.shape.index()].len()),
            prep: rng.random_range(0..self.zone_preps[z.destination.index()].len()),
            zone: rng.random_range(0..self.zone_nouns[z.destination.index()].len()),
        }
    }

    fn negation_marker_at(&self, tokens: &[&str], i: usize) -> Option<usize> {
        self.markers
            .iter()
            .find(|m| phrase_at(tokens, i, m))
            .map(Vec::len)
    }
}

#[derive(Default)]
struct Slots {
    verb: String,
    object: String,
    prep: String,
    zone: String,
    main: String,
    other: String,
}

/// Indices into the synonym lists; all zeros selects the canonical words.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WordChoice {
    pub verb: usize,
    pub color: usize,
    pub shape: usize,
    pub prep: usize,
    pub zone: usize,
}

fn phrase_at(tokens: &[&str], i: usize, phrase: &[String]) -> bool {
    tokens.len() >= i + phrase.len() && phrase.iter().zip(&tokens[i..]).all(|(p, t)| p == t)
}

/// Samples one realization of `z`: a random plain template filled with the
/// canonical words.
pub fn realize(grammar: &Grammar, z: &Intent, seed: u64) -> Instruction {
    let mut rng = seed::rng(seed);
    let template = rng.random_range(0..grammar.plain.len());
    grammar.realize_with(z, template, &WordChoice::default())
}

/// Marker for text the grammar cannot map to an intent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Unparseable;

impl fmt::Display for Unparseable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("unparseable")
    }
}

/// Recovers the intent of an instruction.
///
/// Object mentions are a color word followed by a shape word or description.
/// A mention right after a negation marker is dropped. The text parses iff all
/// words are in the vocabulary and exactly one object and one zone remain.
pub fn parse(grammar: &Grammar, l: &Instruction) -> Result<Intent, Unparseable> {
    let tokens: Vec<&str> = l.words().collect();
    if tokens.is_empty()
        || tokens
            .iter()
            .any(|w| grammar.vocab.id(w).is_none_or(|id| id <= NULL))
    {
        return Err(Unparseable);
    }
    let mut objects = BTreeSet::new();
    let mut zones = BTreeSet::new();
    let mut negated = false;
    let mut i = 0;
    while i < tokens.len() {
        if let Some(n) = grammar.negation_marker_at(&tokens, i) {
            negated = true;
            i += n;
            continue;
        }
        if let Some(&color) = grammar.color_words.get(tokens[i]) {
            if let Some((phrase, shape)) = grammar
                .shape_phrases
                .iter()
                .find(|(p, _)| phrase_at(&tokens, i + 1, p))
            {
                if !negated {
                    objects.insert((color, *shape));
                }
                negated = false;
                i += 1 + phrase.len();
                continue;
            }
        }
        if let Some((phrase, d)) = grammar
            .zone_phrases
            .iter()
            .find(|(p, _)| phrase_at(&tokens, i, p))
        {
            zones.insert(*d);
            i += phrase.len();
            continue;
        }
        i += 1;
    }
    match (objects.len(), zones.len()) {
        (1, 1) => {
            let (color, shape) = *objects.first().expect("one object");
            let destination = *zones.first().expect("one zone");
            Ok(Intent::new(color, shape, destination))
        }
        _ => Err(Unparseable),
    }
}

/// Samples from the grammar's paraphrase distribution for one intent.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighborhood {
    pub items: Vec<Instruction>,
    /// Set when the grammar has fewer than `K` distinct realizations and some
    /// entries had to repeat.
    pub repeated: bool,
}

/// `K` realizations of `z` with random templates and synonyms, distinct where
/// the grammar allows it.
pub fn neighborhood(grammar: &Grammar, z: &Intent, k: usize, seed: u64) -> Result<Neighborhood> {
    if k == 0 {
        return Err(Error::Config("neighborhood size must be at least 1".into()));
    }
    let mut rng = seed::rng(seed);
    let available = grammar.realization_count(z);
    let mut seen = HashSet::new();
    let mut items = Vec::with_capacity(k);
    let mut attempts = 0;
    while items.len() < k {
        let template = rng.random_range(0..grammar.plain.len());
        let choice = grammar.random_choice(z, &mut rng);
        let text = grammar.realize_with(z, template, &choice);
        attempts += 1;
        if seen.insert(text.clone()) || seen.len() >= available || attempts > 64 * k {
            items.push(text);
        }
    }
    Ok(Neighborhood {
        repeated: k > available,
        items,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RewriteKind {
    /// Multiword substitution: synonyms for one or more slots.
    R0,
    /// Distraction: a task-irrelevant clause before or after the instruction.
    R1,
    /// Common sense: the shape noun becomes a descriptive phrase.
    R2,
    /// Reasoning chain: a two-step move-then-release formulation.
    R3,
    /// Confusion: a negated mention of a different object.
    R4,
}

impl RewriteKind {
    pub const ALL: [RewriteKind; 5] = [
        RewriteKind::R0,
        RewriteKind::R1,
        RewriteKind::R2,
        RewriteKind::R3,
        RewriteKind::R4,
    ];
}

/// A perturbation applied to an instruction at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum PerturbationSpec {
    Origin,
    Blank,
    Simple,
    Multi,
    Rand,
    Mask(f64),
    Rewrite(RewriteKind),
}

impl PerturbationSpec {
    /// The destructive-overwriting columns, in report order.
    pub fn default_suite() -> Vec<PerturbationSpec> {
        use PerturbationSpec::*;
        vec![Origin, Multi, Blank, Rand, Mask(0.2), Mask(0.4), Mask(0.6), Mask(0.8), Simple]
    }

    pub fn rewrite_suite() -> Vec<PerturbationSpec> {
        RewriteKind::ALL.iter().map(|&k| PerturbationSpec::Rewrite(k)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PerturbationSpec::Mask(p) if !(0.0..=1.0).contains(p) => {
                Err(Error::Config(format!("mask rate {p} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> String {
        match self {
            PerturbationSpec::Origin => "origin".into(),
            PerturbationSpec::Blank => "blank".into(),
            PerturbationSpec::Simple => "simple".into(),
            PerturbationSpec::Multi => "multi".into(),
            PerturbationSpec::Rand => "rand".into(),
            PerturbationSpec::Mask(p) => {
                let tenths = p * 10.0;
                if (tenths - tenths.round()).abs() < 1e-9 {
                    format!("m{}", tenths.round() as u32)
                } else {
                    format!("mask{p}")
                }
            }
            PerturbationSpec::Rewrite(k) => format!("{k:?}").to_lowercase(),
        }
    }

    /// Parses a comma-separated list of variant names.
    pub fn parse_list(list: &str) -> Result<Vec<PerturbationSpec>> {
        list.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect()
    }
}

impl fmt::Display for PerturbationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for PerturbationSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::Unknown {
            kind: "variant",
            name: s.to_string(),
        };
        let spec = match s {
            "origin" => PerturbationSpec::Origin,
            "blank" => PerturbationSpec::Blank,
            "simple" => PerturbationSpec::Simple,
            "multi" => PerturbationSpec::Multi,
            "rand" => PerturbationSpec::Rand,
            "r0" => PerturbationSpec::Rewrite(RewriteKind::R0),
            "r1" => PerturbationSpec::Rewrite(RewriteKind::R1),
            "r2" => PerturbationSpec::Rewrite(RewriteKind::R2),
            "r3" => PerturbationSpec::Rewrite(RewriteKind::R3),
            "r4" => PerturbationSpec::Rewrite(RewriteKind::R4),
            _ => {
                if let Some(rest) = s.strip_prefix("mask") {
                    PerturbationSpec::Mask(rest.parse().map_err(|_| unknown())?)
                } else if let Some(rest) = s.strip_prefix('m') {
                    let tenths: u32 = rest.parse().map_err(|_| unknown())?;
                    PerturbationSpec::Mask(f64::from(tenths) / 10.0)
                } else {
                    return Err(unknown());
                }
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn parse_or_fail(grammar: &Grammar, l: &Instruction) -> Result<Intent> {
    parse(grammar, l).map_err(|_| Error::Unparseable {
        text: l.text().to_string(),
    })
}

/// Applies a perturbation. Deterministic given `seed`.
pub fn perturb(
    grammar: &Grammar,
    l: &Instruction,
    spec: PerturbationSpec,
    seed: u64,
) -> Result<Instruction> {
    spec.validate()?;
    let mut rng = seed::rng(seed);
    match spec {
        PerturbationSpec::Origin => Ok(l.clone()),
        PerturbationSpec::Blank => Ok(Instruction::blank()),
        PerturbationSpec::Simple => Ok(Instruction::new(&grammar.simple)),
        PerturbationSpec::Multi => {
            let z = parse_or_fail(grammar, l)?;
            let hood = neighborhood(grammar, &z, MULTI_NEIGHBORHOOD, rng.random())?;
            Ok(hood.items.choose(&mut rng).expect("nonempty").clone())
        }
        PerturbationSpec::Rand => {
            let mut words: Vec<&str> = l.words().collect();
            words.shuffle(&mut rng);
            Ok(Instruction::from_words(&words))
        }
        PerturbationSpec::Mask(p) => {
            let words: Vec<&str> = l
                .words()
                .map(|w| if rng.random_bool(p) { MASK_WORD } else { w })
                .collect();
            Ok(Instruction::from_words(&words))
        }
        PerturbationSpec::Rewrite(kind) => rewrite_variant(grammar, l, kind, rng.random()),
    }
}

/// Meaning-preserving rewrite of a parseable instruction.
pub fn rewrite_variant(
    grammar: &Grammar,
    l: &Instruction,
    kind: RewriteKind,
    seed: u64,
) -> Result<Instruction> {
    let z = parse_or_fail(grammar, l)?;
    let mut rng = seed::rng(seed);
    let template_of = |rng: &mut seed::Rng, list: &[String]| {
        list.choose(rng).expect("nonempty").clone()
    };
    let canonical = grammar.slots(&z, &WordChoice::default());
    let out = match kind {
        RewriteKind::R0 => {
            let template = rng.random_range(0..grammar.plain.len());
            let mut choice = grammar.random_choice(&z, &mut rng);
            // force at least one non-canonical synonym
            let lens = [
                grammar.verbs.len(),
                grammar.colors[z.color.index()].len(),
                grammar.shapes[z.shape.index()].len(),
                grammar.zone_preps[z.destination.index()].len(),
                grammar.zone_nouns[z.destination.index()].len(),
            ];
            let slots: Vec<usize> = (0..5).filter(|&i| lens[i] > 1).collect();
            if let Some(&slot) = slots.choose(&mut rng) {
                let alt = rng.random_range(1..lens[slot]);
                match slot {
                    0 => choice.verb = alt,
                    1 => choice.color = alt,
                    2 => choice.shape = alt,
                    3 => choice.prep = alt,
                    _ => choice.zone = alt,
                }
            }
            grammar.realize_with(&z, template, &choice)
        }
        RewriteKind::R1 => {
            if rng.random_bool(0.5) {
                let clause = template_of(&mut rng, &grammar.prefixes);
                Instruction::new(&format!("{clause} {l}"))
            } else {
                let clause = template_of(&mut rng, &grammar.suffixes);
                Instruction::new(&format!("{l} {clause}"))
            }
        }
        RewriteKind::R2 => {
            let template = template_of(&mut rng, &grammar.plain);
            let slots = Slots {
                object: format!(
                    "{} {}",
                    grammar.colors[z.color.index()][0],
                    grammar.descriptions[z.shape.index()]
                ),
                ..grammar.slots(&z, &WordChoice::default())
            };
            grammar.expand(&template, &slots)
        }
        RewriteKind::R3 => {
            let template = template_of(&mut rng, &grammar.reasoning);
            grammar.expand(&template, &canonical)
        }
        RewriteKind::R4 => {
            let template = template_of(&mut rng, &grammar.negation);
            let others: Vec<(Color, Shape)> = Color::ALL
                .iter()
                .flat_map(|&c| Shape::ALL.iter().map(move |&s| (c, s)))
                .filter(|&o| o != z.object())
                .collect();
            let (c, s) = *others.choose(&mut rng).expect("nonempty");
            let slots = Slots {
                main: l.text().to_string(),
                other: format!(
                    "{} {}",
                    grammar.colors[c.index()][0],
                    grammar.shapes[s.index()][0]
                ),
                ..Slots::default()
            };
            grammar.expand(&template, &slots)
        }
    };
    Ok(out)
}
