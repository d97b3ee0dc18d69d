//! Deterministic tabletop gridworld, scripted expert and biased dataset
//! generator.
//!
//! The board is a `7 × 7` grid. Four destination zones sit on the border
//! (`bin` along the bottom row, `top-shelf` along the top row, the two pads on
//! the left and right columns); objects are always spawned in the interior.
//! [`BiasedDatasetConfig::distractor_bias`] controls how often the object
//! nearest to the gripper is the one the instruction asks for, which is how
//! the dataset manufactures a visual shortcut that a policy can latch on to.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lang::{self, Grammar};
use crate::seed;

pub const DEFAULT_GRID: i32 = 7;
/// Primitive steps an episode (expert or learned) may take before it counts
/// as a failure.
pub const EPISODE_BUDGET: usize = 50;
pub const DEFAULT_HORIZON: usize = 4;
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verb {
    Put,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Cube,
    Ball,
    Mug,
    Bottle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Destination {
    LeftPad,
    RightPad,
    TopShelf,
    Bin,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Cube, Shape::Ball, Shape::Mug, Shape::Bottle];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Shape::Cube => "cube",
            Shape::Ball => "ball",
            Shape::Mug => "mug",
            Shape::Bottle => "bottle",
        }
    }
}

impl Destination {
    pub const ALL: [Destination; 4] = [
        Destination::LeftPad,
        Destination::RightPad,
        Destination::TopShelf,
        Destination::Bin,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Destination::LeftPad => "left-pad",
            Destination::RightPad => "right-pad",
            Destination::TopShelf => "top-shelf",
            Destination::Bin => "bin",
        }
    }

    /// Border cells making up the zone on a `grid × grid` board.
    pub fn cells(self, grid: i32) -> Vec<Cell> {
        let mid = grid / 2;
        let span = mid - 1..=mid + 1;
        match self {
            Destination::LeftPad => span.map(|y| Cell::new(0, y)).collect(),
            Destination::RightPad => span.map(|y| Cell::new(grid - 1, y)).collect(),
            Destination::TopShelf => span.map(|x| Cell::new(x, grid - 1)).collect(),
            Destination::Bin => span.map(|x| Cell::new(x, 0)).collect(),
        }
    }
}

/// The latent task: which object goes where.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Intent {
    pub verb: Verb,
    pub color: Color,
    pub shape: Shape,
    pub destination: Destination,
}

impl Intent {
    pub fn new(color: Color, shape: Shape, destination: Destination) -> Self {
        Intent {
            verb: Verb::Put,
            color,
            shape,
            destination,
        }
    }

    /// All 64 intents in a fixed order.
    pub fn all() -> Vec<Intent> {
        let mut out = Vec::with_capacity(64);
        for color in Color::ALL {
            for shape in Shape::ALL {
                for destination in Destination::ALL {
                    out.push(Intent::new(color, shape, destination));
                }
            }
        }
        out
    }

    pub fn object(&self) -> (Color, Shape) {
        (self.color, self.shape)
    }
}

impl fmt::Display for Intent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(put,{},{},{})",
            self.color.name(),
            self.shape.name(),
            self.destination.name()
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub const fn new(x: i32, y: i32) -> Self {
        Cell { x, y }
    }

    pub fn manhattan(self, other: Cell) -> i32 {
        (self.x - other.x).abs() + (self.y - other.y).abs()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Object {
    pub id: u32,
    pub color: Color,
    pub shape: Shape,
    pub cell: Cell,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub grid_size: i32,
    pub objects: Vec<Object>,
    pub gripper: Cell,
    pub held: Option<u32>,
    pub zones: BTreeMap<Destination, Vec<Cell>>,
    pub step_count: u32,
}

impl Scene {
    /// An empty board with the standard zones and the gripper at `gripper`.
    pub fn empty(grid_size: i32, gripper: Cell) -> Self {
        let zones = Destination::ALL
            .iter()
            .map(|&d| (d, d.cells(grid_size)))
            .collect();
        Scene {
            grid_size,
            objects: Vec::new(),
            gripper,
            held: None,
            zones,
            step_count: 0,
        }
    }

    pub fn in_bounds(&self, cell: Cell) -> bool {
        (0..self.grid_size).contains(&cell.x) && (0..self.grid_size).contains(&cell.y)
    }

    pub fn object(&self, id: u32) -> Option<&Object> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn object_at(&self, cell: Cell) -> Option<&Object> {
        self.objects.iter().find(|o| o.cell == cell)
    }

    /// The object matching the intent's `(color, shape)`, if present.
    pub fn target(&self, intent: &Intent) -> Option<&Object> {
        self.objects
            .iter()
            .find(|o| (o.color, o.shape) == intent.object())
    }

    pub fn zone(&self, destination: Destination) -> &[Cell] {
        self.zones
            .get(&destination)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Object closest to the gripper in Manhattan distance, ties broken by the
    /// lowest id.
    pub fn nearest_object(&self) -> Option<&Object> {
        self.objects
            .iter()
            .min_by_key(|o| (o.cell.manhattan(self.gripper), o.id))
    }

    /// Checks every structural invariant of the scene.
    pub fn validate(&self) -> Result<()> {
        if !self.in_bounds(self.gripper) {
            return Err(Error::Scene(format!(
                "gripper {:?} outside the grid",
                self.gripper
            )));
        }
        for (i, a) in self.objects.iter().enumerate() {
            if !self.in_bounds(a.cell) {
                return Err(Error::Scene(format!("object {} outside the grid", a.id)));
            }
            for b in &self.objects[i + 1..] {
                if a.id == b.id {
                    return Err(Error::Scene(format!("duplicate object id {}", a.id)));
                }
                if a.cell == b.cell {
                    return Err(Error::Scene(format!(
                        "objects {} and {} share cell {:?}",
                        a.id, b.id, a.cell
                    )));
                }
            }
        }
        if let Some(id) = self.held {
            match self.object(id) {
                Some(o) if o.cell == self.gripper => {}
                Some(_) => {
                    return Err(Error::Scene(format!(
                        "held object {id} is not under the gripper"
                    )))
                }
                None => return Err(Error::Scene(format!("held object {id} does not exist"))),
            }
        }
        Ok(())
    }

    /// Equality ignoring the step counter.
    pub fn same_state(&self, other: &Scene) -> bool {
        self.gripper == other.gripper && self.held == other.held && self.objects == other.objects
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrimitiveAction {
    Up,
    Down,
    Left,
    Right,
    Grasp,
    Release,
    Noop,
}

impl PrimitiveAction {
    pub const COUNT: usize = 7;
    pub const ALL: [PrimitiveAction; 7] = [
        PrimitiveAction::Up,
        PrimitiveAction::Down,
        PrimitiveAction::Left,
        PrimitiveAction::Right,
        PrimitiveAction::Grasp,
        PrimitiveAction::Release,
        PrimitiveAction::Noop,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn delta(self) -> (i32, i32) {
        match self {
            PrimitiveAction::Up => (0, 1),
            PrimitiveAction::Down => (0, -1),
            PrimitiveAction::Left => (-1, 0),
            PrimitiveAction::Right => (1, 0),
            _ => (0, 0),
        }
    }

    pub fn is_move(self) -> bool {
        self.delta() != (0, 0)
    }

    /// Continuous `(dx, dy, grip)` encoding. `grip` is `+1` while the gripper
    /// is closed after the action and `-1` when it is open.
    pub fn encode(self, held_after: bool) -> [f64; 3] {
        let (dx, dy) = self.delta();
        let grip = match self {
            PrimitiveAction::Grasp => 1.0,
            PrimitiveAction::Release => -1.0,
            _ if held_after => 1.0,
            _ => -1.0,
        };
        [f64::from(dx), f64::from(dy), grip]
    }

    /// Nearest primitive to a continuous entry, given whether the gripper is
    /// currently holding something.
    pub fn quantize(entry: [f64; 3], holding: bool) -> Self {
        let [dx, dy, grip] = entry;
        if dx.abs().max(dy.abs()) >= 0.5 {
            if dx.abs() >= dy.abs() {
                if dx > 0.0 {
                    PrimitiveAction::Right
                } else {
                    PrimitiveAction::Left
                }
            } else if dy > 0.0 {
                PrimitiveAction::Up
            } else {
                PrimitiveAction::Down
            }
        } else if grip > 0.0 && !holding {
            PrimitiveAction::Grasp
        } else if grip < 0.0 && holding {
            PrimitiveAction::Release
        } else {
            PrimitiveAction::Noop
        }
    }
}

/// `H` continuous `(dx, dy, grip)` triples, each component in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionChunk {
    pub entries: Vec<[f64; 3]>,
}

impl ActionChunk {
    pub fn new(entries: Vec<[f64; 3]>) -> Self {
        let entries = entries
            .into_iter()
            .map(|e| e.map(|v| v.clamp(-1.0, 1.0)))
            .collect();
        ActionChunk { entries }
    }

    /// Flat row-major vector of length `3 H`, the layout the flow head uses.
    pub fn from_flat(flat: &[f64]) -> Self {
        ActionChunk::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn horizon(&self) -> usize {
        self.entries.len()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.entries.iter().flatten().copied().collect()
    }

    /// Encodes `actions` starting from the given gripper state, padding with
    /// no-ops up to `horizon`.
    pub fn encode(actions: &[PrimitiveAction], mut holding: bool, horizon: usize) -> Self {
        let mut entries = Vec::with_capacity(horizon);
        for i in 0..horizon {
            let action = actions.get(i).copied().unwrap_or(PrimitiveAction::Noop);
            match action {
                PrimitiveAction::Grasp => holding = true,
                PrimitiveAction::Release => holding = false,
                _ => {}
            }
            entries.push(action.encode(holding));
        }
        ActionChunk { entries }
    }
}

/// Applies one primitive. Actions that cannot take effect are no-ops; the step
/// counter advances regardless.
///
/// Moves clamp at the walls. While carrying, a move into a cell occupied by
/// another object is blocked. Grasp picks up the object under the gripper.
/// Release drops the carried object into the gripper cell.
pub fn step(scene: &Scene, action: PrimitiveAction) -> Scene {
    let mut next = scene.clone();
    next.step_count += 1;
    match action {
        PrimitiveAction::Grasp => {
            if next.held.is_none() {
                next.held = next.object_at(next.gripper).map(|o| o.id);
            }
        }
        PrimitiveAction::Release => {
            next.held = None;
        }
        PrimitiveAction::Noop => {}
        _ => {
            let (dx, dy) = action.delta();
            let target = Cell::new(
                (next.gripper.x + dx).clamp(0, next.grid_size - 1),
                (next.gripper.y + dy).clamp(0, next.grid_size - 1),
            );
            let blocked = next.held.is_some()
                && next
                    .objects
                    .iter()
                    .any(|o| o.cell == target && Some(o.id) != next.held);
            if !blocked {
                next.gripper = target;
                if let Some(id) = next.held {
                    if let Some(o) = next.objects.iter_mut().find(|o| o.id == id) {
                        o.cell = target;
                    }
                }
            }
        }
    }
    next
}

/// `true` iff the target rests (not held) inside its destination zone.
pub fn check_success(scene: &Scene, intent: &Intent) -> Result<bool> {
    let target = scene
        .target(intent)
        .ok_or_else(|| Error::Scene(format!("target of {intent} absent from scene")))?;
    Ok(scene.held != Some(target.id) && scene.zone(intent.destination).contains(&target.cell))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasedDatasetConfig {
    pub n_episodes: usize,
    pub distractor_bias: f64,
    pub n_distractors: usize,
    pub seed: u64,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
}

fn default_horizon() -> usize {
    DEFAULT_HORIZON
}

impl Default for BiasedDatasetConfig {
    fn default() -> Self {
        BiasedDatasetConfig {
            n_episodes: 2000,
            distractor_bias: 0.9,
            n_distractors: 3,
            seed: 0,
            horizon: DEFAULT_HORIZON,
        }
    }
}

impl BiasedDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.distractor_bias) {
            return Err(Error::Config(format!(
                "distractor_bias {} outside [0, 1]",
                self.distractor_bias
            )));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        Ok(())
    }
}

fn interior(grid: i32) -> Vec<Cell> {
    let mut cells = Vec::new();
    for y in 1..grid - 1 {
        for x in 1..grid - 1 {
            cells.push(Cell::new(x, y));
        }
    }
    cells
}

/// Samples a scene for `intent`: the gripper and `n_distractors + 1` objects on
/// distinct interior cells. With probability `distractor_bias` the target is
/// the object nearest to the gripper, otherwise a distractor is.
pub fn init_scene(intent: &Intent, cfg: &BiasedDatasetConfig, episode_seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let grid = DEFAULT_GRID;
    let mut free = interior(grid);
    let n_objects = cfg.n_distractors + 1;
    if n_objects > free.len() - 1 {
        return Err(Error::Config(format!(
            "{} objects do not fit in {} free cells",
            n_objects,
            free.len() - 1
        )));
    }
    let want_nearest = cfg.distractor_bias >= 1.0 || {
        let mut rng = seed::rng_at(episode_seed, &[0]);
        rng.random_bool(cfg.distractor_bias)
    };
    if !want_nearest && cfg.n_distractors == 0 {
        return Err(Error::Config(
            "a distractor bias below 1 needs at least one distractor".into(),
        ));
    }

    let mut rng = seed::rng_at(episode_seed, &[1]);
    let gripper = free.swap_remove(rng.random_range(0..free.len()));
    let mut scene = Scene::empty(grid, gripper);
    let cells: Vec<Cell> = free.choose_multiple(&mut rng, n_objects).copied().collect();
    // ids follow the sampled order, which is already random
    let nearest = (0..n_objects)
        .min_by_key(|&i| (cells[i].manhattan(gripper), i))
        .expect("at least one object");
    let target = if want_nearest {
        nearest
    } else {
        let others: Vec<usize> = (0..n_objects).filter(|&i| i != nearest).collect();
        *others.choose(&mut rng).expect("at least one distractor")
    };
    let distractor_kinds: Vec<(Color, Shape)> = Color::ALL
        .iter()
        .flat_map(|&c| Shape::ALL.iter().map(move |&s| (c, s)))
        .filter(|&kind| kind != intent.object())
        .collect();
    for (i, &cell) in cells.iter().enumerate() {
        let (color, shape) = if i == target {
            intent.object()
        } else {
            *distractor_kinds.choose(&mut rng).expect("nonempty")
        };
        scene.objects.push(Object {
            id: i as u32,
            color,
            shape,
            cell,
        });
    }
    Ok(scene)
}

/// Target cell used by the expert while carrying: the zone cell that is
/// closest to the gripper and free of other objects.
fn delivery_goal(scene: &Scene, destination: Destination) -> Option<Cell> {
    scene
        .zone(destination)
        .iter()
        .copied()
        .filter(|&c| {
            scene
                .object_at(c)
                .is_none_or(|o| Some(o.id) == scene.held)
        })
        .min_by_key(|&c| (c.manhattan(scene.gripper), c.x, c.y))
}

fn toward(from: Cell, to: Cell) -> Vec<PrimitiveAction> {
    let mut prefs = Vec::with_capacity(4);
    if to.x > from.x {
        prefs.push(PrimitiveAction::Right);
    } else if to.x < from.x {
        prefs.push(PrimitiveAction::Left);
    }
    if to.y > from.y {
        prefs.push(PrimitiveAction::Up);
    } else if to.y < from.y {
        prefs.push(PrimitiveAction::Down);
    }
    prefs
}

/// Breadth-first distances to `goals` avoiding `blocked` cells.
fn distance_map(scene: &Scene, goals: &[Cell], blocked: &[Cell]) -> Vec<Option<u32>> {
    let g = scene.grid_size;
    let idx = |c: Cell| (c.y * g + c.x) as usize;
    let mut dist = vec![None; (g * g) as usize];
    let mut queue = VecDeque::new();
    for &goal in goals {
        dist[idx(goal)] = Some(0);
        queue.push_back(goal);
    }
    while let Some(c) = queue.pop_front() {
        let d = dist[idx(c)].expect("queued cells have distances");
        for a in &PrimitiveAction::ALL[..4] {
            let (dx, dy) = a.delta();
            let n = Cell::new(c.x + dx, c.y + dy);
            if scene.in_bounds(n) && dist[idx(n)].is_none() && !blocked.contains(&n) {
                dist[idx(n)] = Some(d + 1);
                queue.push_back(n);
            }
        }
    }
    dist
}

/// One step of the scripted expert: walk to the target (x first, then y),
/// grasp, carry it along a shortest unblocked path to the nearest free cell of
/// the destination zone, release.
pub fn expert_action(scene: &Scene, intent: &Intent) -> Result<PrimitiveAction> {
    if check_success(scene, intent)? {
        return Ok(PrimitiveAction::Noop);
    }
    let target = scene.target(intent).expect("checked above").clone();
    match scene.held {
        Some(id) if id != target.id => Ok(PrimitiveAction::Release),
        None if scene.gripper == target.cell => Ok(PrimitiveAction::Grasp),
        None => Ok(toward(scene.gripper, target.cell)[0]),
        Some(_) => {
            if scene.zone(intent.destination).contains(&scene.gripper) {
                return Ok(PrimitiveAction::Release);
            }
            let goal = delivery_goal(scene, intent.destination)
                .ok_or_else(|| Error::Scene("destination zone is full".into()))?;
            let blocked: Vec<Cell> = scene
                .objects
                .iter()
                .filter(|o| o.id != target.id)
                .map(|o| o.cell)
                .collect();
            let goals: Vec<Cell> = scene
                .zone(intent.destination)
                .iter()
                .copied()
                .filter(|c| !blocked.contains(c))
                .collect();
            let dist = distance_map(scene, &goals, &blocked);
            let g = scene.grid_size;
            let at = |c: Cell| dist[(c.y * g + c.x) as usize];
            let here = at(scene.gripper)
                .ok_or_else(|| Error::Scene("no unblocked path to the destination".into()))?;
            let mut prefs = toward(scene.gripper, goal);
            prefs.extend_from_slice(&PrimitiveAction::ALL[..4]);
            prefs
                .into_iter()
                .find(|a| {
                    let (dx, dy) = a.delta();
                    let n = Cell::new(scene.gripper.x + dx, scene.gripper.y + dy);
                    scene.in_bounds(n) && at(n) == Some(here - 1)
                })
                .ok_or_else(|| Error::Scene("no shortest-path move found".into()))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub scene: Scene,
    pub chunk: ActionChunk,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub intent: Intent,
    pub frames: Vec<Frame>,
    pub success: bool,
}

/// Decodes and executes every chunk in `frames` from the first snapshot,
/// returning the scene reached after each frame.
pub fn replay(frames: &[Frame]) -> Vec<Scene> {
    let Some(first) = frames.first() else {
        return Vec::new();
    };
    let mut scene = first.scene.clone();
    let mut out = Vec::with_capacity(frames.len());
    for frame in frames {
        for &entry in &frame.chunk.entries {
            let action = PrimitiveAction::quantize(entry, scene.held.is_some());
            scene = step(&scene, action);
        }
        out.push(scene.clone());
    }
    out
}

impl Trajectory {
    /// Primitive actions up to and including the one that completes the task.
    pub fn primitive_actions(&self) -> Vec<PrimitiveAction> {
        let Some(first) = self.frames.first() else {
            return Vec::new();
        };
        let mut scene = first.scene.clone();
        let mut actions = Vec::new();
        if check_success(&scene, &self.intent).unwrap_or(false) {
            return vec![PrimitiveAction::Noop];
        }
        for frame in &self.frames {
            for &entry in &frame.chunk.entries {
                let action = PrimitiveAction::quantize(entry, scene.held.is_some());
                scene = step(&scene, action);
                actions.push(action);
                if check_success(&scene, &self.intent).unwrap_or(false) {
                    return actions;
                }
            }
        }
        actions
    }
}

/// Runs the scripted expert from `scene`, packing its primitives into chunks of
/// `horizon` entries (the last one padded with no-ops).
pub fn expert_rollout(scene: &Scene, intent: &Intent, horizon: usize) -> Result<Trajectory> {
    if horizon == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    let start = scene.clone();
    if check_success(&start, intent)? {
        return Ok(Trajectory {
            intent: *intent,
            frames: vec![Frame {
                chunk: ActionChunk::encode(&[], start.held.is_some(), horizon),
                scene: start,
            }],
            success: true,
        });
    }
    let mut actions = Vec::new();
    let mut current = start.clone();
    while !check_success(&current, intent)? {
        if actions.len() >= EPISODE_BUDGET {
            return Err(Error::ExpertBudget {
                budget: EPISODE_BUDGET,
            });
        }
        let action = expert_action(&current, intent)?;
        current = step(&current, action);
        actions.push(action);
    }
    let mut frames = Vec::new();
    let mut scene = start;
    for group in actions.chunks(horizon) {
        let chunk = ActionChunk::encode(group, scene.held.is_some(), horizon);
        let at_start = scene.clone();
        for &a in group {
            scene = step(&scene, a);
        }
        frames.push(Frame {
            scene: at_start,
            chunk,
        });
    }
    Ok(Trajectory {
        intent: *intent,
        frames,
        success: true,
    })
}

/// One line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeRecord {
    pub v: u32,
    pub intent: Intent,
    pub instruction: String,
    pub frames: Vec<Frame>,
}

impl EpisodeRecord {
    pub fn trajectory(&self) -> Trajectory {
        Trajectory {
            intent: self.intent,
            frames: self.frames.clone(),
            success: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DatasetStats {
    pub written: usize,
    pub skipped: usize,
}

/// Generates `cfg.n_episodes` expert episodes over `intents` (uniformly
/// sampled). Episodes the expert cannot finish are skipped and counted.
pub fn generate_episodes(
    cfg: &BiasedDatasetConfig,
    grammar: &Grammar,
    intents: &[Intent],
) -> Result<(Vec<EpisodeRecord>, DatasetStats)> {
    cfg.validate()?;
    if intents.is_empty() {
        return Err(Error::Config("no intents to sample from".into()));
    }
    let mut records = Vec::with_capacity(cfg.n_episodes);
    let mut stats = DatasetStats::default();
    for episode in 0..cfg.n_episodes as u64 {
        let mut rng = seed::rng_at(cfg.seed, &[episode, 0]);
        let intent = *intents.choose(&mut rng).expect("nonempty");
        let scene = init_scene(&intent, cfg, seed::derive(cfg.seed, &[episode, 1]))?;
        let trajectory = match expert_rollout(&scene, &intent, cfg.horizon) {
            Ok(t) => t,
            Err(Error::ExpertBudget { .. }) | Err(Error::Scene(_)) => {
                stats.skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let instruction = lang::realize(grammar, &intent, seed::derive(cfg.seed, &[episode, 2]));
        records.push(EpisodeRecord {
            v: DATASET_VERSION,
            intent,
            instruction: instruction.text().to_string(),
            frames: trajectory.frames,
        });
        stats.written += 1;
    }
    Ok((records, stats))
}

pub fn write_dataset(records: &[EpisodeRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record).map_err(|e| Error::format("episode", e))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<EpisodeRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EpisodeRecord = serde_json::from_str(&line).map_err(|e| {
            Error::format(format!("{}:{}", path.display(), lineno + 1), e)
        })?;
        if record.v != DATASET_VERSION {
            return Err(Error::format(
                format!("{}:{}", path.display(), lineno + 1),
                format!("unsupported dataset version {}", record.v),
            ));
        }
        records.push(record);
    }
    Ok(records)
}

/// Generates a dataset over all 64 intents and writes it as JSONL.
pub fn generate_dataset(
    cfg: &BiasedDatasetConfig,
    grammar: &Grammar,
    path: &Path,
) -> Result<DatasetStats> {
    let (records, stats) = generate_episodes(cfg, grammar, &Intent::all())?;
    write_dataset(&records, path)?;
    Ok(stats)
}
