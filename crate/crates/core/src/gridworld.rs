//! Deterministic cul-de-sac grid world.
//!
//! The world is a boolean occupancy grid where anything outside the grid
//! counts as an obstacle. The robot carries a square sensor window of radius
//! `r` (no occlusion) and accumulates what it sees into a tri-state
//! [`PartialMap`]. Both the raw window and the stitched map can be encoded
//! as input tensors for the policy models.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A cell index. Row grows downward, column grows to the right.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pose {
    pub row: usize,
    pub col: usize,
}

impl Pose {
    pub const fn new(row: usize, col: usize) -> Self {
        Pose { row, col }
    }

    pub fn manhattan(self, other: Pose) -> usize {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col)
    }

    fn shifted(self, dr: isize, dc: isize) -> (isize, isize) {
        (self.row as isize + dr, self.col as isize + dc)
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

/// The four moves. The index order is load-bearing: kernels, logits,
/// checkpoints and planner tie-breaking all use it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Down = 0,
    Right = 1,
    Up = 2,
    Left = 3,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Down, Action::Right, Action::Up, Action::Left];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Action> {
        Action::ALL.get(index).copied()
    }

    /// Row/column displacement.
    pub fn delta(self) -> (isize, isize) {
        match self {
            Action::Down => (1, 0),
            Action::Right => (0, 1),
            Action::Up => (-1, 0),
            Action::Left => (0, -1),
        }
    }

    pub fn from_delta(delta: (isize, isize)) -> Option<Action> {
        Action::ALL.into_iter().find(|a| a.delta() == delta)
    }

    pub fn opposite(self) -> Action {
        match self {
            Action::Down => Action::Up,
            Action::Right => Action::Left,
            Action::Up => Action::Down,
            Action::Left => Action::Right,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Down => "down",
            Action::Right => "right",
            Action::Up => "up",
            Action::Left => "left",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Action::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| Error::Parse(format!("unknown action {s:?}")))
    }
}

/// Read access to a grid for planners and sensors.
pub trait Traversable {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    /// Whether an in-bounds cell can be entered.
    fn is_free(&self, pose: Pose) -> bool;

    fn contains(&self, row: isize, col: isize) -> bool {
        row >= 0 && col >= 0 && (row as usize) < self.height() && (col as usize) < self.width()
    }

    /// The cell reached by `action`, if it is in bounds and free.
    fn neighbor(&self, pose: Pose, action: Action) -> Option<Pose> {
        let (dr, dc) = action.delta();
        let (r, c) = pose.shifted(dr, dc);
        if !self.contains(r, c) {
            return None;
        }
        let next = Pose::new(r as usize, c as usize);
        self.is_free(next).then_some(next)
    }
}

/// Ground-truth occupancy, `true` = obstacle.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Occupancy {
    width: usize,
    height: usize,
    cells: Vec<bool>,
}

impl Occupancy {
    /// An all-free grid.
    pub fn new(width: usize, height: usize) -> Self {
        Occupancy { width, height, cells: vec![false; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(Pose) -> bool) -> Self {
        let mut cells = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                cells.push(f(Pose::new(row, col)));
            }
        }
        Occupancy { width, height, cells }
    }

    pub fn is_occupied(&self, pose: Pose) -> bool {
        self.cells[pose.row * self.width + pose.col]
    }

    pub fn set(&mut self, pose: Pose, occupied: bool) {
        self.cells[pose.row * self.width + pose.col] = occupied;
    }

    /// Occupied or outside the grid.
    pub fn blocked_at(&self, row: isize, col: isize) -> bool {
        !self.contains(row, col) || self.cells[row as usize * self.width + col as usize]
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }
}

impl Traversable for Occupancy {
    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
    fn is_free(&self, pose: Pose) -> bool {
        !self.is_occupied(pose)
    }
}

/// Which way the mouth of the pocket faces.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Orientation {
    #[default]
    OpensUp,
    OpensDown,
    OpensLeft,
    OpensRight,
}

/// Parameters of the procedural cul-de-sac.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CuldesacSpec {
    /// Interior depth of the pocket.
    pub pocket_length: usize,
    /// Interior width, odd.
    pub pocket_width: usize,
    /// Free columns on each side of the pocket.
    pub margin: usize,
    /// Free rows between the start row and the mouth.
    pub approach: usize,
    #[serde(default)]
    pub orientation: Orientation,
}

impl Default for CuldesacSpec {
    fn default() -> Self {
        CuldesacSpec { pocket_length: 20, pocket_width: 3, margin: 3, approach: 5, orientation: Orientation::OpensUp }
    }
}

impl CuldesacSpec {
    pub fn with_length(self, pocket_length: usize) -> Self {
        CuldesacSpec { pocket_length, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pocket_length < 1 {
            return Err(Error::InvalidSpec("pocket_length must be >= 1".into()));
        }
        if self.pocket_width < 1 || self.pocket_width.is_multiple_of(2) {
            return Err(Error::InvalidSpec("pocket_width must be odd and >= 1".into()));
        }
        if self.margin < 2 {
            return Err(Error::InvalidSpec("margin must be >= 2".into()));
        }
        if self.approach < 1 {
            return Err(Error::InvalidSpec("approach must be >= 1".into()));
        }
        Ok(())
    }

    /// Dimensions of the OpensUp layout, `(width, height)`.
    pub fn canonical_dims(&self) -> (usize, usize) {
        (2 * self.margin + self.pocket_width + 2, self.approach + self.pocket_length + 1 + self.margin)
    }

    /// A pocket of the given length with approach `d ∈ 3..=8` and margin
    /// `m ∈ 2..=4` drawn from `seed`. Used for training and held-out sets.
    pub fn sample(pocket_length: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CuldesacSpec {
            pocket_length,
            pocket_width: 3,
            margin: rng.gen_range(2..=4),
            approach: rng.gen_range(3..=8),
            orientation: Orientation::OpensUp,
        }
    }
}

/// Pocket geometry of a generated map, used to measure depth and turnarounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pocket {
    spec: CuldesacSpec,
}

impl Pocket {
    pub fn spec(&self) -> &CuldesacSpec {
        &self.spec
    }

    /// Maps a world cell to the OpensUp frame.
    pub fn to_canonical(&self, pose: Pose) -> Pose {
        let (w, h) = self.spec.canonical_dims();
        match self.spec.orientation {
            Orientation::OpensUp => pose,
            Orientation::OpensDown => Pose::new(h - 1 - pose.row, w - 1 - pose.col),
            // world = (w-1-c, r)
            Orientation::OpensLeft => Pose::new(pose.col, w - 1 - pose.row),
            // world = (c, h-1-r)
            Orientation::OpensRight => Pose::new(h - 1 - pose.col, pose.row),
        }
    }

    fn world_pose(&self, pose: Pose) -> Pose {
        let (w, h) = self.spec.canonical_dims();
        match self.spec.orientation {
            Orientation::OpensUp => pose,
            Orientation::OpensDown => Pose::new(h - 1 - pose.row, w - 1 - pose.col),
            Orientation::OpensLeft => Pose::new(w - 1 - pose.col, pose.row),
            Orientation::OpensRight => Pose::new(pose.col, h - 1 - pose.row),
        }
    }

    /// The world action expressed in the OpensUp frame, so that
    /// [`Action::Up`] always means "toward the mouth".
    pub fn to_canonical_action(&self, action: Action) -> Action {
        let (dr, dc) = action.delta();
        let canonical = match self.spec.orientation {
            Orientation::OpensUp => (dr, dc),
            Orientation::OpensDown => (-dr, -dc),
            Orientation::OpensLeft => (dc, -dr),
            Orientation::OpensRight => (-dc, dr),
        };
        Action::from_delta(canonical).expect("rotation preserves unit moves")
    }

    /// Rows below the mouth for a cell inside the pocket interior, else `None`.
    pub fn depth(&self, pose: Pose) -> Option<usize> {
        let p = self.to_canonical(pose);
        let s = &self.spec;
        let rows = s.approach..s.approach + s.pocket_length;
        let cols = s.margin + 1..=s.margin + s.pocket_width;
        (rows.contains(&p.row) && cols.contains(&p.col)).then(|| p.row - s.approach)
    }
}

/// A world: occupancy plus start and goal.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GridMap {
    occupancy: Occupancy,
    start: Pose,
    goal: Pose,
    pocket: Option<Pocket>,
}

impl GridMap {
    /// Checks that start and goal are distinct free cells connected by a path.
    pub fn new(occupancy: Occupancy, start: Pose, goal: Pose) -> Result<Self> {
        if occupancy.width == 0 || occupancy.height == 0 {
            return Err(Error::InvalidMap("empty grid".into()));
        }
        for (name, p) in [("start", start), ("goal", goal)] {
            if !occupancy.contains(p.row as isize, p.col as isize) {
                return Err(Error::InvalidMap(format!("{name} {p} out of bounds")));
            }
            if occupancy.is_occupied(p) {
                return Err(Error::InvalidMap(format!("{name} {p} is occupied")));
            }
        }
        if start == goal {
            return Err(Error::InvalidMap("start equals goal".into()));
        }
        if crate::expert::bfs_oracle(&occupancy, start, goal).is_err() {
            return Err(Error::InvalidMap("goal not reachable from start".into()));
        }
        Ok(GridMap { occupancy, start, goal, pocket: None })
    }

    pub fn occupancy(&self) -> &Occupancy {
        &self.occupancy
    }
    pub fn start(&self) -> Pose {
        self.start
    }
    pub fn goal(&self) -> Pose {
        self.goal
    }
    pub fn pocket(&self) -> Option<&Pocket> {
        self.pocket.as_ref()
    }

    pub fn is_occupied(&self, pose: Pose) -> bool {
        self.occupancy.is_occupied(pose)
    }

    /// Serializes to the text format: `W H`, then one line per row with
    /// `#` obstacle, `.` free, `S` start, `G` goal.
    pub fn to_text(&self) -> String {
        let (w, h) = (self.width(), self.height());
        let mut out = format!("{w} {h}\n");
        for row in 0..h {
            for col in 0..w {
                let p = Pose::new(row, col);
                out.push(if p == self.start {
                    'S'
                } else if p == self.goal {
                    'G'
                } else if self.is_occupied(p) {
                    '#'
                } else {
                    '.'
                });
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.split('\n');
        let header = lines.next().ok_or_else(|| Error::Parse("missing header".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad header {header:?}"))))
            .collect::<Result<_>>()?;
        let [w, h] = dims[..] else {
            return Err(Error::Parse(format!("header must be 'W H', got {header:?}")));
        };
        let mut occupancy = Occupancy::new(w, h);
        let (mut start, mut goal) = (None, None);
        for row in 0..h {
            let line = lines.next().ok_or_else(|| Error::Parse(format!("missing row {row}")))?;
            if line.chars().count() != w {
                return Err(Error::Parse(format!("row {row} has length {} != {w}", line.len())));
            }
            for (col, ch) in line.chars().enumerate() {
                let p = Pose::new(row, col);
                match ch {
                    '#' => occupancy.set(p, true),
                    '.' => {}
                    'S' if start.is_none() => start = Some(p),
                    'G' if goal.is_none() => goal = Some(p),
                    'S' | 'G' => return Err(Error::Parse(format!("duplicate '{ch}'"))),
                    _ => return Err(Error::Parse(format!("unexpected character {ch:?}"))),
                }
            }
        }
        if lines.any(|l| !l.is_empty()) {
            return Err(Error::Parse("trailing data after grid".into()));
        }
        let start = start.ok_or_else(|| Error::Parse("no 'S'".into()))?;
        let goal = goal.ok_or_else(|| Error::Parse("no 'G'".into()))?;
        GridMap::new(occupancy, start, goal)
    }
}

impl Traversable for GridMap {
    fn width(&self) -> usize {
        self.occupancy.width
    }
    fn height(&self) -> usize {
        self.occupancy.height
    }
    fn is_free(&self, pose: Pose) -> bool {
        !self.occupancy.is_occupied(pose)
    }
}

/// Builds the U-shaped pocket. `seed` is accepted for future jitter and does
/// not affect the geometry.
pub fn generate_culdesac(spec: &CuldesacSpec, _seed: u64) -> Result<GridMap> {
    spec.validate()?;
    let s = spec;
    let (w, h) = s.canonical_dims();
    let bottom = s.approach + s.pocket_length;
    let (left, right) = (s.margin, s.margin + s.pocket_width + 1);
    let canonical = Occupancy::from_fn(w, h, |p| {
        let side = (p.col == left || p.col == right) && (s.approach..=bottom).contains(&p.row);
        let end = p.row == bottom && (left..=right).contains(&p.col);
        side || end
    });
    let center = s.margin + 1 + (s.pocket_width - 1) / 2;
    let pocket = Pocket { spec: *spec };

    let (world_w, world_h) = match s.orientation {
        Orientation::OpensUp | Orientation::OpensDown => (w, h),
        Orientation::OpensLeft | Orientation::OpensRight => (h, w),
    };
    let occupancy = Occupancy::from_fn(world_w, world_h, |p| canonical.is_occupied(pocket.to_canonical(p)));
    let start = pocket.world_pose(Pose::new(0, center));
    let goal = pocket.world_pose(Pose::new(h - 1, center));
    let mut map = GridMap::new(occupancy, start, goal)?;
    map.pocket = Some(pocket);
    Ok(map)
}

/// Deterministic dynamics: move unless the target is occupied or outside.
pub fn step(map: &GridMap, pose: Pose, action: Action) -> Pose {
    map.neighbor(pose, action).unwrap_or(pose)
}

/// The square sensor window around the robot. `1` = occupied or out of bounds.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SensorPatch {
    radius: usize,
    center: Pose,
    cells: Vec<u8>,
}

impl SensorPatch {
    pub fn radius(&self) -> usize {
        self.radius
    }
    pub fn center(&self) -> Pose {
        self.center
    }
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }
    /// Row-major `side × side` cells.
    pub fn cells(&self) -> &[u8] {
        &self.cells
    }
    /// Cell at offset `(di, dj)` from the center, each in `-r..=r`.
    pub fn at(&self, di: isize, dj: isize) -> u8 {
        let r = self.radius as isize;
        assert!(di.abs() <= r && dj.abs() <= r, "offset outside window");
        self.cells[((di + r) as usize) * self.side() + (dj + r) as usize]
    }
}

pub fn sense(map: &GridMap, pose: Pose, radius: usize) -> SensorPatch {
    let r = radius as isize;
    let mut cells = Vec::with_capacity((2 * radius + 1).pow(2));
    for di in -r..=r {
        for dj in -r..=r {
            let (row, col) = pose.shifted(di, dj);
            cells.push(map.occupancy.blocked_at(row, col) as u8);
        }
    }
    SensorPatch { radius, center: pose, cells }
}

/// What the robot knows about a cell.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Knowledge {
    #[default]
    Unknown,
    Free,
    Occupied,
}

/// Union of every sensor window seen so far.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PartialMap {
    width: usize,
    height: usize,
    cells: Vec<Knowledge>,
}

impl PartialMap {
    pub fn unknown(width: usize, height: usize) -> Self {
        PartialMap { width, height, cells: vec![Knowledge::Unknown; width * height] }
    }

    pub fn get(&self, pose: Pose) -> Knowledge {
        self.cells[pose.row * self.width + pose.col]
    }

    pub fn known_count(&self) -> usize {
        self.cells.iter().filter(|&&k| k != Knowledge::Unknown).count()
    }

    pub fn cells(&self) -> &[Knowledge] {
        &self.cells
    }

    /// Writes the in-bounds part of `patch` into the map. Fails without
    /// modifying anything if the patch contradicts an already-known cell.
    pub fn stitch(&mut self, patch: &SensorPatch) -> Result<()> {
        let c = patch.center;
        if c.row >= self.height || c.col >= self.width {
            return Err(Error::OutOfBounds(format!("patch center {c}")));
        }
        let mut updates = Vec::with_capacity(patch.cells.len());
        let r = patch.radius as isize;
        for di in -r..=r {
            for dj in -r..=r {
                let (row, col) = c.shifted(di, dj);
                if !self.contains(row, col) {
                    continue;
                }
                let idx = row as usize * self.width + col as usize;
                let seen = if patch.at(di, dj) == 1 { Knowledge::Occupied } else { Knowledge::Free };
                match self.cells[idx] {
                    Knowledge::Unknown => updates.push((idx, seen)),
                    known if known != seen => return Err(Error::Inconsistent(Pose::new(row as usize, col as usize))),
                    _ => {}
                }
            }
        }
        for (idx, k) in updates {
            self.cells[idx] = k;
        }
        Ok(())
    }

    /// Planning view where unknown cells count as free.
    pub fn optimistic(&self) -> OptimisticView<'_> {
        OptimisticView(self)
    }
}

impl Traversable for PartialMap {
    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
    /// Only cells known to be free.
    fn is_free(&self, pose: Pose) -> bool {
        self.get(pose) == Knowledge::Free
    }
}

#[derive(Clone, Copy, Debug)]
pub struct OptimisticView<'a>(&'a PartialMap);

impl Traversable for OptimisticView<'_> {
    fn width(&self) -> usize {
        self.0.width
    }
    fn height(&self) -> usize {
        self.0.height
    }
    fn is_free(&self, pose: Pose) -> bool {
        self.0.get(pose) != Knowledge::Occupied
    }
}

/// Which encoding a policy consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InputKind {
    /// The egocentric window plus goal prior, attention at the window center.
    Sensor,
    /// The stitched global map, attention at the robot cell.
    PartialMap,
}

/// A model input: the encoded tensor and the cell a VIN attends to.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub tensor: Tensor,
    pub attention: Pose,
}

/// Ground truth plus everything the robot has accumulated.
#[derive(Clone, Debug)]
pub struct EnvState {
    map: GridMap,
    pose: Pose,
    partial: PartialMap,
    radius: usize,
    steps_taken: usize,
}

impl EnvState {
    /// Places the robot at the start and stitches its first observation.
    pub fn new(map: GridMap, radius: usize) -> Self {
        let pose = map.start();
        let mut partial = PartialMap::unknown(map.width(), map.height());
        partial.stitch(&sense(&map, pose, radius)).expect("first stitch into empty map");
        EnvState { map, pose, partial, radius, steps_taken: 0 }
    }

    pub fn map(&self) -> &GridMap {
        &self.map
    }
    pub fn pose(&self) -> Pose {
        self.pose
    }
    pub fn partial(&self) -> &PartialMap {
        &self.partial
    }
    pub fn radius(&self) -> usize {
        self.radius
    }
    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }
    pub fn at_goal(&self) -> bool {
        self.pose == self.map.goal()
    }

    pub fn patch(&self) -> SensorPatch {
        sense(&self.map, self.pose, self.radius)
    }

    pub fn sensor_input(&self) -> Tensor {
        encode_sensor_input(&self.patch(), self.map.goal())
    }

    pub fn partialmap_input(&self) -> (Tensor, Pose) {
        encode_partialmap_input(&self.partial, self.pose, self.map.goal())
    }

    pub fn observe(&self, kind: InputKind) -> Observation {
        match kind {
            InputKind::Sensor => {
                Observation { tensor: self.sensor_input(), attention: Pose::new(self.radius, self.radius) }
            }
            InputKind::PartialMap => {
                let (tensor, attention) = self.partialmap_input();
                Observation { tensor, attention }
            }
        }
    }

    /// Moves, senses and stitches.
    pub fn apply(&mut self, action: Action) -> Result<()> {
        self.pose = step(&self.map, self.pose, action);
        self.partial.stitch(&sense(&self.map, self.pose, self.radius))?;
        self.steps_taken += 1;
        Ok(())
    }
}

/// `2 × (2r+1) × (2r+1)`: occupancy, then a one-hot goal prior clamped to
/// the window border.
pub fn encode_sensor_input(patch: &SensorPatch, goal: Pose) -> Tensor {
    let side = patch.side();
    let r = patch.radius as isize;
    let mut data = Vec::with_capacity(2 * side * side);
    data.extend(patch.cells.iter().map(|&v| v as f64));
    let mut prior = vec![0.0; side * side];
    let c = patch.center;
    let di = (goal.row as isize - c.row as isize).clamp(-r, r);
    let dj = (goal.col as isize - c.col as isize).clamp(-r, r);
    prior[((di + r) as usize) * side + (dj + r) as usize] = 1.0;
    data.extend(prior);
    Tensor::from_vec(vec![2, side, side], data)
}

/// `3 × H × W`: occupied (unknown reads as free), known mask, goal one-hot.
/// Also returns the attention cell (the robot pose).
pub fn encode_partialmap_input(partial: &PartialMap, pose: Pose, goal: Pose) -> (Tensor, Pose) {
    let n = partial.width * partial.height;
    let mut data = vec![0.0; 3 * n];
    for (i, k) in partial.cells.iter().enumerate() {
        match k {
            Knowledge::Occupied => {
                data[i] = 1.0;
                data[n + i] = 1.0;
            }
            Knowledge::Free => data[n + i] = 1.0,
            Knowledge::Unknown => {}
        }
    }
    data[2 * n + goal.row * partial.width + goal.col] = 1.0;
    (Tensor::from_vec(vec![3, partial.height, partial.width], data), pose)
}
