//! Closed-loop rollouts, success rates, generalization sweeps and the
//! turnaround diagnostic.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::{astar, step_budget};
use crate::gridworld::{
    generate_culdesac, Action, CuldesacSpec, EnvState, GridMap, InputKind, Observation, Pose, Traversable,
};
use crate::models::{HiddenState, Model};

/// A controller. Hidden state is owned by the caller and threaded through
/// [`Policy::act`]; a fresh [`Policy::initial_hidden`] starts each episode.
pub trait Policy: Sync {
    fn input_kind(&self) -> InputKind;

    fn initial_hidden(&self) -> HiddenState {
        HiddenState::empty()
    }

    fn act(&self, obs: &Observation, hidden: &HiddenState) -> Result<(Action, HiddenState)>;
}

/// A trained model acting greedily on its logits.
pub struct LearnedPolicy {
    pub model: Model,
}

impl Policy for LearnedPolicy {
    fn input_kind(&self) -> InputKind {
        self.model.config.kind.input_kind()
    }

    fn initial_hidden(&self) -> HiddenState {
        self.model.initial_hidden()
    }

    fn act(&self, obs: &Observation, hidden: &HiddenState) -> Result<(Action, HiddenState)> {
        let (out, next) = self.model.step(obs, hidden)?;
        Ok((out.greedy(), next))
    }
}

/// The optimistic A* replanner, reading everything it needs from the
/// partial-map encoding.
pub struct ReplannerPolicy;

struct DecodedMap<'a> {
    width: usize,
    height: usize,
    occupied: &'a [f64],
}

impl Traversable for DecodedMap<'_> {
    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
    fn is_free(&self, pose: Pose) -> bool {
        self.occupied[pose.row * self.width + pose.col] == 0.0
    }
}

impl Policy for ReplannerPolicy {
    fn input_kind(&self) -> InputKind {
        InputKind::PartialMap
    }

    fn act(&self, obs: &Observation, hidden: &HiddenState) -> Result<(Action, HiddenState)> {
        let [3, height, width] = obs.tensor.shape()[..] else {
            return Err(Error::Incompatible(format!("replanner needs a partial map, got {:?}", obs.tensor.shape())));
        };
        let n = height * width;
        let data = obs.tensor.data();
        let goal_idx = data[2 * n..].iter().position(|&v| v == 1.0).ok_or(Error::Empty("no goal in encoding"))?;
        let goal = Pose::new(goal_idx / width, goal_idx % width);
        let view = DecodedMap { width, height, occupied: &data[..n] };
        let action = astar(&view, obs.attention, goal)?
            .first_action()
            .ok_or_else(|| Error::Incompatible("replanner called at the goal".into()))?;
        Ok((action, hidden.clone()))
    }
}

/// Always the same action.
pub struct ConstantPolicy(pub Action);

impl Policy for ConstantPolicy {
    fn input_kind(&self) -> InputKind {
        InputKind::Sensor
    }

    fn act(&self, _: &Observation, hidden: &HiddenState) -> Result<(Action, HiddenState)> {
        Ok((self.0, hidden.clone()))
    }
}

/// Memoryless goal seeking on the sensor patch: the first free move (in
/// action order) that shortens the distance to the goal prior, else Down.
pub struct GreedyManhattanPolicy;

impl Policy for GreedyManhattanPolicy {
    fn input_kind(&self) -> InputKind {
        InputKind::Sensor
    }

    fn act(&self, obs: &Observation, hidden: &HiddenState) -> Result<(Action, HiddenState)> {
        let [2, side, _] = obs.tensor.shape()[..] else {
            return Err(Error::Incompatible(format!(
                "greedy policy needs a sensor patch, got {:?}",
                obs.tensor.shape()
            )));
        };
        let n = side * side;
        let data = obs.tensor.data();
        let g = data[n..].iter().position(|&v| v == 1.0).ok_or(Error::Empty("no goal prior in patch"))?;
        let (gr, gc) = ((g / side) as isize, (g % side) as isize);
        let c = obs.attention;
        let dist = |r: isize, col: isize| (gr - r).abs() + (gc - col).abs();
        let here = dist(c.row as isize, c.col as isize);
        let action = Action::ALL
            .into_iter()
            .find(|a| {
                let (dr, dc) = a.delta();
                let (r, col) = (c.row as isize + dr, c.col as isize + dc);
                data[r as usize * side + col as usize] == 0.0 && dist(r, col) < here
            })
            .unwrap_or(Action::Down);
        Ok((action, hidden.clone()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub success: bool,
    pub steps: usize,
    pub poses: Vec<Pose>,
    /// Deepest pocket depth visited.
    pub deepest_depth: Option<usize>,
    /// Deepest pocket depth reached before the first move toward the mouth
    /// made from inside the pocket.
    pub turnaround_depth: Option<usize>,
}

/// Runs `policy` from the start until the goal or `budget` steps.
pub fn rollout(map: &GridMap, policy: &dyn Policy, radius: usize, budget: usize) -> Result<RolloutResult> {
    let mut env = EnvState::new(map.clone(), radius);
    let mut hidden = policy.initial_hidden();
    let pocket = map.pocket().copied();
    let mut poses = vec![env.pose()];
    let mut deepest: Option<usize> = None;
    let mut turnaround: Option<usize> = None;
    let depth_of = |p: Pose| pocket.as_ref().and_then(|k| k.depth(p));
    deepest = deepest.max(depth_of(env.pose()));
    while !env.at_goal() && env.steps_taken() < budget {
        let obs = env.observe(policy.input_kind());
        let (action, next) = policy.act(&obs, &hidden)?;
        hidden = next;
        if turnaround.is_none() {
            if let (Some(k), Some(_)) = (pocket.as_ref(), depth_of(env.pose())) {
                if k.to_canonical_action(action) == Action::Up {
                    turnaround = deepest;
                }
            }
        }
        env.apply(action)?;
        poses.push(env.pose());
        deepest = deepest.max(depth_of(env.pose()));
    }
    Ok(RolloutResult {
        success: env.at_goal(),
        steps: env.steps_taken(),
        poses,
        deepest_depth: deepest,
        turnaround_depth: turnaround,
    })
}

/// One evaluated map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub length: Option<usize>,
    pub seed: u64,
    pub success: bool,
    pub steps: usize,
    pub turnaround_depth: Option<usize>,
    pub deepest_depth: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub maps: Vec<MapResult>,
    pub success_percent: f64,
    pub mean_success_steps: Option<f64>,
}

impl EvalReport {
    pub fn from_results(maps: Vec<MapResult>) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::Empty("no maps evaluated"));
        }
        let wins: Vec<usize> = maps.iter().filter(|m| m.success).map(|m| m.steps).collect();
        let success_percent = 100.0 * wins.len() as f64 / maps.len() as f64;
        let mean_success_steps = (!wins.is_empty()).then(|| wins.iter().sum::<usize>() as f64 / wins.len() as f64);
        Ok(EvalReport { maps, success_percent, mean_success_steps })
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// A map with the seed it was generated from.
#[derive(Clone, Debug)]
pub struct SeededMap {
    pub seed: u64,
    pub map: GridMap,
}

/// Independent rollouts over `maps`, each with the default step budget
/// unless `budget` overrides it. Results keep the map order.
pub fn evaluate(maps: &[SeededMap], policy: &dyn Policy, radius: usize, budget: Option<usize>) -> Result<EvalReport> {
    if maps.is_empty() {
        return Err(Error::Empty("no maps to evaluate"));
    }
    let results: Vec<Result<MapResult>> = maps
        .par_iter()
        .map(|m| {
            let b = budget.unwrap_or_else(|| step_budget(&m.map));
            let r = rollout(&m.map, policy, radius, b)?;
            Ok(MapResult {
                length: m.map.pocket().map(|p| p.spec().pocket_length),
                seed: m.seed,
                success: r.success,
                steps: r.steps,
                turnaround_depth: r.turnaround_depth,
                deepest_depth: r.deepest_depth,
            })
        })
        .collect();
    EvalReport::from_results(results.into_iter().collect::<Result<_>>()?)
}

/// How test maps are drawn for a pocket length.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MapFamily {
    /// One fixed geometry, only the length changes.
    Fixed(CuldesacSpec),
    /// Approach and margin drawn per seed with [`CuldesacSpec::sample`].
    Sampled,
}

impl MapFamily {
    pub fn map(&self, pocket_length: usize, seed: u64) -> Result<SeededMap> {
        let spec = match self {
            MapFamily::Fixed(base) => base.with_length(pocket_length),
            MapFamily::Sampled => CuldesacSpec::sample(pocket_length, seed),
        };
        Ok(SeededMap { seed, map: generate_culdesac(&spec, seed)? })
    }

    pub fn maps(&self, pocket_length: usize, seeds: &[u64]) -> Result<Vec<SeededMap>> {
        seeds.iter().map(|&s| self.map(pocket_length, s)).collect()
    }
}

/// Seeds of the default held-out set, disjoint from training seeds
/// `0..n` for any realistic `n`.
pub fn heldout_seeds(count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| 1_000_000 + i).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub length: usize,
    pub success_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    /// Largest tested length solved on every map, with every shorter tested
    /// length also solved on every map; 0 if none.
    pub max_generalization_length: usize,
}

impl SweepReport {
    pub fn from_points(points: Vec<SweepPoint>) -> Result<Self> {
        if points.windows(2).any(|w| w[0].length >= w[1].length) {
            return Err(Error::InvalidSpec("sweep lengths must be strictly increasing".into()));
        }
        let max_generalization_length =
            points.iter().take_while(|p| p.success_fraction == 1.0).last().map_or(0, |p| p.length);
        Ok(SweepReport { points, max_generalization_length })
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "length,success_fraction")?;
        for p in &self.points {
            writeln!(out, "{},{}", p.length, p.success_fraction)?;
        }
        Ok(())
    }
}

pub fn validate_lengths(lengths: &[usize]) -> Result<()> {
    if lengths.is_empty() {
        return Err(Error::Empty("no sweep lengths"));
    }
    if lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidSpec("sweep lengths must be strictly increasing".into()));
    }
    Ok(())
}

/// Success fraction at each length over `seeds`, and the longest length
/// solved perfectly along with every shorter one.
pub fn generalization_sweep(
    policy: &dyn Policy,
    family: MapFamily,
    lengths: &[usize],
    seeds: &[u64],
    radius: usize,
) -> Result<SweepReport> {
    validate_lengths(lengths)?;
    if seeds.is_empty() {
        return Err(Error::Empty("no seeds per length"));
    }
    let mut points = Vec::with_capacity(lengths.len());
    for &length in lengths {
        let report = evaluate(&family.maps(length, seeds)?, policy, radius, None)?;
        points.push(SweepPoint { length, success_fraction: report.success_percent / 100.0 });
    }
    SweepReport::from_points(points)
}

/// Counts of turnaround depths; rollouts that never turned back are tallied
/// separately.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TurnaroundHistogram {
    pub depths: BTreeMap<usize, usize>,
    pub never: usize,
}

impl TurnaroundHistogram {
    /// The most frequent depth, smallest on ties.
    pub fn mode(&self) -> Option<usize> {
        let mut best: Option<(usize, usize)> = None;
        for (&d, &n) in &self.depths {
            if best.is_none_or(|(_, m)| n > m) {
                best = Some((d, n));
            }
        }
        best.map(|(d, _)| d)
    }
}

pub fn turnaround_diagnostic(results: &[RolloutResult]) -> TurnaroundHistogram {
    let mut h = TurnaroundHistogram::default();
    for r in results {
        match r.turnaround_depth {
            Some(d) => *h.depths.entry(d).or_default() += 1,
            None => h.never += 1,
        }
    }
    h
}
