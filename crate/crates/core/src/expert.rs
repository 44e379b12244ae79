//! The supervising expert.
//!
//! [`astar`] plans on any [`Traversable`] grid. The expert itself,
//! [`replanner_policy`], runs A* on the optimistic view of the robot's
//! partial map (unknown = free) and takes the first move, replanning every
//! step. On a cul-de-sac this drives the robot into the pocket, reveals the
//! closed end, and backs it out, which is exactly the behavior a memoryless
//! policy cannot imitate.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::{
    generate_culdesac, Action, CuldesacSpec, EnvState, GridMap, InputKind, Observation, PartialMap, Pose, Traversable,
};

/// Version of the input encoders; bumped whenever an encoding changes.
pub const ENCODER_VERSION: u32 = 1;
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// A 4-connected sequence of free cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Path {
    poses: Vec<Pose>,
}

impl Path {
    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    /// Number of moves.
    pub fn len(&self) -> usize {
        self.poses.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn actions(&self) -> Vec<Action> {
        self.poses
            .windows(2)
            .map(|w| {
                let d = (w[1].row as isize - w[0].row as isize, w[1].col as isize - w[0].col as isize);
                Action::from_delta(d).expect("path cells are 4-adjacent")
            })
            .collect()
    }

    pub fn first_action(&self) -> Option<Action> {
        self.actions().first().copied()
    }
}

fn index_of<G: Traversable + ?Sized>(grid: &G, p: Pose) -> usize {
    p.row * grid.width() + p.col
}

fn check_endpoints<G: Traversable + ?Sized>(grid: &G, start: Pose, goal: Pose) -> Result<()> {
    for p in [start, goal] {
        if !grid.contains(p.row as isize, p.col as isize) {
            return Err(Error::OutOfBounds(format!("{p} outside {}×{}", grid.height(), grid.width())));
        }
        if !grid.is_free(p) {
            return Err(Error::Unreachable);
        }
    }
    Ok(())
}

/// Shortest 4-connected path with the Manhattan heuristic.
///
/// Ties are broken by lowest `f`, then lowest `h`, then most recent insertion;
/// neighbors are expanded in [`Action`] index order. The result is therefore
/// a pure function of the inputs.
pub fn astar<G: Traversable + ?Sized>(grid: &G, start: Pose, goal: Pose) -> Result<Path> {
    check_endpoints(grid, start, goal)?;
    let n = grid.width() * grid.height();
    let mut g_cost = vec![usize::MAX; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut open = BinaryHeap::new();
    let mut seq = 0u64;

    let s = index_of(grid, start);
    g_cost[s] = 0;
    let h0 = start.manhattan(goal);
    open.push(Reverse((h0, h0, Reverse(seq), start)));

    while let Some(Reverse((_, _, _, pose))) = open.pop() {
        let i = index_of(grid, pose);
        if closed[i] {
            continue;
        }
        if pose == goal {
            let mut poses = vec![pose];
            let mut cur = i;
            while parent[cur] != usize::MAX {
                cur = parent[cur];
                poses.push(Pose::new(cur / grid.width(), cur % grid.width()));
            }
            poses.reverse();
            return Ok(Path { poses });
        }
        closed[i] = true;
        for action in Action::ALL {
            let Some(next) = grid.neighbor(pose, action) else { continue };
            let j = index_of(grid, next);
            if closed[j] {
                continue;
            }
            let g = g_cost[i] + 1;
            if g < g_cost[j] {
                g_cost[j] = g;
                parent[j] = i;
                let h = next.manhattan(goal);
                seq += 1;
                open.push(Reverse((g + h, h, Reverse(seq), next)));
            }
        }
    }
    Err(Error::Unreachable)
}

/// Plain breadth-first search; the independent check on [`astar`].
pub fn bfs_oracle<G: Traversable + ?Sized>(grid: &G, start: Pose, goal: Pose) -> Result<usize> {
    check_endpoints(grid, start, goal)?;
    let mut dist = vec![usize::MAX; grid.width() * grid.height()];
    let mut queue = VecDeque::from([start]);
    dist[index_of(grid, start)] = 0;
    while let Some(p) = queue.pop_front() {
        let d = dist[index_of(grid, p)];
        if p == goal {
            return Ok(d);
        }
        for action in Action::ALL {
            if let Some(q) = grid.neighbor(p, action) {
                let j = index_of(grid, q);
                if dist[j] == usize::MAX {
                    dist[j] = d + 1;
                    queue.push_back(q);
                }
            }
        }
    }
    Err(Error::Unreachable)
}

/// First move of an A* plan on the optimistic view of `partial`.
pub fn replanner_policy(partial: &PartialMap, pose: Pose, goal: Pose) -> Result<Action> {
    let path = astar(&partial.optimistic(), pose, goal)?;
    path.first_action().ok_or_else(|| Error::Incompatible("replanner called at the goal".into()))
}

/// Step budget for a map: ten times the optimal length plus 100.
pub fn step_budget(map: &GridMap) -> usize {
    let optimal = bfs_oracle(map, map.start(), map.goal()).expect("GridMap guarantees reachability");
    10 * optimal + 100
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub pose: Pose,
    pub action: Action,
}

/// An expert rollout. Input tensors are not stored; they are re-derived by
/// replaying the steps (see [`Trajectory::observations`]).
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub map: GridMap,
    pub seed: u64,
    pub radius: usize,
    pub steps: Vec<Step>,
    pub success: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn spec(&self) -> Option<CuldesacSpec> {
        self.map.pocket().map(|p| *p.spec())
    }

    pub fn actions(&self) -> impl Iterator<Item = Action> + '_ {
        self.steps.iter().map(|s| s.action)
    }

    /// Replays the recorded actions, checking every pose, and returns the
    /// model input seen before each step.
    pub fn observations(&self, kind: InputKind) -> Result<Vec<Observation>> {
        let mut env = EnvState::new(self.map.clone(), self.radius);
        let mut out = Vec::with_capacity(self.steps.len());
        for (i, step) in self.steps.iter().enumerate() {
            if env.pose() != step.pose {
                return Err(Error::Incompatible(format!(
                    "replay diverged at step {i}: {} vs recorded {}",
                    env.pose(),
                    step.pose
                )));
            }
            out.push(env.observe(kind));
            env.apply(step.action)?;
        }
        Ok(out)
    }

    /// Pose after the last step.
    pub fn final_pose(&self) -> Pose {
        match self.steps.last() {
            Some(s) => crate::gridworld::step(&self.map, s.pose, s.action),
            None => self.map.start(),
        }
    }
}

/// Closed-loop expert: sense, stitch, replan, move, until the goal or the
/// budget.
pub fn rollout_expert(map: &GridMap, radius: usize, budget: usize) -> Result<Trajectory> {
    if budget == 0 {
        return Err(Error::Incompatible("budget must be >= 1".into()));
    }
    let mut env = EnvState::new(map.clone(), radius);
    let mut steps = Vec::new();
    while !env.at_goal() && steps.len() < budget {
        let action = replanner_policy(env.partial(), env.pose(), map.goal())?;
        steps.push(Step { pose: env.pose(), action });
        env.apply(action)?;
    }
    Ok(Trajectory { map: map.clone(), seed: 0, radius, steps, success: env.at_goal() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub radius: usize,
    pub encoder_version: u32,
    pub trajectories: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub radius: usize,
    pub encoder_version: u32,
    pub trajectories: Vec<Trajectory>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryRecord {
    id: usize,
    spec: CuldesacSpec,
    seed: u64,
    success: bool,
    steps: Vec<Step>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// Line-delimited JSON: a header record, then one record per trajectory.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let header = DatasetHeader {
            format_version: DATASET_FORMAT_VERSION,
            radius: self.radius,
            encoder_version: self.encoder_version,
            trajectories: self.trajectories.len(),
        };
        writeln!(out, "{}", serde_json::to_string(&header)?)?;
        for (id, t) in self.trajectories.iter().enumerate() {
            let spec = t
                .spec()
                .ok_or_else(|| Error::Incompatible("only generated maps can be written to a dataset file".into()))?;
            let record = TrajectoryRecord { id, spec, seed: t.seed, success: t.success, steps: t.steps.clone() };
            writeln!(out, "{}", serde_json::to_string(&record)?)?;
        }
        Ok(())
    }

    /// Reads a file written by [`Dataset::write_jsonl`], regenerating each map
    /// and verifying that the recorded steps replay.
    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header_line = lines.next().ok_or_else(|| Error::Parse("empty dataset file".into()))??;
        let header: DatasetHeader = serde_json::from_str(&header_line)?;
        if header.format_version != DATASET_FORMAT_VERSION || header.encoder_version != ENCODER_VERSION {
            return Err(Error::Incompatible(format!(
                "dataset format {} / encoder {} not supported",
                header.format_version, header.encoder_version
            )));
        }
        let mut trajectories = Vec::with_capacity(header.trajectories);
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let rec: TrajectoryRecord = serde_json::from_str(&line)?;
            let map = generate_culdesac(&rec.spec, rec.seed)?;
            let t = Trajectory { map, seed: rec.seed, radius: header.radius, steps: rec.steps, success: rec.success };
            t.observations(InputKind::Sensor)?;
            if t.success != (t.final_pose() == t.map.goal()) {
                return Err(Error::Parse(format!("trajectory {} success flag does not match replay", rec.id)));
            }
            trajectories.push(t);
        }
        if trajectories.len() != header.trajectories {
            return Err(Error::Parse(format!(
                "header announces {} trajectories, found {}",
                header.trajectories,
                trajectories.len()
            )));
        }
        Ok(Dataset { radius: header.radius, encoder_version: header.encoder_version, trajectories })
    }
}

fn dataset_from_jobs(jobs: Vec<(CuldesacSpec, u64)>, radius: usize, budget: Option<usize>) -> Result<Dataset> {
    if jobs.is_empty() {
        return Err(Error::Empty("no maps to roll out"));
    }
    let trajectories = jobs
        .into_par_iter()
        .map(|(spec, seed)| {
            let map = generate_culdesac(&spec, seed)?;
            let budget = budget.unwrap_or_else(|| step_budget(&map));
            let mut t = rollout_expert(&map, radius, budget)?;
            if !t.success {
                return Err(Error::ExpertFailed(format!("{spec:?} seed {seed} within {budget} steps")));
            }
            t.seed = seed;
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { radius, encoder_version: ENCODER_VERSION, trajectories })
}

/// One expert rollout per `(spec, seed)` pair. `budget = None` applies
/// [`step_budget`]. Any failed rollout aborts generation.
pub fn build_dataset(specs: &[CuldesacSpec], seeds: &[u64], radius: usize, budget: Option<usize>) -> Result<Dataset> {
    if specs.is_empty() {
        return Err(Error::Empty("no cul-de-sac specs"));
    }
    let jobs = specs.iter().flat_map(|&s| seeds.iter().map(move |&seed| (s, seed))).collect();
    dataset_from_jobs(jobs, radius, budget)
}

/// Like [`build_dataset`], with each map's approach and margin drawn from
/// its seed via [`CuldesacSpec::sample`].
pub fn build_sampled_dataset(
    pocket_length: usize,
    seeds: &[u64],
    radius: usize,
    budget: Option<usize>,
) -> Result<Dataset> {
    let jobs = seeds.iter().map(|&s| (CuldesacSpec::sample(pocket_length, s), s)).collect();
    dataset_from_jobs(jobs, radius, budget)
}

/// Location of one step inside a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StepRef {
    pub trajectory: usize,
    pub step: usize,
}

/// Steps with bit-identical sensor input, together with the expert action
/// taken at each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AliasGroup {
    pub members: Vec<(StepRef, Action)>,
}

impl AliasGroup {
    fn action_counts(&self) -> [usize; 4] {
        let mut counts = [0; 4];
        for (_, a) in &self.members {
            counts[a.index()] += 1;
        }
        counts
    }

    /// Pairs of members with different actions.
    pub fn conflicting_pairs(&self) -> usize {
        let n = self.members.len();
        let same: usize = self.action_counts().iter().map(|c| c * c).sum();
        (n * n - same) / 2
    }

    /// Steps any single deterministic choice must get wrong.
    pub fn forced_errors(&self) -> usize {
        self.members.len() - self.action_counts().into_iter().max().unwrap_or(0)
    }
}

/// Every group of identical sensor inputs that the expert labels with more
/// than one action.
#[derive(Clone, Debug, Default)]
pub struct AliasReport {
    pub groups: Vec<AliasGroup>,
    pub total_steps: usize,
}

impl AliasReport {
    /// Number of aliased pairs.
    pub fn count(&self) -> usize {
        self.groups.iter().map(AliasGroup::conflicting_pairs).sum()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (StepRef, StepRef)> + '_ {
        self.groups.iter().flat_map(|g| {
            g.members.iter().enumerate().flat_map(move |(i, &(a, act_a))| {
                g.members[i + 1..].iter().filter(move |(_, act_b)| *act_b != act_a).map(move |&(b, _)| (a, b))
            })
        })
    }

    /// Lower bound on the step error of any memoryless deterministic policy
    /// on this dataset.
    pub fn memoryless_error_lower_bound(&self) -> f64 {
        if self.total_steps == 0 {
            return 0.0;
        }
        let forced: usize = self.groups.iter().map(AliasGroup::forced_errors).sum();
        forced as f64 / self.total_steps as f64
    }
}

fn input_key(obs: &Observation) -> Vec<u64> {
    obs.tensor.data().iter().map(|v| v.to_bits()).collect()
}

/// Exhaustive hash-grouped scan for identical sensor inputs with different
/// expert actions.
pub fn find_aliased_pairs(dataset: &Dataset) -> Result<AliasReport> {
    let mut groups: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut members: Vec<Vec<(StepRef, Action)>> = Vec::new();
    let mut total_steps = 0;
    for (ti, t) in dataset.trajectories.iter().enumerate() {
        for (si, (obs, action)) in t.observations(InputKind::Sensor)?.iter().zip(t.actions()).enumerate() {
            total_steps += 1;
            let slot = *groups.entry(input_key(obs)).or_insert_with(|| {
                members.push(Vec::new());
                members.len() - 1
            });
            members[slot].push((StepRef { trajectory: ti, step: si }, action));
        }
    }
    let groups =
        members.into_iter().map(|members| AliasGroup { members }).filter(|g| g.conflicting_pairs() > 0).collect();
    Ok(AliasReport { groups, total_steps })
}
