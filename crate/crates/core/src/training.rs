//! Behavior cloning from expert trajectories and the sparse-reward DQN loop.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::{step_budget, Dataset};
use crate::gridworld::{Action, EnvState, GridMap, Observation};
use crate::models::{features, head, Model, ModelConfig, ModelKind, ModelParams};
use crate::tensor::{argmax, clip_global_norm, AdamConfig, AdamState, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Trajectories per batch for recurrent kinds, steps per batch otherwise.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 40, batch_size: 32, learning_rate: 1e-3, seed: 0, eval_every: 5, clip_norm: 10.0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::InvalidSpec("batch_size and eval_every must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::InvalidSpec("learning_rate and clip_norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub train_error: f64,
    pub test_error: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub curve: Vec<CurvePoint>,
    /// Mean per-step training loss of each epoch, measured during the epoch.
    pub epoch_losses: Vec<f64>,
}

/// A distinct expert trajectory with its encoded inputs, weighted by how many
/// times it occurs in the dataset.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub observations: Vec<Observation>,
    pub labels: Vec<usize>,
    pub weight: f64,
}

/// Encodes every trajectory for `kind`, merging identical trajectories on
/// identical maps into one weighted sequence.
pub fn prepare_sequences(dataset: &Dataset, kind: ModelKind) -> Result<Vec<Sequence>> {
    let mut index: BTreeMap<(String, Vec<usize>), usize> = BTreeMap::new();
    let mut out: Vec<Sequence> = Vec::new();
    for traj in &dataset.trajectories {
        if traj.is_empty() {
            continue;
        }
        let labels: Vec<usize> = traj.actions().map(Action::index).collect();
        let key = (traj.map.to_text(), labels.clone());
        if let Some(&i) = index.get(&key) {
            out[i].weight += 1.0;
            continue;
        }
        index.insert(key, out.len());
        out.push(Sequence { observations: traj.observations(kind.input_kind())?, labels, weight: 1.0 });
    }
    Ok(out)
}

fn check_compatible(dataset: &Dataset, config: &ModelConfig) -> Result<()> {
    if dataset.radius != config.radius {
        return Err(Error::Incompatible(format!(
            "dataset radius {} vs model radius {}",
            dataset.radius, config.radius
        )));
    }
    if config.kind == ModelKind::Dqn {
        return Err(Error::Incompatible("DQN is trained by reinforcement, not from a dataset".into()));
    }
    Ok(())
}

/// Fraction of expert steps whose greedy action differs from the label, with
/// recurrent state advanced along the expert trajectory.
pub fn evaluate_error(dataset: &Dataset, model: &Model) -> Result<f64> {
    check_compatible(dataset, &model.config)?;
    let seqs = prepare_sequences(dataset, model.config.kind)?;
    sequence_error(&seqs, model)
}

pub fn sequence_error(seqs: &[Sequence], model: &Model) -> Result<f64> {
    let per_seq: Vec<Result<(f64, f64)>> = seqs
        .par_iter()
        .map(|s| {
            let mut hidden = model.initial_hidden();
            let mut wrong = 0usize;
            for (obs, &label) in s.observations.iter().zip(&s.labels) {
                let (out, next) = model.step(obs, &hidden)?;
                hidden = next;
                wrong += usize::from(argmax(&out.logits) != label);
            }
            Ok((s.weight * wrong as f64, s.weight * s.labels.len() as f64))
        })
        .collect();
    let (mut wrong, mut total) = (0.0, 0.0);
    for r in per_seq {
        let (w, t) = r?;
        wrong += w;
        total += t;
    }
    if total == 0.0 {
        return Err(Error::Empty("no steps to evaluate"));
    }
    Ok(wrong / total)
}

/// Weighted loss and gradients of one unit of work on a fresh tape.
fn unit_gradients(model: &Model, seqs: &[Sequence], unit: &[(usize, usize)]) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape, true);
    let obs: Vec<&Observation> = unit.iter().map(|&(s, t)| &seqs[s].observations[t]).collect();
    let labels: Vec<usize> = unit.iter().map(|&(s, t)| seqs[s].labels[t]).collect();
    let weights: Vec<f64> = unit.iter().map(|&(s, _)| seqs[s].weight).collect();
    let f = features(&mut tape, &vars, &model.config, &obs)?;
    let (logits, _) = head(&mut tape, &vars, &model.config, f, None)?;
    let loss = tape.weighted_cross_entropy(logits, &labels, &weights)?;
    let grads = tape.backward(loss, vars.vars())?;
    Ok((tape.value(loss).data()[0], grads))
}

/// Splits a batch into independently differentiable units: a whole
/// trajectory for recurrent kinds, single steps for VIN kinds, and the whole
/// batch for the convolutional kinds.
fn batch_units(
    kind: ModelKind,
    seqs: &[Sequence],
    batch: &[usize],
    steps: &[(usize, usize)],
) -> Vec<Vec<(usize, usize)>> {
    if kind.is_recurrent() {
        batch.iter().map(|&s| (0..seqs[s].labels.len()).map(|t| (s, t)).collect()).collect()
    } else if kind.is_vin() {
        batch.iter().map(|&i| vec![steps[i]]).collect()
    } else {
        vec![batch.iter().map(|&i| steps[i]).collect()]
    }
}

/// Behavior cloning with cross-entropy on expert actions. Recurrent kinds
/// unroll each trajectory from a zero state with full backpropagation
/// through time.
pub fn train_supervised(
    dataset: &Dataset,
    holdout: &Dataset,
    config: &TrainConfig,
    model_config: &ModelConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_compatible(dataset, model_config)?;
    check_compatible(holdout, model_config)?;
    let seqs = prepare_sequences(dataset, model_config.kind)?;
    if seqs.is_empty() {
        return Err(Error::Empty("training dataset has no steps"));
    }
    let held = prepare_sequences(holdout, model_config.kind)?;
    let model = Model::init(model_config.clone(), model_config.seed)?;
    train_sequences(&seqs, &held, config, model)
}

/// The training loop over prepared sequences, starting from `model`. Each
/// batch gradient is divided by the expected weight of a batch of its size,
/// so small batches stay unbiased for the weighted per-step mean.
pub fn train_sequences(
    seqs: &[Sequence],
    held: &[Sequence],
    config: &TrainConfig,
    mut model: Model,
) -> Result<TrainOutcome> {
    config.validate()?;
    let kind = model.config.kind;
    let steps: Vec<(usize, usize)> =
        seqs.iter().enumerate().flat_map(|(s, q)| (0..q.labels.len()).map(move |t| (s, t))).collect();
    if steps.is_empty() {
        return Err(Error::Empty("training dataset has no steps"));
    }
    let mut order: Vec<usize> =
        if kind.is_recurrent() { (0..seqs.len()).collect() } else { (0..steps.len()).collect() };
    let total_weight: f64 = steps.iter().map(|&(s, _)| seqs[s].weight).sum();
    let weight_per_unit = total_weight / order.len() as f64;
    let adam_config = AdamConfig { learning_rate: config.learning_rate, ..AdamConfig::default() };
    let mut adam = AdamState::new(adam_config, model.params.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut curve = Vec::new();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut epoch_loss, mut epoch_weight) = (0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            let units = batch_units(kind, seqs, batch, &steps);
            let weight: f64 = units.iter().flatten().map(|&(s, _)| seqs[s].weight).sum();
            let expected_weight = weight_per_unit * batch.len() as f64;
            let results: Vec<Result<(f64, Vec<Tensor>)>> =
                units.par_iter().map(|u| unit_gradients(&model, seqs, u)).collect();
            let mut total: Option<Vec<Tensor>> = None;
            let mut loss = 0.0;
            for r in results {
                let (l, g) = r?;
                loss += l;
                match &mut total {
                    None => total = Some(g),
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
                }
            }
            let mut grads = total.expect("non-empty batch");
            grads.iter_mut().for_each(|g| g.scale(1.0 / expected_weight));
            clip_global_norm(&mut grads, config.clip_norm);
            adam.update(model.params.tensors_mut(), &grads)?;
            epoch_loss += loss;
            epoch_weight += weight;
        }
        epoch_losses.push(epoch_loss / epoch_weight);
        if epoch % config.eval_every == 0 || epoch == config.epochs {
            let train_error = sequence_error(seqs, &model)?;
            let test_error = if held.is_empty() { train_error } else { sequence_error(held, &model)? };
            curve.push(CurvePoint { epoch, train_error, test_error });
        }
    }
    Ok(TrainOutcome { model, curve, epoch_losses })
}

pub fn write_curve_csv<W: Write>(curve: &[CurvePoint], mut out: W) -> Result<()> {
    writeln!(out, "epoch,train_error,test_error")?;
    for p in curve {
        writeln!(out, "{},{},{}", p.epoch, p.train_error, p.test_error)?;
    }
    Ok(())
}

pub fn write_reward_csv<W: Write>(returns: &[f64], mut out: W) -> Result<()> {
    writeln!(out, "episode,return")?;
    for (i, r) in returns.iter().enumerate() {
        writeln!(out, "{},{}", i + 1, r)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub input: Tensor,
    pub action: Action,
    /// 1 exactly when the step reached the goal.
    pub reward: f64,
    pub next_input: Tensor,
    pub terminal: bool,
}

/// Fixed-capacity FIFO of transitions with a seeded uniform sampler.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// `n` draws with replacement.
    pub fn sample(&mut self, n: usize) -> Vec<&Transition> {
        if self.items.is_empty() {
            return Vec::new();
        }
        let idx: Vec<usize> = (0..n).map(|_| self.rng.gen_range(0..self.items.len())).collect();
        idx.into_iter().map(|i| &self.items[i]).collect()
    }
}

/// Uniform action with probability `epsilon`, otherwise the argmax (lowest
/// index on ties).
pub fn epsilon_greedy<R: Rng>(q_values: &[f64], epsilon: f64, rng: &mut R) -> Action {
    assert!((0.0..=1.0).contains(&epsilon), "epsilon must lie in [0, 1]");
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        Action::ALL[rng.gen_range(0..Action::COUNT)]
    } else {
        Action::from_index(argmax(q_values)).expect("four action values")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DqnConfig {
    /// Environment steps.
    pub budget: usize,
    pub discount: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Share of the budget over which epsilon decays linearly.
    pub epsilon_decay_fraction: f64,
    pub target_sync: usize,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub learning_rate: f64,
    /// Environment steps before the first update.
    pub learning_starts: usize,
    /// Environment steps between updates.
    pub train_every: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for DqnConfig {
    fn default() -> Self {
        DqnConfig {
            budget: 200_000,
            discount: 0.99,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.5,
            target_sync: 1000,
            batch_size: 32,
            replay_capacity: 100_000,
            learning_rate: 1e-3,
            learning_starts: 1000,
            train_every: 4,
            clip_norm: 10.0,
            seed: 0,
        }
    }
}

impl DqnConfig {
    pub fn epsilon_at(&self, step: usize) -> f64 {
        let horizon = (self.budget as f64 * self.epsilon_decay_fraction).max(1.0);
        let t = (step as f64 / horizon).min(1.0);
        self.epsilon_start + t * (self.epsilon_end - self.epsilon_start)
    }
}

#[derive(Clone, Debug)]
pub struct DqnOutcome {
    pub model: Model,
    /// Undiscounted return of every finished or truncated episode.
    pub returns: Vec<f64>,
}

/// Squared TD error summed over a minibatch, and its gradients.
pub fn td_loss_gradients(
    online: &Model,
    target: &ModelParams,
    batch: &[&Transition],
    discount: f64,
) -> Result<(f64, Vec<Tensor>)> {
    let next_obs: Vec<Observation> = batch.iter().map(|t| sensor_obs(&t.next_input)).collect();
    let mut t_tape = Tape::new();
    let t_vars = target.bind(&mut t_tape, false);
    let refs: Vec<&Observation> = next_obs.iter().collect();
    let tf = features(&mut t_tape, &t_vars, &online.config, &refs)?;
    let (tq, _) = head(&mut t_tape, &t_vars, &online.config, tf, None)?;
    let tq = t_tape.value(tq).data();
    let targets: Vec<f64> = batch
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let best = tq[i * 4..i * 4 + 4].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            t.reward + if t.terminal { 0.0 } else { discount * best }
        })
        .collect();

    let obs: Vec<Observation> = batch.iter().map(|t| sensor_obs(&t.input)).collect();
    let mut tape = Tape::new();
    let vars = online.params.bind(&mut tape, true);
    let refs: Vec<&Observation> = obs.iter().collect();
    let f = features(&mut tape, &vars, &online.config, &refs)?;
    let (q, _) = head(&mut tape, &vars, &online.config, f, None)?;
    let actions: Vec<usize> = batch.iter().map(|t| t.action.index()).collect();
    let chosen = tape.gather(q, &actions)?;
    let y = tape.constant(Tensor::vector(targets));
    let diff = tape.sub(chosen, y)?;
    let sq = tape.mul(diff, diff)?;
    let loss = tape.sum(sq);
    let grads = tape.backward(loss, vars.vars())?;
    Ok((tape.value(loss).data()[0], grads))
}

fn sensor_obs(t: &Tensor) -> Observation {
    let r = t.shape()[1] / 2;
    Observation { tensor: t.clone(), attention: crate::gridworld::Pose::new(r, r) }
}

/// Epsilon-greedy Q-learning with replay and a periodically synced target
/// network. Reward is 1 on reaching the goal and 0 otherwise; episodes end
/// at the goal or after the map's step budget.
pub fn dqn_train(map: &GridMap, model_config: &ModelConfig, config: &DqnConfig) -> Result<DqnOutcome> {
    if model_config.kind != ModelKind::Dqn {
        return Err(Error::Incompatible(format!("dqn_train needs a dqn model, got {}", model_config.kind)));
    }
    if config.budget < 1000 {
        return Err(Error::InvalidSpec("DQN budget must be at least 1000 steps".into()));
    }
    let mut model = Model::init(model_config.clone(), model_config.seed)?;
    let mut target = model.params.clone();
    let mut adam = AdamState::new(
        AdamConfig { learning_rate: config.learning_rate, ..AdamConfig::default() },
        model.params.tensors(),
    );
    let mut replay = ReplayBuffer::new(config.replay_capacity, config.seed.wrapping_add(1));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let episode_limit = step_budget(map);
    let mut returns = Vec::new();

    let mut env = EnvState::new(map.clone(), model_config.radius);
    let mut input = env.sensor_input();
    let mut episode_steps = 0;
    for step in 0..config.budget {
        let q = crate::models::dqn_forward(&input, &model.params)?;
        let action = epsilon_greedy(&q, config.epsilon_at(step), &mut rng);
        env.apply(action)?;
        episode_steps += 1;
        let terminal = env.at_goal();
        let next_input = env.sensor_input();
        let reward = if terminal { 1.0 } else { 0.0 };
        replay.push(Transition { input, action, reward, next_input: next_input.clone(), terminal });
        input = next_input;
        if terminal || episode_steps >= episode_limit {
            returns.push(reward);
            env = EnvState::new(map.clone(), model_config.radius);
            input = env.sensor_input();
            episode_steps = 0;
        }
        if step + 1 >= config.learning_starts && (step + 1) % config.train_every == 0 {
            let batch = replay.sample(config.batch_size);
            let (_, mut grads) = td_loss_gradients(&model, &target, &batch, config.discount)?;
            grads.iter_mut().for_each(|g| g.scale(1.0 / batch.len() as f64));
            clip_global_norm(&mut grads, config.clip_norm);
            adam.update(model.params.tensors_mut(), &grads)?;
        }
        if (step + 1) % config.target_sync == 0 {
            target = model.params.clone();
        }
    }
    Ok(DqnOutcome { model, returns })
}
