//! Policy architectures: CNN, CNN+LSTM, VIN, VIN+LSTM, VIN over the partial
//! map, and the DQN value network.
//!
//! Parameters live in a [`ModelParams`] store keyed by dotted names. Training
//! binds them onto a [`Tape`] with [`ModelParams::bind`] and calls
//! [`features`] and [`head`]; closed-loop use goes through [`Model::step`],
//! which runs the value-iteration trunk without recording a tape.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::gridworld::{Action, InputKind, Observation, Pose};
use crate::tensor::{argmax, conv2d_forward, pad_ring, Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NAVCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Cnn,
    CnnLstm,
    Vin,
    VinLstm,
    #[serde(rename = "vin_partialmap")]
    VinPartialMap,
    Dqn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Cnn,
        ModelKind::CnnLstm,
        ModelKind::Vin,
        ModelKind::VinLstm,
        ModelKind::VinPartialMap,
        ModelKind::Dqn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Cnn => "cnn",
            ModelKind::CnnLstm => "cnn_lstm",
            ModelKind::Vin => "vin",
            ModelKind::VinLstm => "vin_lstm",
            ModelKind::VinPartialMap => "vin_partialmap",
            ModelKind::Dqn => "dqn",
        }
    }

    pub fn input_kind(self) -> InputKind {
        match self {
            ModelKind::VinPartialMap => InputKind::PartialMap,
            _ => InputKind::Sensor,
        }
    }

    pub fn is_recurrent(self) -> bool {
        matches!(self, ModelKind::CnnLstm | ModelKind::VinLstm)
    }

    pub fn is_vin(self) -> bool {
        matches!(self, ModelKind::Vin | ModelKind::VinLstm | ModelKind::VinPartialMap)
    }

    fn trunk_prefix(self) -> &'static str {
        match self {
            ModelKind::Dqn => "dqn",
            k if k.is_vin() => "vin",
            _ => "cnn",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    /// Case-insensitive; `-` and `_` are interchangeable.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == norm || (norm == "vin_partial_map" && *k == ModelKind::VinPartialMap))
            .ok_or_else(|| Error::Parse(format!("unknown model kind {s:?}")))
    }
}

/// Number of value-iteration sweeps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ViIterations {
    /// `2·(H+W)` of the grid being planned over.
    #[default]
    Auto,
    Fixed(usize),
}

impl ViIterations {
    pub fn resolve(self, height: usize, width: usize) -> usize {
        match self {
            ViIterations::Auto => 2 * (height + width),
            ViIterations::Fixed(k) => k,
        }
    }
}

impl Serialize for ViIterations {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ViIterations::Auto => s.serialize_str("auto"),
            ViIterations::Fixed(k) => s.serialize_u64(*k as u64),
        }
    }
}

impl<'de> Deserialize<'de> for ViIterations {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(usize),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(k) => Ok(ViIterations::Fixed(k)),
            Raw::S(s) if s.eq_ignore_ascii_case("auto") => Ok(ViIterations::Auto),
            Raw::S(s) => Err(serde::de::Error::custom(format!("expected \"auto\" or a count, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub vi_iterations: ViIterations,
    pub q_channels: usize,
    pub hidden_size: usize,
    pub conv_widths: [usize; 2],
    pub fc_width: usize,
    pub radius: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::VinPartialMap,
            vi_iterations: ViIterations::Auto,
            q_channels: 10,
            hidden_size: 256,
            conv_widths: [32, 64],
            fc_width: 128,
            radius: 3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn new(kind: ModelKind) -> Self {
        ModelConfig { kind, ..ModelConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("q_channels", self.q_channels),
            ("hidden_size", self.hidden_size),
            ("conv_widths[0]", self.conv_widths[0]),
            ("conv_widths[1]", self.conv_widths[1]),
            ("fc_width", self.fc_width),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidSpec(format!("{name} must be positive")));
        }
        if self.vi_iterations == ViIterations::Fixed(0) {
            return Err(Error::InvalidSpec("vi_iterations must be positive".into()));
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        match self.kind.input_kind() {
            InputKind::Sensor => 2,
            InputKind::PartialMap => 3,
        }
    }

    pub fn patch_side(&self) -> usize {
        2 * self.radius + 1
    }
}

/// Pad values for an encoded input: occupancy reads as wall, the rest as 0.
pub fn input_pad(channels: usize) -> Vec<f64> {
    let mut pad = vec![0.0; channels];
    pad[0] = 1.0;
    pad
}

/// Named parameter tensors, kept sorted by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn from_map(map: BTreeMap<String, Tensor>) -> Self {
        let (names, tensors) = map.into_iter().unzip();
        ModelParams { names, tensors }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    fn position(&self, name: &str) -> Result<usize> {
        self.names
            .binary_search_by(|n| n.as_str().cmp(name))
            .map_err(|_| Error::Incompatible(format!("missing parameter {name}")))
    }

    /// True when both stores hold the same names with the same shapes.
    pub fn same_layout(&self, other: &ModelParams) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    /// Records every tensor on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        ParamVars { names: self.names.clone(), vars }
    }
}

/// Tape handles for a bound [`ModelParams`], in the same sorted order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.names
            .binary_search_by(|n| n.as_str().cmp(name))
            .map(|i| self.vars[i])
            .map_err(|_| Error::Incompatible(format!("missing parameter {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

struct Init {
    rng: ChaCha8Rng,
    map: BTreeMap<String, Tensor>,
}

impl Init {
    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.map.insert(name, Tensor::from_vec(shape.to_vec(), data));
    }

    fn conv(&mut self, prefix: &str, out: usize, input: usize) {
        self.uniform(format!("{prefix}.kernel"), &[out, input, 3, 3], input * 9);
        self.uniform(format!("{prefix}.bias"), &[out], input * 9);
    }

    fn linear(&mut self, prefix: &str, out: usize, input: usize) {
        self.uniform(format!("{prefix}.weight"), &[out, input], input);
        self.uniform(format!("{prefix}.bias"), &[out], input);
    }

    fn lstm(&mut self, input: usize, hidden: usize) {
        self.uniform("lstm.weight".into(), &[4 * hidden, input + hidden], input + hidden);
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].fill(1.0);
        self.map.insert("lstm.bias".into(), Tensor::vector(bias));
    }
}

/// Seeded initialization: fan-in scaled uniform weights, LSTM forget-gate
/// bias +1.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed), map: BTreeMap::new() };
    let c = config.input_channels();
    let q = config.q_channels;
    let hs = config.hidden_size;
    let kind = config.kind;
    let feature = if kind.is_vin() {
        init.conv("vin.reward", 1, c);
        // one conv over the stacked (R, V) planes, stored as two kernels
        init.uniform("vin.q_conv.reward_kernel".into(), &[q, 1, 3, 3], 18);
        init.uniform("vin.q_conv.value_kernel".into(), &[q, 1, 3, 3], 18);
        init.uniform("vin.q_conv.bias".into(), &[q], 18);
        q
    } else {
        let p = kind.trunk_prefix();
        let [w1, w2] = config.conv_widths;
        let side = config.patch_side();
        init.conv(&format!("{p}.conv1"), w1, c);
        init.conv(&format!("{p}.conv2"), w2, w1);
        init.linear(&format!("{p}.fc"), config.fc_width, w2 * side * side);
        config.fc_width
    };
    if kind.is_recurrent() {
        init.lstm(feature, hs);
        init.linear("head", 4, hs);
    } else {
        init.linear(&format!("{}.out", kind.trunk_prefix()), 4, feature);
    }
    Ok(ModelParams::from_map(init.map))
}

/// Parameters that make a VIN with `q_channels = 4` over the two-channel
/// (occupancy, goal) input compute exact value iteration with reward
/// `10·goal − 1 − 100·occupancy`: channel `a` reads `R + V` at the neighbor
/// reached by action `a`, and the output layer is the identity.
pub fn handcrafted_vi_params() -> ModelParams {
    let mut map = BTreeMap::new();
    let mut reward = vec![0.0; 18];
    reward[4] = -100.0;
    reward[9 + 4] = 10.0;
    map.insert("vin.reward.kernel".to_string(), Tensor::from_vec(vec![1, 2, 3, 3], reward));
    map.insert("vin.reward.bias".to_string(), Tensor::vector(vec![-1.0]));
    let mut shift = vec![0.0; 36];
    for a in Action::ALL {
        let (di, dj) = a.delta();
        shift[a.index() * 9 + ((1 + di) * 3 + 1 + dj) as usize] = 1.0;
    }
    map.insert("vin.q_conv.reward_kernel".to_string(), Tensor::from_vec(vec![4, 1, 3, 3], shift.clone()));
    map.insert("vin.q_conv.value_kernel".to_string(), Tensor::from_vec(vec![4, 1, 3, 3], shift));
    map.insert("vin.q_conv.bias".to_string(), Tensor::zeros(&[4]));
    let mut eye = vec![0.0; 16];
    for i in 0..4 {
        eye[i * 5] = 1.0;
    }
    map.insert("vin.out.weight".to_string(), Tensor::from_vec(vec![4, 4], eye));
    map.insert("vin.out.bias".to_string(), Tensor::zeros(&[4]));
    ModelParams::from_map(map)
}

/// Plain dynamic programming for the recurrence realized by
/// [`handcrafted_vi_params`]: `V'(s) = max_a [R(s+δa) + V(s+δa)]`, `V = 0`
/// initially, with the grid surrounded by a ring of wall cells and nothing
/// (zero) beyond the ring. Returns the `H × W` values after `k` sweeps.
pub fn tabular_vi_oracle(occupied: &[bool], height: usize, width: usize, goal: Pose, k: usize) -> Tensor {
    assert_eq!(occupied.len(), height * width, "occupancy size");
    let (ph, pw) = (height + 2, width + 2);
    let mut reward = vec![0.0; ph * pw];
    for r in 0..ph {
        for c in 0..pw {
            let inside = (1..=height).contains(&r) && (1..=width).contains(&c);
            let occ = !inside || occupied[(r - 1) * width + c - 1];
            let is_goal = inside && goal == Pose::new(r - 1, c - 1);
            reward[r * pw + c] = 10.0 * f64::from(u8::from(is_goal)) - 1.0 - 100.0 * f64::from(u8::from(occ));
        }
    }
    let mut v = vec![0.0; ph * pw];
    for _ in 0..k {
        let mut next = vec![f64::NEG_INFINITY; ph * pw];
        for r in 0..ph as isize {
            for c in 0..pw as isize {
                for a in Action::ALL {
                    let (dr, dc) = a.delta();
                    let (nr, nc) = (r + dr, c + dc);
                    let gain = if nr < 0 || nc < 0 || nr >= ph as isize || nc >= pw as isize {
                        0.0
                    } else {
                        let j = nr as usize * pw + nc as usize;
                        reward[j] + v[j]
                    };
                    let cell = &mut next[r as usize * pw + c as usize];
                    *cell = cell.max(gain);
                }
            }
        }
        v = next;
    }
    let data = (1..=height).flat_map(|r| v[r * pw + 1..r * pw + 1 + width].to_vec()).collect();
    Tensor::from_vec(vec![height, width], data)
}

/// Recurrent state carried between steps. Empty for feedforward kinds.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HiddenState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl HiddenState {
    pub fn zeros(size: usize) -> Self {
        HiddenState { h: vec![0.0; size], c: vec![0.0; size] }
    }

    pub fn empty() -> Self {
        HiddenState::default()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    /// The episode-start state for a model.
    pub fn initial(config: &ModelConfig) -> Self {
        if config.kind.is_recurrent() {
            HiddenState::zeros(config.hidden_size)
        } else {
            HiddenState::empty()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    /// In [`Action`] index order.
    pub logits: [f64; 4],
    pub attended_q: Option<Vec<f64>>,
}

impl PolicyOutput {
    pub fn greedy(&self) -> Action {
        Action::from_index(argmax(&self.logits)).expect("four logits")
    }
}

/// The value-iteration planes of one forward pass, on the ring-padded grid.
#[derive(Clone, Debug)]
pub struct VinPlanes {
    /// `q × (H+2) × (W+2)` from the last sweep.
    pub q: Tensor,
    /// `(H+2) × (W+2)` after the last sweep.
    pub values: Tensor,
}

impl VinPlanes {
    /// Values restricted to the original `H × W` cells.
    pub fn interior_values(&self) -> Tensor {
        let [h, w] = self.values.shape()[..] else { unreachable!() };
        let data = (1..h - 1).flat_map(|r| self.values.data()[r * w + 1..r * w + w - 1].iter().copied()).collect();
        Tensor::from_vec(vec![h - 2, w - 2], data)
    }

    /// The q-channel vector at an original-grid cell.
    pub fn attend(&self, at: Pose) -> Result<Vec<f64>> {
        let [c, h, w] = self.q.shape()[..] else { unreachable!() };
        if at.row + 2 >= h || at.col + 2 >= w {
            return Err(Error::OutOfBounds(format!("attention at {at:?} in {}×{}", h - 2, w - 2)));
        }
        let idx = (at.row + 1) * w + at.col + 1;
        Ok((0..c).map(|ch| self.q.data()[ch * h * w + idx]).collect())
    }
}

fn vin_shapes(input: &Tensor, params: &ModelParams) -> Result<(usize, usize, usize)> {
    let [c, h, w] = input.shape()[..] else {
        return Err(Error::Shape(format!("VIN input {:?}", input.shape())));
    };
    let kc = params.get("vin.reward.kernel")?.shape()[1];
    if kc != c {
        return Err(Error::Shape(format!("VIN expects {kc} input channels, got {c}")));
    }
    Ok((c, h, w))
}

/// Runs `k` sweeps without recording a tape.
pub fn vin_planes(input: &Tensor, params: &ModelParams, k: usize) -> Result<VinPlanes> {
    if k == 0 {
        return Err(Error::InvalidSpec("VIN needs at least one sweep".into()));
    }
    let (c, _, _) = vin_shapes(input, params)?;
    let pad = input_pad(c);
    let x = pad_ring(input, &pad);
    let r = conv2d_forward(&x, params.get("vin.reward.kernel")?, params.get("vin.reward.bias")?, &pad);
    let q_bias = params.get("vin.q_conv.bias")?;
    let value_kernel = params.get("vin.q_conv.value_kernel")?;
    let zero_bias = Tensor::zeros(q_bias.shape());
    let rq = conv2d_forward(&r, params.get("vin.q_conv.reward_kernel")?, q_bias, &[0.0]);
    let mut q = rq.clone();
    let mut values = channel_max_values(&q);
    for _ in 1..k {
        q = conv2d_forward(&values, value_kernel, &zero_bias, &[0.0]);
        q.add_assign(&rq);
        values = channel_max_values(&q);
    }
    let [_, h, w] = q.shape()[..] else { unreachable!() };
    Ok(VinPlanes { values: values.reshape(vec![h, w])?, q })
}

fn channel_max_values(q: &Tensor) -> Tensor {
    let [c, h, w] = q.shape()[..] else { unreachable!() };
    let hw = h * w;
    let d = q.data();
    let mut v = d[..hw].to_vec();
    for ch in 1..c {
        for (m, &x) in v.iter_mut().zip(&d[ch * hw..(ch + 1) * hw]) {
            if x > *m {
                *m = x;
            }
        }
    }
    Tensor::from_vec(vec![1, h, w], v)
}

fn linear_forward(weight: &Tensor, bias: &Tensor, x: &[f64]) -> Vec<f64> {
    let n = x.len();
    weight
        .data()
        .chunks(n)
        .zip(bias.data())
        .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect()
}

fn logits4(v: Vec<f64>) -> Result<[f64; 4]> {
    let n = v.len();
    v.try_into().map_err(|_| Error::Shape(format!("expected 4 logits, got {n}")))
}

/// VIN policy on one input, attention at `attention_at` of the unpadded grid.
pub fn vin_forward(input: &Tensor, attention_at: Pose, params: &ModelParams, k: usize) -> Result<PolicyOutput> {
    let planes = vin_planes(input, params, k)?;
    let attended = planes.attend(attention_at)?;
    let logits = linear_forward(params.get("vin.out.weight")?, params.get("vin.out.bias")?, &attended);
    Ok(PolicyOutput { logits: logits4(logits)?, attended_q: Some(attended) })
}

/// VIN trunk, then an LSTM cell on the attended vector, then a linear head.
pub fn vin_lstm_forward(
    input: &Tensor,
    attention_at: Pose,
    hidden: &HiddenState,
    params: &ModelParams,
    k: usize,
) -> Result<(PolicyOutput, HiddenState)> {
    let attended = vin_planes(input, params, k)?.attend(attention_at)?;
    let (logits, next) = recurrent_head(&attended, hidden, params)?;
    Ok((PolicyOutput { logits, attended_q: Some(attended) }, next))
}

fn recurrent_head(feature: &[f64], hidden: &HiddenState, params: &ModelParams) -> Result<([f64; 4], HiddenState)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let x = tape.constant(Tensor::vector(feature.to_vec()));
    let h = tape.constant(Tensor::vector(hidden.h.clone()));
    let c = tape.constant(Tensor::vector(hidden.c.clone()));
    let (h2, c2) = tape.lstm_cell(x, h, c, vars.get("lstm.weight")?, vars.get("lstm.bias")?)?;
    let logits = tape.linear(h2, vars.get("head.weight")?, vars.get("head.bias")?)?;
    let next = HiddenState { h: tape.value(h2).data().to_vec(), c: tape.value(c2).data().to_vec() };
    Ok((logits4(tape.value(logits).data().to_vec())?, next))
}

fn cnn_features_value(prefix: &str, input: &Tensor, params: &ModelParams) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let x = tape.constant(input.clone());
    let f = cnn_trunk(&mut tape, &vars, prefix, x)?;
    Ok(tape.value(f).data().to_vec())
}

/// Convolutional policy on a `2 × (2r+1) × (2r+1)` patch.
pub fn cnn_forward(input: &Tensor, params: &ModelParams) -> Result<PolicyOutput> {
    let f = cnn_features_value("cnn", input, params)?;
    let logits = linear_forward(params.get("cnn.out.weight")?, params.get("cnn.out.bias")?, &f);
    Ok(PolicyOutput { logits: logits4(logits)?, attended_q: None })
}

pub fn cnn_lstm_forward(
    input: &Tensor,
    hidden: &HiddenState,
    params: &ModelParams,
) -> Result<(PolicyOutput, HiddenState)> {
    let f = cnn_features_value("cnn", input, params)?;
    let (logits, next) = recurrent_head(&f, hidden, params)?;
    Ok((PolicyOutput { logits, attended_q: None }, next))
}

/// Action values from the convolutional trunk, no softmax.
pub fn dqn_forward(input: &Tensor, params: &ModelParams) -> Result<[f64; 4]> {
    let f = cnn_features_value("dqn", input, params)?;
    logits4(linear_forward(params.get("dqn.out.weight")?, params.get("dqn.out.bias")?, &f))
}

/// conv → relu → conv → relu → flatten → linear → relu. `x` is `C×S×S` or
/// `N×C×S×S`; the result is `[F]` or `[N, F]`.
fn cnn_trunk(tape: &mut Tape, vars: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let c = shape[shape.len() - 3];
    let h1 = tape.conv2d(
        x,
        vars.get(&format!("{prefix}.conv1.kernel"))?,
        vars.get(&format!("{prefix}.conv1.bias"))?,
        &input_pad(c),
    )?;
    let h1 = tape.relu(h1);
    let w1 = tape.value(vars.get(&format!("{prefix}.conv2.kernel"))?).shape()[1];
    let h2 = tape.conv2d(
        h1,
        vars.get(&format!("{prefix}.conv2.kernel"))?,
        vars.get(&format!("{prefix}.conv2.bias"))?,
        &vec![0.0; w1],
    )?;
    let h2 = tape.relu(h2);
    let flat_shape =
        if shape.len() == 4 { vec![shape[0], tape.value(h2).len() / shape[0]] } else { vec![tape.value(h2).len()] };
    let flat = tape.reshape(h2, flat_shape)?;
    let fc = tape.linear(flat, vars.get(&format!("{prefix}.fc.weight"))?, vars.get(&format!("{prefix}.fc.bias"))?)?;
    Ok(tape.relu(fc))
}

/// The attended q-vector of a VIN, recorded on the tape.
fn vin_trunk(tape: &mut Tape, vars: &ParamVars, obs: &Observation, k: usize) -> Result<Var> {
    let [c, _, _] = obs.tensor.shape()[..] else {
        return Err(Error::Shape(format!("VIN input {:?}", obs.tensor.shape())));
    };
    let pad = input_pad(c);
    let x = tape.constant(pad_ring(&obs.tensor, &pad));
    let r = tape.conv2d(x, vars.get("vin.reward.kernel")?, vars.get("vin.reward.bias")?, &pad)?;
    let q_bias = vars.get("vin.q_conv.bias")?;
    let value_kernel = vars.get("vin.q_conv.value_kernel")?;
    let zero_bias = tape.constant(Tensor::zeros(tape.value(q_bias).shape()));
    let rq = tape.conv2d(r, vars.get("vin.q_conv.reward_kernel")?, q_bias, &[0.0])?;
    let mut q = rq;
    for _ in 1..k {
        let v = tape.channel_max(q)?;
        let vq = tape.conv2d(v, value_kernel, zero_bias, &[0.0])?;
        q = tape.add(rq, vq)?;
    }
    tape.attend(q, obs.attention.row + 1, obs.attention.col + 1)
}

/// Per-observation feature vectors stacked as `[N, F]`: the attended
/// q-vector for VIN kinds, the fully connected trunk output otherwise.
pub fn features(tape: &mut Tape, vars: &ParamVars, config: &ModelConfig, observations: &[&Observation]) -> Result<Var> {
    let first = observations.first().ok_or(Error::Empty("no observations"))?;
    if config.kind.is_vin() {
        let mut parts = Vec::with_capacity(observations.len());
        for obs in observations {
            let [_, h, w] = obs.tensor.shape()[..] else {
                return Err(Error::Shape(format!("VIN input {:?}", obs.tensor.shape())));
            };
            let k = config.vi_iterations.resolve(h, w);
            parts.push(vin_trunk(tape, vars, obs, k)?);
        }
        let f = tape.value(parts[0]).len();
        let stacked = tape.concat(&parts);
        tape.reshape(stacked, vec![observations.len(), f])
    } else {
        let shape = first.tensor.shape();
        let side = config.patch_side();
        if shape != [config.input_channels(), side, side] {
            return Err(Error::Shape(format!(
                "expected {}×{side}×{side} patch, got {shape:?}",
                config.input_channels()
            )));
        }
        let mut data = Vec::with_capacity(observations.len() * first.tensor.len());
        for obs in observations {
            if obs.tensor.shape() != shape {
                return Err(Error::Shape("mixed patch shapes in batch".into()));
            }
            data.extend_from_slice(obs.tensor.data());
        }
        let mut batch_shape = vec![observations.len()];
        batch_shape.extend_from_slice(shape);
        let x = tape.constant(Tensor::from_vec(batch_shape, data));
        cnn_trunk(tape, vars, config.kind.trunk_prefix(), x)
    }
}

/// Maps `[N, F]` features to `[N, 4]` logits. Recurrent kinds treat the rows
/// as consecutive steps starting from `hidden`, and also return the final
/// `(h, c)`.
pub fn head(
    tape: &mut Tape,
    vars: &ParamVars,
    config: &ModelConfig,
    features: Var,
    hidden: Option<(Var, Var)>,
) -> Result<(Var, Option<(Var, Var)>)> {
    if !config.kind.is_recurrent() {
        let p = config.kind.trunk_prefix();
        let logits =
            tape.linear(features, vars.get(&format!("{p}.out.weight"))?, vars.get(&format!("{p}.out.bias"))?)?;
        return Ok((logits, None));
    }
    let [n, f] = tape.value(features).shape()[..] else {
        return Err(Error::Shape("head expects [N, F] features".into()));
    };
    let (mut h, mut c) = match hidden {
        Some(hc) => hc,
        None => {
            let z = Tensor::zeros(&[config.hidden_size]);
            (tape.constant(z.clone()), tape.constant(z))
        }
    };
    let (w, b) = (vars.get("lstm.weight")?, vars.get("lstm.bias")?);
    let mut hs = Vec::with_capacity(n);
    for t in 0..n {
        let x = tape.slice(features, t * f, f)?;
        (h, c) = tape.lstm_cell(x, h, c, w, b)?;
        hs.push(h);
    }
    let stacked = tape.concat(&hs);
    let stacked = tape.reshape(stacked, vec![n, config.hidden_size])?;
    let logits = tape.linear(stacked, vars.get("head.weight")?, vars.get("head.bias")?)?;
    Ok((logits, Some((h, c))))
}

/// A configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self> {
        let expected = init_params(&config, 0)?;
        if !expected.same_layout(&params) {
            return Err(Error::Incompatible(format!("parameters do not match a {} model", config.kind)));
        }
        Ok(Model { config, params })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Model { config, params })
    }

    pub fn initial_hidden(&self) -> HiddenState {
        HiddenState::initial(&self.config)
    }

    /// One closed-loop step. For DQN the logits are the action values.
    pub fn step(&self, obs: &Observation, hidden: &HiddenState) -> Result<(PolicyOutput, HiddenState)> {
        let k = || {
            let s = obs.tensor.shape();
            self.config.vi_iterations.resolve(s[s.len() - 2], s[s.len() - 1])
        };
        match self.config.kind {
            ModelKind::Vin | ModelKind::VinPartialMap => {
                Ok((vin_forward(&obs.tensor, obs.attention, &self.params, k())?, HiddenState::empty()))
            }
            ModelKind::VinLstm => vin_lstm_forward(&obs.tensor, obs.attention, hidden, &self.params, k()),
            ModelKind::Cnn => Ok((cnn_forward(&obs.tensor, &self.params)?, HiddenState::empty())),
            ModelKind::CnnLstm => cnn_lstm_forward(&obs.tensor, hidden, &self.params),
            ModelKind::Dqn => {
                let q = dqn_forward(&obs.tensor, &self.params)?;
                Ok((PolicyOutput { logits: q, attended_q: None }, HiddenState::empty()))
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format_version: u32,
    config: ModelConfig,
    params: Vec<CheckpointEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

/// Magic, one JSON header line, then little-endian `f64` data in name order.
pub fn write_checkpoint<W: Write>(model: &Model, mut out: W) -> Result<()> {
    let mut offset = 0u64;
    let params = model
        .params
        .iter()
        .map(|(name, t)| {
            let e = CheckpointEntry { name: name.to_string(), shape: t.shape().to_vec(), offset };
            offset += 8 * t.len() as u64;
            e
        })
        .collect();
    let header = CheckpointHeader { format_version: CHECKPOINT_VERSION, config: model.config.clone(), params };
    out.write_all(CHECKPOINT_MAGIC)?;
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for t in model.params.tensors() {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Model> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Parse("not a checkpoint (bad magic)".into()));
    }
    let nl = bytes[8..]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Parse("unterminated checkpoint header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..8 + nl])?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible(format!("checkpoint version {}", header.format_version)));
    }
    let data = &bytes[8 + nl + 1..];
    let mut map = BTreeMap::new();
    let mut expected_offset = 0u64;
    for e in header.params {
        let n: usize = e.shape.iter().product();
        if e.offset != expected_offset || (e.offset as usize) + 8 * n > data.len() {
            return Err(Error::Parse(format!("bad offset for {}", e.name)));
        }
        let start = e.offset as usize;
        let values = data[start..start + 8 * n]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        expected_offset += 8 * n as u64;
        map.insert(e.name, Tensor::try_from_vec(e.shape, values)?);
    }
    if expected_offset as usize != data.len() {
        return Err(Error::Parse("trailing bytes after checkpoint data".into()));
    }
    Model::new(header.config, ModelParams::from_map(map))
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(model, std::io::BufWriter::new(file))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{generate_culdesac, CuldesacSpec, EnvState};

    fn sensor_obs() -> Observation {
        let map = generate_culdesac(&CuldesacSpec::default(), 0).unwrap();
        EnvState::new(map, 3).observe(InputKind::Sensor)
    }

    #[test]
    fn init_is_seeded() {
        for kind in ModelKind::ALL {
            let cfg = ModelConfig::new(kind);
            let a = init_params(&cfg, 7).unwrap();
            assert_eq!(a, init_params(&cfg, 7).unwrap());
            assert_ne!(a, init_params(&cfg, 8).unwrap());
        }
    }

    #[test]
    fn vin_lstm_parameter_count() {
        let p = init_params(&ModelConfig::new(ModelKind::VinLstm), 0).unwrap();
        let (c, q, h) = (2, 10, 256);
        let reward = c * 9 + 1;
        let q_conv = 2 * q * 9 + q;
        let lstm = 4 * h * (q + h) + 4 * h;
        let head = 4 * h + 4;
        assert_eq!(p.count(), reward + q_conv + lstm + head);
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let p = init_params(&ModelConfig::new(ModelKind::CnnLstm), 3).unwrap();
        let b = p.get("lstm.bias").unwrap().data();
        assert!(b[..256].iter().all(|&v| v == 0.0));
        assert!(b[256..512].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn kind_names_round_trip() {
        for kind in ModelKind::ALL {
            assert_eq!(kind.name().parse::<ModelKind>().unwrap(), kind);
            assert_eq!(kind.name().to_uppercase().parse::<ModelKind>().unwrap(), kind);
        }
        assert!("mlp".parse::<ModelKind>().is_err());
    }

    #[test]
    fn vi_iterations_serde() {
        let cfg: ModelConfig = toml::from_str("vi_iterations = \"auto\"").unwrap();
        assert_eq!(cfg.vi_iterations, ViIterations::Auto);
        let cfg: ModelConfig = toml::from_str("vi_iterations = 12").unwrap();
        assert_eq!(cfg.vi_iterations, ViIterations::Fixed(12));
        assert!(toml::from_str::<ModelConfig>("vi_iterations = \"many\"").is_err());
        assert!(toml::from_str::<ModelConfig>("widths = 3").is_err());
        assert_eq!(ViIterations::Auto.resolve(29, 11), 80);
    }

    #[test]
    fn tape_and_direct_vin_agree() {
        let cfg = ModelConfig::new(ModelKind::Vin);
        let params = init_params(&cfg, 1).unwrap();
        let obs = sensor_obs();
        let direct = vin_forward(&obs.tensor, obs.attention, &params, 28).unwrap();
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, true);
        let f = features(&mut tape, &vars, &cfg, &[&obs]).unwrap();
        let (logits, _) = head(&mut tape, &vars, &cfg, f, None).unwrap();
        assert_eq!(tape.value(f).data(), &direct.attended_q.unwrap()[..]);
        assert_eq!(tape.value(logits).data(), &direct.logits);
    }

    #[test]
    fn batched_cnn_matches_single() {
        let cfg = ModelConfig::new(ModelKind::Cnn);
        let params = init_params(&cfg, 2).unwrap();
        let obs = sensor_obs();
        let mut other = obs.clone();
        other.tensor.data_mut()[5] = 1.0;
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        let f = features(&mut tape, &vars, &cfg, &[&obs, &other]).unwrap();
        let (logits, _) = head(&mut tape, &vars, &cfg, f, None).unwrap();
        let batch = tape.value(logits).data().to_vec();
        let a = cnn_forward(&obs.tensor, &params).unwrap().logits;
        let b = cnn_forward(&other.tensor, &params).unwrap().logits;
        for (x, y) in batch.iter().zip(a.iter().chain(&b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn recurrent_head_matches_stepwise() {
        let cfg = ModelConfig { hidden_size: 8, ..ModelConfig::new(ModelKind::CnnLstm) };
        let model = Model::init(cfg.clone(), 4).unwrap();
        let obs = sensor_obs();
        let (o1, h1) = model.step(&obs, &model.initial_hidden()).unwrap();
        let (o2, h2) = model.step(&obs, &h1).unwrap();
        assert_ne!(h1, h2);
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape, false);
        let f = features(&mut tape, &vars, &cfg, &[&obs, &obs]).unwrap();
        let (logits, _) = head(&mut tape, &vars, &cfg, f, None).unwrap();
        let l = tape.value(logits).data();
        for (x, y) in l.iter().zip(o1.logits.iter().chain(&o2.logits)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_lstm_gives_head_bias() {
        let cfg = ModelConfig::new(ModelKind::VinLstm);
        let mut params = init_params(&cfg, 0).unwrap();
        params.get_mut("lstm.weight").unwrap().data_mut().fill(0.0);
        params.get_mut("lstm.bias").unwrap().data_mut().fill(0.0);
        let bias = params.get("head.bias").unwrap().data().to_vec();
        let obs = sensor_obs();
        let (out, next) = vin_lstm_forward(&obs.tensor, obs.attention, &HiddenState::zeros(256), &params, 28).unwrap();
        assert_eq!(&out.logits[..], &bias[..]);
        assert!(next.h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fully_convolutional_vin() {
        let cfg = ModelConfig::new(ModelKind::VinPartialMap);
        let params = init_params(&cfg, 5).unwrap();
        for len in [20, 520] {
            let map = generate_culdesac(&CuldesacSpec::default().with_length(len), 0).unwrap();
            let obs = EnvState::new(map, 3).observe(InputKind::PartialMap);
            let out = vin_forward(&obs.tensor, obs.attention, &params, 4).unwrap();
            assert!(out.logits.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn attention_out_of_bounds() {
        let params = handcrafted_vi_params();
        let input = Tensor::zeros(&[2, 3, 3]);
        assert!(vin_forward(&input, Pose::new(3, 0), &params, 2).is_err());
        assert!(vin_forward(&input, Pose::new(2, 2), &params, 2).is_ok());
    }

    #[test]
    fn handcrafted_corridor_points_right() {
        // 1×3 corridor, goal at the right end
        let input = Tensor::from_vec(vec![2, 1, 3], vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let params = handcrafted_vi_params();
        let out = vin_forward(&input, Pose::new(0, 1), &params, 3).unwrap();
        assert_eq!(out.greedy(), Action::Right);
    }

    #[test]
    fn corridor_values_oscillate_after_two_sweeps() {
        let input = Tensor::from_vec(vec![2, 1, 3], vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let params = handcrafted_vi_params();
        for (k, left) in [(1, -1.0), (2, 8.0), (3, 7.0)] {
            let oracle = tabular_vi_oracle(&[false; 3], 1, 3, Pose::new(0, 2), k);
            assert_eq!(oracle.data()[0], left);
            let planes = vin_planes(&input, &params, k).unwrap();
            assert_eq!(planes.interior_values(), oracle);
        }
    }

    #[test]
    fn greedy_breaks_ties_low() {
        let out = PolicyOutput { logits: [0.0, 1.0, 1.0, 0.5], attended_q: None };
        assert_eq!(out.greedy(), Action::Right);
        let out = PolicyOutput { logits: [0.0; 4], attended_q: None };
        assert_eq!(out.greedy(), Action::Down);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        for kind in [ModelKind::VinPartialMap, ModelKind::CnnLstm] {
            let model = Model::init(ModelConfig::new(kind), 11).unwrap();
            let mut buf = Vec::new();
            write_checkpoint(&model, &mut buf).unwrap();
            assert_eq!(&buf[..8], CHECKPOINT_MAGIC);
            let back = read_checkpoint(&buf[..]).unwrap();
            assert_eq!(back, model);
            let mut again = Vec::new();
            write_checkpoint(&back, &mut again).unwrap();
            assert_eq!(buf, again);
        }
    }

    #[test]
    fn corrupted_checkpoints_rejected() {
        let model = Model::init(ModelConfig::new(ModelKind::Vin), 0).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 8]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&bad[..]).is_err());
        let mut extra = buf;
        extra.extend_from_slice(&[0; 8]);
        assert!(read_checkpoint(&extra[..]).is_err());
    }

    #[test]
    fn mismatched_params_rejected() {
        let params = init_params(&ModelConfig::new(ModelKind::Cnn), 0).unwrap();
        assert!(Model::new(ModelConfig::new(ModelKind::Vin), params).is_err());
    }
}
