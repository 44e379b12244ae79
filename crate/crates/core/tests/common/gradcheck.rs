use navbench::expert::rollout_expert;
use navbench::gridworld::{generate_culdesac, CuldesacSpec, InputKind, Observation};
use navbench::models::{features, head, init_params, ModelConfig, ModelKind, ModelParams, ViIterations};
use navbench::tensor::{Tape, Tensor, Var};
use navbench::training::{td_loss_gradients, Transition};
use navbench::{gridworld::Action, models::Model, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const LAYER_TOL: f64 = 1e-6;
const MODEL_TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Random values kept at least `gap` away from zero.
fn off_kink(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(gap..1.0);
            if rng.gen() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data)
}

/// `C×H×W` values whose per-pixel channel maximum beats the runner-up by at
/// least `gap`.
fn separated_channels(c: usize, h: usize, w: usize, gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    loop {
        let t = random(&[c, h, w], rng);
        let hw = h * w;
        let ok = (0..hw).all(|p| {
            let mut col: Vec<f64> = (0..c).map(|ch| t.data()[ch * hw + p]).collect();
            col.sort_by(|a, b| b.total_cmp(a));
            c == 1 || col[0] - col[1] > gap
        });
        if ok {
            return t;
        }
    }
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Elementwise central-difference check of `Σ r ⊙ f(inputs)` against
/// reverse mode, for every input flagged in `wrt`. Returns the worst
/// relative error.
fn check_op<F>(inputs: &[Tensor], wrt: &[bool], rng: &mut ChaCha8Rng, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).shape().to_vec()
    };
    let weights = random(&probe, rng);
    let eval = |xs: &[Tensor]| -> (f64, Vec<Tensor>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs
            .iter()
            .zip(wrt)
            .map(|(t, &g)| if g { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        let out = f(&mut tape, &vars).unwrap();
        let r = tape.constant(weights.clone());
        let prod = tape.mul(out, r).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss, &vars).unwrap();
        (tape.value(loss).data()[0], grads)
    };
    let (_, grads) = eval(inputs);
    let mut worst: f64 = 0.0;
    for (i, flag) in wrt.iter().enumerate() {
        if !*flag {
            continue;
        }
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * H);
            worst = worst.max(rel(grads[i].data()[j], numeric));
        }
    }
    worst
}

fn all(n: usize) -> Vec<bool> {
    vec![true; n]
}

fn assert_op<F>(name: &str, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = make(&mut rng);
        let wrt = all(inputs.len());
        let err = check_op(&inputs, &wrt, &mut rng, &f);
        assert!(err <= LAYER_TOL, "{name} instance {seed}: relative error {err:e}");
    }
}

pub fn conv2d_gradients() {
    for k in [1, 3, 5] {
        assert_op(
            &format!("conv2d k={k}"),
            |rng| vec![random(&[2, 5, 4], rng), random(&[3, 2, k, k], rng), random(&[3], rng)],
            |t, v| t.conv2d(v[0], v[1], v[2], &[1.0, 0.0]),
        );
    }
}

pub fn batched_conv2d_gradients() {
    assert_op(
        "batched conv2d",
        |rng| vec![random(&[3, 2, 4, 4], rng), random(&[2, 2, 3, 3], rng), random(&[2], rng)],
        |t, v| t.conv2d(v[0], v[1], v[2], &[0.5, -0.25]),
    );
}

pub fn channel_max_gradients() {
    assert_op("channel_max", |rng| vec![separated_channels(4, 3, 5, 1e-3, rng)], |t, v| t.channel_max(v[0]));
}

pub fn linear_gradients() {
    assert_op(
        "linear vector",
        |rng| vec![random(&[6], rng), random(&[4, 6], rng), random(&[4], rng)],
        |t, v| t.linear(v[0], v[1], v[2]),
    );
    assert_op(
        "linear rows",
        |rng| vec![random(&[3, 6], rng), random(&[4, 6], rng), random(&[4], rng)],
        |t, v| t.linear(v[0], v[1], v[2]),
    );
}

pub fn elementwise_gradients() {
    assert_op("relu", |rng| vec![off_kink(&[12], 1e-3, rng)], |t, v| Ok(t.relu(v[0])));
    assert_op("sigmoid", |rng| vec![random(&[12], rng)], |t, v| Ok(t.sigmoid(v[0])));
    assert_op("tanh", |rng| vec![random(&[12], rng)], |t, v| Ok(t.tanh(v[0])));
    assert_op("scale", |rng| vec![random(&[12], rng)], |t, v| Ok(t.scale(v[0], -2.5)));
    assert_op("add", |rng| vec![random(&[7], rng), random(&[7], rng)], |t, v| t.add(v[0], v[1]));
    assert_op("sub", |rng| vec![random(&[7], rng), random(&[7], rng)], |t, v| t.sub(v[0], v[1]));
    assert_op("mul", |rng| vec![random(&[7], rng), random(&[7], rng)], |t, v| t.mul(v[0], v[1]));
    assert_op("square", |rng| vec![random(&[7], rng)], |t, v| t.mul(v[0], v[0]));
}

pub fn structural_gradients() {
    assert_op("concat", |rng| vec![random(&[3], rng), random(&[2, 2], rng)], |t, v| Ok(t.concat(&[v[0], v[1], v[0]])));
    assert_op("slice", |rng| vec![random(&[9], rng)], |t, v| t.slice(v[0], 2, 5));
    assert_op("reshape", |rng| vec![random(&[2, 6], rng)], |t, v| t.reshape(v[0], vec![3, 4]));
    assert_op("attend", |rng| vec![random(&[3, 4, 5], rng)], |t, v| t.attend(v[0], 2, 3));
    assert_op("sum", |rng| vec![random(&[2, 3], rng)], |t, v| Ok(t.sum(v[0])));
    assert_op(
        "add_n",
        |rng| vec![random(&[5], rng), random(&[5], rng), random(&[5], rng)],
        |t, v| t.add_n(&[v[0], v[1], v[2], v[1]]),
    );
    assert_op("gather", |rng| vec![random(&[3, 4], rng)], |t, v| t.gather(v[0], &[2, 0, 3]));
}

pub fn cross_entropy_gradients() {
    for label in 0..4 {
        assert_op(
            &format!("softmax_cross_entropy label {label}"),
            |rng| vec![random(&[4], rng).map(|x| 3.0 * x)],
            move |t, v| t.softmax_cross_entropy(v[0], label),
        );
    }
    assert_op(
        "weighted_cross_entropy",
        |rng| vec![random(&[5, 4], rng).map(|x| 3.0 * x)],
        |t, v| t.weighted_cross_entropy(v[0], &[0, 3, 1, 1, 2], &[1.0, 2.0, 0.5, 3.0, 1.0]),
    );
}

pub fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for label in 0..4 {
        let z = random(&[4], &mut rng);
        let mut tape = Tape::new();
        let v = tape.param(z.clone());
        let loss = tape.softmax_cross_entropy(v, label).unwrap();
        let g = tape.backward(loss, &[v]).unwrap().remove(0);
        let denom: f64 = z.data().iter().map(|x| x.exp()).sum();
        for (i, (&gi, &zi)) in g.data().iter().zip(z.data()).enumerate() {
            let expected = zi.exp() / denom - if i == label { 1.0 } else { 0.0 };
            assert!((gi - expected).abs() < 1e-12);
        }
    }
}

pub fn lstm_cell_gradients() {
    assert_op(
        "lstm_cell",
        |rng| vec![random(&[3], rng), random(&[4], rng), random(&[4], rng), random(&[16, 7], rng), random(&[16], rng)],
        |t, v| {
            let (h, c) = t.lstm_cell(v[0], v[1], v[2], v[3], v[4])?;
            Ok(t.concat(&[h, c]))
        },
    );
}

fn bptt(steps: usize) {
    let (xs, hs) = (3, 4);
    assert_op(
        &format!("bptt T={steps}"),
        |rng| {
            vec![
                random(&[steps, xs], rng),
                random(&[hs], rng),
                random(&[hs], rng),
                random(&[4 * hs, xs + hs], rng),
                random(&[4 * hs], rng),
            ]
        },
        |t, v| {
            let (mut h, mut c) = (v[1], v[2]);
            let mut outs = Vec::new();
            for s in 0..steps {
                let x = t.slice(v[0], s * xs, xs)?;
                (h, c) = t.lstm_cell(x, h, c, v[3], v[4])?;
                outs.push(h);
            }
            outs.push(c);
            Ok(t.concat(&outs))
        },
    );
}

pub fn bptt_one_step() {
    bptt(1);
}

pub fn bptt_five_steps() {
    bptt(5);
}

pub fn bptt_twenty_steps() {
    bptt(20);
}

pub fn unused_parameter_gets_zero_gradient() {
    let mut tape = Tape::new();
    let a = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let unused = tape.param(Tensor::vector(vec![3.0, 4.0, 5.0]));
    let loss = tape.sum(a);
    let g = tape.backward(loss, &[a, unused]).unwrap();
    assert_eq!(g[1], Tensor::zeros(&[3]));
}

pub fn gradient_is_linear_in_loss_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (x, w, b) = (random(&[5], &mut rng), random(&[3, 5], &mut rng), random(&[3], &mut rng));
    let grads = |a: f64| {
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.param(x.clone()), tape.param(w.clone()), tape.param(b.clone()));
        let y = tape.linear(xv, wv, bv).unwrap();
        let y = tape.tanh(y);
        let l = tape.sum(y);
        let l = tape.scale(l, a);
        tape.backward(l, &[xv, wv, bv]).unwrap()
    };
    let base = grads(1.0);
    let scaled = grads(-3.5);
    for (g, s) in base.iter().zip(&scaled) {
        for (&p, &q) in g.data().iter().zip(s.data()) {
            assert!((q + 3.5 * p).abs() <= 1e-12 * (1.0 + p.abs()));
        }
    }
}

pub fn backward_is_repeatable() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (x, k, b) = (random(&[2, 6, 6], &mut rng), random(&[3, 2, 3, 3], &mut rng), random(&[3], &mut rng));
    let run = || {
        let mut tape = Tape::new();
        let (xv, kv, bv) = (tape.param(x.clone()), tape.param(k.clone()), tape.param(b.clone()));
        let y = tape.conv2d(xv, kv, bv, &[1.0, 0.0]).unwrap();
        let m = tape.channel_max(y).unwrap();
        let l = tape.sum(m);
        let first = tape.backward(l, &[xv, kv, bv]).unwrap();
        let second = tape.backward(l, &[xv, kv, bv]).unwrap();
        assert_eq!(first, second);
        first
    };
    assert_eq!(run(), run());
}

fn small_config(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        kind,
        vi_iterations: ViIterations::Auto,
        q_channels: 4,
        hidden_size: 5,
        conv_widths: [3, 4],
        fc_width: 6,
        radius: 2,
        seed: 0,
    }
}

/// Expert observations and actions on a short pocket.
fn episode(kind: InputKind, seed: u64, steps: usize) -> (Vec<Observation>, Vec<usize>) {
    let spec = CuldesacSpec { pocket_length: 4, margin: 2, approach: 2, ..CuldesacSpec::default() };
    let map = generate_culdesac(&spec, seed).unwrap();
    let traj = rollout_expert(&map, 2, 500).unwrap();
    let start = (seed as usize * 3) % traj.len().saturating_sub(steps).max(1);
    let obs = traj.observations(kind).unwrap();
    let actions: Vec<usize> = traj.actions().map(Action::index).collect();
    let end = (start + steps).min(obs.len());
    (obs[start..end].to_vec(), actions[start..end].to_vec())
}

fn sequence_loss(
    params: &ModelParams,
    config: &ModelConfig,
    obs: &[Observation],
    labels: &[usize],
    grads: bool,
) -> (f64, Vec<Tensor>) {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, grads);
    let refs: Vec<&Observation> = obs.iter().collect();
    let f = features(&mut tape, &vars, config, &refs).unwrap();
    let (logits, _) = head(&mut tape, &vars, config, f, None).unwrap();
    let weights: Vec<f64> = (0..labels.len()).map(|i| 1.0 + 0.25 * i as f64).collect();
    let loss = tape.weighted_cross_entropy(logits, labels, &weights).unwrap();
    let g = if grads { tape.backward(loss, vars.vars()).unwrap() } else { Vec::new() };
    (tape.value(loss).data()[0], g)
}

fn shifted(params: &ModelParams, direction: &[Tensor], a: f64) -> ModelParams {
    let mut p = params.clone();
    for (t, d) in p.tensors_mut().iter_mut().zip(direction) {
        t.add_scaled(d, a);
    }
    p
}

/// A random unit-length direction in parameter space.
fn direction_like(params: &ModelParams, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let mut d: Vec<Tensor> = params.tensors().iter().map(|t| random(t.shape(), rng)).collect();
    unit(&mut d);
    d
}

fn unit(d: &mut [Tensor]) {
    let norm = d.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    for t in d {
        t.scale(1.0 / norm);
    }
}

fn directional(grads: &[Tensor], direction: &[Tensor]) -> f64 {
    grads.iter().zip(direction).map(|(g, d)| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>()).sum()
}

/// Directional central differences of a full training loss, one random
/// direction over all parameters plus one per parameter tensor.
fn check_model(kind: ModelKind, steps: usize) {
    let config = small_config(kind);
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let params = init_params(&config, seed).unwrap();
        let (obs, labels) = episode(kind.input_kind(), seed, steps);
        let (_, grads) = sequence_loss(&params, &config, &obs, &labels, true);
        let full = direction_like(&params, &mut rng);
        let mut directions = vec![full.clone()];
        for i in 0..params.len() {
            let mut d: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            d[i] = full[i].clone();
            unit(&mut d);
            directions.push(d);
        }
        for (j, d) in directions.iter().enumerate() {
            let analytic = directional(&grads, d);
            let plus = sequence_loss(&shifted(&params, d, H), &config, &obs, &labels, false).0;
            let minus = sequence_loss(&shifted(&params, d, -H), &config, &obs, &labels, false).0;
            let numeric = (plus - minus) / (2.0 * H);
            let err = rel(analytic, numeric);
            assert!(err <= MODEL_TOL, "{kind} instance {seed} direction {j}: {analytic} vs {numeric} ({err:e})");
        }
    }
}

pub fn cnn_end_to_end_gradients() {
    check_model(ModelKind::Cnn, 6);
}

pub fn cnn_lstm_end_to_end_gradients() {
    check_model(ModelKind::CnnLstm, 8);
}

pub fn vin_end_to_end_gradients() {
    check_model(ModelKind::Vin, 3);
}

pub fn vin_lstm_end_to_end_gradients() {
    check_model(ModelKind::VinLstm, 6);
}

pub fn vin_partialmap_end_to_end_gradients() {
    check_model(ModelKind::VinPartialMap, 3);
}

pub fn dqn_td_loss_gradients() {
    let config = small_config(ModelKind::Dqn);
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let online = Model::init(config.clone(), seed).unwrap();
        let target = init_params(&config, seed + 500).unwrap();
        let (obs, _) = episode(InputKind::Sensor, seed, 6);
        let batch: Vec<Transition> = obs
            .windows(2)
            .enumerate()
            .map(|(i, w)| Transition {
                input: w[0].tensor.clone(),
                action: Action::from_index(i % 4).unwrap(),
                reward: if i == 2 { 1.0 } else { 0.0 },
                next_input: w[1].tensor.clone(),
                terminal: i == 2,
            })
            .collect();
        let refs: Vec<&Transition> = batch.iter().collect();
        let (_, grads) = td_loss_gradients(&online, &target, &refs, 0.9).unwrap();
        let d = direction_like(&online.params, &mut rng);
        let loss_at = |a: f64| {
            let m = Model::new(config.clone(), shifted(&online.params, &d, a)).unwrap();
            td_loss_gradients(&m, &target, &refs, 0.9).unwrap().0
        };
        let numeric = (loss_at(H) - loss_at(-H)) / (2.0 * H);
        let analytic = directional(&grads, &d);
        let err = rel(analytic, numeric);
        assert!(err <= MODEL_TOL, "dqn instance {seed}: {analytic} vs {numeric} ({err:e})");
    }
}

/// Direct nested-loop cross-correlation with per-channel constant padding.
#[allow(clippy::needless_range_loop)]
fn conv_reference(x: &Tensor, k: &Tensor, b: &Tensor, pad: &[f64]) -> Tensor {
    let [c, h, w] = x.shape()[..] else { panic!() };
    let [o, _, ks, _] = k.shape()[..] else { panic!() };
    let half = (ks / 2) as isize;
    let mut out = vec![0.0; o * h * w];
    for oc in 0..o {
        for i in 0..h {
            for j in 0..w {
                let mut acc = b.data()[oc];
                for ic in 0..c {
                    for di in 0..ks {
                        for dj in 0..ks {
                            let (r, s) = (i as isize + di as isize - half, j as isize + dj as isize - half);
                            let v = if r < 0 || s < 0 || r >= h as isize || s >= w as isize {
                                pad[ic]
                            } else {
                                x.at(&[ic, r as usize, s as usize])
                            };
                            acc += v * k.at(&[oc, ic, di, dj]);
                        }
                    }
                }
                out[(oc * h + i) * w + j] = acc;
            }
        }
    }
    Tensor::from_vec(vec![o, h, w], out)
}

pub fn conv2d_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut shapes = vec![(2, 5, 5, 3, 3), (8, 32, 32, 4, 3), (1, 1, 1, 2, 3), (3, 7, 2, 2, 5)];
    for _ in 0..12 {
        let ks = [1, 3, 5][rng.gen_range(0..3)];
        shapes.push((rng.gen_range(1..=8), rng.gen_range(1..=32), rng.gen_range(1..=32), rng.gen_range(1..=6), ks));
    }
    for (c, h, w, o, ks) in shapes {
        let x = random(&[c, h, w], &mut rng);
        let k = random(&[o, c, ks, ks], &mut rng);
        let b = random(&[o], &mut rng);
        let pad: Vec<f64> = (0..c).map(|i| if i == 0 { 1.0 } else { rng.gen_range(-1.0..1.0) }).collect();
        let expected = conv_reference(&x, &k, &b, &pad);
        let mut tape = Tape::new();
        let (xv, kv, bv) = (tape.constant(x.clone()), tape.constant(k.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xv, kv, bv, &pad).unwrap();
        let direct = navbench::tensor::conv2d_forward(&x, &k, &b, &pad);
        for (got, want) in [(tape.value(y), &expected), (&direct, &expected)] {
            assert_eq!(got.shape(), want.shape());
            for (&p, &q) in got.data().iter().zip(want.data()) {
                assert!((p - q).abs() <= 1e-12, "{c}×{h}×{w} k{ks}: {p} vs {q}");
            }
        }
    }
}

/// Every check, by name.
pub const SUITE: &[(&str, fn())] = &[
    ("conv2d_gradients", conv2d_gradients),
    ("batched_conv2d_gradients", batched_conv2d_gradients),
    ("channel_max_gradients", channel_max_gradients),
    ("linear_gradients", linear_gradients),
    ("elementwise_gradients", elementwise_gradients),
    ("structural_gradients", structural_gradients),
    ("cross_entropy_gradients", cross_entropy_gradients),
    ("cross_entropy_gradient_is_softmax_minus_onehot", cross_entropy_gradient_is_softmax_minus_onehot),
    ("lstm_cell_gradients", lstm_cell_gradients),
    ("bptt_one_step", bptt_one_step),
    ("bptt_five_steps", bptt_five_steps),
    ("bptt_twenty_steps", bptt_twenty_steps),
    ("unused_parameter_gets_zero_gradient", unused_parameter_gets_zero_gradient),
    ("gradient_is_linear_in_loss_scale", gradient_is_linear_in_loss_scale),
    ("backward_is_repeatable", backward_is_repeatable),
    ("cnn_end_to_end_gradients", cnn_end_to_end_gradients),
    ("cnn_lstm_end_to_end_gradients", cnn_lstm_end_to_end_gradients),
    ("vin_end_to_end_gradients", vin_end_to_end_gradients),
    ("vin_lstm_end_to_end_gradients", vin_lstm_end_to_end_gradients),
    ("vin_partialmap_end_to_end_gradients", vin_partialmap_end_to_end_gradients),
    ("dqn_td_loss_gradients", dqn_td_loss_gradients),
    ("conv2d_matches_nested_loops", conv2d_matches_nested_loops),
];
