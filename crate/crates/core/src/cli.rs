//! The `navbench` command line: dataset generation, training, evaluation and
//! generalization sweeps driven by one TOML run configuration.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{
    evaluate, generalization_sweep, heldout_seeds, validate_lengths, EvalReport, LearnedPolicy, MapFamily, Policy,
    ReplannerPolicy, SweepReport,
};
use crate::expert::{build_dataset, build_sampled_dataset, find_aliased_pairs, Dataset};
use crate::gridworld::{generate_culdesac, CuldesacSpec};
use crate::models::{load_checkpoint, save_checkpoint, ModelConfig, ModelKind};
use crate::training::{dqn_train, train_supervised, write_curve_csv, write_reward_csv, DqnConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub pocket_length: usize,
    pub trajectories: usize,
    pub radius: usize,
    /// Draw approach and margin per map from its seed; otherwise every map
    /// uses `base` with `pocket_length`.
    pub sample_geometry: bool,
    pub base: CuldesacSpec,
    /// Step budget per expert rollout; the default rule when absent.
    pub budget: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            pocket_length: 20,
            trajectories: 100,
            radius: 3,
            sample_geometry: true,
            base: CuldesacSpec::default(),
            budget: None,
        }
    }
}

impl DataConfig {
    fn family(&self) -> MapFamily {
        if self.sample_geometry {
            MapFamily::Sampled
        } else {
            MapFamily::Fixed(self.base)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub heldout_maps: usize,
    pub lengths: Vec<usize>,
    pub seeds_per_length: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { heldout_maps: 100, lengths: vec![20, 50, 100, 200, 500], seeds_per_length: 5 }
    }
}

/// Everything a run needs. The top-level `seed` drives every random choice:
/// dataset seeds, initialization, shuffling and exploration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dqn: DqnConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig { epochs: 50, batch_size: 1, eval_every: 1, ..TrainConfig::default() },
            dqn: DqnConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Copies the run seed into the model, training and DQN sections.
    pub fn seeded(mut self) -> Self {
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.dqn.seed = self.seed;
        self.model.radius = self.data.radius;
        self
    }

    /// Run seed `s` draws maps `s·2³² + i`, never the held-out seeds.
    pub fn dataset_seeds(&self) -> Vec<u64> {
        (0..self.data.trajectories as u64).map(|i| (self.seed << 32).wrapping_add(i)).collect()
    }
}

#[derive(Parser, Debug)]
#[command(name = "navbench", version, about = "Cul-de-sac navigation benchmark: expert data, training, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the expert dataset and its maps.
    Gen(CommonArgs),
    /// Train a model on a dataset (or by reinforcement for dqn).
    Train(CommonArgs),
    /// Success rate on held-out maps.
    Eval(CommonArgs),
    /// Success fraction per pocket length and the maximum generalization length.
    Sweep(CommonArgs),
    /// Print the default configuration as TOML.
    Config,
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// TOML run configuration; built-in defaults when absent (see `navbench config`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory [default: runs].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Model kind: cnn, cnn_lstm, vin, vin_lstm, vin_partialmap, dqn [default: vin_partialmap].
    #[arg(long)]
    pub model: Option<ModelKind>,
    /// Comma-separated, strictly increasing pocket lengths [default: 20,50,100,200,500].
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<usize>>,
    /// Use the optimistic A* replanner instead of a checkpoint.
    #[arg(long)]
    pub oracle: bool,
    /// Number of expert trajectories [default: 100].
    #[arg(long)]
    pub traj: Option<usize>,
    /// Step budget per expert rollout, or DQN environment steps [default: 10·optimal+100; dqn 200000].
    #[arg(long)]
    pub budget: Option<usize>,
    /// Checkpoint to evaluate [default: <out>/<model>.ckpt].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset to train on [default: <out>/dataset.jsonl].
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

impl CommonArgs {
    /// The configuration with command-line overrides applied.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(k) = self.model {
            cfg.model.kind = k;
        }
        if let Some(l) = &self.lengths {
            cfg.eval.lengths = l.clone();
        }
        if let Some(t) = self.traj {
            cfg.data.trajectories = t;
        }
        if let Some(b) = self.budget {
            if cfg.model.kind == ModelKind::Dqn {
                cfg.dqn.budget = b;
            } else {
                cfg.data.budget = Some(b);
            }
        }
        Ok(cfg.seeded())
    }

    fn checkpoint_path(&self, cfg: &RunConfig) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join(format!("{}.ckpt", cfg.model.kind)))
    }

    fn dataset_path(&self, cfg: &RunConfig) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| cfg.out_dir.join("dataset.jsonl"))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    f(&mut out)?;
    out.flush()?;
    Ok(())
}

pub fn generate(cfg: &RunConfig) -> Result<Dataset> {
    if cfg.data.trajectories == 0 {
        return Err(Error::InvalidSpec("at least one trajectory is required".into()));
    }
    let seeds = cfg.dataset_seeds();
    if cfg.data.sample_geometry {
        build_sampled_dataset(cfg.data.pocket_length, &seeds, cfg.data.radius, cfg.data.budget)
    } else {
        build_dataset(&[cfg.data.base.with_length(cfg.data.pocket_length)], &seeds, cfg.data.radius, cfg.data.budget)
    }
}

pub fn holdout(cfg: &RunConfig) -> Result<Dataset> {
    let seeds = heldout_seeds(cfg.eval.heldout_maps);
    if cfg.data.sample_geometry {
        build_sampled_dataset(cfg.data.pocket_length, &seeds, cfg.data.radius, None)
    } else {
        build_dataset(&[cfg.data.base.with_length(cfg.data.pocket_length)], &seeds, cfg.data.radius, None)
    }
}

/// Writes `dataset.jsonl` and one text file per map; returns the dataset path.
pub fn cmd_gen(args: &CommonArgs) -> Result<PathBuf> {
    let cfg = args.resolve()?;
    let dataset = generate(&cfg)?;
    create_dir(&cfg.out_dir.join("maps"))?;
    let path = cfg.out_dir.join("dataset.jsonl");
    write_file(&path, |out| dataset.write_jsonl(out))?;
    for t in &dataset.trajectories {
        fs::write(cfg.out_dir.join("maps").join(format!("map_{}.txt", t.seed)), t.map.to_text())?;
    }
    let aliases = find_aliased_pairs(&dataset)?;
    eprintln!(
        "trajectories {} steps {} aliased pairs {} memoryless error bound {:.4}",
        dataset.len(),
        dataset.total_steps(),
        aliases.count(),
        aliases.memoryless_error_lower_bound()
    );
    Ok(path)
}

/// Trains per `--model` and writes the checkpoint plus its curve CSV.
pub fn cmd_train(args: &CommonArgs) -> Result<PathBuf> {
    let cfg = args.resolve()?;
    create_dir(&cfg.out_dir)?;
    let ckpt = cfg.out_dir.join(format!("{}.ckpt", cfg.model.kind));
    if cfg.model.kind == ModelKind::Dqn {
        let map = generate_culdesac(&cfg.data.base.with_length(cfg.data.pocket_length), cfg.seed)?;
        let outcome = dqn_train(&map, &cfg.model, &cfg.dqn)?;
        save_checkpoint(&outcome.model, &ckpt)?;
        write_file(&cfg.out_dir.join("dqn_returns.csv"), |out| write_reward_csv(&outcome.returns, out))?;
        let wins = outcome.returns.iter().filter(|&&r| r > 0.0).count();
        eprintln!("episodes {} reaching goal {}", outcome.returns.len(), wins);
        return Ok(ckpt);
    }
    let path = args.dataset_path(&cfg);
    let file = fs::File::open(&path)
        .map_err(|e| Error::Incompatible(format!("cannot open dataset {}: {e}", path.display())))?;
    let dataset = Dataset::read_jsonl(BufReader::new(file))?;
    let held = holdout(&cfg)?;
    let outcome = train_supervised(&dataset, &held, &cfg.train, &cfg.model)?;
    save_checkpoint(&outcome.model, &ckpt)?;
    write_file(&cfg.out_dir.join(format!("{}_curve.csv", cfg.model.kind)), |out| write_curve_csv(&outcome.curve, out))?;
    if let Some(last) = outcome.curve.last() {
        eprintln!("epoch {} train error {:.4} test error {:.4}", last.epoch, last.train_error, last.test_error);
    }
    if !cfg.model.kind.is_recurrent() {
        let bound = find_aliased_pairs(&dataset)?.memoryless_error_lower_bound();
        eprintln!("memoryless error lower bound {bound:.4}");
    }
    Ok(ckpt)
}

fn policy_for(args: &CommonArgs, cfg: &RunConfig) -> Result<(String, Box<dyn Policy>)> {
    if args.oracle {
        return Ok(("oracle".into(), Box::new(ReplannerPolicy)));
    }
    let path = args.checkpoint_path(cfg);
    if !path.exists() {
        return Err(Error::Incompatible(format!("checkpoint {} not found", path.display())));
    }
    let model = load_checkpoint(&path)?;
    Ok((model.config.kind.to_string(), Box::new(LearnedPolicy { model })))
}

/// Held-out success report; returns the report path.
pub fn cmd_eval(args: &CommonArgs) -> Result<PathBuf> {
    let cfg = args.resolve()?;
    let (name, policy) = policy_for(args, &cfg)?;
    let maps = cfg.data.family().maps(cfg.data.pocket_length, &heldout_seeds(cfg.eval.heldout_maps))?;
    let report: EvalReport = evaluate(&maps, policy.as_ref(), cfg.data.radius, None)?;
    create_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join(format!("{name}_eval.json"));
    write_file(&path, |out| report.write_json(out))?;
    eprintln!("success {:.1}% over {} maps", report.success_percent, report.maps.len());
    Ok(path)
}

/// Generalization sweep; returns the report and the CSV path.
pub fn cmd_sweep(args: &CommonArgs) -> Result<(SweepReport, PathBuf)> {
    let cfg = args.resolve()?;
    validate_lengths(&cfg.eval.lengths)?;
    let (name, policy) = policy_for(args, &cfg)?;
    let seeds = heldout_seeds(cfg.eval.seeds_per_length);
    let report = generalization_sweep(policy.as_ref(), cfg.data.family(), &cfg.eval.lengths, &seeds, cfg.data.radius)?;
    create_dir(&cfg.out_dir)?;
    let csv = cfg.out_dir.join(format!("{name}_sweep.csv"));
    write_file(&csv, |out| report.write_csv(out))?;
    write_file(&cfg.out_dir.join(format!("{name}_sweep.json")), |out| {
        serde_json::to_writer_pretty(out, &report)?;
        Ok(())
    })?;
    eprintln!("max generalization length {}", report.max_generalization_length);
    Ok((report, csv))
}

/// Dispatches a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a).map(drop),
        Command::Train(a) => cmd_train(&a).map(drop),
        Command::Eval(a) => cmd_eval(&a).map(drop),
        Command::Sweep(a) => cmd_sweep(&a).map(drop),
        Command::Config => {
            print!("{}", RunConfig::default().to_toml());
            Ok(())
        }
    }
}
