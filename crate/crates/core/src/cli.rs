//! Command-line front end.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 data error,
//! 4 numeric divergence.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::{
    accuracy_of, accuracy_over_time, architecture_sweep, channel_ablation, cost_report,
    fixed_state_grid, predict_with, write_ablation_csv, write_accuracy_over_time_csv,
    write_cost_csv, write_spike_rate_csv, write_sweep_csv, SweepShape,
};
use crate::config::{RunConfig, PROFILES};
use crate::data::{load_binned_spikes, save_binned_spikes, PatternTask, SequenceDataset, ValueType};
use crate::error::{Error, Result};
use crate::network::{ChannelDrop, Network};
use crate::neuron::StabilityRegime;
use crate::train::{evaluate, fit, write_metrics_csv, write_timing_csv, TrainState};

#[derive(Debug, Parser)]
#[command(name = "spiking-ssm", version, about = "Train and analyze multiple-output spiking SSM networks")]
pub struct Cli {
    /// Worker threads for batch-level parallelism. 1 makes runs bit-reproducible.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network from a run file.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Accuracy with 0..=n_out output channels dropped from either side.
    Ablate(AblateArgs),
    /// Train and evaluate a grid of layer shapes and regimes.
    Sweep(SweepArgs),
    /// Print parameter and reset-cost counts for a layer shape.
    Cost(CostArgs),
    /// Write a synthetic temporal-pattern dataset.
    GenData(GenDataArgs),
    /// Print the TOML of a built-in profile.
    Profile(ProfileArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

/// Where the evaluation data comes from.
#[derive(Debug, Args)]
pub struct DataSource {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Run file whose test split to use. Defaults to the one stored in the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Binned-spike file to evaluate on instead.
    #[arg(long, conflicts_with = "config")]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub source: DataSource,
    /// Comma-separated prefix lengths to decode from.
    #[arg(long, value_delimiter = ',')]
    pub prefix_steps: Vec<usize>,
    /// `first:k` or `last:k`.
    #[arg(long, conflicts_with = "prefix_steps")]
    pub drop_channels: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub source: DataSource,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Shapes as `HxNxNOUT`, comma-separated.
    #[arg(long, value_delimiter = ',', required_unless_present = "total_states")]
    pub grid: Vec<String>,
    /// Keep `h * n` at this value, with `n` from `--ns` and `n_out` from `--nout`.
    #[arg(long, requires_all = ["ns", "nout"], conflicts_with = "grid")]
    pub total_states: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub ns: Vec<usize>,
    #[arg(long)]
    pub nout: Option<usize>,
    /// `REGIME:reset|noreset`, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "stable:reset,stable:noreset,unstable:reset,unstable:noreset")]
    pub regimes: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "sweep")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub nout: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub h: u64,
    /// Also write the report as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    pub classes: u64,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    pub steps: u64,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
    pub channels: u64,
    #[arg(long, default_value_t = 150, value_parser = clap::value_parser!(u64).range(1..))]
    pub samples_per_class: u64,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    pub bursts: u64,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    pub burst_len: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[arg(value_parser = clap::builder::PossibleValuesParser::new(PROFILES))]
    pub name: String,
}

/// What `train` stores next to the network in a checkpoint.
#[derive(Debug, Serialize, Deserialize)]
pub struct SavedRun {
    pub run: RunConfig,
    pub state: TrainState,
}

/// Parse the process arguments, run, and map the outcome to an exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.threads {
        Some(0) => Err(Error::Config("--threads must be at least 1".into())),
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(|| dispatch(cli.command)),
        None => dispatch(cli.command),
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Cost(a) => cmd_cost(&a),
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Profile(a) => {
            print!("{}", RunConfig::profile(&a.name)?.to_toml_string()?);
            Ok(())
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn load_run(path: &Path, epochs: Option<usize>, seed: Option<u64>) -> Result<RunConfig> {
    let mut run = RunConfig::load(path)?;
    if let Some(e) = epochs {
        run.training.epochs = e;
    }
    if let Some(s) = seed {
        run.seed = s;
    }
    run.validate()?;
    Ok(run)
}

fn check_channels(net: &Network, ds: &SequenceDataset) -> Result<()> {
    if ds.c_in != net.cfg.c_in || ds.c_out > net.cfg.c_out {
        return Err(Error::Config(format!(
            "dataset `{}` ({}x{} channels) does not fit the network ({}x{})",
            ds.name, ds.c_in, ds.c_out, net.cfg.c_in, net.cfg.c_out
        )));
    }
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let run = load_run(&a.config, a.epochs, a.seed)?;
    let splits = run.dataset.load(run.seed)?;
    let net = Network::new(run.network.clone(), run.seed)?;
    check_channels(&net, &splits.train)?;
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("config.toml"), run.to_toml_string()?)?;
    eprintln!(
        "training {} trainable parameters on {} samples ({} regime, reset {})",
        net.num_trainable(),
        splits.train.len(),
        run.network.regime,
        if run.network.reset_enabled { "on" } else { "off" },
    );
    let tc = run.train_config();
    let report = fit(net, &splits.train, Some(&splits.selection), &tc, &mut |_| {})?;
    for m in &report.metrics {
        eprintln!(
            "epoch {:>4}  loss {:.4}  train {:.4}  held-out {:.4}  [{:.1}s]",
            m.epoch,
            m.train_loss,
            m.train_acc,
            m.test_acc.unwrap_or(f64::NAN),
            m.wall_time
        );
    }
    let layers = run.network.num_hidden_layers;
    write_metrics_csv(create(&a.out.join("metrics.csv"))?, layers, &report.metrics)?;
    write_timing_csv(create(&a.out.join("timing.csv"))?, &report.metrics)?;

    let saved = serde_json::to_value(SavedRun {
        run: run.clone(),
        state: report.state.clone(),
    })?;
    report.best.save_checkpoint(&a.out.join("best.json"), Some(&saved))?;
    report.last.save_checkpoint(&a.out.join("final.json"), Some(&saved))?;

    let test = splits.test.as_ref().unwrap_or(&splits.selection);
    let final_eval = evaluate(&report.last, test, tc.eval_batch_size)?;
    if let Some(rates) = &final_eval.spike_rates {
        write_spike_rate_csv(create(&a.out.join("spike_rates.csv"))?, rates)?;
    }
    println!("final test accuracy {:.4}", final_eval.accuracy);
    if let Some(epoch) = report.best_epoch {
        let best = evaluate(&report.best, test, tc.eval_batch_size)?;
        println!("best epoch {epoch} test accuracy {:.4}", best.accuracy);
    }
    Ok(())
}

fn eval_data(src: &DataSource) -> Result<(Network, SequenceDataset)> {
    let ckpt = Network::load_checkpoint(&src.checkpoint)?;
    let net = ckpt.network;
    let ds = if let Some(path) = &src.data {
        load_binned_spikes(path)?
    } else {
        let run = match &src.config {
            Some(path) => RunConfig::load(path)?,
            None => {
                let state = ckpt.train_state.ok_or_else(|| {
                    Error::Config("checkpoint holds no run configuration; pass --config or --data".into())
                })?;
                serde_json::from_value::<SavedRun>(state)?.run
            }
        };
        if run.network.c_in != net.cfg.c_in || run.network.c_out != net.cfg.c_out {
            return Err(Error::Config(
                "checkpoint and run configuration disagree on channel counts".into(),
            ));
        }
        let splits = run.dataset.load(run.seed)?;
        splits.test.unwrap_or(splits.selection)
    };
    check_channels(&net, &ds)?;
    Ok((net, ds))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let (net, ds) = eval_data(&a.source)?;
    let bs = a.source.batch_size;
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
    }
    if !a.prefix_steps.is_empty() {
        let curve = accuracy_over_time(&net, &ds, &a.prefix_steps, bs)?;
        for (t, acc) in &curve {
            println!("t={t} accuracy {acc:.4}");
        }
        if let Some(out) = &a.out {
            write_accuracy_over_time_csv(create(&out.join("accuracy_over_time.csv"))?, &curve)?;
        }
        return Ok(());
    }
    let drop = a
        .drop_channels
        .as_deref()
        .map(str::parse::<ChannelDrop>)
        .transpose()?;
    if let Some(d) = drop {
        d.mask(net.cfg.n_out)?;
    }
    let preds = predict_with(&net, &ds, bs, drop)?;
    let acc = accuracy_of(&preds, &ds);
    println!("accuracy {acc:.4} on {} samples", ds.len());
    if let Some(out) = &a.out {
        let mut w = csv::Writer::from_writer(create(&out.join("eval.csv"))?);
        w.write_record(["samples", "drop", "accuracy"])?;
        let drop_label = a.drop_channels.clone().unwrap_or_else(|| "none".into());
        w.write_record([ds.len().to_string(), drop_label, acc.to_string()])?;
        w.flush()?;
    }
    Ok(())
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let (net, ds) = eval_data(&a.source)?;
    let rows = channel_ablation(&net, &ds, a.source.batch_size)?;
    write_ablation_csv(std::io::stdout().lock(), &rows)?;
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        write_ablation_csv(create(&out.join("ablation.csv"))?, &rows)?;
    }
    Ok(())
}

fn parse_shape(s: &str) -> Result<SweepShape> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("shape `{s}` is not HxNxNOUT")))?;
    match parts[..] {
        [h, n, n_out] if h > 0 && n > 0 && n_out > 0 => Ok(SweepShape { h, n, n_out }),
        _ => Err(Error::Config(format!("shape `{s}` is not HxNxNOUT with positive sizes"))),
    }
}

fn parse_regime(s: &str) -> Result<(StabilityRegime, bool)> {
    let (regime, reset) = s
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("regime `{s}` is not REGIME:reset|noreset")))?;
    let regime = match regime {
        "stable" => StabilityRegime::Stable,
        "unstable" => StabilityRegime::Unstable,
        other => return Err(Error::Config(format!("unknown regime `{other}`"))),
    };
    let reset = match reset {
        "reset" => true,
        "noreset" => false,
        other => return Err(Error::Config(format!("unknown reset setting `{other}`"))),
    };
    Ok((regime, reset))
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let run = load_run(&a.config, a.epochs, a.seed)?;
    let shapes = match a.total_states {
        Some(total) => fixed_state_grid(total, &a.ns, a.nout.unwrap_or(1))?,
        None => a.grid.iter().map(|s| parse_shape(s)).collect::<Result<_>>()?,
    };
    let regimes: Vec<_> = a.regimes.iter().map(|s| parse_regime(s)).collect::<Result<_>>()?;
    for shape in &shapes {
        let mut cfg = run.network.clone();
        cfg.h = shape.h;
        cfg.n = shape.n;
        cfg.n_out = shape.n_out;
        cfg.validate()?;
    }
    let splits = run.dataset.load(run.seed)?;
    let test = splits.test.as_ref().unwrap_or(&splits.selection);
    let rows = architecture_sweep(
        &shapes,
        &regimes,
        &run.network,
        &run.train_config(),
        &splits.train,
        test,
        run.seed,
    );
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("config.toml"), run.to_toml_string()?)?;
    write_sweep_csv(create(&a.out.join("sweep.csv"))?, &rows)?;
    write_sweep_csv(std::io::stdout().lock(), &rows)?;
    Ok(())
}

pub fn cmd_cost(a: &CostArgs) -> Result<()> {
    let r = cost_report(a.n as usize, a.nout as usize, a.h as usize)?;
    println!("params per neuron (p)        {}", r.params_per_neuron);
    println!("params per layer (p*h)       {}", r.params_per_layer);
    println!("reset condition MACs (m_rc)  {}", r.m_rc);
    println!("reset action MACs (m_ra)     {}", r.m_ra);
    println!("reset MACs (m_r)             {}", r.m_r);
    println!("reset MACs per layer (m_r*h) {}", r.reset_macs_per_layer);
    println!("synaptic MACs per step       {}", r.synaptic_macs_per_step);
    if let Some(out) = &a.out {
        write_cost_csv(create(out)?, &[r])?;
    }
    Ok(())
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let task = PatternTask {
        num_classes: a.classes as usize,
        steps: a.steps as usize,
        channels: a.channels as usize,
        samples_per_class: a.samples_per_class as usize,
        noise: a.noise,
        seed: a.seed,
        bursts: a.bursts as usize,
        burst_len: a.burst_len as usize,
    };
    let ds = task.generate()?;
    let vt = ValueType::fitting(ds.samples.iter().flat_map(|s| s.values.iter().copied()));
    save_binned_spikes(&a.out, &ds, vt)?;
    println!(
        "wrote {} samples ({} classes, {} steps, {} channels) to {}",
        ds.len(),
        ds.c_out,
        ds.max_steps(),
        ds.c_in,
        a.out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn zero_sizes_are_usage_errors() {
        let err = Cli::try_parse_from(["spiking-ssm", "cost", "--n", "0", "--nout", "1", "--h", "1"]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = Cli::try_parse_from(["spiking-ssm", "gen-data", "--classes", "0", "--out", "x"]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn shapes_and_regimes_parse() {
        assert_eq!(parse_shape("256x8x4").unwrap(), SweepShape { h: 256, n: 8, n_out: 4 });
        assert!(parse_shape("256x8").is_err());
        assert!(parse_shape("0x8x4").is_err());
        assert_eq!(parse_regime("unstable:noreset").unwrap(), (StabilityRegime::Unstable, false));
        assert!(parse_regime("stable").is_err());
    }

    #[test]
    fn gen_data_round_trips_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let gen = |name: &str| {
            let out = dir.path().join(name);
            let cli = Cli::try_parse_from([
                "spiking-ssm", "gen-data", "--classes", "3", "--samples-per-class", "4",
                "--seed", "5", "--out", out.to_str().unwrap(),
            ])
            .unwrap();
            run(cli).unwrap();
            out
        };
        let (a, b) = (gen("a.ssb"), gen("b.ssb"));
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let mut task = PatternTask::new(3, 50, 8, 4);
        task.noise = 0.1;
        task.seed = 5;
        let expected = task.generate().unwrap();
        let loaded = load_binned_spikes(&a).unwrap();
        assert_eq!(loaded.samples, expected.samples);
        assert_eq!((loaded.c_in, loaded.c_out), (8, 3));
    }
}
