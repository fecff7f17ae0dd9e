use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flcovert::covert;
use flcovert::fl::mix_seed;
use flcovert::harness::{self, Error, ExperimentConfig};
use flcovert::metrics;

#[derive(Parser)]
#[command(name = "flcovert", version, about = "Covert channel over federated learning: simulator and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its report directory.
    Run(RunArgs),
    /// Run one experiment per value of a config key.
    Sweep(SweepArgs),
    /// Pretrain, then measure the edge-example yield of random pairs.
    Harvest(HarvestArgs),
    /// Capacity of a binary memoryless channel.
    Capacity(CapacityArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    n_c: Option<String>,
    #[arg(long)]
    p_c: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    /// Frame size in rounds, or `auto`.
    #[arg(long)]
    f: Option<String>,
    /// Number of parallel channels.
    #[arg(long)]
    k: Option<String>,
    /// Bits per channel.
    #[arg(long)]
    n_b: Option<String>,
    /// Bit pattern: 0/1 string, hex bytes, or `auto`.
    #[arg(long)]
    w: Option<String>,
    #[arg(long)]
    images: Option<String>,
    #[arg(long)]
    labels: Option<String>,
    #[arg(long)]
    pretrain_rounds: Option<String>,
    #[arg(long)]
    jam_sigma: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        let flags = [
            ("n_c", &self.n_c),
            ("p_c", &self.p_c),
            ("tau", &self.tau),
            ("f", &self.f),
            ("k", &self.k),
            ("n_b", &self.n_b),
            ("w", &self.w),
            ("images", &self.images),
            ("labels", &self.labels),
            ("pretrain_rounds", &self.pretrain_rounds),
            ("jam_sigma", &self.jam_sigma),
            ("out_dir", &self.out),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Config key to vary.
    #[arg(long)]
    axis: String,
    /// Comma-separated values; a range `a..=b` works for integers.
    #[arg(long)]
    values: String,
}

#[derive(Args)]
struct HarvestArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Pairs to try; defaults to the config's `edge_pairs`.
    #[arg(long)]
    pairs: Option<usize>,
}

#[derive(Args)]
struct CapacityArgs {
    /// P(1 | 0)
    #[arg(long)]
    p1: f64,
    /// P(0 | 1)
    #[arg(long)]
    p2: f64,
}

fn expand_values(spec: &str) -> Result<Vec<String>, Error> {
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..=") {
            let parse = |s: &str| s.trim().parse::<i64>().map_err(|_| Error::Parse(format!("bad range {part:?}")));
            out.extend((parse(a)?..=parse(b)?).map(|v| v.to_string()));
        } else {
            out.push(part.to_string());
        }
    }
    if out.is_empty() {
        return Err(Error::Parse("no sweep values".into()));
    }
    Ok(out)
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Run(args) => {
            let cfg = args.config.load()?;
            let report = harness::run_experiment(&cfg)?;
            print!("{}", report.metrics_text());
            if let Some(dir) = &cfg.out_dir {
                report.write_dir(dir)?;
                println!("report written to {}", dir.display());
            }
        }
        Command::Sweep(args) => {
            let cfg = args.config.load()?;
            let values = expand_values(&args.values)?;
            let reports = harness::sweep(&cfg, &args.axis, &values)?;
            println!("{},ber,snr_db,precision,mean_post_join_accuracy", args.axis);
            for (v, r) in values.iter().zip(&reports) {
                let show = |x: Option<f64>| x.map_or_else(|| "na".to_string(), |x| format!("{x:.4}"));
                println!(
                    "{v},{},{},{},{}",
                    show(r.pooled_ber()),
                    show(r.mean_snr_db()),
                    show(r.precision()),
                    show(r.mean_post_join_accuracy())
                );
            }
            if let Some(dir) = &cfg.out_dir {
                for (v, r) in values.iter().zip(&reports) {
                    r.write_dir(dir.join(format!("{}={v}", args.axis)))?;
                }
                harness::write_sweep_csv(&dir.join("sweep.csv"), &args.axis, &values, &reports)?;
                println!("sweep written to {}", dir.display());
            }
        }
        Command::Harvest(args) => {
            let cfg = args.config.load()?;
            let prep = harness::prepare_data(&cfg)?;
            let pre = harness::pretrain_system(&cfg, &prep)?;
            let harvest = covert::harvest_edges(
                &pre.global,
                &prep.spec,
                &prep.calibration,
                &cfg.edge_transforms,
                args.pairs.unwrap_or(cfg.edge_pairs),
                cfg.effective_pair_policy(),
                mix_seed(&[cfg.seeds.bits, 1]),
            )?;
            println!("pretrain_accuracy = {}", pre.rows.last().map_or(f64::NAN, |r| r.accuracy));
            println!("pairs = {}", harvest.pairs);
            println!("edge_examples = {}", harvest.edges.len());
            println!("yield = {}", harvest.yield_ratio());
            for e in &harvest.edges {
                println!(
                    "  {} h={} l={} alpha={:.4} sources={:?}{}",
                    e.kind.name(),
                    e.h,
                    e.l,
                    e.alpha,
                    e.sources,
                    if e.multi_class_boundary { " (multi-class)" } else { "" }
                );
            }
        }
        Command::Capacity(args) => {
            let c = metrics::bmc_capacity(args.p1, args.p2)?;
            println!("{}", c.value);
            if c.raw != c.value {
                eprintln!("raw value {} clamped to 0", c.raw);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
