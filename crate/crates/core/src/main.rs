use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use miniseq_core::commands::*;
use miniseq_core::maxseq::{MaxSeqQuery, DEFAULT_GRANULARITY};
use miniseq_core::seqpar::Schedule;
use miniseq_core::tensor::Dtype;
use miniseq_core::Result;

#[derive(Debug, Parser)]
#[command(
    name = "miniseq",
    version,
    about = "Mini-sequence transformer training with tracked memory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML file: model keys at the top level, optimizer keys under [optim].
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    dtype: Option<Dtype>,
    #[arg(long = "m-mlp")]
    m_mlp: Option<usize>,
    #[arg(long = "m-head")]
    m_head: Option<usize>,
    #[arg(long)]
    recompute: Option<bool>,
    #[arg(long)]
    accum: Option<usize>,
    #[arg(long = "in-backward")]
    in_backward: Option<bool>,
    /// Sequence length S.
    #[arg(long)]
    seq: Option<usize>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            dtype: self.dtype,
            m_mlp: self.m_mlp,
            m_head: self.m_head,
            recompute: self.recompute,
            accum: self.accum,
            in_backward: self.in_backward,
            seq: self.seq,
        }
    }

    fn load(&self, command: &str) -> Result<(RunConfig, RunManifest)> {
        let ov = self.overrides();
        let rc = load_config(self.config.as_deref(), &ov)?;
        let manifest = RunManifest::new(command, &rc, self.config.as_deref(), &ov, &self.out);
        Ok((rc, manifest))
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on a token file or synthetic data; writes metrics.csv and a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        /// Token file from gen-data; synthetic tokens from the seed if absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// One step per chunk count M for one block.
    SweepM {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "head")]
        component: Component,
        /// Comma-separated chunk counts.
        #[arg(long, value_delimiter = ',')]
        m: Vec<usize>,
    },
    /// Predicted peak-memory breakdown.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Start from the Llama3-8B shape instead of the desk defaults.
        #[arg(long)]
        llama3: bool,
        #[arg(long, default_value = "config")]
        bytes: ByteModel,
    },
    /// Largest sequence length whose training step fits a byte budget.
    MaxSeq {
        #[command(flatten)]
        common: Common,
        #[arg(long = "budget-bytes")]
        budget_bytes: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value_t = DEFAULT_GRANULARITY)]
        granularity: usize,
        #[arg(long = "s-cap")]
        s_cap: Option<usize>,
    },
    /// Simulated sequence-parallel training with per-worker memory.
    SpSim {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2)]
        workers: usize,
        #[arg(long = "budget-bytes")]
        budget_bytes: Option<u64>,
        #[arg(long, default_value = "sequential")]
        schedule: Schedule,
        #[arg(long, default_value_t = 1)]
        steps: usize,
    },
    /// Synthetic Markov token corpus.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2048)]
        vocab: usize,
        #[arg(long, default_value_t = 1 << 20)]
        tokens: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Allocation timeline of one training step.
    MemTimeline {
        #[command(flatten)]
        common: Common,
    },
}

fn llama3_config(common: &Common) -> Result<(RunConfig, RunManifest)> {
    let ov = common.overrides();
    let mut rc = match common.config.as_deref() {
        Some(p) => load_config(Some(p), &Overrides::default())?,
        None => RunConfig::default(),
    };
    rc.model = miniseq_core::estimator::llama3_8b();
    ov.apply(&mut rc);
    rc.model.validate()?;
    rc.optim.validate()?;
    let manifest =
        RunManifest::new("estimate", &rc, common.config.as_deref(), &ov, &common.out).arg("preset", "llama3-8b");
    Ok((rc, manifest))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, steps, data } => {
            let (rc, manifest) = common.load("train")?;
            let out = cmd_train(&rc, manifest, steps, data.as_deref())?;
            if let (Some(first), Some(last)) = (out.metrics.first(), out.metrics.last()) {
                println!(
                    "run {}: loss {} -> {} over {} steps",
                    out.manifest.run_id,
                    first.loss,
                    last.loss,
                    out.metrics.len()
                );
            }
            println!("checkpoint {}", out.checkpoint.display());
        }
        Command::SweepM { common, component, m } => {
            let (rc, manifest) = common.load("sweep-m")?;
            let ms = if m.is_empty() { component.default_ms() } else { m };
            let rows = cmd_sweep_m(&rc, manifest, component, &ms)?;
            print!("{}", sweep_csv(&rows));
        }
        Command::Estimate { common, llama3, bytes } => {
            let (rc, manifest) = if llama3 {
                llama3_config(&common)?
            } else {
                common.load("estimate")?
            };
            let report = cmd_estimate(&rc, manifest, bytes)?;
            print!("{}", report.to_text());
        }
        Command::MaxSeq {
            common,
            budget_bytes,
            workers,
            granularity,
            s_cap,
        } => {
            let (rc, manifest) = common.load("max-seq")?;
            let q = MaxSeqQuery {
                budget_bytes,
                workers,
                granularity,
                s_cap,
            };
            let r = cmd_max_seq(&rc, manifest, &q)?;
            println!(
                "S* = {} (peak {} of {} bytes, {} probes)",
                r.s_star,
                r.peak_bytes,
                r.budget_bytes,
                r.probes.len()
            );
        }
        Command::SpSim {
            common,
            workers,
            budget_bytes,
            schedule,
            steps,
        } => {
            let (rc, manifest) = common.load("sp-sim")?;
            let out = cmd_sp_sim(&rc, manifest, workers, schedule, steps, budget_bytes)?;
            println!("worker,peak_bytes,activation_peak_bytes");
            for w in &out.workers {
                println!("{},{},{}", w.worker, w.peak_bytes, w.activation_peak_bytes);
            }
            if let Some(r) = &out.max_seq {
                println!("S* = {} with {workers} workers", r.s_star);
            }
        }
        Command::GenData {
            seed,
            vocab,
            tokens,
            out,
        } => {
            let manifest = RunManifest::new("gen-data", &RunConfig::default(), None, &Overrides::default(), &out);
            let f = cmd_gen_data(manifest, seed, vocab, tokens)?;
            println!("wrote {} tokens to {}", f.len(), display(&f.path));
        }
        Command::MemTimeline { common } => {
            let (rc, manifest) = common.load("mem-timeline")?;
            let report = cmd_mem_timeline(&rc, manifest)?;
            println!("{} events, peak {} bytes", report.events.len(), report.peak_bytes);
        }
    }
    Ok(())
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
