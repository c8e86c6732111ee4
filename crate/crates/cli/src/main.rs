use std::fs;
use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use deskbert::data::SyntheticCorpus;
use deskbert::perf::PerfConfig;
use deskbert::run::PrepareSpec;
use deskbert_cli::bench::{self, BenchArgs, BenchRow, BenchTarget};
use deskbert_cli::prepare::{self, CorpusSource, PrepareArgs};
use deskbert_cli::{inspect, model, train, write_csv, RunConfig};

#[derive(Parser)]
#[command(name = "deskbert", version, about = "Desk-scale BERT pre-training: data, training, benchmarks and cluster model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn a corpus into training shards, a held-out set and a manifest.
    Prepare(PrepareCmd),
    /// Train from prepared shards and write metrics.
    Train(TrainCmd),
    /// Time every fp16/fusion combination.
    Bench(BenchCmd),
    /// Write weak-scaling, epoch-time and cost tables.
    Model(ModelCmd),
    /// Print a graph after optional AMP and fusion passes.
    InspectGraph(InspectCmd),
}

#[derive(Args)]
struct PrepareCmd {
    /// UTF-8 text corpus. Without it a synthetic corpus is generated.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Sentences in the synthetic corpus.
    #[arg(long, default_value_t = 10_000)]
    sentences: usize,
    /// Vocabulary size, special tokens included.
    #[arg(long, default_value_t = 1000)]
    vocab: usize,
    #[arg(long, default_value_t = 32)]
    seq_len: usize,
    #[arg(long, default_value_t = 5)]
    max_pred: usize,
    #[arg(long, default_value_t = 4)]
    shards: usize,
    /// Examples held out for evaluation.
    #[arg(long, default_value_t = 256)]
    eval: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// INI file with [model], [train], [seeds], [data], [output], [comm].
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set train.fp16=true`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    world: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    accumulation: Option<usize>,
    #[arg(long)]
    micro_batch: Option<usize>,
    #[arg(long)]
    fp16: bool,
    #[arg(long)]
    fusion: bool,
    #[arg(long)]
    overlap: bool,
    /// This process's rank in a TCP group.
    #[arg(long)]
    rank: Option<usize>,
    /// Comma-separated `host:port` list, one per rank.
    #[arg(long)]
    rendezvous: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                RunConfig::parse(&text)?
            }
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply(o)?;
        }
        let t = &mut cfg.train;
        if let Some(d) = &self.data {
            cfg.data_dir = d.clone();
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(v) = self.world {
            t.world = v;
        }
        if let Some(v) = self.steps {
            t.steps = v;
        }
        if let Some(v) = self.accumulation {
            t.accumulation = v;
        }
        if let Some(v) = self.micro_batch {
            t.micro_batch = v;
        }
        t.fp16 |= self.fp16;
        t.fusion |= self.fusion;
        t.overlap |= self.overlap;
        if let Some(r) = self.rank {
            cfg.rank = Some(r);
            cfg.transport = deskbert_cli::TransportKind::Tcp;
        }
        if let Some(r) = &self.rendezvous {
            cfg.rendezvous = Some(r.clone());
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Gelu,
    Model,
}

#[derive(Args)]
struct BenchCmd {
    #[arg(long, value_enum, default_value_t = TargetArg::Gelu)]
    target: TargetArg,
    /// Elements per GELU evaluation.
    #[arg(long, default_value_t = 1 << 20)]
    size: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// CSV destination; the table is always printed.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ModelCmd {
    /// INI file with [cluster], [phase], [model], [sweep].
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value = "model-out")]
    out: PathBuf,
}

#[derive(Args)]
struct InspectCmd {
    /// `gelu`, `layernorm`, `adam` or a graph text file.
    graph: String,
    #[arg(long)]
    amp: bool,
    #[arg(long)]
    fuse: bool,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(a) => {
            let source = match a.corpus {
                Some(p) => CorpusSource::Text(p),
                None => CorpusSource::Synthetic(SyntheticCorpus {
                    sentences: a.sentences,
                    vocab: a.vocab,
                    ..SyntheticCorpus::default()
                }),
            };
            let m = prepare::prepare(&PrepareArgs {
                source,
                vocab: a.vocab,
                spec: PrepareSpec {
                    seq_len: a.seq_len,
                    max_pred: a.max_pred,
                    shards: a.shards,
                    eval: a.eval,
                    seed: a.seed,
                },
                out: a.out.clone(),
            })?;
            println!(
                "{} examples in {} shards, {} held out, vocabulary {} -> {}",
                m.examples,
                m.shards.len(),
                m.eval.count,
                m.vocab_size,
                a.out.display()
            );
        }
        Command::Train(a) => {
            let cfg = a.config.resolve()?;
            let r = train::train(&cfg)?;
            let m = &r.manifest;
            println!(
                "{} steps, global batch {}, eval loss {:.4} -> {:.4}, final train loss {}, replicas consistent: {}",
                m.steps,
                m.global_batch,
                m.initial_eval,
                m.final_eval,
                m.final_loss.map_or("n/a".into(), |l| l.to_string()),
                m.replicas_consistent
            );
            println!("wrote {}", r.out_dir.display());
        }
        Command::Bench(a) => {
            let cfg = a.config.resolve()?;
            let args = BenchArgs {
                target: match a.target {
                    TargetArg::Gelu => BenchTarget::Gelu,
                    TargetArg::Model => BenchTarget::Model,
                },
                size: a.size,
                reps: a.reps,
                seed: a.seed,
            };
            let rows = bench::bench(&args, &cfg)?;
            let records: Vec<Vec<String>> = rows.iter().map(BenchRow::record).collect();
            let mut w = csv::Writer::from_writer(io::stdout());
            w.write_record(BenchRow::HEADER)?;
            for r in &records {
                w.write_record(r)?;
            }
            w.flush()?;
            if let Some(p) = a.csv {
                write_csv(&p, &BenchRow::HEADER, &records)?;
            }
        }
        Command::Model(a) => {
            let mut cfg = match &a.config {
                Some(p) => PerfConfig::parse(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
                None => PerfConfig::default(),
            };
            for o in &a.overrides {
                let (k, v) = o.split_once('=').with_context(|| format!("override `{o}` is not key=value"))?;
                cfg.set(k.trim(), v)?;
            }
            let r = model::model(&cfg);
            model::write_report(&r, &cfg, &a.out)?;
            for e in &r.epochs {
                println!("{:>7} {:>9.1} h/epoch {:>9.1} h/40 epochs", e.device, e.hours_per_epoch, e.hours_40_epochs);
            }
            for c in &r.costs {
                println!("{:<24} {}", c.item, c.total);
            }
            println!("wrote {}", a.out.display());
        }
        Command::InspectGraph(a) => print!("{}", inspect::report(&a.graph, a.amp, a.fuse)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
