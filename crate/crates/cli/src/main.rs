use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use spes_core::cost::{cost_report, preset_2b, preset_7b};
use spes_core::experiment::{
    emit_report, gen_corpus, preset, preset_names, run_ablation, run_experiment, serve, work, AblationGrid,
    CorpusSpec, ExperimentConfig, OuterConfig, Paradigm, RunOptions, ShardPolicy, Transport, THEORY_FILE,
};
use spes_core::theory::{run_theory_suite, SuiteConfig};
use spes_core::trainer::OuterKind;

#[derive(Parser)]
#[command(name = "spes", version, about = "Sparse expert synchronization experiments")]
struct Cli {
    /// Directory holding named run directories.
    #[arg(long, env = "SPES_METRICS_ROOT", default_value = "runs", global = true)]
    metrics_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved experiment config as JSON.
    Config {
        #[command(flatten)]
        config: ConfigArgs,
        /// List preset names instead.
        #[arg(long)]
        list: bool,
    },
    /// Generate the synthetic Markov-mixture corpus.
    GenCorpus(GenCorpusArgs),
    /// Run one experiment end to end.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long, value_enum, default_value_t = TransportArg::InProcess)]
        transport: TransportArg,
    },
    /// Run a grid over H, N, alpha, K and T_merge.
    Ablate(AblateArgs),
    /// Summarize a run directory.
    Report {
        /// Run directory, or a run name under the metrics root.
        run: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Memory and communication accounting for a model shape.
    Cost(CostArgs),
    /// Drift, variance, bound and merge checks on convex toys.
    TheoryCheck(TheoryArgs),
    /// Serve a multi-process run over TCP.
    Serve {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long, default_value = "127.0.0.1:7700")]
        listen: String,
    },
    /// Join a served run as one worker.
    Work {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "127.0.0.1:7700")]
        connect: String,
        #[arg(long)]
        node: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ParadigmArg {
    Centralized,
    Diloco,
    Spes,
}

#[derive(Clone, Copy, ValueEnum)]
enum OuterArg {
    Sgd,
    Nesterov,
}

#[derive(Clone, Copy, ValueEnum)]
enum ShardArg {
    Iid,
    BySource,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    InProcess,
    Tcp,
}

impl From<TransportArg> for Transport {
    fn from(t: TransportArg) -> Self {
        match t {
            TransportArg::InProcess => Transport::InProcess,
            TransportArg::Tcp => Transport::Tcp,
        }
    }
}

/// Config source plus per-field overrides.
#[derive(Args)]
struct ConfigArgs {
    /// Versioned JSON config file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset; `spes config --list` shows them.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, value_enum)]
    paradigm: Option<ParadigmArg>,
    #[arg(long)]
    nodes: Option<usize>,
    /// Local steps per round.
    #[arg(long)]
    h: Option<usize>,
    #[arg(long)]
    token_budget: Option<u64>,
    /// Sequences per node per step.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    min_lr_ratio: Option<f64>,
    #[arg(long, value_enum)]
    outer: Option<OuterArg>,
    #[arg(long)]
    outer_lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Merge window in rounds; 0 disables merging.
    #[arg(long)]
    t_merge: Option<usize>,
    #[arg(long)]
    merge_interval: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    carry_state: Option<bool>,
    #[arg(long, value_enum)]
    shard: Option<ShardArg>,
    #[arg(long)]
    sequences: Option<usize>,
    #[arg(long)]
    sources: Option<usize>,
    #[arg(long)]
    eval_sequences: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    corpus_seed: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match (&self.config, &self.preset) {
            (Some(path), _) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                ExperimentConfig::from_json(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            (None, Some(name)) => preset(name)?,
            (None, None) => ExperimentConfig::desk(),
        };
        if let Some(p) = self.paradigm {
            c.paradigm = match p {
                ParadigmArg::Centralized => Paradigm::Centralized,
                ParadigmArg::Diloco => Paradigm::Diloco,
                ParadigmArg::Spes => Paradigm::Spes,
            };
        }
        macro_rules! set {
            ($($field:ident => $($target:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$field { c.$($target).+ = v; })*
            };
        }
        set!(
            nodes => nodes,
            h => h,
            token_budget => token_budget,
            batch => batch,
            lr => lr.peak,
            warmup => lr.warmup_steps,
            min_lr_ratio => lr.min_ratio,
            outer_lr => outer.lr,
            t_merge => merge.t_merge,
            merge_interval => merge.interval,
            alpha => merge.alpha0,
            k => merge.k,
            carry_state => carry_state,
            sequences => corpus.sequences,
            sources => corpus.sources,
            eval_sequences => eval_sequences,
            eval_every => eval_every,
            corpus_seed => corpus.seed,
            seed => seed,
        );
        if let Some(o) = self.outer {
            let lr = self.outer_lr;
            c.outer = match o {
                OuterArg::Sgd => OuterConfig::sgd(),
                OuterArg::Nesterov => OuterConfig::nesterov(),
            };
            if let Some(lr) = lr {
                c.outer.lr = lr;
            }
        }
        if let Some(m) = self.momentum {
            match &mut c.outer.kind {
                OuterKind::Nesterov { momentum } => *momentum = m,
                OuterKind::Sgd => bail!("--momentum needs --outer nesterov"),
            }
        }
        if let Some(s) = self.shard {
            c.shard = match s {
                ShardArg::Iid => ShardPolicy::Iid,
                ShardArg::BySource => ShardPolicy::BySource,
            };
        }
        let c = c.normalized();
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct OutArgs {
    /// Explicit output directory.
    #[arg(long, conflicts_with = "name")]
    out: Option<PathBuf>,
    /// Run name under the metrics root; defaults to paradigm and config hash.
    #[arg(long)]
    name: Option<String>,
}

impl OutArgs {
    fn dir(&self, root: &Path, cfg: &ExperimentConfig) -> PathBuf {
        match (&self.out, &self.name) {
            (Some(d), _) => d.clone(),
            (None, Some(n)) => root.join(n),
            (None, None) => root.join(format!("{}-{}", paradigm_name(cfg.paradigm), &cfg.hash_hex()[..12])),
        }
    }
}

fn paradigm_name(p: Paradigm) -> &'static str {
    match p {
        Paradigm::Centralized => "centralized",
        Paradigm::Diloco => "diloco",
        Paradigm::Spes => "spes",
    }
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long, default_value_t = 64)]
    vocab: usize,
    #[arg(long, default_value_t = 32)]
    seq_len: usize,
    #[arg(long, default_value_t = 8)]
    sources: usize,
    #[arg(long, default_value_t = 4096)]
    sequences: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the full corpus (transitions, sequences, source ids) as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    out: OutArgs,
    /// JSON grid file; axis flags are ignored when given.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long = "h-grid", value_delimiter = ',')]
    h_grid: Vec<usize>,
    #[arg(long = "nodes-grid", value_delimiter = ',')]
    nodes_grid: Vec<usize>,
    #[arg(long = "alpha-grid", value_delimiter = ',')]
    alpha_grid: Vec<f64>,
    #[arg(long = "k-grid", value_delimiter = ',')]
    k_grid: Vec<usize>,
    #[arg(long = "t-merge-grid", value_delimiter = ',')]
    t_merge_grid: Vec<usize>,
    /// Hold N·batch fixed across cells.
    #[arg(long)]
    global_batch: Option<usize>,
    #[arg(long, value_enum, default_value_t = TransportArg::InProcess)]
    transport: TransportArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelPreset {
    Desk,
    #[value(name = "2b")]
    B2,
    #[value(name = "7b")]
    B7,
}

#[derive(Args)]
struct CostArgs {
    #[arg(long, value_enum, default_value_t = ModelPreset::Desk)]
    model: ModelPreset,
    #[arg(long, default_value_t = 4)]
    nodes: usize,
    /// Count attention parameters as shared.
    #[arg(long)]
    attention: bool,
}

#[derive(Args)]
struct TheoryArgs {
    #[arg(long, default_value_t = 200)]
    rounds: usize,
    #[arg(long, default_value_t = 4)]
    h: usize,
    #[arg(long, default_value_t = 400)]
    variance_reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for theory.json; a run name resolves under the metrics root.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(v)?;
    match writeln!(std::io::stdout(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn resolve_run(root: &Path, run: &Path) -> PathBuf {
    if run.is_dir() || run.is_absolute() {
        run.to_path_buf()
    } else {
        root.join(run)
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let root = &cli.metrics_root;
    match cli.command {
        Command::Config { config, list } => {
            if list {
                for name in preset_names() {
                    println!("{name}");
                }
                return Ok(());
            }
            print_json(&config.resolve()?)?;
        }
        Command::GenCorpus(a) => {
            let spec = CorpusSpec {
                vocab: a.vocab,
                seq_len: a.seq_len,
                sources: a.sources,
                sequences: a.sequences,
                seed: a.seed,
                ..CorpusSpec::default()
            };
            let corpus = gen_corpus(&spec)?;
            let mut per_source = vec![0usize; spec.sources];
            for &c in &corpus.source_ids {
                per_source[c] += 1;
            }
            println!(
                "{} sequences of {} tokens from {} sources; per source {:?}",
                corpus.sequences.len(),
                spec.seq_len + 1,
                spec.sources,
                per_source
            );
            if let Some(path) = a.out {
                fs::write(&path, serde_json::to_string(&corpus)?)
                    .with_context(|| format!("writing {}", path.display()))?;
                info!("corpus written to {}", path.display());
            }
        }
        Command::Run { config, out, transport } => {
            let cfg = config.resolve()?;
            let dir = out.dir(root, &cfg);
            let run = run_experiment(
                &cfg,
                &RunOptions {
                    out_dir: Some(dir.clone()),
                    transport: transport.into(),
                },
            )?;
            println!(
                "{} rounds, final eval ce {:.5}, written to {}",
                run.rows.len(),
                run.final_eval_ce(),
                dir.display()
            );
        }
        Command::Ablate(a) => {
            let base = a.config.resolve()?;
            let grid = match &a.grid {
                Some(path) => {
                    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
                }
                None => AblationGrid {
                    h: a.h_grid,
                    nodes: a.nodes_grid,
                    alpha: a.alpha_grid,
                    k: a.k_grid,
                    t_merge: a.t_merge_grid,
                    global_batch: a.global_batch,
                    ..AblationGrid::new(base.clone())
                },
            };
            let dir = match (&a.out.out, &a.out.name) {
                (Some(d), _) => d.clone(),
                (None, Some(n)) => root.join(n),
                (None, None) => root.join(format!("ablate-{}", &base.hash_hex()[..12])),
            };
            let outcomes = run_ablation(&grid, Some(&dir), a.transport.into())?;
            println!("cell\th\tN\talpha\tK\tT_merge\tbatch\tfinal_eval_ce");
            for o in &outcomes {
                let c = &o.cell;
                let ce = match (&o.final_eval_ce, &o.error) {
                    (Some(v), _) => format!("{v:.5}"),
                    (None, Some(e)) => format!("error: {e}"),
                    (None, None) => "-".into(),
                };
                println!(
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{ce}",
                    c.index, c.h, c.nodes, c.alpha, c.k, c.t_merge, c.batch
                );
            }
            println!("summary written to {}", dir.display());
        }
        Command::Report { run, json } => {
            let dir = resolve_run(root, &run);
            let report = emit_report(&dir)?;
            if json {
                print_json(&report)?;
            } else {
                print!("{}", report.text());
            }
        }
        Command::Cost(a) => {
            let model = match a.model {
                ModelPreset::Desk => ExperimentConfig::desk().model,
                ModelPreset::B2 => preset_2b(),
                ModelPreset::B7 => preset_7b(),
            };
            print_json(&cost_report(&model, a.nodes, a.attention)?)?;
        }
        Command::TheoryCheck(a) => {
            let cfg = SuiteConfig {
                rounds: a.rounds,
                h: a.h,
                variance_reps: a.variance_reps,
                seed: a.seed,
                ..SuiteConfig::default()
            };
            let report = run_theory_suite(&cfg)?;
            for t in &report.toys {
                println!(
                    "{:<16} drift {}/{} violations (max ratio {:.3})  avg|∇F|² {:.4e} ≤ bound {:.4e}: {}  merge ratio {:.3}",
                    t.name,
                    t.drift_violations,
                    t.drift_checks,
                    t.max_drift_ratio,
                    t.avg_grad_sq,
                    t.bound.total,
                    t.bound_holds,
                    t.max_merge_ratio
                );
            }
            let factors: Vec<String> = report.variance.factors.iter().map(|f| format!("{f:.3}")).collect();
            println!("variance N·var/c: [{}] within [0.5, 2]: {}", factors.join(", "), report.variance.holds);
            if let Some(out) = a.out {
                let dir = resolve_run(root, &out);
                fs::create_dir_all(&dir)?;
                let path = dir.join(THEORY_FILE);
                fs::write(&path, serde_json::to_string_pretty(&report)?)?;
                println!("written to {}", path.display());
            }
            if !report.all_hold() {
                bail!("theory checks failed");
            }
        }
        Command::Serve { config, out, listen } => {
            let cfg = config.resolve()?;
            let dir = out.dir(root, &cfg);
            let opts = RunOptions {
                out_dir: Some(dir.clone()),
                transport: Transport::Tcp,
            };
            info!("serving {} nodes on {listen}", cfg.nodes);
            let run = serve(&cfg, listen.as_str(), &opts)?;
            println!(
                "{} rounds, final eval ce {:.5}, written to {}",
                run.rows.len(),
                run.final_eval_ce(),
                dir.display()
            );
        }
        Command::Work { config, connect, node } => {
            let cfg = config.resolve()?;
            let outcome = work(&cfg, connect.as_str(), node)?;
            println!(
                "node {} finished {} rounds, owned {:?}, {} bytes up, {} bytes down",
                outcome.node, outcome.rounds, outcome.owned, outcome.bytes_up, outcome.bytes_down
            );
        }
    }
    Ok(())
}
