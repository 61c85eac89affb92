use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pqm::error::{PqmError, Result};
use pqm::pipeline::*;
use pqm::speakersim::Split;

/// Quantise a toy classifier to NormalFloat, pretrain shared LoRA adapters on
/// a speaker pool, then adapt one adapter set per target speaker.
#[derive(Parser, Debug)]
#[command(name = "pqm", version)]
struct Cli {
    #[command(flatten)]
    opts: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Config file and the keys that flags override.
#[derive(Args, Debug)]
struct Overrides {
    /// TOML config; defaults to <out-dir>/config.toml when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory holding every artifact.
    #[arg(long, global = true, default_value = "run")]
    out_dir: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Code width k of the NormalFloat codebook.
    #[arg(long, global = true)]
    bits: Option<u8>,
    #[arg(long, global = true)]
    block_size: Option<usize>,
    /// LoRA rank.
    #[arg(long, global = true)]
    rank: Option<usize>,
    /// Layer kinds to quantise: comma list of linear, conv, embed, or all / none.
    #[arg(long, global = true)]
    select: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the data and train the full-precision base model.
    TrainBase,
    /// Fine-tune the base model on the pool into the teacher.
    TrainTeacher,
    /// Quantise a checkpoint and print its size summary.
    Quantise {
        /// Defaults to the run directory's base model.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Defaults to the run directory's quantised model.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train shared adapters on the multi-speaker pool.
    PretrainLora,
    /// Per-speaker adaptation and the system table.
    Adapt,
    /// Adaptation on ground-truth, teacher and self labels.
    AdaptSemisup {
        /// Teacher checkpoint; defaults to the run directory's teacher.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Test error against the number of adaptation utterances.
    SweepUtts {
        /// Comma list of counts; defaults to the config's.
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
    },
    /// Error rate of a checkpoint on one split of a data file.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        adapters: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Render every report in the run directory.
    Report,
    /// Every stage in order, then the report.
    Run,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

impl Overrides {
    fn resolve(&self) -> Result<PipelineConfig> {
        let existing = RunDir::new(&self.out_dir).config();
        let path = self.config.clone().or_else(|| existing.is_file().then_some(existing));
        let mut cfg = match path {
            Some(p) => PipelineConfig::load(&p)?,
            None => PipelineConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.bits {
            cfg.quant.bits = v;
        }
        if let Some(v) = self.block_size {
            cfg.quant.block_size = v;
        }
        if let Some(v) = self.rank {
            cfg.lora.rank = v;
        }
        if let Some(v) = &self.select {
            cfg.quant.select = v.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<String> {
    let dir = RunDir::new(&cli.opts.out_dir);
    if let Command::Eval { model, adapters, data, split } = &cli.command {
        let err = cmd_eval(model, adapters.as_deref(), data, (*split).into())?;
        return Ok(format!("error {err:.2}%\n"));
    }
    if let Command::Report = cli.command {
        return cmd_report(&dir);
    }
    let cfg = cli.opts.resolve()?;
    Ok(match cli.command {
        Command::TrainBase => {
            cmd_train_base(&cfg, &dir)?;
            format!("base model written to {}\n", dir.base_model().display())
        }
        Command::TrainTeacher => {
            cmd_train_teacher(&cfg, &dir)?;
            format!("teacher written to {}\n", dir.teacher_model().display())
        }
        Command::Quantise { input, output } => {
            let input = input.unwrap_or_else(|| dir.base_model());
            let output = output.unwrap_or_else(|| dir.quantised_model());
            cmd_quantise(&cfg, &dir, &input, &output)?.render()
        }
        Command::PretrainLora => {
            let set = cmd_pretrain_lora(&cfg, &dir)?;
            format!(
                "{} adapters, {} parameters, written to {}\n",
                set.adapters.len(),
                set.num_params(),
                dir.pretrained_adapters().display()
            )
        }
        Command::Adapt => cmd_adapt(&cfg, &dir)?.render(),
        Command::AdaptSemisup { teacher } => cmd_adapt_semisup(&cfg, &dir, teacher.as_deref())?.render(),
        Command::SweepUtts { counts } => {
            let counts = counts.unwrap_or_else(|| cfg.sweep.counts.clone());
            cmd_sweep_utts(&cfg, &dir, &counts)?.render()
        }
        Command::Run => cmd_run(&cfg, &dir)?,
        Command::Eval { .. } | Command::Report => unreachable!("handled above"),
    })
}

fn report_error(err: &PqmError) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(err.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            // Bad arguments are validation errors.
            return ExitCode::from(1);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => report_error(&e),
    }
}
