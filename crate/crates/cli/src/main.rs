use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gatemabsa::checkpoint::load_checkpoint;
use gatemabsa::feature_io::{read_record_file, validate_record, write_synthetic, Split, SynthSpec};
use gatemabsa::training::{evaluate, train};
use gatemabsa::{Error, Manifest, TrainConfig};

#[derive(Parser)]
#[command(name = "gatemabsa", version, about = "Train and evaluate gated matrix-LSTM aspect sentiment models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON config and write the best checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on the records of a manifest. Prints metrics as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::All)]
        split: SplitArg,
    },
    /// Write a synthetic dataset (records plus manifest.json) to a directory.
    GenSynth {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        examples: usize,
        #[arg(long)]
        tokens: usize,
        #[arg(long)]
        separation: f64,
        /// Fraction of records tagged as dev in the manifest.
        #[arg(long, default_value_t = 0.25)]
        dev_fraction: f64,
    },
    /// Print the shapes, masks and validation result of one record file.
    Inspect {
        #[arg(long)]
        record: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
    All,
}

/// Failure of a subcommand, split by exit status.
enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Invalid(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn run_train(config: &Path) -> Result<(), Failure> {
    let cfg = TrainConfig::load(config)?;
    let outcome = train(&cfg)?;
    let best = &outcome.history[outcome.best_epoch - 1];
    println!(
        "trained {} epochs; best epoch {} (dev loss {:.6}, accuracy {:.4}, macro-F1 {:.4}); checkpoint {}",
        outcome.history.len(),
        outcome.best_epoch,
        best.dev_loss,
        best.dev_accuracy,
        best.dev_macro_f1,
        cfg.checkpoint_out.display()
    );
    Ok(())
}

fn run_eval(checkpoint: &Path, manifest: &Path, split: SplitArg) -> Result<(), Failure> {
    let model = load_checkpoint(checkpoint)?;
    let manifest = Manifest::load(manifest)?;
    let manifest = match split {
        SplitArg::Train => manifest.split(Split::Train),
        SplitArg::Dev => manifest.split(Split::Dev),
        SplitArg::Test => manifest.split(Split::Test),
        SplitArg::All => manifest,
    };
    if manifest.is_empty() {
        return Err(Failure::Invalid("no records selected from the manifest".into()));
    }
    let metrics = evaluate(&model, &manifest.load_records()?)?;
    println!("{}", serde_json::to_string_pretty(&metrics).map_err(Error::from)?);
    Ok(())
}

fn mask_string(n: usize, on: impl Fn(usize) -> bool) -> String {
    (0..n).map(|t| if on(t) { '1' } else { '0' }).collect()
}

fn run_inspect(path: &Path) -> Result<(), Failure> {
    let r = read_record_file(path)?;
    println!("id            {}", r.id);
    println!("label         {:?}", r.label);
    println!("n_tokens      {}", r.n_tokens);
    println!("token_feats   {:?}", r.token_feats.shape());
    println!("aspect_feats  {:?}", r.aspect_feats.shape());
    println!("image_grid    {:?}", r.image_grid.shape());
    println!("adjacency     {:?}", r.adjacency.shape());
    println!("aspect mask   {}", mask_string(r.n_tokens, |t| r.aspect_positions.contains(&t)));
    if r.adjacency.shape() == [r.n_tokens, r.n_tokens] {
        let degrees: Vec<String> =
            (0..r.n_tokens).map(|i| format!("{}", r.adjacency.row(i).iter().sum::<f64>())).collect();
        println!("degrees       {}", degrees.join(" "));
    }
    let problems = validate_record(&r);
    if problems.is_empty() {
        println!("validation    ok");
        Ok(())
    } else {
        for p in &problems {
            println!("validation    {p}");
        }
        Err(Error::Validation(problems).into())
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train { config } => run_train(&config),
        Command::Eval { checkpoint, manifest, split } => run_eval(&checkpoint, &manifest, split),
        Command::GenSynth { seed, out, examples, tokens, separation, dev_fraction } => {
            let spec = SynthSpec { seed, examples, tokens, separation };
            let manifest = write_synthetic(&out, &spec, dev_fraction)?;
            println!("wrote {} records and manifest.json to {}", manifest.len(), out.display());
            Ok(())
        }
        Command::Inspect { record } => run_inspect(&record),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
