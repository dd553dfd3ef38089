use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hmer::checkpoint::Checkpoint;
use hmer::config::RunConfig;
use hmer::data::{
    export_gray_image, generate_synth, load_corpus, load_image, pad_to_factor, GrayMap, SynthSpec, VOCAB_FILE,
};
use hmer::encoder::DOWNSAMPLE;
use hmer::train::{evaluate, FitOutputs};
use hmer::{Exec, Model, Trainer, Vocabulary};

const CONFIG_ECHO: &str = "config.txt";
const SPEC_ECHO: &str = "spec.txt";
const LOG_FILE: &str = "train.log";

#[derive(Parser)]
#[command(name = "hmer", version, about = "Handwritten math expression recognizer")]
struct Cli {
    /// Run kernels on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Decode a single PGM image.
    Predict {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write per-step attention overlays and stem feature maps here.
        #[arg(long)]
        dump_attention: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory; overrides `paths.corpus`.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    teacher_forcing: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    no_coverage: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Comma-separated learning rates; one run per rate under `<out>/lr=<rate>`.
    #[arg(long, value_delimiter = ',')]
    lr_sweep: Vec<f64>,
}

/// A path the user named does not exist (exit status 2).
#[derive(Debug)]
struct MissingPath(PathBuf);

impl std::fmt::Display for MissingPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: no such file or directory", self.0.display())
    }
}

impl std::error::Error for MissingPath {}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(MissingPath(path.to_path_buf()).into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    match run(cli.command, exec) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<MissingPath>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(command: Command, exec: Exec) -> Result<()> {
    match command {
        Command::Synth { spec, out, force } => synth(&spec, &out, force),
        Command::Train(args) => train(&args, exec),
        Command::Eval { corpus, checkpoint } => eval(&corpus, &checkpoint, exec),
        Command::Predict {
            image,
            checkpoint,
            dump_attention,
        } => predict(&image, &checkpoint, dump_attention.as_deref(), exec),
    }
}

fn synth(spec_path: &Path, out: &Path, force: bool) -> Result<()> {
    require(spec_path)?;
    let text = fs::read_to_string(spec_path).with_context(|| format!("reading {}", spec_path.display()))?;
    let spec = SynthSpec::parse(&text)?;
    if out.exists() && !force && fs::read_dir(out)?.next().is_some() {
        bail!("{} is not empty; pass --force to overwrite", out.display());
    }
    let (count, vocab) = generate_synth(&spec, out)?;
    fs::write(out.join(SPEC_ECHO), spec.to_text())?;
    println!("samples={count} vocab={}", vocab.len());
    Ok(())
}

fn train(args: &TrainArgs, exec: Exec) -> Result<()> {
    let text = match &args.config {
        Some(path) => {
            require(path)?;
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?
        }
        None => String::new(),
    };
    let mut overrides: Vec<(&str, String)> = Vec::new();
    if let Some(c) = &args.corpus {
        overrides.push(("paths.corpus", c.display().to_string()));
    }
    if let Some(r) = args.teacher_forcing {
        overrides.push(("train.teacher_forcing_rate", r.to_string()));
    }
    if let Some(lr) = args.lr {
        overrides.push(("train.learning_rate", lr.to_string()));
    }
    if args.no_coverage {
        overrides.push(("train.coverage", "false".into()));
    }
    if let Some(s) = args.seed {
        overrides.push(("train.seed", s.to_string()));
    }
    if let Some(n) = args.max_steps {
        overrides.push(("train.max_steps", n.to_string()));
    }
    if let Some(n) = args.epochs {
        overrides.push(("train.epochs", n.to_string()));
    }
    let cfg = RunConfig::parse_with(&text, &overrides)?;
    let corpus_dir = PathBuf::from(cfg.corpus.as_deref().context("no corpus: pass --corpus or set paths.corpus")?);
    require(&corpus_dir)?;
    let vocab = Vocabulary::load(corpus_dir.join(VOCAB_FILE))?;
    let corpus = load_corpus(&corpus_dir, &vocab, DOWNSAMPLE, exec)?;

    if args.lr_sweep.is_empty() {
        return train_one(&cfg, &vocab, &corpus, &args.out, exec);
    }
    for &lr in &args.lr_sweep {
        let mut run = cfg.clone();
        run.train.learning_rate = lr;
        run.validate()?;
        let dir = args.out.join(format!("lr={lr:?}"));
        println!("run lr={lr:?} out={}", dir.display());
        train_one(&run, &vocab, &corpus, &dir, exec)?;
    }
    Ok(())
}

fn train_one(cfg: &RunConfig, vocab: &Vocabulary, corpus: &[hmer::data::Sample], out: &Path, exec: Exec) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let config_text = cfg.to_text();
    fs::write(out.join(CONFIG_ECHO), &config_text)?;
    let model = Model::new(&cfg.model, vocab, cfg.train.seed)?.with_exec(exec);
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let mut log = Tee {
        file: fs::File::create(out.join(LOG_FILE))?,
        stdout: std::io::stdout().lock(),
    };
    let outputs = FitOutputs {
        checkpoint_dir: Some(out.to_path_buf()),
        config_text,
    };
    trainer.fit(corpus, &mut log, &outputs)?;
    Ok(())
}

struct Tee<A, B> {
    file: A,
    stdout: B,
}

impl<A: Write, B: Write> Write for Tee<A, B> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.file.write_all(buf)?;
        self.stdout.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.file.flush()?;
        self.stdout.flush()
    }
}

/// Rebuilds the model stored in a checkpoint.
fn load_model(path: &Path, exec: Exec) -> Result<Model> {
    require(path)?;
    let ckpt = Checkpoint::load(path)?;
    let cfg = RunConfig::parse(&ckpt.config).context("checkpoint config")?;
    let vocab = Vocabulary::parse(&ckpt.vocab).context("checkpoint vocabulary")?;
    let mut model = Model::new(&cfg.model, &vocab, cfg.train.seed)?.with_exec(exec);
    ckpt.restore_params(model.params_mut())?;
    Ok(model)
}

fn eval(corpus_dir: &Path, checkpoint: &Path, exec: Exec) -> Result<()> {
    require(corpus_dir)?;
    let model = load_model(checkpoint, exec)?;
    let corpus = load_corpus(corpus_dir, model.vocab(), DOWNSAMPLE, exec)?;
    let score = evaluate(&model, &corpus, exec)?;
    print!("{}", score.table());
    println!("{}", score.summary());
    Ok(())
}

fn predict(image_path: &Path, checkpoint: &Path, dump: Option<&Path>, exec: Exec) -> Result<()> {
    require(image_path)?;
    let model = load_model(checkpoint, exec)?;
    let image = pad_to_factor(&load_image(image_path)?, DOWNSAMPLE);
    let decoded = model.greedy_decode(&image)?;
    let tokens = model.vocab().decode(&decoded.tokens)?;
    println!("{}", tokens.join(" "));

    if let Some(dir) = dump {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let (h, w) = (image.shape()[2], image.shape()[3]);
        let ink = GrayMap::new(h, w, image.data().to_vec());
        for (t, maps) in decoded.attention.iter().enumerate() {
            for (s, alpha) in maps.iter().enumerate() {
                let overlay = alpha.resized(h, w).overlay_on(&ink);
                export_gray_image(&overlay, dir.join(format!("step{t:03}_scale{s}.pgm")))?;
            }
        }
        for (c, map) in model.stem_maps(&image)?.iter().enumerate() {
            export_gray_image(map, dir.join(format!("stem_{c:02}.pgm")))?;
        }
    }
    Ok(())
}
