use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cel_core::checkpoint::Checkpoint;
use cel_core::config::{Profile, RunConfig};
use cel_core::corpus::{all_pairs_trials, gen_corpus, gen_eval_corpus, load_corpus, write_corpus, Corpus};
use cel_core::encoder::Encoder;
use cel_core::eval::{det_points, eer, min_dcf, parse_trial_list, score_trials, write_det_csv, write_scores, write_trial_list, Trial};
use cel_core::features::{read_wav, LogMel};
use cel_core::gradcheck::{run_gradcheck, GradScope};
use cel_core::losses::SimilarityKind;
use cel_core::trainer::{
    continue_finetune, continue_pretrain, finetune, finetune_label, pretrain, pretrain_label, Init, Objective, TrainRun,
    TrainState, CHECKPOINT_FILE,
};
use cel_core::CelError;

#[derive(Parser)]
#[command(name = "cel", version, about = "Contrastive equilibrium learning for speaker embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base profile: desk or paper
    #[arg(long, global = true)]
    profile: Option<String>,
    /// Root seed for every random stream
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for batch preparation (0 = all cores)
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/eval corpora and the eval trial list
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Unsupervised CEL pre-training
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Corpus directory or manifest
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// aprot or acont
        #[arg(long)]
        similarity: Option<String>,
        /// Continue from a checkpoint of this run
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Supervised fine-tuning
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// aprot, acont, ge2e, cosface, arcface or adacos
        #[arg(long)]
        objective: Option<String>,
        #[arg(long)]
        margin: Option<f64>,
        #[arg(long)]
        scale: Option<f64>,
        /// `random` or a checkpoint path
        #[arg(long)]
        init: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a trial list with a checkpoint; report EER and MinDCF
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        /// Directory trial paths are relative to (defaults to the trial file's directory)
        #[arg(long)]
        audio_root: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every loss gradient
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// all, unif, aprot, acont, total, ge2e, cosface, arcface, adacos or encoder
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

struct StageError {
    stage: &'static str,
    err: CelError,
}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, StageError>;
}

impl<T> Stage<T> for Result<T, CelError> {
    fn stage(self, stage: &'static str) -> Result<T, StageError> {
        self.map_err(|err| StageError { stage, err })
    }
}

fn resolve(common: &Common) -> Result<RunConfig, StageError> {
    let profile = common.profile.as_deref().map(str::parse::<Profile>).transpose().stage("config")?;
    let mut cfg = RunConfig::load(common.config.as_deref(), profile).stage("config")?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(w) = common.workers {
        cfg.pretrain.workers = w;
        cfg.finetune.workers = w;
    }
    cfg.sync_seeds().stage("config")
}

fn init_logging() {
    let level = match std::env::var("CEL_LOG").as_deref() {
        Ok("quiet") => log::LevelFilter::Off,
        Ok("debug") => log::LevelFilter::Debug,
        _ => log::LevelFilter::Info,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
}

fn summarize(name: &str, c: &Corpus) {
    println!(
        "{name}: {} speakers, {} utterances, {:.1} s",
        c.speakers().len(),
        c.len(),
        c.total_seconds()
    );
}

fn gen_data(common: &Common, out: &Path) -> Result<(), StageError> {
    let cfg = resolve(common)?;
    cfg.echo(out).stage("gen-data")?;
    let train = gen_corpus(&cfg.corpus, cfg.seed).stage("gen-data")?;
    write_corpus(&train, &out.join("train")).stage("gen-data")?;
    summarize("train", &train);
    let eval = gen_eval_corpus(&cfg.corpus, cfg.seed).stage("gen-data")?;
    write_corpus(&eval, &out.join("eval")).stage("gen-data")?;
    let trials: Vec<Trial> = all_pairs_trials(&eval).into_iter().map(|(t, a, b)| Trial::new(t, a, b)).collect();
    write_trial_list(&out.join("eval").join("trials.txt"), &trials).stage("gen-data")?;
    summarize("eval", &eval);
    println!("trials: {}", trials.len());
    Ok(())
}

fn report(run: &TrainRun, out: &Path) {
    if let Some(last) = run.records.last() {
        println!("epoch {} loss {:.6}", last.epoch, last.loss_total);
    }
    println!("checkpoint: {}", out.join(CHECKPOINT_FILE).display());
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(StageError { stage, err }) => {
            eprintln!("error: {stage}: {err}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode, StageError> {
    match command {
        Command::GenData { common, out } => gen_data(&common, &out)?,
        Command::Pretrain {
            common,
            corpus,
            out,
            lambda,
            batch_size,
            epochs,
            similarity,
            resume,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(l) = lambda {
                cfg.pretrain.lambda = l;
            }
            if let Some(k) = batch_size {
                cfg.pretrain.batch_size = k;
            }
            if let Some(e) = epochs {
                cfg.pretrain.epochs = e;
            }
            if let Some(s) = similarity {
                cfg.pretrain.similarity = match s.as_str() {
                    "aprot" => SimilarityKind::Aprot,
                    "acont" => SimilarityKind::Acont,
                    _ => return Err(CelError::Schema(format!("unknown similarity `{s}`"))).stage("config"),
                };
            }
            cfg.validate().stage("config")?;
            cfg.echo(&out).stage("pretrain")?;
            let data = load_corpus(&corpus).stage("load corpus")?;
            let run = match resume {
                Some(p) => {
                    let state = TrainState::from_checkpoint(&Checkpoint::load(&p).stage("resume")?).stage("resume")?;
                    continue_pretrain(state, &data, &cfg.pretrain, &cfg.frontend())
                }
                None => pretrain(&data, &cfg.pretrain, &cfg.frontend()),
            }
            .stage("pretrain")?;
            run.write(&out, &pretrain_label(&cfg.pretrain)).stage("pretrain")?;
            report(&run, &out);
        }
        Command::Finetune {
            common,
            corpus,
            out,
            objective,
            margin,
            scale,
            init,
            epochs,
            resume,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(o) = objective {
                cfg.finetune.objective = o.parse::<Objective>().stage("config")?;
            }
            if let Some(m) = margin {
                cfg.finetune.margin.margin = m;
            }
            if let Some(s) = scale {
                cfg.finetune.margin.scale = s;
            }
            if let Some(i) = init {
                cfg.finetune.init = Init::try_from(i).stage("config")?;
            }
            if let Some(e) = epochs {
                cfg.finetune.epochs = e;
            }
            cfg.validate().stage("config")?;
            cfg.echo(&out).stage("finetune")?;
            let data = load_corpus(&corpus).stage("load corpus")?;
            let run = match resume {
                Some(p) => {
                    let state = TrainState::from_checkpoint(&Checkpoint::load(&p).stage("resume")?).stage("resume")?;
                    continue_finetune(state, &data, &cfg.finetune, &cfg.frontend())
                }
                None => finetune(&data, &cfg.finetune, &cfg.frontend()),
            }
            .stage("finetune")?;
            run.write(&out, &finetune_label(&cfg.finetune)).stage("finetune")?;
            report(&run, &out);
        }
        Command::Evaluate {
            common,
            checkpoint,
            trials,
            audio_root,
            out,
        } => {
            let cfg = resolve(&common)?;
            let ck = Checkpoint::load(&checkpoint).stage("load checkpoint")?;
            let features = ck.header.features.clone().unwrap_or(cfg.features.clone());
            let encoder =
                Encoder::from_params(ck.header.encoder.clone(), ck.require("encoder").stage("load checkpoint")?.to_vec())
                    .stage("load checkpoint")?;
            let list = parse_trial_list(&trials).stage("read trials")?;
            let root = audio_root.unwrap_or_else(|| trials.parent().unwrap_or(Path::new(".")).to_path_buf());
            let logmel = LogMel::new(features).stage("evaluate")?;
            let ids: BTreeSet<&str> = list.iter().flat_map(|t| [t.enroll_id.as_str(), t.test_id.as_str()]).collect();
            let mut embeddings = HashMap::new();
            for id in ids {
                let path = root.join(id);
                if !path.is_file() {
                    return Err(CelError::UnknownId(format!("{id} (no file at {})", path.display()))).stage("evaluate");
                }
                let wav = read_wav(&path).stage("evaluate")?;
                let e = encoder.embed(&logmel.compute(&wav).stage("evaluate")?).stage("evaluate")?;
                embeddings.insert(id.to_string(), e);
            }
            let scored = score_trials(&embeddings, &list).stage("evaluate")?;
            let (e, _) = eer(&scored).stage("evaluate")?;
            let (d, _) = min_dcf(&scored, cfg.eval.dcf).stage("evaluate")?;
            std::fs::create_dir_all(&out).map_err(CelError::from).stage("evaluate")?;
            write_scores(&out.join("scores.txt"), &scored).stage("evaluate")?;
            write_det_csv(&out.join("det.csv"), &det_points(&scored).stage("evaluate")?).stage("evaluate")?;
            cfg.echo(&out).stage("evaluate")?;
            println!("trials: {}", scored.len());
            println!("EER: {:.2}%", 100.0 * e);
            println!("MinDCF: {:.4}", d);
        }
        Command::Gradcheck { common, scope, instances } => {
            let cfg = resolve(&common)?;
            let scope: GradScope = scope.parse().stage("config")?;
            let reports = run_gradcheck(scope, cfg.seed, instances).stage("gradcheck")?;
            println!("{:<8} {:>4} {:>12}", "loss", "n", "max rel err");
            for r in &reports {
                println!("{r}");
            }
            if reports.iter().any(|r| !r.passed()) {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
