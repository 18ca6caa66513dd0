use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};

use droidformer::clients::{
    ingest_directory, read_index, write_index, AliasTable, Client, ClientConfig, ClientError, FetchStatus,
    SampleFilter, SampleStore, Verdict,
};
use droidformer::pipeline::{load_model, manifest_text_from_path, train_on_dataset, vocab_for};
use droidformer::preprocess::{
    read_dataset, split_train_test, synthesize_corpus, write_dataset, CleaningConfig, VocabProfile,
};
use droidformer::tokenizer::Vocab;
use droidformer::train::{evaluate, predict, RunFile, Task};

#[derive(Parser)]
#[command(name = "droidformer", version, about = "Android manifest malware classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Binary,
    Multi,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Binary => Task::Binary,
            TaskArg::Multi => Task::MultiCategory,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Decode, clean and label every APK in a directory into a dataset CSV.
    Ingest {
        apk_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Index CSV with hash,verdict,category columns.
        #[arg(long)]
        labels: PathBuf,
        /// Cleaning lexicon (one term per line); built-in list if absent.
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
    /// Write a seeded synthetic corpus.
    Synth {
        #[arg(long)]
        per_class: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stratified train/test split of a dataset.
    Split {
        dataset: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        train_out: PathBuf,
        #[arg(long)]
        test_out: PathBuf,
    },
    /// Build a vocabulary from the text column of a dataset.
    BuildVocab {
        dataset: PathBuf,
        #[arg(long, default_value_t = droidformer::pipeline::DEFAULT_VOCAB_MAX_SIZE)]
        max_size: usize,
        #[arg(long, default_value_t = droidformer::pipeline::DEFAULT_VOCAB_MIN_FREQ)]
        min_freq: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a classifier.
    Train {
        dataset: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
        /// key = value run file (learning rate, epochs, model shape, ...).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Vocabulary file; built from the dataset and written next to the
        /// checkpoint when absent.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        dataset: PathBuf,
        model: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Classify one APK, AXML or XML file (or literal text with --text).
    Predict {
        input: String,
        model: PathBuf,
        /// Treat INPUT as manifest text rather than a path.
        #[arg(long)]
        text: bool,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
    /// List, download and label samples from a repository and scanner.
    Fetch {
        /// e.g. `verdict=malware,from=2021-01-01,to=2021-12-31`.
        #[arg(long, default_value = "")]
        filter: String,
        #[arg(long, conflicts_with = "base_url")]
        offline_fixtures: Option<PathBuf>,
        #[arg(long)]
        base_url: Option<String>,
        /// Name of the environment variable holding the API key.
        #[arg(long)]
        credential_env: Option<String>,
        #[arg(long, default_value_t = 4)]
        rate_limit: u32,
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
        #[arg(long)]
        aliases: Option<PathBuf>,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        labels_out: PathBuf,
    },
}

fn lexicon(path: Option<&Path>) -> Result<CleaningConfig> {
    match path {
        Some(p) => CleaningConfig::from_file(p).with_context(|| format!("reading lexicon {}", p.display())),
        None => Ok(CleaningConfig::default_lexicon()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest {
            apk_dir,
            out,
            labels,
            lexicon: lex,
        } => {
            let labels = read_index(&labels)?;
            let outcome = ingest_directory(&apk_dir, &labels, &lexicon(lex.as_deref())?)?;
            write_dataset(&out, &outcome.records)?;
            info!(
                "{} records written, {} skipped",
                outcome.records.len(),
                outcome.skipped.len()
            );
        }
        Command::Synth {
            per_class,
            noise,
            seed,
            out,
        } => {
            if per_class == 0 || !(0.0..1.0).contains(&noise) {
                bail!("per-class must be at least 1 and noise must lie in [0, 1)");
            }
            let records = synthesize_corpus(per_class, &VocabProfile::default(), noise, seed);
            write_dataset(&out, &records)?;
        }
        Command::Split {
            dataset,
            test_fraction,
            seed,
            train_out,
            test_out,
        } => {
            let records = read_dataset(&dataset)?;
            let (train, test) = split_train_test(&records, test_fraction, seed)?;
            write_dataset(&train_out, &train)?;
            write_dataset(&test_out, &test)?;
        }
        Command::BuildVocab {
            dataset,
            max_size,
            min_freq,
            out,
        } => {
            let vocab = vocab_for(&read_dataset(&dataset)?, max_size, min_freq)?;
            vocab.save(&out)?;
            info!("{} tokens", vocab.len());
        }
        Command::Train {
            dataset,
            task,
            config,
            vocab,
            out,
            history,
        } => {
            let run = match &config {
                Some(p) => {
                    RunFile::parse(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
                        .map_err(|e| anyhow::anyhow!("config {}: {}", p.display(), e.replace('\n', " ")))?
                }
                None => RunFile::default(),
            };
            let records = read_dataset(&dataset)?;
            let (given, vocab_path) = match vocab {
                Some(p) => (Some(Vocab::load(&p)?), p),
                None => (None, out.with_extension("vocab.tsv")),
            };
            let vocab_ref = vocab_path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let built = given.is_none();
            let outcome = train_on_dataset(&records, task.into(), &run, given, &vocab_ref)?;
            if built {
                outcome.vocab.save(&vocab_path)?;
            }
            outcome.model.save(&out)?;
            if let Some(h) = history {
                write_text(&h, &outcome.history.to_tsv())?;
            }
            info!(
                "stopped ({}) after {} epochs; kept epoch {}",
                outcome.history.stop_reason.as_str(),
                outcome.history.epochs.len(),
                outcome.history.best_epoch
            );
        }
        Command::Eval {
            dataset,
            model,
            task,
            vocab,
            report,
        } => {
            let (trained, vocab) = load_model(&model, vocab.as_deref())?;
            let task: Task = task.into();
            if trained.task != task {
                bail!(
                    "checkpoint was trained for task {}, not {}",
                    trained.task.as_str(),
                    task.as_str()
                );
            }
            let records = task.select(&read_dataset(&dataset)?);
            let metrics = evaluate(&trained.model, &records, &vocab, task, trained.max_seq_len)?;
            if let Some(r) = report {
                write_text(&r, &metrics.to_key_value())?;
            }
            print!("{}", metrics.to_table("droidformer"));
        }
        Command::Predict {
            input,
            model,
            text,
            vocab,
            lexicon: lex,
        } => {
            let (trained, vocab) = load_model(&model, vocab.as_deref())?;
            let raw = if text {
                input
            } else {
                manifest_text_from_path(Path::new(&input))?
            };
            let p = predict(
                &trained.model,
                &raw,
                &vocab,
                trained.task,
                &lexicon(lex.as_deref())?,
                trained.max_seq_len,
            )?;
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "label = {}", p.class_name)?;
            writeln!(stdout, "label_index = {}", p.label)?;
            for (name, prob) in trained.class_names().iter().zip(&p.probabilities) {
                writeln!(stdout, "p.{name} = {prob}")?;
            }
        }
        Command::Fetch {
            filter,
            offline_fixtures,
            base_url,
            credential_env,
            rate_limit,
            parallelism,
            aliases,
            store,
            labels_out,
        } => {
            let mut config = match (offline_fixtures, base_url) {
                (Some(dir), _) => ClientConfig::offline(dir),
                (None, Some(url)) => ClientConfig::live(url, credential_env),
                (None, None) => bail!("either --offline-fixtures or --base-url is required"),
            };
            config.rate_limit_per_minute = rate_limit;
            config.parallelism = parallelism;
            let client = Client::new(config)?;
            let aliases = match aliases {
                Some(p) => AliasTable::load(&p)?,
                None => AliasTable::default_table(),
            };
            let store = SampleStore::open(store)?;
            let mut samples = client.fetch_sample_list(&SampleFilter::parse(&filter)?)?;
            let results = client.download_all(&store, &samples);
            for (d, r) in samples.iter_mut().zip(results) {
                d.fetch_status = match r {
                    Ok(p) => FetchStatus::Stored(p),
                    Err(e) => {
                        warn!("download {}: {e}", d.sha256);
                        FetchStatus::Failed(e.to_string())
                    }
                };
            }
            let mut labelled = Vec::new();
            for mut d in samples {
                if !matches!(d.fetch_status, FetchStatus::Stored(_)) {
                    continue;
                }
                match client.label_sample(&aliases, &d.sha256) {
                    Ok((verdict, category)) => {
                        d.verdict = Some(verdict);
                        d.category = category;
                    }
                    Err(ClientError::UnmappableCategory(raw)) => {
                        warn!("{}: unmappable family `{raw}`; kept without category", d.sha256);
                        d.verdict = Some(Verdict::Malware);
                        d.category = None;
                    }
                    Err(e) => {
                        warn!("label {}: {e}", d.sha256);
                        continue;
                    }
                }
                d.filename = Some(format!("{}.apk", d.sha256));
                labelled.push(d);
            }
            write_index(&labels_out, &labelled)?;
            info!("{} samples labelled", labelled.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace(['\n', '\r'], " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
