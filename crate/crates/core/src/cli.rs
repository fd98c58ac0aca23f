//! The `ntrf` command line.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;
use crate::corpus::{build_vocab, encode, CorpusStore, Vocab};
use crate::error::{Result, TrfError};
use crate::model::ModelFile;
use crate::par;
use crate::rescore::{self, NBestSet, ScoreTable, AVG_MODEL};
use crate::sampler::{stream_rng, transms_step, ChainState, JumpConfig};
use crate::trainer::{init_model, Trainer};

pub const SAMPLE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "ntrf", version, about = "Neural trans-dimensional random field language models")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores, 1 = bit-exact single-threaded mode).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a run config.
    Train(TrainArgs),
    /// Per-word perplexity of a test corpus.
    Ppl(PplArgs),
    /// Draw sentences from a trained model with TransMS.
    Sample(SampleArgs),
    /// Score n-best lists with one or more models.
    Rescore(RescoreArgs),
    /// Log-linearly interpolate two score tables.
    Interpolate(InterpolateArgs),
    /// Word error rate of hypotheses against references.
    Wer(WerArgs),
    /// Score text with the auxiliary autoregressive model stored in a model file.
    ScoreAux(ScoreAuxArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub max_iters: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PplArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub count: usize,
    /// Unrecorded TransMS steps before the first sample.
    #[arg(long, default_value_t = 100)]
    pub burn_in: usize,
    /// TransMS steps between recorded samples.
    #[arg(long, default_value_t = 1)]
    pub thin: usize,
    #[arg(long, default_value_t = JumpConfig::default().range)]
    pub range: usize,
    #[arg(long, default_value_t = JumpConfig::default().block)]
    pub block: usize,
    #[arg(long, default_value_t = JumpConfig::default().trials)]
    pub trials: usize,
    /// Output file (stdout when absent).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RescoreArgs {
    #[arg(long)]
    pub nbest: PathBuf,
    /// Model files; their scores are averaged into the `avg` column.
    #[arg(long = "model", required = true)]
    pub models: Vec<PathBuf>,
    /// Score table CSV (stdout when absent).
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Write the selected hypothesis per utterance here.
    #[arg(long)]
    pub select: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    pub acoustic_weight: f64,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// Weight of table `a`.
    #[arg(long, default_value_t = 0.5)]
    pub weight: f64,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// With `--select`, pick hypotheses from this n-best list.
    #[arg(long, requires = "select")]
    pub nbest: Option<PathBuf>,
    #[arg(long, requires = "nbest")]
    pub select: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    pub acoustic_weight: f64,
}

#[derive(Debug, Args)]
pub struct WerArgs {
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreAuxArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Corpus to report perplexity on.
    #[arg(long, conflicts_with = "nbest", required_unless_present = "nbest")]
    pub test: Option<PathBuf>,
    /// N-best list to score into a table.
    #[arg(long)]
    pub nbest: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// Exit status for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(e: &TrfError) -> i32 {
    match e {
        TrfError::Config(_) => 2,
        _ => 1,
    }
}

/// Parses `args` and runs the command; returns the process exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let Cli { common, command } = cli;
    match command {
        Command::Train(a) => cmd_train(&common, a),
        other => par::with_threads(common.threads.unwrap_or(0), || match other {
            Command::Ppl(a) => cmd_ppl(a),
            Command::Sample(a) => cmd_sample(&common, a),
            Command::Rescore(a) => cmd_rescore(a),
            Command::Interpolate(a) => cmd_interpolate(a),
            Command::Wer(a) => cmd_wer(a),
            Command::ScoreAux(a) => cmd_score_aux(a),
            Command::Train(_) => unreachable!("handled above"),
        }),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| TrfError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

pub fn cmd_train(common: &Common, a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    if let Some(p) = a.train {
        cfg.paths.train = Some(p);
    }
    if let Some(p) = a.dev {
        cfg.paths.dev = Some(p);
    }
    if let Some(p) = a.output_dir {
        cfg.paths.output_dir = Some(p);
    }
    if let Some(n) = a.max_iters {
        cfg.train.max_iters = n;
    }
    cfg.validate()?;
    let train_path = cfg.paths.train.clone().ok_or_else(|| TrfError::Config("paths.train is required".into()))?;
    let out_dir = cfg
        .paths
        .output_dir
        .clone()
        .ok_or_else(|| TrfError::Config("paths.output_dir is required".into()))?;
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("config.toml"), cfg.to_toml()?)?;

    par::with_threads(cfg.threads, || {
        let vocab = match &cfg.paths.vocab {
            Some(p) => Vocab::read(open(p)?)?,
            None => {
                let lines: Vec<String> = open(&train_path)?.lines().collect::<std::io::Result<_>>()?;
                build_vocab(lines.iter(), cfg.max_vocab)?
            }
        };
        let train = CorpusStore::read_file(&train_path, &vocab, cfg.max_len)?;
        let dev = match &cfg.paths.dev {
            Some(p) => Some(CorpusStore::read_file(p, &vocab, cfg.max_len)?),
            None => None,
        };
        let mut rng = stream_rng(cfg.seed, u64::MAX);
        let (mut model, q) = init_model(cfg.potential, cfg.proposal, vocab, &train, cfg.train.length_floor, &mut rng)?;
        if let Some(p) = &cfg.paths.embeddings {
            let text = std::fs::read_to_string(p)?;
            let n = model.potential.import_embeddings(&text, &model.vocab)?;
            log::info!("imported {n} embedding rows from {}", p.display());
        }
        let log_file = BufWriter::new(File::create(out_dir.join("train_log.csv"))?);
        let trainer = Trainer::new(cfg.train.clone(), cfg.jump, model, q, &train, dev.as_ref(), cfg.seed)?
            .with_checkpoint_dir(&out_dir.join("checkpoints"))?
            .with_log(Box::new(log_file))?;
        let (outcome, model, q) = trainer.train()?;
        let digest = ModelFile { model, proposal: Some(q) }.save(&out_dir.join("model.ntrf"))?;
        println!(
            "iterations={} stopped_early={} checkpoints={} model={} sha256={digest}",
            outcome.iterations,
            outcome.stopped_early,
            outcome.checkpoints.len(),
            out_dir.join("model.ntrf").display()
        );
        Ok(())
    })
}

pub fn cmd_ppl(a: PplArgs) -> Result<()> {
    let file = ModelFile::load(&a.model)?;
    let test = CorpusStore::read_file_full(&a.test, &file.model.vocab)?;
    let r = file.model.perplexity(&test)?;
    println!(
        "ppl={:.4} log_prob={:.6} tokens={} sentences={} excluded={}",
        r.ppl, r.log_prob, r.tokens, r.sentences, r.excluded
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct SampleRecord<'a> {
    schema_version: u32,
    length: usize,
    tokens: Vec<&'a str>,
    log_phi: f64,
    accepted_jump: bool,
    accepted_moves: usize,
}

pub fn cmd_sample(common: &Common, a: SampleArgs) -> Result<()> {
    let file = ModelFile::load(&a.model)?;
    let q = file
        .proposal
        .as_ref()
        .ok_or_else(|| TrfError::Checkpoint("model file has no proposal; sampling needs one".into()))?;
    let model = &file.model;
    let jump = JumpConfig { range: a.range, block: a.block, trials: a.trials };
    jump.validate()?;
    if a.thin == 0 {
        return Err(TrfError::Config("--thin must be >= 1".into()));
    }
    let mut out = output(a.output.as_deref())?;
    if a.count > 0 {
        let mut chain = ChainState::from_proposal(model, q, stream_rng(common.seed.unwrap_or(0), 0))?;
        for _ in 0..a.burn_in {
            transms_step(&mut chain, model, q, &jump)?;
        }
        for _ in 0..a.count {
            let mut rec = transms_step(&mut chain, model, q, &jump)?;
            for _ in 1..a.thin {
                rec = transms_step(&mut chain, model, q, &jump)?;
            }
            let r = SampleRecord {
                schema_version: SAMPLE_SCHEMA_VERSION,
                length: rec.tokens.len(),
                tokens: rec.tokens.iter().map(|&t| model.vocab.token(t).unwrap_or("<unk>")).collect(),
                log_phi: rec.log_phi,
                accepted_jump: rec.accepted_jump,
                accepted_moves: rec.accepted_moves,
            };
            serde_json::to_writer(&mut out, &r).map_err(|e| TrfError::Io(e.into()))?;
            writeln!(out)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn model_id(path: &Path, i: usize) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| format!("model{i}"))
}

fn write_selection(path: &Path, nbest: &NBestSet, scores: &ScoreTable, acoustic_weight: f64) -> Result<()> {
    let best = rescore::select_best(nbest, scores, acoustic_weight)?;
    let text: BTreeMap<String, String> = best.into_iter().map(|(u, h)| (u, h.text.clone())).collect();
    let mut w = BufWriter::new(File::create(path)?);
    rescore::write_transcripts(&mut w, &text)?;
    w.flush()?;
    Ok(())
}

pub fn cmd_rescore(a: RescoreArgs) -> Result<()> {
    let nbest = NBestSet::parse(open(&a.nbest)?)?;
    let files: Vec<ModelFile> = a.models.iter().map(|p| ModelFile::load(p)).collect::<Result<_>>()?;
    let mut ids: Vec<String> = Vec::new();
    for (i, p) in a.models.iter().enumerate() {
        let mut id = model_id(p, i);
        if id == AVG_MODEL || ids.contains(&id) {
            id = format!("model{i}");
        }
        ids.push(id);
    }
    let models: Vec<(String, &crate::model::TrfModel)> = ids.into_iter().zip(files.iter().map(|f| &f.model)).collect();
    let table = rescore::rescore(&nbest, &models)?;
    table.write_csv(output(a.output.as_deref())?)?;
    if let Some(sel) = &a.select {
        write_selection(sel, &nbest, &table, a.acoustic_weight)?;
    }
    Ok(())
}

pub fn cmd_interpolate(a: InterpolateArgs) -> Result<()> {
    let ta = ScoreTable::read_csv(open(&a.a)?)?;
    let tb = ScoreTable::read_csv(open(&a.b)?)?;
    let table = rescore::interpolate(&ta, &tb, a.weight)?;
    table.write_csv(output(a.output.as_deref())?)?;
    if let (Some(nb), Some(sel)) = (&a.nbest, &a.select) {
        let nbest = NBestSet::parse(open(nb)?)?;
        write_selection(sel, &nbest, &table, a.acoustic_weight)?;
    }
    Ok(())
}

pub fn cmd_wer(a: WerArgs) -> Result<()> {
    let hyps = rescore::read_transcripts(open(&a.hyp)?)?;
    let refs = rescore::read_transcripts(open(&a.reference)?)?;
    let r = rescore::wer(&hyps, &refs)?;
    println!(
        "wer={:.6} substitutions={} deletions={} insertions={} ref_words={} utterances={}",
        r.wer, r.counts.substitutions, r.counts.deletions, r.counts.insertions, r.counts.ref_words, r.utterances
    );
    Ok(())
}

pub fn cmd_score_aux(a: ScoreAuxArgs) -> Result<()> {
    let file = ModelFile::load(&a.model)?;
    let q = file
        .proposal
        .as_ref()
        .ok_or_else(|| TrfError::Checkpoint("model file has no auxiliary model".into()))?;
    let vocab = &file.model.vocab;
    if let Some(test) = &a.test {
        let store = CorpusStore::read_file_full(test, vocab)?;
        let xs: Vec<&[u32]> = store.sentences().iter().map(|s| s.ids()).collect();
        let scores: Vec<f64> = par::map(&xs, |x| q.q_logprob(x)).into_iter().collect::<Result<_>>()?;
        let log_prob: f64 = scores.iter().sum();
        // The end-of-sentence event counts as a predicted token.
        let tokens: usize = xs.iter().map(|x| x.len() + 1).sum();
        println!(
            "ppl={:.4} log_prob={:.6} tokens={} sentences={}",
            (-log_prob / tokens as f64).exp(),
            log_prob,
            tokens,
            xs.len()
        );
        if let Some(p) = &a.output {
            let mut w = BufWriter::new(File::create(p)?);
            for s in scores {
                writeln!(w, "{s}")?;
            }
            w.flush()?;
        }
        return Ok(());
    }
    let nb = a.nbest.as_ref().expect("clap enforces --test or --nbest");
    let nbest = NBestSet::parse(open(nb)?)?;
    let flat: Vec<(&str, &rescore::Hypothesis)> =
        nbest.utterances().flat_map(|(u, hs)| hs.iter().map(move |h| (u, h))).collect();
    let scores: Vec<Result<f64>> = par::map(&flat, |(_, h)| match encode(&h.text, vocab, usize::MAX) {
        Ok(x) => q.q_logprob(&x),
        Err(TrfError::Encode(_)) => Ok(f64::NEG_INFINITY),
        Err(e) => Err(e),
    });
    let mut table = ScoreTable::new(vec![AVG_MODEL.to_string()]);
    for ((utt, h), s) in flat.iter().zip(scores) {
        table.insert(utt, h.index, vec![s?])?;
    }
    table.write_csv(output(a.output.as_deref())?)?;
    Ok(())
}
