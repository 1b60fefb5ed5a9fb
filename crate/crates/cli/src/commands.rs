use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use ktransformer::corpus::{filter_pairs, preprocess, EncodedPair, ParallelCorpus, Profile, Vocabulary};
use ktransformer::metrics::{
    corpus_bleu, length_bucket_report, render_csv, render_svg, BleuConfig, BleuReport, SystemBuckets,
};
use ktransformer::model::ClusterMode;
use ktransformer::synthetic::{copy_corpus, topic_corpus, SyntheticCorpus, TopicSpec};
use ktransformer::trainer::{self, load_checkpoint, Checkpoint, FINAL_CHECKPOINT};
use ktransformer::KTransformer;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{read_file, CliError, CliResult};

pub const TRAIN_SRC: &str = "train.src";
pub const TRAIN_TGT: &str = "train.tgt";
pub const VOCAB_SRC: &str = "vocab.src";
pub const VOCAB_TGT: &str = "vocab.tgt";
pub const STATS: &str = "stats.toml";
pub const CONFIG_ECHO: &str = "config.toml";

fn lines(text: &str) -> Vec<&str> {
    text.lines().collect()
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}

/// Written next to a preprocessed corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusStats {
    pub profile_src: Profile,
    pub profile_tgt: Profile,
    pub max_len: usize,
    pub pairs_in: usize,
    pub pairs_kept: usize,
    pub dropped_too_long: usize,
    pub dropped_empty_source: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
}

pub struct PreprocessArgs {
    pub src: PathBuf,
    pub tgt: PathBuf,
    pub profile_src: Profile,
    pub profile_tgt: Profile,
    pub out_dir: PathBuf,
    pub max_len: usize,
    pub vocab_size: usize,
    pub min_freq: usize,
}

pub fn preprocess_cmd(a: &PreprocessArgs) -> CliResult<CorpusStats> {
    let src = read_file(&a.src)?;
    let tgt = read_file(&a.tgt)?;
    let corpus = ParallelCorpus::from_lines(&lines(&src), &lines(&tgt), a.profile_src, a.profile_tgt)?;
    if corpus.is_empty() {
        return Err(ktransformer::Error::EmptyCorpus.into());
    }
    let mut kept_src = Vec::new();
    let mut kept_tgt = Vec::new();
    let (mut too_long, mut empty) = (0, 0);
    for (s, t) in corpus.src.iter().zip(&corpus.tgt) {
        if s.is_empty() {
            empty += 1;
        } else if s.len() > a.max_len || t.len() > a.max_len {
            too_long += 1;
        } else {
            kept_src.push(s.clone());
            kept_tgt.push(t.clone());
        }
    }
    if kept_src.is_empty() {
        return Err(ktransformer::Error::EmptyCorpus.into());
    }
    let src_vocab = Vocabulary::build(&kept_src, a.vocab_size, a.min_freq)?;
    let tgt_vocab = Vocabulary::build(&kept_tgt, a.vocab_size, a.min_freq)?;
    create_dir(&a.out_dir)?;
    let join = |rows: &[Vec<String>]| -> String { rows.iter().map(|r| r.join(" ") + "\n").collect() };
    write(&a.out_dir.join(TRAIN_SRC), join(&kept_src))?;
    write(&a.out_dir.join(TRAIN_TGT), join(&kept_tgt))?;
    write(&a.out_dir.join(VOCAB_SRC), src_vocab.to_text())?;
    write(&a.out_dir.join(VOCAB_TGT), tgt_vocab.to_text())?;
    let stats = CorpusStats {
        profile_src: a.profile_src,
        profile_tgt: a.profile_tgt,
        max_len: a.max_len,
        pairs_in: corpus.len(),
        pairs_kept: kept_src.len(),
        dropped_too_long: too_long,
        dropped_empty_source: empty,
        src_vocab: src_vocab.len(),
        tgt_vocab: tgt_vocab.len(),
    };
    write(
        &a.out_dir.join(STATS),
        toml::to_string(&stats).expect("stats serialize"),
    )?;
    Ok(stats)
}

/// A preprocessed corpus directory.
pub struct Prepared {
    pub stats: CorpusStats,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub corpus: ParallelCorpus,
}

pub fn load_prepared(dir: &Path) -> CliResult<Prepared> {
    let stats_path = dir.join(STATS);
    let stats: CorpusStats = toml::from_str(&read_file(&stats_path)?).map_err(|e| CliError::Config {
        path: stats_path,
        message: e.to_string(),
    })?;
    let tokens = |path: PathBuf| -> CliResult<Vec<Vec<String>>> {
        Ok(read_file(&path)?
            .lines()
            .map(|l| l.split_whitespace().map(String::from).collect())
            .collect())
    };
    let src = tokens(dir.join(TRAIN_SRC))?;
    let tgt = tokens(dir.join(TRAIN_TGT))?;
    if src.len() != tgt.len() {
        return Err(ktransformer::Error::Misaligned {
            src: src.len(),
            tgt: tgt.len(),
        }
        .into());
    }
    Ok(Prepared {
        src_vocab: Vocabulary::from_text(&read_file(&dir.join(VOCAB_SRC))?)?,
        tgt_vocab: Vocabulary::from_text(&read_file(&dir.join(VOCAB_TGT))?)?,
        corpus: ParallelCorpus {
            src,
            tgt,
            src_profile: stats.profile_src,
            tgt_profile: stats.profile_tgt,
        },
        stats,
    })
}

pub struct TrainArgs {
    pub config: RunConfig,
    pub out_dir: PathBuf,
    pub quiet: bool,
}

pub struct TrainSummary {
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub best_val_bleu: Option<f64>,
    pub out_dir: PathBuf,
}

pub fn train_cmd(a: TrainArgs) -> CliResult<TrainSummary> {
    let mut cfg = a.config;
    let prep = load_prepared(&cfg.data.corpus_dir)?;
    cfg.model.src_vocab = prep.src_vocab.len();
    cfg.model.tgt_vocab = prep.tgt_vocab.len();
    cfg.model.max_len = cfg.model.max_len.max(1);
    cfg.train.out_dir = Some(a.out_dir.clone());
    cfg.model.validate()?;
    cfg.train.validate()?;

    let pairs = filter_pairs(&prep.corpus, &prep.src_vocab, &prep.tgt_vocab, cfg.model.max_len)?;
    let valid: Vec<EncodedPair> = match (&cfg.data.valid_src, &cfg.data.valid_tgt) {
        (Some(s), Some(t)) => {
            let vs = read_file(s)?;
            let vt = read_file(t)?;
            let vc = ParallelCorpus::from_lines(&lines(&vs), &lines(&vt), prep.stats.profile_src, prep.stats.profile_tgt)?;
            filter_pairs(&vc, &prep.src_vocab, &prep.tgt_vocab, cfg.model.max_len)?
        }
        (None, None) => pairs.clone(),
        _ => return Err(CliError::Usage("valid_src and valid_tgt must be given together".into())),
    };
    let valid: Vec<EncodedPair> = valid.into_iter().take(cfg.data.val_max_pairs).collect();

    create_dir(&a.out_dir)?;
    write(&a.out_dir.join(CONFIG_ECHO), cfg.to_toml())?;
    let metadata = BTreeMap::from([
        ("src_profile".to_string(), prep.stats.profile_src.to_string()),
        ("tgt_profile".to_string(), prep.stats.profile_tgt.to_string()),
        ("src_vocab".to_string(), prep.src_vocab.to_text()),
        ("tgt_vocab".to_string(), prep.tgt_vocab.to_text()),
    ]);
    let mut model = KTransformer::<f32>::new(cfg.model.clone())?;
    let quiet = a.quiet;
    let outcome = trainer::train_with(&mut model, &pairs, &valid, &cfg.train, &metadata, |row| {
        if quiet {
            return;
        }
        if let Some(b) = row.val_bleu {
            eprintln!("step {:>6}  loss {:.4}  val BLEU {:.2}", row.step, row.loss, b * 100.0);
        } else if row.step % 50 == 0 {
            eprintln!("step {:>6}  loss {:.4}", row.step, row.loss);
        }
    })?;
    Ok(TrainSummary {
        steps: cfg.train.max_steps,
        final_loss: outcome.log.last().map(|r| r.loss),
        best_val_bleu: outcome.best_val_bleu,
        out_dir: a.out_dir,
    })
}

/// A checkpoint plus the vocabularies and profiles stored with it.
pub struct Translator {
    pub model: KTransformer<f32>,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub src_profile: Profile,
    pub tgt_profile: Profile,
}

impl Translator {
    pub fn load(path: &Path) -> CliResult<Self> {
        let ck: Checkpoint<f32> = load_checkpoint(path)?;
        let meta = |key: &str| -> CliResult<&String> {
            ck.metadata
                .get(key)
                .ok_or_else(|| CliError::Data(format!("{}: checkpoint lacks {key}", path.display())))
        };
        let t = Self {
            src_vocab: Vocabulary::from_text(meta("src_vocab")?)?,
            tgt_vocab: Vocabulary::from_text(meta("tgt_vocab")?)?,
            src_profile: meta("src_profile")?.parse()?,
            tgt_profile: meta("tgt_profile")?.parse()?,
            model: ck.model,
        };
        Ok(t)
    }

    /// Translates one raw line; lines with no tokens translate to "".
    pub fn translate(&self, line: &str, max_out_len: usize) -> CliResult<String> {
        let mut tokens = preprocess(line, self.src_profile);
        if tokens.is_empty() {
            return Ok(String::new());
        }
        tokens.truncate(self.model.config().max_len);
        let ids = self.src_vocab.encode(&tokens).ids;
        let out = self.model.greedy_translate(&ids, max_out_len)?;
        Ok(self.tgt_profile.join(&self.tgt_vocab.decode(&out)?))
    }
}

pub fn translate_cmd(
    checkpoint: &Path,
    input: Option<&Path>,
    output: Option<&Path>,
    max_out_len: usize,
    cluster_mode: Option<ClusterMode>,
) -> CliResult<usize> {
    let mut t = Translator::load(checkpoint)?;
    if let Some(mode) = cluster_mode {
        t.model.set_cluster_mode(mode);
    }
    let text = match input {
        Some(p) => read_file(p)?,
        None => {
            let mut s = String::new();
            io::stdin().read_to_string(&mut s)?;
            s
        }
    };
    let mut out = String::new();
    let mut n = 0;
    for line in text.lines() {
        out.push_str(&t.translate(line, max_out_len)?);
        out.push('\n');
        n += 1;
    }
    match output {
        Some(p) => write(p, out)?,
        None => io::stdout().write_all(out.as_bytes())?,
    }
    Ok(n)
}

fn tokenized(path: &Path, profile: Profile) -> CliResult<Vec<Vec<String>>> {
    Ok(read_file(path)?.lines().map(|l| preprocess(l, profile)).collect())
}

fn aligned(a: &[Vec<String>], b: &[Vec<String>], what: &str) -> CliResult<()> {
    if a.len() != b.len() {
        return Err(CliError::Data(format!(
            "{what} has {} lines but the reference has {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

pub fn bleu_config(n: usize, smooth: bool) -> CliResult<BleuConfig> {
    if n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let cfg = BleuConfig::uniform(n);
    Ok(if smooth { cfg.smoothed() } else { cfg })
}

pub fn evaluate_cmd(hyp: &Path, reference: &Path, profile: Profile, config: &BleuConfig) -> CliResult<BleuReport> {
    let h = tokenized(hyp, profile)?;
    let r = tokenized(reference, profile)?;
    aligned(&h, &r, "hypothesis file")?;
    if r.iter().any(|x| x.is_empty()) {
        return Err(CliError::Data("reference file contains an empty line".into()));
    }
    let pairs: Vec<(&[String], &[String])> = h.iter().zip(&r).map(|(a, b)| (a.as_slice(), b.as_slice())).collect();
    Ok(corpus_bleu(&pairs, config)?)
}

pub fn format_report(r: &BleuReport) -> String {
    let mut s = format!("BLEU = {:.2} ({:.6})\n", r.score * 100.0, r.score);
    for (n, p) in r.precisions.iter().enumerate() {
        match p.value() {
            Some(v) => s.push_str(&format!("p{} = {}/{} = {:.6}\n", n + 1, p.matched, p.total, v)),
            None => s.push_str(&format!("p{} = undefined (no {}-grams)\n", n + 1, n + 1)),
        }
    }
    s.push_str(&format!("bp = {:.6}\nc = {}\nr = {}\n", r.bp, r.c, r.r));
    s
}

pub struct ReportArgs {
    pub systems: Vec<(String, PathBuf)>,
    pub reference: PathBuf,
    pub src: Option<PathBuf>,
    pub profile_src: Profile,
    pub profile_tgt: Profile,
    pub edges: Vec<usize>,
    pub out: PathBuf,
    pub bleu: BleuConfig,
}

/// Paths written by the report command.
pub struct ReportFiles {
    pub csv: PathBuf,
    pub svg: PathBuf,
    pub summary: PathBuf,
}

pub fn report_paths(out: &Path) -> ReportFiles {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into());
    let dir = out.parent().unwrap_or(Path::new(""));
    ReportFiles {
        csv: out.with_extension("csv"),
        svg: out.with_extension("svg"),
        summary: dir.join(format!("{stem}_summary.csv")),
    }
}

pub fn report_cmd(a: &ReportArgs) -> CliResult<ReportFiles> {
    if a.systems.is_empty() {
        return Err(CliError::Usage("at least one --system NAME=FILE is required".into()));
    }
    let refs = tokenized(&a.reference, a.profile_tgt)?;
    if refs.iter().any(|x| x.is_empty()) {
        return Err(CliError::Data("reference file contains an empty line".into()));
    }
    let lengths: Vec<usize> = match &a.src {
        Some(p) => {
            let s = tokenized(p, a.profile_src)?;
            aligned(&s, &refs, "source file")?;
            s.iter().map(Vec::len).collect()
        }
        None => refs.iter().map(Vec::len).collect(),
    };
    let mut systems = Vec::new();
    let mut summary = String::from("system,pairs,bleu,bleu_x100");
    for n in 1..=a.bleu.n_max {
        summary.push_str(&format!(",p{n}"));
    }
    summary.push_str(",bp,c,r\n");
    for (name, path) in &a.systems {
        if name.contains(',') || name.contains('\n') {
            return Err(CliError::Usage(format!("system name {name:?} may not contain commas")));
        }
        let hyps = tokenized(path, a.profile_tgt)?;
        aligned(&hyps, &refs, &format!("system {name}"))?;
        let items: Vec<(usize, &[String], &[String])> = lengths
            .iter()
            .zip(hyps.iter().zip(&refs))
            .map(|(&l, (h, r))| (l, h.as_slice(), r.as_slice()))
            .collect();
        let rows = length_bucket_report(&items, &a.edges, &a.bleu)?;
        let pairs: Vec<(&[String], &[String])> = items.iter().map(|&(_, h, r)| (h, r)).collect();
        let total = corpus_bleu(&pairs, &a.bleu)?;
        summary.push_str(&format!("{name},{},{:.6},{:.2}", pairs.len(), total.score, total.score * 100.0));
        for p in &total.precisions {
            match p.value() {
                Some(v) => summary.push_str(&format!(",{v:.6}")),
                None => summary.push(','),
            }
        }
        summary.push_str(&format!(",{:.6},{},{}\n", total.bp, total.c, total.r));
        systems.push(SystemBuckets {
            system: name.clone(),
            rows,
        });
    }
    let files = report_paths(&a.out);
    if let Some(dir) = files.csv.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write(&files.csv, render_csv(&systems))?;
    write(&files.svg, render_svg(&systems))?;
    write(&files.summary, summary)?;
    Ok(files)
}

pub enum SynthTask {
    Copy { vocab: usize },
    Topic { topics: usize },
}

pub fn synth_cmd(task: SynthTask, pairs: usize, seed: u64, min_len: usize, max_len: usize, prefix: &Path) -> CliResult<()> {
    let corpus: SyntheticCorpus = match task {
        SynthTask::Copy { vocab } => copy_corpus(pairs, vocab, min_len, max_len, seed)?,
        SynthTask::Topic { topics } => topic_corpus(
            pairs,
            &TopicSpec {
                topics,
                min_len,
                max_len,
                ..TopicSpec::default()
            },
            seed,
        )?,
    };
    if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let side = |ext: &str, rows: &[String]| -> CliResult<()> {
        let mut p = prefix.as_os_str().to_owned();
        p.push(ext);
        write(Path::new(&p), rows.iter().map(|l| format!("{l}\n")).collect::<String>())
    };
    side(".src", &corpus.src)?;
    side(".tgt", &corpus.tgt)?;
    Ok(())
}

pub fn default_checkpoint(run_dir: &Path) -> PathBuf {
    run_dir.join(FINAL_CHECKPOINT)
}
