//! Parallel corpora: loading, vocabularies, length statistics and synthetic
//! toy tasks.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::attention::{LengthStats, DEFAULT_PERCENTILE};
use crate::error::{Error, Result};
use crate::vocab::{TokenizerMode, Vocab};
use crate::SeededRng;

/// One source/target sentence pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

impl Pair {
    pub fn new(src: &str, tgt: &str, mode: TokenizerMode) -> Self {
        Self {
            src: mode.tokenize(src),
            tgt: mode.tokenize(tgt),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// Tokenized bitext with vocabularies built from the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<Pair>,
    pub dev: Vec<Pair>,
    pub test: Vec<Pair>,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    /// Lengths of every training source and target sequence.
    pub length_stats: LengthStats,
    pub tokenizer: TokenizerMode,
}

impl Corpus {
    pub fn from_splits(train: Vec<Pair>, dev: Vec<Pair>, test: Vec<Pair>, tokenizer: TokenizerMode) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Empty("training corpus"));
        }
        let src_vocab = Vocab::build(train.iter().map(|p| p.src.as_slice()));
        let tgt_vocab = Vocab::build(train.iter().map(|p| p.tgt.as_slice()));
        let lengths = train.iter().flat_map(|p| [p.src.len(), p.tgt.len()]).collect();
        let length_stats = LengthStats::new(lengths, DEFAULT_PERCENTILE)?;
        Ok(Self {
            train,
            dev,
            test,
            src_vocab,
            tgt_vocab,
            length_stats,
            tokenizer,
        })
    }

    pub fn split(&self, split: Split) -> &[Pair] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Id sequences for a split; unseen tokens map to UNK.
    pub fn encode(&self, split: Split) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        self.encode_pairs(self.split(split))
    }

    pub fn encode_pairs(&self, pairs: &[Pair]) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        pairs
            .iter()
            .map(|p| (self.src_vocab.encode(&p.src), self.tgt_vocab.encode(&p.tgt)))
            .unzip()
    }

    /// Longest source or target sequence in any split.
    pub fn max_len(&self) -> usize {
        Split::ALL
            .iter()
            .flat_map(|&s| self.split(s))
            .map(|p| p.src.len().max(p.tgt.len()))
            .max()
            .unwrap_or(0)
    }

    /// Writes `{train,dev,test}.{src,tgt}` into `dir`, skipping empty splits.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for split in Split::ALL {
            let pairs = self.split(split);
            if pairs.is_empty() {
                continue;
            }
            for (side, ext) in [(true, "src"), (false, "tgt")] {
                let path = dir.join(format!("{}.{ext}", split.name()));
                let mut text = String::new();
                for p in pairs {
                    text.push_str(&self.tokenizer.detokenize(if side { &p.src } else { &p.tgt }));
                    text.push('\n');
                }
                fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(())
    }
}

/// Reads two aligned one-sentence-per-line files. Pairs where either side
/// tokenizes to nothing are dropped.
pub fn load_bitext(src: &Path, tgt: &Path, mode: TokenizerMode) -> Result<Vec<Pair>> {
    let read = |p: &Path| fs::read_to_string(p).map_err(|e| Error::io(p, e));
    let src_text = read(src)?;
    let tgt_text = read(tgt)?;
    let src_lines: Vec<&str> = src_text.lines().collect();
    let tgt_lines: Vec<&str> = tgt_text.lines().collect();
    if src_lines.len() != tgt_lines.len() {
        return Err(Error::LineCountMismatch {
            src: src_lines.len(),
            tgt: tgt_lines.len(),
        });
    }
    Ok(src_lines
        .iter()
        .zip(&tgt_lines)
        .map(|(s, t)| Pair::new(s, t, mode))
        .filter(|p| !p.src.is_empty() && !p.tgt.is_empty())
        .collect())
}

/// Loads a single bitext as the training split.
pub fn load_corpus(src: &Path, tgt: &Path, mode: TokenizerMode) -> Result<Corpus> {
    let train = load_bitext(src, tgt, mode)?;
    Corpus::from_splits(train, Vec::new(), Vec::new(), mode)
}

/// File locations for a corpus with optional dev and test splits.
#[derive(Clone, Debug, Default)]
pub struct CorpusPaths {
    pub train: (PathBuf, PathBuf),
    pub dev: Option<(PathBuf, PathBuf)>,
    pub test: Option<(PathBuf, PathBuf)>,
}

impl CorpusPaths {
    /// `dir/{train,dev,test}.{src,tgt}`; dev and test are used if present.
    pub fn in_dir(dir: &Path) -> Self {
        let pair = |s: &str| (dir.join(format!("{s}.src")), dir.join(format!("{s}.tgt")));
        let present = |p: (PathBuf, PathBuf)| (p.0.exists() && p.1.exists()).then_some(p);
        Self {
            train: pair("train"),
            dev: present(pair("dev")),
            test: present(pair("test")),
        }
    }

    pub fn load(&self, mode: TokenizerMode) -> Result<Corpus> {
        let train = load_bitext(&self.train.0, &self.train.1, mode)?;
        let opt = |p: &Option<(PathBuf, PathBuf)>| match p {
            Some((s, t)) => load_bitext(s, t, mode),
            None => Ok(Vec::new()),
        };
        Corpus::from_splits(train, opt(&self.dev)?, opt(&self.test)?, mode)
    }
}

/// Synthetic transduction task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyKind {
    /// Target equals source.
    Copy,
    /// Target is the source reversed.
    Reverse,
    /// Every symbol advanced by one, wrapping around the alphabet.
    Shift,
}

impl fmt::Display for ToyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ToyKind::Copy => "copy",
            ToyKind::Reverse => "reverse",
            ToyKind::Shift => "shift",
        })
    }
}

impl FromStr for ToyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(ToyKind::Copy),
            "reverse" => Ok(ToyKind::Reverse),
            "shift" => Ok(ToyKind::Shift),
            other => Err(Error::Config(format!("unknown toy task `{other}`"))),
        }
    }
}

/// Parameters of a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyTask {
    pub kind: ToyKind,
    /// Distinct content symbols, not counting special tokens.
    pub vocab_size: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Sequence lengths are drawn uniformly from `1..=max_len`.
    pub max_len: usize,
    pub seed: u64,
}

impl ToyTask {
    pub fn new(kind: ToyKind, vocab_size: usize, n_pairs: usize, max_len: usize, seed: u64) -> Self {
        Self {
            kind,
            vocab_size,
            n_train: n_pairs,
            n_dev: 0,
            n_test: 0,
            max_len,
            seed,
        }
    }
}

/// Name of content symbol `i`: `a`..`z`, or `w{i}` for larger alphabets.
pub fn toy_symbol(i: usize, vocab_size: usize) -> String {
    if vocab_size <= 26 {
        char::from(b'a' + i as u8).to_string()
    } else {
        format!("w{i}")
    }
}

/// Applies a toy task's mapping to one source sequence of symbol indices.
pub fn toy_target(kind: ToyKind, src: &[usize], vocab_size: usize) -> Vec<usize> {
    match kind {
        ToyKind::Copy => src.to_vec(),
        ToyKind::Reverse => src.iter().rev().copied().collect(),
        ToyKind::Shift => src.iter().map(|&s| (s + 1) % vocab_size).collect(),
    }
}

/// Deterministic synthetic corpus.
pub fn make_toy_task(task: &ToyTask) -> Result<Corpus> {
    if task.vocab_size < 4 {
        return Err(Error::Config(format!("toy vocabulary needs at least 4 symbols, got {}", task.vocab_size)));
    }
    if task.max_len < 2 {
        return Err(Error::Config(format!("toy max_len must be at least 2, got {}", task.max_len)));
    }
    let mut rng = SeededRng::seed_from_u64(task.seed);
    let mut gen = |n: usize| -> Vec<Pair> {
        (0..n)
            .map(|_| {
                let len = rng.gen_range(1..=task.max_len);
                let src: Vec<usize> = (0..len).map(|_| rng.gen_range(0..task.vocab_size)).collect();
                let tgt = toy_target(task.kind, &src, task.vocab_size);
                let names = |s: &[usize]| s.iter().map(|&i| toy_symbol(i, task.vocab_size)).collect();
                Pair {
                    src: names(&src),
                    tgt: names(&tgt),
                }
            })
            .collect()
    };
    let train = gen(task.n_train);
    let dev = gen(task.n_dev);
    let test = gen(task.n_test);
    Corpus::from_splits(train, dev, test, TokenizerMode::Whitespace)
}
