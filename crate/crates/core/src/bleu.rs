//! Corpus BLEU and paired bootstrap resampling.
//!
//! Scores use clipped n-gram precision up to `max_n`, a brevity penalty and
//! add-one smoothing: for `n >= 2`, an order with no matching n-gram uses
//! `1 / (total + 1)` as its precision. A corpus with no unigram match
//! scores 0.

use std::collections::HashMap;
use std::hash::Hash;

use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::SeededRng;

/// Default highest n-gram order.
pub const MAX_N: usize = 4;

/// Sufficient statistics for corpus BLEU; sums over sentences.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub candidate_len: usize,
    pub reference_len: usize,
}

impl BleuStats {
    fn zero(max_n: usize) -> Self {
        Self {
            matches: vec![0; max_n],
            totals: vec![0; max_n],
            candidate_len: 0,
            reference_len: 0,
        }
    }

    /// Statistics of a single candidate against its reference.
    pub fn sentence<T: Eq + Hash>(candidate: &[T], reference: &[T], max_n: usize) -> Self {
        let mut s = Self::zero(max_n);
        s.candidate_len = candidate.len();
        s.reference_len = reference.len();
        for n in 1..=max_n {
            if candidate.len() < n {
                continue;
            }
            let mut ref_counts: HashMap<&[T], usize> = HashMap::new();
            if reference.len() >= n {
                for g in reference.windows(n) {
                    *ref_counts.entry(g).or_default() += 1;
                }
            }
            let mut cand_counts: HashMap<&[T], usize> = HashMap::new();
            for g in candidate.windows(n) {
                *cand_counts.entry(g).or_default() += 1;
            }
            s.totals[n - 1] = candidate.len() + 1 - n;
            s.matches[n - 1] = cand_counts
                .iter()
                .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
                .sum();
        }
        s
    }

    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..self.matches.len() {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.candidate_len += other.candidate_len;
        self.reference_len += other.reference_len;
    }

    pub fn report(&self) -> BleuReport {
        let max_n = self.matches.len();
        let precisions: Vec<f64> = (0..max_n)
            .map(|i| {
                let (m, t) = (self.matches[i], self.totals[i]);
                if i > 0 && m == 0 {
                    1.0 / (t + 1) as f64
                } else if t == 0 {
                    0.0
                } else {
                    m as f64 / t as f64
                }
            })
            .collect();
        let (c, r) = (self.candidate_len, self.reference_len);
        let brevity_penalty = if c == 0 {
            0.0
        } else if c > r {
            1.0
        } else {
            (1.0 - r as f64 / c as f64).exp()
        };
        let bleu = if precisions.contains(&0.0) || brevity_penalty == 0.0 {
            0.0
        } else {
            let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64;
            100.0 * brevity_penalty * log_mean.exp()
        };
        BleuReport {
            bleu,
            precisions,
            brevity_penalty,
            candidate_len: c,
            reference_len: r,
        }
    }
}

/// Corpus BLEU with its components.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BleuReport {
    /// Score in `[0, 100]`.
    pub bleu: f64,
    /// Smoothed precision per order, `n = 1..=max_n`.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
}

impl BleuReport {
    /// Tab-separated `key<TAB>value` lines.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("bleu\t{:.4}\n", self.bleu);
        for (i, p) in self.precisions.iter().enumerate() {
            out.push_str(&format!("precision_{}\t{:.6}\n", i + 1, p));
        }
        out.push_str(&format!("brevity_penalty\t{:.6}\n", self.brevity_penalty));
        out.push_str(&format!("candidate_len\t{}\n", self.candidate_len));
        out.push_str(&format!("reference_len\t{}\n", self.reference_len));
        out
    }
}

fn sentence_stats<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>], max_n: usize) -> Result<Vec<BleuStats>> {
    if candidates.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "{} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::Empty("BLEU corpus"));
    }
    if max_n == 0 {
        return Err(Error::InvalidArgument("max_n must be positive".into()));
    }
    Ok(candidates
        .iter()
        .zip(references)
        .map(|(c, r)| BleuStats::sentence(c, r, max_n))
        .collect())
}

/// Corpus BLEU of aligned candidate and reference token sequences.
pub fn bleu<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>], max_n: usize) -> Result<BleuReport> {
    let stats = sentence_stats(candidates, references, max_n)?;
    let mut total = BleuStats::zero(max_n);
    for s in &stats {
        total.add(s);
    }
    Ok(total.report())
}

/// Outcome of paired bootstrap resampling.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BootstrapReport {
    pub resamples: usize,
    pub bleu_a: f64,
    pub bleu_b: f64,
    /// Resamples where A scored strictly higher.
    pub wins_a: usize,
    pub wins_b: usize,
    pub ties: usize,
    /// `wins_a / resamples`.
    pub win_fraction_a: f64,
    /// `1 - win_fraction_a`: the share of resamples where A did not win.
    pub p_value: f64,
}

impl BootstrapReport {
    pub fn to_tsv(&self) -> String {
        format!(
            "resamples\t{}\nbleu_a\t{:.4}\nbleu_b\t{:.4}\nwins_a\t{}\nwins_b\t{}\nties\t{}\nwin_fraction_a\t{:.6}\np_value\t{:.6}\n",
            self.resamples, self.bleu_a, self.bleu_b, self.wins_a, self.wins_b, self.ties, self.win_fraction_a, self.p_value
        )
    }
}

/// Paired bootstrap: resample sentence indices with replacement and compare
/// corpus BLEU of systems A and B on each resample.
pub fn paired_bootstrap<T: Eq + Hash>(
    cands_a: &[Vec<T>],
    cands_b: &[Vec<T>],
    references: &[Vec<T>],
    n_resamples: usize,
    seed: u64,
) -> Result<BootstrapReport> {
    let sa = sentence_stats(cands_a, references, MAX_N)?;
    let sb = sentence_stats(cands_b, references, MAX_N)?;
    if n_resamples == 0 {
        return Err(Error::InvalidArgument("need at least one resample".into()));
    }
    let full = |s: &[BleuStats]| {
        let mut t = BleuStats::zero(MAX_N);
        s.iter().for_each(|x| t.add(x));
        t.report().bleu
    };
    let mut rng = SeededRng::seed_from_u64(seed);
    let n = references.len();
    let (mut wins_a, mut wins_b, mut ties) = (0, 0, 0);
    for _ in 0..n_resamples {
        let mut ta = BleuStats::zero(MAX_N);
        let mut tb = BleuStats::zero(MAX_N);
        for _ in 0..n {
            let i = rng.gen_range(0..n);
            ta.add(&sa[i]);
            tb.add(&sb[i]);
        }
        let (a, b) = (ta.report().bleu, tb.report().bleu);
        if a > b {
            wins_a += 1;
        } else if b > a {
            wins_b += 1;
        } else {
            ties += 1;
        }
    }
    let win_fraction_a = wins_a as f64 / n_resamples as f64;
    Ok(BootstrapReport {
        resamples: n_resamples,
        bleu_a: full(&sa),
        bleu_b: full(&sb),
        wins_a,
        wins_b,
        ties,
        win_fraction_a,
        p_value: 1.0 - win_fraction_a,
    })
}
