//! Train/test corpus comparison: global alignment, 4-mer profiles, sequence
//! identity and a chi-squared test on nucleotide composition.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{normalize_alphabet, resize, CleanSequence, ALPHABET};
use crate::rng::{derive_seed, streams, SplitMix64};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignScoring {
    pub match_score: f64,
    pub mismatch: f64,
    pub gap: f64,
}

impl Default for AlignScoring {
    fn default() -> Self {
        Self {
            match_score: 1.0,
            mismatch: -1.0,
            gap: -1.0,
        }
    }
}

impl AlignScoring {
    pub fn validate(&self) -> Result<()> {
        if !(self.match_score > self.mismatch
            && self.gap < self.match_score
            && self.match_score > 0.0)
        {
            return Err(Error::Config(format!("invalid alignment scoring {self:?}")));
        }
        Ok(())
    }

    fn pair(&self, a: u8, b: u8) -> f64 {
        if a == b {
            self.match_score
        } else {
            self.mismatch
        }
    }
}

/// Summary of one optimal global alignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub score: f64,
    pub matches: usize,
    /// Aligned columns, gaps included.
    pub length: usize,
}

fn check_nonempty(a: &[u8], b: &[u8]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot align an empty sequence".into(),
        ));
    }
    Ok(())
}

/// Optimal global alignment score with a linear gap penalty, in linear memory.
pub fn needleman_wunsch(a: &[u8], b: &[u8], scoring: &AlignScoring) -> Result<f64> {
    check_nonempty(a, b)?;
    let gap = scoring.gap;
    let mut prev: Vec<f64> = (0..=b.len()).map(|j| j as f64 * gap).collect();
    let mut cur = vec![0.0; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = (i + 1) as f64 * gap;
        for (j, &cb) in b.iter().enumerate() {
            let diag = prev[j] + scoring.pair(ca, cb);
            let up = prev[j + 1] + gap;
            let left = cur[j] + gap;
            cur[j + 1] = diag.max(up).max(left);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[b.len()])
}

const DIAG: u8 = 0;
const UP: u8 = 1;
const LEFT: u8 = 2;

/// Full alignment with traceback. Ties prefer diagonal, then up (gap in `b`),
/// then left (gap in `a`).
pub fn align(a: &[u8], b: &[u8], scoring: &AlignScoring) -> Result<Alignment> {
    check_nonempty(a, b)?;
    let (n, m) = (a.len(), b.len());
    let width = m + 1;
    let gap = scoring.gap;
    let mut dir = vec![0u8; (n + 1) * width];
    for j in 1..=m {
        dir[j] = LEFT;
    }
    let mut prev: Vec<f64> = (0..=m).map(|j| j as f64 * gap).collect();
    let mut cur = vec![0.0; m + 1];
    for i in 1..=n {
        cur[0] = i as f64 * gap;
        dir[i * width] = UP;
        let ca = a[i - 1];
        let row = &mut dir[i * width..(i + 1) * width];
        for j in 1..=m {
            let diag = prev[j - 1] + scoring.pair(ca, b[j - 1]);
            let up = prev[j] + gap;
            let left = cur[j - 1] + gap;
            let (best, d) = if diag >= up && diag >= left {
                (diag, DIAG)
            } else if up >= left {
                (up, UP)
            } else {
                (left, LEFT)
            };
            cur[j] = best;
            row[j] = d;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let score = prev[m];

    let (mut i, mut j) = (n, m);
    let (mut matches, mut length) = (0, 0);
    while i > 0 || j > 0 {
        length += 1;
        match dir[i * width + j] {
            DIAG => {
                if a[i - 1] == b[j - 1] {
                    matches += 1;
                }
                i -= 1;
                j -= 1;
            }
            UP => i -= 1,
            _ => j -= 1,
        }
    }
    Ok(Alignment {
        score,
        matches,
        length,
    })
}

/// Score as a percentage of the best achievable for the longer sequence.
pub fn normalized_alignment_percent(a: &[u8], b: &[u8], scoring: &AlignScoring) -> Result<f64> {
    let score = needleman_wunsch(a, b, scoring)?;
    Ok(percent_of_best(score, a.len(), b.len(), scoring))
}

fn percent_of_best(score: f64, la: usize, lb: usize, scoring: &AlignScoring) -> f64 {
    100.0 * score / (scoring.match_score * la.max(lb) as f64)
}

/// Matching columns over alignment length, in percent.
pub fn sequence_identity(a: &[u8], b: &[u8], scoring: &AlignScoring) -> Result<f64> {
    let al = align(a, b, scoring)?;
    Ok(100.0 * al.matches as f64 / al.length as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KmerProfile {
    pub k: usize,
    /// Indexed by the base-4 code of the window, A=0 C=1 G=2 T=3.
    pub counts: Vec<u64>,
    pub total: u64,
}

fn base_code(b: u8) -> Option<usize> {
    match b {
        b'A' => Some(0),
        b'C' => Some(1),
        b'G' => Some(2),
        b'T' => Some(3),
        _ => None,
    }
}

/// Sliding-window k-mer counts; windows touching a non-ACGT symbol are skipped.
pub fn kmer_profile(seq: &[u8], k: usize) -> Result<KmerProfile> {
    if k == 0 || k > 12 {
        return Err(Error::InvalidArgument(format!(
            "unsupported k-mer size {k}"
        )));
    }
    if seq.len() < k {
        return Err(Error::InvalidArgument(format!(
            "sequence of length {} is shorter than k = {k}",
            seq.len()
        )));
    }
    let mut counts = vec![0u64; 1 << (2 * k)];
    let mask = (1usize << (2 * k)) - 1;
    let mut code = 0usize;
    let mut valid = 0usize;
    let mut total = 0;
    for &b in seq {
        match base_code(b) {
            Some(c) => {
                code = ((code << 2) | c) & mask;
                valid += 1;
                if valid >= k {
                    counts[code] += 1;
                    total += 1;
                }
            }
            None => valid = 0,
        }
    }
    Ok(KmerProfile { k, counts, total })
}

/// Cosine similarity of the two relative-frequency vectors, in percent.
pub fn kmer_similarity(p: &KmerProfile, q: &KmerProfile) -> Result<f64> {
    if p.k != q.k {
        return Err(Error::InvalidArgument(format!(
            "k differs: {} vs {}",
            p.k, q.k
        )));
    }
    if p.total == 0 || q.total == 0 {
        return Err(Error::InvalidArgument(
            "k-mer profile has no windows".into(),
        ));
    }
    let (mut dot, mut pp, mut qq) = (0.0, 0.0, 0.0);
    for (&x, &y) in p.counts.iter().zip(&q.counts) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        pp += x * x;
        qq += y * y;
    }
    Ok((100.0 * dot / (pp.sqrt() * qq.sqrt())).min(100.0))
}

/// Which form of the sequences to compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SequenceForm {
    /// Alphabet-normalized, original lengths.
    Raw,
    /// Normalized and resized to the model input length.
    Preprocessed,
}

impl SequenceForm {
    pub fn label(self) -> &'static str {
        match self {
            SequenceForm::Raw => "Before Preprocessing",
            SequenceForm::Preprocessed => "After Preprocessing",
        }
    }

    pub fn apply(self, raw: &str, seq_len: usize) -> Result<CleanSequence> {
        let clean = normalize_alphabet(raw)?;
        match self {
            SequenceForm::Raw => Ok(clean),
            SequenceForm::Preprocessed => resize(&clean, seq_len),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityOptions {
    pub pairs: usize,
    pub seed: u64,
    pub form: SequenceForm,
    pub seq_len: usize,
    pub k: usize,
    pub scoring: AlignScoring,
}

impl Default for SimilarityOptions {
    fn default() -> Self {
        Self {
            pairs: 1000,
            seed: 42,
            form: SequenceForm::Raw,
            seq_len: crate::preprocess::DEFAULT_SEQ_LEN,
            k: 4,
            scoring: AlignScoring::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStats {
    pub form: SequenceForm,
    pub pairs: usize,
    pub seed: u64,
    pub mean_alignment_percent: f64,
    pub mean_kmer_similarity_percent: f64,
    pub mean_identity_percent: f64,
}

/// Means of the pairwise statistics over `pairs` uniformly sampled
/// (train, test) pairs.
pub fn dataset_similarity(
    train: &[&str],
    test: &[&str],
    options: &SimilarityOptions,
) -> Result<SimilarityStats> {
    if options.pairs == 0 {
        return Err(Error::InvalidArgument(
            "at least one pair must be sampled".into(),
        ));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidArgument(
            "both corpora must be non-empty".into(),
        ));
    }
    options.scoring.validate()?;
    let mut rng = SplitMix64::new(derive_seed(options.seed, streams::PAIR_SAMPLING));
    let picks: Vec<(usize, usize)> = (0..options.pairs)
        .map(|_| {
            let i = rng.below(train.len() as u64) as usize;
            let j = rng.below(test.len() as u64) as usize;
            (i, j)
        })
        .collect();

    let per_pair: Vec<[f64; 3]> = picks
        .par_iter()
        .map(|&(i, j)| -> Result<[f64; 3]> {
            let a = options.form.apply(train[i], options.seq_len)?;
            let b = options.form.apply(test[j], options.seq_len)?;
            let (a, b) = (a.bases(), b.bases());
            let al = align(a, b, &options.scoring)?;
            let kmer = kmer_similarity(&kmer_profile(a, options.k)?, &kmer_profile(b, options.k)?)?;
            Ok([
                percent_of_best(al.score, a.len(), b.len(), &options.scoring),
                kmer,
                100.0 * al.matches as f64 / al.length as f64,
            ])
        })
        .collect::<Result<_>>()?;

    let mut sums = [0.0; 3];
    for row in &per_pair {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    let n = per_pair.len() as f64;
    Ok(SimilarityStats {
        form: options.form,
        pairs: options.pairs,
        seed: options.seed,
        mean_alignment_percent: sums[0] / n,
        mean_kmer_similarity_percent: sums[1] / n,
        mean_identity_percent: sums[2] / n,
    })
}

/// Total A, C, G, T, N counts over all sequences.
pub fn nucleotide_counts<S: AsRef<[u8]>>(sequences: &[S]) -> [u64; 5] {
    let mut counts = [0u64; 5];
    for s in sequences {
        for &b in s.as_ref() {
            if let Some(k) = ALPHABET.iter().position(|&x| x == b) {
                counts[k] += 1;
            }
        }
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquared {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Goodness-of-fit test of `observed` against `expected_proportions`.
/// Categories where both are zero are dropped.
pub fn chi_squared_gof(observed: &[u64], expected_proportions: &[f64]) -> Result<ChiSquared> {
    if observed.len() != expected_proportions.len() {
        return Err(Error::Shape(
            "observed and expected differ in length".into(),
        ));
    }
    let total: u64 = observed.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("no observations".into()));
    }
    let psum: f64 = expected_proportions.iter().sum();
    if expected_proportions.iter().any(|p| !(*p >= 0.0)) || (psum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "expected proportions must be non-negative and sum to 1 (sum {psum})"
        )));
    }
    let mut statistic = 0.0;
    let mut kept = 0;
    for (k, (&o, &p)) in observed.iter().zip(expected_proportions).enumerate() {
        if p == 0.0 {
            if o > 0 {
                return Err(Error::InvalidArgument(format!(
                    "category {k} has {o} observations but zero expected proportion"
                )));
            }
            continue;
        }
        let e = p * total as f64;
        statistic += (o as f64 - e).powi(2) / e;
        kept += 1;
    }
    if kept < 2 {
        return Err(Error::InvalidArgument(
            "need at least two categories".into(),
        ));
    }
    let df = kept - 1;
    Ok(ChiSquared {
        statistic,
        df,
        p_value: chi_squared_sf(statistic, df)?,
    })
}

/// Upper tail of the chi-squared distribution.
pub fn chi_squared_sf(statistic: f64, df: usize) -> Result<f64> {
    if df == 0 || !(statistic >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "chi-squared needs df > 0 and a non-negative statistic, got {statistic} with df {df}"
        )));
    }
    Ok(gamma_q(df as f64 / 2.0, statistic / 2.0))
}

const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// ln Γ(x) for x > 0 (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized upper incomplete gamma Q(a, x).
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_p_series(a, x)
    } else {
        gamma_q_fraction(a, x)
    }
}

fn prefactor(a: f64, x: f64) -> f64 {
    (a * x.ln() - x - ln_gamma(a)).exp()
}

fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut n = a;
    for _ in 0..10_000 {
        n += 1.0;
        term *= x / n;
        sum += term;
        if term.abs() < sum.abs() * 1e-16 {
            break;
        }
    }
    sum * prefactor(a, x)
}

/// Modified Lentz evaluation of the continued fraction for Q.
fn gamma_q_fraction(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..10_000 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    prefactor(a, x) * h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionTest {
    pub form: SequenceForm,
    pub train_counts: [u64; 5],
    pub test_counts: [u64; 5],
    pub result: ChiSquared,
}

/// Tests the test-corpus composition against training-corpus proportions.
pub fn composition_test(
    train: &[&str],
    test: &[&str],
    form: SequenceForm,
    seq_len: usize,
) -> Result<CompositionTest> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidArgument(
            "both corpora must be non-empty".into(),
        ));
    }
    let prepare = |set: &[&str]| -> Result<Vec<CleanSequence>> {
        set.iter().map(|s| form.apply(s, seq_len)).collect()
    };
    let train_counts = nucleotide_counts(
        &prepare(train)?
            .iter()
            .map(|s| s.bases())
            .collect::<Vec<_>>(),
    );
    let test_counts =
        nucleotide_counts(&prepare(test)?.iter().map(|s| s.bases()).collect::<Vec<_>>());
    let train_total: u64 = train_counts.iter().sum();
    let proportions: Vec<f64> = train_counts
        .iter()
        .map(|&c| c as f64 / train_total as f64)
        .collect();
    Ok(CompositionTest {
        form,
        train_counts,
        test_counts,
        result: chi_squared_gof(&test_counts, &proportions)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub dataset: String,
    pub similarity: Vec<SimilarityStats>,
    pub composition: Vec<CompositionTest>,
}

impl DiagnosticsReport {
    /// Similarity and composition statistics for each requested form.
    pub fn compute(
        dataset: &str,
        train: &[&str],
        test: &[&str],
        forms: &[SequenceForm],
        options: &SimilarityOptions,
    ) -> Result<Self> {
        let mut similarity = Vec::new();
        let mut composition = Vec::new();
        for &form in forms {
            let opts = SimilarityOptions {
                form,
                ..options.clone()
            };
            similarity.push(dataset_similarity(train, test, &opts)?);
            composition.push(composition_test(train, test, form, options.seq_len)?);
        }
        Ok(Self {
            dataset: dataset.to_owned(),
            similarity,
            composition,
        })
    }

    /// Step, dataset, then the three similarity percentages.
    pub fn write_similarity_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "comparison_step",
            "dataset",
            "sequence_alignment_percent",
            "kmer_frequency_percent",
            "sequence_identity_percent",
        ])?;
        for s in &self.similarity {
            w.write_record([
                s.form.label().to_owned(),
                self.dataset.clone(),
                format!("{:.2}", s.mean_alignment_percent),
                format!("{:.2}", s.mean_kmer_similarity_percent),
                format!("{:.2}", s.mean_identity_percent),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Step, dataset, statistic, degrees of freedom, p-value.
    pub fn write_composition_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["comparison_step", "dataset", "chi_squared", "df", "p_value"])?;
        for c in &self.composition {
            w.write_record([
                c.form.label().to_owned(),
                self.dataset.clone(),
                format!("{:.2}", c.result.statistic),
                c.result.df.to_string(),
                format!("{:.3e}", c.result.p_value),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
