//! Alphabet normalization, fixed-length resizing, one-hot encoding and
//! inverse-frequency class weights.

use std::fmt;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{LabelMap, SequenceRecord};
use crate::nn::Float;

/// One-hot channel order.
pub const ALPHABET: [u8; 5] = *b"ACGTN";
pub const CHANNELS: usize = ALPHABET.len();
pub const DEFAULT_SEQ_LEN: usize = 400;

/// A sequence over exactly `{A, C, G, T, N}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CleanSequence(Vec<u8>);

impl CleanSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bases(&self) -> &[u8] {
        &self.0
    }

    pub fn as_str(&self) -> &str {
        // Only ASCII bases are ever stored.
        std::str::from_utf8(&self.0).expect("ASCII alphabet")
    }
}

impl fmt::Display for CleanSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl TryFrom<String> for CleanSequence {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        if s.is_empty() {
            return Err(Error::InvalidSequence("empty sequence".into()));
        }
        if let Some(c) = s.bytes().find(|b| !ALPHABET.contains(b)) {
            return Err(Error::InvalidSequence(format!(
                "character `{}` outside the A/C/G/T/N alphabet",
                c as char
            )));
        }
        Ok(Self(s.into_bytes()))
    }
}

impl From<CleanSequence> for String {
    fn from(s: CleanSequence) -> Self {
        String::from_utf8(s.0).expect("ASCII alphabet")
    }
}

/// Uppercases and maps every character outside `{A, C, G, T, N}` to `N`.
pub fn normalize_alphabet(raw: &str) -> Result<CleanSequence> {
    if raw.is_empty() {
        return Err(Error::InvalidSequence("empty sequence".into()));
    }
    let bases = raw
        .chars()
        .map(|c| match c.to_ascii_uppercase() {
            b @ ('A' | 'C' | 'G' | 'T') => b as u8,
            _ => b'N',
        })
        .collect();
    Ok(CleanSequence(bases))
}

/// Truncates to the first `target_len` bases, or repeats the sequence
/// cyclically until it reaches `target_len`.
pub fn resize(seq: &CleanSequence, target_len: usize) -> Result<CleanSequence> {
    if target_len == 0 {
        return Err(Error::InvalidArgument(
            "target length must be at least 1".into(),
        ));
    }
    if seq.is_empty() {
        return Err(Error::InvalidSequence("empty sequence".into()));
    }
    Ok(CleanSequence(
        seq.0.iter().copied().cycle().take(target_len).collect(),
    ))
}

fn channel(base: u8) -> Option<usize> {
    ALPHABET.iter().position(|&a| a == base)
}

/// `len x 5` indicator matrix, channels ordered A, C, G, T, N.
pub fn one_hot<T: Float>(seq: &CleanSequence) -> Result<Array2<T>> {
    let mut out = Array2::zeros((seq.len(), CHANNELS));
    for (row, &b) in seq.0.iter().enumerate() {
        let c = channel(b).ok_or_else(|| {
            Error::InvalidSequence(format!("character `{}` cannot be encoded", b as char))
        })?;
        out[[row, c]] = T::one();
    }
    Ok(out)
}

/// Inverse of [`one_hot`]; each row must be an exact indicator.
pub fn decode_one_hot<T: Float>(matrix: ArrayView2<'_, T>) -> Result<CleanSequence> {
    if matrix.ncols() != CHANNELS {
        return Err(Error::Shape(format!(
            "expected {CHANNELS} channels, got {}",
            matrix.ncols()
        )));
    }
    matrix
        .axis_iter(Axis(0))
        .map(|row| {
            let hot: Vec<usize> = row
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == T::one())
                .map(|(i, _)| i)
                .collect();
            let zeros = row.iter().filter(|&&v| v == T::zero()).count();
            match hot.as_slice() {
                [c] if zeros == CHANNELS - 1 => Ok(ALPHABET[*c]),
                _ => Err(Error::InvalidSequence("row is not one-hot".into())),
            }
        })
        .collect::<Result<Vec<u8>>>()
        .and_then(|bases| CleanSequence::try_from(String::from_utf8(bases).unwrap()))
}

/// Per-class loss multipliers `w_j = total / (classes * count_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(pub Vec<f64>);

impl ClassWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Weight of each sample, looked up by its label.
    pub fn sample_weights<T: Float>(&self, labels: &[usize]) -> Vec<T> {
        labels
            .iter()
            .map(|&l| T::from_f64(self.0[l]).unwrap())
            .collect()
    }
}

pub fn class_weights(counts: &[usize]) -> Result<ClassWeights> {
    if counts.is_empty() {
        return Err(Error::InvalidArgument("no classes".into()));
    }
    if let Some(j) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InvalidArgument(format!("class {j} has no samples")));
    }
    let total: usize = counts.iter().sum();
    let classes = counts.len() as f64;
    Ok(ClassWeights(
        counts
            .iter()
            .map(|&c| total as f64 / (classes * c as f64))
            .collect(),
    ))
}

/// Per-class label histogram.
pub fn label_counts(labels: &[usize], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for &l in labels {
        counts[l] += 1;
    }
    counts
}

/// One-hot inputs (`batch x len x 5`) with class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBatch<T = f32> {
    pub inputs: Array3<T>,
    pub labels: Vec<usize>,
}

impl<T: Float> EncodedBatch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.inputs.dim().1
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Normalize, resize and one-hot encode one raw sequence.
pub fn encode_sequence<T: Float>(raw: &str, target_len: usize) -> Result<Array2<T>> {
    one_hot(&resize(&normalize_alphabet(raw)?, target_len)?)
}

/// Encodes sequences without labels, preserving order.
pub fn encode_sequences<T: Float>(raws: &[&str], target_len: usize) -> Result<Array3<T>> {
    let rows: Vec<Array2<T>> = raws
        .par_iter()
        .map(|raw| encode_sequence(raw, target_len))
        .collect::<Result<_>>()?;
    let mut inputs = Array3::zeros((raws.len(), target_len, CHANNELS));
    for (mut slot, row) in inputs.axis_iter_mut(Axis(0)).zip(rows) {
        slot.assign(&row);
    }
    Ok(inputs)
}

pub fn encode_batch<T: Float>(
    records: &[&SequenceRecord],
    labels: &LabelMap,
    target_len: usize,
) -> Result<EncodedBatch<T>> {
    let label_ids = records
        .iter()
        .map(|r| {
            labels
                .index_of(&r.host)
                .ok_or_else(|| Error::UnknownHost(r.host.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let raws: Vec<&str> = records.iter().map(|r| r.sequence.as_str()).collect();
    Ok(EncodedBatch {
        inputs: encode_sequences(&raws, target_len)?,
        labels: label_ids,
    })
}
