//! Synthetic labeled corpora with class-specific planted motifs.

use crate::error::{Error, Result};
use crate::ingest::SequenceRecord;
use crate::rng::SplitMix64;

const BASES: &[u8; 4] = b"ACGT";

#[derive(Debug, Clone, PartialEq)]
pub struct MotifCorpus {
    /// Sequences per class; class `c` is labeled `host_{c}`.
    pub class_counts: Vec<usize>,
    pub raw_len: usize,
    pub motif_len: usize,
    /// Probability that each planted motif base is replaced by a random base.
    pub mutation_rate: f64,
    pub seed: u64,
}

impl MotifCorpus {
    /// Four classes of twenty 40-base sequences with one planted 8-mer each.
    pub fn toy(seed: u64) -> Self {
        Self {
            class_counts: vec![20; 4],
            raw_len: 40,
            motif_len: 8,
            mutation_rate: 0.0,
            seed,
        }
    }

    pub fn host_name(class: usize) -> String {
        format!("host_{class:02}")
    }

    /// Distinct random motifs, one per class.
    pub fn motifs(&self) -> Vec<Vec<u8>> {
        let mut rng = SplitMix64::new(self.seed);
        let mut motifs: Vec<Vec<u8>> = Vec::with_capacity(self.class_counts.len());
        while motifs.len() < self.class_counts.len() {
            let m: Vec<u8> = (0..self.motif_len)
                .map(|_| BASES[rng.below(4) as usize])
                .collect();
            if !motifs.contains(&m) {
                motifs.push(m);
            }
        }
        motifs
    }

    pub fn generate(&self) -> Result<Vec<SequenceRecord>> {
        if self.motif_len == 0 || self.motif_len > self.raw_len {
            return Err(Error::InvalidArgument(format!(
                "motif length {} does not fit in {} bases",
                self.motif_len, self.raw_len
            )));
        }
        if self.class_counts.is_empty()
            || 4f64.powi(self.motif_len as i32) < self.class_counts.len() as f64
        {
            return Err(Error::InvalidArgument("cannot draw distinct motifs".into()));
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err(Error::InvalidArgument(
                "mutation rate must lie in [0, 1]".into(),
            ));
        }
        let motifs = self.motifs();
        let mut rng = SplitMix64::new(self.seed ^ 0x5EED_C0DE);
        let mut records = Vec::new();
        for (class, (&count, motif)) in self.class_counts.iter().zip(&motifs).enumerate() {
            for i in 0..count {
                let mut seq: Vec<u8> = (0..self.raw_len)
                    .map(|_| BASES[rng.below(4) as usize])
                    .collect();
                let at = rng.below((self.raw_len - self.motif_len + 1) as u64) as usize;
                for (k, &b) in motif.iter().enumerate() {
                    seq[at + k] = if rng.next_f64() < self.mutation_rate {
                        BASES[rng.below(4) as usize]
                    } else {
                        b
                    };
                }
                records.push(SequenceRecord::new(
                    format!("toy{class:02}_{i:04}"),
                    String::from_utf8(seq).expect("ASCII bases"),
                    Self::host_name(class),
                )?);
            }
        }
        Ok(records)
    }
}
