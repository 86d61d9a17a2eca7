//! Corpus readers shared by the subcommands.

use std::collections::HashSet;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use anyhow::{bail, Context, Result};
use vhp_core::ingest::{
    parse_csv, parse_csv_unlabeled, parse_fasta, parse_fasta_unlabeled, CsvColumns, UnlabeledRecord,
};
use vhp_core::SequenceRecord;

use crate::args::{InputArgs, InputFormat};

/// Files written by `prepare` and read by the later subcommands.
pub mod prepared {
    pub const RECORDS: &str = "records.csv";
    pub const TRAIN: &str = "train.csv";
    pub const TEST: &str = "test.csv";
    pub const SPLIT: &str = "split.json";
    pub const LABELS: &str = "labels.json";
}

const FASTA_EXTENSIONS: [&str; 6] = ["fa", "fasta", "fna", "ffn", "fas", "faa"];

pub fn resolve_format(path: &Path, format: InputFormat) -> InputFormat {
    match format {
        InputFormat::Auto => {
            let ext = path
                .extension()
                .and_then(|e| e.to_str())
                .map(str::to_ascii_lowercase);
            match ext {
                Some(e) if FASTA_EXTENSIONS.contains(&e.as_str()) => InputFormat::Fasta,
                _ => InputFormat::Csv,
            }
        }
        f => f,
    }
}

fn columns(args: &InputArgs) -> CsvColumns {
    CsvColumns {
        id: args.id_column.clone(),
        sequence: args.sequence_column.clone(),
        host: args.host_column.clone(),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| {
        format!("cannot read {}", path.display())
    })?))
}

pub fn read_labeled(path: &Path, args: &InputArgs) -> Result<Vec<SequenceRecord>> {
    let stream = open(path)?;
    let records = match resolve_format(path, args.format) {
        InputFormat::Fasta => parse_fasta(stream),
        _ => parse_csv(stream, &columns(args)),
    }
    .with_context(|| format!("cannot parse {}", path.display()))?;
    Ok(records)
}

pub fn read_unlabeled(path: &Path, args: &InputArgs) -> Result<Vec<UnlabeledRecord>> {
    let stream = open(path)?;
    let records = match resolve_format(path, args.format) {
        InputFormat::Fasta => parse_fasta_unlabeled(stream),
        _ => parse_csv_unlabeled(stream, &columns(args)),
    }
    .with_context(|| format!("cannot parse {}", path.display()))?;
    Ok(records)
}

/// Reads a table written by `prepare`.
pub fn read_prepared_table(path: &Path) -> Result<Vec<SequenceRecord>> {
    parse_csv(open(path)?, &CsvColumns::default())
        .with_context(|| format!("cannot parse {}", path.display()))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_reader(open(path)?).with_context(|| format!("cannot parse {}", path.display()))
}

pub fn ensure_unique_ids<'a>(ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            bail!("duplicate record id `{id}`");
        }
    }
    Ok(())
}
