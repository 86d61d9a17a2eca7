//! Sequence corpus ingestion: FASTA and CSV parsing, host filtering, label
//! maps and stratified train/test/fold splits.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Read};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, streams, SplitMix64};

/// One labeled nucleotide sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub id: String,
    pub sequence: String,
    pub host: String,
}

impl SequenceRecord {
    pub fn new(
        id: impl Into<String>,
        sequence: impl Into<String>,
        host: impl Into<String>,
    ) -> Result<Self> {
        let record = Self {
            id: id.into(),
            sequence: sequence.into(),
            host: host.into(),
        };
        if record.sequence.is_empty() {
            return Err(Error::InvalidSequence(format!(
                "record `{}` has an empty sequence",
                record.id
            )));
        }
        if record.host.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "record `{}` has an empty host",
                record.id
            )));
        }
        Ok(record)
    }
}

/// Bijection between host strings and class indices, ordered
/// lexicographically so it does not depend on input order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LabelList", into = "LabelList")]
pub struct LabelMap {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct LabelList {
    labels: Vec<String>,
}

impl TryFrom<LabelList> for LabelMap {
    type Error = Error;

    fn try_from(list: LabelList) -> Result<Self> {
        let map = LabelMap::from_hosts(list.labels.iter().map(String::as_str));
        if map.labels != list.labels {
            return Err(Error::Config(
                "label list must be sorted and free of duplicates".into(),
            ));
        }
        Ok(map)
    }
}

impl From<LabelMap> for LabelList {
    fn from(map: LabelMap) -> Self {
        LabelList { labels: map.labels }
    }
}

impl LabelMap {
    pub fn from_hosts<'a>(hosts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut labels: Vec<String> = hosts
            .into_iter()
            .map(str::to_owned)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        labels.shrink_to_fit();
        let index = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        Self { labels, index }
    }

    pub fn from_records(records: &[SequenceRecord]) -> Self {
        Self::from_hosts(records.iter().map(|r| r.host.as_str()))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, host: &str) -> Option<usize> {
        self.index.get(host).copied()
    }

    pub fn label(&self, index: usize) -> Option<&str> {
        self.labels.get(index).map(String::as_str)
    }
}

/// Train/test partition plus cross-validation folds over the training ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub folds: Vec<Vec<String>>,
}

impl SplitPlan {
    /// Training ids outside fold `k`, in `train_ids` order.
    pub fn fold_train_ids(&self, k: usize) -> Vec<&str> {
        let held: HashSet<&str> = self.folds[k].iter().map(String::as_str).collect();
        self.train_ids
            .iter()
            .map(String::as_str)
            .filter(|id| !held.contains(id))
            .collect()
    }
}

fn is_blank(line: &str) -> bool {
    line.trim().is_empty()
}

fn header_host(description: &str) -> Option<String> {
    let tokens: Vec<&str> = description.split_whitespace().collect();
    let start = tokens.iter().position(|t| t.starts_with("host="))?;
    let mut parts = vec![&tokens[start]["host=".len()..]];
    // The value runs until the next `key=value` token.
    for t in &tokens[start + 1..] {
        if t.contains('=') {
            break;
        }
        parts.push(t);
    }
    Some(parts.join(" ").trim().to_owned())
}

fn normalize_letters(raw: &str) -> String {
    raw.chars()
        .filter(|c| !c.is_whitespace())
        .flat_map(char::to_uppercase)
        .collect()
}

struct FastaEntry {
    id: String,
    description: String,
    header_line: usize,
    body: String,
}

fn fasta_entries<R: Read>(stream: R) -> Result<Vec<FastaEntry>> {
    fn finish(e: FastaEntry, out: &mut Vec<FastaEntry>) -> Result<()> {
        if e.body.is_empty() {
            return Err(Error::Parse {
                line: e.header_line,
                message: format!("record `{}` has an empty sequence", e.id),
            });
        }
        out.push(e);
        Ok(())
    }

    let reader = BufReader::new(stream);
    let mut entries = Vec::new();
    let mut current: Option<FastaEntry> = None;

    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if let Some(header) = line.strip_prefix('>') {
            if let Some(e) = current.take() {
                finish(e, &mut entries)?;
            }
            let header = header.trim();
            let (id, description) = match header.split_once(char::is_whitespace) {
                Some((id, rest)) => (id, rest.trim()),
                None => (header, ""),
            };
            if id.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    message: "header has no record id".into(),
                });
            }
            current = Some(FastaEntry {
                id: id.to_owned(),
                description: description.to_owned(),
                header_line: line_no,
                body: String::new(),
            });
        } else if let Some(e) = current.as_mut() {
            e.body.push_str(&normalize_letters(line));
        } else if !is_blank(line) {
            return Err(Error::Parse {
                line: line_no,
                message: "expected `>` at the start of a record".into(),
            });
        }
    }
    if let Some(e) = current.take() {
        finish(e, &mut entries)?;
    }
    Ok(entries)
}

/// Parses FASTA text. The host comes from a `host=<value>` token in the
/// description line, otherwise the whole description is the host.
pub fn parse_fasta<R: Read>(stream: R) -> Result<Vec<SequenceRecord>> {
    fasta_entries(stream)?
        .into_iter()
        .map(|e| {
            let host = header_host(&e.description).unwrap_or(e.description);
            if host.is_empty() {
                return Err(Error::Parse {
                    line: e.header_line,
                    message: format!("record `{}` has no host label", e.id),
                });
            }
            Ok(SequenceRecord {
                id: e.id,
                sequence: e.body,
                host,
            })
        })
        .collect()
}

/// Sequence without a host label, for inference inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnlabeledRecord {
    pub id: String,
    pub sequence: String,
}

/// Like [`parse_fasta`] but ignores the description line.
pub fn parse_fasta_unlabeled<R: Read>(stream: R) -> Result<Vec<UnlabeledRecord>> {
    Ok(fasta_entries(stream)?
        .into_iter()
        .map(|e| UnlabeledRecord {
            id: e.id,
            sequence: e.body,
        })
        .collect())
}

/// Column names used by [`parse_csv`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvColumns {
    pub id: String,
    pub sequence: String,
    pub host: String,
}

impl Default for CsvColumns {
    fn default() -> Self {
        Self {
            id: "id".into(),
            sequence: "sequence".into(),
            host: "host".into(),
        }
    }
}

fn csv_rows<R: Read>(
    stream: R,
    id: &str,
    sequence: &str,
    host: Option<&str>,
) -> Result<Vec<(UnlabeledRecord, Option<String>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(stream);

    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Config(format!("CSV header lacks column `{name}`")))
    };
    let id_col = find(id)?;
    let seq_col = find(sequence)?;
    let host_col = host.map(find).transpose()?;

    let mut rows = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let id = row[id_col].trim().to_owned();
        let sequence = normalize_letters(&row[seq_col]);
        if sequence.is_empty() {
            return Err(Error::Parse {
                line,
                message: format!("record `{id}` has an empty sequence"),
            });
        }
        let host = match host_col {
            Some(c) => {
                let host = row[c].trim().to_owned();
                if host.is_empty() {
                    return Err(Error::Parse {
                        line,
                        message: format!("record `{id}` has an empty host"),
                    });
                }
                Some(host)
            }
            None => None,
        };
        rows.push((UnlabeledRecord { id, sequence }, host));
    }
    Ok(rows)
}

/// Parses a headered CSV table with RFC 4180 quoting.
pub fn parse_csv<R: Read>(stream: R, columns: &CsvColumns) -> Result<Vec<SequenceRecord>> {
    Ok(
        csv_rows(stream, &columns.id, &columns.sequence, Some(&columns.host))?
            .into_iter()
            .map(|(r, host)| SequenceRecord {
                id: r.id,
                sequence: r.sequence,
                host: host.expect("host column requested"),
            })
            .collect(),
    )
}

/// Like [`parse_csv`] without a host column.
pub fn parse_csv_unlabeled<R: Read>(
    stream: R,
    columns: &CsvColumns,
) -> Result<Vec<UnlabeledRecord>> {
    Ok(csv_rows(stream, &columns.id, &columns.sequence, None)?
        .into_iter()
        .map(|(r, _)| r)
        .collect())
}

/// Writes records as a CSV table readable by [`parse_csv`] with default columns.
pub fn write_csv<W: std::io::Write>(records: &[SequenceRecord], out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(["id", "sequence", "host"])?;
    for r in records {
        writer.write_record([&r.id, &r.sequence, &r.host])?;
    }
    writer.flush()?;
    Ok(())
}

/// Per-host record counts, keyed in label order.
pub fn host_counts(records: &[SequenceRecord]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for r in records {
        *counts.entry(r.host.clone()).or_insert(0) += 1;
    }
    counts
}

/// Keeps records whose host occurs at least `min_count` times.
pub fn filter_hosts(records: &[SequenceRecord], min_count: usize) -> Vec<SequenceRecord> {
    let counts = host_counts(records);
    records
        .iter()
        .filter(|r| counts[&r.host] >= min_count)
        .cloned()
        .collect()
}

/// Number of test records drawn from a class of `n`: `round(fraction * n)`,
/// half away from zero.
pub fn stratum_test_size(n: usize, fraction: f64) -> usize {
    (fraction * n as f64).round() as usize
}

/// Stratified train/test split with stratified cross-validation folds.
///
/// Within each class (in label order) the record indices are shuffled by the
/// split stream of `seed`; the first `round(test_fraction * n)` go to test.
/// Remaining training records are dealt round-robin onto the folds, with the
/// dealing position carried across classes so fold sizes differ by at most one.
/// Id lists keep the input order of the records.
pub fn make_split(
    records: &[SequenceRecord],
    test_fraction: f64,
    folds: usize,
    seed: u64,
) -> Result<SplitPlan> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::InvalidArgument(format!(
            "test fraction must be in [0, 1), got {test_fraction}"
        )));
    }
    if folds < 2 {
        return Err(Error::InvalidArgument(format!(
            "at least 2 folds are required, got {folds}"
        )));
    }
    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::DuplicateId(r.id.clone()));
        }
    }

    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_class.entry(r.host.as_str()).or_default().push(i);
    }
    for (class, members) in &by_class {
        if members.len() < folds + 1 {
            return Err(Error::ClassTooSmall {
                class: (*class).to_owned(),
                count: members.len(),
                required: folds + 1,
            });
        }
    }

    let mut rng = SplitMix64::new(derive_seed(seed, streams::SPLIT));
    let mut is_test = vec![false; records.len()];
    let mut fold_of = vec![usize::MAX; records.len()];
    let mut deal = 0usize;
    for members in by_class.values() {
        let mut order = members.clone();
        rng.shuffle(&mut order);
        let n_test = stratum_test_size(order.len(), test_fraction);
        for &i in &order[..n_test] {
            is_test[i] = true;
        }
        for &i in &order[n_test..] {
            fold_of[i] = deal % folds;
            deal += 1;
        }
    }

    let mut plan = SplitPlan {
        seed,
        train_ids: Vec::new(),
        test_ids: Vec::new(),
        folds: vec![Vec::new(); folds],
    };
    for (i, r) in records.iter().enumerate() {
        if is_test[i] {
            plan.test_ids.push(r.id.clone());
        } else {
            plan.train_ids.push(r.id.clone());
            plan.folds[fold_of[i]].push(r.id.clone());
        }
    }
    Ok(plan)
}

/// Selects records by id, in the order of `ids`.
pub fn select_records<'a, S: AsRef<str>>(
    records: &'a [SequenceRecord],
    ids: &[S],
) -> Result<Vec<&'a SequenceRecord>> {
    let by_id: HashMap<&str, &SequenceRecord> =
        records.iter().map(|r| (r.id.as_str(), r)).collect();
    ids.iter()
        .map(|id| {
            by_id.get(id.as_ref()).copied().ok_or_else(|| {
                Error::InvalidArgument(format!("unknown record id `{}`", id.as_ref()))
            })
        })
        .collect()
}
