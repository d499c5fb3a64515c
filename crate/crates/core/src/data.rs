//! Corpus and series ingestion, tokenization, vocabulary and sample windows.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{PAD_ID, UNK_ID};

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("corpus line {line}: {msg}")]
    Corpus { line: usize, msg: String },
    #[error("series row {row}: {msg}")]
    Series { row: usize, msg: String },
    #[error("dates must be strictly increasing, {date} follows {prev}")]
    DateOrder { prev: NaiveDate, date: NaiveDate },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("no samples could be built: {0}")]
    NoSamples(String),
    #[error("invalid split: {0}")]
    Split(String),
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),
}

/// Lowercases, splits on runs of non-alphanumeric characters and keeps at
/// most `max_len` tokens.
pub fn tokenize(text: &str, max_len: usize) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .take(max_len)
        .map(str::to_lowercase)
        .collect()
}

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Word to id map. Id 0 is padding and id 1 the unknown word.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Keeps the `max_size − 2` most frequent tokens, ties broken
    /// lexicographically. When `allowed` is given, tokens outside it are
    /// dropped before counting.
    pub fn build<'a, I>(tokens: I, max_size: usize, allowed: Option<&dyn Fn(&str) -> bool>) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in tokens {
            if allowed.is_none_or(|ok| ok(t)) {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let keep = max_size.saturating_sub(2);
        let words = [PAD_TOKEN, UNK_TOKEN]
            .into_iter()
            .chain(ranked.into_iter().take(keep).map(|(w, _)| w))
            .map(str::to_owned)
            .collect();
        Self::from_words(words).expect("reserved entries present")
    }

    /// Restores a vocabulary from its id-ordered word list.
    pub fn from_words(words: Vec<String>) -> Result<Self, DataError> {
        if words.len() < 2 || words[PAD_ID] != PAD_TOKEN || words[UNK_ID] != UNK_TOKEN {
            return Err(DataError::Vocabulary("must start with <pad>, <unk>".into()));
        }
        let index: HashMap<String, usize> = words.iter().cloned().enumerate().map(|(i, w)| (w, i)).collect();
        if index.len() != words.len() {
            return Err(DataError::Vocabulary("duplicate word".into()));
        }
        Ok(Self { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Id of `word`, or the unknown id.
    pub fn id(&self, word: &str) -> usize {
        self.get(word).unwrap_or(UNK_ID)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }
}

/// One day's tokenized documents, padded to a common length.
#[derive(Clone, Debug, PartialEq)]
pub struct DocumentBatch {
    ids: Vec<usize>,
    max_len: usize,
    lengths: Vec<usize>,
    relevant: Vec<Option<bool>>,
    texts: Vec<String>,
}

impl DocumentBatch {
    /// Pads (with id 0) or truncates each document to `max_len` tokens.
    pub fn new(docs: &[Vec<usize>], max_len: usize, relevant: Vec<Option<bool>>, texts: Vec<String>) -> Self {
        assert!(max_len >= 1);
        assert_eq!(relevant.len(), docs.len());
        assert_eq!(texts.len(), docs.len());
        let mut ids = vec![PAD_ID; docs.len() * max_len];
        let mut lengths = Vec::with_capacity(docs.len());
        for (j, doc) in docs.iter().enumerate() {
            let len = doc.len().min(max_len);
            ids[j * max_len..j * max_len + len].copy_from_slice(&doc[..len]);
            lengths.push(len);
        }
        Self {
            ids,
            max_len,
            lengths,
            relevant,
            texts,
        }
    }

    /// Unlabeled batch with placeholder texts.
    pub fn from_ids(docs: &[Vec<usize>], max_len: usize) -> Self {
        Self::new(docs, max_len, vec![None; docs.len()], vec![String::new(); docs.len()])
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    /// Token at position `pos` of document `doc`; 0 past its length.
    pub fn token(&self, doc: usize, pos: usize) -> usize {
        self.ids[doc * self.max_len + pos]
    }

    /// Padded id row of document `doc`.
    pub fn ids(&self, doc: usize) -> &[usize] {
        &self.ids[doc * self.max_len..(doc + 1) * self.max_len]
    }

    pub fn relevant(&self) -> &[Option<bool>] {
        &self.relevant
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    /// All documents take part in attention.
    pub fn mask(&self) -> Vec<bool> {
        vec![true; self.len()]
    }

    /// Indices flagged as ground-truth relevant.
    pub fn ground_truth(&self) -> Vec<usize> {
        self.relevant
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == Some(true))
            .map(|(i, _)| i)
            .collect()
    }

    /// Rebuilds the batch with documents reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let docs: Vec<Vec<usize>> = order.iter().map(|&j| self.ids(j)[..self.lengths[j]].to_vec()).collect();
        Self::new(
            &docs,
            self.max_len,
            order.iter().map(|&j| self.relevant[j]).collect(),
            order.iter().map(|&j| self.texts[j].clone()).collect(),
        )
    }
}

/// A headline in release order, with an optional ground-truth flag.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Headline {
    pub text: String,
    #[serde(default)]
    pub relevant: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDay {
    pub date: NaiveDate,
    pub headlines: Vec<Headline>,
}

/// Days of headlines with strictly increasing dates.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    days: Vec<CorpusDay>,
}

impl Corpus {
    pub fn new(days: Vec<CorpusDay>) -> Result<Self, DataError> {
        for w in days.windows(2) {
            if w[1].date <= w[0].date {
                return Err(DataError::DateOrder {
                    prev: w[0].date,
                    date: w[1].date,
                });
            }
        }
        Ok(Self { days })
    }

    pub fn days(&self) -> &[CorpusDay] {
        &self.days
    }

    pub fn day(&self, date: NaiveDate) -> Option<&CorpusDay> {
        self.days
            .binary_search_by_key(&date, |d| d.date)
            .ok()
            .map(|i| &self.days[i])
    }

    /// Reads one JSON object per line; blank lines are ignored.
    pub fn read_jsonl(reader: impl BufRead) -> Result<Self, DataError> {
        let mut days = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let day: CorpusDay = serde_json::from_str(&line).map_err(|e| DataError::Corpus {
                line: i + 1,
                msg: e.to_string(),
            })?;
            days.push(day);
        }
        Self::new(days)
    }

    pub fn write_jsonl(&self, mut writer: impl Write) -> Result<(), DataError> {
        for day in &self.days {
            serde_json::to_writer(&mut writer, day).map_err(std::io::Error::from)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Dated observations with `D` value columns.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Series {
    dates: Vec<NaiveDate>,
    values: Vec<Vec<f64>>,
}

impl Series {
    pub fn new(dates: Vec<NaiveDate>, values: Vec<Vec<f64>>) -> Result<Self, DataError> {
        if dates.len() != values.len() {
            return Err(DataError::Series {
                row: dates.len().min(values.len()),
                msg: "dates and values differ in length".into(),
            });
        }
        let dim = values.first().map_or(1, Vec::len);
        for (row, v) in values.iter().enumerate() {
            if v.len() != dim || dim == 0 {
                return Err(DataError::Series {
                    row: row + 1,
                    msg: format!("expected {dim} values"),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(DataError::Series {
                    row: row + 1,
                    msg: "non-finite value".into(),
                });
            }
        }
        for w in dates.windows(2) {
            if w[1] <= w[0] {
                return Err(DataError::DateOrder { prev: w[0], date: w[1] });
            }
        }
        Ok(Self { dates, values })
    }

    /// Single-column series.
    pub fn univariate(dates: Vec<NaiveDate>, values: Vec<f64>) -> Result<Self, DataError> {
        Self::new(dates, values.into_iter().map(|v| vec![v]).collect())
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.first().map_or(1, Vec::len)
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// Reads CSV with header `date,value` or `date,v1,…,vD`.
    pub fn read_csv(reader: impl std::io::Read) -> Result<Self, DataError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header = rdr.headers().map_err(|e| DataError::Series {
            row: 0,
            msg: e.to_string(),
        })?;
        if header.len() < 2 || &header[0] != "date" {
            return Err(DataError::Series {
                row: 0,
                msg: "header must be date,value[,…]".into(),
            });
        }
        let mut dates = Vec::new();
        let mut values = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 1;
            let err = |msg: String| DataError::Series { row, msg };
            let rec = rec.map_err(|e| err(e.to_string()))?;
            let date = NaiveDate::parse_from_str(rec.get(0).unwrap_or(""), "%Y-%m-%d").map_err(|e| err(e.to_string()))?;
            let vals = rec
                .iter()
                .skip(1)
                .map(|s| s.trim().parse::<f64>().map_err(|e| err(e.to_string())))
                .collect::<Result<Vec<_>, _>>()?;
            dates.push(date);
            values.push(vals);
        }
        Self::new(dates, values)
    }

    pub fn write_csv(&self, writer: impl Write) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        let csv_err = |e: csv::Error| DataError::Io(std::io::Error::other(e));
        let mut header = vec!["date".to_owned()];
        if self.dim() == 1 {
            header.push("value".into());
        } else {
            header.extend((1..=self.dim()).map(|i| format!("v{i}")));
        }
        w.write_record(&header).map_err(csv_err)?;
        for (d, v) in self.dates.iter().zip(&self.values) {
            let mut rec = vec![d.format("%Y-%m-%d").to_string()];
            rec.extend(v.iter().map(|x| x.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Keeps the last `cap` items (the latest released).
pub fn cap_daily_docs<T>(docs: &[T], cap: usize) -> &[T] {
    &docs[docs.len().saturating_sub(cap)..]
}

/// Per-column z-score transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Population statistics; a constant column gets std 1.
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let dim = rows.first().map_or(1, Vec::len);
        if rows.is_empty() {
            return Self::identity(dim);
        }
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..dim).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n).collect();
        let std = (0..dim)
            .map(|c| {
                let var = rows.iter().map(|r| (r[c] - mean[c]).powi(2)).sum::<f64>() / n;
                let s = var.sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, col: usize, x: f64) -> f64 {
        (x - self.mean[col]) / self.std[col]
    }

    pub fn invert(&self, col: usize, z: f64) -> f64 {
        z * self.std[col] + self.mean[col]
    }
}

/// Look-back window and target for one day. Model-facing values are
/// normalized; raw values are kept for movement labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesWindow {
    pub date: NaiveDate,
    /// `[m × D]`, oldest first.
    pub values: Vec<f32>,
    pub dim: usize,
    /// First column at `t`, normalized.
    pub target: f32,
    /// First column at `t − 1`, normalized.
    pub prev: f32,
    pub target_raw: f64,
    pub prev_raw: f64,
}

impl SeriesWindow {
    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Row `step` of the window.
    pub fn step(&self, step: usize) -> &[f32] {
        &self.values[step * self.dim..(step + 1) * self.dim]
    }

    /// Up when the raw change is non-negative.
    pub fn movement_up(&self) -> bool {
        self.target_raw - self.prev_raw >= 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub window: SeriesWindow,
    pub docs: DocumentBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRule {
    /// Inclusive upper dates of the training and validation periods.
    Dates {
        train_until: NaiveDate,
        valid_until: NaiveDate,
    },
    /// Fractions of the ordered sample list.
    Fractions([f64; 3]),
}

impl Default for SplitRule {
    fn default() -> Self {
        SplitRule::Fractions([0.70, 0.15, 0.15])
    }
}

#[derive(Clone, Debug)]
pub struct SampleConfig {
    /// Look-back length `m`.
    pub window: usize,
    /// Tokens per document `K`.
    pub max_len: usize,
    pub daily_doc_cap: usize,
    pub split: SplitRule,
}

/// Counts describing how corpus and series were aligned.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AlignmentReport {
    /// Series dates with a full look-back window.
    pub eligible_days: usize,
    pub samples: usize,
    /// Eligible days without any usable document.
    pub skipped_no_docs: usize,
    /// Corpus days whose date is absent from the series.
    pub alignment_gaps: usize,
    /// Documents with no tokens after tokenization, dropped.
    pub empty_documents: usize,
    /// Days that exceeded the daily cap.
    pub capped_days: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
    pub normalizer: Normalizer,
    pub report: AlignmentReport,
}

impl Dataset {
    pub fn all(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }
}

/// All corpus tokens, for vocabulary building.
pub fn corpus_tokens(corpus: &Corpus, max_len: usize) -> Vec<String> {
    corpus
        .days()
        .iter()
        .flat_map(|d| &d.headlines)
        .flat_map(|h| tokenize(&h.text, max_len))
        .collect()
}

/// Pairs each eligible series date with its day's documents, splits the
/// result and normalizes the windows. When `normalizer` is `None` it is fit
/// on series rows up to the last training date.
pub fn make_samples(
    corpus: &Corpus,
    series: &Series,
    vocab: &Vocab,
    cfg: &SampleConfig,
    normalizer: Option<Normalizer>,
) -> Result<Dataset, DataError> {
    if cfg.window == 0 {
        return Err(DataError::NoSamples("window must be at least 1".into()));
    }
    if corpus.days().is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    let mut report = AlignmentReport {
        alignment_gaps: corpus
            .days()
            .iter()
            .filter(|d| series.dates().binary_search(&d.date).is_err())
            .count(),
        ..Default::default()
    };

    // (series index, docs) per emitted sample
    let mut raw: Vec<(usize, DocumentBatch)> = Vec::new();
    for t in cfg.window..series.len() {
        report.eligible_days += 1;
        let Some(day) = corpus.day(series.dates()[t]) else {
            report.skipped_no_docs += 1;
            continue;
        };
        if day.headlines.len() > cfg.daily_doc_cap {
            report.capped_days += 1;
        }
        let mut ids = Vec::new();
        let mut relevant = Vec::new();
        let mut texts = Vec::new();
        for h in cap_daily_docs(&day.headlines, cfg.daily_doc_cap) {
            let tokens = tokenize(&h.text, cfg.max_len);
            if tokens.is_empty() {
                report.empty_documents += 1;
                continue;
            }
            ids.push(vocab.encode(&tokens));
            relevant.push(h.relevant);
            texts.push(h.text.clone());
        }
        if ids.is_empty() {
            report.skipped_no_docs += 1;
            continue;
        }
        raw.push((t, DocumentBatch::new(&ids, cfg.max_len, relevant, texts)));
    }
    if raw.is_empty() {
        return Err(DataError::NoSamples("no series date has a full window and documents".into()));
    }

    let n = raw.len();
    let (n_train, n_valid) = match &cfg.split {
        SplitRule::Fractions(f) => {
            if f.iter().any(|x| !(0.0..=1.0).contains(x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(DataError::Split(format!("fractions {f:?} must be in [0,1] and sum to 1")));
            }
            let tr = (f[0] * n as f64).round() as usize;
            let va = ((f[1] * n as f64).round() as usize).min(n - tr);
            (tr, va)
        }
        SplitRule::Dates {
            train_until,
            valid_until,
        } => {
            if valid_until < train_until {
                return Err(DataError::Split("valid_until precedes train_until".into()));
            }
            let date = |i: usize| series.dates()[raw[i].0];
            let tr = (0..n).take_while(|&i| date(i) <= *train_until).count();
            let va = (tr..n).take_while(|&i| date(i) <= *valid_until).count();
            (tr, va)
        }
    };

    let normalizer = match normalizer {
        Some(nz) => nz,
        None => {
            let last = if n_train > 0 { raw[n_train - 1].0 } else { raw[0].0 };
            Normalizer::fit(&series.values()[..=last])
        }
    };
    let dim = series.dim();
    if normalizer.mean.len() != dim {
        return Err(DataError::Series {
            row: 0,
            msg: format!("normalizer has {} columns, series has {dim}", normalizer.mean.len()),
        });
    }

    let mut samples: Vec<Sample> = raw
        .into_iter()
        .map(|(t, docs)| {
            let vals = series.values();
            let values = (t - cfg.window..t)
                .flat_map(|r| (0..dim).map(move |c| (r, c)))
                .map(|(r, c)| normalizer.apply(c, vals[r][c]) as f32)
                .collect();
            Sample {
                window: SeriesWindow {
                    date: series.dates()[t],
                    values,
                    dim,
                    target: normalizer.apply(0, vals[t][0]) as f32,
                    prev: normalizer.apply(0, vals[t - 1][0]) as f32,
                    target_raw: vals[t][0],
                    prev_raw: vals[t - 1][0],
                },
                docs,
            }
        })
        .collect();
    let test = samples.split_off(n_train + n_valid);
    let valid = samples.split_off(n_train);
    report.samples = n;
    report.train = samples.len();
    report.valid = valid.len();
    report.test = test.len();
    Ok(Dataset {
        train: samples,
        valid,
        test,
        normalizer,
        report,
    })
}
