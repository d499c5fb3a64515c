//! Synthetic corpus and series with planted text-to-series associations.
//!
//! Every document is background words `w{i}`. A planted document has one
//! position replaced by a signal word, `p{i}` from the positive lexicon or
//! `n{i}` from the negative one, and is flagged relevant. The series follows
//! `x_t = φ·x_{t−1} + α·z_t + ε_t` with `x_0 = 0`, where `z_t` is the number
//! of positive minus negative planted documents on day `t`.

use chrono::{Days, NaiveDate};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Corpus, CorpusDay, Headline, Series};
use crate::rng::{seeded, Stream};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
}

/// How signal words are planted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Planting {
    /// Each document independently with this probability.
    PerDocument(f64),
    /// Exactly one document per day.
    OnePerDay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_days: usize,
    pub docs_min: usize,
    pub docs_max: usize,
    pub doc_len_min: usize,
    pub doc_len_max: usize,
    /// Number of distinct background words.
    pub background_words: usize,
    /// Words per signal lexicon.
    pub lexicon_size: usize,
    pub planting: Planting,
    pub phi: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub seed: u64,
    pub start: NaiveDate,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_days: 2200,
            docs_min: 10,
            docs_max: 10,
            doc_len_min: 8,
            doc_len_max: 8,
            background_words: 500,
            lexicon_size: 5,
            planting: Planting::OnePerDay,
            phi: 0.5,
            alpha: 1.0,
            sigma: 0.1,
            seed: 42,
            start: NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date"),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Spec(m.into()));
        if self.n_days == 0 {
            return bad("n_days must be positive");
        }
        if self.docs_min == 0 || self.docs_min > self.docs_max {
            return bad("need 1 ≤ docs_min ≤ docs_max");
        }
        if self.doc_len_min == 0 || self.doc_len_min > self.doc_len_max {
            return bad("need 1 ≤ doc_len_min ≤ doc_len_max");
        }
        if self.background_words == 0 || self.lexicon_size == 0 {
            return bad("word counts must be positive");
        }
        if !(0.0..1.0).contains(&self.phi) {
            return bad("phi must lie in [0, 1)");
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) || !self.alpha.is_finite() {
            return bad("sigma must be finite and nonnegative, alpha finite");
        }
        if let Planting::PerDocument(p) = self.planting {
            if !(0.0..=1.0).contains(&p) {
                return bad("planting probability must lie in [0, 1]");
            }
        }
        if self.start.checked_add_days(Days::new(self.n_days as u64)).is_none() {
            return bad("date range overflows");
        }
        Ok(())
    }

    pub fn positive_word(i: usize) -> String {
        format!("p{i}")
    }

    pub fn negative_word(i: usize) -> String {
        format!("n{i}")
    }
}

/// Signed count of planted documents, `#positive − #negative`.
pub fn signal_count(day: &CorpusDay) -> i64 {
    day.headlines
        .iter()
        .map(|h| {
            let mut s = 0;
            for t in h.text.split(' ') {
                match t.as_bytes().first() {
                    Some(b'p') => s += 1,
                    Some(b'n') => s -= 1,
                    _ => {}
                }
            }
            s
        })
        .sum()
}

/// Deterministic in `spec.seed`.
pub fn generate(spec: &SynthSpec) -> Result<(Corpus, Series), SynthError> {
    spec.validate()?;
    let mut rng = seeded(spec.seed, Stream::Synth);
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| SynthError::Spec(e.to_string()))?;
    let mut days = Vec::with_capacity(spec.n_days);
    let mut dates = Vec::with_capacity(spec.n_days);
    let mut values = Vec::with_capacity(spec.n_days);
    let mut x = 0.0f64;
    for t in 0..spec.n_days {
        let date = spec.start + Days::new(t as u64);
        let n = rng.random_range(spec.docs_min..=spec.docs_max);
        let chosen = match spec.planting {
            Planting::OnePerDay => Some(rng.random_range(0..n)),
            Planting::PerDocument(_) => None,
        };
        let mut z = 0i64;
        let mut headlines = Vec::with_capacity(n);
        for j in 0..n {
            let len = rng.random_range(spec.doc_len_min..=spec.doc_len_max);
            let mut words: Vec<String> = (0..len)
                .map(|_| format!("w{}", rng.random_range(0..spec.background_words)))
                .collect();
            let planted = match spec.planting {
                Planting::OnePerDay => chosen == Some(j),
                Planting::PerDocument(p) => rng.random_bool(p),
            };
            if planted {
                let pos = rng.random_range(0..len);
                let idx = rng.random_range(0..spec.lexicon_size);
                words[pos] = if rng.random_bool(0.5) {
                    z += 1;
                    SynthSpec::positive_word(idx)
                } else {
                    z -= 1;
                    SynthSpec::negative_word(idx)
                };
            }
            headlines.push(Headline {
                text: words.join(" "),
                relevant: Some(planted),
            });
        }
        x = spec.phi * x + spec.alpha * z as f64;
        if spec.sigma > 0.0 {
            x += noise.sample(&mut rng);
        }
        days.push(CorpusDay { date, headlines });
        dates.push(date);
        values.push(x);
    }
    let corpus = Corpus::new(days).expect("dates increase");
    let series = Series::univariate(dates, values).expect("aligned series");
    Ok((corpus, series))
}
