//! Seeded synthetic relevance datasets.
//!
//! Each category owns a pool of pseudo-words. Queries draw 1-3 words from
//! their category, or are model-number style (`S2716DG`) for the configured
//! alphanumeric fraction. Titles are built per query:
//!
//! * positives (grade 4-5): the query words (all of them for grade 5, at
//!   least `min(2, |query|)` for grade 4) among same-category filler;
//! * grade 3 (about 5%): same-category filler with one query word;
//! * negatives (grade 1-2): filler from another category. A configured
//!   fraction of them embed the literal query string. For model-number
//!   queries half the negatives are same-category near misses whose model
//!   number differs in its two-letter suffix.
//!
//! Centrality is 1 exactly when the title's category is the query's.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::RelevanceRecord;
use crate::error::{Error, Result};

const WORDS_PER_CATEGORY: usize = 40;
const NEUTRAL_RATE: f64 = 0.05;
const POSITIVE_RATE: f64 = 0.40;
const NEAR_MISS_RATE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub query_count: usize,
    pub titles_per_query: usize,
    pub category_count: usize,
    pub alphanum_fraction: f64,
    pub shared_substring_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 42,
            query_count: 500,
            titles_per_query: 10,
            category_count: 20,
            alphanum_fraction: 0.2,
            shared_substring_fraction: 0.3,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.query_count == 0 || self.titles_per_query == 0 || self.category_count == 0 {
            return Err(Error::InvalidConfig("synthetic counts must be >= 1".into()));
        }
        for (name, f) in [
            ("alphanum_fraction", self.alphanum_fraction),
            ("shared_substring_fraction", self.shared_substring_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::InvalidConfig(format!("{name} {f} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SyntheticDataset {
    pub train: Vec<RelevanceRecord>,
    pub valid: Vec<RelevanceRecord>,
    pub test: Vec<RelevanceRecord>,
    /// Category of every query, for scanning oracles.
    pub query_category: BTreeMap<String, usize>,
    /// Category of every title.
    pub title_category: BTreeMap<String, usize>,
}

impl SyntheticDataset {
    pub fn all_records(&self) -> impl Iterator<Item = &RelevanceRecord> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }
}

const CONSONANTS: &[u8] = b"bcdfghjklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const UPPER: &[u8] = b"ABCDEFGHJKLMNPRSTVWXYZ";

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.gen_range(2..=4);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
        w.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
    }
    if rng.gen_bool(0.5) {
        w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
    }
    w
}

fn upper(rng: &mut ChaCha8Rng) -> char {
    UPPER[rng.gen_range(0..UPPER.len())] as char
}

/// Letters, digits, then a two-letter suffix, e.g. `S2716DG`.
fn model_number(rng: &mut ChaCha8Rng) -> (String, String) {
    let mut stem = String::new();
    for _ in 0..rng.gen_range(1..=2) {
        stem.push(upper(rng));
    }
    for _ in 0..rng.gen_range(3..=4) {
        stem.push(char::from(b'0' + rng.gen_range(0..10u8)));
    }
    let suffix: String = [upper(rng), upper(rng)].iter().collect();
    (stem, suffix)
}

struct Query {
    qid: String,
    category: usize,
    words: Vec<String>,
    /// `(stem, suffix)` for model-number queries.
    model: Option<(String, String)>,
    text: String,
}

struct Generator<'a> {
    spec: &'a SynthSpec,
    rng: ChaCha8Rng,
    pools: Vec<Vec<String>>,
    next_title: usize,
}

impl Generator<'_> {
    fn filler(&mut self, category: usize, n: usize, avoid: &[String]) -> Vec<String> {
        let pool: Vec<&String> = self.pools[category].iter().filter(|w| !avoid.contains(w)).collect();
        pool.choose_multiple(&mut self.rng, n.min(pool.len()))
            .map(|w| (*w).clone())
            .collect()
    }

    fn other_category(&mut self, category: usize) -> usize {
        if self.spec.category_count == 1 {
            return category;
        }
        let c = self.rng.gen_range(0..self.spec.category_count - 1);
        if c >= category {
            c + 1
        } else {
            c
        }
    }

    fn query(&mut self, i: usize) -> Query {
        let category = i % self.spec.category_count;
        if self.rng.gen_bool(self.spec.alphanum_fraction) {
            let (stem, suffix) = model_number(&mut self.rng);
            let mut words = Vec::new();
            if self.rng.gen_bool(0.5) {
                words = self.filler(category, 1, &[]);
            }
            words.push(format!("{stem}{suffix}"));
            let text = words.join(" ");
            Query {
                qid: format!("q{i:05}"),
                category,
                words,
                model: Some((stem, suffix)),
                text,
            }
        } else {
            let n = self.rng.gen_range(1..=3);
            let words = self.filler(category, n, &[]);
            let text = words.join(" ");
            Query {
                qid: format!("q{i:05}"),
                category,
                words,
                model: None,
                text,
            }
        }
    }

    fn record(&mut self, q: &Query, mut tokens: Vec<String>, shuffle: bool, grade: u8, category: usize) -> (RelevanceRecord, usize) {
        if shuffle {
            tokens.shuffle(&mut self.rng);
        }
        let title_id = format!("t{:06}", self.next_title);
        self.next_title += 1;
        let rec = RelevanceRecord {
            qid: q.qid.clone(),
            query: q.text.clone(),
            title_id,
            title: tokens.join(" "),
            grade,
            central: Some(u8::from(category == q.category)),
        };
        (rec, category)
    }

    fn positive(&mut self, q: &Query) -> (RelevanceRecord, usize) {
        let n = q.words.len();
        let (shared, grade) = if n >= 2 && self.rng.gen_bool(0.5) {
            (q.words.clone(), 5)
        } else if n >= 3 {
            let shared = q.words.choose_multiple(&mut self.rng, 2).cloned().collect();
            (shared, 4)
        } else {
            (q.words.clone(), 4)
        };
        let k = self.rng.gen_range(4..=6);
        let mut tokens = self.filler(q.category, k, &q.words);
        tokens.extend(shared);
        self.record(q, tokens, true, grade, q.category)
    }

    fn neutral(&mut self, q: &Query) -> (RelevanceRecord, usize) {
        let k = self.rng.gen_range(4..=6);
        let mut tokens = self.filler(q.category, k, &q.words);
        if let Some(w) = q.words.choose(&mut self.rng) {
            tokens.push(w.clone());
        }
        self.record(q, tokens, true, 3, q.category)
    }

    fn negative(&mut self, q: &Query) -> (RelevanceRecord, usize) {
        let grade = self.rng.gen_range(1..=2);
        if let Some((stem, suffix)) = &q.model {
            if self.rng.gen_bool(NEAR_MISS_RATE) {
                let mut other = suffix.clone();
                while &other == suffix {
                    other = [upper(&mut self.rng), upper(&mut self.rng)].iter().collect();
                }
                let k = self.rng.gen_range(4..=6);
                let mut tokens = self.filler(q.category, k, &q.words);
                tokens.push(format!("{stem}{other}"));
                return self.record(q, tokens, true, grade, q.category);
            }
        }
        let category = self.other_category(q.category);
        let k = self.rng.gen_range(5..=7);
        let mut tokens = self.filler(category, k, &q.words);
        tokens.shuffle(&mut self.rng);
        if self.rng.gen_bool(self.spec.shared_substring_fraction) {
            let at = self.rng.gen_range(0..=tokens.len());
            tokens.insert(at, q.text.clone());
        }
        self.record(q, tokens, false, grade, category)
    }
}

/// Generates train/valid/test splits (80/10/10 by query). Pure in `spec`.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::new();
    let mut pools = Vec::with_capacity(spec.category_count);
    for _ in 0..spec.category_count {
        let mut pool = Vec::with_capacity(WORDS_PER_CATEGORY);
        while pool.len() < WORDS_PER_CATEGORY {
            let w = pseudo_word(&mut rng);
            if seen.insert(w.clone()) {
                pool.push(w);
            }
        }
        pools.push(pool);
    }
    let mut gen = Generator {
        spec,
        rng,
        pools,
        next_title: 0,
    };

    let mut per_query: Vec<Vec<RelevanceRecord>> = Vec::with_capacity(spec.query_count);
    let mut query_category = BTreeMap::new();
    let mut title_category = BTreeMap::new();
    for i in 0..spec.query_count {
        let q = gen.query(i);
        query_category.insert(q.qid.clone(), q.category);
        let mut rows = Vec::with_capacity(spec.titles_per_query);
        for slot in 0..spec.titles_per_query {
            let (rec, cat) = match slot {
                0 => gen.positive(&q),
                1 => gen.negative(&q),
                _ => {
                    let r: f64 = gen.rng.gen();
                    if r < NEUTRAL_RATE {
                        gen.neutral(&q)
                    } else if r < NEUTRAL_RATE + POSITIVE_RATE {
                        gen.positive(&q)
                    } else {
                        gen.negative(&q)
                    }
                }
            };
            title_category.insert(rec.title_id.clone(), cat);
            rows.push(rec);
        }
        per_query.push(rows);
    }

    let n = spec.query_count;
    let (n_valid, n_test) = if n >= 3 { ((n / 10).max(1), (n / 10).max(1)) } else { (0, 0) };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut gen.rng);
    let test_ids: HashSet<usize> = order[..n_test].iter().copied().collect();
    let valid_ids: HashSet<usize> = order[n_test..n_test + n_valid].iter().copied().collect();
    let mut out = SyntheticDataset {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        query_category,
        title_category,
    };
    for (i, rows) in per_query.into_iter().enumerate() {
        if test_ids.contains(&i) {
            out.test.extend(rows);
        } else if valid_ids.contains(&i) {
            out.valid.extend(rows);
        } else {
            out.train.extend(rows);
        }
    }
    Ok(out)
}
