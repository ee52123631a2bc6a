//! Free-text and coded visit fields to binary bag-of-words records:
//! tokenization with negation scopes and bigram merging, vocabulary
//! construction with anchor aggregation, and vectorization.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_file::sha256_hex;
use crate::record::{Dataset, DatasetMeta, PatientRecord};

pub const NEGATION_TRIGGERS: [&str; 6] = ["no", "not", "denies", "without", "non", "unable"];

pub const NEGATION_STOPS: [&str; 19] = [
    ".",
    ";",
    "[",
    "-",
    "\n",
    "+",
    "but",
    "and",
    "pt",
    "except",
    "reports",
    "alert",
    "complains",
    "has",
    "states",
    "secondary",
    "per",
    "did",
    "aox3",
];

pub const NEG_PREFIX: &str = "neg:";
pub const ANCHOR_PREFIX: &str = "anchor:";
pub const MED_PREFIX: &str = "med:";

fn is_stop(tok: &str) -> bool {
    NEGATION_STOPS.contains(&tok)
}

fn is_trigger(tok: &str) -> bool {
    NEGATION_TRIGGERS.contains(&tok)
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '/' || c == '\''
}

fn is_word(tok: &str) -> bool {
    tok.chars().next().is_some_and(is_word_char)
}

/// Lowercased split into word tokens and single-character punctuation
/// tokens; a newline becomes the token `"\n"`. A hyphen between two
/// alphanumeric characters stays inside its word.
pub fn raw_tokens(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    let mut out = Vec::new();
    let mut word = String::new();
    for (k, &c) in chars.iter().enumerate() {
        let inner_hyphen = c == '-'
            && !word.is_empty()
            && word.chars().last().is_some_and(char::is_alphanumeric)
            && chars.get(k + 1).is_some_and(|n| n.is_alphanumeric());
        if is_word_char(c) || inner_hyphen {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if c == '\n' || !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

fn bigram_eligible(tok: &str) -> bool {
    is_word(tok) && !is_stop(tok) && !is_trigger(tok)
}

/// Adjacent word pairs joined with `_`, merged greedily left to right.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BigramSet {
    pairs: BTreeSet<(String, String)>,
}

impl BigramSet {
    pub fn new<I, S>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, S)>,
        S: Into<String>,
    {
        Self {
            pairs: pairs
                .into_iter()
                .map(|(a, b)| (a.into(), b.into()))
                .collect(),
        }
    }

    /// From `"first second"` strings.
    pub fn from_phrases<S: AsRef<str>>(phrases: &[S]) -> Result<Self> {
        let mut pairs = BTreeSet::new();
        for p in phrases {
            let parts: Vec<&str> = p.as_ref().split_whitespace().collect();
            if parts.len() != 2 {
                return Err(Error::Config(format!(
                    "bigram {:?} must be two words",
                    p.as_ref()
                )));
            }
            pairs.insert((parts[0].to_lowercase(), parts[1].to_lowercase()));
        }
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn phrases(&self) -> Vec<String> {
        self.pairs.iter().map(|(a, b)| format!("{a} {b}")).collect()
    }

    fn contains(&self, a: &str, b: &str) -> bool {
        self.pairs.contains(&(a.to_string(), b.to_string()))
    }

    pub fn merge(&self, tokens: Vec<String>) -> Vec<String> {
        if self.pairs.is_empty() {
            return tokens;
        }
        let mut out = Vec::with_capacity(tokens.len());
        let mut k = 0;
        while k < tokens.len() {
            if k + 1 < tokens.len()
                && bigram_eligible(&tokens[k])
                && bigram_eligible(&tokens[k + 1])
                && self.contains(&tokens[k], &tokens[k + 1])
            {
                out.push(format!("{}_{}", tokens[k], tokens[k + 1]));
                k += 2;
            } else {
                out.push(tokens[k].clone());
                k += 1;
            }
        }
        out
    }
}

/// The `limit` most frequent eligible adjacent pairs over `texts` that
/// occur at least `min_count` times; ties broken lexicographically.
pub fn top_bigrams<S: AsRef<str>>(texts: &[S], limit: usize, min_count: usize) -> BigramSet {
    let mut counts: HashMap<(String, String), usize> = HashMap::new();
    for t in texts {
        let toks = raw_tokens(t.as_ref());
        for w in toks.windows(2) {
            if bigram_eligible(&w[0]) && bigram_eligible(&w[1]) {
                *counts.entry((w[0].clone(), w[1].clone())).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<_> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count)
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    BigramSet::new(ranked.into_iter().take(limit).map(|(p, _)| p))
}

/// Tokens after bigram merging and negation scoping. Triggers and word
/// stop tokens are emitted unprefixed; punctuation is not emitted.
/// A trigger opens a scope that prefixes every following word with
/// `neg:` until a stop token; a trigger inside an open scope does not
/// restart it. The token `-` closes any scope and prefixes only the next
/// word.
pub fn tokenize_with_negation(text: &str, bigrams: &BigramSet) -> Vec<String> {
    let tokens = bigrams.merge(raw_tokens(text));
    let mut out = Vec::with_capacity(tokens.len());
    let mut in_scope = false;
    let mut dash = false;
    for tok in tokens {
        if tok == "-" {
            in_scope = false;
            dash = true;
            continue;
        }
        if dash && is_word(&tok) && !is_stop(&tok) {
            out.push(format!("{NEG_PREFIX}{tok}"));
            dash = false;
            continue;
        }
        if is_stop(&tok) {
            in_scope = false;
            dash = false;
            if is_word(&tok) {
                out.push(tok);
            }
            continue;
        }
        if !is_word(&tok) {
            continue;
        }
        if is_trigger(&tok) {
            if in_scope {
                out.push(format!("{NEG_PREFIX}{tok}"));
            } else {
                in_scope = true;
                out.push(tok);
            }
            continue;
        }
        out.push(if in_scope {
            format!("{NEG_PREFIX}{tok}")
        } else {
            tok
        });
    }
    out
}

/// One visit with the fields of the feature table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawVisit {
    pub id: String,
    #[serde(default)]
    pub age: Option<f64>,
    #[serde(default)]
    pub sex: Option<String>,
    #[serde(default)]
    pub chief_complaint: String,
    #[serde(default)]
    pub triage: String,
    #[serde(default)]
    pub md_comments: String,
    #[serde(default)]
    pub medication_history: Vec<String>,
    #[serde(default)]
    pub dispensed_medications: Vec<String>,
    /// evaluation only
    #[serde(default)]
    pub billing_codes: Vec<String>,
}

impl RawVisit {
    pub fn texts(&self) -> [&str; 3] {
        [&self.chief_complaint, &self.triage, &self.md_comments]
    }
}

/// `age:40-49` for any age in [40, 50).
pub fn age_token(age: f64) -> Option<String> {
    if !age.is_finite() || age < 0.0 {
        return None;
    }
    let lo = (age / 10.0).floor() as u64 * 10;
    Some(format!("age:{lo}-{}", lo + 9))
}

pub fn sex_token(sex: &str) -> Option<String> {
    match sex.trim().to_lowercase().as_str() {
        "m" | "male" => Some("sex:male".into()),
        "f" | "female" => Some("sex:female".into()),
        _ => None,
    }
}

pub fn med_token(code: &str) -> String {
    format!("{MED_PREFIX}{}", code.trim().to_lowercase())
}

/// Distinct tokens of a visit from every field except billing codes.
pub fn visit_tokens(visit: &RawVisit, bigrams: &BigramSet) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    if let Some(t) = visit.age.and_then(age_token) {
        out.insert(t);
    }
    if let Some(t) = visit.sex.as_deref().and_then(sex_token) {
        out.insert(t);
    }
    for text in visit.texts() {
        out.extend(tokenize_with_negation(text, bigrams));
    }
    for code in visit
        .medication_history
        .iter()
        .chain(&visit.dispensed_medications)
    {
        if !code.trim().is_empty() {
            out.insert(med_token(code));
        }
    }
    out
}

/// Condition name to the tokens that count as its anchor, in insertion
/// order of the JSON file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnchorSpec(pub BTreeMap<String, Vec<String>>);

impl AnchorSpec {
    pub fn read(path: &Path) -> Result<Self> {
        let spec: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::Config(
                "anchor specification lists no conditions".into(),
            ));
        }
        for (cond, toks) in &self.0 {
            if toks.iter().all(|t| t.trim().is_empty()) {
                return Err(Error::Config(format!(
                    "condition {cond} has no anchor tokens"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabularyConfig {
    pub max_terms: usize,
    /// tokens in more than this fraction of records are dropped
    pub max_document_fraction_percent: u32,
    /// used when no explicit bigram list is given
    pub bigram_limit: usize,
    pub bigram_min_count: usize,
    pub bigrams: Option<Vec<String>>,
}

impl Default for VocabularyConfig {
    fn default() -> Self {
        Self {
            max_terms: 1000,
            max_document_fraction_percent: 50,
            bigram_limit: 200,
            bigram_min_count: 2,
            bigrams: None,
        }
    }
}

pub const VOCABULARY_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocabulary {
    pub version: u32,
    /// column order
    pub tokens: Vec<String>,
    pub conditions: Vec<String>,
    pub anchor_tokens: BTreeMap<String, Vec<String>>,
    /// condition to its aggregated anchor column
    pub anchor_index: Vec<usize>,
    /// aggregated anchor columns appended because filtering dropped them
    pub readded_anchors: Vec<String>,
    pub bigrams: Vec<String>,
    pub document_frequency: BTreeMap<String, usize>,
    pub n_records: usize,
    pub max_terms: usize,
    #[serde(skip)]
    index: HashMap<String, usize>,
    #[serde(skip)]
    bigram_set: BigramSet,
    #[serde(skip)]
    anchor_lookup: HashMap<String, Vec<usize>>,
}

pub fn anchor_column_name(condition: &str) -> String {
    format!("{ANCHOR_PREFIX}{condition}")
}

impl Vocabulary {
    /// Two passes: bigram selection, then document frequencies, the
    /// frequency filter, the top `max_terms`, and anchor re-adding. Raw
    /// anchor tokens never become regular columns.
    pub fn build(
        corpus: &[RawVisit],
        anchors: &AnchorSpec,
        config: &VocabularyConfig,
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Data(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        anchors.validate()?;
        if config.max_document_fraction_percent > 100 {
            return Err(Error::Config(
                "document fraction must be at most 100 percent".into(),
            ));
        }
        let bigrams = match &config.bigrams {
            Some(list) => BigramSet::from_phrases(list)?,
            None => {
                let texts: Vec<&str> = corpus.iter().flat_map(|v| v.texts()).collect();
                top_bigrams(&texts, config.bigram_limit, config.bigram_min_count)
            }
        };
        let conditions: Vec<String> = anchors.0.keys().cloned().collect();
        let anchor_tokens = normalize_anchor_tokens(anchors);
        let raw_anchor: HashSet<&str> = anchor_tokens
            .values()
            .flatten()
            .map(String::as_str)
            .collect();
        let per_visit: Vec<BTreeSet<String>> = corpus
            .par_iter()
            .map(|v| {
                let toks = visit_tokens(v, &bigrams);
                let mut out: BTreeSet<String> = toks
                    .iter()
                    .filter(|t| !raw_anchor.contains(t.as_str()))
                    .cloned()
                    .collect();
                for (cond, list) in &anchor_tokens {
                    if list.iter().any(|t| toks.contains(t)) {
                        out.insert(anchor_column_name(cond));
                    }
                }
                out
            })
            .collect();
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for toks in &per_visit {
            for t in toks {
                *df.entry(t.clone()).or_default() += 1;
            }
        }
        let n_records = corpus.len();
        let limit = n_records * config.max_document_fraction_percent as usize;
        let mut ranked: Vec<(&String, usize)> = df
            .iter()
            .filter(|(_, &c)| c * 100 <= limit)
            .map(|(t, &c)| (t, c))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut tokens: Vec<String> = ranked
            .into_iter()
            .take(config.max_terms)
            .map(|(t, _)| t.clone())
            .collect();
        let kept: HashSet<String> = tokens.iter().cloned().collect();
        let mut readded = Vec::new();
        for cond in &conditions {
            let name = anchor_column_name(cond);
            if !kept.contains(&name) {
                tokens.push(name.clone());
                readded.push(name);
            }
        }
        let mut vocab = Self {
            version: VOCABULARY_VERSION,
            tokens,
            conditions,
            anchor_tokens,
            anchor_index: Vec::new(),
            readded_anchors: readded,
            bigrams: bigrams.phrases(),
            document_frequency: df,
            n_records,
            max_terms: config.max_terms,
            index: HashMap::new(),
            bigram_set: BigramSet::default(),
            anchor_lookup: HashMap::new(),
        };
        vocab.rebuild_lookups()?;
        Ok(vocab)
    }

    fn rebuild_lookups(&mut self) -> Result<()> {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(j, t)| (t.clone(), j))
            .collect();
        if self.index.len() != self.tokens.len() {
            return Err(Error::Data("vocabulary has duplicate tokens".into()));
        }
        self.bigram_set = BigramSet::from_phrases(&self.bigrams)?;
        self.anchor_index = self
            .conditions
            .iter()
            .map(|c| {
                self.index
                    .get(&anchor_column_name(c))
                    .copied()
                    .ok_or_else(|| {
                        Error::Data(format!("vocabulary lacks the anchor column of {c}"))
                    })
            })
            .collect::<Result<_>>()?;
        self.anchor_lookup.clear();
        for (i, cond) in self.conditions.iter().enumerate() {
            let list = self
                .anchor_tokens
                .get(cond)
                .ok_or_else(|| Error::Data(format!("no anchor tokens recorded for {cond}")))?;
            for t in list {
                self.anchor_lookup.entry(t.clone()).or_default().push(i);
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.tokens.len()
    }

    pub fn m(&self) -> usize {
        self.conditions.len()
    }

    pub fn column(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn bigram_set(&self) -> &BigramSet {
        &self.bigram_set
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            version: DatasetMeta::VERSION,
            m: self.m(),
            n: self.n(),
            anchor_index: self.anchor_index.clone(),
            condition_names: self.conditions.clone(),
            feature_names: self.tokens.clone(),
        }
    }

    /// Binary record of a visit; unknown tokens are ignored and billing
    /// codes only feed `labels`.
    pub fn vectorize(&self, visit: &RawVisit, labels: Option<&LabelSpec>) -> PatientRecord {
        let mut x = vec![false; self.n()];
        for t in visit_tokens(visit, &self.bigram_set) {
            if let Some(conds) = self.anchor_lookup.get(&t) {
                for &i in conds {
                    x[self.anchor_index[i]] = true;
                }
                continue;
            }
            if let Some(j) = self.column(&t) {
                if !t.starts_with(ANCHOR_PREFIX) {
                    x[j] = true;
                }
            }
        }
        let y = labels.map(|l| l.labels(&self.conditions, &visit.billing_codes));
        PatientRecord::new(visit.id.clone(), x, &self.anchor_index, y)
    }

    pub fn vectorize_all(&self, corpus: &[RawVisit], labels: Option<&LabelSpec>) -> Dataset {
        let records = corpus
            .par_iter()
            .map(|v| self.vectorize(v, labels))
            .collect();
        Dataset::new(self.meta(), records)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut vocab: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if vocab.version != VOCABULARY_VERSION {
            return Err(Error::Data(format!(
                "unsupported vocabulary version {}",
                vocab.version
            )));
        }
        vocab.rebuild_lookups()?;
        Ok(vocab)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn content_hash(&self) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec(self)?))
    }
}

/// Lowercased with whitespace runs joined by `_`, the form bigram merging
/// produces.
pub fn normalize_anchor_token(token: &str) -> String {
    token
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join("_")
}

fn normalize_anchor_tokens(spec: &AnchorSpec) -> BTreeMap<String, Vec<String>> {
    spec.0
        .iter()
        .map(|(c, toks)| {
            let mut list: Vec<String> = toks
                .iter()
                .map(|t| normalize_anchor_token(t))
                .filter(|t| !t.is_empty())
                .collect();
            list.sort();
            list.dedup();
            (c.clone(), list)
        })
        .collect()
}

/// Condition name to the billing codes that mark it present, used for
/// evaluation labels only.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSpec(pub BTreeMap<String, Vec<String>>);

impl LabelSpec {
    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }

    /// A code matches when it equals a listed code or starts with a listed
    /// code followed by `.`.
    pub fn labels(&self, conditions: &[String], codes: &[String]) -> Vec<bool> {
        conditions
            .iter()
            .map(|c| {
                self.0.get(c).is_some_and(|list| {
                    codes.iter().any(|code| {
                        let code = code.trim();
                        list.iter().any(|l| {
                            code == l
                                || code
                                    .strip_prefix(l.as_str())
                                    .is_some_and(|rest| rest.starts_with('.'))
                        })
                    })
                })
            })
            .collect()
    }
}

pub fn read_visits(path: &Path) -> Result<Vec<RawVisit>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), k + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_visits(path: &Path, visits: &[RawVisit]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in visits {
        serde_json::to_writer(&mut w, v)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(s: &str, bigrams: &[&str]) -> Vec<String> {
        tokenize_with_negation(s, &BigramSet::from_phrases(bigrams).unwrap())
    }

    #[test]
    fn spec_examples() {
        assert_eq!(
            tok("denies chest pain", &["chest pain"]),
            ["denies", "neg:chest_pain"]
        );
        assert_eq!(
            tok("no fever but cough", &[]),
            ["no", "neg:fever", "but", "cough"]
        );
        assert_eq!(tok("- loc headache", &[]), ["neg:loc", "headache"]);
    }

    #[test]
    fn raw_tokenization() {
        assert_eq!(
            raw_tokens("S/P fall.x-ray -loc\nok"),
            ["s/p", "fall", ".", "x-ray", "-", "loc", "\n", "ok"]
        );
    }

    #[test]
    fn age_bins() {
        assert_eq!(age_token(43.0).unwrap(), "age:40-49");
        assert_eq!(age_token(0.5).unwrap(), "age:0-9");
        assert!(age_token(-1.0).is_none());
    }
}
