//! Metadata index: typed key/value records with conjunctive queries.
//!
//! A query is a conjunction of `key op value` clauses. A record is returned
//! when it carries at least one of the queried keys itself and every clause
//! is satisfied by some record of the same image record (so DICOM and
//! analysis records of one study join on their shared image-record id).
//! Numeric comparators only match numeric entries; `contains` only matches
//! text entries.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use ordered_float::OrderedFloat;
use serde::{Deserialize, Serialize};

use crate::dicom::{MetaSource, MetaValue, MetadataRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "contains")]
    Contains,
}

impl Comparator {
    pub const ALL: [Comparator; 7] = [
        Comparator::Eq,
        Comparator::Ne,
        Comparator::Lt,
        Comparator::Le,
        Comparator::Gt,
        Comparator::Ge,
        Comparator::Contains,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            Comparator::Eq => "=",
            Comparator::Ne => "!=",
            Comparator::Lt => "<",
            Comparator::Le => "<=",
            Comparator::Gt => ">",
            Comparator::Ge => ">=",
            Comparator::Contains => "contains",
        }
    }

    pub fn is_ordering(self) -> bool {
        matches!(self, Comparator::Lt | Comparator::Le | Comparator::Gt | Comparator::Ge)
    }
}

impl fmt::Display for Comparator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl FromStr for Comparator {
    type Err = QueryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "=" | "==" => Comparator::Eq,
            "!=" | "≠" | "<>" => Comparator::Ne,
            "<" => Comparator::Lt,
            "<=" | "≤" => Comparator::Le,
            ">" => Comparator::Gt,
            ">=" | "≥" => Comparator::Ge,
            s if s.eq_ignore_ascii_case("contains") => Comparator::Contains,
            other => return Err(QueryError::BadComparator(other.to_string())),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clause {
    pub key: String,
    pub op: Comparator,
    pub value: String,
}

impl Clause {
    pub fn new(key: impl Into<String>, op: Comparator, value: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            op,
            value: value.into(),
        }
    }

    /// The operand as a finite number, if it is one.
    pub fn number(&self) -> Option<f64> {
        parse_number(&self.value)
    }

    /// Whether a single entry satisfies this clause.
    pub fn matches(&self, entry: &MetaValue) -> bool {
        let num = self.number();
        match (self.op, entry) {
            (Comparator::Eq, MetaValue::Text(t)) => *t == self.value,
            (Comparator::Eq, v) => num.is_some() && v.as_number() == num,
            (Comparator::Ne, _) => !Clause::new(&self.key, Comparator::Eq, &self.value).matches(entry),
            (Comparator::Contains, MetaValue::Text(t)) => t.contains(&self.value),
            (Comparator::Contains, _) => false,
            (op, v) => match (v.as_number(), num) {
                (Some(x), Some(y)) => match op {
                    Comparator::Lt => x < y,
                    Comparator::Le => x <= y,
                    Comparator::Gt => x > y,
                    Comparator::Ge => x >= y,
                    _ => unreachable!(),
                },
                _ => false,
            },
        }
    }
}

impl fmt::Display for Clause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let quoted = self.value.is_empty() || self.value.contains(char::is_whitespace) || self.value.contains('"');
        if quoted {
            write!(f, "{} {} \"{}\"", self.key, self.op, self.value.replace('"', "\\\""))
        } else {
            write!(f, "{} {} {}", self.key, self.op, self.value)
        }
    }
}

/// Finite decimal numbers only; `inf`/`nan` spellings stay text.
pub fn parse_number(s: &str) -> Option<f64> {
    let t = s.trim();
    if t.is_empty() || t.chars().any(|c| c.is_ascii_alphabetic() && c != 'e' && c != 'E') {
        return None;
    }
    t.parse::<f64>().ok().filter(|v| v.is_finite())
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Predicate {
    pub clauses: Vec<Clause>,
}

impl Predicate {
    pub fn new(clauses: Vec<Clause>) -> Self {
        Self { clauses }
    }

    pub fn validate(&self) -> Result<(), QueryError> {
        if self.clauses.is_empty() {
            return Err(QueryError::Empty);
        }
        for c in &self.clauses {
            if c.key.trim().is_empty() {
                return Err(QueryError::EmptyKey);
            }
            if c.op.is_ordering() && c.number().is_none() {
                return Err(QueryError::NonNumericOperand(c.to_string()));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.clauses.iter().enumerate() {
            if i > 0 {
                f.write_str(" AND ")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

impl FromStr for Predicate {
    type Err = QueryError;

    /// `key op value [AND key op value]...`; values may be double-quoted.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut p = Parser { rest: s.trim_start() };
        let mut clauses = Vec::new();
        loop {
            clauses.push(p.clause()?);
            p.skip_ws();
            if p.rest.is_empty() {
                break;
            }
            if !p.keyword("AND") {
                return Err(QueryError::Syntax(format!("expected AND before `{}`", p.rest)));
            }
        }
        let pred = Predicate { clauses };
        pred.validate()?;
        Ok(pred)
    }
}

struct Parser<'a> {
    rest: &'a str,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        self.rest = self.rest.trim_start();
    }

    fn keyword(&mut self, kw: &str) -> bool {
        let n = kw.len();
        if self.rest.len() < n || !self.rest.is_char_boundary(n) {
            return false;
        }
        let tail = &self.rest[n..];
        let boundary = tail.is_empty() || tail.starts_with(char::is_whitespace) || tail.starts_with('"');
        if self.rest[..n].eq_ignore_ascii_case(kw) && boundary {
            self.rest = &self.rest[n..];
            true
        } else {
            false
        }
    }

    fn clause(&mut self) -> Result<Clause, QueryError> {
        self.skip_ws();
        let end = self
            .rest
            .find(|c: char| c.is_whitespace() || "=!<>≠≤≥".contains(c))
            .unwrap_or(self.rest.len());
        let key = &self.rest[..end];
        if key.is_empty() {
            return Err(QueryError::EmptyKey);
        }
        self.rest = &self.rest[end..];
        self.skip_ws();
        let op = self.op()?;
        self.skip_ws();
        let value = self.value()?;
        Ok(Clause::new(key, op, value))
    }

    fn op(&mut self) -> Result<Comparator, QueryError> {
        for sym in ["<=", ">=", "!=", "<>", "==", "≠", "≤", "≥", "=", "<", ">"] {
            if let Some(r) = self.rest.strip_prefix(sym) {
                self.rest = r;
                return sym.parse();
            }
        }
        if self.keyword("contains") {
            return Ok(Comparator::Contains);
        }
        let word: String = self.rest.chars().take_while(|c| !c.is_whitespace()).collect();
        Err(QueryError::BadComparator(word))
    }

    fn value(&mut self) -> Result<String, QueryError> {
        if let Some(r) = self.rest.strip_prefix('"') {
            let mut out = String::new();
            let mut chars = r.char_indices();
            while let Some((i, c)) = chars.next() {
                match c {
                    '\\' => match chars.next() {
                        Some((_, e)) => out.push(e),
                        None => break,
                    },
                    '"' => {
                        self.rest = &r[i + 1..];
                        return Ok(out);
                    }
                    c => out.push(c),
                }
            }
            return Err(QueryError::Syntax("unterminated quoted value".into()));
        }
        let end = self.rest.find(char::is_whitespace).unwrap_or(self.rest.len());
        let v = &self.rest[..end];
        if v.is_empty() {
            return Err(QueryError::Syntax("missing value".into()));
        }
        self.rest = &self.rest[end..];
        Ok(v.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum QueryError {
    #[error("bad comparator `{0}`")]
    BadComparator(String),
    #[error("empty key")]
    EmptyKey,
    #[error("empty predicate")]
    Empty,
    #[error("ordering comparator needs a numeric value: {0}")]
    NonNumericOperand(String),
    #[error("syntax: {0}")]
    Syntax(String),
}

type Triple = (String, MetaSource, String);

/// In-memory index. Ids are assigned monotonically; re-inserting a record
/// with an existing (image record, source, provenance) triple replaces it
/// in place and keeps its id.
#[derive(Debug, Default, Clone)]
pub struct MetadataIndex {
    records: BTreeMap<u64, MetadataRecord>,
    by_triple: HashMap<Triple, u64>,
    by_image: HashMap<String, BTreeSet<u64>>,
    by_key: HashMap<String, BTreeSet<u64>>,
    text: HashMap<String, BTreeMap<String, BTreeSet<u64>>>,
    numeric: HashMap<String, BTreeMap<OrderedFloat<f64>, BTreeSet<u64>>>,
    next_id: u64,
}

impl MetadataIndex {
    pub fn new() -> Self {
        Self {
            next_id: 1,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&MetadataRecord> {
        self.records.get(&id)
    }

    pub fn records(&self) -> impl Iterator<Item = &MetadataRecord> {
        self.records.values()
    }

    pub fn by_image(&self, image_record_id: &str) -> Vec<&MetadataRecord> {
        self.by_image
            .get(image_record_id)
            .into_iter()
            .flatten()
            .map(|id| &self.records[id])
            .collect()
    }

    /// Inserts or replaces; returns the stored record (with its id).
    pub fn upsert(&mut self, mut record: MetadataRecord) -> &MetadataRecord {
        let triple = (record.image_record_id.clone(), record.source, record.provenance.clone());
        let id = match self.by_triple.get(&triple) {
            Some(&id) => {
                self.unindex(id);
                id
            }
            None => {
                let id = if record.id >= self.next_id.max(1) {
                    record.id
                } else {
                    self.next_id.max(1)
                };
                self.next_id = id + 1;
                id
            }
        };
        record.id = id;
        self.by_triple.insert(triple, id);
        self.by_image
            .entry(record.image_record_id.clone())
            .or_default()
            .insert(id);
        for (k, v) in &record.entries {
            self.by_key.entry(k.clone()).or_default().insert(id);
            match v {
                MetaValue::Text(t) => {
                    self.text
                        .entry(k.clone())
                        .or_default()
                        .entry(t.clone())
                        .or_default()
                        .insert(id);
                }
                other => {
                    if let Some(x) = other.as_number().filter(|x| x.is_finite()) {
                        self.numeric
                            .entry(k.clone())
                            .or_default()
                            .entry(OrderedFloat(x))
                            .or_default()
                            .insert(id);
                    }
                }
            }
        }
        self.records.insert(id, record);
        &self.records[&id]
    }

    /// Atomic batch insert; returns assigned ids in input order.
    pub fn insert_batch(&mut self, records: Vec<MetadataRecord>) -> Vec<u64> {
        records.into_iter().map(|r| self.upsert(r).id).collect()
    }

    fn unindex(&mut self, id: u64) {
        let Some(old) = self.records.remove(&id) else {
            return;
        };
        if let Some(s) = self.by_image.get_mut(&old.image_record_id) {
            s.remove(&id);
        }
        for (k, v) in &old.entries {
            if let Some(s) = self.by_key.get_mut(k) {
                s.remove(&id);
            }
            match v {
                MetaValue::Text(t) => {
                    if let Some(s) = self.text.get_mut(k).and_then(|m| m.get_mut(t)) {
                        s.remove(&id);
                    }
                }
                other => {
                    if let Some(x) = other.as_number().filter(|x| x.is_finite()) {
                        if let Some(s) = self.numeric.get_mut(k).and_then(|m| m.get_mut(&OrderedFloat(x))) {
                            s.remove(&id);
                        }
                    }
                }
            }
        }
    }

    /// Ids of records whose own entry satisfies `c`.
    fn clause_hits(&self, c: &Clause) -> BTreeSet<u64> {
        let num = c.number().map(OrderedFloat);
        let text = self.text.get(&c.key);
        let numeric = self.numeric.get(&c.key);
        let mut out = BTreeSet::new();
        match c.op {
            Comparator::Eq => {
                if let Some(s) = text.and_then(|m| m.get(&c.value)) {
                    out.extend(s);
                }
                if let (Some(n), Some(m)) = (num, numeric) {
                    if let Some(s) = m.get(&n) {
                        out.extend(s);
                    }
                }
            }
            Comparator::Ne => {
                let eq = self.clause_hits(&Clause::new(&c.key, Comparator::Eq, &c.value));
                if let Some(all) = self.by_key.get(&c.key) {
                    out.extend(all.difference(&eq));
                }
            }
            Comparator::Contains => {
                for (t, s) in text.into_iter().flatten() {
                    if t.contains(&c.value) {
                        out.extend(s);
                    }
                }
            }
            op => {
                use std::ops::Bound::*;
                let (Some(n), Some(m)) = (num, numeric) else {
                    return out;
                };
                let range = match op {
                    Comparator::Lt => (Unbounded, Excluded(n)),
                    Comparator::Le => (Unbounded, Included(n)),
                    Comparator::Gt => (Excluded(n), Unbounded),
                    Comparator::Ge => (Included(n), Unbounded),
                    _ => unreachable!(),
                };
                for (_, s) in m.range(range) {
                    out.extend(s);
                }
            }
        }
        out
    }

    /// Evaluates `pred` over records whose image record passes `visible`.
    /// Results are ordered by record id.
    pub fn query<F>(&self, pred: &Predicate, visible: F) -> Result<Vec<&MetadataRecord>, QueryError>
    where
        F: Fn(&str) -> bool,
    {
        pred.validate()?;
        let mut images: Option<BTreeSet<&str>> = None;
        for c in &pred.clauses {
            let hit: BTreeSet<&str> = self
                .clause_hits(c)
                .into_iter()
                .map(|id| self.records[&id].image_record_id.as_str())
                .collect();
            images = Some(match images {
                None => hit,
                Some(prev) => prev.intersection(&hit).copied().collect(),
            });
            if images.as_ref().is_some_and(|s| s.is_empty()) {
                return Ok(Vec::new());
            }
        }
        let images = images.unwrap_or_default();
        let mut ids = BTreeSet::new();
        for c in &pred.clauses {
            if let Some(s) = self.by_key.get(&c.key) {
                ids.extend(s.iter().copied());
            }
        }
        Ok(ids
            .into_iter()
            .map(|id| &self.records[&id])
            .filter(|r| images.contains(r.image_record_id.as_str()))
            .filter(|r| visible(&r.image_record_id))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(image: &str, source: MetaSource, prov: &str, entries: &[(&str, MetaValue)]) -> MetadataRecord {
        let mut r = MetadataRecord::new(image, source, prov);
        for (k, v) in entries {
            r.entries.insert(k.to_string(), v.clone());
        }
        r
    }

    fn text(s: &str) -> MetaValue {
        MetaValue::Text(s.into())
    }

    fn sample() -> MetadataIndex {
        let mut idx = MetadataIndex::new();
        idx.upsert(rec("s1", MetaSource::Dicom, "a", &[("PatientSex", text("M"))]));
        idx.upsert(rec("s2", MetaSource::Dicom, "b", &[("PatientSex", text("F"))]));
        idx.upsert(rec("s3", MetaSource::Dicom, "c", &[("PatientSex", text("F"))]));
        idx.upsert(rec(
            "s2",
            MetaSource::Analysis,
            "7",
            &[("LeftHippocampus", MetaValue::Real(4100.5))],
        ));
        idx.upsert(rec(
            "s3",
            MetaSource::Analysis,
            "8",
            &[("LeftHippocampus", MetaValue::Real(3900.0))],
        ));
        idx
    }

    fn q(idx: &MetadataIndex, s: &str) -> Vec<u64> {
        idx.query(&s.parse().unwrap(), |_| true)
            .unwrap()
            .iter()
            .map(|r| r.id)
            .collect()
    }

    #[test]
    fn equality_on_text() {
        assert_eq!(q(&sample(), "PatientSex = F"), vec![2, 3]);
        assert_eq!(q(&sample(), "PatientSex != F"), vec![1]);
    }

    #[test]
    fn cross_source_join() {
        assert_eq!(q(&sample(), "PatientSex = F AND LeftHippocampus > 4000"), vec![2, 4]);
    }

    #[test]
    fn empty_index() {
        assert!(q(&MetadataIndex::new(), "a = b").is_empty());
    }

    #[test]
    fn text_never_matches_numeric_comparators() {
        let mut idx = MetadataIndex::new();
        idx.upsert(rec("s", MetaSource::Dicom, "x", &[("k", text("5"))]));
        assert!(q(&idx, "k > 1").is_empty());
        assert_eq!(q(&idx, "k = 5"), vec![1]);
    }

    #[test]
    fn numeric_equality_crosses_int_and_real() {
        let mut idx = MetadataIndex::new();
        idx.upsert(rec(
            "s",
            MetaSource::Analysis,
            "x",
            &[("file_count", MetaValue::Real(6.0))],
        ));
        idx.upsert(rec(
            "t",
            MetaSource::Dicom,
            "y",
            &[("file_count", MetaValue::Integer(6))],
        ));
        assert_eq!(q(&idx, "file_count = 6"), vec![1, 2]);
        assert_eq!(q(&idx, "file_count >= 6.0"), vec![1, 2]);
    }

    #[test]
    fn upsert_keeps_id() {
        let mut idx = sample();
        let id = idx
            .upsert(rec("s1", MetaSource::Dicom, "a", &[("PatientSex", text("F"))]))
            .id;
        assert_eq!(id, 1);
        assert_eq!(idx.len(), 5);
        assert_eq!(q(&idx, "PatientSex = F"), vec![1, 2, 3]);
        assert_eq!(idx.upsert(rec("new", MetaSource::Dicom, "z", &[])).id, 6);
    }

    #[test]
    fn parses_syntax() {
        let p: Predicate = r#"A >= 1.5 and B contains "x y" AND C≠2"#.parse().unwrap();
        assert_eq!(
            p.clauses,
            vec![
                Clause::new("A", Comparator::Ge, "1.5"),
                Clause::new("B", Comparator::Contains, "x y"),
                Clause::new("C", Comparator::Ne, "2"),
            ]
        );
        assert_eq!(p.to_string().parse::<Predicate>().unwrap(), p);
        assert!(matches!(
            "A ~ 1".parse::<Predicate>(),
            Err(QueryError::BadComparator(_))
        ));
        assert!(matches!(
            "A < x".parse::<Predicate>(),
            Err(QueryError::NonNumericOperand(_))
        ));
        assert!("".parse::<Predicate>().is_err());
        let p: Predicate = "(0010,0040) = F".parse().unwrap();
        assert_eq!(p.clauses[0].key, "(0010,0040)");
    }

    #[test]
    fn number_parsing() {
        assert_eq!(parse_number("4100.5"), Some(4100.5));
        assert_eq!(parse_number("-1e3"), Some(-1000.0));
        assert_eq!(parse_number("nan"), None);
        assert_eq!(parse_number("inf"), None);
        assert_eq!(parse_number("F"), None);
    }
}
