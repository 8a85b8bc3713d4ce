use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::corpus::{CorpusSeries, CorpusStudy};
use super::PacsError;

pub const QUERYABLE_KEYWORDS: [&str; 7] = [
    "PatientID",
    "PatientSex",
    "StudyDate",
    "Modality",
    "StudyDescription",
    "StudyInstanceUID",
    "SeriesInstanceUID",
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum QueryLevel {
    #[default]
    Study,
    Series,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySpec {
    #[serde(default)]
    pub level: QueryLevel,
    #[serde(default)]
    pub filters: BTreeMap<String, String>,
}

impl QuerySpec {
    pub fn study() -> Self {
        Self::default()
    }

    pub fn with(mut self, keyword: &str, pattern: &str) -> Self {
        self.filters.insert(keyword.to_string(), pattern.to_string());
        self
    }

    pub fn validate(&self) -> Result<(), PacsError> {
        for k in self.filters.keys() {
            if !QUERYABLE_KEYWORDS.contains(&k.as_str()) {
                return Err(PacsError::BadFilterKeyword(k.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeriesSummary {
    pub series_uid: String,
    pub modality: String,
    pub instance_count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub study_uid: String,
    pub patient_sex: String,
    pub patient_age: String,
    pub study_date: String,
    pub study_description: String,
    pub series: Vec<SeriesSummary>,
}

/// A single filter pattern: exact text, `*`/`?` wildcard, or (for dates) an
/// inclusive `YYYYMMDD-YYYYMMDD` range with either end optionally open.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Pattern {
    Exact(String),
    Wildcard(String),
    DateRange { from: Option<String>, to: Option<String> },
}

impl Pattern {
    pub fn parse(keyword: &str, text: &str) -> Pattern {
        if keyword == "StudyDate" {
            if let Some((a, b)) = text.split_once('-') {
                let ok = |s: &str| s.is_empty() || (s.len() == 8 && s.bytes().all(|c| c.is_ascii_digit()));
                if ok(a) && ok(b) && !(a.is_empty() && b.is_empty()) {
                    let opt = |s: &str| (!s.is_empty()).then(|| s.to_string());
                    return Pattern::DateRange {
                        from: opt(a),
                        to: opt(b),
                    };
                }
            }
        }
        if text.contains(['*', '?']) {
            Pattern::Wildcard(text.to_string())
        } else {
            Pattern::Exact(text.to_string())
        }
    }

    pub fn matches(&self, value: &str) -> bool {
        match self {
            Pattern::Exact(p) => p == value,
            Pattern::Wildcard(p) => glob_match(p.as_bytes(), value.as_bytes()),
            Pattern::DateRange { from, to } => {
                value.len() == 8
                    && from.as_deref().is_none_or(|f| value >= f)
                    && to.as_deref().is_none_or(|t| value <= t)
            }
        }
    }
}

fn glob_match(pattern: &[u8], text: &[u8]) -> bool {
    // Iterative matcher with single-star backtracking.
    let (mut p, mut t) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while t < text.len() {
        if p < pattern.len() && pattern[p] == b'*' {
            star = Some((p, t));
            p += 1;
        } else if p < pattern.len() && (pattern[p] == b'?' || pattern[p] == text[t]) {
            p += 1;
            t += 1;
        } else if let Some((sp, st)) = star {
            p = sp + 1;
            t = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    pattern[p..].iter().all(|&c| c == b'*')
}

fn study_value<'a>(study: &'a CorpusStudy, keyword: &str) -> Option<&'a str> {
    Some(match keyword {
        "PatientID" => &study.patient_id,
        "PatientSex" => &study.patient_sex,
        "StudyDate" => &study.study_date,
        "StudyDescription" => &study.study_description,
        "StudyInstanceUID" => &study.study_uid,
        _ => return None,
    })
}

fn series_value<'a>(series: &'a CorpusSeries, keyword: &str) -> Option<&'a str> {
    Some(match keyword {
        "Modality" => &series.modality,
        "SeriesInstanceUID" => &series.series_uid,
        _ => return None,
    })
}

/// Conjunctive match of `spec` over `studies`, ordered by study UID.
pub fn run_query(spec: &QuerySpec, studies: &[CorpusStudy]) -> Result<Vec<StudyRecord>, PacsError> {
    spec.validate()?;
    let patterns: Vec<(&str, Pattern)> = spec
        .filters
        .iter()
        .map(|(k, v)| (k.as_str(), Pattern::parse(k, v)))
        .collect();

    let mut out = Vec::new();
    for study in studies {
        let study_ok = patterns.iter().all(|(k, p)| match study_value(study, k) {
            Some(v) => p.matches(v),
            None => true,
        });
        if !study_ok {
            continue;
        }
        let matching: Vec<&CorpusSeries> = study
            .series
            .iter()
            .filter(|s| {
                patterns.iter().all(|(k, p)| match series_value(s, k) {
                    Some(v) => p.matches(v),
                    None => true,
                })
            })
            .collect();
        if matching.is_empty() {
            continue;
        }
        let listed: Vec<&CorpusSeries> = match spec.level {
            QueryLevel::Study => study.series.iter().collect(),
            QueryLevel::Series => matching,
        };
        out.push(StudyRecord {
            study_uid: study.study_uid.clone(),
            patient_sex: study.patient_sex.clone(),
            patient_age: study.patient_age.clone(),
            study_date: study.study_date.clone(),
            study_description: study.study_description.clone(),
            series: listed
                .into_iter()
                .map(|s| SeriesSummary {
                    series_uid: s.series_uid.clone(),
                    modality: s.modality.clone(),
                    instance_count: s.instances.len(),
                })
                .collect(),
        });
    }
    out.sort_by(|a, b| a.study_uid.cmp(&b.study_uid));
    Ok(out)
}
