use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{dictionary, DicomDataset, DicomElement, DicomTag, ElementValue, Vr};
use crate::hash;

/// Root for pseudonymous UIDs. Registered UID roots start with 0, 1 or 2, so
/// a `9.9.` value can only have been produced here.
pub const PSEUDONYM_UID_ROOT: &str = "9.9.";
const MAX_UID_LEN: usize = 64;
const DIGEST_PLACEHOLDER: &str = "{digest8}";

pub const DEFAULT_POLICY_TEXT: &str = include_str!("../../policies/default.policy");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", content = "text", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    Remove,
    Replace(String),
    HashUid,
    Keep,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Remove => f.write_str("REMOVE"),
            Action::Replace(t) => write!(f, "REPLACE {t}"),
            Action::HashUid => f.write_str("HASH_UID"),
            Action::Keep => f.write_str("KEEP"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AnonError {
    #[error("policy line {line}: {reason}")]
    PolicyParse { line: usize, reason: String },
    #[error("policy violation for {tag}: {reason}")]
    PolicyViolation { tag: DicomTag, reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnonymizationPolicy {
    rules: BTreeMap<DicomTag, Action>,
    salt: Vec<u8>,
}

impl AnonymizationPolicy {
    /// Builds a policy, checking that HASH_UID only targets UI attributes.
    pub fn new(
        rules: impl IntoIterator<Item = (DicomTag, Action)>,
        salt: impl Into<Vec<u8>>,
    ) -> Result<Self, AnonError> {
        let mut map = BTreeMap::new();
        for (tag, action) in rules {
            if action == Action::HashUid {
                if let Some(entry) = dictionary::lookup(tag) {
                    if entry.vr != Vr::UI {
                        return Err(AnonError::PolicyViolation {
                            tag,
                            reason: format!("HASH_UID on {} attribute", entry.vr),
                        });
                    }
                }
            }
            if map.insert(tag, action).is_some() {
                return Err(AnonError::PolicyViolation {
                    tag,
                    reason: "tag listed more than once".into(),
                });
            }
        }
        Ok(Self {
            rules: map,
            salt: salt.into(),
        })
    }

    pub fn default_policy() -> Self {
        DEFAULT_POLICY_TEXT.parse().expect("bundled default policy parses")
    }

    pub fn with_salt(mut self, salt: impl Into<Vec<u8>>) -> Self {
        self.salt = salt.into();
        self
    }

    pub fn action(&self, tag: DicomTag) -> &Action {
        self.rules.get(&tag).unwrap_or(&Action::Keep)
    }

    pub fn rules(&self) -> impl Iterator<Item = (&DicomTag, &Action)> {
        self.rules.iter()
    }

    pub fn tags_with(&self, action: &Action) -> Vec<DicomTag> {
        self.rules
            .iter()
            .filter(|(_, a)| std::mem::discriminant(*a) == std::mem::discriminant(action))
            .map(|(t, _)| *t)
            .collect()
    }

    /// Identifier derived from the rule table only (the salt is excluded).
    pub fn id(&self) -> String {
        let text: String = self.rules.iter().map(|(t, a)| format!("{t} = {a}\n")).collect();
        format!("policy-{}", &hash::sha256_hex(text.as_bytes())[..12])
    }

    pub fn salt_digest(&self) -> String {
        let mut v = b"chips-salt:".to_vec();
        v.extend_from_slice(&self.salt);
        hash::sha256_hex(&v)
    }

    /// Deterministic pseudonym for a UID under this policy's salt.
    pub fn pseudonym_uid(&self, original: &str) -> String {
        let digest = hash::salted(&self.salt, original.as_bytes());
        let n = u128::from_be_bytes(digest[..16].try_into().expect("16 bytes"));
        let mut uid = format!("{PSEUDONYM_UID_ROOT}{n}");
        uid.truncate(MAX_UID_LEN);
        uid
    }

    fn value_digest(&self, value: &[u8]) -> String {
        hex::encode(hash::salted(&self.salt, value))
    }

    fn expand_replacement(&self, template: &str, original: &str) -> String {
        if template.contains(DIGEST_PLACEHOLDER) {
            let d = self.value_digest(original.as_bytes());
            template.replace(DIGEST_PLACEHOLDER, &d[..8])
        } else {
            template.to_string()
        }
    }
}

impl FromStr for AnonymizationPolicy {
    type Err = AnonError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut rules = Vec::new();
        let mut salt = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| AnonError::PolicyParse { line: line_no, reason };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected `key = value`".into()))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "salt" {
                salt = value.as_bytes().to_vec();
                continue;
            }
            let tag: DicomTag = key.parse().map_err(|e| err(format!("{e}")))?;
            let (verb, arg) = match value.split_once(char::is_whitespace) {
                Some((v, a)) => (v, Some(a.trim())),
                None => (value, None),
            };
            let action = match (verb, arg) {
                ("REMOVE", None) => Action::Remove,
                ("KEEP", None) => Action::Keep,
                ("HASH_UID", None) => Action::HashUid,
                ("REPLACE", Some(a)) if !a.is_empty() => Action::Replace(a.to_string()),
                ("REPLACE", _) => return Err(err("REPLACE needs replacement text".into())),
                (v, _) => return Err(err(format!("unknown action `{v}`"))),
            };
            if rules.iter().any(|(t, _)| *t == tag) {
                return Err(err(format!("{tag} listed more than once")));
            }
            rules.push((tag, action));
        }
        AnonymizationPolicy::new(rules, salt)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnonymizationMapping {
    pub tag: DicomTag,
    pub action: String,
    /// Salted digest of the original value, hex. Never the value itself.
    pub original_digest: String,
    pub replacement: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnonymizationRecord {
    pub policy_id: String,
    pub salt_digest: String,
    pub mappings: Vec<AnonymizationMapping>,
}

/// Applies `policy` to every element, including those nested in sequences.
/// The output is a fixed point: anonymizing it again changes nothing.
pub fn anonymize_dataset(
    ds: &DicomDataset,
    policy: &AnonymizationPolicy,
) -> Result<(DicomDataset, AnonymizationRecord), AnonError> {
    let mut record = AnonymizationRecord {
        policy_id: policy.id(),
        salt_digest: policy.salt_digest(),
        mappings: Vec::new(),
    };
    let out = anonymize_level(ds, policy, &mut record.mappings)?;
    Ok((out, record))
}

fn anonymize_level(
    ds: &DicomDataset,
    policy: &AnonymizationPolicy,
    mappings: &mut Vec<AnonymizationMapping>,
) -> Result<DicomDataset, AnonError> {
    let mut out = DicomDataset::new();
    for element in ds.iter() {
        let tag = element.tag;
        let violation = |reason: &str| AnonError::PolicyViolation {
            tag,
            reason: reason.to_string(),
        };
        match policy.action(tag) {
            Action::Remove => {
                mappings.push(AnonymizationMapping {
                    tag,
                    action: "REMOVE".into(),
                    original_digest: digest_element(policy, element),
                    replacement: None,
                });
            }
            Action::Keep => match &element.value {
                ElementValue::Sequence(items) => {
                    let items = items
                        .iter()
                        .map(|i| anonymize_level(i, policy, mappings))
                        .collect::<Result<Vec<_>, _>>()?;
                    out.insert(DicomElement::sequence(tag, items));
                }
                ElementValue::Bytes(_) => {
                    out.insert(element.clone());
                }
            },
            Action::Replace(template) => {
                if !element.vr.is_textual() {
                    return Err(violation("REPLACE on a non-text VR"));
                }
                let current = element.as_text().unwrap_or_default();
                if is_replacement_output(template, &current) {
                    out.insert(element.clone());
                    continue;
                }
                let replacement = policy.expand_replacement(template, &current);
                mappings.push(AnonymizationMapping {
                    tag,
                    action: "REPLACE".into(),
                    original_digest: digest_element(policy, element),
                    replacement: Some(replacement.clone()),
                });
                out.insert(DicomElement::text(tag, element.vr, &replacement));
            }
            Action::HashUid => {
                if element.vr != Vr::UI {
                    return Err(violation("HASH_UID on a non-UI VR"));
                }
                let current = element.as_text().unwrap_or_default();
                if current.starts_with(PSEUDONYM_UID_ROOT) {
                    out.insert(element.clone());
                    continue;
                }
                let pseudonym = policy.pseudonym_uid(&current);
                mappings.push(AnonymizationMapping {
                    tag,
                    action: "HASH_UID".into(),
                    original_digest: digest_element(policy, element),
                    replacement: Some(pseudonym.clone()),
                });
                out.insert(DicomElement::text(tag, Vr::UI, &pseudonym));
            }
        }
    }
    Ok(out)
}

fn digest_element(policy: &AnonymizationPolicy, element: &DicomElement) -> String {
    match element.bytes() {
        Some(b) => policy.value_digest(b),
        None => {
            // Sequences: digest their canonical encoding.
            let mut ds = DicomDataset::new();
            ds.insert(element.clone());
            let bytes = super::serialize_dataset(&ds).unwrap_or_default();
            policy.value_digest(&bytes)
        }
    }
}

/// True if `value` is what `template` would expand to for some original.
fn is_replacement_output(template: &str, value: &str) -> bool {
    match template.split_once(DIGEST_PLACEHOLDER) {
        None => template == value,
        Some((prefix, suffix)) => {
            value.len() == prefix.len() + 8 + suffix.len()
                && value.starts_with(prefix)
                && value.ends_with(suffix)
                && value[prefix.len()..prefix.len() + 8]
                    .bytes()
                    .all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dicom::tags;

    fn sample() -> DicomDataset {
        let mut ds = DicomDataset::new();
        ds.put_text(tags::PATIENT_NAME, Vr::PN, "DOE^JANE");
        ds.put_text(tags::PATIENT_ID, Vr::LO, "MRN12345");
        ds.put_text(tags::PATIENT_BIRTH_DATE, Vr::DA, "19800101");
        ds.put_text(tags::PATIENT_SEX, Vr::CS, "F");
        ds.put_text(tags::PATIENT_AGE, Vr::AS, "010M");
        ds.put_text(tags::STUDY_INSTANCE_UID, Vr::UI, "1.2.840.1234.1");
        ds
    }

    #[test]
    fn replace_with_fixed_text() {
        let policy = AnonymizationPolicy::new([(tags::PATIENT_NAME, Action::Replace("ANON".into()))], "s").unwrap();
        let (out, rec) = anonymize_dataset(&sample(), &policy).unwrap();
        assert_eq!(out.text(tags::PATIENT_NAME).as_deref(), Some("ANON"));
        assert_eq!(rec.mappings.len(), 1);
        assert_eq!(rec.mappings[0].replacement.as_deref(), Some("ANON"));
    }

    #[test]
    fn default_policy_keeps_sex_and_age_byte_identical() {
        let ds = sample();
        let (out, _) = anonymize_dataset(&ds, &AnonymizationPolicy::default_policy()).unwrap();
        assert_eq!(out.get(tags::PATIENT_SEX), ds.get(tags::PATIENT_SEX));
        assert_eq!(out.get(tags::PATIENT_AGE), ds.get(tags::PATIENT_AGE));
        assert_eq!(out.text(tags::PATIENT_SEX).as_deref(), Some("F"));
        assert_eq!(out.text(tags::PATIENT_AGE).as_deref(), Some("010M"));
    }

    #[test]
    fn default_policy_removes_and_rewrites() {
        let (out, rec) = anonymize_dataset(&sample(), &AnonymizationPolicy::default_policy()).unwrap();
        assert!(!out.contains(tags::PATIENT_NAME));
        assert!(!out.contains(tags::PATIENT_BIRTH_DATE));
        let pid = out.text(tags::PATIENT_ID).unwrap();
        assert!(pid.starts_with("ANON-") && pid.len() == 13, "{pid}");
        let uid = out.text(tags::STUDY_INSTANCE_UID).unwrap();
        assert!(uid.starts_with("9.9."));
        assert!(uid.len() <= 64);
        assert!(uid.bytes().all(|b| b.is_ascii_digit() || b == b'.'));
        // name, birth date, id, study uid
        assert_eq!(rec.mappings.len(), 4);
    }

    #[test]
    fn record_never_holds_clear_values() {
        let (_, rec) = anonymize_dataset(&sample(), &AnonymizationPolicy::default_policy()).unwrap();
        let json = serde_json::to_string(&rec).unwrap();
        for phi in [
            "DOE^JANE",
            "MRN12345",
            "19800101",
            "1.2.840.1234.1",
            "chips-development-salt",
        ] {
            assert!(!json.contains(phi), "{phi} leaked into record");
        }
    }

    #[test]
    fn uid_pseudonyms_are_deterministic_per_salt() {
        let p = AnonymizationPolicy::default_policy();
        let (a, _) = anonymize_dataset(&sample(), &p).unwrap();
        let (b, _) = anonymize_dataset(&sample(), &p).unwrap();
        assert_eq!(a.text(tags::STUDY_INSTANCE_UID), b.text(tags::STUDY_INSTANCE_UID));
        let q = p.clone().with_salt("other");
        let (c, _) = anonymize_dataset(&sample(), &q).unwrap();
        assert_ne!(a.text(tags::STUDY_INSTANCE_UID), c.text(tags::STUDY_INSTANCE_UID));
    }

    #[test]
    fn anonymization_is_a_fixed_point() {
        let p = AnonymizationPolicy::default_policy();
        let (once, _) = anonymize_dataset(&sample(), &p).unwrap();
        let (twice, rec) = anonymize_dataset(&once, &p).unwrap();
        assert_eq!(once, twice);
        assert!(rec.mappings.is_empty());
    }

    #[test]
    fn nested_sequences_are_anonymized() {
        let mut item = DicomDataset::new();
        item.put_text(tags::PATIENT_NAME, Vr::PN, "NESTED^NAME");
        item.put_text(tags::REFERENCED_SOP_INSTANCE_UID, Vr::UI, "1.2.3");
        let mut ds = sample();
        ds.insert(DicomElement::sequence(tags::REFERENCED_IMAGE_SEQUENCE, vec![item]));
        let (out, _) = anonymize_dataset(&ds, &AnonymizationPolicy::default_policy()).unwrap();
        let items = out.get(tags::REFERENCED_IMAGE_SEQUENCE).unwrap().items().unwrap();
        assert!(!items[0].contains(tags::PATIENT_NAME));
        assert!(items[0].contains(tags::REFERENCED_SOP_INSTANCE_UID));
    }

    #[test]
    fn hash_uid_on_non_ui_is_violation() {
        assert!(matches!(
            AnonymizationPolicy::new([(tags::PATIENT_NAME, Action::HashUid)], "s"),
            Err(AnonError::PolicyViolation { .. })
        ));
        // private tag: unknown VR at load time, caught at apply time
        let private = DicomTag::new(0x0009, 0x0010);
        let policy = AnonymizationPolicy::new([(private, Action::HashUid)], "s").unwrap();
        let mut ds = DicomDataset::new();
        ds.put_text(private, Vr::LO, "x");
        assert!(matches!(
            anonymize_dataset(&ds, &policy),
            Err(AnonError::PolicyViolation { .. })
        ));
    }

    #[test]
    fn policy_text_parsing() {
        let p: AnonymizationPolicy = "salt = abc\n(0010,0010) = REMOVE\nPatientID = REPLACE X-{digest8}\n"
            .parse()
            .unwrap();
        assert_eq!(p.action(tags::PATIENT_NAME), &Action::Remove);
        assert_eq!(p.action(tags::PATIENT_ID), &Action::Replace("X-{digest8}".into()));
        assert_eq!(p.action(tags::PATIENT_SEX), &Action::Keep);

        let dup = "(0010,0010) = REMOVE\n(0010,0010) = KEEP\n".parse::<AnonymizationPolicy>();
        assert!(matches!(dup, Err(AnonError::PolicyParse { line: 2, .. })));
        let bad = "(0010,0010) = SHRED\n".parse::<AnonymizationPolicy>();
        assert!(matches!(bad, Err(AnonError::PolicyParse { line: 1, .. })));
    }

    #[test]
    fn default_policy_matches_documented_lists() {
        let p = AnonymizationPolicy::default_policy();
        let removed = p.tags_with(&Action::Remove);
        assert_eq!(removed.len(), 7);
        assert_eq!(p.tags_with(&Action::HashUid).len(), 3);
        assert!(matches!(p.action(tags::PATIENT_ID), Action::Replace(_)));
    }
}
