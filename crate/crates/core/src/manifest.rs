//! Segment manifest: labeled C / CV segments with alignment boundaries.
//!
//! The manifest is a UTF-8 text file. `#` lines are comments, `@` lines
//! declare label inventories, and every other non-empty line is one record
//! of `key=value` fields in a fixed order:
//!
//! ```text
//! audio_ref=tok_000001.wav sample_rate=16000 start=0.05 end=0.13 \
//!   speaker_id=spk01 consonant=k vowel=a kind=CV group=TRAIN_TD expected_consonant=k
//! ```
//!
//! `vowel=-` marks an absent vowel (C records). Record ids are not stored;
//! they are derived from file position (`r000000`, `r000001`, ...), and
//! speed-perturbed copies append `#sp<factor>` to both id and audio_ref.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Separator between the audio path and a speed-perturbation suffix in an
/// `audio_ref`, e.g. `tok_000001.wav#sp0.9`.
pub const SPEED_SUFFIX: &str = "#sp";

/// Joins consonant and vowel into a CV category label, e.g. `k+a`.
pub const CV_JOIN: char = '+';

const FIELD_NAMES: [&str; 10] = [
    "audio_ref",
    "sample_rate",
    "start",
    "end",
    "speaker_id",
    "consonant",
    "vowel",
    "kind",
    "group",
    "expected_consonant",
];

/// Mono-phone consonant segment or di-phone consonant-vowel segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
pub enum SegmentKind {
    C,
    Cv,
}

impl fmt::Display for SegmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SegmentKind::C => write!(f, "C"),
            SegmentKind::Cv => write!(f, "CV"),
        }
    }
}

impl FromStr for SegmentKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "C" => Ok(SegmentKind::C),
            "CV" => Ok(SegmentKind::Cv),
            other => Err(format!("unknown segment kind `{other}` (expected C or CV)")),
        }
    }
}

/// Population split of a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
pub enum Group {
    TrainTd,
    TestTd,
    TestAtypical,
}

impl Group {
    pub fn is_test(self) -> bool {
        matches!(self, Group::TestTd | Group::TestAtypical)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Group::TrainTd => write!(f, "TRAIN_TD"),
            Group::TestTd => write!(f, "TEST_TD"),
            Group::TestAtypical => write!(f, "TEST_ATYPICAL"),
        }
    }
}

impl FromStr for Group {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "TRAIN_TD" => Ok(Group::TrainTd),
            "TEST_TD" => Ok(Group::TestTd),
            "TEST_ATYPICAL" => Ok(Group::TestAtypical),
            other => Err(format!(
                "unknown group `{other}` (expected TRAIN_TD, TEST_TD or TEST_ATYPICAL)"
            )),
        }
    }
}

/// One labeled speech segment with alignment boundaries in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRecord {
    /// Derived, not stored in the file.
    pub id: String,
    pub audio_ref: String,
    pub sample_rate: u32,
    pub start: f64,
    pub end: f64,
    pub speaker_id: String,
    pub consonant: String,
    pub vowel: Option<String>,
    pub kind: SegmentKind,
    pub group: Group,
    /// The consonant the speaker was prompted to produce. Equals `consonant`
    /// for TD records; differs for atypical substitutions.
    pub expected_consonant: String,
}

impl SegmentRecord {
    /// Category label used for classification and pairing: the consonant for
    /// C segments, `consonant+vowel` for CV segments.
    pub fn category(&self) -> String {
        match (&self.kind, &self.vowel) {
            (SegmentKind::Cv, Some(v)) => cv_label(&self.consonant, v),
            _ => self.consonant.clone(),
        }
    }

    fn validate(&self) -> Result<()> {
        let fail = |message: String| {
            Err(Error::InvalidRecord {
                id: self.id.clone(),
                message,
            })
        };
        if self.sample_rate == 0 {
            return fail("sample_rate must be positive".into());
        }
        if !self.start.is_finite() || !self.end.is_finite() || self.start < 0.0 {
            return fail(format!(
                "boundaries must be finite and non-negative (start={}, end={})",
                self.start, self.end
            ));
        }
        if self.end <= self.start {
            return fail(format!("end={} must exceed start={}", self.end, self.start));
        }
        match (self.kind, &self.vowel) {
            (SegmentKind::Cv, None) => return fail("CV record is missing a vowel".into()),
            (SegmentKind::C, Some(_)) => return fail("C record must not carry a vowel".into()),
            _ => {}
        }
        if self.expected_consonant.is_empty() {
            return fail("expected_consonant is missing".into());
        }
        if self.group != Group::TestAtypical && self.expected_consonant != self.consonant {
            return fail(format!(
                "expected_consonant `{}` must equal consonant `{}` for {} records",
                self.expected_consonant, self.consonant, self.group
            ));
        }
        for (name, value) in [
            ("consonant", Some(&self.consonant)),
            ("vowel", self.vowel.as_ref()),
            ("expected_consonant", Some(&self.expected_consonant)),
        ] {
            if let Some(v) = value {
                validate_label(v).map_err(|m| Error::InvalidRecord {
                    id: self.id.clone(),
                    message: format!("{name}: {m}"),
                })?;
            }
        }
        if self.speaker_id.is_empty() || self.speaker_id.contains(char::is_whitespace) {
            return fail("speaker_id must be non-empty without whitespace".into());
        }
        Ok(())
    }

    fn to_line(&self) -> String {
        format!(
            "audio_ref={} sample_rate={} start={} end={} speaker_id={} consonant={} vowel={} kind={} group={} expected_consonant={}",
            self.audio_ref,
            self.sample_rate,
            self.start,
            self.end,
            self.speaker_id,
            self.consonant,
            self.vowel.as_deref().unwrap_or("-"),
            self.kind,
            self.group,
            self.expected_consonant,
        )
    }
}

/// Build the CV category label for a consonant/vowel pair.
pub fn cv_label(consonant: &str, vowel: &str) -> String {
    format!("{consonant}{CV_JOIN}{vowel}")
}

fn validate_label(label: &str) -> std::result::Result<(), String> {
    if label.is_empty() {
        return Err("label is empty".into());
    }
    if label == "-" {
        return Err("label `-` is reserved for absent fields".into());
    }
    for bad in ['=', '#', '@', CV_JOIN] {
        if label.contains(bad) {
            return Err(format!("label `{label}` contains reserved character `{bad}`"));
        }
    }
    if label.contains(char::is_whitespace) {
        return Err(format!("label `{label}` contains whitespace"));
    }
    Ok(())
}

/// All segment records plus the label inventories derived from them.
///
/// Inventory order is lexicographic and fixes class-index meaning for the
/// embedding extractors.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub records: Vec<SegmentRecord>,
    pub consonant_inventory: Vec<String>,
    pub cv_inventory: Vec<String>,
}

impl CorpusManifest {
    /// Build a manifest from records, deriving inventories and validating
    /// every record invariant.
    pub fn from_records(records: Vec<SegmentRecord>) -> Result<Self> {
        for r in &records {
            r.validate()?;
        }
        let mut consonants = BTreeSet::new();
        let mut cvs = BTreeSet::new();
        for r in &records {
            consonants.insert(r.consonant.clone());
            consonants.insert(r.expected_consonant.clone());
            if let (SegmentKind::Cv, Some(v)) = (r.kind, &r.vowel) {
                cvs.insert(cv_label(&r.consonant, v));
            }
        }
        Ok(CorpusManifest {
            records,
            consonant_inventory: consonants.into_iter().collect(),
            cv_inventory: cvs.into_iter().collect(),
        })
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut records = Vec::new();
        let mut declared_consonants: Option<Vec<String>> = None;
        let mut declared_cv: Option<Vec<String>> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let err = |message: String| Error::ManifestParse {
                path: origin.to_path_buf(),
                line: lineno + 1,
                message,
            };
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('@') {
                let mut it = rest.split_whitespace();
                match it.next() {
                    Some("consonants") => {
                        declared_consonants = Some(it.map(str::to_string).collect())
                    }
                    Some("cv") => declared_cv = Some(it.map(str::to_string).collect()),
                    other => {
                        return Err(err(format!(
                            "unknown directive `@{}`",
                            other.unwrap_or_default()
                        )))
                    }
                }
                continue;
            }
            let record = parse_record(line, records.len()).map_err(err)?;
            records.push(record);
        }
        if records.is_empty() {
            return Err(Error::EmptyManifest {
                path: origin.to_path_buf(),
            });
        }
        let manifest = CorpusManifest::from_records(records)?;
        if let Some(declared) = declared_consonants {
            check_inventory(origin, "consonants", &declared, &manifest.consonant_inventory)?;
        }
        if let Some(declared) = declared_cv {
            check_inventory(origin, "cv", &declared, &manifest.cv_inventory)?;
        }
        Ok(manifest)
    }

    /// Canonical text form; `parse` of the output reproduces the manifest.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# segment manifest\n");
        out.push_str(&format!("# fields: {}\n", FIELD_NAMES.join(" ")));
        out.push_str(&format!("@consonants {}\n", self.consonant_inventory.join(" ")));
        if !self.cv_inventory.is_empty() {
            out.push_str(&format!("@cv {}\n", self.cv_inventory.join(" ")));
        }
        for r in &self.records {
            out.push_str(&r.to_line());
            out.push('\n');
        }
        out
    }

    pub fn training_records(&self) -> impl Iterator<Item = &SegmentRecord> {
        self.records.iter().filter(|r| r.group == Group::TrainTd)
    }

    pub fn test_records(&self) -> impl Iterator<Item = &SegmentRecord> {
        self.records.iter().filter(|r| r.group.is_test())
    }

    /// Class index of a record within the inventory for its kind.
    pub fn class_index(&self, record: &SegmentRecord) -> Option<usize> {
        let category = record.category();
        let inventory = match record.kind {
            SegmentKind::C => &self.consonant_inventory,
            SegmentKind::Cv => &self.cv_inventory,
        };
        inventory.iter().position(|c| *c == category)
    }
}

fn check_inventory(
    origin: &Path,
    name: &str,
    declared: &[String],
    derived: &[String],
) -> Result<()> {
    let declared_set: BTreeSet<&str> = declared.iter().map(String::as_str).collect();
    let derived_set: BTreeSet<&str> = derived.iter().map(String::as_str).collect();
    if declared_set != derived_set {
        let missing: Vec<&&str> = derived_set.difference(&declared_set).collect();
        let extra: Vec<&&str> = declared_set.difference(&derived_set).collect();
        return Err(Error::ManifestParse {
            path: origin.to_path_buf(),
            line: 0,
            message: format!(
                "declared @{name} inventory disagrees with records (missing {missing:?}, extra {extra:?})"
            ),
        });
    }
    Ok(())
}

fn parse_record(line: &str, index: usize) -> std::result::Result<SegmentRecord, String> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    if tokens.len() != FIELD_NAMES.len() {
        return Err(format!(
            "expected {} fields, found {}",
            FIELD_NAMES.len(),
            tokens.len()
        ));
    }
    let mut values = Vec::with_capacity(FIELD_NAMES.len());
    for (token, expected) in tokens.iter().zip(FIELD_NAMES) {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| format!("field `{token}` is not key=value"))?;
        if key != expected {
            return Err(format!("expected field `{expected}`, found `{key}`"));
        }
        if value.is_empty() {
            return Err(format!("field `{key}` has an empty value"));
        }
        values.push(value);
    }
    let sample_rate: u32 = values[1]
        .parse()
        .map_err(|_| format!("sample_rate `{}` is not a positive integer", values[1]))?;
    let start: f64 = values[2]
        .parse()
        .map_err(|_| format!("start `{}` is not a number", values[2]))?;
    let end: f64 = values[3]
        .parse()
        .map_err(|_| format!("end `{}` is not a number", values[3]))?;
    let kind: SegmentKind = values[7].parse()?;
    let group: Group = values[8].parse()?;
    let vowel = match values[6] {
        "-" => None,
        v => Some(v.to_string()),
    };
    let record = SegmentRecord {
        id: record_id(index),
        audio_ref: values[0].to_string(),
        sample_rate,
        start,
        end,
        speaker_id: values[4].to_string(),
        consonant: values[5].to_string(),
        vowel,
        kind,
        group,
        expected_consonant: values[9].to_string(),
    };
    record.validate().map_err(|e| match e {
        Error::InvalidRecord { message, .. } => message,
        other => other.to_string(),
    })?;
    Ok(record)
}

/// Positional record id used for archive and embedding-table keys.
pub fn record_id(index: usize) -> String {
    format!("r{index:06}")
}

/// Load and validate a manifest file.
pub fn load_manifest(path: &Path) -> Result<CorpusManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    CorpusManifest::parse(&text, path)
}

/// Write a manifest in canonical form (atomic: temp file + rename).
pub fn save_manifest(manifest: &CorpusManifest, path: &Path) -> Result<()> {
    crate::ioutil::write_atomic(path, manifest.to_text().as_bytes())
}

/// Append one speed-perturbed copy per factor for every TRAIN_TD record.
/// Test records pass through untouched; copies reference the original audio
/// with a `#sp<factor>` suffix and carry rescaled boundaries.
pub fn augment_training_set(manifest: &CorpusManifest, factors: &[f64]) -> Result<CorpusManifest> {
    for &f in factors {
        crate::audio::check_speed_factor(f)?;
    }
    let mut records = manifest.records.clone();
    for record in manifest.records.iter().filter(|r| r.group == Group::TrainTd) {
        for &factor in factors {
            let mut copy = record.clone();
            copy.id = format!("{}{SPEED_SUFFIX}{factor}", record.id);
            copy.audio_ref = format!("{}{SPEED_SUFFIX}{factor}", record.audio_ref);
            copy.start = record.start / factor;
            copy.end = record.end / factor;
            records.push(copy);
        }
    }
    CorpusManifest::from_records(records)
}
