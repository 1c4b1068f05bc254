//! Similarity scoring between test and reference embeddings, and
//! construction of the evaluation pairing.
//!
//! Two base similarities — cosine and a learned binary relation
//! σ(W·((x_t−x_r)⊙(x_t−x_r)) + b) — are blended per segment kind with a
//! scalar λ, and the per-kind scores for the same token pair are fused
//! with a scalar w:
//!
//! ```text
//! score_kind  = λ·cos + (1−λ)·binary
//! score_final = w·score_C + (1−w)·score_CV
//! ```
//!
//! Pairing protocol: a *token* is the C and CV record sharing one
//! (audio_ref, start). Every test token is paired with the typically
//! developing test tokens whose produced consonant matches the test
//! token's expected consonant and whose vowel matches (so both the C and
//! the CV comparison are category-valid), excluding itself and
//! same-speaker tokens. A pair is positive iff the test token's produced
//! consonant equals the reference's — i.e. substitution errors give
//! negatives. Each token pair emits two `ScoredPair` rows, one per kind,
//! sharing the fused column.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use ndarray::{Array1, ArrayView1};

use crate::archive::EmbeddingTable;
use crate::error::{Error, Result};
use crate::ioutil::write_atomic;
use crate::manifest::{CorpusManifest, SegmentKind, SegmentRecord};
use crate::nn::sigmoid;

/// Sweep grid for λ and w: 0.0 to 1.0 in steps of 0.1.
pub fn weight_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

fn check_weight(name: &str, v: f64) -> Result<()> {
    if !v.is_finite() || !(0.0..=1.0).contains(&v) {
        return Err(Error::Scoring(format!("{name} = {v} outside [0, 1]")));
    }
    Ok(())
}

/// Cosine similarity, clamped to [−1, 1] against rounding.
pub fn cosine_score(x_t: ArrayView1<f64>, x_r: ArrayView1<f64>) -> Result<f64> {
    if x_t.len() != x_r.len() {
        return Err(Error::Scoring(format!(
            "cosine: dimension mismatch {} vs {}",
            x_t.len(),
            x_r.len()
        )));
    }
    let nt = x_t.dot(&x_t).sqrt();
    let nr = x_r.dot(&x_r).sqrt();
    if nt == 0.0 || nr == 0.0 {
        return Err(Error::Scoring("cosine: zero-norm embedding".into()));
    }
    Ok((x_t.dot(&x_r) / (nt * nr)).clamp(-1.0, 1.0))
}

/// Learned pair similarity: σ(Σ_i W_i·(x_t−x_r)_i² + b), in (0, 1).
/// Symmetric in its arguments.
pub fn binary_relation_score(
    x_t: ArrayView1<f64>,
    x_r: ArrayView1<f64>,
    weights: ArrayView1<f64>,
    bias: f64,
) -> Result<f64> {
    if x_t.len() != x_r.len() || x_t.len() != weights.len() {
        return Err(Error::Scoring(format!(
            "binary relation: dimension mismatch (test {}, ref {}, weights {})",
            x_t.len(),
            x_r.len(),
            weights.len()
        )));
    }
    let mut a = bias;
    for ((t, r), w) in x_t.iter().zip(x_r.iter()).zip(weights.iter()) {
        let d = t - r;
        a += w * d * d;
    }
    Ok(sigmoid(a))
}

/// Per-kind blend of the two similarities.
pub fn combine(score_cos: f64, score_binary: f64, lambda: f64) -> Result<f64> {
    check_weight("lambda", lambda)?;
    Ok(lambda * score_cos + (1.0 - lambda) * score_binary)
}

/// Cross-kind blend of the two combined scores.
pub fn fuse(score_c: f64, score_cv: f64, w: f64) -> Result<f64> {
    check_weight("w", w)?;
    Ok(w * score_c + (1.0 - w) * score_cv)
}

/// How multiple references collapse to one score in aggregate mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Mean,
    Max,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Aggregation::Mean => write!(f, "mean"),
            Aggregation::Max => write!(f, "max"),
        }
    }
}

impl FromStr for Aggregation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "max" => Ok(Aggregation::Max),
            other => Err(format!("unknown aggregation `{other}` (mean or max)")),
        }
    }
}

/// Relation-head parameters lifted out of a checkpoint.
#[derive(Debug, Clone)]
pub struct Relation {
    pub weights: Array1<f64>,
    pub bias: f64,
}

impl Relation {
    pub fn score(&self, x_t: ArrayView1<f64>, x_r: ArrayView1<f64>) -> Result<f64> {
        binary_relation_score(x_t, x_r, self.weights.view(), self.bias)
    }
}

/// Order-insensitive mean: summands are sorted first, so any permutation
/// of the inputs produces bitwise the same result.
fn stable_mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Combined score of one test embedding against a reference set,
/// aggregated by arithmetic mean (permutation-invariant).
pub fn score_vs_references(
    x_t: ArrayView1<f64>,
    references: &[ArrayView1<f64>],
    relation: &Relation,
    lambda: f64,
) -> Result<f64> {
    score_vs_references_with(x_t, references, relation, lambda, Aggregation::Mean)
}

pub fn score_vs_references_with(
    x_t: ArrayView1<f64>,
    references: &[ArrayView1<f64>],
    relation: &Relation,
    lambda: f64,
    aggregation: Aggregation,
) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Scoring("empty reference set".into()));
    }
    let mut combined = Vec::with_capacity(references.len());
    for x_r in references {
        let cos = cosine_score(x_t, *x_r)?;
        let bin = relation.score(x_t, *x_r)?;
        combined.push(combine(cos, bin, lambda)?);
    }
    Ok(match aggregation {
        Aggregation::Mean => stable_mean(combined),
        Aggregation::Max => combined.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// One scored comparison row; token pairs emit one row per segment kind,
/// sharing `fused`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPair {
    pub test_id: String,
    /// Reference record id, or `mean:N` / `max:N` in aggregate mode.
    pub reference: String,
    /// The test token's target (expected) consonant.
    pub consonant: String,
    pub kind: SegmentKind,
    pub cos: f64,
    pub binary: f64,
    pub combined: f64,
    pub fused: f64,
    pub positive: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairingParams {
    pub lambda_c: f64,
    pub lambda_cv: f64,
    pub fusion_weight: f64,
    /// None scores every test/reference pair separately (the default);
    /// Some collapses each test token's reference set to one row pair.
    pub aggregation: Option<Aggregation>,
}

impl Default for PairingParams {
    fn default() -> Self {
        PairingParams {
            lambda_c: 0.5,
            lambda_cv: 0.5,
            fusion_weight: 0.5,
            aggregation: None,
        }
    }
}

impl PairingParams {
    pub fn validate(&self) -> Result<()> {
        check_weight("lambda_c", self.lambda_c)?;
        check_weight("lambda_cv", self.lambda_cv)?;
        check_weight("w", self.fusion_weight)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PairingStats {
    /// Test tokens that produced rows.
    pub tests_scored: usize,
    /// Test tokens skipped for lack of eligible references.
    pub tests_skipped: usize,
    /// Tokens dropped because one of the two kinds was missing.
    pub incomplete_tokens: usize,
}

/// C and CV record of one underlying token.
struct Token<'a> {
    c: &'a SegmentRecord,
    cv: &'a SegmentRecord,
}

fn collect_tokens<'a>(manifest: &'a CorpusManifest) -> Result<(Vec<Token<'a>>, usize)> {
    struct Partial<'a> {
        c: Option<&'a SegmentRecord>,
        cv: Option<&'a SegmentRecord>,
    }
    let mut partial: IndexMap<(String, u64), Partial<'a>> = IndexMap::new();
    for r in manifest.test_records() {
        let key = (r.audio_ref.clone(), r.start.to_bits());
        let slot = partial.entry(key).or_insert(Partial { c: None, cv: None });
        let dup = |r: &SegmentRecord| {
            Err(Error::Scoring(format!(
                "records {} and earlier share audio_ref {} start {} and kind {}",
                r.id, r.audio_ref, r.start, r.kind
            )))
        };
        match r.kind {
            SegmentKind::C => {
                if slot.c.replace(r).is_some() {
                    return dup(r);
                }
            }
            SegmentKind::Cv => {
                if slot.cv.replace(r).is_some() {
                    return dup(r);
                }
            }
        }
    }
    let mut tokens = Vec::new();
    let mut incomplete = 0;
    for (_, p) in partial {
        match (p.c, p.cv) {
            (Some(c), Some(cv)) => {
                for (what, agree) in [
                    ("speaker", c.speaker_id == cv.speaker_id),
                    ("group", c.group == cv.group),
                    ("consonant", c.consonant == cv.consonant),
                    ("expected consonant", c.expected_consonant == cv.expected_consonant),
                ] {
                    if !agree {
                        return Err(Error::Scoring(format!(
                            "records {} and {} form one token but disagree on {what}",
                            c.id, cv.id
                        )));
                    }
                }
                tokens.push(Token { c, cv });
            }
            _ => incomplete += 1,
        }
    }
    Ok((tokens, incomplete))
}

fn embedding<'t>(table: &'t EmbeddingTable, record: &SegmentRecord) -> Result<ArrayView1<'t, f64>> {
    table.get(&record.id).map(|e| e.view()).ok_or_else(|| {
        Error::Scoring(format!(
            "no {} embedding for test-set record {}",
            table.kind, record.id
        ))
    })
}

/// Scores every test token (TD and atypical) against its eligible
/// reference tokens. Tokens without references are skipped and counted.
pub fn build_eval_pairs(
    manifest: &CorpusManifest,
    c_embeddings: &EmbeddingTable,
    cv_embeddings: &EmbeddingTable,
    c_relation: &Relation,
    cv_relation: &Relation,
    params: &PairingParams,
) -> Result<(Vec<ScoredPair>, PairingStats)> {
    params.validate()?;
    if c_embeddings.kind != SegmentKind::C || cv_embeddings.kind != SegmentKind::Cv {
        return Err(Error::Scoring(
            "embedding tables passed in the wrong kind order".into(),
        ));
    }
    let (tokens, incomplete_tokens) = collect_tokens(manifest)?;
    let mut stats = PairingStats {
        incomplete_tokens,
        ..PairingStats::default()
    };
    let mut rows = Vec::new();

    for test in &tokens {
        let vowel = test.cv.vowel.as_deref().unwrap_or_default();
        let references: Vec<&Token> = tokens
            .iter()
            .filter(|r| {
                r.c.group == crate::manifest::Group::TestTd
                    && r.c.consonant == test.c.expected_consonant
                    && r.cv.vowel.as_deref() == Some(vowel)
                    && r.c.speaker_id != test.c.speaker_id
                    && !std::ptr::eq(*r, test)
            })
            .collect();
        if references.is_empty() {
            stats.tests_skipped += 1;
            continue;
        }
        stats.tests_scored += 1;

        let xt_c = embedding(c_embeddings, test.c)?;
        let xt_cv = embedding(cv_embeddings, test.cv)?;
        let mut scored: Vec<(&Token, f64, f64, f64, f64, f64, f64)> = Vec::new();
        for r in &references {
            let xr_c = embedding(c_embeddings, r.c)?;
            let xr_cv = embedding(cv_embeddings, r.cv)?;
            let cos_c = cosine_score(xt_c, xr_c)?;
            let bin_c = c_relation.score(xt_c, xr_c)?;
            let comb_c = combine(cos_c, bin_c, params.lambda_c)?;
            let cos_cv = cosine_score(xt_cv, xr_cv)?;
            let bin_cv = cv_relation.score(xt_cv, xr_cv)?;
            let comb_cv = combine(cos_cv, bin_cv, params.lambda_cv)?;
            scored.push((r, cos_c, bin_c, comb_c, cos_cv, bin_cv, comb_cv));
        }

        // A reference's produced consonant equals the test token's expected
        // one by construction, so the pair is positive exactly when the test
        // token itself is typical.
        let positive = test.c.consonant == test.c.expected_consonant;
        let consonant = test.c.expected_consonant.clone();
        let mut push_rows =
            |reference: String, c: (f64, f64, f64), cv: (f64, f64, f64)| -> Result<()> {
                let fused = fuse(c.2, cv.2, params.fusion_weight)?;
                rows.push(ScoredPair {
                    test_id: test.c.id.clone(),
                    reference: reference.clone(),
                    consonant: consonant.clone(),
                    kind: SegmentKind::C,
                    cos: c.0,
                    binary: c.1,
                    combined: c.2,
                    fused,
                    positive,
                });
                rows.push(ScoredPair {
                    test_id: test.cv.id.clone(),
                    reference,
                    consonant: consonant.clone(),
                    kind: SegmentKind::Cv,
                    cos: cv.0,
                    binary: cv.1,
                    combined: cv.2,
                    fused,
                    positive,
                });
                Ok(())
            };

        match params.aggregation {
            None => {
                for (r, cos_c, bin_c, comb_c, cos_cv, bin_cv, comb_cv) in scored {
                    push_rows(
                        r.c.id.clone(),
                        (cos_c, bin_c, comb_c),
                        (cos_cv, bin_cv, comb_cv),
                    )?;
                }
            }
            Some(Aggregation::Mean) => {
                let marker = format!("mean:{}", scored.len());
                let mean = |f: &dyn Fn(&(&Token, f64, f64, f64, f64, f64, f64)) -> f64| {
                    stable_mean(scored.iter().map(f).collect())
                };
                push_rows(
                    marker,
                    (mean(&|s| s.1), mean(&|s| s.2), mean(&|s| s.3)),
                    (mean(&|s| s.4), mean(&|s| s.5), mean(&|s| s.6)),
                )?;
            }
            Some(Aggregation::Max) => {
                let marker = format!("max:{}", scored.len());
                let best = |pick: &dyn Fn(&(&Token, f64, f64, f64, f64, f64, f64)) -> f64,
                            parts: &dyn Fn(
                    &(&Token, f64, f64, f64, f64, f64, f64),
                )
                    -> (f64, f64, f64)| {
                    let mut it = scored.iter();
                    let mut top = it.next().expect("non-empty");
                    for s in it {
                        if pick(s) > pick(top) {
                            top = s;
                        }
                    }
                    parts(top)
                };
                push_rows(
                    marker,
                    best(&|s| s.3, &|s| (s.1, s.2, s.3)),
                    best(&|s| s.6, &|s| (s.4, s.5, s.6)),
                )?;
            }
        }
    }
    Ok((rows, stats))
}

/// Scored pairs plus the parameters that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub params: PairingParams,
    pub rows: Vec<ScoredPair>,
}

impl PairSet {
    /// Canonical text form; `parse` of the output reproduces the set.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# scored pairs\n");
        let agg = match self.params.aggregation {
            None => "none".to_string(),
            Some(a) => a.to_string(),
        };
        out.push_str(&format!(
            "# params lambda_c={} lambda_cv={} fusion_weight={} aggregation={}\n",
            self.params.lambda_c, self.params.lambda_cv, self.params.fusion_weight, agg
        ));
        out.push_str("# fields: test_id reference consonant kind cos binary combined fused label\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{} {} {} {} {} {} {} {} {}\n",
                r.test_id,
                r.reference,
                r.consonant,
                r.kind,
                r.cos,
                r.binary,
                r.combined,
                r.fused,
                if r.positive { "pos" } else { "neg" }
            ));
        }
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut params: Option<PairingParams> = None;
        let mut rows = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let err = |message: String| Error::ManifestParse {
                path: origin.to_path_buf(),
                line: lineno + 1,
                message,
            };
            if let Some(rest) = line.strip_prefix("# params ") {
                params = Some(parse_params(rest).map_err(err)?);
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            rows.push(parse_row(line).map_err(err)?);
        }
        let params = params.ok_or_else(|| Error::ManifestParse {
            path: origin.to_path_buf(),
            line: 0,
            message: "missing `# params` line".into(),
        })?;
        Ok(PairSet { params, rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PairSet::parse(&text, path)
    }
}

fn parse_params(rest: &str) -> std::result::Result<PairingParams, String> {
    let mut lambda_c = None;
    let mut lambda_cv = None;
    let mut fusion_weight = None;
    let mut aggregation = None;
    for tok in rest.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| format!("param `{tok}` is not key=value"))?;
        match k {
            "lambda_c" | "lambda_cv" | "fusion_weight" => {
                let f: f64 = v.parse().map_err(|_| format!("{k} `{v}` is not a number"))?;
                match k {
                    "lambda_c" => lambda_c = Some(f),
                    "lambda_cv" => lambda_cv = Some(f),
                    _ => fusion_weight = Some(f),
                }
            }
            "aggregation" => {
                aggregation = Some(match v {
                    "none" => None,
                    other => Some(other.parse::<Aggregation>()?),
                })
            }
            other => return Err(format!("unknown param `{other}`")),
        }
    }
    match (lambda_c, lambda_cv, fusion_weight, aggregation) {
        (Some(lambda_c), Some(lambda_cv), Some(fusion_weight), Some(aggregation)) => {
            Ok(PairingParams {
                lambda_c,
                lambda_cv,
                fusion_weight,
                aggregation,
            })
        }
        _ => Err("params line must set lambda_c, lambda_cv, fusion_weight, aggregation".into()),
    }
}

fn parse_row(line: &str) -> std::result::Result<ScoredPair, String> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 9 {
        return Err(format!("expected 9 fields, found {}", fields.len()));
    }
    let num = |i: usize, name: &str| -> std::result::Result<f64, String> {
        fields[i]
            .parse()
            .map_err(|_| format!("{name} `{}` is not a number", fields[i]))
    };
    let positive = match fields[8] {
        "pos" => true,
        "neg" => false,
        other => return Err(format!("label `{other}` is not pos/neg")),
    };
    Ok(ScoredPair {
        test_id: fields[0].to_string(),
        reference: fields[1].to_string(),
        consonant: fields[2].to_string(),
        kind: fields[3].parse()?,
        cos: num(4, "cos")?,
        binary: num(5, "binary")?,
        combined: num(6, "combined")?,
        fused: num(7, "fused")?,
        positive,
    })
}
