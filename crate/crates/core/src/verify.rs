//! Rule-based answer verification.
//!
//! The final answer is the content of the last balanced `\boxed{...}` group.
//! Two answers are equivalent when their normalized forms denote the same exact
//! rational number, or, for non-numeric answers, when the normalized strings
//! are identical.

use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::TrajectoryRecord;

const BOXED: &str = "\\boxed{";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerificationStatus {
    Correct,
    Incorrect,
    Unparseable,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerificationResult {
    /// Normalized extracted answer; `None` exactly when the status is `Unparseable`.
    pub extracted: Option<String>,
    pub status: VerificationStatus,
}

impl VerificationResult {
    /// Only `Correct` counts as a pass.
    pub fn passed(&self) -> bool {
        self.status == VerificationStatus::Correct
    }
}

/// Returns the index one past the `}` closing the group whose `{` is at `open`.
fn matching_brace(s: &str, open: usize) -> Option<usize> {
    let mut depth = 0usize;
    for (i, b) in s.bytes().enumerate().skip(open) {
        match b {
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// Contents of the last balanced `\boxed{...}` group, if any.
pub fn extract_boxed(response: &str) -> Option<String> {
    let starts: Vec<usize> = response.match_indices(BOXED).map(|(i, _)| i).collect();
    starts.into_iter().rev().find_map(|start| {
        let open = start + BOXED.len() - 1;
        matching_brace(response, open).map(|end| response[open + 1..end - 1].to_string())
    })
}

/// Removes presentation-only markup and one pair of enclosing braces.
pub fn normalize_answer(answer: &str) -> String {
    let mut s = answer.to_string();
    for token in ["\\left", "\\right", "\\,", "\\;", "\\ ", "$"] {
        s = s.replace(token, "");
    }
    let trimmed = s.trim();
    if trimmed.starts_with('{') && matching_brace(trimmed, 0) == Some(trimmed.len()) {
        trimmed[1..trimmed.len() - 1].trim().to_string()
    } else {
        trimmed.to_string()
    }
}

/// Parses an unsigned decimal literal (`12`, `0.5`, `.25`, `3.`) exactly.
fn parse_unsigned_decimal(s: &str) -> Option<BigRational> {
    let (int_part, frac_part) = match s.split_once('.') {
        Some((i, f)) => (i, f),
        None => (s, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.bytes().chain(frac_part.bytes()).all(|b| b.is_ascii_digit()) {
        return None;
    }
    let digits = format!("{int_part}{frac_part}");
    let numer = BigInt::from_str(&digits).ok()?;
    let denom = num_traits::pow(BigInt::from(10u8), frac_part.len());
    Some(BigRational::new(numer, denom))
}

fn split_sign(s: &str) -> (bool, &str) {
    match s.as_bytes().first() {
        Some(b'-') => (true, s[1..].trim_start()),
        Some(b'+') => (false, s[1..].trim_start()),
        _ => (false, s),
    }
}

fn parse_signed_decimal(s: &str) -> Option<BigRational> {
    let (neg, rest) = split_sign(s.trim());
    let v = parse_unsigned_decimal(rest)?;
    Some(if neg { -v } else { v })
}

fn ratio(numer: BigRational, denom: BigRational) -> Option<BigRational> {
    (!denom.is_zero()).then(|| numer / denom)
}

/// `\frac{a}{b}` (also `\dfrac`, `\tfrac`) with decimal literals `a` and `b`.
fn parse_frac(s: &str) -> Option<BigRational> {
    let rest = ["\\frac", "\\dfrac", "\\tfrac"]
        .iter()
        .find_map(|cmd| s.strip_prefix(cmd))?
        .trim_start();
    if !rest.starts_with('{') {
        return None;
    }
    let end_num = matching_brace(rest, 0)?;
    let numer = &rest[1..end_num - 1];
    let tail = rest[end_num..].trim_start();
    if !tail.starts_with('{') || matching_brace(tail, 0)? != tail.len() {
        return None;
    }
    let denom = &tail[1..tail.len() - 1];
    ratio(parse_signed_decimal(numer)?, parse_signed_decimal(denom)?)
}

/// Exact value of a normalized numeric answer: integer, finite decimal,
/// `a/b`, or `\frac{a}{b}`, each with an optional leading sign.
pub fn parse_exact(normalized: &str) -> Option<BigRational> {
    let s = normalized.trim();
    if let Some(v) = parse_signed_decimal(s) {
        return Some(v);
    }
    let (neg, body) = split_sign(s);
    let value = if body.starts_with('\\') {
        parse_frac(body)?
    } else {
        let (a, b) = body.split_once('/')?;
        ratio(parse_signed_decimal(a)?, parse_signed_decimal(b)?)?
    };
    Some(if neg { -value } else { value })
}

/// Equivalence under the normalization above; numeric answers compare exactly.
pub fn answers_equivalent(candidate: &str, gold: &str) -> bool {
    let (c, g) = (normalize_answer(candidate), normalize_answer(gold));
    match (parse_exact(&c), parse_exact(&g)) {
        (Some(x), Some(y)) => x == y,
        _ => c == g,
    }
}

/// Extracts the boxed answer of `record.response` and compares it with `record.gold_answer`.
pub fn verify(record: &TrajectoryRecord) -> Result<VerificationResult> {
    let gold = record.gold_answer.as_deref().ok_or_else(|| Error::Precondition {
        stage: "verify",
        id: record.id.clone(),
        message: "gold_answer is missing".into(),
    })?;
    Ok(match extract_boxed(&record.response) {
        None => VerificationResult {
            extracted: None,
            status: VerificationStatus::Unparseable,
        },
        Some(raw) => {
            let status = if answers_equivalent(&raw, gold) {
                VerificationStatus::Correct
            } else {
                VerificationStatus::Incorrect
            };
            VerificationResult {
                extracted: Some(normalize_answer(&raw)),
                status,
            }
        }
    })
}

/// Returns the record with `verified` set from [`verify`].
pub fn verify_record(record: &TrajectoryRecord) -> Result<TrajectoryRecord> {
    let result = verify(record)?;
    let mut out = record.clone();
    out.verified = Some(result.passed());
    Ok(out)
}
