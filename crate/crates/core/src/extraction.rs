//! Deterministic numeric prediction extraction from free-form solution text.
//!
//! Two extraction paths, tried in order:
//!
//! 1. **Marker**: if the text contains the canonical `#### ` marker, the
//!    number immediately following the *last* marker wins.
//! 2. **Last number**: otherwise the last numeric token anywhere in the
//!    text wins.
//!
//! Numeric token grammar (shared by both paths):
//!
//! - optional sign (`-` or Unicode minus `−`), valid only when the
//!   preceding character is not a digit;
//! - a run of digits;
//! - zero or more comma groups: a comma counts as a thousands separator
//!   only when followed by exactly three digits that are not themselves
//!   followed by a fourth digit;
//! - an optional decimal part (`.` followed by at least one digit).
//!
//! Trailing punctuation is never part of a token by construction. A `%`
//! after a number is dropped and the value kept as written (no division
//! by 100). Values are exact decimals, not binary floats, so the
//! `|pred - gold| < 0.01` comparison is well-defined.

use std::str::FromStr;

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

/// GSM8K-style final-answer marker.
pub const ANSWER_MARKER: &str = "#### ";

/// How a prediction was obtained from the solution text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionPath {
    Marker,
    LastNumber,
    None,
}

impl std::fmt::Display for ExtractionPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Marker => "marker",
            Self::LastNumber => "last_number",
            Self::None => "none",
        };
        write!(f, "{s}")
    }
}

/// Match verdict between a prediction and the gold answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Match,
    Mismatch,
}

/// Where a verdict came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictSource {
    Judge,
    ToleranceFallback,
    None,
}

impl std::fmt::Display for VerdictSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Judge => "judge",
            Self::ToleranceFallback => "tolerance_fallback",
            Self::None => "none",
        };
        write!(f, "{s}")
    }
}

/// Extraction outcome plus verification provenance for one task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub task_id: String,
    pub raw_text: String,
    pub predicted: Option<Decimal>,
    pub extraction_path: ExtractionPath,
    pub verdict: Option<Verdict>,
    pub verdict_source: VerdictSource,
}

impl PredictionRecord {
    /// Extracts a prediction from `raw_text`; verdict fields start empty.
    pub fn extract(task_id: impl Into<String>, raw_text: impl Into<String>) -> Self {
        let raw_text = raw_text.into();
        let (predicted, extraction_path) = extract_prediction(&raw_text);
        Self {
            task_id: task_id.into(),
            raw_text,
            predicted,
            extraction_path,
            verdict: None,
            verdict_source: VerdictSource::None,
        }
    }
}

/// A numeric token located in source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NumericToken {
    /// Byte offset of the token start.
    pub start: usize,
    /// Byte offset one past the token end.
    pub end: usize,
    /// Parsed exact-decimal value.
    pub value: Decimal,
}

/// Extracts the final numeric prediction from solution text.
///
/// Total function: failures are encoded as `(None, ExtractionPath::None)`.
/// A marker whose payload does not parse falls through to the
/// last-number path so the verdict coverage stays as high as possible.
pub fn extract_prediction(text: &str) -> (Option<Decimal>, ExtractionPath) {
    if let Some(payload) = last_marker_payload(text) {
        if let Some(value) = parse_anchored_number(payload) {
            return (Some(value), ExtractionPath::Marker);
        }
    }
    match scan_numeric_tokens(text).into_iter().last() {
        Some(tok) => (Some(tok.value), ExtractionPath::LastNumber),
        None => (None, ExtractionPath::None),
    }
}

/// Strict `|pred - gold| < 0.01` comparison in exact decimal arithmetic.
///
/// The boundary case (difference exactly 0.01) is a mismatch.
pub fn compare_tolerance(pred: Decimal, gold: Decimal) -> Verdict {
    let tol = Decimal::new(1, 2); // 0.01
    if (pred - gold).abs() < tol {
        Verdict::Match
    } else {
        Verdict::Mismatch
    }
}

/// Returns the text after the last `#### ` marker, if any.
pub(crate) fn last_marker_payload(text: &str) -> Option<&str> {
    text.rfind(ANSWER_MARKER)
        .map(|pos| &text[pos + ANSWER_MARKER.len()..])
}

/// Parses the number adjacent to a marker payload.
///
/// Leading whitespace and a single `$` are skipped; the token must then
/// start immediately (so `#### unknown` does not parse but `#### $1,234`
/// does).
pub(crate) fn parse_anchored_number(payload: &str) -> Option<Decimal> {
    let trimmed = payload.trim_start();
    let trimmed = trimmed.strip_prefix('$').unwrap_or(trimmed);
    let tokens = scan_numeric_tokens(trimmed);
    match tokens.first() {
        Some(tok) if tok.start == 0 => Some(tok.value),
        _ => None,
    }
}

/// First numeric token in `text`, if any. Used by judge-reply parsing.
pub(crate) fn first_numeric_token(text: &str) -> Option<Decimal> {
    scan_numeric_tokens(text).into_iter().next().map(|t| t.value)
}

/// Left-to-right scan for every numeric token in `text`.
pub fn scan_numeric_tokens(text: &str) -> Vec<NumericToken> {
    let chars: Vec<char> = text.chars().collect();
    // Byte offset of each char, plus the terminating offset.
    let mut offsets = Vec::with_capacity(chars.len() + 1);
    let mut off = 0;
    for c in &chars {
        offsets.push(off);
        off += c.len_utf8();
    }
    offsets.push(off);

    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let is_sign = (c == '-' || c == '\u{2212}')
            && i + 1 < chars.len()
            && chars[i + 1].is_ascii_digit()
            && (i == 0 || !chars[i - 1].is_ascii_digit());
        if !c.is_ascii_digit() && !is_sign {
            i += 1;
            continue;
        }

        let start = i;
        let mut j = i;
        if is_sign {
            j += 1;
        }
        while j < chars.len() && chars[j].is_ascii_digit() {
            j += 1;
        }
        // Comma groups: ",ddd" where the group is not followed by a digit.
        loop {
            let group_ok = chars.get(j) == Some(&',')
                && chars.get(j + 1).is_some_and(|c| c.is_ascii_digit())
                && chars.get(j + 2).is_some_and(|c| c.is_ascii_digit())
                && chars.get(j + 3).is_some_and(|c| c.is_ascii_digit())
                && !chars.get(j + 4).is_some_and(|c| c.is_ascii_digit());
            if !group_ok {
                break;
            }
            j += 4;
        }
        // Decimal part.
        if chars.get(j) == Some(&'.') && chars.get(j + 1).is_some_and(|c| c.is_ascii_digit()) {
            j += 1;
            while j < chars.len() && chars[j].is_ascii_digit() {
                j += 1;
            }
        }

        let normalized: String = chars[start..j]
            .iter()
            .filter(|&&c| c != ',')
            .map(|&c| if c == '\u{2212}' { '-' } else { c })
            .collect();
        if let Ok(value) = Decimal::from_str(&normalized) {
            tokens.push(NumericToken {
                start: offsets[start],
                end: offsets[j],
                value,
            });
        }
        i = j;
    }
    tokens
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dec(s: &str) -> Decimal {
        Decimal::from_str(s).unwrap()
    }

    fn last_value(text: &str) -> Option<Decimal> {
        scan_numeric_tokens(text).into_iter().last().map(|t| t.value)
    }

    #[test]
    fn marker_wins_over_later_numbers() {
        let (v, p) = extract_prediction("steps 1 and 2 give #### 42 which beats 99");
        assert_eq!(v, Some(dec("42")));
        assert_eq!(p, ExtractionPath::Marker);
    }

    #[test]
    fn marker_simple() {
        let (v, p) = extract_prediction("…steps… #### 42");
        assert_eq!(v, Some(dec("42")));
        assert_eq!(p, ExtractionPath::Marker);
    }

    #[test]
    fn last_number_with_currency_and_commas() {
        let (v, p) = extract_prediction("She pays $1,250.50 in total.");
        assert_eq!(v, Some(dec("1250.50")));
        assert_eq!(p, ExtractionPath::LastNumber);
    }

    #[test]
    fn no_numbers_at_all() {
        let (v, p) = extract_prediction("No numbers at all.");
        assert_eq!(v, None);
        assert_eq!(p, ExtractionPath::None);
    }

    #[test]
    fn last_token_rule() {
        let (v, p) = extract_prediction("Answers 3 then 7. Final: 7.");
        assert_eq!(v, Some(dec("7")));
        assert_eq!(p, ExtractionPath::LastNumber);
    }

    #[test]
    fn unparseable_marker_falls_through() {
        let (v, p) = extract_prediction("2 plus 2; #### unknown");
        assert_eq!(v, Some(dec("2")));
        assert_eq!(p, ExtractionPath::LastNumber);
    }

    #[test]
    fn last_marker_is_used() {
        let (v, p) = extract_prediction("#### 5 revised later #### 9");
        assert_eq!(v, Some(dec("9")));
        assert_eq!(p, ExtractionPath::Marker);
    }

    #[test]
    fn marker_with_dollar_and_commas() {
        assert_eq!(parse_anchored_number("$1,234"), Some(dec("1234")));
        assert_eq!(parse_anchored_number(" 72"), Some(dec("72")));
        assert_eq!(parse_anchored_number("\u{2212}3"), Some(dec("-3")));
        assert_eq!(parse_anchored_number("unknown"), None);
        assert_eq!(parse_anchored_number("42."), Some(dec("42")));
    }

    #[test]
    fn unicode_minus() {
        assert_eq!(last_value("temperature fell to \u{2212}3"), Some(dec("-3")));
    }

    #[test]
    fn sign_does_not_attach_after_digit() {
        // "5-3" reads as subtraction, not the number -3.
        let toks = scan_numeric_tokens("5-3");
        let vals: Vec<_> = toks.iter().map(|t| t.value).collect();
        assert_eq!(vals, vec![dec("5"), dec("3")]);
    }

    #[test]
    fn percent_kept_as_written() {
        assert_eq!(last_value("a rate of 35%"), Some(dec("35")));
    }

    #[test]
    fn malformed_comma_grouping_splits() {
        let vals: Vec<_> = scan_numeric_tokens("1,2345")
            .iter()
            .map(|t| t.value)
            .collect();
        assert_eq!(vals, vec![dec("1"), dec("2345")]);
        let vals: Vec<_> = scan_numeric_tokens("12,34")
            .iter()
            .map(|t| t.value)
            .collect();
        assert_eq!(vals, vec![dec("12"), dec("34")]);
    }

    #[test]
    fn multi_group_number() {
        assert_eq!(last_value("about 1,234,567 units"), Some(dec("1234567")));
    }

    #[test]
    fn trailing_dot_not_consumed() {
        assert_eq!(last_value("the answer is 3.14."), Some(dec("3.14")));
        assert_eq!(last_value("count is 12."), Some(dec("12")));
    }

    #[test]
    fn tolerance_rules() {
        assert_eq!(compare_tolerance(dec("3.141"), dec("3.149")), Verdict::Match);
        assert_eq!(compare_tolerance(dec("5"), dec("5.02")), Verdict::Mismatch);
        assert_eq!(compare_tolerance(dec("7"), dec("7")), Verdict::Match);
        // Exact boundary is a mismatch.
        assert_eq!(compare_tolerance(dec("1.00"), dec("1.01")), Verdict::Mismatch);
        assert_eq!(compare_tolerance(dec("0.1"), dec("0.1")), Verdict::Match);
    }

    #[test]
    fn tolerance_symmetry() {
        let pairs = [("5", "5.009"), ("5", "5.02"), ("-1", "1"), ("0.005", "0")];
        for (a, b) in pairs {
            assert_eq!(
                compare_tolerance(dec(a), dec(b)),
                compare_tolerance(dec(b), dec(a)),
                "symmetry failed for ({a}, {b})"
            );
        }
    }

    #[test]
    fn record_extract_sets_paths() {
        let rec = PredictionRecord::extract("t1", "total 12");
        assert_eq!(rec.predicted, Some(dec("12")));
        assert_eq!(rec.extraction_path, ExtractionPath::LastNumber);
        assert!(rec.verdict.is_none());
        assert_eq!(rec.verdict_source, VerdictSource::None);

        let rec = PredictionRecord::extract("t2", "nothing numeric");
        assert!(rec.predicted.is_none());
        assert_eq!(rec.extraction_path, ExtractionPath::None);
    }
}
