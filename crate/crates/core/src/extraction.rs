//! Answer normalization and polarity label extraction.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Neutral,
    Negative,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Positive, Polarity::Neutral, Polarity::Negative];

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Neutral => "neutral",
            Polarity::Negative => "negative",
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownPolarity(pub String);

impl fmt::Display for UnknownPolarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "unknown polarity `{}` (expected positive, neutral or negative)",
            self.0
        )
    }
}

impl std::error::Error for UnknownPolarity {}

impl FromStr for Polarity {
    type Err = UnknownPolarity;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "positive" => Ok(Polarity::Positive),
            "neutral" => Ok(Polarity::Neutral),
            "negative" => Ok(Polarity::Negative),
            other => Err(UnknownPolarity(other.to_string())),
        }
    }
}

/// Outcome of scanning an answer for a polarity keyword.
///
/// `matched_span` is `(byte offset, byte length)` into the original answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ExtractionResult {
    pub polarity: Option<Polarity>,
    pub matched_span: Option<(usize, usize)>,
}

impl ExtractionResult {
    pub fn parseable(&self) -> bool {
        self.polarity.is_some()
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// Lowercases, turns every non-alphanumeric non-space character into a space,
/// collapses whitespace runs and trims.
pub fn normalize_text(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut pending_space = false;
    for c in s.chars().flat_map(char::to_lowercase) {
        if is_word_char(c) {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        } else {
            pending_space = true;
        }
    }
    out
}

/// Finds the last whole-word `positive`/`negative`/`neutral` in the answer.
///
/// Tokens are exactly the words of [`normalize_text`]; each lowered character
/// remembers which source character produced it so the span can be reported
/// against the original text.
pub fn extract_polarity(answer: &str) -> ExtractionResult {
    let mut result = ExtractionResult::default();
    let mut word = String::new();
    let mut word_span: Option<(usize, usize)> = None;

    let mut flush = |word: &mut String, span: &mut Option<(usize, usize)>| {
        if let (Ok(p), Some((start, end))) = (word.parse::<Polarity>(), *span) {
            result.polarity = Some(p);
            result.matched_span = Some((start, end - start));
        }
        word.clear();
        *span = None;
    };

    for (offset, c) in answer.char_indices() {
        let end = offset + c.len_utf8();
        for lc in c.to_lowercase() {
            if is_word_char(lc) {
                word.push(lc);
                word_span = Some(match word_span {
                    Some((start, _)) => (start, end),
                    None => (offset, end),
                });
            } else {
                flush(&mut word, &mut word_span);
            }
        }
    }
    flush(&mut word, &mut word_span);
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(
            normalize_text("The Aspect is TASTE!!"),
            "the aspect is taste"
        );
        assert_eq!(normalize_text(""), "");
        assert_eq!(normalize_text("  A  b,c "), "a b c");
        let once = normalize_text("A  b,c");
        assert_eq!(normalize_text(&once), once);
    }

    #[test]
    fn extract_examples() {
        let r = extract_polarity("The sentiment polarity towards the metro station is positive.");
        assert_eq!(r.polarity, Some(Polarity::Positive));
        assert!(r.parseable());
        assert_eq!(
            extract_polarity("positive").polarity,
            Some(Polarity::Positive)
        );
        assert_eq!(extract_polarity("positive").matched_span, Some((0, 8)));
        let r = extract_polarity("it is not positive, rather negative overall");
        assert_eq!(r.polarity, Some(Polarity::Negative));
        assert_eq!(r.matched_span, Some((27, 8)));
    }

    #[test]
    fn unparseable_is_a_value() {
        let r = extract_polarity("I cannot tell.");
        assert_eq!(r, ExtractionResult::default());
        assert!(!r.parseable());
        assert!(!extract_polarity("").parseable());
    }

    #[test]
    fn whole_words_only() {
        assert!(!extract_polarity("it positively impacted sales").parseable());
        assert!(!extract_polarity("non-neutrality").parseable());
        assert_eq!(
            extract_polarity("positively impacted, so positive").polarity,
            Some(Polarity::Positive)
        );
        // punctuation splits words
        assert_eq!(
            extract_polarity("label:NEGATIVE.").polarity,
            Some(Polarity::Negative)
        );
    }

    #[test]
    fn span_points_into_original() {
        let answer = "Überall gut… NEUTRAL!";
        let r = extract_polarity(answer);
        let (off, len) = r.matched_span.unwrap();
        assert_eq!(&answer[off..off + len], "NEUTRAL");
    }

    fn vocab() -> impl Strategy<Value = String> {
        prop::sample::select(vec![
            "positive",
            "negative",
            "neutral",
            "the",
            "food",
            "positively",
            "not",
            "neutrality",
            "is",
            "aspect",
            "taste",
            "good",
        ])
        .prop_map(str::to_string)
    }

    fn separator() -> impl Strategy<Value = String> {
        prop::sample::select(vec![" ", ", ", ". ", "!", "  ", "\n", " - ", ";"])
            .prop_map(str::to_string)
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in any::<String>()) {
            let once = normalize_text(&s);
            prop_assert_eq!(normalize_text(&once), once);
        }

        #[test]
        fn tokens_agree_with_normalize(s in "\\PC{0,40}") {
            // last polarity word of the normalized text must equal the extraction
            let expected = normalize_text(&s)
                .split(' ')
                .rev()
                .find_map(|w| w.parse::<Polarity>().ok());
            prop_assert_eq!(extract_polarity(&s).polarity, expected);
        }

        #[test]
        fn case_and_punctuation_insensitive(
            words in prop::collection::vec((vocab(), separator(), any::<bool>()), 1..12)
        ) {
            let plain: String = words.iter().map(|(w, _, _)| format!("{w} ")).collect();
            let noisy: String = words
                .iter()
                .map(|(w, sep, upper)| {
                    let w = if *upper { w.to_uppercase() } else { w.clone() };
                    format!("{w}{sep}")
                })
                .collect();
            prop_assert_eq!(extract_polarity(&plain).polarity, extract_polarity(&noisy).polarity);
        }
    }
}
