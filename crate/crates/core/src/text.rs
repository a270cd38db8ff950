//! Small text helpers shared by the stages: whitespace normalization,
//! word counting and fuzzy quote containment.

use std::collections::HashSet;

/// Collapse every run of whitespace to a single space and trim the ends.
pub fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Number of whitespace-separated tokens.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Lowercased word tokens with surrounding punctuation removed. Tokens that
/// are pure punctuation vanish.
pub fn match_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

fn jaccard(a: &HashSet<&str>, b: &HashSet<&str>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Best token-level Jaccard similarity between `needle` and any window of
/// `haystack` holding the same number of tokens.
///
/// Both sides are lowercased and stripped of punctuation first. An empty
/// needle scores 0.0. When the needle is longer than the haystack the whole
/// haystack is the only window.
pub fn fuzzy_containment(haystack: &str, needle: &str) -> f64 {
    let needle_tokens = match_tokens(needle);
    if needle_tokens.is_empty() {
        return 0.0;
    }
    let hay_tokens = match_tokens(haystack);
    if hay_tokens.is_empty() {
        return 0.0;
    }
    let needle_set: HashSet<&str> = needle_tokens.iter().map(String::as_str).collect();
    let width = needle_tokens.len().min(hay_tokens.len());
    let mut best = 0.0f64;
    for window in hay_tokens.windows(width) {
        let set: HashSet<&str> = window.iter().map(String::as_str).collect();
        let score = jaccard(&set, &needle_set);
        if score > best {
            best = score;
            if best >= 1.0 {
                break;
            }
        }
    }
    best
}

/// True when [`fuzzy_containment`] reaches `threshold`.
pub fn fuzzy_contains(haystack: &str, needle: &str, threshold: f64) -> bool {
    fuzzy_containment(haystack, needle) >= threshold
}

/// Number of display lines `text` occupies when greedily word-wrapped at
/// `columns`. Explicit newlines start a new line.
pub fn wrapped_line_count(text: &str, columns: usize) -> usize {
    let mut lines = 0;
    for raw in text.lines() {
        let mut current = 0usize;
        let mut line_used = false;
        for word in raw.split_whitespace() {
            let len = word.chars().count();
            if !line_used {
                current = len;
                line_used = true;
                lines += 1;
            } else if current + 1 + len <= columns {
                current += 1 + len;
            } else {
                lines += 1;
                current = len;
            }
            while current > columns {
                lines += 1;
                current -= columns;
            }
        }
    }
    lines
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_whitespace() {
        assert_eq!(normalize_ws("  a \n\n b\tc  "), "a b c");
        assert_eq!(normalize_ws(""), "");
    }

    #[test]
    fn exact_copy_scores_one() {
        let hay = "I looked online. But then I also go to the field to validate what is a problem.";
        assert_eq!(
            fuzzy_containment(hay, "I also go to the field to validate what is a problem"),
            1.0
        );
    }

    #[test]
    fn case_and_punctuation_ignored() {
        assert_eq!(fuzzy_containment("Hello, World! again", "hello world"), 1.0);
    }

    #[test]
    fn fabricated_quote_scores_low() {
        let hay = "We grow cereals and potatoes on around two hundred hectares.";
        assert!(fuzzy_containment(hay, "My robots milk the cows every night automatically") < 0.3);
    }

    #[test]
    fn light_noise_still_matches() {
        let hay = "But then I also go to the field to to validate what is a problem, because obviously digital tools can tell you a lot";
        let quote =
            "I also go to the field to validate what is a problem because obviously digital tools can tell you a lot";
        assert!(fuzzy_contains(hay, quote, 0.8));
    }

    #[test]
    fn empty_needle_is_zero() {
        assert_eq!(fuzzy_containment("abc", "  "), 0.0);
    }

    #[test]
    fn wraps_lines() {
        assert_eq!(wrapped_line_count("", 80), 0);
        assert_eq!(wrapped_line_count("short", 80), 1);
        let long = "word ".repeat(40);
        // 40 words of 4 chars, 16 per 80-column line
        assert_eq!(wrapped_line_count(&long, 80), 3);
        assert_eq!(wrapped_line_count("a\nb", 80), 2);
    }
}
