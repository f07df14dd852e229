//! String normalization and token-set matching shared by extraction,
//! decoding and correctness checks.

use std::collections::BTreeSet;

use unicode_normalization::UnicodeNormalization;

/// NFC, lowercase, trimmed of surrounding whitespace, punctuation and
/// markdown emphasis. Inner characters are left alone.
pub fn normalize(s: &str) -> String {
    let lowered: String = s.nfc().collect::<String>().to_lowercase();
    lowered
        .trim_matches(|c: char| c.is_whitespace() || is_decoration(c))
        .to_string()
}

fn is_decoration(c: char) -> bool {
    c.is_ascii_punctuation() || matches!(c, '“' | '”' | '‘' | '’' | '«' | '»' | '…')
}

/// Lowercased alphanumeric word tokens.
pub fn tokens(s: &str) -> BTreeSet<String> {
    let lowered: String = s.nfc().collect::<String>().to_lowercase();
    lowered
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// True when every token of `needle` appears among the tokens of `haystack`.
/// An empty needle never matches.
pub fn token_set_match(needle: &str, haystack: &str) -> bool {
    let want = tokens(needle);
    if want.is_empty() {
        return false;
    }
    let have = tokens(haystack);
    want.is_subset(&have)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_strips_emphasis_and_case() {
        assert_eq!(normalize("  **Ingmar Bergman**. "), "ingmar bergman");
        assert_eq!(normalize("\"Yes, clearly.\""), "yes, clearly");
        assert_eq!(normalize("X"), "x");
    }

    #[test]
    fn normalize_composes_unicode() {
        // "e" + combining acute vs precomposed
        assert_eq!(normalize("Ame\u{301}lie"), normalize("Amélie"));
    }

    #[test]
    fn token_set_ignores_order_and_punctuation() {
        assert!(token_set_match("bergman, ingmar", "Ingmar Bergman"));
        assert!(token_set_match("noam chomsky", "It is Noam Chomsky."));
        assert!(!token_set_match("noam chomsky", "Noam"));
        assert!(!token_set_match("", "anything"));
    }
}
