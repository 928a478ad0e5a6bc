//! Small text helpers shared by the pipeline and the mock backends.

/// Collapses every whitespace run to a single space and trims the ends.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// True if `needle` occurs in `haystack` once whitespace is normalized on both sides.
pub fn contains_normalized(haystack: &str, needle: &str) -> bool {
    let needle = normalize_whitespace(needle);
    !needle.is_empty() && normalize_whitespace(haystack).contains(&needle)
}

/// Splits on `.`, `!` or `?` followed by whitespace. Keeps the terminator.
pub fn split_sentences(text: &str) -> Vec<String> {
    let text = normalize_whitespace(text);
    let mut out = Vec::new();
    let mut start = 0;
    let bytes = text.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        let end_of_sentence = matches!(b, b'.' | b'!' | b'?') && bytes.get(i + 1).map_or(true, |&n| n == b' ');
        if end_of_sentence {
            let s = text[start..=i].trim();
            if !s.is_empty() {
                out.push(s.to_string());
            }
            start = i + 1;
        }
    }
    let rest = text[start..].trim();
    if !rest.is_empty() {
        out.push(rest.to_string());
    }
    out
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sentences() {
        assert_eq!(
            split_sentences("One two.  Three?\nFour! tail"),
            vec!["One two.", "Three?", "Four!", "tail"]
        );
        assert_eq!(split_sentences("Version 1.5 works."), vec!["Version 1.5 works."]);
        assert!(split_sentences("   ").is_empty());
    }

    #[test]
    fn normalized_containment() {
        assert!(contains_normalized("A  b\nc. D.", "b c."));
        assert!(!contains_normalized("abc", ""));
    }

    #[test]
    fn fnv_known_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }
}
