//! Small text helpers shared across modules.

use std::sync::LazyLock;

use regex::Regex;
use sha2::{Digest, Sha256};

static BLANK_LINE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\n[ \t\r]*\n").unwrap());

/// Whitespace-token word count. Memory length limits and dataset statistics
/// both use this definition.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Lowercase ASCII slug: alphanumerics kept, runs of anything else become `-`.
pub fn slug(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut dash = false;
    for c in text.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
            dash = false;
        } else if !out.is_empty() && !dash {
            out.push('-');
            dash = true;
        }
    }
    while out.ends_with('-') {
        out.pop();
    }
    out
}

pub fn sha256_hex(data: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(data.as_ref()))
}

/// First 8 bytes of SHA-256 as a little-endian integer.
pub fn hash_u64(data: impl AsRef<[u8]>) -> u64 {
    let digest = Sha256::digest(data.as_ref());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Splits on blank lines (a newline, optional horizontal whitespace, newline)
/// and drops empty segments.
pub fn blank_line_segments(text: &str) -> Vec<&str> {
    BLANK_LINE
        .split(text)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_count_is_whitespace_tokens() {
        assert_eq!(word_count("I  am\ta composer.\n"), 4);
        assert_eq!(word_count("   "), 0);
    }

    #[test]
    fn slug_examples() {
        assert_eq!(slug("Beethoven"), "beethoven");
        assert_eq!(slug("Martin Luther King Jr."), "martin-luther-king-jr");
        assert_eq!(slug("  Cleopatra VII "), "cleopatra-vii");
    }

    #[test]
    fn blank_line_split() {
        assert_eq!(blank_line_segments("a\n\nb\n \n\n c \n"), vec!["a", "b", "c"]);
        assert_eq!(blank_line_segments("a\nb"), vec!["a\nb"]);
        assert!(blank_line_segments("").is_empty());
    }
}
