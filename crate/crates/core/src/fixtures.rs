//! Small synthetic corpora bundled with the library.
//!
//! `char_ptb*` use 51 distinct characters, `bytes_205` uses 205 distinct
//! bytes, and `words` is a word-level text where every line starts with
//! "The". Regenerate with `cargo run -p mslm --example make_fixtures`.

pub const CHAR_PTB: &[u8] = include_bytes!("../fixtures/char_ptb.txt");
pub const CHAR_PTB_10K: &[u8] = include_bytes!("../fixtures/char_ptb_10k.txt");
pub const CHAR_PTB_VALID: &[u8] = include_bytes!("../fixtures/char_ptb_valid.txt");
pub const BYTES_205: &[u8] = include_bytes!("../fixtures/bytes_205.txt");
pub const WORDS: &[u8] = include_bytes!("../fixtures/words.txt");

pub const NAMES: [&str; 5] = ["char_ptb", "char_ptb_10k", "char_ptb_valid", "bytes_205", "words"];

pub fn by_name(name: &str) -> Option<&'static [u8]> {
    Some(match name {
        "char_ptb" => CHAR_PTB,
        "char_ptb_10k" => CHAR_PTB_10K,
        "char_ptb_valid" => CHAR_PTB_VALID,
        "bytes_205" => BYTES_205,
        "words" => WORDS,
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn distinct(b: &[u8]) -> usize {
        b.iter().collect::<BTreeSet<_>>().len()
    }

    #[test]
    fn alphabet_sizes() {
        assert_eq!(distinct(CHAR_PTB), 51);
        assert_eq!(distinct(CHAR_PTB_10K), 51);
        assert_eq!(distinct(BYTES_205), 205);
        assert!(CHAR_PTB_10K.len() <= 10_000 && CHAR_PTB_10K.len() > 9_000);
        assert!(CHAR_PTB.starts_with(CHAR_PTB_10K));
    }

    #[test]
    fn names_resolve() {
        for n in NAMES {
            assert!(by_name(n).is_some_and(|b| !b.is_empty()));
        }
        assert!(by_name("nope").is_none());
    }
}
