mod common;

use std::collections::BTreeSet;

use common::{fixture, vocab};
use opmask::vocab::{CharClass, TokenId, Vocabulary};
use proptest::prelude::*;
use regex::bytes::Regex;

/// Byte-regex equivalent of a class, anchored to match whole non-empty tokens.
fn class_oracle(cls: &CharClass) -> Regex {
    let set = |m: &BTreeSet<u8>| m.iter().map(|b| format!(r"\x{b:02x}")).collect::<String>();
    let body = match cls {
        CharClass::Digit => "[0-9]".to_string(),
        CharClass::Word => "[0-9A-Za-z_]".to_string(),
        CharClass::Whitespace => r"[ \t\n\r]".to_string(),
        CharClass::Set(m) => format!("[{}]", set(m)),
        CharClass::NotSet(m) if m.is_empty() => r"[\x00-\x7f]".to_string(),
        CharClass::NotSet(m) => format!(r"[\x00-\x7f&&[^{}]]", set(m)),
        CharClass::Any => r"(?s:.)".to_string(),
    };
    Regex::new(&format!(r"(?-u)\A{body}+\z")).unwrap()
}

fn classes() -> Vec<CharClass> {
    let s = |b: &[u8]| b.iter().copied().collect::<BTreeSet<u8>>();
    vec![
        CharClass::Digit,
        CharClass::Word,
        CharClass::Whitespace,
        CharClass::Any,
        CharClass::Set(s(b"abc")),
        CharClass::Set(s(b"<>/")),
        CharClass::NotSet(s(b"<")),
        CharClass::NotSet(s(b" \n")),
        CharClass::NotSet(BTreeSet::new()),
    ]
}

#[test]
fn classify_matches_regex_oracle() {
    for name in ["synthetic1000.vocab", "outline.vocab", "chars12.vocab"] {
        let v = vocab(name);
        for cls in classes() {
            let oracle = class_oracle(&cls);
            let expected: Vec<TokenId> = (0..v.len() as TokenId)
                .filter(|&t| t != v.eos_id() && oracle.is_match(v.token(t).unwrap()))
                .collect();
            assert_eq!(v.classify(&cls).ids(), &expected[..], "{name} {cls:?}");
        }
    }
}

#[test]
fn vocab_files_round_trip() {
    for name in ["synthetic1000.vocab", "outline.vocab", "chars12.vocab", "digits.vocab"] {
        let v = vocab(name);
        let again = Vocabulary::parse(&v.to_file_string()).unwrap();
        assert_eq!(v, again, "{name}");
        // the fixture itself is already in canonical form
        assert_eq!(std::fs::read_to_string(fixture(name)).unwrap(), v.to_file_string(), "{name}");
    }
}

#[test]
fn tokenize_reports_first_bad_offset() {
    let v = vocab("digits.vocab");
    assert_eq!(v.tokenize(b"12.5"), Ok(vec![1, 2, 10, 5]));
    assert_eq!(v.tokenize(b"12x5"), Err(2));
}

proptest! {
    #[test]
    fn tokenize_inverts_detokenize(ids in prop::collection::vec(0u32..999, 0..40)) {
        let v = vocab("synthetic1000.vocab");
        let ids: Vec<TokenId> = ids.into_iter().filter(|t| *t != v.eos_id()).collect();
        let text = v.detokenize(&ids);
        let again = v.tokenize(&text).unwrap();
        // segmentation may differ, the bytes may not
        prop_assert_eq!(v.detokenize(&again), text);
    }

    #[test]
    fn escape_round_trips(bytes in prop::collection::vec(any::<u8>(), 0..24)) {
        let e = opmask::vocab::escape(&bytes);
        prop_assert!(!e.contains('\n'));
        prop_assert_eq!(opmask::vocab::unescape(&e).unwrap(), bytes);
    }
}
