mod common;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use common::{fixture, outline, vocab};
use opmask::frontend::{build_operators, table_builds, RequestDoc};
use opmask::harness::{mock_decode, DecodeConfig};
use opmask::mask::MaskCache;
use opmask::regex::{lower, parse_regex};
use opmask::template::{StructureFactory, TemplateError};
use opmask::vocab::Vocabulary;

#[test]
fn dump_round_trips_and_builds_the_same_tree() {
    let (v, f, doc) = outline();
    let stats = f.stats();
    assert_eq!(stats.structures, f.structure_names().count());
    assert!(stats.terminals >= 3 && stats.placeholders >= 3, "{stats:?}");

    let again = StructureFactory::from_json(&f.to_json(), &v).unwrap();
    assert_eq!(again, f);
    assert_eq!(again.to_json(), f.to_json());
    let tree = |f: &StructureFactory| build_operators(&doc.parse(f).unwrap(), f, &v).unwrap().dump();
    assert_eq!(tree(&again), tree(&f));
}

#[test]
fn dump_rejects_other_vocabularies() {
    let (v, f, _) = outline();
    let digits = vocab("digits.vocab");
    assert!(f.is_compatible(&v));
    assert!(!f.is_compatible(&digits));
    assert!(StructureFactory::from_json(&f.to_json(), &digits).is_err());
    // same size and eos, but two tags trade ids
    let swapped = v
        .to_file_string()
        .replace("<h1>\n", "@@\n")
        .replace("<h2>\n", "<h1>\n")
        .replace("@@\n", "<h2>\n");
    let swapped = Vocabulary::parse(&swapped).unwrap();
    assert_eq!(swapped.len(), v.len());
    assert!(!f.is_compatible(&swapped));
    assert!(matches!(
        StructureFactory::from_json(&f.to_json(), &swapped),
        Err(TemplateError::Dump(m)) if m.contains("does not match")
    ));
    assert!(matches!(
        StructureFactory::from_json("{\"version\": 99}", &v),
        Err(TemplateError::Dump(_))
    ));
}

#[test]
fn instantiate_substitutes_arguments() {
    let (v, f, _) = outline();
    let title = lower(&parse_regex("Intro").unwrap(), &v).unwrap();
    let args = HashMap::from([("title", title)]);
    assert!(f.instantiate("H1", &args).is_some());
    // wrong parameter name
    let bad = HashMap::from([("name", Arc::clone(&args["title"]))]);
    assert!(f.instantiate("H1", &bad).is_none());
    assert!(f.instantiate("NOPE", &args).is_none());
}

#[test]
fn decimal_decode_reuses_masks() {
    let v = vocab("digits.vocab");
    let doc = RequestDoc::load(&fixture("decimal.request.json")).unwrap();
    let f = StructureFactory::empty(&v);
    let cache = MaskCache::new(v.len());
    let cfg = DecodeConfig {
        seed: 1,
        max_tokens: 200,
        eos_bias: 0.0,
    };
    let d = mock_decode(&doc, &f, &v, &cache, &cfg).unwrap();
    assert_eq!(d.tokens.len(), 200);
    let c = d.report.cache;
    // the decimal machine has three distinct masks
    assert!(c.constructions <= 3, "{c:?}");
    assert!(c.hit_rate() >= 0.95, "{c:?}");
}

#[test]
fn online_requests_never_recompile_templates() {
    let (v, f, _) = outline();
    let parses = opmask::earley::thread_invocations();
    for i in 0..1000 {
        let doc = RequestDoc {
            format: format!("SECTION(title={{t}}) SUBSECTION(title=\"M{i}\")"),
            args: BTreeMap::from([("t".to_string(), format!("T{i}"))]),
        };
        build_operators(&doc.parse(&f).unwrap(), &f, &v).unwrap();
    }
    assert_eq!(opmask::earley::thread_invocations(), parses);
    // the request-grammar table is built once per process
    assert_eq!(table_builds(), 1);
}
