//! Library-level pipeline: sessions through extraction, prior and every
//! corpus variant, all against the offline backend.

use std::collections::BTreeSet;
use std::fs;
use std::sync::Arc;

use approx::assert_abs_diff_eq;
use persona_core::dataset::{build, to_jsonl, BuildConfig, BuildInputs, Variant};
use persona_core::extraction::{joint_posterior_mass, posterior_mass, Extractor};
use persona_core::ingest::{load_sessions, pair_targets, ScrubRules};
use persona_core::llm::{BackendConfig, LlmClient, MockRules, MockTransport};
use persona_core::prior::{build_prior, prior_log_mass};
use persona_core::schema::{default_schema, Axis, Provenance};

const SESSIONS: &str = r#"{"agent_id":"a","session_id":"s1","turns":[{"role":"user","text":"hey, mail me at x@y.org"},{"role":"ai","text":"Yehei! swimming later 😂"},{"role":"user","text":"cool"},{"role":"ai","text":"yehei, see you, bestie"}]}
{"agent_id":"b","session_id":"s2","turns":[{"role":"user","text":"hi"},{"role":"ai","text":"hmph, rival. painting now"}]}
{"agent_id":"b","session_id":"s3","turns":[{"role":"user","text":"again?"},{"role":"ai","text":"hmph"}]}
"#;

fn client() -> LlmClient {
    let rules = MockRules::default()
        .with_rule("yehei", "catchphrase", "yehei")
        .with_rule("hmph", "catchphrase", "hmph")
        .with_rule("swimming", "hobby", "swimming")
        .with_rule("painting", "hobby", "painting")
        .with_rule("😂", "frequent_emoji", "😂")
        .with_rule("bestie", "relationship", "friend")
        .with_rule("rival", "relationship", "enemy");
    LlmClient::with_transport(
        BackendConfig::default(),
        Arc::new(MockTransport::new(rules)),
    )
    .unwrap()
}

#[test]
fn sessions_to_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sessions.jsonl");
    fs::write(&path, SESSIONS).unwrap();
    let sessions = load_sessions(&path, &ScrubRules::defaults(), true)
        .unwrap()
        .sessions;
    assert!(sessions[0].turns[0].text.contains("[EMAIL]"));
    let pairs: Vec<_> = sessions
        .iter()
        .flat_map(|s| pair_targets(s, None).unwrap())
        .collect();
    assert_eq!(pairs.len(), 4);

    let schema = default_schema();
    let client = client();
    let extractor = Extractor::new(&client, &schema);
    let records: Vec<_> = pairs
        .iter()
        .map(|p| extractor.extract_pair(p).unwrap())
        .collect();
    // the whole prefix plus target is visible to the extractor
    let last_a = records
        .iter()
        .find(|r| r.session_id == "s1" && r.turn_index == 3)
        .unwrap();
    assert_eq!(last_a.assignment.get("hobby").unwrap().as_str(), "swimming");
    assert_eq!(
        last_a.assignment.get("relationship").unwrap().as_str(),
        "friend"
    );
    assert_eq!(
        last_a.assignment.provenance("tone"),
        Some(Provenance::Absent)
    );

    let prior = build_prior(&records, &schema, "test").unwrap();
    let cp = prior.dimension("catchphrase").unwrap();
    assert_eq!(cp.total, 4);
    assert_abs_diff_eq!(cp.entries[0].prob, 0.5, epsilon = 1e-12);

    // joint mass is the product of per-dimension masses
    let a = &last_a.assignment;
    let tone_support: Vec<_> = prior.dimension("tone").unwrap().support().collect();
    assert!(tone_support.is_empty());
    let joint = joint_posterior_mass(
        &schema,
        &[("hobby", "swimming"), ("catchphrase", "yehei")],
        a,
        &prior,
    )
    .unwrap();
    assert_abs_diff_eq!(joint, 1.0);
    let b = &records
        .iter()
        .find(|r| r.session_id == "s3")
        .unwrap()
        .assignment;
    let hobby = posterior_mass(&schema, "hobby", "painting", b, &prior).unwrap();
    assert_abs_diff_eq!(
        hobby,
        prior.dimension("hobby").unwrap().entries[0].prob,
        epsilon = 1e-12
    );
    // yehei 1/2, swimming 2/3, the only emoji 1, friend 1/2
    let expect = 0.5f64.ln() + (2.0f64 / 3.0).ln() + 1f64.ln() + 0.5f64.ln();
    assert_abs_diff_eq!(prior_log_mass(a, &prior).unwrap(), expect, epsilon = 1e-12);

    let analyses: Vec<_> = pairs
        .iter()
        .map(|p| extractor.analyze_pair(p).unwrap())
        .collect();
    let inputs = BuildInputs {
        pairs: &pairs,
        extractions: &records,
        analyses: &analyses,
        prior: Some(&prior),
        schema: &schema,
    };
    for variant in [
        Variant::Ft,
        Variant::PFt,
        Variant::SpFt,
        Variant::Unstructured,
    ] {
        let out = build(&inputs, &BuildConfig::new(variant, 1)).unwrap();
        assert_eq!(out.examples.len(), 4);
        for ex in &out.examples {
            assert_eq!(ex.messages.last().unwrap().role, "user");
            assert!(ex.messages.len() % 2 == 1);
        }
    }

    let sp = build(
        &inputs,
        &BuildConfig::new(Variant::SpFt, 1).excluding(Axis::Talking),
    )
    .unwrap();
    let talking: BTreeSet<&str> = schema.axis_keys(Axis::Talking).into_iter().collect();
    for ex in &sp.examples {
        assert!(ex
            .meta
            .provenance
            .keys()
            .all(|k| !talking.contains(k.as_str())));
    }
    // dimensions nobody ever reported stay absent and are counted
    assert_eq!(sp.unfilled.get("personality"), Some(&4));
    let again = build(
        &inputs,
        &BuildConfig::new(Variant::SpFt, 1).excluding(Axis::Talking),
    )
    .unwrap();
    assert_eq!(to_jsonl(&sp.examples), to_jsonl(&again.examples));
}
