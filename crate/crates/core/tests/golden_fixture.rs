//! The hand-built fixture: W_V = diag(4,3,2,1) on every layer, so concept
//! paths are `σ ⊙ v` and every score has a closed form.

use std::path::PathBuf;

use concept_tree::analysis::{delta_h_alignment, pair_embedding_distance, value_similarity_curve};
use concept_tree::capture::{read_bundle, validate_bundle, write_bundle, CaptureBundle};
use concept_tree::concept::{AnalysisParams, Analyzer, Mode};
use concept_tree::tree::{build_tree, ConceptPairSpec, ConceptTree};

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden_bundle")
}

fn load() -> CaptureBundle {
    read_bundle(&fixture()).unwrap()
}

fn pairs() -> Vec<ConceptPairSpec> {
    let text = std::fs::read_to_string(fixture().with_file_name("golden_pairs.json")).unwrap();
    let inline: Vec<String> = serde_json::from_str(&text).unwrap();
    inline
        .iter()
        .map(|s| ConceptPairSpec::parse_inline(s, "base").unwrap())
        .collect()
}

#[test]
fn loads_without_violations() {
    let b = load();
    assert!(validate_bundle(&b).is_empty());
    assert_eq!(b.n_layers(), 6);
    assert_eq!(b.traces.len(), 5);
    assert_eq!(b.trace("students").unwrap().edited_token_index, Some(10));
}

#[test]
fn rewrite_is_byte_identical() {
    let b = load();
    let dir = tempfile::tempdir().unwrap();
    write_bundle(&b, dir.path()).unwrap();
    for entry in std::fs::read_dir(fixture()).unwrap() {
        let entry = entry.unwrap();
        let name = entry.file_name();
        let ours = std::fs::read(dir.path().join(&name)).unwrap();
        let theirs = std::fs::read(entry.path()).unwrap();
        assert_eq!(ours, theirs, "{name:?}");
    }
    assert_eq!(
        std::fs::read_dir(dir.path()).unwrap().count(),
        std::fs::read_dir(fixture()).unwrap().count()
    );
}

#[test]
fn closed_form_scores() {
    let b = load();
    let analyzer = Analyzer::new(&b);
    let res: Vec<_> = analyzer
        .analyze_many(&pairs(), AnalysisParams::default(), 2)
        .into_iter()
        .map(Result::unwrap)
        .collect();
    let norm2 = 16.0 + 9.0 + 4.0 + 1.0;
    let angry = (16.0 + 9.0 + 4.0 + 1.125) / (norm2 * (29.0 + 1.125f64 * 1.125)).sqrt();
    let expect: [(&str, [f64; 6], Option<usize>); 4] = [
        ("mayor/citizen", [1.0, 1.0, 0.4, 0.4, 0.4, 0.4], Some(2)),
        (
            "free/expensive",
            [1.0, 1.0, 22.0 / 30.0, 22.0 / 30.0, 22.0 / 30.0, 22.0 / 30.0],
            Some(2),
        ),
        (
            "everyone/students",
            [1.0, 1.0, 1.0, 1.0, 1.0, -2.0 / 30.0],
            Some(5),
        ),
        (
            "happy/angry",
            [1.0, angry, angry, angry, angry, angry],
            None,
        ),
    ];
    for (a, (label, scores, branch)) in res.iter().zip(expect) {
        assert_eq!(a.pair_label, label);
        assert_eq!(a.branching_layer, branch, "{label}");
        for (g, w) in a.scores.iter().zip(scores) {
            assert!((g - w).abs() < 1e-12, "{label}: {g} vs {w}");
        }
    }
}

#[test]
fn tree_matches_golden_shape() {
    let b = load();
    let analyzer = Analyzer::new(&b);
    let res: Vec<_> = analyzer
        .analyze_many(&pairs(), AnalysisParams::default(), 1)
        .into_iter()
        .map(Result::unwrap)
        .collect();
    let tree = build_tree(&res).unwrap();
    let json = tree.to_json_value();
    assert_eq!(
        json,
        serde_json::json!({
            "root": {"layer": 0, "remaining": 4},
            "branches": [
                {"layer": 2, "pairs": ["free/expensive", "mayor/citizen"], "remaining": 2},
                {"layer": 5, "pairs": ["everyone/students"], "remaining": 1}
            ],
            "inseparable": ["happy/angry"]
        })
    );
    assert_eq!(ConceptTree::from_json(&tree.to_json()).unwrap(), tree);
}

#[test]
fn raw_mode_on_fixture() {
    let b = load();
    let params = AnalysisParams::resolve(None, None, Mode::Raw).unwrap();
    assert_eq!(params.tau, 0.99);
    let res: Vec<_> = Analyzer::new(&b)
        .analyze_many(&pairs(), params, 1)
        .into_iter()
        .map(Result::unwrap)
        .collect();
    let branches: Vec<_> = res.iter().map(|a| a.branching_layer).collect();
    assert_eq!(branches, [Some(2), Some(2), Some(5), None]);
    assert!((res[0].scores[2] - 0.5).abs() < 1e-12);
}

#[test]
fn diagnostics_on_fixture() {
    let b = load();
    let v = value_similarity_curve(&b, "base", "citizen").unwrap();
    assert_eq!(v.values.len(), 6);
    assert!(v.values.iter().all(|x| (-1.0..=1.0).contains(x)));
    assert!((v.values[2] - 0.5).abs() < 1e-12);

    let h = delta_h_alignment(&b, "base", "citizen").unwrap();
    assert_eq!(h.values.len(), 5);
    assert!(h.values.iter().all(|x| (-1.0..=1.0).contains(x)));

    // base carries no edited-token embedding
    assert!(pair_embedding_distance(&b, &pairs()[0]).is_err());
}
