mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tensorize::model::{parse_model, serialize_model, ModelError, ModelKind};

fn any_kind() -> impl Strategy<Value = ModelKind> {
    proptest::sample::select(ModelKind::ALL.to_vec())
}

#[test]
fn fixtures_round_trip() {
    for (name, m) in common::fixtures() {
        let text = serialize_model(&m);
        assert_eq!(parse_model(&text).unwrap(), m, "{name}");
        assert_eq!(serialize_model(&parse_model(&text).unwrap()), text, "{name}");
    }
}

#[test]
fn bad_documents_name_the_failing_path() {
    let cases = [
        (r#"{"format_version":2,"model_type":"binarizer","n_features":1,"threshold":0}"#, "$.format_version"),
        (r#"{"format_version":1,"model_type":"svr_rbf","n_features":1}"#, "$.model_type"),
        (r#"{"format_version":1,"model_type":"binarizer","n_features":1}"#, "$.threshold"),
        (
            r#"{"format_version":1,"model_type":"decision_tree_regressor","n_features":1,
               "nodes":[{"feature":3,"threshold":0,"left":1,"right":2},{"leaf":[1]},{"leaf":[2]}]}"#,
            "$.nodes[0].feature",
        ),
        (r#"{"format_version":1,"model_type":"standard_scaler","n_features":2,"mean":[0,0],"scale":[1]}"#, "$.scale"),
    ];
    for (text, path) in cases {
        let e = parse_model(text).unwrap_err();
        assert!(e.path().starts_with(path), "{text}: got {e}");
    }
    assert!(matches!(parse_model("not json"), Err(ModelError::Schema { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn random_models_round_trip(kind in any_kind(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = common::random_model(kind, &mut rng);
        let text = serialize_model(&m);
        let back = parse_model(&text).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(serialize_model(&back), text);
    }

    #[test]
    fn truncated_documents_never_panic(kind in any_kind(), seed in any::<u64>(), cut in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = serialize_model(&common::random_model(kind, &mut rng));
        let at = (text.len() as f64 * cut) as usize;
        prop_assert!(parse_model(&text[..at]).is_err());
    }

    #[test]
    fn mutated_documents_never_panic(kind in any_kind(), seed in any::<u64>(), pos in any::<prop::sample::Index>(), byte in 0x20u8..0x7f) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bytes = serialize_model(&common::random_model(kind, &mut rng)).into_bytes();
        let i = pos.index(bytes.len());
        bytes[i] = byte;
        if let Ok(text) = String::from_utf8(bytes) {
            if let Ok(m) = parse_model(&text) {
                prop_assert!(m.validate().is_ok());
            }
        }
    }
}
