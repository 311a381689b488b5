use ordchange_cli::config::KvConfig;
use ordchange_cli::io::{read_predictions, write_predictions, PredictionRow};
use ordchange_core::{ProbVector, RecordKey};
use proptest::prelude::*;

fn row() -> impl Strategy<Value = PredictionRow> {
    (
        "[A-Za-z0-9_, \"]{1,12}",
        prop::collection::vec(1e-4f64..1.0, 3),
        0u32..200,
        prop::option::of(0usize..3),
        prop::option::of(0usize..3),
    )
        .prop_map(|(case, w, b, truth, fin)| {
            let s: f64 = w.iter().sum();
            let probs = ProbVector::renormalized(w.iter().map(|v| v / s).collect(), 1e-9).unwrap();
            let pred = probs.argmax();
            PredictionRow {
                key: RecordKey { case_id: case, patient_id: "P0001".into(), volume_id: "P0001_V00".into(), bscan_index: b },
                true_label: truth,
                probs,
                pred_label: pred,
                final_label: fin,
                postprocessed: fin.map(|f| f != pred),
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn predictions_round_trip(rows in prop::collection::vec(row(), 1..20)) {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("p.csv");
        write_predictions(&path, &rows).unwrap();
        let back = read_predictions(&path).unwrap();
        prop_assert_eq!(back.len(), rows.len());
        let with_final = rows.iter().any(|r| r.final_label.is_some());
        for (a, b) in rows.iter().zip(&back) {
            prop_assert_eq!(&a.key, &b.key);
            prop_assert_eq!(a.true_label, b.true_label);
            prop_assert_eq!(a.pred_label, b.pred_label);
            prop_assert_eq!(a.label(), b.label());
            if with_final {
                prop_assert_eq!(a.postprocessed.unwrap_or(false), b.postprocessed.unwrap());
            }
            for (x, y) in a.probs.as_slice().iter().zip(b.probs.as_slice()) {
                prop_assert!((x - y).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn unknown_keys_are_reported_with_line(pad in 0usize..5, key in "[a-z]{3,8}_zz") {
        let text = format!("{}{key} = 1\n", "# c\n".repeat(pad));
        let cfg = KvConfig::parse(&text, "x.cfg").unwrap();
        let err = cfg.finish().unwrap_err().to_string();
        prop_assert!(err.contains(&format!("x.cfg:{}", pad + 1)), "{}", err);
        prop_assert!(err.contains(&key), "{}", err);
    }
}
