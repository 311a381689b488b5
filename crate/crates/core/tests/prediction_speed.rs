use std::time::Instant;

use ordchange_core::model::{init_params, predict};
use ordchange_core::{BscanRecord, ChangeClass, ClassLabel, Task};

#[test]
fn thousand_records_in_under_a_second() {
    let params = init_params(&[32, 64, 3], 0.0, 1).unwrap();
    let label = ClassLabel::new(Task::T2, ChangeClass::Stable).unwrap();
    let records: Vec<BscanRecord> = (0..1000)
        .map(|i| BscanRecord {
            patient_id: format!("P{i}"),
            visit_id: "V00".into(),
            volume_id: format!("P{i}_V00"),
            bscan_index: 0,
            features: (0..32).map(|j| ((i * 31 + j) % 17) as f64 / 17.0).collect(),
            label,
        })
        .collect();
    let start = Instant::now();
    let out = predict(&params, &records).unwrap();
    let elapsed = start.elapsed();
    assert_eq!(out.len(), 1000);
    assert!(elapsed.as_secs_f64() < 1.0, "{elapsed:?}");
}
