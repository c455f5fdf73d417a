//! MDET container: round trips, corruption handling, frozen golden bytes
//! and files produced by another writer.

mod common;

use std::io::Cursor;

use common::*;
use mde_core::bn::batch_stats;
use mde_core::mdet::{
    dataset_from_record, from_bytes, model_from_record, read_mdet, stats_only_view, to_bytes,
    trace_activations, write_mdet, MdetReader, Metadata, CREATOR,
};

#[test]
fn every_kind_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    for (i, record) in sample_records(3).into_iter().enumerate() {
        let bytes = to_bytes(&record).unwrap();
        assert_eq!(from_bytes(&bytes).unwrap(), record, "record {i}");
        let path = dir.path().join(format!("r{i}.mdet"));
        write_mdet(&record, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
        assert_eq!(read_mdet(&path).unwrap(), record);
    }
}

#[test]
fn decoded_records_rebuild_their_objects() {
    let records = sample_records(5);
    let model = model_from_record(&records[0]).unwrap();
    assert_eq!(
        model_from_record(&mde_core::mdet::model_record(&model, "toy").unwrap()).unwrap(),
        model
    );
    assert_eq!(trace_activations(&records[1]).unwrap().len(), 2);
    let (images, labels) = dataset_from_record(&records[2]).unwrap();
    assert_eq!(labels.unwrap().len(), images.batch());
}

#[test]
fn corrupted_files_never_panic_or_lie() {
    let tally = fuzz_campaign(1000);
    assert_eq!(tally.failures, 0, "{tally:?}");
    assert!(tally.rejected > 500, "{tally:?}");
}

#[test]
fn golden_files_are_stable() {
    bless_goldens();
    assert!(
        golden_mismatches().is_empty(),
        "{:?}; rerun with MDE_BLESS=1 after an intended change",
        golden_mismatches()
    );
}

/// Header bytes spelled out by hand, the way an independent producer with
/// its own JSON encoder would write them.
fn foreign_trace_bytes(header: &str) -> Vec<u8> {
    let mut out = b"MDET".to_vec();
    out.extend(1u32.to_le_bytes());
    out.extend((header.len() as u64).to_le_bytes());
    out.extend(header.as_bytes());
    for v in [1.0f32, -2.0] {
        out.extend(v.to_le_bytes());
    }
    out
}

fn foreign_expected() -> mde_core::mdet::MdetRecord {
    let mut r = golden_trace_record();
    r.metadata.creator = "zoo-exporter 0.3".into();
    r
}

#[test]
fn compact_foreign_header_matches_writer() {
    let header = concat!(
        r#"{"kind":"trace","metadata":{"model_id":"m","dataset_id":"d","eps":0.001,"retain_alpha":0.9,"#,
        r#""creator":"zoo-exporter 0.3","seed":7},"entries":[{"name":"act.b0.l0","role":"activation","#,
        r#""layer_index":0,"dtype":"f32","shape":[1,1,1,2],"byte_offset":0,"byte_len":8}]}"#
    );
    let bytes = foreign_trace_bytes(header);
    assert_eq!(from_bytes(&bytes).unwrap(), foreign_expected());
    assert_eq!(to_bytes(&foreign_expected()).unwrap(), bytes);
}

#[test]
fn spaced_and_reordered_foreign_header_is_read() {
    let header = r#"{"entries": [{"byte_len": 8, "byte_offset": 0, "dtype": "f32", "layer_index": 0,
        "name": "act.b0.l0", "role": "activation", "shape": [1, 1, 1, 2]}],
        "kind": "trace", "metadata": {"creator": "zoo-exporter 0.3", "dataset_id": "d", "eps": 1e-3,
        "model_id": "m", "retain_alpha": 0.9, "seed": 7}}"#;
    assert_eq!(
        from_bytes(&foreign_trace_bytes(header)).unwrap(),
        foreign_expected()
    );
}

#[test]
fn writer_stamps_its_creator_by_default() {
    assert!(Metadata::default().creator.starts_with("mde-core "));
    assert_eq!(Metadata::default().creator, CREATOR);
}

#[test]
fn stats_view_matches_full_read() {
    for seed in 0..10 {
        let record = &sample_records(seed)[1];
        let bytes = to_bytes(record).unwrap();
        let mut reader = MdetReader::new(Cursor::new(bytes)).unwrap();
        let view = stats_only_view(&mut reader).unwrap();
        let full = trace_activations(record).unwrap();
        for (vb, fb) in view.iter().zip(&full) {
            for (v, x) in vb.iter().zip(fb) {
                let s = batch_stats(x).unwrap();
                for k in 0..s.channels() {
                    assert!((v.mean[k] - s.mean[k]).abs() <= 1e-9);
                    assert!((v.var[k] - s.var[k]).abs() <= 1e-9);
                }
            }
        }
    }
}
