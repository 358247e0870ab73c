use std::path::PathBuf;

use tsf_core::data_io::{load_dataset, DatasetKind};
use tsf_core::BBox;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

#[test]
fn mini_vot_loads_both_layouts() {
    let load = load_dataset(&fixture("mini_vot"), DatasetKind::VotTir).unwrap();
    assert!(load.warnings.is_empty(), "{:?}", load.warnings);
    let ids: Vec<_> = load.records.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids, ["seq_a", "seq_b"]);

    let a = &load.records[0];
    assert_eq!(a.len(), 5);
    assert_eq!(a.gt[2], Some(BBox::from_corner(24.0, 16.0, 16.0, 12.0).unwrap()));
    assert!(a.attributes.contains("motion"));
    let f = a.frame(0).unwrap();
    assert_eq!((f.width, f.height), (64, 48));

    let b = &load.records[1];
    assert_eq!(b.len(), 5);
    assert_eq!(b.gt[0], Some(BBox::from_corners(30.0, 20.0, 42.0, 32.0).unwrap()));
    assert_eq!(b.gt[3], None);
    assert_eq!(b.valid_mask(), [true, true, true, false, true]);
    assert!(b.attributes.contains("occlusion") && b.attributes.contains("size_change"));
    assert_eq!(b.frame_iter().count(), 5);
}

#[test]
fn mini_gtot_uses_the_thermal_half() {
    let load = load_dataset(&fixture("mini_gtot"), DatasetKind::Gtot).unwrap();
    assert_eq!(load.records.len(), 1);
    let r = &load.records[0];
    assert_eq!(r.id, "pair_a");
    assert_eq!(r.gt[0], Some(BBox::from_corners(10.0, 12.0, 26.0, 24.0).unwrap()));
    let f = r.frame(0).unwrap();
    // thermal frames are grayscale, replicated to three identical channels on load
    assert_eq!((f.width, f.height), (48, 40));
    assert_eq!(f.channel(0), f.channel(1));
    assert_eq!(f.channel(0), f.channel(2));
}

#[test]
fn wrong_layout_is_reported_not_fatal() {
    let load = load_dataset(&fixture("mini_gtot"), DatasetKind::VotTir).unwrap();
    assert!(load.records.is_empty());
    assert!(!load.warnings.is_empty());
}
