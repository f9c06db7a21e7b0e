use std::path::Path;

use vflsim_core::data::{load_idx, write_idx};
use vflsim_core::Error;

fn raw(path: &Path, header: &[u32], body: &[u8]) {
    let mut bytes: Vec<u8> = header.iter().flat_map(|v| v.to_be_bytes()).collect();
    bytes.extend_from_slice(body);
    std::fs::write(path, bytes).unwrap();
}

fn format_offset(e: Error) -> u64 {
    match e {
        Error::Format { offset, .. } => offset,
        other => panic!("expected a format error, got {other}"),
    }
}

#[test]
fn reads_two_image_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
    raw(&img, &[0x803, 2, 2, 2], &[0, 255, 51, 102, 255, 0, 0, 0]);
    raw(&lab, &[0x801, 2], &[1, 0]);
    let ds = load_idx(&img, &lab).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.dim(), 4);
    assert_eq!(ds.labels, vec![1, 0]);
    assert_eq!(ds.n_classes, 2);
    assert_eq!(ds.features.row(0), &[0.0, 1.0, 0.2, 0.4]);
    assert_eq!(ds.features.row(1), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn swapped_magic_is_reported_at_offset_zero() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
    raw(&img, &[0x803, 1, 1, 1], &[7]);
    raw(&lab, &[0x803, 1], &[0]);
    let e = load_idx(&img, &lab).unwrap_err();
    assert!(e.to_string().contains("lab"));
    assert_eq!(format_offset(e), 0);
}

#[test]
fn count_mismatch_points_at_label_count() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
    raw(&img, &[0x803, 2, 1, 1], &[1, 2]);
    raw(&lab, &[0x801, 3], &[0, 1, 0]);
    assert_eq!(format_offset(load_idx(&img, &lab).unwrap_err()), 4);
}

#[test]
fn truncated_images_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
    raw(&img, &[0x803, 2, 2, 2], &[1, 2, 3]);
    raw(&lab, &[0x801, 2], &[0, 1]);
    assert_eq!(format_offset(load_idx(&img, &lab).unwrap_err()), 19);

    raw(&img, &[0x803, 2], &[]);
    assert_eq!(format_offset(load_idx(&img, &lab).unwrap_err()), 8);
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let e = load_idx(dir.path().join("nope"), dir.path().join("nada")).unwrap_err();
    assert!(matches!(e, Error::Io { .. }));
    assert!(e.is_validation());
}

#[test]
fn written_files_read_back() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
    let pixels: Vec<u8> = (0..3 * 6).map(|i| (i * 14) as u8).collect();
    write_idx(&img, &lab, 2, 3, &pixels, &[0, 2, 1]).unwrap();
    let ds = load_idx(&img, &lab).unwrap();
    assert_eq!(ds.labels, vec![0, 2, 1]);
    assert_eq!(ds.dim(), 6);
    let back: Vec<u8> = ds.features.as_slice().iter().map(|v| (v * 255.0).round() as u8).collect();
    assert_eq!(back, pixels);
    assert!(write_idx(&img, &lab, 2, 3, &pixels[1..], &[0, 2, 1]).is_err());
}
