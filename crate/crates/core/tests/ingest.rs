use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use dither_core::error::IngestError;
use dither_core::nn::{load_dir, load_idx, Split, IMAGE_MAGIC, LABEL_MAGIC};
use dither_core::Error;
use flate2::write::GzEncoder;
use flate2::Compression;

fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [IMAGE_MAGIC, count, rows, cols] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, bytes).unwrap();
    path
}

#[test]
fn all_zero_image_loads_as_zeros() {
    let dir = tempfile::tempdir().unwrap();
    let img = write(dir.path(), "img", &idx_images(1, 28, 28, &[0; 784]));
    let lab = write(dir.path(), "lab", &idx_labels(&[3]));
    let ds = load_idx(&img, &lab).unwrap();
    assert_eq!(ds.len(), 1);
    assert_eq!(ds.features(), 784);
    assert!(ds.image(0).iter().all(|&p| p == 0.0));
    assert_eq!(ds.labels(), &[3]);
}

#[test]
fn pixels_scale_to_unit_interval() {
    let dir = tempfile::tempdir().unwrap();
    let img = write(dir.path(), "img", &idx_images(2, 1, 2, &[0, 255, 51, 102]));
    let lab = write(dir.path(), "lab", &idx_labels(&[0, 9]));
    let ds = load_idx(&img, &lab).unwrap();
    assert_eq!(ds.image(0), &[0.0, 1.0]);
    assert_eq!(ds.image(1), &[0.2, 0.4]);
}

#[test]
fn truncated_images_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = idx_images(2, 28, 28, &[7; 2 * 784]);
    bytes.truncate(bytes.len() - 100);
    let img = write(dir.path(), "img", &bytes);
    let lab = write(dir.path(), "lab", &idx_labels(&[1, 2]));
    match load_idx(&img, &lab) {
        Err(Error::Ingest(IngestError::Truncated { expected, found, .. })) => {
            assert_eq!(expected, 16 + 2 * 784);
            assert_eq!(found, 16 + 2 * 784 - 100);
        }
        other => panic!("expected truncation, got {other:?}"),
    }
}

#[test]
fn truncated_header_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let img = write(dir.path(), "img", &IMAGE_MAGIC.to_be_bytes());
    let lab = write(dir.path(), "lab", &idx_labels(&[1]));
    assert!(matches!(
        load_idx(&img, &lab),
        Err(Error::Ingest(IngestError::Truncated { .. }))
    ));
}

#[test]
fn swapped_files_fail_on_magic() {
    let dir = tempfile::tempdir().unwrap();
    let img = write(dir.path(), "img", &idx_images(1, 1, 1, &[0]));
    let lab = write(dir.path(), "lab", &idx_labels(&[0]));
    match load_idx(&lab, &img) {
        Err(Error::Ingest(IngestError::BadMagic { expected, found, .. })) => {
            assert_eq!(expected, 2051);
            assert_eq!(found, 2049);
        }
        other => panic!("expected bad magic, got {other:?}"),
    }
}

#[test]
fn count_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let img = write(dir.path(), "img", &idx_images(2, 1, 1, &[0, 0]));
    let lab = write(dir.path(), "lab", &idx_labels(&[0, 1, 2]));
    assert!(matches!(
        load_idx(&img, &lab),
        Err(Error::Ingest(IngestError::CountMismatch { images: 2, labels: 3 }))
    ));
}

#[test]
fn out_of_range_label_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let img = write(dir.path(), "img", &idx_images(1, 1, 1, &[0]));
    let lab = write(dir.path(), "lab", &idx_labels(&[10]));
    assert!(matches!(
        load_idx(&img, &lab),
        Err(Error::Ingest(IngestError::BadLabel { label: 10, .. }))
    ));
}

#[test]
fn missing_file_is_an_open_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    assert!(matches!(
        load_idx(&missing, &missing),
        Err(Error::Ingest(IngestError::Open { .. }))
    ));
}

#[test]
fn gzip_directory_layout_loads() {
    let dir = tempfile::tempdir().unwrap();
    let gz = |bytes: &[u8]| {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes).unwrap();
        enc.finish().unwrap()
    };
    write(dir.path(), "t10k-images-idx3-ubyte.gz", &gz(&idx_images(3, 2, 2, &[9; 12])));
    write(dir.path(), "t10k-labels-idx1-ubyte.gz", &gz(&idx_labels(&[4, 5, 6])));
    let ds = load_dir(dir.path(), Split::Test).unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.features(), 4);
    assert_eq!(ds.labels(), &[4, 5, 6]);
}

#[test]
fn dotted_spelling_is_found() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "train-images.idx3-ubyte", &idx_images(1, 1, 3, &[1, 2, 3]));
    write(dir.path(), "train-labels.idx1-ubyte", &idx_labels(&[7]));
    let ds = load_dir(dir.path(), Split::Train).unwrap();
    assert_eq!(ds.labels(), &[7]);
}

#[test]
fn bundled_test_split_has_ten_thousand_images() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    if !dir.exists() {
        eprintln!("skipping: {} not present", dir.display());
        return;
    }
    let ds = load_dir(&dir, Split::Test).unwrap();
    assert_eq!(ds.len(), 10_000);
    assert_eq!(ds.features(), 784);
}
