use woundseg::imaging::{decode_gray, decode_image, threshold_mask};
use woundseg::synth::{generate_dataset, generate_sample, read_manifest, SynthSpec};

#[test]
fn dataset_files_reread_losslessly() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        seed: 5,
        ..SynthSpec::default()
    };
    let rows = generate_dataset(&spec, 10, dir.path()).unwrap();
    assert_eq!(rows.len(), 10);
    assert_eq!(std::fs::read_dir(dir.path().join("images")).unwrap().count(), 10);
    assert_eq!(std::fs::read_dir(dir.path().join("masks")).unwrap().count(), 10);
    assert_eq!(read_manifest(&dir.path().join("manifest.csv")).unwrap(), rows);
    for (i, row) in rows.iter().enumerate() {
        let (img, mask) = generate_sample(&spec, i as u64).unwrap();
        assert_eq!(decode_image(dir.path().join(&row.image)).unwrap(), img);
        let gray = decode_gray(dir.path().join(&row.mask)).unwrap();
        assert!(gray.pixels().iter().all(|&v| v == 0 || v == 255));
        assert_eq!(threshold_mask(&gray, 127), mask);
    }
}

#[test]
fn larger_runs_keep_earlier_splits() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let spec = SynthSpec::default();
    let small = generate_dataset(&spec, 6, a.path()).unwrap();
    let large = generate_dataset(&spec, 12, b.path()).unwrap();
    assert_eq!(&large[..6], &small[..]);
}

#[test]
fn unwritable_directory_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain");
    std::fs::write(&file, b"x").unwrap();
    let err = generate_dataset(&SynthSpec::default(), 1, file.join("sub")).unwrap_err();
    assert!(matches!(err, woundseg::Error::Io { .. }), "{err}");
}
