use specular::image::save_image;
use specular::synth::{
    generate_quadruple, load_quadruple_dir, save_quadruple, write_synthetic_dataset, Dataset, DatasetManifest, ManifestEntry,
    Split, MANIFEST_FILE,
};
use specular::Error;

#[test]
fn written_directory_round_trips_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_synthetic_dataset(dir.path(), 3, 2, 9, 32).unwrap();
    assert_eq!(manifest.entries.len(), 5);
    let ds = Dataset::open(dir.path()).unwrap();
    assert_eq!(ds.split(Split::Train).len(), 3);
    assert_eq!(ds.split(Split::Test).len(), 2);
    // Regenerate sample 0 independently through the same seed stream.
    use rand::{RngCore, SeedableRng};
    let mut stream = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let q = generate_quadruple(stream.next_u64(), 32).unwrap();
    let loaded = ds.get(0).unwrap();
    for (a, b) in [(&q.composite, &loaded.composite), (&q.diffuse, &loaded.diffuse)] {
        let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff <= 1.0 / 255.0, "max diff {diff}");
    }
    assert_eq!(loaded.mask, q.mask);
}

#[test]
fn missing_file_names_the_sample() {
    let dir = tempfile::tempdir().unwrap();
    save_quadruple(dir.path(), "good", &generate_quadruple(1, 16).unwrap()).unwrap();
    let manifest = DatasetManifest {
        entries: vec![
            ManifestEntry {
                id: "good".into(),
                split: Split::Train,
            },
            ManifestEntry {
                id: "ghost".into(),
                split: Split::Train,
            },
        ],
    };
    match load_quadruple_dir(dir.path(), &manifest) {
        Err(Error::Sample { id, .. }) => assert_eq!(id, "ghost"),
        other => panic!("expected a sample error, got {other:?}"),
    }
}

#[test]
fn mismatched_dimensions_name_the_sample() {
    let dir = tempfile::tempdir().unwrap();
    let q = generate_quadruple(1, 16).unwrap();
    save_quadruple(dir.path(), "odd", &q).unwrap();
    save_image(&generate_quadruple(2, 24).unwrap().diffuse, dir.path().join("odd_D.png")).unwrap();
    let manifest = DatasetManifest::parse("odd test\n").unwrap();
    let ds = load_quadruple_dir(dir.path(), &manifest).unwrap();
    match ds.get(0) {
        Err(Error::Sample { id, reason }) => {
            assert_eq!(id, "odd");
            assert!(reason.contains("diffuse"), "{reason}");
        }
        other => panic!("expected a sample error, got {other:?}"),
    }
}

#[test]
fn empty_manifest_gives_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(MANIFEST_FILE), "").unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    assert_eq!(ds.len(), 0);
    assert!(ds.is_empty());
    assert!(ds.load_all().unwrap().is_empty());
}

#[test]
fn same_seed_writes_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_synthetic_dataset(a.path(), 2, 1, 4, 16).unwrap();
    write_synthetic_dataset(b.path(), 2, 1, 4, 16).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 13);
    for n in names {
        assert_eq!(std::fs::read(a.path().join(&n)).unwrap(), std::fs::read(b.path().join(&n)).unwrap());
    }
}
