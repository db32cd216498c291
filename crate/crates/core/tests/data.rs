use putr::data::{
    decode_checkpoint, encode_checkpoint, format_xyz, generate_dataset, load_checkpoint, load_dataset, parse_xyz,
    read_xyz, save_checkpoint, write_dataset, write_xyz, MANIFEST_FILE,
};
use putr::geometry::PointCloud;
use putr::metrics::SurfaceRef;
use putr::model::{Model, ModelConfig};
use putr::Error;

fn tiny() -> ModelConfig {
    ModelConfig {
        channels: vec![8],
        head_channels: 4,
        k: 3,
        psi: 2,
        ratio: 2,
        ..ModelConfig::default()
    }
}

#[test]
fn xyz_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let c = PointCloud::new(vec![[0.1, -2.5, 3.0], [1e-7, 123456.789, -0.0]]).unwrap();
    let path = dir.path().join("a.xyz");
    write_xyz(&c, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text, format_xyz(&c));
    let back = read_xyz(&path).unwrap();
    for (a, b) in back.points().iter().zip(c.points()) {
        for i in 0..3 {
            assert!((a[i] - b[i]).abs() <= 1e-8 * b[i].abs().max(1.0));
        }
    }
    assert_eq!(format_xyz(&back), text);
}

#[test]
fn xyz_errors_name_the_line() {
    match parse_xyz("0 0 0\n\n1 2 nan\n") {
        Err(Error::Parse { line: 3, .. }) => {}
        other => panic!("{other:?}"),
    }
    assert!(matches!(parse_xyz("1 2\n"), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn dataset_is_deterministic_and_round_trips() {
    let shapes = SurfaceRef::default_zoo();
    let a = generate_dataset(&shapes, 64, 4, 4, 11).unwrap();
    let b = generate_dataset(&shapes, 64, 4, 4, 11).unwrap();
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_dataset(da.path(), &a).unwrap();
    write_dataset(db.path(), &b).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(da.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 9);
    for name in &names {
        assert_eq!(std::fs::read(da.path().join(name)).unwrap(), std::fs::read(db.path().join(name)).unwrap());
    }
    let manifest = std::fs::read_to_string(da.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.lines().count(), 4);

    let loaded = load_dataset(da.path()).unwrap();
    for (rec, orig) in loaded.iter().zip(&a) {
        assert_eq!(rec.id, orig.id);
        assert_eq!(rec.surface, orig.surface);
        assert_eq!(format_xyz(&rec.dense), format_xyz(&orig.dense));
    }
}

#[test]
fn every_pair_lies_on_its_surface_with_exact_ratio() {
    let shapes = SurfaceRef::default_zoo();
    for rec in generate_dataset(&shapes, 32, 4, 8, 3).unwrap() {
        assert_eq!(rec.sparse.len(), 32);
        assert_eq!(rec.dense.len(), 128);
        for p in rec.sparse.points().iter().chain(rec.dense.points()) {
            assert!(rec.surface.distance(p) < 1e-9, "{} {p:?}", rec.id);
        }
        for p in rec.sparse.points() {
            assert!(rec.dense.points().contains(p));
        }
    }
}

#[test]
fn checkpoint_file_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::<f32>::init(tiny(), 8).unwrap();
    let (p1, p2) = (dir.path().join("a.putf"), dir.path().join("b.putf"));
    save_checkpoint(&model.params, &model.cfg, &p1).unwrap();
    let (params, cfg) = load_checkpoint(&p1).unwrap();
    assert_eq!(params, model.params);
    save_checkpoint(&params, &cfg, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn f64_weights_truncate_to_f32_on_save() {
    let model = Model::<f64>::init(tiny(), 9).unwrap();
    let (_, params) = decode_checkpoint(&encode_checkpoint(&model.cfg, &model.params).unwrap()).unwrap();
    assert_eq!(params, model.params.cast::<f32>());
}

#[test]
fn corrupted_checkpoints_fail_with_distinct_errors() {
    let model = Model::<f32>::init(tiny(), 10).unwrap();
    let bytes = encode_checkpoint(&model.cfg, &model.params).unwrap();

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(decode_checkpoint(&magic), Err(Error::BadMagic)));

    assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));

    let mut footer = bytes.clone();
    let last = footer.len() - 8;
    footer[last] ^= 1;
    assert!(matches!(decode_checkpoint(&footer), Err(Error::Integrity { .. })));

    let mut version = bytes.clone();
    version[5] = b'9';
    assert!(matches!(decode_checkpoint(&version), Err(Error::UnsupportedVersion(_))));

    let mut trailing = bytes;
    trailing.push(0);
    assert!(matches!(decode_checkpoint(&trailing), Err(Error::Checkpoint(_))));
}

#[test]
fn mesh_surface_spec_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tri.obj"), "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n").unwrap();
    let s = SurfaceRef::parse("mesh:tri.obj", Some(dir.path())).unwrap();
    assert!((s.distance(&[0.25, 0.25, 2.0]) - 2.0).abs() < 1e-12);
    assert_eq!(s.to_string(), "mesh:tri.obj");
    assert!(SurfaceRef::parse("mesh:missing.obj", Some(dir.path())).is_err());
}
