mod common;

use std::path::Path;

use common::*;
use proptest::prelude::*;
use refsr::dataset::*;
use refsr::imaging::{crop_aligned, degrade_bicubic, save_image, BitDepth};
use refsr::{Error, ImageTensor};

fn record(id: &str, ppi: f64) -> PaintingRecord {
    PaintingRecord::new(id, format!("{id}.png"), 1000, 1000, 1000.0 / ppi, 1000.0 / ppi).unwrap()
}

fn paintings(n: usize, h: usize, w: usize) -> Vec<(String, ImageTensor)> {
    (0..n).map(|i| (format!("p{i}"), synthetic_painting(h, w, i as u64))).collect()
}

#[test]
fn manifest_rows_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    std::fs::write(
        &path,
        "id,image_path,width_px,height_px,phys_width_in,phys_height_in\n\
         a,a.png,1000,800,10,8\n\
         b,/abs/b.png,2000,1000,10,5\n\
         bad,c.png,1000,800,0,8\n\
         d,d.png,300,300,3,3\n",
    )
    .unwrap();
    let m = ingest_manifest(&path).unwrap();
    assert_eq!(m.records.len(), 3);
    assert_eq!(m.rejections.len(), 1);
    assert_eq!(m.rejections[0].line, 4);
    assert!(m.rejections[0].reason.contains("phys_width_in"));
    assert!((m.records[0].ppi - 100.0).abs() < 1e-9);
    assert_eq!(m.records[0].image_path, dir.path().join("a.png"));
    assert_eq!(m.records[1].image_path, Path::new("/abs/b.png"));

    let round = dir.path().join("again.csv");
    write_manifest(&m.records, &round).unwrap();
    assert_eq!(ingest_manifest(&round).unwrap().records, m.records);
}

#[test]
fn manifest_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    std::fs::write(&path, "id,path,w\na,b,1\n").unwrap();
    assert!(matches!(ingest_manifest(&path), Err(Error::Format(_))));
    assert!(matches!(ingest_manifest(&dir.path().join("none.csv")), Err(Error::Io { .. })));
    std::fs::write(
        &path,
        "id,image_path,width_px,height_px,phys_width_in,phys_height_in\na,a.png,10,10,1,1\na,b.png,10,10,1,1\nx,y.png,ten,10,1,1\n",
    )
    .unwrap();
    let m = ingest_manifest(&path).unwrap();
    assert_eq!((m.records.len(), m.rejections.len()), (1, 2));
}

#[test]
fn ppi_selection_prefers_highest_for_test() {
    let records: Vec<_> = (0..10).map(|i| record(&format!("r{i}"), 50.0 + 10.0 * i as f64)).collect();
    let split = select_by_ppi(&records, 0.0, 5, 2, 1).unwrap();
    let test: Vec<_> = split.test.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(test, ["r9", "r8"]);
    assert_eq!(split.train.len(), 5);
    assert!(split.train.iter().all(|r| !test.contains(&r.id.as_str())));
    assert_eq!(split, select_by_ppi(&records, 0.0, 5, 2, 1).unwrap());
    assert!(matches!(select_by_ppi(&records, 0.0, 9, 2, 1), Err(Error::Argument(_))));
    assert!(matches!(select_by_ppi(&records, 125.0, 3, 1, 1), Err(Error::Argument(_))));
}

#[test]
fn ties_are_shuffled_by_seed() {
    let records: Vec<_> = (0..12).map(|i| record(&format!("r{i:02}"), 100.0)).collect();
    let orders: Vec<Vec<String>> = (0..6)
        .map(|s| select_by_ppi(&records, 0.0, 8, 4, s).unwrap().test.iter().map(|r| r.id.clone()).collect())
        .collect();
    assert!(orders.iter().any(|o| o != &orders[0]));
}

#[test]
fn triples_respect_contracts() {
    let cfg = TripleConfig::new(8, 64, 7);
    let triples = make_triples_from(&paintings(3, 130, 200), &cfg).unwrap();
    assert_eq!(triples.len(), 3 * 2 * 3);
    for t in &triples {
        assert_eq!(t.lr.dims(), (8, 8, 3));
        assert_eq!(t.reference.dims(), (64, 64, 3));
        assert_ne!(t.painting_id, t.ref_painting_id);
        assert_eq!(crop_aligned(&t.hr, 8).unwrap(), t.hr);
        assert_eq!(t.lr, degrade_bicubic(&t.hr, 8).unwrap());
    }
    assert_eq!(triples[4].key, "p0_4");
    assert_eq!(triples, make_triples_from(&paintings(3, 130, 200), &cfg).unwrap());
}

#[test]
fn triple_options_and_errors() {
    let mut cfg = TripleConfig::new(8, 64, 1);
    assert!(matches!(make_triples_from(&paintings(1, 128, 128), &cfg), Err(Error::Argument(m)) if m.contains("no valid reference source")));
    let mut ps = paintings(2, 128, 128);
    ps.push(("tiny".into(), synthetic_painting(32, 32, 9)));
    assert_eq!(make_triples_from(&ps, &cfg).unwrap().len(), 8);

    cfg.refs_per_tile = 2;
    cfg.max_tiles_per_painting = Some(3);
    let t = make_triples_from(&ps, &cfg).unwrap();
    assert_eq!(t.len(), 2 * 3 * 2);
    assert!(t[1].key.ends_with(".1"));

    cfg.min_tile_std = 10.0;
    assert!(make_triples_from(&ps, &cfg).unwrap().is_empty());
    assert!(TripleConfig::new(8, 60, 0).validate().is_err());
    assert!(TripleConfig::new(3, 63, 0).validate().is_err());
}

#[test]
fn triples_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let triples = make_triples_from(&paintings(2, 64, 128), &TripleConfig::new(4, 32, 3)).unwrap();
    write_triples(&triples, dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("p1_0_ref.png")).unwrap();
    let back = load_triples(dir.path(), 4).unwrap();
    assert_eq!(back.len(), triples.len() - 1);
    for b in &back {
        let t = triples.iter().find(|t| t.key == b.key).unwrap();
        assert_eq!((b.painting_id.as_str(), b.tile_index), (t.painting_id.as_str(), t.tile_index));
        let err = b.hr.data().iter().zip(t.hr.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err <= 0.5 / 65535.0 + 1e-12);
    }
}

#[test]
fn manifest_driven_triples_load_images() {
    let dir = tempfile::tempdir().unwrap();
    let mut records = Vec::new();
    for (id, img) in paintings(2, 64, 64) {
        save_image(&img, dir.path().join(format!("{id}.png")), BitDepth::Eight).unwrap();
        records.push(PaintingRecord::new(&id, dir.path().join(format!("{id}.png")), 64, 64, 1.0, 1.0).unwrap());
    }
    assert_eq!(make_triples(&records, &TripleConfig::new(2, 32, 0)).unwrap().len(), 8);
    records[0].image_path = dir.path().join("gone.png");
    assert!(make_triples(&records, &TripleConfig::new(2, 32, 0)).is_err());
}

#[test]
fn grouped_refs_layout() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_grouped_refs(dir.path()).unwrap().is_empty());
    for g in ["g1", "g0"] {
        let gd = dir.path().join(g);
        std::fs::create_dir(&gd).unwrap();
        save_image(&random_image(8, 8, 0), gd.join("hr.png"), BitDepth::Eight).unwrap();
        for i in 0..4 {
            if g == "g1" && i == 2 {
                continue;
            }
            save_image(&random_image(8, 8, i + 1), gd.join(format!("ref_{i}.png")), BitDepth::Eight).unwrap();
        }
    }
    let groups = load_grouped_refs(dir.path()).unwrap();
    assert_eq!(groups.len(), 1);
    assert_eq!(groups[0].id, "g0");
    assert_eq!(groups[0].refs.len(), 4);
    assert_eq!(groups[0].most_similar(), &groups[0].refs[0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn references_never_come_from_their_own_painting(n in 2usize..5, seed in 0u64..1000, refs in 1usize..3) {
        let mut cfg = TripleConfig::new(4, 16, seed);
        cfg.refs_per_tile = refs;
        let ps: Vec<_> = (0..n).map(|i| (format!("p{i}"), random_image(32 + 16 * (i % 2), 48, seed + i as u64))).collect();
        for t in make_triples_from(&ps, &cfg).unwrap() {
            prop_assert_ne!(&t.painting_id, &t.ref_painting_id);
        }
    }
}
