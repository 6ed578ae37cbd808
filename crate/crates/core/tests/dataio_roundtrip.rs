use std::fs;

use boxseg::dataio::{
    load_manifest, load_mask_png, load_masks, render_overlay, render_overlay_colored, save_manifest, save_mask_png, save_masks,
    DataError, MaskRecord,
};
use boxseg::pipeline::Validity;
use boxseg::synth::{write_corpus, CorpusSpec};
use boxseg::types::{Image, MaskInstance};
use proptest::prelude::*;
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn synthetic_manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let written = write_corpus(dir.path(), &CorpusSpec { images: 5, seed: 4, ..Default::default() }).unwrap();
    let loaded = load_manifest(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(loaded, written);
    save_manifest(&loaded, &dir.path().join("copy.json")).unwrap();
    assert_eq!(load_manifest(&dir.path().join("copy.json")).unwrap(), loaded);
    for i in 0..loaded.images.len() {
        let masks = loaded.load_gt_masks(i).unwrap();
        for (m, inst) in masks.iter().zip(&loaded.images[i].instances) {
            assert_eq!(m.bbox(), Some(inst.bbox));
        }
    }
}

#[test]
fn malformed_json_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.json");
    fs::write(&p, "{\"categories\": [\"a\"], \"images\": [").unwrap();
    assert!(matches!(load_manifest(&p), Err(DataError::Parse { .. })));
    assert!(matches!(load_manifest(&dir.path().join("none.json")), Err(DataError::Io { .. })));
}

#[test]
fn every_corrupted_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), &CorpusSpec { images: 2, seed: 8, ..Default::default() }).unwrap();
    let original: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    let mutations: Vec<Box<dyn Fn(&mut serde_json::Value)>> = vec![
        Box::new(|v| v["images"][1]["instances"][0]["box"][2] = 10_000.into()),
        Box::new(|v| v["images"][1]["instances"][0]["class"] = 99.into()),
        Box::new(|v| v["images"][1]["instances"][0]["box"] = serde_json::json!([3, 3, 3, 9])),
        Box::new(|v| v["images"][1]["path"] = "images/nope.png".into()),
        Box::new(|v| v["images"][1]["path"] = v["images"][0]["path"].clone()),
        Box::new(|v| v["images"][1]["height"] = 7.into()),
        Box::new(|v| v["images"][1]["detections"] = serde_json::json!([{"box": [0, 0, 4, 4], "class": 0, "score": 1.5}])),
        Box::new(|v| v["images"][1]["extra"] = 1.into()),
        Box::new(|v| v["images"][1]["width"] = (-3).into()),
    ];
    let p = dir.path().join("bad.json");
    for (k, mutate) in mutations.iter().enumerate() {
        let mut v = original.clone();
        mutate(&mut v);
        fs::write(&p, serde_json::to_string(&v).unwrap()).unwrap();
        match load_manifest(&p) {
            Err(DataError::Record { record, .. }) => assert_eq!(record, 1, "mutation {k}"),
            Err(DataError::Parse { .. }) => {}
            other => panic!("mutation {k} accepted: {other:?}"),
        }
    }
}

fn disjoint_masks(rng: &mut impl Rng, w: u32, h: u32, n: usize) -> Vec<MaskInstance> {
    let owner: Vec<usize> = (0..w * h).map(|_| rng.gen_range(0..=n)).collect();
    (0..n)
        .map(|k| MaskInstance::from_fn(w, h, k as u32, 1.0, |x, y| owner[(y * w + x) as usize] == k).unwrap())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mask_png_round_trip_is_bit_exact(seed in any::<u64>(), w in 1u32..40, h in 1u32..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: f64 = rng.gen();
        let m = MaskInstance::from_fn(w, h, 2, 0.5, |_, _| rng.gen_bool(p)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        save_mask_png(&m, &path).unwrap();
        prop_assert_eq!(load_mask_png(&path, 2, 0.5).unwrap(), m);
    }

    #[test]
    fn mask_directory_round_trip(seed in any::<u64>(), n in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records: Vec<MaskRecord> = disjoint_masks(&mut rng, 9, 7, n)
            .into_iter()
            .enumerate()
            .map(|(i, m)| MaskRecord {
                image: "scene".into(),
                index: i,
                mask: m.with_score(rng.gen()),
                source_box: None,
                validity: if rng.gen() { Some(Validity::Valid) } else { None },
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let paths = save_masks(&records, dir.path()).unwrap();
        prop_assert_eq!(paths.len(), n);
        prop_assert_eq!(load_masks(dir.path()).unwrap(), records);
    }

    #[test]
    fn overlay_of_disjoint_masks_is_order_independent(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Image::from_fn(12, 10, |_, _| std::array::from_fn(|_| rng.gen())).unwrap();
        let masks = disjoint_masks(&mut rng, 12, 10, n);
        let colors: Vec<[u8; 3]> = (0..n).map(|_| std::array::from_fn(|_| rng.gen())).collect();
        let mut pairs: Vec<(&MaskInstance, [u8; 3])> = masks.iter().zip(colors).collect();
        let first = render_overlay_colored(&img, &pairs);
        pairs.shuffle(&mut rng);
        prop_assert_eq!(render_overlay_colored(&img, &pairs), first);

        let before = img.clone();
        let _ = render_overlay(&img, &masks);
        prop_assert_eq!(img, before);
    }
}
