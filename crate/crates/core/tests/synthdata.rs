//! Properties of generated corpora measured on the written files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use covseg_core::corpus::{Corpus, CorpusIndex, Split};
use covseg_core::netpbm::{self, GrayImage, RgbImage};
use covseg_core::synth::{self, CorpusSpec, SceneConfig, STATIC_SEQUENCE};

fn small_spec(seed: u64, static_images: usize) -> CorpusSpec {
    CorpusSpec {
        train_videos: 2,
        test_videos: 1,
        static_images,
        scene: SceneConfig {
            frame_size: [48, 40],
            length: 8,
            ..SceneConfig::default()
        },
        seed,
    }
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn same_seed_writes_identical_files() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth::generate_corpus(a.path(), &small_spec(11, 3)).unwrap();
    synth::generate_corpus(b.path(), &small_spec(11, 3)).unwrap();
    synth::generate_corpus(c.path(), &small_spec(12, 3)).unwrap();
    let (ta, tb, tc) = (read_tree(a.path()), read_tree(b.path()), read_tree(c.path()));
    assert_eq!(ta, tb);
    assert_ne!(ta, tc);
    // Index; per video a scene record and 8 frame/mask pairs; 3 static pairs.
    assert_eq!(ta.len(), 1 + 3 * (1 + 8 * 2) + 3 * 2);
}

#[test]
fn empty_static_set_has_a_valid_index() {
    let dir = tempfile::tempdir().unwrap();
    synth::generate_corpus(dir.path(), &small_spec(1, 0)).unwrap();
    let index = CorpusIndex::load(dir.path()).unwrap();
    let statics: Vec<_> = index.split(Split::Static).collect();
    assert_eq!(statics.len(), 1);
    assert_eq!(statics[0].name, STATIC_SEQUENCE);
    assert_eq!(statics[0].length, 0);
    let corpus = Corpus::load(dir.path()).unwrap();
    assert!(corpus.static_samples().is_empty());
    assert_eq!(corpus.train.len(), 2);
}

#[test]
fn every_mask_file_is_bilevel_and_every_frame_has_a_mask() {
    let dir = tempfile::tempdir().unwrap();
    let index = synth::generate_corpus(dir.path(), &small_spec(4, 4)).unwrap();
    for entry in &index.sequences {
        for i in 0..entry.length {
            let mask = netpbm::read_pgm(&covseg_core::corpus::mask_path(dir.path(), &entry.name, i)).unwrap();
            assert!(mask.pixels.iter().all(|&p| p == 0 || p == 255));
            assert!(covseg_core::corpus::frame_path(dir.path(), &entry.name, i).exists());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn static_foreground_fraction_in_range(seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let entry = synth::generate_static_set(dir.path(), 12, seed, [96, 96]).unwrap();
        for i in 0..entry.length {
            let mask = netpbm::read_pgm(&covseg_core::corpus::mask_path(dir.path(), STATIC_SEQUENCE, i)).unwrap();
            prop_assert!(mask.pixels.iter().all(|&p| p == 0 || p == 255));
            let fraction = mask.foreground_count() as f64 / mask.pixels.len() as f64;
            prop_assert!((0.02..=0.4).contains(&fraction), "image {i}: {fraction}");
        }
    }

    #[test]
    fn primary_is_the_most_frequent_object(seed in any::<u64>(), rate in 0.6f64..=1.0) {
        let cfg = SceneConfig {
            frame_size: [48, 48],
            length: 12,
            distractors: 3,
            distractor_lifetime: 0.45,
            presence_rate: rate,
            noise_sigma: 0.0,
            size: [5.0, 8.0],
            ..SceneConfig::default()
        };
        let scene = synth::random_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        scene.validate().unwrap();
        let frames = scene.render().unwrap();
        let primary = scene.primary_presence();
        for (t, (_, mask)) in frames.iter().enumerate() {
            if synth::primary_present(scene.primary.presence_rate, t) {
                prop_assert!(mask.foreground_count() > 0, "frame {t} lost its primary");
            } else {
                prop_assert_eq!(mask.foreground_count(), 0);
            }
        }
        for (k, d) in scene.distractors.iter().enumerate() {
            let life = synth::lifetime_frames(d.lifetime, scene.length);
            prop_assert!(primary > life.len());
            // Frames rendered without this distractor differ only inside its lifetime.
            let mut without = scene.clone();
            without.distractors.remove(k);
            let plain = without.render().unwrap();
            for (t, ((f, m), (g, n))) in frames.iter().zip(&plain).enumerate() {
                prop_assert_eq!(m, n, "distractor {} leaked into mask {}", k, t);
                if !life.contains(&t) {
                    prop_assert_eq!(f, g);
                }
            }
        }
    }

    #[test]
    fn netpbm_round_trips(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
        use rand::Rng;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let rgb = RgbImage { width: w, height: h, pixels: (0..w * h * 3).map(|_| r.gen()).collect() };
        let gray = GrayImage { width: w, height: h, pixels: (0..w * h).map(|_| if r.gen() { 255 } else { 0 }).collect() };
        let dir = tempfile::tempdir().unwrap();
        let (pp, gp) = (dir.path().join("a.ppm"), dir.path().join("a.pgm"));
        netpbm::write_ppm(&pp, &rgb).unwrap();
        netpbm::write_pgm(&gp, &gray).unwrap();
        prop_assert_eq!(netpbm::read_ppm(&pp).unwrap(), rgb);
        prop_assert_eq!(netpbm::read_pgm(&gp).unwrap(), gray.clone());
        let bytes = netpbm::encode_pgm(&gray);
        prop_assert!(netpbm::parse_pgm(&bytes[..bytes.len() - 1], &gp).is_err());
    }
}
