//! Synthetic dyadic clips: rendering, dataset plans, file format, and the
//! separability ladder.

use std::collections::{HashMap, HashSet};

use dyad::synthdata::{
    decode_clip_pair, encode_clip_pair, generate_dataset, nearest_neighbour_accuracy, plan_records,
    read_clip_pair, render_clip, ClassTable, ClipPair, Dataset, DatasetSpec, Manifest,
    MotionPrimitive, PixelView, PrimitiveKind, Split, SyncMode, CLIP_MAGIC, MANIFEST_FILE,
};
use dyad::Error;
use proptest::prelude::*;
use std::path::Path;

fn frame(t: &dyad::nn::Tensor<f32>, f: usize) -> Vec<f32> {
    let s = t.shape();
    let (frames, hw) = (s[1], s[2] * s[3]);
    (0..s[0])
        .flat_map(|c| t.data()[(c * frames + f) * hw..(c * frames + f + 1) * hw].to_vec())
        .collect()
}

#[test]
fn still_square_never_moves() {
    let clip = render_clip(
        &MotionPrimitive::new(PrimitiveKind::Still, 0.0, 8),
        12,
        16,
        16,
        0.0,
        3,
    )
    .unwrap();
    assert_eq!(clip.shape(), &[3, 12, 16, 16]);
    let first = frame(&clip, 0);
    assert!((1..12).all(|f| frame(&clip, f) == first));
    // a 4x4 square on a dark background
    let bright = first[..256].iter().filter(|&&v| v > 0.5).count();
    assert_eq!(bright, 16);
}

#[test]
fn oscillation_repeats_every_period() {
    for kind in [
        PrimitiveKind::HorizontalOscillation,
        PrimitiveKind::VerticalOscillation,
        PrimitiveKind::Circular,
        PrimitiveKind::Zigzag,
        PrimitiveKind::ExpandContract,
    ] {
        let p = MotionPrimitive::new(kind, 5.0, 6).with_phase(2);
        let clip = render_clip(&p, 16, 32, 32, 0.0, 0).unwrap();
        for f in 0..10 {
            assert_eq!(frame(&clip, f), frame(&clip, f + 6), "{kind:?} frame {f}");
        }
        assert_ne!(frame(&clip, 0), frame(&clip, 1), "{kind:?} should move");
    }
}

#[test]
fn rendering_is_deterministic_and_bounded() {
    let p = MotionPrimitive::new(PrimitiveKind::Circular, 6.0, 8);
    let a = render_clip(&p, 16, 32, 32, 0.3, 42).unwrap();
    let b = render_clip(&p, 16, 32, 32, 0.3, 42).unwrap();
    let c = render_clip(&p, 16, 32, 32, 0.3, 43).unwrap();
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_ne!(a.data(), c.data());
    assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn rendering_rejects_bad_geometry() {
    let big = MotionPrimitive::new(PrimitiveKind::HorizontalOscillation, 14.0, 8);
    assert!(matches!(
        render_clip(&big, 16, 32, 32, 0.0, 0),
        Err(Error::Generation(_))
    ));
    let short = MotionPrimitive::new(PrimitiveKind::Still, 0.0, 1);
    assert!(matches!(
        render_clip(&short, 16, 32, 32, 0.0, 0),
        Err(Error::Generation(_))
    ));
    let still = MotionPrimitive::new(PrimitiveKind::Still, 0.0, 8);
    assert!(matches!(
        render_clip(&still, 4, 32, 32, 0.0, 0),
        Err(Error::Generation(_))
    ));
    assert!(matches!(
        render_clip(&still, 16, 6, 32, 0.0, 0),
        Err(Error::Generation(_))
    ));
}

#[test]
fn forty_per_class_gives_240_balanced_records() {
    let spec = DatasetSpec {
        per_class: 40,
        test_per_class: 8,
        ..DatasetSpec::default()
    };
    let plans = plan_records(&spec).unwrap();
    assert_eq!(plans.len(), 240);
    let mut counts = [0usize; 6];
    plans.iter().for_each(|p| counts[p.label] += 1);
    assert_eq!(counts, [40; 6]);
    assert_eq!(plans.iter().filter(|p| p.split == Split::Test).count(), 48);
    assert_eq!(
        plans.iter().map(|p| p.seed).collect::<HashSet<_>>().len(),
        240
    );
}

/// Best achievable accuracy when only `key(class)` is observed, under a
/// uniform prior over classes: one class wins per distinct key.
fn bayes_accuracy<K: std::hash::Hash + Eq>(
    table: ClassTable,
    key: impl Fn(&dyad::synthdata::ClassSpec) -> K,
) -> f64 {
    let classes = table.classes();
    let distinct: HashSet<K> = classes.iter().map(key).collect();
    distinct.len() as f64 / classes.len() as f64
}

fn kind_key(p: &MotionPrimitive) -> (PrimitiveKind, u64, usize) {
    (p.kind, p.amplitude.to_bits(), p.phase)
}

#[test]
fn default_table_needs_both_streams() {
    let classes = ClassTable::Default.classes();
    assert_eq!(classes.len(), 6);
    let mut per_leader: HashMap<_, usize> = HashMap::new();
    let mut per_assistant: HashMap<_, usize> = HashMap::new();
    for c in &classes {
        *per_leader.entry(kind_key(&c.leader)).or_default() += 1;
        *per_assistant.entry(kind_key(&c.assistant)).or_default() += 1;
    }
    assert!(per_leader.values().all(|&n| n == 2));
    assert!(per_assistant.values().all(|&n| n == 3));
    assert!((bayes_accuracy(ClassTable::Default, |c| kind_key(&c.leader)) - 0.5).abs() < 1e-12);
    assert!(
        (bayes_accuracy(ClassTable::Default, |c| kind_key(&c.assistant)) - 1.0 / 3.0).abs() < 1e-12
    );
    assert_eq!(
        bayes_accuracy(ClassTable::Default, |c| (
            kind_key(&c.leader),
            kind_key(&c.assistant)
        )),
        1.0
    );

    for table in [ClassTable::Tight, ClassTable::MotionScale] {
        assert_eq!(
            bayes_accuracy(table, |c| (kind_key(&c.leader), kind_key(&c.assistant))),
            1.0,
            "{table:?}"
        );
        assert!(bayes_accuracy(table, |c| kind_key(&c.leader)) < 1.0);
        assert!(bayes_accuracy(table, |c| kind_key(&c.assistant)) < 1.0);
    }
}

#[test]
fn sync_locks_phases_and_async_spreads_them() {
    let base = DatasetSpec {
        per_class: 20,
        test_per_class: 4,
        ..DatasetSpec::default()
    };
    let sync = plan_records(&DatasetSpec {
        sync: SyncMode::Sync,
        ..base.clone()
    })
    .unwrap();
    assert!(sync.iter().all(|p| p.leader_phase == p.assistant_phase));
    let asynchronous = plan_records(&base).unwrap();
    assert!(asynchronous.len() >= 100);
    let diffs: HashSet<isize> = asynchronous
        .iter()
        .map(|p| p.leader_phase as isize - p.assistant_phase as isize)
        .collect();
    assert!(diffs.len() >= 5, "{diffs:?}");
}

fn small_spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        per_class: 3,
        test_per_class: 1,
        seed,
        ..DatasetSpec::default()
    }
}

fn files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(root.join("clips"))
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.push((
        "manifest".into(),
        std::fs::read(root.join(MANIFEST_FILE)).unwrap(),
    ));
    out.sort();
    out
}

#[test]
fn regeneration_is_byte_identical_and_loads_back() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let manifest = generate_dataset(&small_spec(7), a.path()).unwrap();
    generate_dataset(&small_spec(7), b.path()).unwrap();
    assert_eq!(files(a.path()), files(b.path()));
    assert_eq!(manifest.records.len(), 18);
    assert_eq!(manifest.class_counts(), vec![3; 6]);
    assert_eq!(
        Manifest::read(&a.path().join(MANIFEST_FILE)).unwrap(),
        manifest
    );

    let loaded = Dataset::load(a.path()).unwrap();
    let memory = Dataset::in_memory(&small_spec(7)).unwrap();
    assert_eq!((loaded.train.len(), loaded.test.len()), (12, 6));
    assert_eq!(loaded.train, memory.train);
    assert_eq!(loaded.test, memory.test);

    let c = tempfile::tempdir().unwrap();
    generate_dataset(&small_spec(8), c.path()).unwrap();
    assert_ne!(files(a.path()), files(c.path()));
}

fn sample_pair() -> ClipPair {
    let spec = small_spec(1);
    let plan = &plan_records(&spec).unwrap()[4];
    dyad::synthdata::render_record(&spec, plan).unwrap()
}

#[test]
fn clip_files_round_trip_bit_exactly() {
    let pair = sample_pair();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.dyd");
    dyad::synthdata::write_clip_pair(&path, &pair).unwrap();
    let back = read_clip_pair(&path).unwrap();
    assert_eq!(back, pair);
    let bits = |t: &dyad::nn::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back.leader), bits(&pair.leader));
    assert_eq!(bits(&back.assistant), bits(&pair.assistant));
}

#[test]
fn clip_files_reject_damage() {
    let bytes = encode_clip_pair(&sample_pair()).unwrap();
    assert_eq!(&bytes[..4], CLIP_MAGIC);
    let p = Path::new("x.dyd");

    let mut corrupt = bytes.clone();
    corrupt[100] ^= 0x40;
    let err = decode_clip_pair(p, &corrupt).unwrap_err();
    assert!(
        matches!(err, Error::Format { .. }) && err.to_string().to_lowercase().contains("checksum"),
        "{err}"
    );

    let mut version = bytes.clone();
    version[4] = 9;
    let err = decode_clip_pair(p, &version).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(
        decode_clip_pair(p, &magic),
        Err(Error::Format { .. })
    ));
    assert!(matches!(
        decode_clip_pair(p, &bytes[..bytes.len() - 7]),
        Err(Error::Format { .. })
    ));
    assert!(matches!(
        read_clip_pair(Path::new("/nonexistent/x.dyd")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn nearest_neighbour_ladder_at_zero_noise() {
    // 64 phase pairs per class; 400 training clips per class leave next to
    // none unseen, so the probe measures separability rather than coverage
    let spec = DatasetSpec {
        sigma: 0.0,
        per_class: 410,
        test_per_class: 10,
        ..DatasetSpec::default()
    };
    let data = Dataset::in_memory(&spec).unwrap();
    let joint = nearest_neighbour_accuracy(&data.train, &data.test, PixelView::Joint).unwrap();
    let leader = nearest_neighbour_accuracy(&data.train, &data.test, PixelView::Leader).unwrap();
    assert_eq!(joint, 1.0);
    assert!(leader <= 0.55, "leader-only 1-NN {leader}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn plans_are_pure_functions_of_spec(seed in any::<u64>(), sync in prop_oneof![Just(SyncMode::Async), Just(SyncMode::Sync)]) {
        let spec = DatasetSpec { sync, ..small_spec(seed) };
        let a = plan_records(&spec).unwrap();
        prop_assert_eq!(&a, &plan_records(&spec).unwrap());
        for p in &a {
            prop_assert!(p.leader_phase < spec.jitter && p.assistant_phase < spec.jitter);
            if sync == SyncMode::Sync {
                prop_assert_eq!(p.leader_phase, p.assistant_phase);
            }
        }
    }
}
