use compgen::dataset::*;
use compgen::gridworld::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;
use std::sync::OnceLock;

fn bundle() -> &'static DatasetBundle {
    static B: OnceLock<DatasetBundle> = OnceLock::new();
    B.get_or_init(|| build_dataset(&DatasetConfig::with_n_per_goal(100)).unwrap())
}

fn combo(color: &str, kind: &str) -> (u8, u8) {
    let c = COLOR_NAMES.iter().position(|&n| n == color).unwrap() as u8;
    let k = TYPE_NAMES.iter().position(|&n| n == kind).unwrap() as u8;
    (c, k)
}

#[test]
fn held_out_combinations_are_the_six_named_pairs() {
    let mut expected: Vec<(u8, u8)> = [
        ("red", "ball"),
        ("green", "box"),
        ("blue", "key"),
        ("purple", "ball"),
        ("grey", "box"),
        ("yellow", "key"),
    ]
    .iter()
    .map(|&(c, k)| combo(c, k))
    .collect();
    expected.sort();
    let mut got = SplitSpec::default().ood_combinations.clone();
    got.sort();
    assert_eq!(got, expected);
    let split = SplitSpec::default();
    assert_eq!(split.id_goals().len(), 24);
    assert_eq!(split.ood_goals().len(), 12);
    let ood: HashSet<usize> = split.ood_goals().iter().map(|g| g.index()).collect();
    assert!(split.id_goals().iter().all(|g| !ood.contains(&g.index())));
}

#[test]
fn validation_splits_have_equal_totals() {
    let b = bundle();
    assert_eq!(b.v_id.len(), 24 * 20);
    assert_eq!(b.v_ood.len(), 12 * 40);
    assert_eq!(b.v_id.len(), b.v_ood.len());
    for (_, idx) in group_by_goal(&b.v_id) {
        assert_eq!(idx.len(), V_ID_PER_GOAL);
    }
    for (_, idx) in group_by_goal(&b.v_ood) {
        assert_eq!(idx.len(), V_OOD_PER_GOAL);
    }
    assert_eq!(b.train.len(), 24 * 80);
}

#[test]
fn splits_are_disjoint_and_well_formed() {
    let b = bundle();
    let ood = &b.config.split;
    let mut seen = HashSet::new();
    for t in b.train.iter().chain(&b.v_id).chain(&b.v_ood) {
        assert!(seen.insert(t.seed), "seed {} used twice", t.seed);
        assert!(t.len() >= MIN_LENGTH);
        assert_eq!(t.states.len(), t.len() + 1);
    }
    assert!(b.train.iter().chain(&b.v_id).all(|t| !ood.is_ood(t.goal)));
    assert!(b.v_ood.iter().all(|t| ood.is_ood(t.goal)));
}

#[test]
fn subsample_sizes() {
    let b = bundle();
    assert_eq!(subsample(&b.train, 50).unwrap().len(), 50 * 24);
    assert_eq!(subsample(&b.train, 80).unwrap().len(), b.train.len());
}

#[test]
fn mid_trajectory_negatives_occur_once_per_goal_count() {
    let b = bundle();
    let sampler = DiscriminatorSampler::new(&b.train).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tuples = sampler.sample_batch(&mut rng, 200_000);
    let negatives: Vec<_> = tuples.iter().filter(|t| !t.label).collect();
    assert_eq!(negatives.len(), 100_000);
    let mid = negatives.iter().filter(|t| t.mid_trajectory).count() as f64 / negatives.len() as f64;
    assert!((mid - 1.0 / 36.0).abs() <= 0.003, "rate {mid}");
    for t in negatives.iter().filter(|t| t.mid_trajectory).take(200) {
        assert!(t.comparison.step < b.train[t.comparison.trajectory].len() - 1);
    }
}

#[test]
fn mean_return_of_a_seven_step_demonstration() {
    let b = bundle();
    let t = b.train.iter().find(|t| t.len() == 7).expect("a 7-step demonstration");
    let mean: f64 = (0..7).map(|i| discounted_return(t, i, 0.9)).sum::<f64>() / 7.0;
    let oracle = (0..7).map(|k| 0.9f64.powi(k)).sum::<f64>() / 7.0;
    assert!((mean - oracle).abs() < 1e-12);
    assert!((mean - 0.74529).abs() < 1e-5, "mean {mean}");
}

#[test]
fn bundles_survive_disk() {
    let b = bundle();
    let dir = tempfile::tempdir().unwrap();
    save(b, dir.path()).unwrap();
    let back = load(dir.path()).unwrap();
    assert_eq!(&back, b);
    assert_eq!(back.manifest.train_count, back.train.len());
}

#[test]
fn damaged_files_are_rejected() {
    let b = bundle();
    let dir = tempfile::tempdir().unwrap();
    save(b, dir.path()).unwrap();
    let path = dir.path().join("v_id.cgtr");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load(dir.path()), Err(DatasetError::Format(_))));

    bytes[0] = MAGIC[0];
    bytes.truncate(bytes.len() - 10);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load(dir.path()), Err(DatasetError::Format(_))));
}

#[test]
fn parallel_build_matches_serial() {
    let cfg = DatasetConfig::with_n_per_goal(60);
    assert_eq!(build_dataset(&cfg).unwrap(), build_dataset_parallel(&cfg, 3).unwrap());
}
