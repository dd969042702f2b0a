//! Keypoint layout, normalization, frame sampling, and the pose file and
//! corpus round trips.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use signkit::pose_data::{
    frame_sample_indices, load_corpus, load_pose_file, normalize_pose, read_manifest,
    sample_frames, save_corpus, save_pose_file, select_keypoints, KeypointLayout, Lang, Part,
    PoseSequence, SampleMode, SignTextSample, DEFAULT_HAND_MARGIN, HAND_JOINTS, NUM_JOINTS,
};

fn grid_pose(t: usize, k: usize) -> PoseSequence {
    // Coordinates on a 1/128 grid survive the float32 file format exactly.
    let coords = Array3::from_shape_fn((t, k, 2), |(f, j, a)| {
        ((f * 31 + j * 7 + a * 3) % 128) as f64 / 128.0
    });
    let conf = Array2::from_shape_fn((t, k), |(f, j)| ((f + j) % 64) as f64 / 64.0);
    PoseSequence::new(coords, conf, true).unwrap()
}

#[test]
fn layout_partitions_the_79_joints() {
    let layout = KeypointLayout::default_79();
    assert_eq!(layout.total_joints, NUM_JOINTS);
    assert_eq!(layout.body.len(), 11);
    assert_eq!(layout.facial.len(), 18);
    assert_eq!(layout.mouth.len(), 8);
    assert_eq!(layout.hands.len(), 2 * HAND_JOINTS);
    let manual = layout.manual_set();
    let nonmanual = layout.nonmanual_set();
    assert_eq!(manual.len() + nonmanual.len(), NUM_JOINTS);
    for j in 0..NUM_JOINTS {
        assert_ne!(manual.contains(&j), nonmanual.contains(&j), "joint {j}");
    }
    assert_eq!(layout.part_of(0), Part::Body);
    assert_eq!(layout.part_of(11), Part::Facial);
    assert_eq!(layout.part_of(29), Part::Mouth);
    assert_eq!(layout.part_of(78), Part::Hands);
}

#[test]
fn layout_graph_is_connected() {
    let layout = KeypointLayout::default_79();
    layout.validate().unwrap();
    let mut adj = vec![Vec::new(); NUM_JOINTS];
    for &(a, b) in &layout.skeleton_edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; NUM_JOINTS];
    let mut queue = std::collections::VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    assert!(seen.iter().all(|&s| s), "graph must reach every joint");
}

#[test]
fn select_keypoints_picks_the_documented_source_rows() {
    let layout = KeypointLayout::default_79();
    // Encode the 0-based source row index in the x coordinate.
    let raw = Array3::from_shape_fn((2, 133, 3), |(f, j, c)| match c {
        0 => j as f64,
        1 => (f * 200 + j) as f64,
        _ => 0.5,
    });
    let pose = select_keypoints(&raw, &layout).unwrap();
    assert_eq!(pose.num_frames(), 2);
    assert_eq!(pose.num_joints(), NUM_JOINTS);
    assert!(!pose.normalized);
    // Spot checks across the part boundaries (0-based source rows).
    for (kept, src) in [(0, 0), (10, 10), (11, 23), (27, 39), (28, 53), (29, 83), (36, 90), (37, 91), (58, 112), (78, 132)] {
        assert_eq!(pose.coords[[0, kept, 0]], src as f64, "kept {kept}");
        assert_eq!(pose.confidence[[1, kept]], 0.5);
    }
}

#[test]
fn select_keypoints_rejects_non_wholebody_input() {
    let layout = KeypointLayout::default_79();
    assert!(select_keypoints(&Array3::zeros((2, 79, 3)), &layout).is_err());
    assert!(select_keypoints(&Array3::zeros((2, 133, 2)), &layout).is_err());
}

#[test]
fn normalization_uses_hand_boxes_and_frame_size() {
    let layout = KeypointLayout::default_79();
    let (w, h) = (200.0, 100.0);
    let mut coords = Array3::zeros((1, NUM_JOINTS, 2));
    for j in 0..NUM_JOINTS {
        coords[[0, j, 0]] = 50.0;
        coords[[0, j, 1]] = 40.0;
    }
    // Left hand spans a known box; right hand collapses to one point.
    let [left, right] = layout.hand_ranges();
    for (i, j) in left.clone().enumerate() {
        coords[[0, j, 0]] = 20.0 + 2.0 * i as f64;
        coords[[0, j, 1]] = 10.0 + i as f64;
    }
    for j in right.clone() {
        coords[[0, j, 0]] = 100.0;
        coords[[0, j, 1]] = 50.0;
    }
    let conf = Array2::from_elem((1, NUM_JOINTS), 1.0);
    let pose = PoseSequence::new(coords, conf, false).unwrap();
    let (out, meta) = normalize_pose(&pose, (w, h), &layout, DEFAULT_HAND_MARGIN).unwrap();

    assert!(out.normalized);
    // Body joints divide by the frame size.
    assert_eq!(out.coords[[0, 0, 0]], 50.0 / w);
    assert_eq!(out.coords[[0, 0, 1]], 40.0 / h);
    // Left-hand joints map through the expanded box; replicate the same
    // arithmetic the implementation uses.
    let (xmin, xmax) = (20.0, 20.0 + 2.0 * (HAND_JOINTS - 1) as f64);
    let (ymin, ymax) = (10.0, 10.0 + (HAND_JOINTS - 1) as f64);
    let mx = DEFAULT_HAND_MARGIN * (xmax - xmin);
    let my = DEFAULT_HAND_MARGIN * (ymax - ymin);
    for (i, j) in left.enumerate() {
        let ex = (20.0 + 2.0 * i as f64 - (xmin - mx)) / ((xmax + mx) - (xmin - mx));
        let ey = (10.0 + i as f64 - (ymin - my)) / ((ymax + my) - (ymin - my));
        assert_eq!(out.coords[[0, j, 0]], ex.clamp(0.0, 1.0), "joint {j}");
        assert_eq!(out.coords[[0, j, 1]], ey.clamp(0.0, 1.0));
    }
    // The degenerate right hand falls back to frame-size normalization.
    assert_eq!(meta.degenerate_hands, vec![(0, 1)]);
    for j in right {
        assert_eq!(out.coords[[0, j, 0]], 100.0 / w);
        assert_eq!(out.coords[[0, j, 1]], 50.0 / h);
    }
}

#[test]
fn normalization_clamps_out_of_frame_points() {
    let layout = KeypointLayout::default_79();
    let mut coords = Array3::from_elem((1, NUM_JOINTS, 2), 50.0);
    coords[[0, 0, 0]] = -10.0;
    coords[[0, 0, 1]] = 250.0;
    let conf = Array2::from_elem((1, NUM_JOINTS), 1.0);
    let pose = PoseSequence::new(coords, conf, false).unwrap();
    let (out, _) = normalize_pose(&pose, (200.0, 100.0), &layout, 0.1).unwrap();
    assert_eq!(out.coords[[0, 0, 0]], 0.0);
    assert_eq!(out.coords[[0, 0, 1]], 1.0);
}

#[test]
fn normalization_rejects_bad_inputs() {
    let layout = KeypointLayout::default_79();
    let pose = grid_pose(2, NUM_JOINTS);
    // Already normalized.
    assert!(normalize_pose(&pose, (100.0, 100.0), &layout, 0.1).is_err());
    let raw = PoseSequence { normalized: false, ..pose };
    assert!(normalize_pose(&raw, (0.0, 100.0), &layout, 0.1).is_err());
    assert!(normalize_pose(&raw, (100.0, -5.0), &layout, 0.1).is_err());
}

#[test]
fn center_sampling_halves_64_frames_to_odd_indices() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let idx = frame_sample_indices(64, 32, SampleMode::Center, &mut rng);
    let expected: Vec<usize> = (0..32).map(|k| 2 * k + 1).collect();
    assert_eq!(idx, expected);
}

#[test]
fn center_sampling_is_identity_when_lengths_match() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let idx = frame_sample_indices(32, 32, SampleMode::Center, &mut rng);
    assert_eq!(idx, (0..32).collect::<Vec<_>>());
}

#[test]
fn center_sampling_stretches_short_clips_by_repeating() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let idx = frame_sample_indices(3, 6, SampleMode::Center, &mut rng);
    assert_eq!(idx, vec![0, 0, 1, 1, 2, 2]);
}

#[test]
fn random_sampling_stays_inside_its_bins() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = frame_sample_indices(64, 32, SampleMode::Random, &mut rng);
        for (k, &i) in idx.iter().enumerate() {
            assert!((2 * k..2 * k + 2).contains(&i), "seed {seed} bin {k} got {i}");
        }
    }
}

#[test]
fn random_sampling_never_exceeds_clip_length() {
    for (t, n) in [(5, 17), (1, 8), (100, 7)] {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let idx = frame_sample_indices(t, n, SampleMode::Random, &mut rng);
        assert_eq!(idx.len(), n);
        assert!(idx.iter().all(|&i| i < t), "t {t} n {n}: {idx:?}");
        assert!(idx.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn sample_frames_copies_the_selected_rows() {
    let pose = grid_pose(64, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let reduced = sample_frames(&pose, 32, SampleMode::Center, &mut rng);
    assert_eq!(reduced.num_frames(), 32);
    for k in 0..32 {
        for j in 0..5 {
            assert_eq!(reduced.coords[[k, j, 0]], pose.coords[[2 * k + 1, j, 0]]);
            assert_eq!(reduced.confidence[[k, j]], pose.confidence[[2 * k + 1, j]]);
        }
    }
}

#[test]
fn pose_file_round_trip_is_bit_exact_for_float32_grids() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.slps");
    let pose = grid_pose(7, 13);
    save_pose_file(&path, &pose).unwrap();
    let loaded = load_pose_file(&path, "p").unwrap();
    assert_eq!(loaded.coords, pose.coords);
    assert_eq!(loaded.confidence, pose.confidence);
    // All coordinates sit in [0,1], so the flag is re-derived as true.
    assert!(loaded.normalized);
}

#[test]
fn pose_file_loader_rejects_malformed_files() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.slps");
    save_pose_file(&good, &grid_pose(3, 4)).unwrap();
    let bytes = std::fs::read(&good).unwrap();

    let bad_magic = dir.path().join("magic.slps");
    let mut b = bytes.clone();
    b[0] = b'X';
    std::fs::write(&bad_magic, &b).unwrap();
    assert!(load_pose_file(&bad_magic, "m").is_err());

    let truncated = dir.path().join("trunc.slps");
    std::fs::write(&truncated, &bytes[..bytes.len() - 5]).unwrap();
    assert!(load_pose_file(&truncated, "t").is_err());

    let trailing = dir.path().join("trail.slps");
    let mut b = bytes.clone();
    b.push(0);
    std::fs::write(&trailing, &b).unwrap();
    assert!(load_pose_file(&trailing, "x").is_err());
}

#[test]
fn corpus_round_trip_preserves_records_and_payloads() {
    let dir = tempfile::tempdir().unwrap();
    let samples = vec![
        SignTextSample {
            id: "a".into(),
            pose: grid_pose(6, NUM_JOINTS),
            text: Some("hello there".into()),
            lang: Lang::SYN,
            gloss_labels: Some(vec![3, 1]),
        },
        SignTextSample {
            id: "b".into(),
            pose: grid_pose(4, NUM_JOINTS),
            text: None,
            lang: Lang::ASL,
            gloss_labels: None,
        },
    ];
    save_corpus(&samples, dir.path()).unwrap();
    let manifest = read_manifest(dir.path()).unwrap();
    assert_eq!(manifest.records.len(), 2);
    assert_eq!(manifest.records[0].num_frames, 6);
    let layout = KeypointLayout::default_79();
    let loaded = load_corpus(&manifest, &layout).unwrap();
    for (orig, got) in samples.iter().zip(&loaded) {
        assert_eq!(got.id, orig.id);
        assert_eq!(got.text, orig.text);
        assert_eq!(got.lang, orig.lang);
        assert_eq!(got.gloss_labels, orig.gloss_labels);
        assert_eq!(got.pose.coords, orig.pose.coords);
    }
}

#[test]
fn corpus_loader_reports_frame_count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let samples = vec![SignTextSample {
        id: "a".into(),
        pose: grid_pose(6, NUM_JOINTS),
        text: None,
        lang: Lang::SYN,
        gloss_labels: None,
    }];
    save_corpus(&samples, dir.path()).unwrap();
    // Corrupt the manifest's frame count.
    let path = dir.path().join("manifest.jsonl");
    let line = std::fs::read_to_string(&path).unwrap().replace("\"num_frames\":6", "\"num_frames\":7");
    std::fs::write(&path, line).unwrap();
    let manifest = read_manifest(dir.path()).unwrap();
    let err = load_corpus(&manifest, &KeypointLayout::default_79());
    assert!(err.is_err());
}

#[test]
fn pose_sequence_rejects_malformed_shapes() {
    assert!(PoseSequence::new(Array3::zeros((0, 4, 2)), Array2::zeros((0, 4)), false).is_err());
    assert!(PoseSequence::new(Array3::zeros((2, 4, 3)), Array2::zeros((2, 4)), false).is_err());
    assert!(PoseSequence::new(Array3::zeros((2, 4, 2)), Array2::zeros((2, 5)), false).is_err());
    let bad_conf = Array2::from_elem((2, 4), 1.5);
    assert!(PoseSequence::new(Array3::zeros((2, 4, 2)), bad_conf, false).is_err());
}

#[test]
fn flattened_coordinates_interleave_x_and_y() {
    let pose = grid_pose(3, 4);
    let flat = pose.coords_flat();
    assert_eq!(flat.dim(), (3, 8));
    for f in 0..3 {
        for j in 0..4 {
            assert_eq!(flat[[f, 2 * j]], pose.coords[[f, j, 0]]);
            assert_eq!(flat[[f, 2 * j + 1]], pose.coords[[f, j, 1]]);
        }
    }
}
