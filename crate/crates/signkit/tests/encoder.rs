//! Graph embedding, branch encoding, and fusion: dense-math oracles and
//! structural guarantees.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use signkit::encoder::{
    normalized_adjacency, EmbedKind, GcnEmbed, ModelConfig, PoseDecoder, SignEncoder,
};
use signkit::pose_data::{KeypointLayout, PoseSequence};
use tapegrad::{ParamStore, Tape};

fn random_pose(t: usize, k: usize, seed: u64) -> PoseSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = Array3::from_shape_fn((t, k, 2), |_| rng.random_range(0.05..0.95));
    let conf = Array2::from_elem((t, k), 1.0);
    PoseSequence::new(coords, conf, true).unwrap()
}

#[test]
fn adjacency_normalization_matches_hand_computation() {
    // Path graph 0 - 1 - 2 with self-loops: degrees 2, 3, 2.
    let adj = normalized_adjacency(3, &[(0, 1), (1, 2)]).to_dense();
    let s6 = 1.0 / 6.0f64.sqrt();
    let expected = ndarray::arr2(&[
        [0.5, s6, 0.0],
        [s6, 1.0 / 3.0, s6],
        [0.0, s6, 0.5],
    ]);
    for i in 0..3 {
        for j in 0..3 {
            assert!((adj[[i, j]] - expected[[i, j]]).abs() < 1e-15, "({i},{j})");
        }
    }
}

#[test]
fn gcn_layers_match_a_dense_reimplementation() {
    let edges = [(0usize, 1usize), (1, 2), (2, 3), (0, 3)];
    let (nodes, frames) = (4, 3);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let gcn = GcnEmbed::new(&mut store, "g", nodes, &edges, &[2, 3, 3], &mut rng);

    let mut data = ChaCha8Rng::seed_from_u64(12);
    let x = Array2::from_shape_fn((frames * nodes, 2), |_| data.random_range(-1.0..1.0));
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = gcn.forward(&mut tape, &store, xv, frames);
    let got = tape.value(out).clone();

    // Dense reference: per frame, H' = relu(A_hat (H W)).
    let a_hat = normalized_adjacency(nodes, &edges).to_dense();
    let mut h = x;
    for &w in &gcn.weights {
        let wv = store.value(w);
        let mut next = Array2::zeros((frames * nodes, wv.dim().1));
        for f in 0..frames {
            let rows = h.slice(ndarray::s![f * nodes..(f + 1) * nodes, ..]);
            let block = a_hat.dot(&rows.dot(wv)).mapv(|v: f64| v.max(0.0));
            next.slice_mut(ndarray::s![f * nodes..(f + 1) * nodes, ..]).assign(&block);
        }
        h = next;
    }
    assert_eq!(got.dim(), h.dim());
    for (a, b) in got.iter().zip(h.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn graph_embedding_reads_out_per_part_means() {
    let layout = KeypointLayout::default_79();
    let cfg = ModelConfig::desk();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // A twin GCN built from a cloned rng draws identical weights, exposing
    // the raw node features the encoder reads out.
    let mut twin_rng = rng.clone();
    let encoder = SignEncoder::new(&mut store, cfg.clone(), &layout, &mut rng).unwrap();
    let mut twin_store = ParamStore::new();
    let mut channels = vec![2];
    channels.extend(std::iter::repeat(cfg.d_g).take(cfg.gcn_layers));
    let twin = GcnEmbed::new(
        &mut twin_store,
        "encoder.gcn",
        layout.total_joints,
        &layout.skeleton_edges,
        &channels,
        &mut twin_rng,
    );

    let pose = random_pose(4, 79, 3);
    let mut tape = Tape::new();
    let (manual, _nonmanual) = encoder.embed_pose(&mut tape, &store, &pose).unwrap();
    let manual = tape.value(manual).clone();

    let mut flat = Array2::zeros((4 * 79, 2));
    for f in 0..4 {
        for j in 0..79 {
            flat[[f * 79 + j, 0]] = pose.coords[[f, j, 0]];
            flat[[f * 79 + j, 1]] = pose.coords[[f, j, 1]];
        }
    }
    let mut tape2 = Tape::new();
    let xv = tape2.constant(flat);
    let h = twin.forward(&mut tape2, &twin_store, xv, 4);
    let h = tape2.value(h);
    let manual_set = layout.manual_set();
    for f in 0..4 {
        for c in 0..cfg.d_g {
            let mean: f64 =
                manual_set.iter().map(|&j| h[[f * 79 + j, c]]).sum::<f64>() / manual_set.len() as f64;
            assert!((manual[[f, c]] - mean).abs() < 1e-12, "frame {f} channel {c}");
        }
    }
}

#[test]
fn fused_output_is_the_exact_branch_concatenation() {
    let layout = KeypointLayout::default_79();
    let cfg = ModelConfig { dropout: 0.0, ..ModelConfig::desk() };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let encoder = SignEncoder::new(&mut store, cfg.clone(), &layout, &mut rng).unwrap();
    let pose = random_pose(6, 79, 23);
    let mut tape = Tape::new();
    let vars = encoder.forward(&mut tape, &store, &pose, &mut None).unwrap();
    let m = tape.value(vars.manual).clone();
    let n = tape.value(vars.nonmanual).clone();
    let fused = tape.value(vars.fused);
    assert_eq!(fused.dim(), (6, cfg.fused_dim()));
    for f in 0..6 {
        for c in 0..cfg.d1 {
            assert_eq!(fused[[f, c]], m[[f, c]]);
        }
        for c in 0..cfg.d2 {
            assert_eq!(fused[[f, cfg.d1 + c]], n[[f, c]]);
        }
    }
}

#[test]
fn linear_embedding_is_one_affine_map_of_part_coordinates() {
    let layout = KeypointLayout::default_79();
    let cfg = ModelConfig { embed: EmbedKind::Linear, ..ModelConfig::desk() };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let encoder = SignEncoder::new(&mut store, cfg.clone(), &layout, &mut rng).unwrap();
    let pose = random_pose(5, 79, 31);
    let mut tape = Tape::new();
    let (manual, nonmanual) = encoder.embed_pose(&mut tape, &store, &pose).unwrap();

    for (var, subset, name) in [
        (manual, layout.manual_set(), "encoder.lin_embed.manual"),
        (nonmanual, layout.nonmanual_set(), "encoder.lin_embed.nonmanual"),
    ] {
        let w = store.value(store.by_name(name).unwrap());
        let mut x = Array2::zeros((5, 2 * subset.len()));
        for f in 0..5 {
            for (i, &j) in subset.iter().enumerate() {
                x[[f, 2 * i]] = pose.coords[[f, j, 0]];
                x[[f, 2 * i + 1]] = pose.coords[[f, j, 1]];
            }
        }
        let expected = x.dot(w);
        let got = tape.value(var);
        for (a, b) in got.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12, "{name}");
        }
    }
}

#[test]
fn zero_blocks_reduce_branches_to_the_input_projections() {
    let layout = KeypointLayout::default_79();
    let cfg = ModelConfig { n_blocks: 0, dropout: 0.0, ..ModelConfig::desk() };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let encoder = SignEncoder::new(&mut store, cfg.clone(), &layout, &mut rng).unwrap();
    let pose = random_pose(3, 79, 43);

    let mut tape = Tape::new();
    let (m_emb, _) = encoder.embed_pose(&mut tape, &store, &pose).unwrap();
    let emb = tape.value(m_emb).clone();
    let vars = encoder.forward(&mut tape, &store, &pose, &mut None).unwrap();
    let manual = tape.value(vars.manual);

    let w = store.value(store.by_name("encoder.manual.proj.w").unwrap());
    let b = store.value(store.by_name("encoder.manual.proj.b").unwrap());
    let expected = emb.dot(w) + b;
    assert_eq!(manual.dim(), (3, cfg.d1));
    for (a, e) in manual.iter().zip(expected.iter()) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn decoder_maps_fused_features_to_joint_coordinates() {
    let cfg = ModelConfig::desk();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let decoder = PoseDecoder::new(&mut store, &cfg, 79, &mut rng);
    let mut tape = Tape::new();
    let fused = tape.constant(Array2::from_elem((4, cfg.fused_dim()), 0.3));
    let out = decoder.forward(&mut tape, &store, fused);
    assert_eq!(tape.shape(out), (4, 158));
}

#[test]
fn config_validation_rejects_inconsistent_settings() {
    assert!(ModelConfig { d1: 30, ..ModelConfig::desk() }.validate().is_err());
    assert!(ModelConfig { dropout: 1.0, ..ModelConfig::desk() }.validate().is_err());
    assert!(ModelConfig { d_g: 0, ..ModelConfig::desk() }.validate().is_err());
    assert!(ModelConfig::desk().validate().is_ok());
    assert!(ModelConfig::paper().validate().is_ok());
}

#[test]
fn encoder_rejects_wrong_joint_counts_and_overlong_clips() {
    let layout = KeypointLayout::default_79();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let cfg = ModelConfig { max_len: 4, dropout: 0.0, ..ModelConfig::desk() };
    let encoder = SignEncoder::new(&mut store, cfg, &layout, &mut rng).unwrap();

    let mut tape = Tape::new();
    let narrow = random_pose(3, 10, 1);
    assert!(encoder.embed_pose(&mut tape, &store, &narrow).is_err());
    let long = random_pose(6, 79, 2);
    assert!(encoder.forward(&mut tape, &store, &long, &mut None).is_err());
}
