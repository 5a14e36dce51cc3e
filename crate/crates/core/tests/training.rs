use pge_core::clustering::{cluster_nodes, NodeClustering};
use pge_core::encoder::{init_params, EncoderDims, EncoderMode};
use pge_core::graph::PropertyGraph;
use pge_core::sampler::BiasConfig;
use pge_core::synthetic::{generate_synthetic, SyntheticSpec};
use pge_core::trainer::{draw_negatives, train, Objective, Task, TrainConfig, TrainError, TrainSetup};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn planted(n: usize, sep: f64, seed: u64) -> PropertyGraph {
    let spec = SyntheticSpec {
        n_nodes: n,
        n_communities: 2,
        intra_edge_prob: 0.3,
        inter_edge_prob: 0.02,
        property_dim: 2,
        blob_separation: sep,
        signed_edges: false,
    };
    generate_synthetic(&spec, seed).unwrap()
}

fn node_class_history(g: &PropertyGraph, epochs: usize, seed: u64) -> Vec<f64> {
    let clusters = cluster_nodes(g, NodeClustering::Kmeans { k: Some(2), max_iter: 100 }, seed).unwrap();
    let bias = BiasConfig { sample_size: 5, seed, ..Default::default() };
    let setup = TrainSetup { g, clusters: &clusters, edge_clusters: None, bias };
    let mut cfg = TrainConfig::for_task(Task::NodeClass, seed);
    cfg.epochs = epochs;
    let dims = EncoderDims::for_mode(EncoderMode::Plain, g.prop_dim(), 16, g.label_dim(), 0, false);
    let params = init_params(dims, EncoderMode::Plain, 0, false, seed).unwrap();
    let nodes: Vec<usize> = (0..g.n_nodes()).collect();
    train(&setup, &cfg, params, Objective::NodeClass { nodes: &nodes }).unwrap().loss_history
}

#[test]
fn loss_decreases_on_small_planted_graph() {
    let g = planted(40, 3.0, 1);
    let h = node_class_history(&g, 30, 1);
    assert_eq!(h.len(), 30);
    assert!(h[29] < h[0], "{h:?}");
}

#[test]
fn separable_instance_halves_loss_within_fifty_epochs() {
    let g = planted(60, 8.0, 2);
    let h = node_class_history(&g, 50, 2);
    assert!(h[49] <= 0.5 * h[0], "first {} last {}", h[0], h[49]);
}

#[test]
fn zero_epochs_rejected() {
    let g = planted(20, 3.0, 0);
    let clusters = cluster_nodes(&g, NodeClustering::Kmeans { k: Some(2), max_iter: 50 }, 0).unwrap();
    let setup = TrainSetup { g: &g, clusters: &clusters, edge_clusters: None, bias: BiasConfig::default() };
    let mut cfg = TrainConfig::for_task(Task::NodeClass, 0);
    cfg.epochs = 0;
    let params = init_params(EncoderDims::for_mode(EncoderMode::Plain, 2, 4, 2, 0, false), EncoderMode::Plain, 0, false, 0).unwrap();
    let r = train(&setup, &cfg, params, Objective::NodeClass { nodes: &[0, 1] });
    assert!(matches!(r, Err(TrainError::Config(_))));
}

#[test]
fn loss_history_independent_of_threads() {
    let g = planted(80, 3.0, 4);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| node_class_history(&g, 5, 4))
    };
    let a = run(1);
    let b = run(3);
    assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
}

#[test]
fn link_prediction_loss_decreases() {
    let g = planted(60, 3.0, 5);
    let clusters = cluster_nodes(&g, NodeClustering::Kmeans { k: Some(2), max_iter: 100 }, 5).unwrap();
    let setup = TrainSetup { g: &g, clusters: &clusters, edge_clusters: None, bias: BiasConfig { sample_size: 5, ..Default::default() } };
    let mut cfg = TrainConfig::for_task(Task::LinkPred, 5);
    cfg.epochs = 20;
    cfg.neg_samples = 5;
    let params = init_params(EncoderDims::for_mode(EncoderMode::Plain, 2, 16, 8, 0, false), EncoderMode::Plain, 0, false, 5).unwrap();
    let positives: Vec<(usize, usize)> = g.canonical_edges().iter().map(|&e| (g.source(e), g.target(e))).collect();
    let h = train(&setup, &cfg, params, Objective::LinkPred { positives: &positives }).unwrap().loss_history;
    assert!(h[19] < h[0], "{h:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn negatives_avoid_source_and_target(seed in any::<u64>(), count in 1usize..30) {
        let g = planted(30, 2.0, seed % 7);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for e in g.canonical_edges() {
            let (u, v) = (g.source(e), g.target(e));
            let negs = draw_negatives(&g, u, v, count, &mut rng);
            prop_assert_eq!(negs.len(), count);
            prop_assert!(negs.iter().all(|&x| x != u && x != v));
        }
    }
}
