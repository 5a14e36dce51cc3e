use ndarray::Array2;
use pge_core::analysis::*;
use pge_core::clustering::{cluster_nodes, ClusterAssignment, NodeClustering};
use pge_core::encoder::EncoderMode;
use pge_core::experiment::ModelConfig;
use pge_core::graph::{GraphParts, PropertyGraph};
use pge_core::sampler::BiasConfig;
use pge_core::synthetic::{generate_synthetic, SyntheticSpec};
use pge_core::trainer::{Task, TrainConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_graph(seed: u64, n: usize, p: f64) -> PropertyGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let props = Array2::from_shape_simple_fn((n, 3), || rng.random_range(0.0..1.0));
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random_bool(p) {
                edges.push((u, v));
            }
        }
    }
    PropertyGraph::build(GraphParts { node_props: props, edges, ..Default::default() }).unwrap()
}

fn random_clusters(seed: u64, n: usize, k: usize) -> ClusterAssignment {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ClusterAssignment::from_labels(&(0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect::<Vec<_>>())
}

fn planted(n: usize, sep: f64, seed: u64) -> (PropertyGraph, SyntheticSpec) {
    let spec = SyntheticSpec {
        n_nodes: n,
        n_communities: 2,
        intra_edge_prob: 0.15,
        inter_edge_prob: 0.05,
        property_dim: 4,
        blob_separation: sep,
        signed_edges: false,
    };
    (generate_synthetic(&spec, seed).unwrap(), spec)
}

#[test]
fn row_sums_count_non_isolated_nodes() {
    let g = random_graph(1, 20, 0.1);
    let q = strategy_unbiased(&g);
    let isolated = (0..20).filter(|&v| g.incident_degree(v) == 0).count();
    let total: f64 = (0..20).map(|v| q.row_sum(v)).sum();
    assert!((total - (20 - isolated) as f64).abs() < 1e-12);
    let p = strategy_biased(&g, &random_clusters(1, 20, 3), &BiasConfig { b_s: 1.0, b_d: 7.0, ..Default::default() });
    for v in 0..20 {
        let s = p.row_sum(v);
        assert!(if g.incident_degree(v) == 0 { s == 0.0 } else { (s - 1.0).abs() < 1e-12 });
    }
}

#[test]
fn equal_biases_or_one_cluster_reproduce_unbiased() {
    let g = random_graph(2, 25, 0.2);
    let q = strategy_unbiased(&g);
    let c = random_clusters(2, 25, 4);
    for b in [0.3, 1.0, 3.0, 1000.0] {
        assert_eq!(strategy_biased(&g, &c, &BiasConfig { b_s: b, b_d: b, ..Default::default() }), q);
    }
    let one = ClusterAssignment::from_labels(&[0; 25]);
    assert_eq!(strategy_biased(&g, &one, &BiasConfig { b_s: 1.0, b_d: 1000.0, ..Default::default() }), q);
}

#[test]
fn constant_similarity_gives_constant_expectation() {
    let mut g = random_graph(3, 15, 0.3);
    g = PropertyGraph::build(GraphParts {
        node_props: Array2::from_elem((15, 2), 1.0),
        edges: g.canonical_edges().iter().map(|&e| (g.source(e), g.target(e))).collect(),
        ..Default::default()
    })
    .unwrap();
    let m = SimilarityModel { alpha: 1.0 };
    let p = strategy_biased(&g, &random_clusters(3, 15, 2), &BiasConfig { b_s: 1.0, b_d: 9.0, ..Default::default() });
    assert!((expected_step_similarity(&p, &m, &g).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn unbiased_expectation_matches_enumeration() {
    let g = PropertyGraph::build(GraphParts {
        node_props: ndarray::array![[1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [2.0, 1.0]],
        edges: vec![(0, 1), (1, 2), (2, 3), (0, 2)],
        ..Default::default()
    })
    .unwrap();
    let m = SimilarityModel::default();
    let mut total = 0.0;
    for v in 0..4 {
        let nbrs: Vec<usize> = (0..4).filter(|&u| g.has_edge(v, u)).collect();
        total += nbrs.iter().map(|&u| m.similarity(&g, v, u)).sum::<f64>() / nbrs.len() as f64;
    }
    let got = expected_step_similarity(&strategy_unbiased(&g), &m, &g).unwrap();
    assert!((got - total / 4.0).abs() < 1e-12);
}

#[test]
fn dissimilar_bias_lowers_expectation_on_planted_graph() {
    let (g, spec) = planted(120, 4.0, 5);
    let c = ClusterAssignment::from_labels(&(0..120).map(|v| spec.community_of(v)).collect::<Vec<_>>());
    let m = SimilarityModel::default();
    let even = expected_step_similarity(&strategy_biased(&g, &c, &BiasConfig { b_s: 1.0, b_d: 1.0, ..Default::default() }), &m, &g).unwrap();
    let cross = expected_step_similarity(&strategy_biased(&g, &c, &BiasConfig { b_s: 1.0, b_d: 1000.0, ..Default::default() }), &m, &g).unwrap();
    assert!(cross < even, "{cross} vs {even}");
    let report = printed_form_report(&g, &c, &BiasConfig { b_s: 1.0, b_d: 1000.0, ..Default::default() }, &m).unwrap();
    assert_eq!(report.k, 2);
    assert!((report.per_step_expectation - cross).abs() < 1e-12);
}

#[test]
fn gap_degenerates_with_constant_properties() {
    let g = PropertyGraph::build(GraphParts { node_props: Array2::from_elem((10, 3), 2.0), edges: vec![(0, 1)], ..Default::default() }).unwrap();
    let c = ClusterAssignment::from_labels(&[0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
    let (w, a) = within_cluster_gap(&g, &c, &SimilarityModel { alpha: 1.0 }).unwrap();
    assert!((w - a).abs() < 1e-12);
    let singletons = ClusterAssignment::from_labels(&(0..10).collect::<Vec<_>>());
    assert!(within_cluster_gap(&g, &singletons, &SimilarityModel::default()).is_err());
}

#[test]
fn gap_matches_noise_free_blobs() {
    // blob means on orthogonal axes, no noise: cosine 1 inside, 0 across
    let (n1, n2) = (7usize, 5usize);
    let props = Array2::from_shape_fn((n1 + n2, 2), |(v, j)| f64::from(u8::from((v < n1) == (j == 0))) * 3.0);
    let g = PropertyGraph::build(GraphParts { node_props: props, edges: vec![(0, 8)], ..Default::default() }).unwrap();
    let c = ClusterAssignment::from_labels(&(0..n1 + n2).map(|v| usize::from(v >= n1)).collect::<Vec<_>>());
    let (w, a) = within_cluster_gap(&g, &c, &SimilarityModel { alpha: 1.0 }).unwrap();
    let pairs = |m: usize| (m * (m - 1) / 2) as f64;
    let analytic_global = (pairs(n1) + pairs(n2)) / pairs(n1 + n2);
    assert!((w - 1.0).abs() < 1e-6);
    assert!((a - analytic_global).abs() < 1e-6);
}

#[test]
fn planted_partition_gap_is_positive() {
    for seed in 0..5 {
        let (g, _) = planted(100, 3.0, seed);
        let c = cluster_nodes(&g, NodeClustering::Kmeans { k: Some(2), max_iter: 100 }, seed).unwrap();
        let (w, a) = within_cluster_gap(&g, &c, &SimilarityModel::default()).unwrap();
        assert!(w > a, "seed {seed}: {w} <= {a}");
    }
}

#[test]
fn triangle_inequality() {
    let g = random_graph(6, 15, 0.3);
    let c = random_clusters(6, 15, 3);
    let s: Vec<StrategyMatrix> =
        [0.2, 1.0, 30.0].iter().map(|&b| strategy_biased(&g, &c, &BiasConfig { b_s: 1.0, b_d: b, ..Default::default() })).collect();
    let d = |i: usize, j: usize| l1_strategy_distance(&s[i], &s[j]).unwrap();
    assert_eq!(d(0, 0), 0.0);
    assert!(d(0, 2) <= d(0, 1) + d(1, 2) + 1e-12);
}

fn cross_preferring_target(g: &PropertyGraph, c: &ClusterAssignment, ratio: f64) -> StrategyMatrix {
    StrategyMatrix::from_values(g, |v| {
        let raw: Vec<f64> = g.incident(v).map(|(u, _)| if c.same(u, v) { 1.0 } else { ratio }).collect();
        let t: f64 = raw.iter().sum();
        raw.iter().map(|x| x / t).collect()
    })
    .unwrap()
}

#[test]
fn fitting_recovers_unbiased_and_cross_preference() {
    let (g, spec) = planted(80, 3.0, 7);
    let c = ClusterAssignment::from_labels(&(0..80).map(|v| spec.community_of(v)).collect::<Vec<_>>());
    let grid = [0.01, 0.1, 0.5, 1.0, 2.0, 4.0, 10.0, 100.0];
    let q = strategy_unbiased(&g);
    let fit = fit_bias_to_target(&g, &c, &q, &grid).unwrap();
    assert_eq!(fit.best_b_d, 1.0);
    assert_eq!(fit.best_distance, 0.0);
    let target = cross_preferring_target(&g, &c, 4.0);
    let fit = fit_bias_to_target(&g, &c, &target, &grid).unwrap();
    assert!(fit.best_distance < l1_strategy_distance(&target, &q).unwrap());
    assert_eq!(fit.best_b_d, 4.0);
    for &(b_d, dist) in &fit.curve {
        let p = strategy_biased(&g, &c, &BiasConfig { b_s: 1.0, b_d, ..Default::default() });
        assert_eq!(dist, l1_strategy_distance(&target, &p).unwrap());
    }
}

fn sweep_config(bd_grid: Vec<f64>, seeds: Vec<u64>) -> SweepConfig {
    SweepConfig {
        k_grid: vec![2, 3],
        bd_grid,
        seeds,
        epochs: 3,
        bias: BiasConfig { sample_size: 5, ..Default::default() },
        train: TrainConfig::for_task(Task::NodeClass, 0),
        model: ModelConfig { mode: EncoderMode::Plain, hidden: 8, ..Default::default() },
        split_ratios: (0.7, 0.1, 0.2),
    }
}

#[test]
fn unit_bias_grid_ignores_clustering() {
    let (g, _) = planted(60, 3.0, 8);
    let rows = bias_sweep(&g, &sweep_config(vec![1.0], vec![4, 5])).unwrap();
    assert_eq!(rows.len(), 2 * 1 * 2);
    for s in [4, 5] {
        let f: Vec<f64> = rows.iter().filter(|r| r.seed == s).map(|r| r.f1_micro).collect();
        assert!(f.windows(2).all(|w| w[0] == w[1]), "{f:?}");
    }
}

#[test]
fn sweep_csv_has_one_row_per_cell() {
    let (g, _) = planted(50, 3.0, 9);
    let rows = bias_sweep(&g, &sweep_config(vec![0.5, 2.0, 8.0], vec![1])).unwrap();
    assert_eq!(rows.len(), 2 * 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.csv");
    write_sweep_csv(&rows, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("k,b_d,seed,f1_micro,f1_macro"));
    assert_eq!(lines.count(), 6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn shifting_mass_to_more_similar_neighbor_never_lowers_expectation(seed in 0u64..1000, shift in 0.0f64..1.0) {
        let g = random_graph(seed, 10, 0.4);
        let m = SimilarityModel::default();
        let q = strategy_unbiased(&g);
        let moved = StrategyMatrix::from_values(&g, |v| {
            let (cols, vals) = q.row(v);
            let mut vals = vals.to_vec();
            if cols.len() >= 2 {
                let sims: Vec<f64> = cols.iter().map(|&u| m.similarity(&g, v, u)).collect();
                let hi = (0..cols.len()).max_by(|&a, &b| sims[a].total_cmp(&sims[b])).unwrap();
                let lo = (0..cols.len()).min_by(|&a, &b| sims[a].total_cmp(&sims[b])).unwrap();
                let amount = vals[lo] * shift;
                vals[lo] -= amount;
                vals[hi] += amount;
            }
            vals
        }).unwrap();
        let before = expected_step_similarity(&q, &m, &g);
        let after = expected_step_similarity(&moved, &m, &g);
        if let (Ok(b), Ok(a)) = (before, after) {
            prop_assert!(a >= b - 1e-12);
        }
    }
}
