use cgdp::discovery::{discover_masks, exhaustive_dag_oracle, notears_fit, structural_hamming_distance, NotearsConfig};
use cgdp::numerics::seeded_rng;
use cgdp::scm::{exact_masks, generate_dataset, random_linear_sem, sample_linear_sem, GroundTruthScm};

#[test]
fn five_node_shd() {
    let mut good = 0;
    for seed in 0..20 {
        let mut rng = seeded_rng(1000 + seed);
        let dag = random_linear_sem(5, 0.4, &mut rng).unwrap();
        let x = sample_linear_sem(&dag, 1000, &mut rng).unwrap();
        let res = notears_fit(&x, &NotearsConfig::default()).unwrap();
        let shd = structural_hamming_distance(&res.thresholded(), &dag.weights);
        println!("seed {seed} shd {shd} edges {}", dag.edge_count());
        good += usize::from(shd <= 1);
    }
    assert!(good >= 18, "{good}/20");
}

#[test]
fn three_node_oracle_agreement() {
    let mut good = 0;
    for seed in 0..20 {
        let mut rng = seeded_rng(2000 + seed);
        let dag = random_linear_sem(3, 0.5, &mut rng).unwrap();
        let x = sample_linear_sem(&dag, 1000, &mut rng).unwrap();
        let res = notears_fit(&x, &NotearsConfig::default()).unwrap();
        let oracle = exhaustive_dag_oracle(&x).unwrap();
        good += usize::from(res.edges() == oracle.edges());
    }
    assert!(good >= 19, "{good}/20");
}

#[test]
fn scm_masks_recovered() {
    for seed in 0..5 {
        let scm = GroundTruthScm::random_sparse(6, 4, 2, &mut seeded_rng(seed)).unwrap();
        let data = generate_dataset(&scm, 200, 50, 1.0, &mut seeded_rng(seed + 100)).unwrap();
        let masks = discover_masks(&data, &NotearsConfig::default()).unwrap();
        let diff = masks.differences(&exact_masks(&scm));
        println!("seed {seed} {diff:?}");
        assert!(diff.iter().all(|&x| x <= 1), "{diff:?}");
    }
}
