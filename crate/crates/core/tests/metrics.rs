use ctbn::eval::roc_pr;
use ctbn::model::Graph;
use ctbn::seeded_rng;
use rand::Rng;

// five genes, eight regulatory edges
fn irma_like_truth() -> Graph {
    Graph::from_edges(5, &[(0, 1), (1, 2), (2, 0), (2, 3), (2, 4), (4, 0), (3, 1), (1, 4)]).unwrap()
}

fn random_scores(draws: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let truth = irma_like_truth();
    let mut rng = seeded_rng(seed);
    (0..draws)
        .map(|_| {
            let s: Vec<Vec<f64>> = (0..5).map(|_| (0..5).map(|_| rng.random()).collect()).collect();
            let r = roc_pr(&s, &truth).unwrap();
            (r.auroc, r.aupr)
        })
        .unzip()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn random_scores_hit_the_published_baseline_corridor() {
    let (auroc, _) = random_scores(10_000, 71);
    let m = mean(&auroc);
    assert!(
        (m - 0.65).abs() <= 0.1,
        "mean AUROC of uniform random scores is {m:.4}, outside 0.65 +- 0.1"
    );
}

#[test]
fn random_scores_are_chance_level() {
    let (auroc, aupr) = random_scores(10_000, 72);
    // sd of a single AUROC here is about 0.13
    assert!((mean(&auroc) - 0.5).abs() < 0.005, "{}", mean(&auroc));
    // expected average precision sits somewhat above the prevalence 8/20
    let ap = mean(&aupr);
    assert!(ap > 0.4 && ap < 0.5, "{ap}");
}
