use lanekit::labelkit::{to_row_anchors, Lane2D, RowAnchorLabel, MISSING};
use lanekit::lanenet::{decode_grid, encode_labels_to_grid, GridConfig};
use lanekit::rng::SeededRng;

/// 1-3 straight lanes, pairwise at least 200 px apart at every row.
fn random_lanes(rng: &mut SeededRng) -> Vec<Lane2D> {
    let count = 1 + rng.index(3);
    let mut lanes: Vec<Lane2D> = Vec::new();
    while lanes.len() < count {
        let top = rng.range(160.0, 400.0);
        let u_bottom = rng.range(60.0, 1220.0);
        let u_top = u_bottom + rng.range(-200.0, 200.0);
        if !(40.0..1240.0).contains(&u_top) {
            continue;
        }
        let cand = Lane2D::new(vec![(u_top, top), (u_bottom, 719.0)]).unwrap();
        let far = lanes.iter().all(|l| {
            (0..=56).map(|r| 160.0 + r as f64 * 10.0).all(|v| match (l.u_at(v), cand.u_at(v)) {
                (Some(a), Some(b)) => (a - b).abs() > 200.0,
                _ => true,
            })
        });
        if far {
            lanes.push(cand);
        }
    }
    lanes
}

#[test]
fn decode_of_encode_recovers_lanes() {
    let cfg = GridConfig::default();
    let rows = RowAnchorLabel::rows(160, 710, 10);
    for seed in 0..100 {
        let mut rng = SeededRng::new(seed);
        let lanes = random_lanes(&mut rng);
        let decoded = decode_grid(&encode_labels_to_grid(&lanes, &cfg), 0.5);
        assert_eq!(decoded.len(), lanes.len(), "seed {seed}");
        let gt = to_row_anchors(&lanes, &rows);
        let pred = to_row_anchors(&decoded, &rows);
        for g in &gt.xs {
            let best = pred
                .xs
                .iter()
                .map(|p| {
                    let shared: Vec<f64> = g
                        .iter()
                        .zip(p)
                        .filter(|(a, b)| **a != MISSING && **b != MISSING)
                        .map(|(a, b)| (a - b).abs())
                        .collect();
                    (shared.len(), shared.iter().cloned().fold(0.0, f64::max))
                })
                .filter(|(n, _)| *n > 0)
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            let valid = g.iter().filter(|x| **x != MISSING).count();
            assert!(best.0 + 2 >= valid, "seed {seed}: {} of {valid} rows recovered", best.0);
            assert!(best.1 < 2.0, "seed {seed}: max error {}", best.1);
        }
    }
}
