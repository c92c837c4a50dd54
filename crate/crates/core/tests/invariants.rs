use artsy::config::Scoring;
use artsy::engine::GateVector;
use artsy::gate::{balanced_accuracy, calibrate_threshold, gate_fire};
use artsy::metrics::{self, AccuracyMatrix};
use artsy::prototype::{FeatureHead, PrototypeTable};
use artsy::Tensor;
use proptest::prelude::*;

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-10.0f64..10.0, rows * cols).prop_map(move |d| Tensor::new(rows, cols, d).unwrap())
}

fn table(classes: usize, dim: usize) -> impl Strategy<Value = PrototypeTable> {
    tensor(classes, dim).prop_map(move |means| {
        let mut t = PrototypeTable::new(dim);
        let labels: Vec<usize> = (0..classes).collect();
        t.add_class_means(1, &labels, &means, &labels).unwrap();
        t
    })
}

/// Matrix with random per-task test counts and lower-triangular correct counts.
fn matrix() -> impl Strategy<Value = AccuracyMatrix> {
    prop::collection::vec(1usize..60, 1..7).prop_flat_map(|counts| {
        let rows: Vec<_> = (1..=counts.len())
            .map(|t| {
                counts[..t]
                    .iter()
                    .map(|&n| (0..=n).boxed())
                    .collect::<Vec<_>>()
            })
            .collect();
        (Just(counts), rows)
    })
    .prop_map(|(counts, rows)| {
        let mut m = AccuracyMatrix::new(counts);
        for r in rows {
            m.push_row(r).unwrap();
        }
        m
    })
}

proptest! {
    #[test]
    fn gate_fire_is_monotone_in_score(a in 0.0f64..=1.0, b in 0.0f64..=1.0, thr in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(!gate_fire(lo, thr) || gate_fire(hi, thr));
        prop_assert!(gate_fire(thr, thr));
        prop_assert!(gate_fire(a, 0.0));
    }

    #[test]
    fn gate_fire_is_antitone_in_threshold(s in 0.0f64..=1.0, t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(!gate_fire(s, hi) || gate_fire(s, lo));
    }

    #[test]
    fn cosine_argmax_ignores_positive_scaling(
        protos in table(4, 6),
        x in tensor(5, 6),
        c in 1e-3f64..1e3,
    ) {
        let head = FeatureHead::Identity;
        let a = protos.predict(&x, &head, Scoring::Cosine).unwrap();
        let b = protos.predict(&x.scale(c), &head, Scoring::Cosine).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn power_of_two_scaling_is_exact(protos in table(3, 4), x in tensor(4, 4), e in -20i32..20) {
        let head = FeatureHead::Identity;
        let s = 2f64.powi(e);
        prop_assert_eq!(
            protos.predict(&x, &head, Scoring::Cosine).unwrap(),
            protos.predict(&x.scale(s), &head, Scoring::Cosine).unwrap()
        );
    }

    #[test]
    fn avg_is_mean_of_last_exactly(m in matrix()) {
        let last: Vec<f64> = (1..=m.steps()).map(|t| metrics::last_accuracy(&m, t).unwrap()).collect();
        let avg = metrics::avg_series(&last);
        for t in 1..=last.len() {
            let expected = last[..t].iter().sum::<f64>() / t as f64;
            prop_assert_eq!(avg[t - 1].to_bits(), expected.to_bits());
        }
    }

    #[test]
    fn seen_is_weighted_row_exactly(m in matrix()) {
        for t in 1..=m.steps() {
            let (mut num, mut den) = (0.0, 0.0);
            for j in 1..=t {
                let n = m.test_counts[j - 1] as f64;
                num += n * m.get(t, j).unwrap();
                den += n;
            }
            prop_assert_eq!(m.seen[t - 1].to_bits(), (num / den).to_bits());
            let union = m.union_accuracy(t).unwrap();
            prop_assert!((union - m.seen[t - 1]).abs() < 1e-12);
        }
    }

    #[test]
    fn routing_rates_stay_in_unit_interval(
        bits in prop::collection::vec(prop::collection::vec(any::<bool>(), 3), 1..40),
    ) {
        let gates: Vec<GateVector> = bits.into_iter().map(GateVector::new).collect();
        let truth: Vec<usize> = (0..gates.len()).map(|i| i % 3 + 1).collect();
        let r = metrics::routing_accuracy(&gates, &truth).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
        let multi = metrics::multi_fire_rate(&gates);
        prop_assert!((0.0..=1.0).contains(&multi));
        for f in metrics::firing_rates(&gates) {
            prop_assert!((0.0..=1.0).contains(&f));
        }
    }

    #[test]
    fn calibrated_threshold_is_never_worse_than_half(
        pos in prop::collection::vec(0.0f64..=1.0, 1..30),
        neg in prop::collection::vec(0.0f64..=1.0, 1..30),
    ) {
        let thr = calibrate_threshold(&pos, &neg);
        prop_assert!((0.0..=1.0).contains(&thr));
        let bacc = |t: f64| {
            let p: Vec<bool> = pos.iter().map(|&s| gate_fire(s, t)).collect();
            let n: Vec<bool> = neg.iter().map(|&s| gate_fire(s, t)).collect();
            balanced_accuracy(&p, &n)
        };
        prop_assert!(bacc(thr) >= bacc(0.5) - 1e-12);
    }
}
