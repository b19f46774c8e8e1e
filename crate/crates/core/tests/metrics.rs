use proptest::prelude::*;
use tsdistill::metrics::{evaluate_series, mae, mase, mse, naive1, naive2, smape, SeriesForecast};

#[test]
fn closed_form_values() {
    let p = [1.0, 2.0, 3.0];
    let y = [2.0, 2.0, 5.0];
    assert_eq!(mse(&p, &y), 5.0 / 3.0);
    assert_eq!(mae(&p, &y), 1.0);
    let s = 200.0 / 3.0 * (1.0 / 3.0 + 0.0 + 2.0 / 8.0);
    assert!((smape(&p, &y) - s).abs() < 1e-12);
    // Seasonal naive scale with m = 2 over [1, 3, 2, 5]: |2-1|, |5-3| → 1.5.
    assert!((mase(&p, &y, &[1.0, 3.0, 2.0, 5.0], 2).unwrap() - 1.0 / 1.5).abs() < 1e-12);
}

#[test]
fn smape_of_zero_pair_is_zero() {
    assert_eq!(smape(&[0.0], &[0.0]), 0.0);
}

#[test]
fn per_horizon_and_pooled_agree() {
    let ins = [1.0, 2.0, 4.0, 3.0];
    let a = SeriesForecast {
        pred: &[1.0, 2.0],
        target: &[2.0, 2.0],
        insample: &ins,
    };
    let b = SeriesForecast {
        pred: &[0.0, 5.0],
        target: &[1.0, 3.0],
        insample: &ins,
    };
    let r = evaluate_series(&[a, b], None, 1).unwrap();
    assert_eq!(r.per_horizon.len(), 2);
    let mean_mse = r.per_horizon.iter().map(|h| h.mse).sum::<f64>() / 2.0;
    assert!((mean_mse - r.mse).abs() < 1e-12);
    assert!(r.owa.is_none());
}

#[test]
fn naive2_falls_back_for_nonpositive_series() {
    let x: Vec<f64> = (0..24).map(|t| ((t % 4) as f64) - 1.0).collect();
    assert_eq!(naive2(&x, 3, 4), naive1(&x, 3));
}

proptest! {
    #[test]
    fn metric_bounds(v in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..40)) {
        let (p, y): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        let s = smape(&p, &y);
        prop_assert!((0.0..=200.0 + 1e-9).contains(&s));
        prop_assert!(mse(&p, &y) >= 0.0);
        prop_assert!(mae(&p, &y) * mae(&p, &y) <= mse(&p, &y) * (1.0 + 1e-12) + 1e-12);
        prop_assert_eq!(smape(&p, &y), smape(&y, &p));
    }
}
