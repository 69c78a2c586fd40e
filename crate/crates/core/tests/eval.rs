mod common;

use common::*;
use reinpatch::backbone::Backbone;
use reinpatch::baselines::FixedPatcher;
use reinpatch::eval::{evaluate, mae, mse, Patcher, Selection};
use reinpatch::partition::CompressionConfig;
use reinpatch::policy::PolicyMode;

#[test]
fn metric_laws() {
    let mut r = rng(1);
    for _ in 0..500 {
        let p = random_series(&mut r, 12);
        let t = random_series(&mut r, 12);
        let (m, a) = (mse(&p, &t).unwrap(), mae(&p, &t).unwrap());
        assert!(m >= 0.0 && a >= 0.0);
        assert!(a * a <= m + 1e-12);
    }
    let t = random_series(&mut r, 5);
    assert_eq!(mse(&t, &t).unwrap(), 0.0);
    assert_eq!(mae(&t, &t).unwrap(), 0.0);
}

#[test]
fn aggregation_matches_per_window_means() {
    let mut r = rng(2);
    let backbone = Backbone::new(small_backbone_config(16, 4), &mut r).unwrap();
    let windows: Vec<_> = (0..9).map(|_| random_window(&mut r, 16, 4)).collect();
    let comp = CompressionConfig::new(2.0).unwrap();
    let fixed = FixedPatcher::Static { patch_size: 4 };
    let report = evaluate(&backbone, Patcher::Fixed(&fixed), &comp, &windows, 0).unwrap();

    let b = reinpatch::partition::partition_to_boundaries(&reinpatch::baselines::static_partition(16, 4).unwrap());
    let (mut m, mut a) = (0.0, 0.0);
    for w in &windows {
        let pred = backbone.forecast(w, &b, &comp).unwrap();
        m += mse(&pred, &w.target).unwrap();
        a += mae(&pred, &w.target).unwrap();
    }
    assert!((report.mse - m / 9.0).abs() < 1e-10);
    assert!((report.mae - a / 9.0).abs() < 1e-10);
    assert_eq!(report.per_step.len(), 4);

    let doubled: Vec<_> = windows.iter().chain(&windows).cloned().collect();
    let again = evaluate(&backbone, Patcher::Fixed(&fixed), &comp, &doubled, 0).unwrap();
    assert!((again.mse - report.mse).abs() < 1e-12 && (again.mae - report.mae).abs() < 1e-12);
    assert!(evaluate(&backbone, Patcher::Fixed(&fixed), &comp, &[], 0).is_err());
}

#[test]
fn learned_selections_are_deterministic_given_seed() {
    let mut r = rng(3);
    let backbone = Backbone::new(small_backbone_config(16, 4), &mut r).unwrap();
    let policy = small_policy(3, PolicyMode::Contextual, 1, 16);
    let windows: Vec<_> = (0..5).map(|_| random_window(&mut r, 16, 4)).collect();
    let comp = CompressionConfig::new(2.0).unwrap();
    for selection in [Selection::Modal, Selection::Sample, Selection::ExpectedK, Selection::TopK { rate: 4.0 }] {
        let p = Patcher::Learned { policy: &policy, selection };
        let a = evaluate(&backbone, p, &comp, &windows, 9).unwrap();
        let b = evaluate(&backbone, p, &comp, &windows, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.compression >= 2.0);
    }
    let topk = evaluate(&backbone, Patcher::Learned { policy: &policy, selection: Selection::TopK { rate: 4.0 } }, &comp, &windows, 0).unwrap();
    // k picked steps plus the implicit closing patch when the last step is not among them
    assert!(topk.compression >= 16.0 / 5.0 && topk.compression <= 4.0);
}
