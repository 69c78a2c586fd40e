mod common;

use common::rng;
use rand::Rng;
use reinpatch::data::{
    read_csv, synth_piecewise, window_count, Dataset, SeriesTable, Split, SplitSpec, ETT_HOURLY_MONTH,
};

fn ett_like(rows: usize) -> String {
    let mut s = String::from("date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT\n");
    let start = chrono::NaiveDate::from_ymd_opt(2016, 7, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
    for r in 0..rows {
        let ts = start + chrono::Duration::hours(r as i64);
        s.push_str(&ts.format("%Y-%m-%d %H:%M:%S").to_string());
        for c in 0..7 {
            s.push_str(&format!(",{:.3}", ((r * (c + 1)) as f64 * 0.01).sin() * 10.0));
        }
        s.push('\n');
    }
    s
}

#[test]
fn ett_format_has_seven_channels() {
    let t = read_csv(ett_like(50).as_bytes()).unwrap();
    assert_eq!(t.num_channels(), 7);
    assert_eq!(t.len(), 50);
    assert_eq!(t.names[6], "OT");
}

#[test]
fn window_count_formula_holds() {
    let mut r = rng(1);
    for _ in 0..1000 {
        let lookback: usize = r.random_range(1..40);
        let horizon: usize = r.random_range(1..20);
        let split_len: usize = r.random_range(1..120);
        let n = split_len * 10;
        let table = SeriesTable::from_channels(vec!["a".into()], vec![(0..n).map(|i| i as f64).collect()]).unwrap();
        let spec = SplitSpec::Ratios { train: 0.1, val: 0.1, test: 0.8 };
        let ds = Dataset::new("t", table, spec, false).unwrap();
        let expected = (split_len + 1).saturating_sub(lookback + horizon);
        assert_eq!(window_count(split_len, lookback, horizon), expected);
        match ds.windows(Split::Train, lookback, horizon, 1) {
            Ok(w) => assert_eq!(w.len(), expected),
            Err(_) => assert_eq!(expected, 0),
        }
    }
}

#[test]
fn exact_fit_gives_one_window() {
    assert_eq!(window_count(20, 16, 4), 1);
}

#[test]
fn splits_are_ordered_and_windows_stay_inside() {
    let n = 21 * ETT_HOURLY_MONTH;
    let table = SeriesTable::from_channels(vec!["a".into()], vec![(0..n).map(|i| i as f64).collect()]).unwrap();
    let ds = Dataset::new("ett", table, SplitSpec::EttMonths { rows_per_month: ETT_HOURLY_MONTH }, false).unwrap();
    let (tr, va, te) = (ds.range(Split::Train), ds.range(Split::Val), ds.range(Split::Test));
    assert!(tr.end <= va.start && va.end <= te.start);
    for split in [Split::Train, Split::Val, Split::Test] {
        let range = ds.range(split);
        for w in ds.windows(split, 96, 24, 7).unwrap() {
            // values equal their row index, so the window position is recoverable
            let first = w.input[0] as usize;
            let last = *w.target.last().unwrap() as usize;
            assert!(range.contains(&first) && range.contains(&last));
        }
    }
}

#[test]
fn zscore_uses_train_statistics() {
    let table = SeriesTable::from_channels(vec!["a".into()], vec![(0..100).map(|i| i as f64).collect()]).unwrap();
    let ds = Dataset::new("t", table, SplitSpec::ett_ratio(), true).unwrap();
    let train = &ds.normalized_channel(0)[ds.range(Split::Train)];
    let mean = train.iter().sum::<f64>() / train.len() as f64;
    let var = train.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / train.len() as f64;
    assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    assert!(ds.normalized_channel(0)[99] > 1.0);
}

#[test]
fn segment_lengths_are_uniform() {
    let mut r = rng(2);
    let (lo, hi) = (5usize, 12usize);
    let mut counts = vec![0usize; hi - lo + 1];
    let mut total = 0;
    while total < 10_000 {
        let (x, ch) = synth_piecewise(50, lo..=hi, 0.0, &mut r).unwrap();
        let mut cuts = vec![0];
        cuts.extend(&ch);
        cuts.push(x.len());
        for w in cuts.windows(2) {
            counts[w[1] - w[0] - lo] += 1;
            total += 1;
        }
    }
    let expected = total as f64 / counts.len() as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 7 degrees of freedom; 24.3 is the 0.999 quantile.
    assert!(chi2 < 24.3, "chi2 = {chi2}, counts {counts:?}");
}

#[test]
fn missing_file_is_io_error() {
    assert!(matches!(reinpatch::data::load_csv("/nonexistent/x.csv"), Err(reinpatch::Error::Io(_))));
}
