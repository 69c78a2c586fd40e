//! CSV ingestion, chronological splits and channel-independent windows.

use std::io::{Read, Write};
use std::ops::{Range, RangeInclusive};
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::ForecastWindow;
use crate::error::{invalid_arg, Error, Result};

/// Rows per 30-day month in the hourly ETT files.
pub const ETT_HOURLY_MONTH: usize = 30 * 24;
/// Rows per 30-day month in the 15-minute ETT files.
pub const ETT_MINUTE_MONTH: usize = 30 * 24 * 4;

#[derive(Clone, Debug, PartialEq)]
pub struct SeriesTable {
    pub timestamps: Vec<NaiveDateTime>,
    pub names: Vec<String>,
    /// One column per channel, all of length `len()`.
    pub channels: Vec<Vec<f64>>,
}

impl SeriesTable {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channel(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.channels[i].as_slice())
    }

    /// Hourly timestamps starting at 2016-07-01 for synthetic series.
    pub fn from_channels(names: Vec<String>, channels: Vec<Vec<f64>>) -> Result<Self> {
        let n = channels.first().map_or(0, Vec::len);
        if channels.iter().any(|c| c.len() != n) || names.len() != channels.len() {
            return Err(invalid_arg("channels must share one length and have one name each"));
        }
        let start = NaiveDate::from_ymd_opt(2016, 7, 1)
            .and_then(|d| d.and_hms_opt(0, 0, 0))
            .expect("valid start date");
        let timestamps = (0..n as i64).map(|h| start + chrono::Duration::hours(h)).collect();
        Ok(Self {
            timestamps,
            names,
            channels,
        })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["date".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for (r, ts) in self.timestamps.iter().enumerate() {
            let mut rec = vec![ts.format("%Y-%m-%d %H:%M:%S").to_string()];
            rec.extend(self.channels.iter().map(|c| c[r].to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    const FORMATS: [&str; 4] = [
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M",
        "%Y-%m-%dT%H:%M",
    ];
    let s = s.trim();
    FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .or_else(|| {
            NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S%.f").ok()
        })
        .or_else(|| {
            NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .ok()
                .and_then(|d| d.and_hms_opt(0, 0, 0))
        })
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<SeriesTable> {
    let file = std::fs::File::open(path)?;
    read_csv(file)
}

/// Parse a header + rows CSV whose first column is a timestamp. Row numbers
/// in errors are 1-based file lines (the header is line 1).
pub fn read_csv<R: Read>(input: R) -> Result<SeriesTable> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = reader.headers().map_err(|e| Error::Ingest {
        row: 1,
        message: e.to_string(),
    })?;
    if header.len() < 2 {
        return Err(Error::Ingest {
            row: 1,
            message: "need a timestamp column and at least one value column".into(),
        });
    }
    let names: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let mut timestamps = Vec::new();
    let mut channels = vec![Vec::new(); names.len()];
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Ingest {
            row,
            message: e.to_string(),
        })?;
        if rec.len() != names.len() + 1 {
            return Err(Error::Ingest {
                row,
                message: format!("expected {} fields, found {}", names.len() + 1, rec.len()),
            });
        }
        let ts = parse_timestamp(&rec[0]).ok_or_else(|| Error::Ingest {
            row,
            message: format!("unparseable timestamp `{}`", &rec[0]),
        })?;
        if let Some(prev) = timestamps.last() {
            if ts <= *prev {
                return Err(Error::Ingest {
                    row,
                    message: "timestamps must be strictly increasing".into(),
                });
            }
        }
        for (c, field) in rec.iter().skip(1).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Ingest {
                row,
                message: format!("non-numeric value `{field}` in column `{}`", names[c]),
            })?;
            if !v.is_finite() {
                return Err(Error::Ingest {
                    row,
                    message: format!("missing or non-finite value in column `{}`", names[c]),
                });
            }
            channels[c].push(v);
        }
        timestamps.push(ts);
    }
    if timestamps.is_empty() {
        return Err(Error::Ingest {
            row: 2,
            message: "no data rows".into(),
        });
    }
    Ok(SeriesTable {
        timestamps,
        names,
        channels,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitSpec {
    /// Fractions of the series, in order.
    Ratios { train: f64, val: f64, test: f64 },
    /// 12 / 4 / 4 months of `rows_per_month` rows each.
    EttMonths { rows_per_month: usize },
}

impl SplitSpec {
    pub fn ett_ratio() -> Self {
        SplitSpec::Ratios {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }

    pub fn standard_ratio() -> Self {
        SplitSpec::Ratios {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }

    /// Disjoint, ordered row ranges for train, val and test.
    pub fn ranges(&self, n: usize) -> Result<[Range<usize>; 3]> {
        match *self {
            SplitSpec::Ratios { train, val, test } => {
                if train <= 0.0 || val <= 0.0 || test <= 0.0 || ((train + val + test) - 1.0).abs() > 1e-9 {
                    return Err(invalid_arg("split ratios must be positive and sum to 1"));
                }
                let a = (n as f64 * train).round() as usize;
                let b = ((n as f64 * (train + val)).round() as usize).min(n);
                Ok([0..a, a..b, b..n])
            }
            SplitSpec::EttMonths { rows_per_month } => {
                let a = 12 * rows_per_month;
                let b = 16 * rows_per_month;
                let c = 20 * rows_per_month;
                if c > n {
                    return Err(invalid_arg(format!(
                        "series has {n} rows; the 12/4/4-month split needs {c}"
                    )));
                }
                Ok([0..a, a..b, b..c])
            }
        }
    }
}

/// Number of stride-1 windows in a split of `split_len` points.
pub fn window_count(split_len: usize, lookback: usize, horizon: usize) -> usize {
    (split_len + 1).saturating_sub(lookback + horizon)
}

/// A table with its chronological split and (optionally) train-statistics
/// z-normalization applied per channel.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    table: SeriesTable,
    ranges: [Range<usize>; 3],
    values: Vec<Vec<f64>>,
    stats: Vec<(f64, f64)>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, table: SeriesTable, spec: SplitSpec, zscore: bool) -> Result<Self> {
        let ranges = spec.ranges(table.len())?;
        if ranges[0].is_empty() {
            return Err(invalid_arg("train split is empty"));
        }
        let mut stats = Vec::with_capacity(table.num_channels());
        let mut values = Vec::with_capacity(table.num_channels());
        for col in &table.channels {
            let (mean, std) = if zscore {
                let train = &col[ranges[0].clone()];
                let n = train.len() as f64;
                let m = train.iter().sum::<f64>() / n;
                let v = train.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
                (m, v.sqrt().max(1e-8))
            } else {
                (0.0, 1.0)
            };
            values.push(col.iter().map(|x| (x - mean) / std).collect());
            stats.push((mean, std));
        }
        Ok(Self {
            name: name.into(),
            table,
            ranges,
            values,
            stats,
        })
    }

    pub fn table(&self) -> &SeriesTable {
        &self.table
    }

    pub fn range(&self, split: Split) -> Range<usize> {
        self.ranges[split as usize].clone()
    }

    /// Per-channel (mean, std) used for dataset-level normalization.
    pub fn stats(&self) -> &[(f64, f64)] {
        &self.stats
    }

    pub fn normalized_channel(&self, c: usize) -> &[f64] {
        &self.values[c]
    }

    /// Windows of every channel inside `split`, channel-major, stride `stride`.
    pub fn windows(&self, split: Split, lookback: usize, horizon: usize, stride: usize) -> Result<Vec<ForecastWindow>> {
        if stride < 1 {
            return Err(invalid_arg("stride must be >= 1"));
        }
        let r = self.range(split);
        let count = window_count(r.len(), lookback, horizon);
        if count == 0 {
            return Err(invalid_arg(format!(
                "{split:?} split has {} rows, fewer than lookback {lookback} + horizon {horizon}",
                r.len()
            )));
        }
        let mut out = Vec::with_capacity(self.values.len() * count.div_ceil(stride));
        for (c, col) in self.values.iter().enumerate() {
            for k in (0..count).step_by(stride) {
                let s = r.start + k;
                out.push(ForecastWindow::new(
                    col[s..s + lookback].to_vec(),
                    col[s + lookback..s + lookback + horizon].to_vec(),
                    c,
                )?);
            }
        }
        Ok(out)
    }
}

/// Stride-1 windows for one split, with train-statistics z-normalization.
pub fn make_windows(
    table: &SeriesTable,
    lookback: usize,
    horizon: usize,
    spec: SplitSpec,
    split: Split,
) -> Result<Vec<ForecastWindow>> {
    Dataset::new("table", table.clone(), spec, true)?.windows(split, lookback, horizon, 1)
}

/// Piecewise-constant series with Gaussian noise, plus the change-point
/// indices (first index of every segment after the first).
pub fn synth_piecewise<R: Rng + ?Sized>(
    n_segments: usize,
    seg_len: RangeInclusive<usize>,
    noise: f64,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<usize>)> {
    if n_segments < 1 || *seg_len.start() < 1 || seg_len.is_empty() {
        return Err(invalid_arg("need >= 1 segment of length >= 1"));
    }
    if !(noise >= 0.0) {
        return Err(invalid_arg("noise must be >= 0"));
    }
    let jitter = Normal::new(0.0, noise.max(0.0)).map_err(|e| invalid_arg(e.to_string()))?;
    let mut series = Vec::new();
    let mut changes = Vec::with_capacity(n_segments - 1);
    let mut level: f64 = StandardNormal.sample(rng);
    for s in 0..n_segments {
        if s > 0 {
            changes.push(series.len());
            let mut next: f64 = StandardNormal.sample(rng);
            while next == level {
                next = StandardNormal.sample(rng);
            }
            level = next;
        }
        let len = rng.random_range(seg_len.clone());
        for _ in 0..len {
            let eps = if noise > 0.0 { jitter.sample(rng) } else { 0.0 };
            series.push(level + eps);
        }
    }
    Ok((series, changes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SMALL: &str = "date,a,b\n2016-07-01 00:00:00,1.5,-2\n2016-07-01 01:00:00,2.25,0.125\n2016-07-01 02:00:00,3,7e-3\n";

    #[test]
    fn csv_roundtrip() {
        let t = read_csv(SMALL.as_bytes()).unwrap();
        assert_eq!(t.names, vec!["a", "b"]);
        assert_eq!(t.channels[0], vec![1.5, 2.25, 3.0]);
        assert_eq!(t.channels[1], vec![-2.0, 0.125, 7e-3]);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(read_csv(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn csv_errors() {
        assert!(matches!(read_csv("".as_bytes()), Err(Error::Ingest { .. })));
        assert!(matches!(read_csv("date,a\n".as_bytes()), Err(Error::Ingest { .. })));
        let bad = "date,a\n2016-07-01 00:00:00,1\n2016-07-01 01:00:00,x\n";
        assert!(matches!(read_csv(bad.as_bytes()), Err(Error::Ingest { row: 3, .. })));
        let back = "date,a\n2016-07-01 01:00:00,1\n2016-07-01 00:00:00,2\n";
        assert!(matches!(read_csv(back.as_bytes()), Err(Error::Ingest { row: 3, .. })));
        let gap = "date,a,b\n2016-07-01 00:00:00,1,\n";
        assert!(matches!(read_csv(gap.as_bytes()), Err(Error::Ingest { row: 2, .. })));
    }

    #[test]
    fn timestamp_formats() {
        for s in ["2016-07-01 00:00:00", "2016-07-01T00:00:00", "2016-07-01 00:00", "2016-07-01"] {
            assert!(parse_timestamp(s).is_some(), "{s}");
        }
        assert!(parse_timestamp("07/01/2016").is_none());
    }

    #[test]
    fn window_counts() {
        assert_eq!(window_count(100, 96, 1), 4);
        assert_eq!(window_count(20, 12, 8), 1);
        assert_eq!(window_count(19, 12, 8), 0);
    }

    #[test]
    fn windows_per_channel_and_split() {
        let n = 500;
        let chans: Vec<Vec<f64>> = (0..7).map(|c| (0..n).map(|i| (i * (c + 1)) as f64).collect()).collect();
        let names = (0..7).map(|c| format!("c{c}")).collect();
        let t = SeriesTable::from_channels(names, chans).unwrap();
        let ds = Dataset::new("t", t, SplitSpec::ett_ratio(), true).unwrap();
        let w = ds.windows(Split::Train, 96, 1, 1).unwrap();
        assert_eq!(w.len(), 7 * window_count(300, 96, 1));
        assert_eq!(ds.windows(Split::Val, 96, 4, 1).unwrap().len(), 7);
        assert!(ds.windows(Split::Val, 96, 5, 1).is_err());
        assert_eq!(ds.windows(Split::Train, 96, 1, 10).unwrap().len(), 7 * 21);
    }

    #[test]
    fn ett_month_borders() {
        let r = SplitSpec::EttMonths { rows_per_month: ETT_HOURLY_MONTH }.ranges(17_420).unwrap();
        assert_eq!(r, [0..8640, 8640..11520, 11520..14400]);
        assert!(SplitSpec::EttMonths { rows_per_month: 10 }.ranges(100).is_err());
        assert!(SplitSpec::Ratios { train: 0.5, val: 0.5, test: 0.5 }.ranges(10).is_err());
    }

    #[test]
    fn piecewise_generator() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x, ch) = synth_piecewise(2, 5..=9, 0.0, &mut rng).unwrap();
        assert_eq!(ch.len(), 1);
        let c = ch[0];
        assert!(x[..c].iter().all(|&v| v == x[0]));
        assert!(x[c..].iter().all(|&v| v == x[c]));
        assert_ne!(x[c - 1], x[c]);
        let (x, ch) = synth_piecewise(1, 7..=7, 0.0, &mut rng).unwrap();
        assert!(ch.is_empty());
        assert_eq!(x.len(), 7);
        assert!(x.iter().all(|&v| v == x[0]));
    }
}
