//! Dataset handling: LIBSVM parsing, synthetic logistic data, and
//! partitioning of samples across devices.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};

/// A dense labelled sample set. One row of `features` per sample, labels
/// in `{-1, +1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub features: DMatrix<f64>,
    pub labels: DVector<f64>,
}

impl SampleSet {
    pub fn new(features: DMatrix<f64>, labels: DVector<f64>) -> Result<Self> {
        if features.nrows() == 0 || features.ncols() == 0 {
            return Err(Error::Config("sample set must have n >= 1, d >= 1".into()));
        }
        if features.nrows() != labels.len() {
            return Err(Error::Config(format!(
                "feature rows ({}) and labels ({}) disagree",
                features.nrows(),
                labels.len()
            )));
        }
        if labels.iter().any(|&v| v != 1.0 && v != -1.0) {
            return Err(Error::Config("labels must be in {-1, +1}".into()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("features must be finite".into()));
        }
        Ok(Self { features, labels })
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn d(&self) -> usize {
        self.features.ncols()
    }

    /// Per-column max-abs normalization (in place). Off by default in all
    /// pipelines; columns that are identically zero are left untouched.
    pub fn maxabs_normalize(&mut self) {
        for j in 0..self.d() {
            let m = self.features.column(j).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if m > 0.0 {
                for i in 0..self.n() {
                    self.features[(i, j)] /= m;
                }
            }
        }
    }

    /// Serialize to LIBSVM text. Zero entries are skipped, so parsing the
    /// output reproduces the set exactly.
    pub fn to_libsvm(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n() {
            out.push_str(if self.labels[i] > 0.0 { "1" } else { "-1" });
            for j in 0..self.d() {
                let v = self.features[(i, j)];
                if v != 0.0 {
                    out.push_str(&format!(" {}:{}", j + 1, v));
                }
            }
            out.push('\n');
        }
        out
    }

    /// Split row indices into train/test with a seeded shuffle.
    pub fn train_test_indices(
        &self,
        test_fraction: f64,
        rng: &mut impl Rng,
    ) -> (Vec<usize>, Vec<usize>) {
        let mut idx: Vec<usize> = (0..self.n()).collect();
        idx.shuffle(rng);
        let n_test = ((self.n() as f64) * test_fraction).round() as usize;
        let test = idx[..n_test].to_vec();
        let train = idx[n_test..].to_vec();
        (train, test)
    }

    /// Materialize a subset of rows as a new set.
    pub fn subset(&self, rows: &[usize]) -> SampleSet {
        let features = DMatrix::from_fn(rows.len(), self.d(), |i, j| self.features[(rows[i], j)]);
        let labels = DVector::from_fn(rows.len(), |i, _| self.labels[rows[i]]);
        SampleSet { features, labels }
    }
}

/// A sample set sharded across `m` devices. Shards are disjoint index lists
/// into the rows of `global` and cover every row.
#[derive(Debug, Clone)]
pub struct FederatedDataset {
    pub global: SampleSet,
    pub shards: Vec<Vec<usize>>,
}

impl FederatedDataset {
    pub fn m(&self) -> usize {
        self.shards.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.shards.iter().map(|s| s.len()).collect()
    }

    /// Shard assignments as JSON: device index -> row indices.
    pub fn shards_to_json(&self) -> String {
        #[derive(Serialize)]
        struct Assignment<'a> {
            device: usize,
            rows: &'a [usize],
        }
        let rows: Vec<Assignment> = self
            .shards
            .iter()
            .enumerate()
            .map(|(device, rows)| Assignment { device, rows })
            .collect();
        serde_json::to_string_pretty(&rows).expect("shard serialization")
    }
}

/// Device partitioning schemes. Ranges in the heterogeneous scheme are
/// multiples of the mean shard size `n/m`.
#[derive(Debug, Clone, PartialEq)]
pub enum PartitionScheme {
    Uniform,
    SizeHeterogeneous {
        frac_small: f64,
        small_range: (f64, f64),
        large_range: (f64, f64),
    },
}

/// Parse LIBSVM text: `<label> <idx>:<val> ...` per line, 1-based strictly
/// increasing indices. Labels map through `raw > 0 -> +1, else -1`.
pub fn parse_libsvm(text: &str) -> Result<SampleSet> {
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut labels: Vec<f64> = Vec::new();
    let mut d = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let raw_label: f64 = parts
            .next()
            .unwrap()
            .parse()
            .map_err(|e| Error::Parse {
                line: lineno + 1,
                msg: format!("bad label: {e}"),
            })?;
        labels.push(if raw_label > 0.0 { 1.0 } else { -1.0 });
        let mut entries = Vec::new();
        let mut last_idx = 0usize;
        for tok in parts {
            let (idx_s, val_s) = tok.split_once(':').ok_or_else(|| Error::Parse {
                line: lineno + 1,
                msg: format!("expected idx:val, got {tok:?}"),
            })?;
            let idx: usize = idx_s.parse().map_err(|e| Error::Parse {
                line: lineno + 1,
                msg: format!("bad index {idx_s:?}: {e}"),
            })?;
            let val: f64 = val_s.parse().map_err(|e| Error::Parse {
                line: lineno + 1,
                msg: format!("bad value {val_s:?}: {e}"),
            })?;
            if idx == 0 || idx <= last_idx {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("indices must be 1-based strictly increasing, got {idx}"),
                });
            }
            last_idx = idx;
            d = d.max(idx);
            entries.push((idx - 1, val));
        }
        rows.push(entries);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 0,
            msg: "empty input".into(),
        });
    }
    if d == 0 {
        return Err(Error::Parse {
            line: 0,
            msg: "no feature entries observed".into(),
        });
    }
    let n = rows.len();
    let mut features = DMatrix::zeros(n, d);
    for (i, entries) in rows.iter().enumerate() {
        for &(j, v) in entries {
            features[(i, j)] = v;
        }
    }
    SampleSet::new(features, DVector::from_vec(labels))
}

/// Partition row indices across `m` devices.
pub fn partition(
    set: &SampleSet,
    m: usize,
    scheme: &PartitionScheme,
    rng: &mut impl Rng,
) -> Result<FederatedDataset> {
    let n = set.n();
    if m == 0 || m > n {
        return Err(Error::Config(format!(
            "device count m={m} must satisfy 1 <= m <= n={n}"
        )));
    }
    let sizes = shard_sizes(n, m, scheme, rng)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut shards = Vec::with_capacity(m);
    let mut cursor = 0usize;
    for &s in &sizes {
        shards.push(idx[cursor..cursor + s].to_vec());
        cursor += s;
    }
    debug_assert_eq!(cursor, n);
    Ok(FederatedDataset {
        global: set.clone(),
        shards,
    })
}

fn shard_sizes(
    n: usize,
    m: usize,
    scheme: &PartitionScheme,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    match scheme {
        PartitionScheme::Uniform => {
            let base = n / m;
            let rem = n % m;
            Ok((0..m).map(|i| base + usize::from(i < rem)).collect())
        }
        PartitionScheme::SizeHeterogeneous {
            frac_small,
            small_range,
            large_range,
        } => {
            if !(*frac_small > 0.0 && *frac_small < 1.0) {
                return Err(Error::Config("frac_small must lie in (0,1)".into()));
            }
            let mean = n as f64 / m as f64;
            let n_small = ((frac_small * m as f64).ceil() as usize).min(m);
            let mut raw: Vec<f64> = Vec::with_capacity(m);
            for i in 0..m {
                let (lo, hi) = if i < n_small { *small_range } else { *large_range };
                let u: f64 = rng.gen();
                raw.push((lo + u * (hi - lo)) * mean);
            }
            let total: f64 = raw.iter().sum();
            let scale = n as f64 / total;
            let mut sizes: Vec<usize> = raw.iter().map(|r| (r * scale).round().max(1.0) as usize).collect();
            // largest shard absorbs the rounding residual
            let sum: i64 = sizes.iter().map(|&s| s as i64).sum();
            let residual = n as i64 - sum;
            let largest = sizes
                .iter()
                .enumerate()
                .max_by_key(|(_, &s)| s)
                .map(|(i, _)| i)
                .unwrap();
            let adjusted = sizes[largest] as i64 + residual;
            if adjusted < 1 {
                return Err(Error::Config(
                    "heterogeneous sizes infeasible: residual absorption drives a shard below 1".into(),
                ));
            }
            sizes[largest] = adjusted as usize;
            if sizes.iter().any(|&s| s < 1) {
                return Err(Error::Config("heterogeneous sizes infeasible: |D_i| < 1".into()));
            }
            Ok(sizes)
        }
    }
}

/// Synthetic logistic-regression data. Gaussian features, labels from the
/// sign of the margin against a random unit ground-truth direction, flipped
/// with probability `sigmoid(-separation * (1 + separation * |margin|))`.
/// `separation = 0` gives pure label noise; `separation -> inf` gives clean
/// sign labels.
pub fn synth_logistic(n: usize, d: usize, separation: f64, rng: &mut impl Rng) -> Result<SampleSet> {
    if n == 0 || d == 0 {
        return Err(Error::Config("synthetic set needs n >= 1, d >= 1".into()));
    }
    let mut w_true = DVector::from_fn(d, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        v
    });
    let norm = w_true.norm();
    if norm > 0.0 {
        w_true /= norm;
    } else {
        w_true[0] = 1.0;
    }
    let features = DMatrix::from_fn(n, d, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        v
    });
    let mut labels = DVector::zeros(n);
    for i in 0..n {
        let margin: f64 = features.row(i).transpose().dot(&w_true);
        let clean = if margin >= 0.0 { 1.0 } else { -1.0 };
        let flip_prob = 1.0 / (1.0 + (separation * (1.0 + separation * margin.abs())).exp());
        let u: f64 = rng.gen();
        labels[i] = if u < flip_prob { -clean } else { clean };
    }
    SampleSet::new(features, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn parse_basic_line() {
        let s = parse_libsvm("1 1:0.5 3:2.0\n").unwrap();
        assert_eq!(s.n(), 1);
        assert_eq!(s.d(), 3);
        assert_eq!(s.features[(0, 0)], 0.5);
        assert_eq!(s.features[(0, 1)], 0.0);
        assert_eq!(s.features[(0, 2)], 2.0);
        assert_eq!(s.labels[0], 1.0);
    }

    #[test]
    fn parse_negative_label_and_gap() {
        let s = parse_libsvm("-1 2:1.0\n").unwrap();
        assert_eq!(s.n(), 1);
        assert_eq!(s.d(), 2);
        assert_eq!(s.features[(0, 0)], 0.0);
        assert_eq!(s.features[(0, 1)], 1.0);
        assert_eq!(s.labels[0], -1.0);
    }

    #[test]
    fn label_mapping_rule() {
        let s = parse_libsvm("0 1:1\n2 1:1\n").unwrap();
        assert_eq!(s.labels[0], -1.0);
        assert_eq!(s.labels[1], 1.0);
    }

    #[test]
    fn parse_errors_name_line() {
        let err = parse_libsvm("1 1:0.5\n-1 2:1 2:3\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
        assert!(parse_libsvm("").is_err());
        assert!(parse_libsvm("1 0:2\n").is_err());
        assert!(parse_libsvm("x 1:2\n").is_err());
    }

    #[test]
    fn libsvm_round_trip_exact() {
        let mut rng = stream(7, Purpose::Test);
        let set = synth_logistic(40, 6, 2.0, &mut rng).unwrap();
        let text = set.to_libsvm();
        let back = parse_libsvm(&text).unwrap();
        assert_eq!(set, back);
    }

    #[test]
    fn uniform_partition_exact_division() {
        let mut rng = stream(1, Purpose::Test);
        let set = synth_logistic(100, 3, 1.0, &mut rng).unwrap();
        let fed = partition(&set, 20, &PartitionScheme::Uniform, &mut rng).unwrap();
        assert!(fed.sizes().iter().all(|&s| s == 5));
    }

    #[test]
    fn singleton_shards() {
        let mut rng = stream(2, Purpose::Test);
        let set = synth_logistic(10, 3, 1.0, &mut rng).unwrap();
        let fed = partition(&set, 10, &PartitionScheme::Uniform, &mut rng).unwrap();
        assert!(fed.sizes().iter().all(|&s| s == 1));
        check_disjoint_cover(&fed);
    }

    #[test]
    fn heterogeneous_partition_shape() {
        let mut rng = stream(3, Purpose::Test);
        let set = synth_logistic(2000, 4, 1.0, &mut rng).unwrap();
        let scheme = PartitionScheme::SizeHeterogeneous {
            frac_small: 0.1,
            small_range: (0.008, 0.01),
            large_range: (1.01, 1.11),
        };
        let fed = partition(&set, 20, &scheme, &mut rng).unwrap();
        let sizes = fed.sizes();
        assert_eq!(sizes.iter().sum::<usize>(), 2000);
        let tiny = sizes.iter().filter(|&&s| s < 10).count();
        assert_eq!(tiny, 2, "2 of 20 devices should be tiny, sizes={sizes:?}");
        check_disjoint_cover(&fed);
    }

    #[test]
    fn partition_disjoint_cover_over_seeds() {
        let schemes = [
            PartitionScheme::Uniform,
            PartitionScheme::SizeHeterogeneous {
                frac_small: 0.2,
                small_range: (0.05, 0.2),
                large_range: (1.0, 1.4),
            },
        ];
        for seed in 0..100u64 {
            let mut rng = stream(seed, Purpose::Test);
            let set = synth_logistic(157, 3, 1.0, &mut rng).unwrap();
            for scheme in &schemes {
                let fed = partition(&set, 9, scheme, &mut rng).unwrap();
                check_disjoint_cover(&fed);
            }
        }
    }

    #[test]
    fn synth_determinism_and_separation() {
        let a = synth_logistic(200, 5, 3.0, &mut stream(11, Purpose::Test)).unwrap();
        let b = synth_logistic(200, 5, 3.0, &mut stream(11, Purpose::Test)).unwrap();
        assert_eq!(a, b);

        // separation -> large: flip probability vanishes
        let mut rng = stream(12, Purpose::Test);
        let c = synth_logistic(500, 5, 1e9, &mut rng).unwrap();
        assert!(c.labels.iter().all(|&v| v == 1.0 || v == -1.0));
    }

    #[test]
    fn synth_flip_rate_small_at_separation_five() {
        // Monte Carlo bound on the label-flip rate at separation=5:
        // E[sigmoid(-5|z|)] over z ~ N(0,1) is about 0.0124, so 2% is a
        // comfortable ceiling for n=1000.
        let n = 1000;
        // regenerate with the same stream logic to recover w_true: instead,
        // measure flips indirectly over many seeds via the noiseless limit.
        let mut flips = 0usize;
        let mut total = 0usize;
        for seed in 0..20u64 {
            let mut r1 = stream(1000 + seed, Purpose::Test);
            let noisy = synth_logistic(n, 10, 5.0, &mut r1).unwrap();
            let mut r2 = stream(1000 + seed, Purpose::Test);
            let clean = synth_logistic(n, 10, 1e12, &mut r2).unwrap();
            // identical streams draw identical w_true/features; labels differ
            // only where the flip fired
            assert_eq!(noisy.features, clean.features);
            flips += noisy
                .labels
                .iter()
                .zip(clean.labels.iter())
                .filter(|(a, b)| a != b)
                .count();
            total += n;
        }
        let rate = flips as f64 / total as f64;
        assert!(rate < 0.02, "flip rate {rate} should stay below 2%");
    }

    #[test]
    fn shard_json_export() {
        let mut rng = stream(21, Purpose::Test);
        let set = synth_logistic(8, 2, 1.0, &mut rng).unwrap();
        let fed = partition(&set, 2, &PartitionScheme::Uniform, &mut rng).unwrap();
        let json = fed.shards_to_json();
        let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed.as_array().unwrap().len(), 2);
        assert_eq!(parsed[0]["device"], 0);
    }

    fn check_disjoint_cover(fed: &FederatedDataset) {
        let n = fed.global.n();
        let mut seen = vec![false; n];
        for shard in &fed.shards {
            assert!(!shard.is_empty());
            for &i in shard {
                assert!(!seen[i], "row {i} assigned twice");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s), "rows not covered");
    }
}
