//! Tabular datasets: synthetic generation, CSV ingestion, splitting, and
//! member/non-member sampling for ownership tests.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Synthetic,
    Csv,
}

/// Row-major feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    classes: usize,
    pub feature_names: Option<Vec<String>>,
    pub provenance: Provenance,
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Data("dataset must have at least one row".into()));
        }
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::Shape(format!(
                "{} feature values do not form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
            return Err(Error::Label { row, label, classes });
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericInput { row: i / dim, col: i % dim });
        }
        Ok(Self {
            features,
            dim,
            labels,
            classes,
            feature_names: None,
            provenance: Provenance::Synthetic,
            seed: None,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], labels: Vec<usize>, classes: usize) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        if let Some(bad) = rows.iter().position(|r| r.as_ref().len() != dim) {
            return Err(Error::Shape(format!("row {bad} width differs from row 0 ({dim})")));
        }
        let features = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::new(features, dim, labels, classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> Vec<&[f64]> {
        self.features.chunks_exact(self.dim).collect()
    }

    /// Rows at `ids`, in the given order.
    pub fn subset(&self, ids: &[usize]) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Data("empty subset".into()));
        }
        let mut features = Vec::with_capacity(ids.len() * self.dim);
        let mut labels = Vec::with_capacity(ids.len());
        for &i in ids {
            if i >= self.len() {
                return Err(Error::Domain(format!("row id {i} out of range ({} rows)", self.len())));
            }
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Ok(Self {
            features,
            dim: self.dim,
            labels,
            classes: self.classes,
            feature_names: self.feature_names.clone(),
            provenance: self.provenance,
            seed: self.seed,
        })
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Dataset) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::Shape(format!("cannot concatenate widths {} and {}", self.dim, other.dim)));
        }
        let mut features = self.features.clone();
        features.extend_from_slice(&other.features);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let mut out = Self::new(features, self.dim, labels, self.classes.max(other.classes))?;
        out.feature_names = self.feature_names.clone();
        out.provenance = self.provenance;
        Ok(out)
    }

    pub fn with_classes(mut self, classes: usize) -> Result<Self> {
        if let Some((row, &label)) = self.labels.iter().enumerate().find(|(_, &y)| y >= classes) {
            return Err(Error::Label { row, label, classes });
        }
        self.classes = classes;
        Ok(self)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Self> {
        load_csv(path, label_column)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        save_csv(self, path)
    }
}

/// Class means: the `k` vertices of a regular simplex centered at the origin,
/// each at distance `separation` from it. Vertex `i` has coordinates
/// `h_j[i] * separation / sqrt((k-1)/k)` in the Helmert basis `h_1..h_{k-1}`,
/// zero-padded to `d` dimensions.
pub fn simplex_means(k: usize, d: usize, separation: f64) -> Result<Vec<Vec<f64>>> {
    if d + 1 < k {
        return Err(Error::Domain(format!(
            "{k} equidistant class means need at least {} dimensions, got {d}",
            k - 1
        )));
    }
    let norm = ((k - 1) as f64 / k as f64).sqrt();
    let mut means = vec![vec![0.0; d]; k];
    for j in 1..k {
        let scale = 1.0 / ((j * (j + 1)) as f64).sqrt();
        for (i, mean) in means.iter_mut().enumerate() {
            let h = if i < j {
                scale
            } else if i == j {
                -(j as f64) * scale
            } else {
                0.0
            };
            mean[j - 1] = h * separation / norm;
        }
    }
    Ok(means)
}

/// Gaussian class clusters with unit covariance around [`simplex_means`].
///
/// Row `i` of the generation order gets clean label `i mod k`, so class counts
/// are balanced within one; each label is then replaced with probability
/// `label_noise` by a uniformly chosen different class, and rows are shuffled.
pub fn gen_synthetic(
    n: usize,
    d: usize,
    k: usize,
    separation: f64,
    label_noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if k < 2 || n < k || d == 0 {
        return Err(Error::Domain(format!("need n >= k >= 2 and d >= 1 (n={n}, d={d}, k={k})")));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::Domain("class separation must be finite and nonnegative".into()));
    }
    if !(0.0..0.5).contains(&label_noise) {
        return Err(Error::Domain(format!("label noise {label_noise} outside [0, 0.5)")));
    }
    let means = simplex_means(k, d, separation)?;
    let mut rng = Stream::derived(seed, 0);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let clean = i % k;
        let x: Vec<f64> = means[clean].iter().map(|m| m + rng.normal()).collect();
        let mut y = clean;
        if rng.uniform() < label_noise {
            let shift = 1 + rng.below(k as u64 - 1) as usize;
            y = (clean + shift) % k;
        }
        rows.push(x);
        labels.push(y);
    }
    let order = Stream::derived(seed, 1).permutation(n);
    let rows: Vec<&Vec<f64>> = order.iter().map(|&i| &rows[i]).collect();
    let labels = order.iter().map(|&i| labels[i]).collect();
    let mut ds = Dataset::from_rows(&rows, labels, k)?;
    ds.seed = Some(seed);
    ds.provenance = Provenance::Synthetic;
    Ok(ds)
}

pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path.as_ref())?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::ColumnNotFound(label_column.to_string()))?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != label_idx)
        .map(|(_, h)| h.clone())
        .collect();
    let dim = feature_names.len();
    if dim == 0 {
        return Err(Error::Data("CSV has no feature columns".into()));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::Data(format!(
                "row {} has {} cells, header has {}",
                row + 1,
                record.len(),
                headers.len()
            )));
        }
        for (col, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            let bad = || Error::NonNumeric {
                row: row + 1,
                column: headers[col].clone(),
                value: cell.to_string(),
            };
            let value: f64 = cell.parse().map_err(|_| bad())?;
            if !value.is_finite() {
                return Err(bad());
            }
            if col == label_idx {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(bad());
                }
                labels.push(value as usize);
            } else {
                features.push(value);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Data("CSV contains no data rows".into()));
    }
    let classes = labels.iter().copied().max().unwrap_or(0).max(1) + 1;
    let mut ds = Dataset::new(features, dim, labels, classes)?;
    ds.feature_names = Some(feature_names);
    ds.provenance = Provenance::Csv;
    Ok(ds)
}

/// Writes features then a trailing `label` column. Values use the shortest
/// decimal form that parses back to the identical `f64`.
pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let mut header: Vec<String> = match &ds.feature_names {
        Some(names) if names.len() == ds.dim() => names.clone(),
        _ => (0..ds.dim()).map(|j| format!("x{j}")).collect(),
    };
    header.push("label".into());
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(ds.labels()[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub test: f64,
    pub holdout: f64,
    pub seed: u64,
}

impl SplitSpec {
    fn sizes(&self, n: usize) -> Result<(usize, usize, usize)> {
        let fr = [self.train, self.test, self.holdout];
        if fr.iter().any(|f| !(*f > 0.0) || !f.is_finite()) {
            return Err(Error::Domain("split fractions must be positive".into()));
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Domain("split fractions must sum to 1".into()));
        }
        let n_train = (self.train * n as f64).round() as usize;
        let n_test = (self.test * n as f64).round() as usize;
        if n_train + n_test >= n || n_train == 0 || n_test == 0 {
            return Err(Error::Domain(format!(
                "split {:?} leaves an empty part for n={n}",
                (self.train, self.test, self.holdout)
            )));
        }
        Ok((n_train, n_test, n - n_train - n_test))
    }
}

/// Index-level partition into (train, test, holdout).
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<[Vec<usize>; 3]> {
    let (a, b, _) = spec.sizes(n)?;
    let perm = Stream::new(spec.seed).permutation(n);
    Ok([perm[..a].to_vec(), perm[a..a + b].to_vec(), perm[a + b..].to_vec()])
}

pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let [a, b, c] = split_indices(ds.len(), spec)?;
    Ok((ds.subset(&a)?, ds.subset(&b)?, ds.subset(&c)?))
}

/// Member sample D0 and non-member sample D1 for one ownership test.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub member_ids: Vec<usize>,
    pub nonmember_ids: Vec<usize>,
    pub members: Dataset,
    pub nonmembers: Dataset,
}

/// Draws `n_s` rows without replacement from each pool. Member and
/// non-member draws use separate sub-streams of `seed`, so fixing the member
/// side leaves the non-member draw unchanged.
pub fn sample_pair(
    members: &Dataset,
    nonmembers: &Dataset,
    n_s: usize,
    seed: u64,
    fixed_member_ids: Option<&[usize]>,
) -> Result<SamplePair> {
    for pool in [members, nonmembers] {
        if pool.len() < n_s {
            return Err(Error::SampleSize { requested: n_s, available: pool.len() });
        }
    }
    if n_s == 0 {
        return Err(Error::SampleSize { requested: 0, available: members.len() });
    }
    let member_ids = match fixed_member_ids {
        Some(ids) => {
            if ids.len() != n_s {
                return Err(Error::Config(format!(
                    "{} fixed member ids supplied for n_S = {n_s}",
                    ids.len()
                )));
            }
            ids.to_vec()
        }
        None => Stream::derived(seed, 0).sample_indices(members.len(), n_s),
    };
    let nonmember_ids = Stream::derived(seed, 1).sample_indices(nonmembers.len(), n_s);
    Ok(SamplePair {
        members: members.subset(&member_ids)?,
        nonmembers: nonmembers.subset(&nonmember_ids)?,
        member_ids,
        nonmember_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn simplex_means_are_equidistant() {
        for k in 2..6 {
            let m = simplex_means(k, k + 1, 3.0).unwrap();
            let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let zero = vec![0.0; k + 1];
            let d01 = dist(&m[0], &m[1]);
            for i in 0..k {
                assert!((dist(&m[i], &zero) - 3.0).abs() < 1e-12);
                for j in 0..i {
                    assert!((dist(&m[i], &m[j]) - d01).abs() < 1e-12);
                }
            }
        }
        let m = simplex_means(2, 1, 2.0).unwrap();
        assert!((m[0][0] - 2.0).abs() < 1e-12 && (m[1][0] + 2.0).abs() < 1e-12);
        assert!(simplex_means(4, 2, 1.0).is_err());
    }

    #[test]
    fn synthetic_balanced_and_deterministic() {
        let a = gen_synthetic(100, 3, 2, 2.0, 0.0, 9).unwrap();
        assert_eq!(a.class_counts(), vec![50, 50]);
        let b = gen_synthetic(100, 3, 2, 2.0, 0.0, 9).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(101, 3, 3, 2.0, 0.0, 9).unwrap();
        let counts = c.class_counts();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn label_noise_rate_is_close_to_target() {
        let n = 20_000;
        let clean = gen_synthetic(n, 2, 3, 50.0, 0.0, 4).unwrap();
        let noisy = gen_synthetic(n, 2, 3, 50.0, 0.2, 4).unwrap();
        // With well separated means the clean label is recoverable from the nearest mean.
        let means = simplex_means(3, 2, 50.0).unwrap();
        let nearest = |x: &[f64]| {
            (0..3)
                .min_by(|&a, &b| {
                    let da: f64 = x.iter().zip(&means[a]).map(|(u, v)| (u - v).powi(2)).sum();
                    let db: f64 = x.iter().zip(&means[b]).map(|(u, v)| (u - v).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap()
        };
        assert!((0..n).all(|i| nearest(clean.row(i)) == clean.labels()[i]));
        let flipped = (0..n).filter(|&i| nearest(noisy.row(i)) != noisy.labels()[i]).count();
        let rate = flipped as f64 / n as f64;
        let tol = 3.0 * (0.2f64 * 0.8 / n as f64).sqrt();
        assert!((rate - 0.2).abs() <= tol, "rate {rate}");
    }

    #[test]
    fn synthetic_rejects_bad_parameters() {
        assert!(gen_synthetic(1, 2, 2, 1.0, 0.0, 0).is_err());
        assert!(gen_synthetic(10, 2, 2, -1.0, 0.0, 0).is_err());
        assert!(gen_synthetic(10, 2, 2, 1.0, 0.5, 0).is_err());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds = gen_synthetic(30, 4, 3, 1.5, 0.1, 2).unwrap();
        ds.save_csv(&path).unwrap();
        let back = load_csv(&path, "label").unwrap();
        assert_eq!(back.features(), ds.features());
        assert_eq!(back.labels(), ds.labels());
        assert!(matches!(load_csv(&path, "target"), Err(Error::ColumnNotFound(c)) if c == "target"));

        let p2 = dir.path().join("tiny.csv");
        std::fs::write(&p2, "x0,x1,label\n0,1,0\n1,0,1\n").unwrap();
        let tiny = load_csv(&p2, "label").unwrap();
        assert_eq!((tiny.len(), tiny.dim(), tiny.classes()), (2, 2, 2));

        let p3 = dir.path().join("bad.csv");
        std::fs::write(&p3, "x0,x1,label\n0,1,0\n1,abc,1\n").unwrap();
        match load_csv(&p3, "label") {
            Err(Error::NonNumeric { row, column, .. }) => assert_eq!((row, column.as_str()), (2, "x1")),
            other => panic!("unexpected {other:?}"),
        }
        let p4 = dir.path().join("empty.csv");
        std::fs::write(&p4, "").unwrap();
        assert!(load_csv(&p4, "label").is_err());
    }

    #[test]
    fn split_sizes_and_seeds() {
        let spec = SplitSpec { train: 0.5, test: 0.25, holdout: 0.25, seed: 1 };
        let [a, b, c] = split_indices(100, &spec).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (50, 25, 25));
        let other = split_indices(100, &SplitSpec { seed: 2, ..spec }).unwrap();
        assert_ne!(a, other[0]);
        let bad = SplitSpec { train: 0.98, test: 0.01, holdout: 0.01, seed: 0 };
        assert!(split_indices(10, &bad).is_err());
    }

    #[test]
    fn sample_pair_contracts() {
        let members = gen_synthetic(10, 2, 2, 1.0, 0.0, 1).unwrap();
        let nonmembers = gen_synthetic(12, 2, 2, 1.0, 0.0, 2).unwrap();
        let p = sample_pair(&members, &nonmembers, 10, 5, None).unwrap();
        let mut ids = p.member_ids.clone();
        ids.sort_unstable();
        assert_eq!(ids, (0..10).collect::<Vec<_>>());

        let p = sample_pair(&members, &nonmembers, 3, 5, Some(&[3, 1, 4])).unwrap();
        assert_eq!(p.member_ids, vec![3, 1, 4]);
        assert_eq!(p.members.row(0), members.row(3));
        assert_eq!(p.members.row(2), members.row(4));
        let q = sample_pair(&members, &nonmembers, 3, 5, None).unwrap();
        assert_eq!(p.nonmember_ids, q.nonmember_ids);

        assert!(matches!(
            sample_pair(&members, &nonmembers, 11, 0, None),
            Err(Error::SampleSize { requested: 11, available: 10 })
        ));
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 10usize..400, a in 0.1f64..0.8, b in 0.05f64..0.5, seed: u64) {
            let total = a + b + 0.1;
            let spec = SplitSpec { train: a / total, test: b / total, holdout: 0.1 / total, seed };
            if let Ok(parts) = split_indices(n, &spec) {
                let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
                prop_assert!(parts.iter().all(|p| !p.is_empty()));
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            }
        }
    }
}
