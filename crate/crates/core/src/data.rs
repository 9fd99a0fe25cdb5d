//! Synthetic imbalanced datasets: Gaussian clusters, simulated priors, label
//! corruption, shuffled mini-batches and the CSV file format.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kelly::{ProbabilityVector, PROB_FLOOR};
use crate::seeds;

const FREQUENCY_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub true_labels: Vec<usize>,
    /// Labels available to training; may differ from `true_labels` after corruption.
    pub reference_labels: Vec<usize>,
    pub priors: Array2<f64>,
    /// Realized class fractions of `true_labels`.
    pub class_frequencies: Vec<f64>,
}

impl Dataset {
    pub fn num_samples(&self) -> usize {
        self.true_labels.len()
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.priors.ncols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        counts_of(&self.true_labels, self.num_classes())
    }

    /// Replaces the priors with noisy one-hot priors of the true labels.
    pub fn apply_prior_noise(&mut self, epsilon: f64) -> Result<()> {
        self.priors = synthesize_priors(&self.true_labels, self.num_classes(), epsilon)?;
        Ok(())
    }

    /// Replaces the reference labels with a corrupted copy of the true labels.
    pub fn apply_label_flip(&mut self, flip_fraction: f64, seed: u64) -> Result<()> {
        self.reference_labels = corrupt_labels(&self.true_labels, flip_fraction, self.num_classes(), seed)?;
        Ok(())
    }

    /// Rows `indices` as a new dataset with the same class frequencies.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(ndarray::Axis(0), indices),
            true_labels: indices.iter().map(|&i| self.true_labels[i]).collect(),
            reference_labels: indices.iter().map(|&i| self.reference_labels[i]).collect(),
            priors: self.priors.select(ndarray::Axis(0), indices),
            class_frequencies: self.class_frequencies.clone(),
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let (d, k) = (self.num_features(), self.num_classes());
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..d).map(|i| format!("f{i}")).collect();
        header.push("label".into());
        header.push("true_label".into());
        header.extend((0..k).map(|c| format!("prior_{c}")));
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for j in 0..self.num_samples() {
            record.clear();
            record.extend(self.features.row(j).iter().map(|v| format!("{v:.16e}")));
            record.push(self.reference_labels[j].to_string());
            record.push(self.true_labels[j].to_string());
            record.extend(self.priors.row(j).iter().map(|v| format!("{v:.16e}")));
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let d = header.iter().take_while(|h| h.starts_with('f')).count();
        let expected_tail = ["label", "true_label"];
        for (i, name) in expected_tail.iter().enumerate() {
            if header.get(d + i) != Some(name) {
                return Err(Error::Format(format!("expected column `{name}` at position {}", d + i)));
            }
        }
        let k = header.len() - d - 2;
        for i in 0..d {
            if header[i] != format!("f{i}") {
                return Err(Error::Format(format!("unexpected column `{}`", &header[i])));
            }
        }
        for c in 0..k {
            if header[d + 2 + c] != format!("prior_{c}") {
                return Err(Error::Format(format!("unexpected column `{}`", &header[d + 2 + c])));
            }
        }
        if d == 0 || k < 2 {
            return Err(Error::Format("need at least one feature and two classes".into()));
        }

        let mut features = Vec::new();
        let mut priors = Vec::new();
        let mut reference_labels = Vec::new();
        let mut true_labels = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let real = |i: usize| -> Result<f64> {
                let v: f64 = rec[i]
                    .trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("row {line}: bad number `{}`", &rec[i])))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::NonFinite(format!("row {line}, column {i}")))
                }
            };
            let label = |i: usize| -> Result<usize> {
                let v: usize = rec[i]
                    .trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("row {line}: bad label `{}`", &rec[i])))?;
                if v < k {
                    Ok(v)
                } else {
                    Err(Error::Format(format!("row {line}: label {v} out of range")))
                }
            };
            for i in 0..d {
                features.push(real(i)?);
            }
            reference_labels.push(label(d)?);
            true_labels.push(label(d + 1)?);
            let row = (0..k).map(|c| real(d + 2 + c)).collect::<Result<Vec<_>>>()?;
            ProbabilityVector::new(row.clone()).map_err(|e| Error::Format(format!("row {line}: prior {e}")))?;
            priors.extend(row);
        }
        let m = true_labels.len();
        let counts = counts_of(&true_labels, k);
        Ok(Dataset {
            features: Array2::from_shape_vec((m, d), features).expect("row-major features"),
            true_labels,
            reference_labels,
            priors: Array2::from_shape_vec((m, k), priors).expect("row-major priors"),
            class_frequencies: counts.iter().map(|&c| c as f64 / m.max(1) as f64).collect(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        Self::read_csv(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn counts_of(labels: &[usize], k: usize) -> Vec<usize> {
    let mut counts = vec![0; k];
    labels.iter().for_each(|&l| counts[l] += 1);
    counts
}

/// Checks that `frequencies` is non-negative and sums to 1 within 1e-6, and
/// returns it renormalized.
pub fn validate_frequencies(frequencies: &[f64]) -> Result<Vec<f64>> {
    if frequencies.len() < 2 {
        return Err(Error::InvalidProbability("need at least two class frequencies".into()));
    }
    if frequencies.iter().any(|f| !(*f >= 0.0) || !f.is_finite()) {
        return Err(Error::InvalidProbability(format!("negative or non-finite frequency in {frequencies:?}")));
    }
    let total: f64 = frequencies.iter().sum();
    if (total - 1.0).abs() > FREQUENCY_TOLERANCE {
        return Err(Error::InvalidProbability(format!("frequencies sum to {total}")));
    }
    Ok(frequencies.iter().map(|f| f / total).collect())
}

/// Integer counts summing to `m` by the largest-remainder rule; ties go to the
/// lower class index.
pub fn class_counts(m: usize, frequencies: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = frequencies.iter().map(|f| f * m as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..frequencies.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &c in order.iter().take(m.saturating_sub(assigned)) {
        counts[c] += 1;
    }
    counts
}

/// Cluster mean of class `c`: equally spaced on a circle of radius `separation`
/// in the first two coordinates.
fn cluster_mean(c: usize, k: usize, d: usize, separation: f64) -> Vec<f64> {
    let theta = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
    let mut mean = vec![0.0; d];
    mean[0] = separation * theta.cos();
    if d > 1 {
        mean[1] = separation * theta.sin();
    }
    mean
}

/// Gaussian clusters with unit covariance, one per class. Reference labels
/// equal the true labels and priors are uniform.
pub fn generate(k: usize, d: usize, m: usize, frequencies: &[f64], separation: f64, seed: u64) -> Result<Dataset> {
    let freq = validate_frequencies(frequencies)?;
    if freq.len() != k {
        return Err(Error::InvalidProbability(format!("{} frequencies for {k} classes", freq.len())));
    }
    if d == 0 {
        return Err(Error::Domain("need at least one feature".into()));
    }
    if m < k {
        return Err(Error::Domain(format!("{m} samples cannot cover {k} classes")));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::Domain(format!("separation {separation} must be >= 0")));
    }
    let counts = class_counts(m, &freq);
    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
        .collect();
    let mut rng = seeds::rng(seed);
    labels.shuffle(&mut rng);

    let means: Vec<Vec<f64>> = (0..k).map(|c| cluster_mean(c, k, d, separation)).collect();
    let mut features = Array2::zeros((m, d));
    for (j, &c) in labels.iter().enumerate() {
        for i in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            features[[j, i]] = means[c][i] + z;
        }
    }
    Ok(Dataset {
        features,
        reference_labels: labels.clone(),
        true_labels: labels,
        priors: Array2::from_elem((m, k), 1.0 / k as f64),
        class_frequencies: counts.iter().map(|&n| n as f64 / m as f64).collect(),
    })
}

/// Prior rows `(1−ε)·onehot(true) + ε/K`, clamped to the open unit interval and
/// renormalized.
pub fn synthesize_priors(true_labels: &[usize], k: usize, epsilon: f64) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Domain(format!("prior noise {epsilon} outside [0, 1]")));
    }
    let mut priors = Array2::zeros((true_labels.len(), k));
    for (j, &t) in true_labels.iter().enumerate() {
        if t >= k {
            return Err(Error::Domain(format!("label {t} out of range for {k} classes")));
        }
        let mut row: Vec<f64> = (0..k)
            .map(|c| (1.0 - epsilon) * f64::from(u8::from(c == t)) + epsilon / k as f64)
            .collect();
        if row.iter().any(|&v| v < PROB_FLOOR || v > 1.0 - PROB_FLOOR) {
            row = ProbabilityVector::new(row)?.values().to_vec();
        }
        priors.row_mut(j).iter_mut().zip(row).for_each(|(p, v)| *p = v);
    }
    Ok(priors)
}

/// Reassigns exactly `⌊flip_fraction·M⌋` uniformly chosen labels to a
/// uniformly chosen different class.
pub fn corrupt_labels(true_labels: &[usize], flip_fraction: f64, k: usize, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&flip_fraction) {
        return Err(Error::Domain(format!("flip fraction {flip_fraction} outside [0, 1)")));
    }
    if k < 2 {
        return Err(Error::Domain("label corruption needs at least two classes".into()));
    }
    let m = true_labels.len();
    let flips = (flip_fraction * m as f64).floor() as usize;
    let mut rng = seeds::rng(seed);
    let mut out = true_labels.to_vec();
    for idx in rand::seq::index::sample(&mut rng, m, flips) {
        let shift = rng.random_range(1..k);
        out[idx] = (out[idx] + shift) % k;
    }
    Ok(out)
}

/// A fresh shuffled partition of `0..m` into batches of `batch_size`, the last
/// one possibly shorter.
pub fn batches(m: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Domain("batch size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut seeds::rng(epoch_seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
