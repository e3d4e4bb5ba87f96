//! Built-in synthetic classification tasks and a CSV loader.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Labeled feature vectors: `inputs` is `[n, features]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::InvalidParams(format!("{} inputs but {} labels", inputs.rows(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidParams(format!("label {bad} outside {classes} classes")));
        }
        Ok(Self { inputs, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.inputs.row_len()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            inputs: self.inputs.slice_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Seeded shuffle, then the first `train_fraction` goes to training.
    pub fn split(&self, train_fraction: f64, seed: u64) -> TaskData {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = ((self.len() as f64) * train_fraction).round() as usize;
        TaskData { train: self.subset(&idx[..cut]), eval: self.subset(&idx[cut..]) }
    }

    /// Reads rows of `f1,...,fk,label`. A non-numeric first row is treated as
    /// a header.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record?;
            let values: std::result::Result<Vec<f64>, _> = record.iter().map(|v| v.trim().parse::<f64>()).collect();
            let values = match values {
                Ok(v) => v,
                Err(_) if i == 0 => continue,
                Err(e) => return Err(Error::InvalidParams(format!("row {}: {e}", i + 1))),
            };
            let (&label, features) = values
                .split_last()
                .ok_or_else(|| Error::InvalidParams(format!("row {} is empty", i + 1)))?;
            if label < 0.0 || label.fract() != 0.0 {
                return Err(Error::InvalidParams(format!("row {}: label {label} is not a class index", i + 1)));
            }
            rows.push(features.to_vec());
            labels.push(label as usize);
        }
        if rows.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        Dataset::new(Tensor::from_rows(&rows)?, labels, classes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub train: Dataset,
    pub eval: Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTask {
    /// Three interleaved spiral arms.
    Spiral,
    /// Two interleaving half circles.
    Moons,
    /// Three isotropic Gaussian blobs.
    Blobs,
}

impl SyntheticTask {
    pub fn classes(&self) -> usize {
        match self {
            SyntheticTask::Spiral | SyntheticTask::Blobs => 3,
            SyntheticTask::Moons => 2,
        }
    }

    /// `n` points (split as evenly as possible across classes), reproducible
    /// from `seed`.
    pub fn generate(&self, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes = self.classes();
        let mut rows = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for class in 0..classes {
            let count = n / classes + usize::from(class < n % classes);
            for i in 0..count {
                let t = if count > 1 { i as f64 / (count - 1) as f64 } else { 0.0 };
                rows.push(self.sample(class, t, &mut rng));
                labels.push(class);
            }
        }
        Dataset::new(Tensor::from_rows(&rows).expect("uniform rows"), labels, classes).expect("labels in range")
    }

    fn sample(&self, class: usize, t: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let noise = |rng: &mut ChaCha8Rng, std: f64| Normal::new(0.0, std).expect("finite std").sample(rng);
        match self {
            SyntheticTask::Spiral => {
                let radius = t;
                let angle = 4.0 * (class as f64 + t) + noise(rng, 0.2);
                vec![radius * angle.sin(), radius * angle.cos()]
            }
            SyntheticTask::Moons => {
                let a = std::f64::consts::PI * rng.random::<f64>();
                let (x, y) = if class == 0 { (a.cos(), a.sin()) } else { (1.0 - a.cos(), 0.5 - a.sin()) };
                vec![x + noise(rng, 0.1), y + noise(rng, 0.1)]
            }
            SyntheticTask::Blobs => {
                let theta = 2.0 * std::f64::consts::PI * class as f64 / 3.0;
                vec![3.0 * theta.cos() + noise(rng, 1.0), 3.0 * theta.sin() + noise(rng, 1.0)]
            }
        }
    }
}

impl fmt::Display for SyntheticTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticTask::Spiral => "spiral",
            SyntheticTask::Moons => "moons",
            SyntheticTask::Blobs => "blobs",
        })
    }
}

impl FromStr for SyntheticTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "spiral" => Ok(SyntheticTask::Spiral),
            "moons" | "two-moons" => Ok(SyntheticTask::Moons),
            "blobs" => Ok(SyntheticTask::Blobs),
            other => Err(Error::InvalidParams(format!("unknown synthetic task {other:?} (spiral, moons, blobs)"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seeded() {
        let a = SyntheticTask::Spiral.generate(500, 3);
        assert_eq!(a, SyntheticTask::Spiral.generate(500, 3));
        assert_ne!(a, SyntheticTask::Spiral.generate(500, 4));
        assert_eq!(a.len(), 500);
        assert_eq!(a.features(), 2);
        assert_eq!(a.labels.iter().filter(|&&l| l == 0).count(), 167);
    }

    #[test]
    fn split_partitions() {
        let d = SyntheticTask::Moons.generate(101, 0);
        let s = d.split(0.8, 1);
        assert_eq!(s.train.len() + s.eval.len(), 101);
        assert_eq!(s.train.len(), 81);
    }

    #[test]
    fn csv_round_trip() {
        let dir = std::env::temp_dir().join(format!("skipwise-csv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("d.csv");
        std::fs::write(&path, "x,y,label\n0.5,1.0,0\n-1,2,2\n").unwrap();
        let d = Dataset::from_csv(&path).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.classes, 3);
        assert_eq!(d.inputs.row(1), &[-1.0, 2.0]);
        std::fs::write(&path, "1,2,0.5\n").unwrap();
        assert!(Dataset::from_csv(&path).is_err());
        std::fs::remove_dir_all(dir).ok();
    }
}
