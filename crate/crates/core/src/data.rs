//! Gaussian prior and synthetic labeled targets.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::points::Points;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown dataset {0:?} (expected eight-gaussians, two-moons, checkerboard or gmm-1d)")]
    UnknownDataset(String),
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("need at least {needed} points, got {found}")]
    TooFewPoints { needed: usize, found: usize },
    #[error("coordinate {0} has zero variance")]
    DegenerateData(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetName {
    EightGaussians,
    TwoMoons,
    Checkerboard,
    Gmm1d,
}

impl FromStr for DatasetName {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "eight-gaussians" => Ok(Self::EightGaussians),
            "two-moons" => Ok(Self::TwoMoons),
            "checkerboard" => Ok(Self::Checkerboard),
            "gmm-1d" => Ok(Self::Gmm1d),
            other => Err(DataError::UnknownDataset(other.to_string())),
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::EightGaussians => "eight-gaussians",
            Self::TwoMoons => "two-moons",
            Self::Checkerboard => "checkerboard",
            Self::Gmm1d => "gmm-1d",
        })
    }
}

/// Standard deviation of each eight-gaussians component before scaling.
pub const EIGHT_GAUSSIANS_STD: f64 = 0.1;
/// Radius of the eight-gaussians ring before scaling.
pub const EIGHT_GAUSSIANS_RADIUS: f64 = 2.0;
/// Component means and std of the 1D two-component mixture before scaling.
pub const GMM1D_MEANS: [f64; 2] = [-2.0, 2.0];
pub const GMM1D_STD: f64 = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub name: DatasetName,
    /// Multiplies every coordinate of the canonical construction.
    pub scale: f64,
    /// Std of extra isotropic Gaussian jitter added after scaling.
    pub noise: f64,
}

impl DatasetSpec {
    pub fn new(name: DatasetName) -> Self {
        Self { name, scale: 1.0, noise: 0.0 }
    }

    pub fn parse(name: &str, scale: f64, noise: f64) -> Result<Self, DataError> {
        let spec = Self { name: name.parse()?, scale, noise };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(DataError::InvalidSpec(format!("scale must be positive, got {}", self.scale)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(DataError::InvalidSpec(format!("noise must be >= 0, got {}", self.noise)));
        }
        Ok(())
    }

    pub fn data_dim(&self) -> usize {
        match self.name {
            DatasetName::Gmm1d => 1,
            _ => 2,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.name {
            DatasetName::EightGaussians => 8,
            _ => 2,
        }
    }

    /// Mode centers for mixture datasets, indexed by label.
    pub fn mode_centers(&self) -> Option<Points> {
        match self.name {
            DatasetName::EightGaussians => {
                let r = EIGHT_GAUSSIANS_RADIUS * self.scale;
                let rows: Vec<[f64; 2]> = (0..8)
                    .map(|k| {
                        let a = 2.0 * PI * k as f64 / 8.0;
                        [r * a.cos(), r * a.sin()]
                    })
                    .collect();
                Some(Points::from_rows(&rows))
            }
            DatasetName::Gmm1d => Some(Points::new(1, GMM1D_MEANS.iter().map(|m| m * self.scale).collect())),
            _ => None,
        }
    }

    /// Per-coordinate std of each mixture component, including jitter.
    pub fn mode_std(&self) -> Option<f64> {
        let base = match self.name {
            DatasetName::EightGaussians => EIGHT_GAUSSIANS_STD,
            DatasetName::Gmm1d => GMM1D_STD,
            _ => return None,
        };
        Some(((base * self.scale).powi(2) + self.noise * self.noise).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPoints {
    pub points: Points,
    pub labels: Vec<usize>,
}

impl LabeledPoints {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn sample_prior_with<R: Rng + ?Sized>(rng: &mut R, n: usize, dim: usize) -> Points {
    let data = (0..n * dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Points::new(dim, data)
}

/// `n` i.i.d. standard normal points.
pub fn sample_prior(n: usize, dim: usize, seed: u64) -> Points {
    sample_prior_with(&mut ChaCha8Rng::seed_from_u64(seed), n, dim)
}

pub fn sample_target(spec: &DatasetSpec, n: usize, seed: u64) -> Result<LabeledPoints, DataError> {
    sample_target_with(spec, n, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn sample_target_with<R: Rng + ?Sized>(
    spec: &DatasetSpec,
    n: usize,
    rng: &mut R,
) -> Result<LabeledPoints, DataError> {
    spec.validate()?;
    if n == 0 {
        return Err(DataError::TooFewPoints { needed: 1, found: 0 });
    }
    let dim = spec.data_dim();
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        match spec.name {
            DatasetName::EightGaussians => {
                let k = rng.random_range(0..8usize);
                let a = 2.0 * PI * k as f64 / 8.0;
                let e0: f64 = rng.sample(StandardNormal);
                let e1: f64 = rng.sample(StandardNormal);
                data.push(EIGHT_GAUSSIANS_RADIUS * a.cos() + EIGHT_GAUSSIANS_STD * e0);
                data.push(EIGHT_GAUSSIANS_RADIUS * a.sin() + EIGHT_GAUSSIANS_STD * e1);
                labels.push(k);
            }
            DatasetName::TwoMoons => {
                let theta = rng.random_range(0.0..PI);
                let label = i % 2;
                if label == 0 {
                    data.push(theta.cos());
                    data.push(theta.sin());
                } else {
                    data.push(1.0 - theta.cos());
                    data.push(0.5 - theta.sin());
                }
                labels.push(label);
            }
            DatasetName::Checkerboard => {
                // occupied cells have even (row + col); label is the column parity
                let cell = rng.random_range(0..8usize);
                let row = cell / 2;
                let col = 2 * (cell % 2) + row % 2;
                let u: f64 = rng.random();
                let v: f64 = rng.random();
                data.push(-2.0 + col as f64 + u);
                data.push(-2.0 + row as f64 + v);
                labels.push(col % 2);
            }
            DatasetName::Gmm1d => {
                let k = rng.random_range(0..2usize);
                let e: f64 = rng.sample(StandardNormal);
                data.push(GMM1D_MEANS[k] + GMM1D_STD * e);
                labels.push(k);
            }
        }
    }
    for v in &mut data {
        *v *= spec.scale;
    }
    if spec.noise > 0.0 {
        for v in &mut data {
            *v += spec.noise * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(LabeledPoints { points: Points::new(dim, data), labels })
}

/// Per-coordinate affine normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn apply(&self, points: &Points) -> Points {
        let mut out = points.clone();
        for i in 0..out.len() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        out
    }

    pub fn invert(&self, points: &Points) -> Points {
        let mut out = points.clone();
        for i in 0..out.len() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = *v * self.std[j] + self.mean[j];
            }
        }
        out
    }
}

/// Subtracts the mean and divides by the (population) std of each coordinate.
pub fn normalize(points: &Points) -> Result<(Points, NormStats), DataError> {
    let n = points.len();
    if n < 2 {
        return Err(DataError::TooFewPoints { needed: 2, found: n });
    }
    let d = points.dim();
    let mut mean = vec![0.0; d];
    for r in points.rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for r in points.rows() {
        for j in 0..d {
            var[j] += (r[j] - mean[j]).powi(2);
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / n as f64).sqrt()).collect();
    if let Some(j) = std.iter().position(|&s| s == 0.0 || !s.is_finite()) {
        return Err(DataError::DegenerateData(j));
    }
    let stats = NormStats { mean, std };
    Ok((stats.apply(points), stats))
}

/// Writes `x0,x1,label` rows (2D layout; 1D points leave `x1` empty). Missing
/// labels are written as empty fields.
pub fn write_points_csv<W: Write>(mut w: W, points: &Points, labels: Option<&[usize]>) -> std::io::Result<()> {
    writeln!(w, "x0,x1,label")?;
    for (i, r) in points.rows().enumerate() {
        let x1 = r.get(1).map(|v| v.to_string()).unwrap_or_default();
        let label = labels.map(|l| l[i].to_string()).unwrap_or_default();
        writeln!(w, "{},{},{}", r[0], x1, label)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prior_moments() {
        let p = sample_prior(100_000, 2, 42);
        for j in 0..2 {
            let xs: Vec<f64> = p.rows().map(|r| r[j]).collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
            assert!(m.abs() < 0.02, "mean {m}");
            assert!((v - 1.0).abs() < 0.02, "var {v}");
        }
    }

    #[test]
    fn prior_is_deterministic_and_shaped() {
        assert_eq!(sample_prior(10, 2, 1), sample_prior(10, 2, 1));
        let one = sample_prior(1, 2, 3);
        assert_eq!((one.len(), one.dim()), (1, 2));
    }

    #[test]
    fn eight_gaussians_label_counts_and_means() {
        let spec = DatasetSpec::new(DatasetName::EightGaussians);
        let s = sample_target(&spec, 8000, 7).unwrap();
        let centers = spec.mode_centers().unwrap();
        for k in 0..8 {
            let idx: Vec<usize> = (0..s.len()).filter(|&i| s.labels[i] == k).collect();
            assert!((idx.len() as f64 - 1000.0).abs() <= 120.0, "label {k}: {}", idx.len());
            for j in 0..2 {
                let m = idx.iter().map(|&i| s.points.row(i)[j]).sum::<f64>() / idx.len() as f64;
                assert!((m - centers.row(k)[j]).abs() < 0.02, "label {k} coord {j}: {m}");
            }
        }
    }

    #[test]
    fn noiseless_moons_lie_on_arcs() {
        let s = sample_target(&DatasetSpec::new(DatasetName::TwoMoons), 500, 3).unwrap();
        for (r, &l) in s.points.rows().zip(&s.labels) {
            let (cx, cy) = if l == 0 { (0.0, 0.0) } else { (1.0, 0.5) };
            let rad = ((r[0] - cx).powi(2) + (r[1] - cy).powi(2)).sqrt();
            assert!((rad - 1.0).abs() < 1e-12);
            if l == 0 {
                assert!(r[1] >= 0.0);
            } else {
                assert!(r[1] <= 0.5);
            }
        }
    }

    #[test]
    fn checkerboard_occupies_even_cells() {
        let s = sample_target(&DatasetSpec::new(DatasetName::Checkerboard), 2000, 5).unwrap();
        for (r, &l) in s.points.rows().zip(&s.labels) {
            assert!(r.iter().all(|v| (-2.0..2.0).contains(v)));
            let col = (r[0] + 2.0).floor() as usize;
            let row = (r[1] + 2.0).floor() as usize;
            assert_eq!((col + row) % 2, 0);
            assert_eq!(l, col % 2);
        }
    }

    #[test]
    fn unknown_name_is_rejected() {
        assert!(matches!(DatasetSpec::parse("cifar10", 1.0, 0.0), Err(DataError::UnknownDataset(_))));
        assert!(DatasetSpec::parse("two-moons", 1.0, -0.1).is_err());
    }

    #[test]
    fn samplers_are_deterministic() {
        for name in ["eight-gaussians", "two-moons", "checkerboard", "gmm-1d"] {
            let spec = DatasetSpec::parse(name, 1.5, 0.05).unwrap();
            let a = sample_target(&spec, 64, 9).unwrap();
            assert_eq!(a, sample_target(&spec, 64, 9).unwrap());
            assert!(a.points.all_finite());
            assert!(a.labels.iter().all(|&l| l < spec.num_classes()));
        }
    }

    #[test]
    fn normalize_round_trip() {
        let p = sample_target(&DatasetSpec::new(DatasetName::TwoMoons), 1000, 1).unwrap().points;
        let (z, stats) = normalize(&p).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = z.rows().map(|r| r[j]).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let s = (col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
            assert!(m.abs() < 1e-12 && (s - 1.0).abs() < 1e-12);
        }
        let back = stats.invert(&z);
        for (a, b) in back.data().iter().zip(p.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_input_is_degenerate() {
        let p = Points::from_rows(&[[1.0, 2.0], [1.0, 3.0], [1.0, 4.0]]);
        assert!(matches!(normalize(&p), Err(DataError::DegenerateData(0))));
    }

    #[test]
    fn csv_layout() {
        let mut buf = Vec::new();
        write_points_csv(&mut buf, &Points::from_rows(&[[1.0, 2.5]]), Some(&[3])).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "x0,x1,label\n1,2.5,3\n");
    }
}
