//! Sample-based distribution distances for training curves and A/B runs.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::points::{sq_dist, Points};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("need at least {needed} points, got {found}")]
    TooFewPoints { needed: usize, found: usize },
    #[error("point sets have dimensions {0} and {1}")]
    DimensionMismatch(usize, usize),
    #[error("at least one projection is required")]
    NoProjections,
}

fn random_direction<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn project(p: &Points, dir: &[f64], subset: Option<&[usize]>) -> Vec<f64> {
    let dot = |r: &[f64]| r.iter().zip(dir).map(|(a, b)| a * b).sum::<f64>();
    let mut out: Vec<f64> = match subset {
        Some(idx) => idx.iter().map(|&i| dot(p.row(i))).collect(),
        None => p.rows().map(dot).collect(),
    };
    out.sort_by(f64::total_cmp);
    out
}

/// Mean over `n_proj` random unit directions of the 1D 2-Wasserstein distance
/// between the projected sets. The larger set is subsampled without
/// replacement to the size of the smaller one.
pub fn sliced_wasserstein<R: Rng + ?Sized>(a: &Points, b: &Points, n_proj: usize, rng: &mut R) -> Result<f64, MetricError> {
    if a.dim() != b.dim() {
        return Err(MetricError::DimensionMismatch(a.dim(), b.dim()));
    }
    for p in [a, b] {
        if p.len() < 2 {
            return Err(MetricError::TooFewPoints { needed: 2, found: p.len() });
        }
    }
    if n_proj == 0 {
        return Err(MetricError::NoProjections);
    }
    let n = a.len().min(b.len());
    let pick = |p: &Points, rng: &mut R| (p.len() > n).then(|| index::sample(rng, p.len(), n).into_vec());
    let sub_a = pick(a, rng);
    let sub_b = pick(b, rng);
    let mut total = 0.0;
    for _ in 0..n_proj {
        let dir = random_direction(a.dim(), rng);
        let pa = project(a, &dir, sub_a.as_deref());
        let pb = project(b, &dir, sub_b.as_deref());
        let w2 = pa.iter().zip(&pb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64;
        total += w2.sqrt();
    }
    Ok(total / n_proj as f64)
}

fn moments(p: &Points) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (p.len() as f64, p.dim());
    let mut mean = DVector::zeros(d);
    for r in p.rows() {
        mean += DVector::from_column_slice(r);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for r in p.rows() {
        let c = DVector::from_column_slice(r) - &mean;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    (mean, cov)
}

/// Symmetric PSD square root with negative eigenvalues clipped to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

pub const FRECHET_RIDGE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frechet {
    pub value: f64,
    /// A ridge was added because a covariance was numerically singular.
    pub ridge_added: bool,
}

/// Frechet distance between Gaussians fitted to each set:
/// `|mu_a - mu_b|^2 + tr(C_a + C_b - 2 (C_a^1/2 C_b C_a^1/2)^1/2)`.
pub fn gaussian_frechet(a: &Points, b: &Points) -> Result<Frechet, MetricError> {
    if a.dim() != b.dim() {
        return Err(MetricError::DimensionMismatch(a.dim(), b.dim()));
    }
    let needed = a.dim() + 1;
    for p in [a, b] {
        if p.len() < needed {
            return Err(MetricError::TooFewPoints { needed, found: p.len() });
        }
    }
    let (ma, mut ca) = moments(a);
    let (mb, mut cb) = moments(b);
    let mut ridge_added = false;
    for c in [&mut ca, &mut cb] {
        let min = c.clone().symmetric_eigen().eigenvalues.min();
        if min < FRECHET_RIDGE {
            *c += DMatrix::identity(a.dim(), a.dim()) * FRECHET_RIDGE;
            ridge_added = true;
        }
    }
    let ra = psd_sqrt(&ca);
    let cross = psd_sqrt(&(&ra * &cb * &ra));
    let value = (ma - mb).norm_squared() + (ca + cb - cross * 2.0).trace();
    Ok(Frechet { value: value.max(0.0), ridge_added })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coverage {
    /// Fraction of modes receiving at least 1% of the samples.
    pub fraction: f64,
    pub counts: Vec<usize>,
}

pub const COVERAGE_MIN_SHARE: f64 = 0.01;

/// Assigns each sample to its nearest center.
pub fn mode_coverage(samples: &Points, centers: &Points) -> Coverage {
    let mut counts = vec![0; centers.len()];
    for s in samples.rows() {
        let nearest = centers
            .rows()
            .enumerate()
            .map(|(k, c)| (k, sq_dist(s, c)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k)
            .expect("at least one center");
        counts[nearest] += 1;
    }
    let threshold = COVERAGE_MIN_SHARE * samples.len() as f64;
    let covered = counts.iter().filter(|&&c| c > 0 && c as f64 >= threshold).count();
    Coverage { fraction: covered as f64 / centers.len() as f64, counts }
}

/// Fraction of samples within `radius` of some center.
pub fn fraction_near_modes(samples: &Points, centers: &Points, radius: f64) -> f64 {
    let r2 = radius * radius;
    let near = samples.rows().filter(|s| centers.rows().any(|c| sq_dist(s, c) <= r2)).count();
    near as f64 / samples.len().max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub sliced_w2: f64,
    pub gaussian_frechet: f64,
    pub mode_coverage: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_prior, sample_target, DatasetName, DatasetSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn scaled(p: &Points, s: &[f64], shift: &[f64]) -> Points {
        let d = p.dim();
        let data = p.data().iter().enumerate().map(|(i, v)| v * s[i % d] + shift[i % d]).collect();
        Points::new(d, data)
    }

    #[test]
    fn sliced_w2_identities() {
        let a = sample_prior(500, 2, 1);
        assert_eq!(sliced_wasserstein(&a, &a, 16, &mut rng(0)).unwrap(), 0.0);
        let a1 = sample_prior(300, 1, 2);
        let b1 = scaled(&a1, &[1.0], &[0.75]);
        assert!((sliced_wasserstein(&a1, &b1, 8, &mut rng(0)).unwrap() - 0.75).abs() < 1e-12);
        assert!(sliced_wasserstein(&a, &Points::zeros(1, 2), 4, &mut rng(0)).is_err());
    }

    #[test]
    fn sliced_w2_gaussian_scale() {
        let a = sample_prior(8192, 1, 3);
        let b = scaled(&sample_prior(8192, 1, 4), &[2.0], &[0.0]);
        let w = sliced_wasserstein(&a, &b, 128, &mut rng(5)).unwrap();
        assert!((w - 1.0).abs() < 0.15, "{w}");
    }

    #[test]
    fn sliced_w2_is_symmetric_with_shared_stream() {
        let a = sample_prior(400, 2, 6);
        let b = scaled(&sample_prior(400, 2, 7), &[1.5, 0.5], &[1.0, 0.0]);
        let ab = sliced_wasserstein(&a, &b, 32, &mut rng(9)).unwrap();
        let ba = sliced_wasserstein(&b, &a, 32, &mut rng(9)).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn more_projections_reduce_spread() {
        let a = sample_prior(256, 2, 10);
        let b = scaled(&sample_prior(256, 2, 11), &[2.0, 0.5], &[0.0, 0.0]);
        let spread = |n_proj| {
            let v: Vec<f64> = (0..40).map(|s| sliced_wasserstein(&a, &b, n_proj, &mut rng(100 + s)).unwrap()).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
        };
        assert!(spread(16) < spread(8));
    }

    #[test]
    fn frechet_cases() {
        let a = sample_prior(1000, 2, 12);
        assert!(gaussian_frechet(&a, &a).unwrap().value.abs() < 1e-10);
        let big_a = sample_prior(100_000, 2, 13);
        let shifted = scaled(&sample_prior(100_000, 2, 14), &[1.0, 1.0], &[1.0, 0.0]);
        let f = gaussian_frechet(&big_a, &shifted).unwrap();
        assert!((f.value - 1.0).abs() < 0.05, "{}", f.value);
        let stretched = scaled(&sample_prior(100_000, 2, 15), &[2.0, 1.0], &[0.0, 0.0]);
        let f = gaussian_frechet(&big_a, &stretched).unwrap();
        assert!((f.value - 1.0).abs() < 0.1, "{}", f.value);
        let degenerate = Points::new(2, (0..20).flat_map(|i| [i as f64, 0.0]).collect());
        let f = gaussian_frechet(&degenerate, &degenerate).unwrap();
        assert!(f.ridge_added && f.value >= 0.0 && f.value < 1e-6);
        assert!(gaussian_frechet(&Points::zeros(2, 2), &a).is_err());
    }

    #[test]
    fn coverage_cases() {
        let spec = DatasetSpec::new(DatasetName::EightGaussians);
        let centers = spec.mode_centers().unwrap();
        assert_eq!(mode_coverage(&centers, &centers).fraction, 1.0);
        let one = Points::new(2, centers.row(3).repeat(100));
        let c = mode_coverage(&one, &centers);
        assert_eq!((c.fraction, c.counts[3]), (1.0 / 8.0, 100));
        let s = sample_target(&spec, 4000, 1).unwrap();
        assert_eq!(mode_coverage(&s.points, &centers).fraction, 1.0);
        assert!(fraction_near_modes(&s.points, &centers, 0.4) > 0.99);
    }
}
