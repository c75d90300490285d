//! Synthetic datasets: Gaussian blobs in a low-dimensional latent plane,
//! pushed through a random nonlinear map into a high-dimensional space.
//!
//! With `sigma` the logistic sigmoid and `h` a latent code:
//!
//! - `SigSig`: `x = sigma(U sigma(W h))`, `W` is `hidden x latent`, `U` is
//!   `ambient x hidden`.
//! - `SquaredSigmoid`: `x = sigma(W h)^2` elementwise, `W` is `ambient x latent`.
//! - `TanhSigmoid`: `x = tanh(sigma(W h))`, `W` is `ambient x latent`.
//!
//! All mixing matrices have i.i.d. standard normal entries.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kmeans::{lloyd, LloydConfig};
use crate::linalg::{matmul_bt, Matrix};
use crate::metrics;
use crate::seed::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorKind {
    SigSig,
    SquaredSigmoid,
    TanhSigmoid,
}

impl GeneratorKind {
    pub const ALL: [GeneratorKind; 3] = [Self::SigSig, Self::SquaredSigmoid, Self::TanhSigmoid];

    pub fn name(self) -> &'static str {
        match self {
            Self::SigSig => "sigsig",
            Self::SquaredSigmoid => "squared_sigmoid",
            Self::TanhSigmoid => "tanh_sigmoid",
        }
    }
}

impl fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown generator '{s}' (expected sigsig, squared_sigmoid or tanh_sigmoid)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    pub clusters: usize,
    pub per_cluster: usize,
    pub latent_dim: usize,
    pub ambient_dim: usize,
    /// Width of the inner map of `SigSig`.
    pub hidden_dim: usize,
    /// Blob centers sit at `(+-scale, +-scale)` for four clusters, otherwise
    /// evenly on a circle of radius `scale * sqrt(2)`.
    pub centroid_scale: f64,
    /// Within-cluster standard deviation of the latent codes.
    pub noise_std: f64,
    pub seed: u64,
}

impl GeneratorSpec {
    /// Four blobs of 2,500 points in the plane, mapped to 100 dimensions.
    pub fn new(kind: GeneratorKind, seed: u64) -> Self {
        Self {
            kind,
            clusters: 4,
            per_cluster: 2500,
            latent_dim: 2,
            ambient_dim: 100,
            hidden_dim: 10,
            centroid_scale: 4.0,
            noise_std: 0.8,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters < 1 || self.per_cluster < 1 {
            return Err(Error::invalid("clusters and per_cluster must be >= 1"));
        }
        if self.latent_dim < 2 {
            return Err(Error::invalid("latent_dim must be >= 2"));
        }
        if self.ambient_dim <= self.latent_dim {
            return Err(Error::invalid(format!(
                "ambient_dim {} must exceed latent_dim {}",
                self.ambient_dim, self.latent_dim
            )));
        }
        if self.kind == GeneratorKind::SigSig && self.hidden_dim < 1 {
            return Err(Error::invalid("hidden_dim must be >= 1"));
        }
        if !(self.centroid_scale.is_finite() && self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::invalid("centroid_scale and noise_std must be finite, noise_std >= 0"));
        }
        Ok(())
    }

    /// `clusters x latent_dim` blob centers; coordinates past the second are 0.
    pub fn centroids(&self) -> Matrix {
        let (k, s) = (self.clusters, self.centroid_scale);
        let mut m = Matrix::zeros(k, self.latent_dim);
        if k == 4 {
            for (i, (a, b)) in [(s, s), (-s, s), (-s, -s), (s, -s)].into_iter().enumerate() {
                m.set(i, 0, a);
                m.set(i, 1, b);
            }
        } else {
            let r = s * std::f64::consts::SQRT_2;
            for i in 0..k {
                let t = std::f64::consts::FRAC_PI_4 + std::f64::consts::TAU * i as f64 / k as f64;
                m.set(i, 0, r * t.cos());
                m.set(i, 1, r * t.sin());
            }
        }
        m
    }
}

/// A generated dataset together with every random ingredient.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    /// Features, labels and the latent codes in `dataset.latent`.
    pub dataset: Dataset,
    pub centroids: Matrix,
    pub w: Matrix,
    /// Outer map of `SigSig`.
    pub u: Option<Matrix>,
    /// `sigma(W h)` for `SigSig`, `hidden_dim` columns.
    pub inner: Option<Matrix>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn map(mut m: Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    m.as_mut_slice().iter_mut().for_each(|v| *v = f(*v));
    m
}

/// Samples are ordered by cluster: rows `c * per_cluster ..` carry label `c`.
pub fn generate(spec: &GeneratorSpec) -> Result<Synthetic> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed, Stream::Synth, 0);
    let (w, u) = match spec.kind {
        GeneratorKind::SigSig => {
            let w = gaussian_matrix(spec.hidden_dim, spec.latent_dim, &mut rng);
            let u = gaussian_matrix(spec.ambient_dim, spec.hidden_dim, &mut rng);
            (w, Some(u))
        }
        _ => (gaussian_matrix(spec.ambient_dim, spec.latent_dim, &mut rng), None),
    };
    let centroids = spec.centroids();
    let n = spec.clusters * spec.per_cluster;
    let labels: Vec<usize> = (0..n).map(|i| i / spec.per_cluster).collect();
    let mut h = Matrix::zeros(n, spec.latent_dim);
    for (i, &c) in labels.iter().enumerate() {
        for j in 0..spec.latent_dim {
            let z: f64 = rng.sample(StandardNormal);
            h.set(i, j, centroids.get(c, j) + spec.noise_std * z);
        }
    }
    let wh = matmul_bt(&h, &w)?;
    let (features, inner) = match spec.kind {
        GeneratorKind::SigSig => {
            let inner = map(wh, sigmoid);
            let outer = matmul_bt(&inner, u.as_ref().expect("sigsig has U"))?;
            (map(outer, sigmoid), Some(inner))
        }
        GeneratorKind::SquaredSigmoid => (map(wh, |z| sigmoid(z).powi(2)), None),
        GeneratorKind::TanhSigmoid => (map(wh, |z| sigmoid(z).tanh()), None),
    };
    let mut dataset = Dataset::new(features, Some(labels), spec.kind.name())?;
    dataset.latent = Some(h);
    Ok(Synthetic {
        dataset,
        centroids,
        w,
        u,
        inner,
    })
}

/// Clustering accuracy of K-means run directly on the ground-truth latent
/// codes: a check that the latent geometry itself is easy for K-means.
pub fn latent_separability(dataset: &Dataset) -> Result<f64> {
    let h = dataset
        .latent
        .as_ref()
        .ok_or_else(|| Error::invalid("dataset has no latent ground truth"))?;
    let labels = dataset
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("dataset has no labels"))?;
    let k = dataset.num_classes().unwrap_or(1).max(1);
    let cfg = LloydConfig {
        restarts: 5,
        ..LloydConfig::new(k, 0)
    };
    let r = lloyd(h, &cfg)?;
    metrics::acc(labels, &r.state.assignments)
}
