//! Slice features and the k-means ensemble producing pseudo-labels.

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, Rng};
use crate::tensor::{Real, Tensor};

/// Dense row-major `rows × dim` matrix of slice vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Stack several matrices of equal width.
    pub fn concat(parts: &[FeatureMatrix]) -> Result<FeatureMatrix> {
        let dim = parts.first().map_or(0, |p| p.dim);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.dim != dim {
                return Err(Error::shape(format!("feature widths {} and {dim} differ", p.dim)));
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Ok(FeatureMatrix { rows, dim, data })
    }
}

/// One vector per slice of length `C·H·W`, batch-major then slice. Inverse of
/// [`features_to_volume`].
pub fn slice_features<T: Real>(volume: &Tensor<T>) -> FeatureMatrix {
    let [b, c, s, h, w] = volume.shape();
    let plane = h * w;
    let dim = c * plane;
    let mut data = Vec::with_capacity(volume.numel());
    let d = volume.data();
    for bi in 0..b {
        for z in 0..s {
            for ci in 0..c {
                let base = ((bi * c + ci) * s + z) * plane;
                data.extend(d[base..base + plane].iter().map(|v| v.to_f64().unwrap_or(f64::NAN)));
            }
        }
    }
    FeatureMatrix { rows: b * s, dim, data }
}

pub fn features_to_volume<T: Real>(f: &FeatureMatrix, shape: [usize; 5]) -> Result<Tensor<T>> {
    let [b, c, s, h, w] = shape;
    if f.rows != b * s || f.dim != c * h * w {
        return Err(Error::shape(format!("{}×{} features cannot fill {shape:?}", f.rows, f.dim)));
    }
    let plane = h * w;
    let mut t = Tensor::zeros(shape);
    for bi in 0..b {
        for z in 0..s {
            let row = f.row(bi * s + z);
            for ci in 0..c {
                let base = ((bi * c + ci) * s + z) * plane;
                for (dst, &v) in t.data_mut()[base..base + plane].iter_mut().zip(&row[ci * plane..]) {
                    *dst = T::lit(v);
                }
            }
        }
    }
    Ok(t)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub iterations: usize,
    pub subset_fraction: f64,
    /// Full-batch Lloyd epochs after the mini-batch phase.
    pub refine_epochs: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            iterations: 350,
            subset_fraction: 0.1,
            refine_epochs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clusterer {
    pub k: usize,
    pub dim: usize,
    pub centroids: Vec<f64>,
}

impl Clusterer {
    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    /// Nearest centroid by squared distance; ties go to the lower index.
    pub fn assign(&self, v: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for j in 0..self.k {
            let d = sq_dist(v, self.centroid(j));
            if d < best.1 {
                best = (j, d);
            }
        }
        best.0
    }

    /// Sum of squared distances to the assigned centroid.
    pub fn inertia(&self, data: &FeatureMatrix) -> f64 {
        (0..data.rows)
            .map(|i| {
                let r = data.row(i);
                sq_dist(r, self.centroid(self.assign(r)))
            })
            .sum()
    }

    /// One Lloyd epoch; empty clusters keep their centroid.
    pub fn refine(&mut self, data: &FeatureMatrix) {
        let mut sums = vec![0.0; self.k * self.dim];
        let mut counts = vec![0usize; self.k];
        for i in 0..data.rows {
            let r = data.row(i);
            let j = self.assign(r);
            counts[j] += 1;
            sums[j * self.dim..(j + 1) * self.dim].iter_mut().zip(r).for_each(|(s, &v)| *s += v);
        }
        for j in 0..self.k {
            if counts[j] > 0 {
                let n = counts[j] as f64;
                for d in 0..self.dim {
                    self.centroids[j * self.dim + d] = sums[j * self.dim + d] / n;
                }
            }
        }
    }
}

fn kmeans_plus_plus(data: &FeatureMatrix, k: usize, rng: &mut Rng) -> Vec<f64> {
    let mut centroids = Vec::with_capacity(k * data.dim);
    let first = rng.random_range(0..data.rows);
    centroids.extend_from_slice(data.row(first));
    let mut d2: Vec<f64> = (0..data.rows).map(|i| sq_dist(data.row(i), data.row(first))).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = data.rows - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..data.rows)
        };
        let c = data.row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(data.row(i), &c));
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

/// k-means++ seeding, mini-batch updates with per-centroid learning rate
/// `1/count`, then full-batch refinement.
pub fn train_clusterer(data: &FeatureMatrix, k: usize, cfg: &KMeansConfig, rng: &mut Rng) -> Result<Clusterer> {
    if data.rows == 0 {
        return Err(Error::arg("cannot cluster an empty dataset"));
    }
    if k == 0 || k > data.rows {
        return Err(Error::arg(format!("K = {k} with {} vectors", data.rows)));
    }
    if !(cfg.subset_fraction > 0.0 && cfg.subset_fraction <= 1.0) {
        return Err(Error::arg(format!("subset fraction {}", cfg.subset_fraction)));
    }
    let mut c = Clusterer {
        k,
        dim: data.dim,
        centroids: kmeans_plus_plus(data, k, rng),
    };
    let batch = ((data.rows as f64 * cfg.subset_fraction).ceil() as usize).clamp(1, data.rows);
    let mut counts = vec![0usize; k];
    for _ in 0..cfg.iterations {
        let idx = sample(rng, data.rows, batch);
        let assigned: Vec<(usize, usize)> = idx.iter().map(|i| (i, c.assign(data.row(i)))).collect();
        for (i, j) in assigned {
            counts[j] += 1;
            let eta = 1.0 / counts[j] as f64;
            let dim = c.dim;
            for (cv, &x) in c.centroids[j * dim..(j + 1) * dim].iter_mut().zip(data.row(i)) {
                *cv += eta * (x - *cv);
            }
        }
    }
    for _ in 0..cfg.refine_epochs {
        c.refine(data);
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClustererEnsemble {
    pub clusterers: Vec<Clusterer>,
}

impl ClustererEnsemble {
    /// `n` clusterers with `K_i` uniform in `k_range` (clamped to the row
    /// count), each on its own random stream.
    pub fn train(data: &FeatureMatrix, n: usize, k_range: (usize, usize), cfg: &KMeansConfig, seed: u64) -> Result<Self> {
        let (lo, hi) = k_range;
        if n == 0 || lo == 0 || lo > hi {
            return Err(Error::arg(format!("ensemble of {n} with K range {k_range:?}")));
        }
        let clusterers = (0..n)
            .map(|i| {
                let mut rng = substream(seed, "clusterer", i as u64);
                let k = rng.random_range(lo..=hi).min(data.rows);
                train_clusterer(data, k, cfg, &mut rng)
            })
            .collect::<Result<_>>()?;
        Ok(ClustererEnsemble { clusterers })
    }

    pub fn len(&self) -> usize {
        self.clusterers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusterers.is_empty()
    }

    pub fn ks(&self) -> Vec<usize> {
        self.clusterers.iter().map(|c| c.k).collect()
    }
}

/// Labels `c_i^j` for every row (slice) and clusterer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabelSet {
    pub ks: Vec<usize>,
    /// Row-major `rows × N`.
    pub labels: Vec<u32>,
}

impl PseudoLabelSet {
    pub fn clusterers(&self) -> usize {
        self.ks.len()
    }

    pub fn rows(&self) -> usize {
        if self.ks.is_empty() {
            0
        } else {
            self.labels.len() / self.ks.len()
        }
    }

    pub fn label(&self, row: usize, clusterer: usize) -> u32 {
        self.labels[row * self.ks.len() + clusterer]
    }

    /// Rows `[v·slices, (v+1)·slices)`, i.e. one volume.
    pub fn volume(&self, v: usize, slices: usize) -> Result<PseudoLabelSet> {
        let n = self.ks.len();
        if (v + 1) * slices > self.rows() {
            return Err(Error::arg(format!("volume {v} beyond {} labelled slices", self.rows())));
        }
        Ok(PseudoLabelSet {
            ks: self.ks.clone(),
            labels: self.labels[v * slices * n..(v + 1) * slices * n].to_vec(),
        })
    }

    pub fn concat(parts: &[PseudoLabelSet]) -> Result<PseudoLabelSet> {
        let ks = parts.first().map(|p| p.ks.clone()).unwrap_or_default();
        let mut labels = Vec::new();
        for p in parts {
            if p.ks != ks {
                return Err(Error::arg("label sets from different ensembles"));
            }
            labels.extend_from_slice(&p.labels);
        }
        Ok(PseudoLabelSet { ks, labels })
    }
}

pub fn assign_pseudo_labels(ensemble: &ClustererEnsemble, data: &FeatureMatrix) -> PseudoLabelSet {
    let mut labels = Vec::with_capacity(data.rows * ensemble.len());
    for i in 0..data.rows {
        let r = data.row(i);
        labels.extend(ensemble.clusterers.iter().map(|c| c.assign(r) as u32));
    }
    PseudoLabelSet {
        ks: ensemble.ks(),
        labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn feature_layout_and_roundtrip() {
        let v = Tensor::<f64>::from_fn([1, 1, 4, 2, 2], |i| i as f64);
        let f = slice_features(&v);
        assert_eq!((f.rows, f.dim), (4, 4));
        assert_eq!(f.row(1), &[4.0, 5.0, 6.0, 7.0]);
        assert_eq!(features_to_volume::<f64>(&f, v.shape()).unwrap(), v);
        let v2 = Tensor::<f64>::from_fn([2, 3, 2, 2, 1], |i| (i * 7 % 5) as f64);
        assert_eq!(features_to_volume::<f64>(&slice_features(&v2), v2.shape()).unwrap(), v2);
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let data = FeatureMatrix {
            rows: 5,
            dim: 2,
            data: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        };
        let c = train_clusterer(&data, 1, &KMeansConfig::default(), &mut rng::seeded(0)).unwrap();
        assert!((c.centroid(0)[0] - 4.0).abs() < 1e-12 && (c.centroid(0)[1] - 5.0).abs() < 1e-12);
        assert!((0..5).all(|i| c.assign(data.row(i)) == 0));
    }

    #[test]
    fn too_many_clusters_rejected() {
        let data = FeatureMatrix {
            rows: 2,
            dim: 1,
            data: vec![0.0, 1.0],
        };
        assert!(matches!(
            train_clusterer(&data, 3, &KMeansConfig::default(), &mut rng::seeded(0)),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn ties_go_to_lower_index() {
        let c = Clusterer {
            k: 2,
            dim: 1,
            centroids: vec![-1.0, 1.0],
        };
        assert_eq!(c.assign(&[0.0]), 0);
        assert_eq!(c.assign(&[1.0]), 1);
    }
}
