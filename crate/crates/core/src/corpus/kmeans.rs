use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Utterance;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Per-dimension standardization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn fit(frames: &Tensor) -> Self {
        let (n, d) = (frames.rows() as f64, frames.cols());
        let mut mean = vec![0.0; d];
        for r in 0..frames.rows() {
            for (m, x) in mean.iter_mut().zip(frames.row(r)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in 0..frames.rows() {
            for ((v, x), m) in var.iter_mut().zip(frames.row(r)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt().max(1e-8)).collect();
        Self { mean, std }
    }

    pub fn apply(&self, frames: &Tensor) -> Tensor {
        let mut out = frames.clone();
        for r in 0..out.rows() {
            for ((x, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / s;
            }
        }
        out
    }
}

/// Cluster centroids, optionally preceded by feature standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub centroids: Tensor,
    pub stats: Option<FeatureStats>,
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }
}

/// Result of a k-means fit: the codebook and the mean squared distance
/// to the assigned centroid after each assignment pass.
#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub codebook: Codebook,
    pub distortion: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid and its squared distance; ties go to the lowest id.
fn nearest(centroids: &Tensor, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(centroids.row(c), x);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp<R: Rng>(frames: &Tensor, k: usize, rng: &mut R) -> Tensor {
    let n = frames.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(frames.row(i), frames.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            // Every point coincides with a chosen centroid: take any unused index.
            let unused: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            unused[rng.random_range(0..unused.len())]
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(frames.row(i), frames.row(next)));
        }
    }
    frames.select_rows(&chosen)
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// A cluster that loses all its points is re-seeded to the point farthest
/// from its current centroid.
pub fn kmeans_fit(frames: &Tensor, k: usize, iters: usize, seed: u64) -> Result<KMeansFit> {
    let (n, d) = (frames.rows(), frames.cols());
    if k < 2 {
        return Err(Error::contract(format!("k-means needs k >= 2, got {k}")));
    }
    if n < k {
        return Err(Error::contract(format!("k-means with k = {k} needs at least {k} points, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(frames, k, &mut rng);
    let mut distortion = Vec::with_capacity(iters);
    let mut labels = vec![0usize; n];
    let mut dists = vec![0.0; n];

    for _ in 0..iters.max(1) {
        for i in 0..n {
            let (c, dist) = nearest(&centroids, frames.row(i));
            labels[i] = c;
            dists[i] = dist;
        }
        distortion.push(dists.iter().sum::<f64>() / n as f64);

        let mut sums = Tensor::zeros(k, d);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, x) in sums.row_mut(labels[i]).iter_mut().zip(frames.row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("n >= k >= 2");
                centroids.row_mut(c).copy_from_slice(frames.row(far));
                dists[far] = 0.0;
            }
        }
    }
    Ok(KMeansFit {
        codebook: Codebook { centroids, stats: None },
        distortion,
    })
}

/// Standardize the pooled frames of `utts`, then fit `k` clusters.
pub fn fit_codebook(utts: &[Utterance], k: usize, iters: usize, seed: u64) -> Result<KMeansFit> {
    let frames = stack_frames(utts)?;
    let stats = FeatureStats::fit(&frames);
    let mut fit = kmeans_fit(&stats.apply(&frames), k, iters, seed)?;
    fit.codebook.stats = Some(stats);
    Ok(fit)
}

pub fn stack_frames(utts: &[Utterance]) -> Result<Tensor> {
    let first = utts.first().ok_or_else(|| Error::contract("no utterances"))?;
    let d = first.dim();
    let mut data = Vec::new();
    let mut rows = 0;
    for u in utts {
        if u.dim() != d {
            return Err(Error::shape(format!("feature dims {} and {} in one corpus", d, u.dim())));
        }
        data.extend_from_slice(u.features.data());
        rows += u.frames();
    }
    Ok(Tensor::from_rows(rows, d, data))
}

/// Nearest-centroid label for every frame of `u`.
pub fn assign(codebook: &Codebook, u: &Utterance) -> Result<Vec<usize>> {
    if u.dim() != codebook.dim() {
        return Err(Error::shape(format!(
            "utterance dim {} vs codebook dim {}",
            u.dim(),
            codebook.dim()
        )));
    }
    let frames = match &codebook.stats {
        Some(stats) => stats.apply(&u.features),
        None => u.features.clone(),
    };
    Ok((0..frames.rows()).map(|r| nearest(&codebook.centroids, frames.row(r)).0).collect())
}

#[cfg(test)]
mod tests {
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    fn random_frames(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(n, d, 1.0, &mut rng)
    }

    #[test]
    fn k_equals_n_gives_zero_distortion() {
        let frames = random_frames(6, 3, 1);
        let fit = kmeans_fit(&frames, 6, 5, 0).unwrap();
        assert_eq!(*fit.distortion.last().unwrap(), 0.0);
        for r in 0..6 {
            let hits = (0..6).filter(|&c| fit.codebook.centroids.row(c) == frames.row(r)).count();
            assert_eq!(hits, 1);
        }
    }

    #[test]
    fn too_few_points_is_a_contract_violation() {
        let frames = random_frames(3, 2, 1);
        assert!(matches!(kmeans_fit(&frames, 4, 5, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn two_blobs_recover_their_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = 0.1;
        let centers = [[-5.0, 2.0], [4.0, -3.0]];
        let mut data = Vec::new();
        let mut sums = [[0.0; 2]; 2];
        for i in 0..400 {
            let c = i % 2;
            for j in 0..2 {
                let z: f64 = StandardNormal.sample(&mut rng);
                let x = centers[c][j] + noise * z;
                sums[c][j] += x;
                data.push(x);
            }
        }
        let frames = Tensor::from_rows(400, 2, data);
        let fit = kmeans_fit(&frames, 2, 20, 9).unwrap();
        for sum in &sums {
            let mean = [sum[0] / 200.0, sum[1] / 200.0];
            let closest = (0..2)
                .map(|c| sq_dist(fit.codebook.centroids.row(c), &mean).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(closest < noise, "centroid {closest} away from sample mean");
        }
    }

    #[test]
    fn distortion_is_monotone() {
        let frames = random_frames(300, 4, 2);
        let fit = kmeans_fit(&frames, 8, 20, 3).unwrap();
        assert_eq!(fit.distortion.len(), 20);
        for w in fit.distortion.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{} then {}", w[0], w[1]);
        }
    }

    #[test]
    fn assign_matches_brute_force_and_breaks_ties_low() {
        let frames = random_frames(100, 3, 4);
        let fit = kmeans_fit(&frames, 5, 10, 1).unwrap();
        let utt = Utterance::new(random_frames(40, 3, 8)).unwrap();
        let labels = assign(&fit.codebook, &utt).unwrap();
        assert_eq!(labels, assign(&fit.codebook, &utt).unwrap());
        for (r, &l) in labels.iter().enumerate() {
            let dists: Vec<f64> = (0..5)
                .map(|c| {
                    let diff: Vec<f64> = (0..3).map(|j| fit.codebook.centroids.get(c, j) - utt.features.get(r, j)).collect();
                    diff.iter().map(|x| x * x).sum()
                })
                .collect();
            let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
            let first = dists.iter().position(|&d| d == min).unwrap();
            assert_eq!(l, first);
        }
        // A frame equal to centroid 3 maps to 3.
        let c3 = Utterance::new(fit.codebook.centroids.select_rows(&[3])).unwrap();
        assert_eq!(assign(&fit.codebook, &c3).unwrap(), vec![3]);
        // Duplicate centroids: the lower id wins.
        let dup = Codebook {
            centroids: Tensor::from_rows(2, 1, vec![1.0, 1.0]),
            stats: None,
        };
        let u = Utterance::new(Tensor::from_rows(1, 1, vec![1.0])).unwrap();
        assert_eq!(assign(&dup, &u).unwrap(), vec![0]);
    }

    #[test]
    fn assign_rejects_wrong_dimension() {
        let frames = random_frames(10, 3, 4);
        let fit = kmeans_fit(&frames, 2, 3, 1).unwrap();
        let utt = Utterance::new(random_frames(4, 2, 8)).unwrap();
        assert!(matches!(assign(&fit.codebook, &utt), Err(Error::Shape(_))));
    }
}
