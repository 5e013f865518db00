//! RBF network: k-means centers, nearest-neighbor radii, and output weights
//! solved by regularized least squares. The output layer is the identity,
//! so the forward value is the signed score directly.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_binary_data, squared_distance, TrainConfig, TrainError};
use crate::features::FEATURE_COUNT;

/// Hidden layer variant: plain Gaussian responses, or the same responses
/// normalized to sum to one (a softmax over the negated scaled distances).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HiddenActivation {
    Gaussian,
    Softmax,
}

impl std::str::FromStr for HiddenActivation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gaussian" => Ok(HiddenActivation::Gaussian),
            "softmax" => Ok(HiddenActivation::Softmax),
            other => Err(format!(
                "unknown hidden activation `{other}` (gaussian|softmax)"
            )),
        }
    }
}

impl std::fmt::Display for HiddenActivation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HiddenActivation::Gaussian => "gaussian",
            HiddenActivation::Softmax => "softmax",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfNetModel {
    pub centers: Vec<[f64; FEATURE_COUNT]>,
    pub radii: Vec<f64>,
    pub weights: Vec<f64>,
    pub hidden: HiddenActivation,
}

impl RbfNetModel {
    /// Hidden responses h_j(x) = exp(-||x - c_j||^2 / r_j^2), normalized
    /// across centers in the softmax variant.
    pub fn hidden_activations(&self, x: &[f64; FEATURE_COUNT]) -> Vec<f64> {
        let logits: Vec<f64> = self
            .centers
            .iter()
            .zip(&self.radii)
            .map(|(c, r)| -squared_distance(x, c) / (r * r))
            .collect();
        match self.hidden {
            HiddenActivation::Gaussian => logits.into_iter().map(f64::exp).collect(),
            HiddenActivation::Softmax => super::softmax(&logits),
        }
    }

    /// Identity-output forward pass: sum_j w_j h_j(x). Positive means
    /// legitimate, negative fast-flux, zero resolves to fast-flux.
    pub fn forward(&self, x: &[f64; FEATURE_COUNT]) -> f64 {
        self.hidden_activations(x)
            .iter()
            .zip(&self.weights)
            .map(|(h, w)| h * w)
            .sum()
    }
}

/// Lloyd's algorithm with distance-weighted seeding. Fails (for the caller
/// to restart) when a cluster empties or the points cannot support k
/// distinct centers.
fn kmeans(
    rows: &[[f64; FEATURE_COUNT]],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<[f64; FEATURE_COUNT]>> {
    let n = rows.len();
    let mut centers = vec![rows[rng.gen_range(0..n)]];
    let mut d2: Vec<f64> = rows
        .iter()
        .map(|r| squared_distance(r, &centers[0]))
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return None; // fewer than k distinct points
        }
        let mut target = rng.gen::<f64>() * total;
        let mut pick = n - 1;
        for (i, w) in d2.iter().enumerate() {
            target -= w;
            if target <= 0.0 {
                pick = i;
                break;
            }
        }
        let chosen = rows[pick];
        centers.push(chosen);
        for (slot, r) in d2.iter_mut().zip(rows) {
            *slot = slot.min(squared_distance(r, &chosen));
        }
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, r) in rows.iter().enumerate() {
            let nearest = centers
                .iter()
                .enumerate()
                .map(|(j, c)| (j, squared_distance(r, c)))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .expect("k >= 1")
                .0;
            if assign[i] != nearest {
                assign[i] = nearest;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![[0.0; FEATURE_COUNT]; k];
        let mut counts = vec![0usize; k];
        for (r, &a) in rows.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(r) {
                *s += v;
            }
        }
        if counts.contains(&0) {
            return None;
        }
        for (j, sum) in sums.iter().enumerate() {
            centers[j] = std::array::from_fn(|d| sum[d] / counts[j] as f64);
        }
    }
    Some(centers)
}

fn try_fit(
    rows: &[[f64; FEATURE_COUNT]],
    labels: &[i8],
    cfg: &TrainConfig,
    k: usize,
    seed: u64,
) -> Option<RbfNetModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = kmeans(rows, k, &mut rng)?;

    let radii: Vec<f64> = if k == 1 {
        let spread = rows
            .iter()
            .map(|r| squared_distance(r, &centers[0]))
            .fold(0.0, f64::max)
            .sqrt();
        vec![spread]
    } else {
        (0..k)
            .map(|j| {
                (0..k)
                    .filter(|&l| l != j)
                    .map(|l| squared_distance(&centers[j], &centers[l]))
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect()
    };
    // `all(> 1e-9)` instead of `any(<= 1e-9)` so NaN radii are rejected too.
    if !radii.iter().all(|&r| r > 1e-9) {
        return None; // coincident centers (or all-identical data with k = 1)
    }

    let scratch = RbfNetModel {
        centers,
        radii,
        weights: Vec::new(),
        hidden: cfg.rbf_hidden,
    };
    let n = rows.len();
    let mut h = DMatrix::zeros(n, k);
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in scratch.hidden_activations(row).into_iter().enumerate() {
            h[(i, j)] = v;
        }
    }
    let y = DVector::from_iterator(n, labels.iter().map(|&l| f64::from(l)));
    let mut gram = h.tr_mul(&h);
    for j in 0..k {
        gram[(j, j)] += cfg.ridge;
    }
    let weights = Cholesky::new(gram)?.solve(&h.tr_mul(&y));

    Some(RbfNetModel {
        weights: weights.iter().copied().collect(),
        ..scratch
    })
}

const MAX_RESTARTS: usize = 5;

/// Trains the RBF network. Center selection restarts with a derived seed
/// when k-means collapses; the center count is capped at the data size.
pub fn rbfnet_train(
    rows: &[[f64; FEATURE_COUNT]],
    labels: &[i8],
    cfg: &TrainConfig,
) -> Result<RbfNetModel, TrainError> {
    check_binary_data(rows, labels)?;
    let k = cfg.centers.clamp(1, rows.len());
    for attempt in 0..MAX_RESTARTS {
        let seed = cfg.seed.wrapping_add(attempt as u64);
        if let Some(model) = try_fit(rows, labels, cfg, k, seed) {
            return Ok(model);
        }
    }
    Err(TrainError::DegenerateCenters(MAX_RESTARTS))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn embedded(x: f64, y: f64) -> [f64; FEATURE_COUNT] {
        let mut p = [0.0; FEATURE_COUNT];
        p[0] = x;
        p[1] = y;
        p
    }

    #[test]
    fn single_center_responds_with_one_at_its_center() {
        let center = embedded(0.4, -1.2);
        let model = RbfNetModel {
            centers: vec![center],
            radii: vec![0.7],
            weights: vec![1.0],
            hidden: HiddenActivation::Gaussian,
        };
        assert_eq!(model.forward(&center), 1.0);
    }

    #[test]
    fn symmetric_centers_cancel_at_the_midpoint() {
        let model = RbfNetModel {
            centers: vec![embedded(-1.0, 0.0), embedded(1.0, 0.0)],
            radii: vec![1.0, 1.0],
            weights: vec![1.0, -1.0],
            hidden: HiddenActivation::Gaussian,
        };
        assert_eq!(model.forward(&embedded(0.0, 0.0)), 0.0);
    }

    #[test]
    fn softmax_hidden_responses_are_a_distribution() {
        let model = RbfNetModel {
            centers: vec![embedded(0.0, 0.0), embedded(2.0, 0.0), embedded(0.0, 2.0)],
            radii: vec![1.0, 0.5, 2.0],
            weights: vec![0.0; 3],
            hidden: HiddenActivation::Softmax,
        };
        let h = model.hidden_activations(&embedded(0.3, 0.9));
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(h.iter().all(|v| *v > 0.0));
    }

    fn blobs(n: usize, seed: u64) -> (Vec<[f64; FEATURE_COUNT]>, Vec<i8>) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = move || {
            let (u1, u2): (f64, f64) = (rng.gen_range(1e-12..1.0), rng.gen());
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        let mut rows = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let (mean, y) = if i % 2 == 0 { (3.0, 1) } else { (-3.0, -1) };
            rows.push(std::array::from_fn(|_| mean + normal()));
            labels.push(y);
        }
        (rows, labels)
    }

    #[test]
    fn separated_blobs_reach_high_training_accuracy() {
        let (rows, labels) = blobs(200, 31);
        for hidden in [HiddenActivation::Gaussian, HiddenActivation::Softmax] {
            let cfg = TrainConfig {
                rbf_hidden: hidden,
                ..TrainConfig::default()
            };
            let model = rbfnet_train(&rows, &labels, &cfg).unwrap();
            let correct = rows
                .iter()
                .zip(&labels)
                .filter(|(x, &y)| (model.forward(x) > 0.0) == (y == 1))
                .count();
            assert!(
                correct as f64 / rows.len() as f64 >= 0.99,
                "{hidden} variant underfits well-separated blobs: {correct}/200"
            );
        }
    }

    #[test]
    fn kmeans_recovers_well_separated_cluster_means() {
        let mut rows = Vec::new();
        for (cx, cy) in [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)] {
            for (dx, dy) in [(0.1, 0.0), (-0.1, 0.0), (0.0, 0.1), (0.0, -0.1)] {
                rows.push(embedded(cx + dx, cy + dy));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let centers = kmeans(&rows, 3, &mut rng).unwrap();
        for (cx, cy) in [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)] {
            let expected = embedded(cx, cy);
            let closest = centers
                .iter()
                .map(|c| squared_distance(c, &expected))
                .fold(f64::INFINITY, f64::min);
            assert!(
                closest < 0.01,
                "no k-means center recovered cluster ({cx}, {cy})"
            );
        }
    }

    #[test]
    fn model_shape_is_consistent_and_capped_by_data_size() {
        let (rows, labels) = blobs(12, 9);
        let cfg = TrainConfig {
            centers: 50,
            ..TrainConfig::default()
        };
        let model = rbfnet_train(&rows, &labels, &cfg).unwrap();
        assert_eq!(model.centers.len(), model.radii.len());
        assert_eq!(model.centers.len(), model.weights.len());
        assert!(model.centers.len() <= rows.len());
        assert!(model.radii.iter().all(|r| *r > 0.0));
    }

    #[test]
    fn training_is_deterministic() {
        let (rows, labels) = blobs(100, 12);
        let cfg = TrainConfig::default();
        let a = rbfnet_train(&rows, &labels, &cfg).unwrap();
        let b = rbfnet_train(&rows, &labels, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn indistinguishable_points_exhaust_the_restart_budget() {
        let rows = vec![embedded(0.5, 0.5); 8];
        let labels = vec![1, -1, 1, -1, 1, -1, 1, -1];
        let cfg = TrainConfig {
            centers: 4,
            ..TrainConfig::default()
        };
        assert_eq!(
            rbfnet_train(&rows, &labels, &cfg).unwrap_err(),
            TrainError::DegenerateCenters(MAX_RESTARTS)
        );
    }
}
