//! Full-covariance Gaussian mixture colour models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Rgb = [f64; 3];
type Mat3 = [[f64; 3]; 3];

/// Ridge added to every covariance diagonal, in 0–255 units.
pub const COVARIANCE_EPSILON: f64 = 1e-3;

const KMEANS_ROUNDS: usize = 10;
const HALF_LOG_2PI_3D: f64 = 1.5 * 1.837_877_066_409_345_3; // 1.5 * ln(2π)

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: Rgb,
    pub covariance: Mat3,
    inverse: Mat3,
    half_log_det: f64,
}

impl Component {
    fn from_moments(weight: f64, mean: Rgb, covariance: Mat3) -> Self {
        let det = det3(&covariance);
        debug_assert!(det > 0.0, "regularized covariance must be positive definite");
        Component {
            weight,
            mean,
            inverse: inverse3(&covariance, det),
            covariance,
            half_log_det: 0.5 * det.ln(),
        }
    }

    /// Negative log density of `z`, excluding the mixing weight.
    #[inline]
    pub fn gaussian_cost(&self, z: &Rgb) -> f64 {
        let d = [z[0] - self.mean[0], z[1] - self.mean[1], z[2] - self.mean[2]];
        let m = &self.inverse;
        let mahal = d[0] * (m[0][0] * d[0] + m[0][1] * d[1] + m[0][2] * d[2])
            + d[1] * (m[1][0] * d[0] + m[1][1] * d[1] + m[1][2] * d[2])
            + d[2] * (m[2][0] * d[0] + m[2][1] * d[1] + m[2][2] * d[2]);
        HALF_LOG_2PI_3D + self.half_log_det + 0.5 * mahal
    }

    #[inline]
    pub fn cost(&self, z: &Rgb) -> f64 {
        -self.weight.ln() + self.gaussian_cost(z)
    }
}

/// Mixture of `K` Gaussians; components with zero weight are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct Gmm {
    pub components: Vec<Component>,
}

impl Gmm {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Component minimising the data cost of `z`, and that cost.
    #[inline]
    pub fn best(&self, z: &Rgb) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (k, c) in self.components.iter().enumerate() {
            if c.weight <= 0.0 {
                continue;
            }
            let cost = c.cost(z);
            if cost < best.1 {
                best = (k, cost);
            }
        }
        best
    }

    /// Hard-assignment data cost: `min_k -ln(w_k N(z | k))`.
    #[inline]
    pub fn cost(&self, z: &Rgb) -> f64 {
        self.best(z).1
    }

    /// One assign/re-estimate step on `samples`. Weights take their maximum
    /// likelihood values; a component's mean and covariance are only replaced
    /// when that does not raise the cost of its assigned samples, so the total
    /// cost never increases.
    pub fn refine(&mut self, samples: &[Rgb]) {
        if samples.is_empty() || self.is_empty() {
            return;
        }
        let k = self.len();
        let assignment: Vec<usize> = samples.iter().map(|z| self.best(z).0).collect();
        let groups = group_moments(samples, &assignment, k);
        let total = samples.len() as f64;
        for (j, g) in groups.into_iter().enumerate() {
            let Some((count, mean, cov)) = g else {
                self.components[j].weight = 0.0;
                continue;
            };
            let weight = count as f64 / total;
            let candidate = Component::from_moments(weight, mean, cov);
            let members = samples
                .iter()
                .zip(&assignment)
                .filter(|(_, &a)| a == j)
                .map(|(z, _)| z);
            let (mut old_cost, mut new_cost) = (0.0, 0.0);
            for z in members {
                old_cost += self.components[j].gaussian_cost(z);
                new_cost += candidate.gaussian_cost(z);
            }
            if new_cost <= old_cost {
                self.components[j] = candidate;
            } else {
                self.components[j].weight = weight;
            }
        }
    }
}

/// Fit a `k`-component mixture: seeded k-means++ initialisation, Lloyd rounds,
/// then one Gaussian assign/re-estimate pass.
pub fn fit_gmm(samples: &[Rgb], k: usize, seed: u64) -> Result<Gmm> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("cannot fit a colour model to zero samples".into()));
    }
    if k == 0 {
        return Err(Error::InvalidInput("component count must be positive".into()));
    }
    let k = if k > samples.len() {
        log::warn!("only {} samples for {k} components; reducing K", samples.len());
        samples.len()
    } else {
        k
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeans_plus_plus(samples, k, &mut rng);
    let mut assignment = vec![usize::MAX; samples.len()];
    for _ in 0..KMEANS_ROUNDS {
        let mut changed = false;
        for (a, z) in assignment.iter_mut().zip(samples) {
            let nearest = nearest_center(&centers, z);
            if *a != nearest {
                *a = nearest;
                changed = true;
            }
        }
        let groups = group_moments(samples, &assignment, centers.len());
        centers = groups.into_iter().flatten().map(|(_, mean, _)| mean).collect();
        if !changed {
            break;
        }
        for (a, z) in assignment.iter_mut().zip(samples) {
            *a = nearest_center(&centers, z);
        }
    }

    for (a, z) in assignment.iter_mut().zip(samples) {
        *a = nearest_center(&centers, z);
    }
    let mut gmm = from_assignment(samples, &assignment, centers.len());
    // EM-style hard pass with the Gaussian costs
    let assignment: Vec<usize> = samples.iter().map(|z| gmm.best(z).0).collect();
    gmm = from_assignment(samples, &assignment, gmm.len());
    Ok(gmm)
}

fn from_assignment(samples: &[Rgb], assignment: &[usize], k: usize) -> Gmm {
    let total = samples.len() as f64;
    let components = group_moments(samples, assignment, k)
        .into_iter()
        .flatten()
        .map(|(count, mean, cov)| Component::from_moments(count as f64 / total, mean, cov))
        .collect();
    Gmm { components }
}

fn kmeans_plus_plus(samples: &[Rgb], k: usize, rng: &mut ChaCha8Rng) -> Vec<Rgb> {
    let mut centers = vec![samples[rng.random_range(0..samples.len())]];
    let mut dist: Vec<f64> = samples.iter().map(|z| sq_dist(z, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut target = rng.random_range(0.0..total);
        let mut pick = samples.len() - 1;
        for (i, d) in dist.iter().enumerate() {
            if target < *d {
                pick = i;
                break;
            }
            target -= d;
        }
        let c = samples[pick];
        centers.push(c);
        for (d, z) in dist.iter_mut().zip(samples) {
            *d = d.min(sq_dist(z, &c));
        }
    }
    centers
}

#[inline]
fn nearest_center(centers: &[Rgb], z: &Rgb) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = sq_dist(z, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

#[inline]
fn sq_dist(a: &Rgb, b: &Rgb) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Per-group (count, mean, regularized covariance); `None` for empty groups.
fn group_moments(samples: &[Rgb], assignment: &[usize], k: usize) -> Vec<Option<(usize, Rgb, Mat3)>> {
    let mut count = vec![0usize; k];
    let mut sum = vec![[0.0; 3]; k];
    for (z, &a) in samples.iter().zip(assignment) {
        count[a] += 1;
        for c in 0..3 {
            sum[a][c] += z[c];
        }
    }
    let means: Vec<Rgb> = (0..k)
        .map(|j| {
            let n = count[j].max(1) as f64;
            [sum[j][0] / n, sum[j][1] / n, sum[j][2] / n]
        })
        .collect();
    let mut scatter = vec![[[0.0; 3]; 3]; k];
    for (z, &a) in samples.iter().zip(assignment) {
        let d = [z[0] - means[a][0], z[1] - means[a][1], z[2] - means[a][2]];
        for r in 0..3 {
            for c in 0..3 {
                scatter[a][r][c] += d[r] * d[c];
            }
        }
    }
    (0..k)
        .map(|j| {
            (count[j] > 0).then(|| {
                let n = count[j] as f64;
                let mut cov = [[0.0; 3]; 3];
                for r in 0..3 {
                    for c in 0..3 {
                        cov[r][c] = scatter[j][r][c] / n;
                    }
                    cov[r][r] += COVARIANCE_EPSILON;
                }
                (count[j], means[j], cov)
            })
        })
        .collect()
}

fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn inverse3(m: &Mat3, det: f64) -> Mat3 {
    let inv_det = 1.0 / det;
    [
        [
            (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv_det,
            (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_det,
            (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_det,
        ],
        [
            (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv_det,
            (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_det,
            (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_det,
        ],
        [
            (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv_det,
            (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_det,
            (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_det,
        ],
    ]
}
