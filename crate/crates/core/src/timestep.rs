//! Vulnerable-timestep analysis and the attack's timestep distribution.
//!
//! Hidden states are collected along a timestep grid with the noise latent
//! held fixed per seed. Per layer, the first principal component of the
//! mean-centred trajectory (the "eigenfeature") is compared by cosine
//! similarity against every timestep's raw hidden state. Timesteps whose
//! states stay close to the eigenfeature behave alike, so an attack tuned in
//! that window carries over to its neighbours.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::backend::{HiddenStateBundle, InpaintDenoiser};
use crate::error::{Error, Result};
use crate::masking::{ContextImage, InpaintMask};
use crate::rng::{self, streams};

/// Window centre as a fraction of `T` (720 of 1000).
pub const DEFAULT_MEAN_FRACTION: f64 = 0.72;
pub const DEFAULT_STD: f64 = 5.8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimestepDistribution {
    pub mean: f64,
    pub std: f64,
    /// Inclusive `[t_min, t_max]`.
    pub clamp_range: (usize, usize),
}

impl Default for TimestepDistribution {
    /// `N(720, 5.8)` clamped to `[1, 1000]`.
    fn default() -> Self {
        Self::for_max_timestep(1000)
    }
}

impl TimestepDistribution {
    /// `N(0.72 T, 5.8)` clamped to `[1, T]`.
    pub fn for_max_timestep(max_t: usize) -> Self {
        Self {
            mean: DEFAULT_MEAN_FRACTION * max_t as f64,
            std: DEFAULT_STD,
            clamp_range: (1, max_t),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.clamp_range;
        if !(self.std > 0.0) || !self.mean.is_finite() || !self.std.is_finite() {
            return Err(Error::validation(alloc::format!(
                "timestep distribution needs finite mean and std > 0, got N({}, {})",
                self.mean,
                self.std
            )));
        }
        if lo < 1 || lo > hi {
            return Err(Error::validation(alloc::format!("invalid clamp range [{lo}, {hi}]")));
        }
        Ok(())
    }

    /// Checks the clamp range against a backend horizon.
    pub fn validate_for(&self, max_t: usize) -> Result<()> {
        self.validate()?;
        if self.clamp_range.1 > max_t {
            return Err(Error::OutOfRange {
                what: "timestep clamp upper bound",
                value: self.clamp_range.1 as i64,
                min: 1,
                max: max_t as i64,
            });
        }
        Ok(())
    }
}

/// `round(N(mean, std))` clamped to the distribution's range.
pub fn sample_timestep<R: Rng + ?Sized>(dist: &TimestepDistribution, rng: &mut R) -> usize {
    let x = dist.mean + dist.std * rng::standard_normal(rng);
    let (lo, hi) = dist.clamp_range;
    let r = libm::round(x);
    if r <= lo as f64 {
        lo
    } else if r >= hi as f64 {
        hi
    } else {
        r as usize
    }
}

/// One bundle per `(seed, t)` pair, seed-major. The noise latent for seed `s`
/// is drawn once from `derive(root_seed, TRAJECTORY, s)` and reused for every
/// timestep on the grid.
pub fn collect_hidden_trajectory<B: InpaintDenoiser + ?Sized>(
    backend: &B,
    context: &ContextImage,
    mask: &InpaintMask,
    tau: &crate::tensor::Tensor,
    t_grid: &[usize],
    seeds: usize,
    root_seed: u64,
) -> Result<Vec<HiddenStateBundle>> {
    let max_t = backend.spec().max_timestep;
    if let Some(&t) = t_grid.iter().find(|&&t| t < 1 || t > max_t) {
        return Err(Error::OutOfRange {
            what: "trajectory timestep",
            value: t as i64,
            min: 1,
            max: max_t as i64,
        });
    }
    let mut out = Vec::with_capacity(t_grid.len() * seeds);
    for s in 0..seeds {
        let noise_seed = rng::derive(root_seed, streams::TRAJECTORY, s as u64);
        let z_t = rng::normal_tensor(&mut rng::seeded(noise_seed), &backend.spec().latent_shape);
        for &t in t_grid {
            let mut bundle = backend.forward(&z_t, t, context, mask, tau)?.hidden;
            bundle.provenance.noise_seed = noise_seed;
            out.push(bundle);
        }
    }
    Ok(out)
}

/// Splits seed-major output of [`collect_hidden_trajectory`] into trajectories.
pub fn split_trajectories(bundles: Vec<HiddenStateBundle>, grid_len: usize) -> Vec<Vec<HiddenStateBundle>> {
    let mut out = Vec::new();
    let mut it = bundles.into_iter().peekable();
    while it.peek().is_some() {
        out.push(it.by_ref().take(grid_len.max(1)).collect());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerEigenfeature {
    pub layer_id: String,
    /// Unit-norm first principal component of the first trajectory.
    pub component: Vec<f64>,
    /// Fraction of centred variance along the component, averaged over trajectories.
    pub explained_ratio: f64,
    /// Variance (eigenvalue of the sample covariance) along the component,
    /// averaged over trajectories.
    pub explained_variance: f64,
    /// Cosine similarity per grid timestep, averaged over trajectories.
    pub cosine: Vec<f64>,
    /// Every trajectory for this layer was rank-deficient.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenfeatureReport {
    pub timesteps: Vec<usize>,
    pub layers: Vec<LayerEigenfeature>,
    /// Contiguous timestep range around the peak of the layer-averaged curve
    /// whose similarity stays within `WINDOW_FRACTION` of the peak.
    pub window: (usize, usize),
    pub degenerate: bool,
}

/// Relative threshold on the layer-averaged cosine curve for the suggested window.
pub const WINDOW_FRACTION: f64 = 0.9;

/// PCA over the timestep axis for every layer of every trajectory.
///
/// Trajectories must share the same timestep grid and layer layout.
pub fn eigenfeature_similarity(trajectories: &[Vec<HiddenStateBundle>]) -> Result<EigenfeatureReport> {
    let first = trajectories
        .first()
        .ok_or_else(|| Error::validation("no trajectories"))?;
    if first.len() < 2 {
        return Err(Error::validation("eigenfeature analysis needs at least two timesteps"));
    }
    let timesteps: Vec<usize> = first.iter().map(|b| b.timestep).collect();
    for traj in trajectories {
        if traj.len() != timesteps.len() || traj.iter().zip(&timesteps).any(|(b, &t)| b.timestep != t) {
            return Err(Error::validation("trajectories do not share a timestep grid"));
        }
        if traj.iter().any(|b| !b.same_layout(&first[0])) {
            return Err(Error::contract("hidden-state layouts differ across bundles"));
        }
    }
    let n = timesteps.len();
    let mut layers = Vec::new();
    for (li, (layer_id, _)) in first[0].entries.iter().enumerate() {
        let mut cosine = vec![0.0; n];
        let mut ratio = 0.0;
        let mut variance = 0.0;
        let mut component = Vec::new();
        let mut all_degenerate = true;
        for (k, traj) in trajectories.iter().enumerate() {
            let rows: Vec<&[f64]> = traj.iter().map(|b| b.entries[li].1.data()).collect();
            let pca = first_component(&rows);
            all_degenerate &= pca.degenerate;
            for (c, x) in cosine.iter_mut().zip(&rows) {
                *c += if pca.degenerate { 1.0 } else { cosine_similarity(x, &pca.component) };
            }
            ratio += pca.explained_ratio;
            variance += pca.eigenvalue;
            if k == 0 {
                component = pca.component;
            }
        }
        let m = trajectories.len() as f64;
        cosine.iter_mut().for_each(|c| *c /= m);
        layers.push(LayerEigenfeature {
            layer_id: layer_id.clone(),
            component,
            explained_ratio: ratio / m,
            explained_variance: variance / m,
            cosine,
            degenerate: all_degenerate,
        });
    }
    let mean_curve: Vec<f64> = (0..n)
        .map(|i| layers.iter().map(|l| l.cosine[i]).sum::<f64>() / layers.len() as f64)
        .collect();
    let window = similarity_window(&timesteps, &mean_curve);
    let degenerate = layers.iter().all(|l| l.degenerate);
    Ok(EigenfeatureReport {
        timesteps,
        layers,
        window,
        degenerate,
    })
}

fn similarity_window(timesteps: &[usize], curve: &[f64]) -> (usize, usize) {
    let peak = curve
        .iter()
        .enumerate()
        .fold(0, |best, (i, &c)| if c > curve[best] { i } else { best });
    let thresh = WINDOW_FRACTION * curve[peak];
    let (mut lo, mut hi) = (peak, peak);
    while lo > 0 && curve[lo - 1] >= thresh {
        lo -= 1;
    }
    while hi + 1 < curve.len() && curve[hi + 1] >= thresh {
        hi += 1;
    }
    let (a, b) = (timesteps[lo], timesteps[hi]);
    (a.min(b), a.max(b))
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum::<f64>());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum::<f64>());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// First principal component of a set of row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca1 {
    pub component: Vec<f64>,
    /// Largest eigenvalue of the (population) covariance.
    pub eigenvalue: f64,
    pub explained_ratio: f64,
    pub degenerate: bool,
}

/// Relative size below which centred data counts as rank zero.
const DEGENERATE_TOL: f64 = 1e-12;

/// PCA via the `n x n` Gram matrix of the centred rows, so the cost does not
/// depend on feature width. The component is oriented to have non-negative
/// cosine with the first row.
pub fn first_component(rows: &[&[f64]]) -> Pca1 {
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.len());
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, &x) in mean.iter_mut().zip(r.iter()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let scale: f64 = rows
        .iter()
        .map(|r| r.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .max(f64::MIN_POSITIVE);
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = crate::autodiff::kernels::dot(&centred[i], &centred[j]);
            gram[i * n + j] = v;
            gram[j * n + i] = v;
        }
    }
    let trace: f64 = (0..n).map(|i| gram[i * n + i]).sum();
    if trace <= DEGENERATE_TOL * scale {
        let mut component = vec![0.0; d];
        let norm = libm::sqrt(rows[0].iter().map(|x| x * x).sum::<f64>());
        if norm > 0.0 {
            component.iter_mut().zip(rows[0].iter()).for_each(|(c, &x)| *c = x / norm);
        }
        return Pca1 {
            component,
            eigenvalue: 0.0,
            explained_ratio: 1.0,
            degenerate: true,
        };
    }
    let (values, vectors) = jacobi_eigen(gram, n);
    let top = (0..n).fold(0, |b, i| if values[i] > values[b] { i } else { b });
    let mut component = vec![0.0; d];
    for (i, row) in centred.iter().enumerate() {
        let u = vectors[i * n + top];
        for (c, &x) in component.iter_mut().zip(row) {
            *c += u * x;
        }
    }
    let norm = libm::sqrt(component.iter().map(|x| x * x).sum::<f64>());
    component.iter_mut().for_each(|c| *c /= norm);
    let dot0: f64 = component.iter().zip(rows[0].iter()).map(|(a, b)| a * b).sum();
    let anchor: f64 = if dot0 != 0.0 {
        dot0
    } else {
        component.iter().zip(centred[0].iter()).map(|(a, b)| a * b).sum()
    };
    if anchor < 0.0 {
        component.iter_mut().for_each(|c| *c = -*c);
    }
    Pca1 {
        component,
        eigenvalue: values[top] / n as f64,
        explained_ratio: values[top] / trace,
        degenerate: false,
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric `n x n` matrix (row-major).
/// Returns eigenvalues and the eigenvector matrix with vectors in columns.
pub fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let total: f64 = a.iter().map(|x| x * x).sum();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off <= 1e-30 * total.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Provenance;
    use crate::tensor::Tensor;
    use alloc::string::ToString;

    fn bundle(t: usize, data: Vec<f64>) -> HiddenStateBundle {
        let n = data.len();
        HiddenStateBundle {
            entries: vec![("l".to_string(), Tensor::new(&[n], data).unwrap())],
            timestep: t,
            provenance: Provenance::default(),
        }
    }

    #[test]
    fn identical_bundles_are_degenerate_with_unit_similarity() {
        let v = vec![0.3, -1.0, 2.0];
        let r = eigenfeature_similarity(&[vec![bundle(10, v.clone()), bundle(20, v)]]).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.layers[0].cosine, vec![1.0, 1.0]);
    }

    #[test]
    fn antipodal_pair() {
        let v = vec![0.3, -1.0, 2.0];
        let w: Vec<f64> = v.iter().map(|x| -x).collect();
        let r = eigenfeature_similarity(&[vec![bundle(10, v), bundle(20, w)]]).unwrap();
        let c = &r.layers[0].cosine;
        assert!((c[0] - 1.0).abs() < 1e-12 && (c[1] + 1.0).abs() < 1e-12, "{c:?}");
        let norm: f64 = r.layers[0].component.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn needs_two_timesteps() {
        assert!(eigenfeature_similarity(&[vec![bundle(1, vec![1.0])]]).is_err());
    }

    #[test]
    fn scaling_leaves_curve_unchanged() {
        let mut r = rng::seeded(4);
        let traj: Vec<_> = (0..6)
            .map(|t| bundle(t + 1, rng::normal_tensor(&mut r, &[12]).into_data()))
            .collect();
        let scaled: Vec<_> = traj
            .iter()
            .map(|b| bundle(b.timestep, b.entries[0].1.scale(3.7).into_data()))
            .collect();
        let a = eigenfeature_similarity(&[traj]).unwrap();
        let b = eigenfeature_similarity(&[scaled]).unwrap();
        for (x, y) in a.layers[0].cosine.iter().zip(&b.layers[0].cosine) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn sampling_respects_support_and_zero_width_limit() {
        let mut r = rng::seeded(0);
        let narrow = TimestepDistribution {
            std: 1e-9,
            ..TimestepDistribution::default()
        };
        assert!((0..1000).all(|_| sample_timestep(&narrow, &mut r) == 720));
        let wide = TimestepDistribution {
            mean: 990.0,
            std: 50.0,
            clamp_range: (1, 1000),
        };
        assert!((0..10_000).map(|_| sample_timestep(&wide, &mut r)).all(|t| (1..=1000).contains(&t)));
    }

    #[test]
    fn default_is_the_published_window() {
        let d = TimestepDistribution::default();
        assert_eq!((d.mean, d.std, d.clamp_range), (720.0, 5.8, (1, 1000)));
        assert!(TimestepDistribution { std: 0.0, ..d }.validate().is_err());
    }
}
