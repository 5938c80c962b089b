//! Gaussian-process Bayesian optimization of model hyperparameters.
//!
//! The mixed search space (discrete units, categorical optimizer,
//! continuous rates) is encoded into `[0,1]^6`; a squared-exponential GP
//! surrogate with per-dimension lengthscales models the objective, and
//! Expected Improvement over seeded quasi-random candidates picks the next
//! configuration. Objective values are accuracies, maximized.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::OptimizerKind;
use crate::scalar::mix_seed;

/// Output-layer activation; the classifier head always ends in softmax.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    #[default]
    Softmax,
}

/// One point in the hyperparameter search space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub units: u32,
    pub activation: OutputActivation,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Recorded for every configuration but unused under RMSprop.
    pub momentum: f64,
    pub dropout_rate: f64,
}

impl HyperParams {
    /// Tuned defaults per architecture (units, optimizer, learning rate,
    /// momentum, dropout).
    pub fn default_for(arch: crate::models::ArchId) -> Self {
        use crate::models::ArchId::*;
        let (units, optimizer, learning_rate, momentum, dropout_rate) = match arch {
            InceptionLike => (512, OptimizerKind::Sgd, 0.01, 0.3, 0.4),
            MobileLike => (512, OptimizerKind::Sgd, 0.01, 0.9, 0.1),
            EfficientLike => (256, OptimizerKind::Rmsprop, 0.0001, 0.5, 0.1),
        };
        HyperParams {
            units,
            activation: OutputActivation::Softmax,
            optimizer,
            learning_rate,
            momentum,
            dropout_rate,
        }
    }
}

/// Bounds of the search space. Defaults enclose the tuned values; every
/// field is configuration-overridable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    /// Allowed GRU widths, ascending.
    pub units_grid: Vec<u32>,
    /// Log-uniform learning-rate interval.
    pub lr_min: f64,
    pub lr_max: f64,
    pub momentum_max: f64,
    pub dropout_max: f64,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            units_grid: vec![128, 256, 512, 1024],
            lr_min: 1e-5,
            lr_max: 1e-1,
            momentum_max: 0.99,
            dropout_max: 0.5,
        }
    }
}

/// Encoded dimensionality: units, one-hot optimizer (2), lr, momentum, dropout.
pub const ENCODED_DIM: usize = 6;
/// Index of the learning-rate coordinate in the encoded vector.
pub const LR_COORD: usize = 3;

impl SearchSpace {
    pub fn validate(&self, h: &HyperParams) -> Result<()> {
        if !self.units_grid.contains(&h.units) {
            return Err(Error::Argument(format!(
                "units {} not in grid {:?}",
                h.units, self.units_grid
            )));
        }
        if h.learning_rate < self.lr_min || h.learning_rate > self.lr_max {
            return Err(Error::Argument(format!(
                "learning rate {} outside [{}, {}]",
                h.learning_rate, self.lr_min, self.lr_max
            )));
        }
        if h.momentum < 0.0 || h.momentum > self.momentum_max {
            return Err(Error::Argument(format!(
                "momentum {} outside [0, {}]",
                h.momentum, self.momentum_max
            )));
        }
        if h.dropout_rate < 0.0 || h.dropout_rate > self.dropout_max {
            return Err(Error::Argument(format!(
                "dropout {} outside [0, {}]",
                h.dropout_rate, self.dropout_max
            )));
        }
        Ok(())
    }

    fn units_span(&self) -> (f64, f64) {
        let lo = (*self.units_grid.first().unwrap() as f64).log2();
        let hi = (*self.units_grid.last().unwrap() as f64).log2();
        (lo, hi)
    }

    /// Map a configuration to `[0,1]^6`.
    pub fn encode(&self, h: &HyperParams) -> Result<Vec<f64>> {
        self.validate(h)?;
        let (lo, hi) = self.units_span();
        let units = if hi > lo {
            ((h.units as f64).log2() - lo) / (hi - lo)
        } else {
            0.0
        };
        let (sgd, rms) = match h.optimizer {
            OptimizerKind::Sgd => (1.0, 0.0),
            OptimizerKind::Rmsprop => (0.0, 1.0),
        };
        let lr = (h.learning_rate.log10() - self.lr_min.log10())
            / (self.lr_max.log10() - self.lr_min.log10());
        let momentum = if self.momentum_max > 0.0 {
            h.momentum / self.momentum_max
        } else {
            0.0
        };
        let dropout = if self.dropout_max > 0.0 {
            h.dropout_rate / self.dropout_max
        } else {
            0.0
        };
        Ok(vec![units, sgd, rms, lr, momentum, dropout])
    }

    /// Snap an arbitrary point of `[0,1]^6` onto the valid manifold
    /// (nearest units level, nearest one-hot vertex; ties pick SGD).
    pub fn snap(&self, v: &mut [f64]) {
        for c in v.iter_mut() {
            *c = c.clamp(0.0, 1.0);
        }
        let (lo, hi) = self.units_span();
        let target = lo + v[0] * (hi - lo);
        let nearest = self
            .units_grid
            .iter()
            .min_by(|a, b| {
                let da = ((**a as f64).log2() - target).abs();
                let db = ((**b as f64).log2() - target).abs();
                da.partial_cmp(&db).unwrap()
            })
            .copied()
            .unwrap();
        v[0] = if hi > lo {
            ((nearest as f64).log2() - lo) / (hi - lo)
        } else {
            0.0
        };
        if v[1] >= v[2] {
            v[1] = 1.0;
            v[2] = 0.0;
        } else {
            v[1] = 0.0;
            v[2] = 1.0;
        }
    }

    /// Decode an encoded (already snapped or arbitrary) point.
    pub fn decode(&self, v: &[f64]) -> HyperParams {
        let mut v = v.to_vec();
        self.snap(&mut v);
        let (lo, hi) = self.units_span();
        let target = lo + v[0] * (hi - lo);
        let units = self
            .units_grid
            .iter()
            .min_by(|a, b| {
                let da = ((**a as f64).log2() - target).abs();
                let db = ((**b as f64).log2() - target).abs();
                da.partial_cmp(&db).unwrap()
            })
            .copied()
            .unwrap();
        let optimizer = if v[1] >= v[2] {
            OptimizerKind::Sgd
        } else {
            OptimizerKind::Rmsprop
        };
        let lg = self.lr_min.log10() + v[LR_COORD] * (self.lr_max.log10() - self.lr_min.log10());
        HyperParams {
            units,
            activation: OutputActivation::Softmax,
            optimizer,
            learning_rate: 10f64.powf(lg),
            momentum: v[4] * self.momentum_max,
            dropout_rate: v[5] * self.dropout_max,
        }
    }
}

/// One evaluated configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Observation {
    pub theta: HyperParams,
    pub encoded: Vec<f64>,
    pub y: f64,
}

/// Squared-exponential kernel hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
    pub noise_variance: f64,
}

impl KernelParams {
    pub fn isotropic(signal_variance: f64, lengthscale: f64, noise_variance: f64) -> Self {
        KernelParams {
            signal_variance,
            lengthscales: vec![lengthscale; ENCODED_DIM],
            noise_variance,
        }
    }

    fn k(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for ((&x, &y), &l) in a.iter().zip(b).zip(&self.lengthscales) {
            let d = (x - y) / l;
            s += d * d;
        }
        self.signal_variance * (-0.5 * s).exp()
    }
}

/// Fitted GP surrogate: constant mean, SE kernel, cached Cholesky factor.
#[derive(Clone, Debug)]
pub struct GpPosterior {
    pub kernel: KernelParams,
    pub observations: Vec<Observation>,
    pub mean: f64,
    chol: Vec<f64>,
    alpha: Vec<f64>,
    log_marginal: f64,
}

const MAX_JITTER: f64 = 1e-4;

/// In-place lower Cholesky factorization; fails on non-PD input.
fn cholesky(a: &mut [f64], n: usize) -> std::result::Result<(), ()> {
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(());
                }
                a[i * n + i] = s.sqrt();
            } else {
                a[i * n + j] = s / a[j * n + j];
            }
        }
        for j in i + 1..n {
            a[i * n + j] = 0.0;
        }
    }
    Ok(())
}

fn solve_lower(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            x[i] -= l[i * n + k] * x[k];
        }
        x[i] /= l[i * n + i];
    }
    x
}

fn solve_upper_t(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        for k in i + 1..n {
            x[i] -= l[k * n + i] * x[k];
        }
        x[i] /= l[i * n + i];
    }
    x
}

/// Fit the GP posterior to observations under the given kernel.
///
/// The constant mean is the sample mean of `y`; the kernel matrix gets an
/// escalating diagonal jitter up to 1e-4 before failing as non-PD.
pub fn gp_fit(observations: &[Observation], kernel: &KernelParams) -> Result<GpPosterior> {
    let n = observations.len();
    if n == 0 {
        return Err(Error::Argument("gp_fit needs at least one observation".into()));
    }
    if kernel.noise_variance == 0.0 {
        for i in 0..n {
            for j in i + 1..n {
                if observations[i].encoded == observations[j].encoded {
                    return Err(Error::Argument(format!(
                        "duplicate encoded points {} and {} with zero noise",
                        i, j
                    )));
                }
            }
        }
    }
    let mean = observations.iter().map(|o| o.y).sum::<f64>() / n as f64;
    let resid: Vec<f64> = observations.iter().map(|o| o.y - mean).collect();

    let mut jitter = 0.0;
    loop {
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                k[i * n + j] = kernel.k(&observations[i].encoded, &observations[j].encoded);
            }
            k[i * n + i] += kernel.noise_variance + jitter;
        }
        if cholesky(&mut k, n).is_ok() {
            let tmp = solve_lower(&k, n, &resid);
            let alpha = solve_upper_t(&k, n, &tmp);
            let mut log_det = 0.0;
            for i in 0..n {
                log_det += k[i * n + i].ln();
            }
            let data_fit: f64 = resid.iter().zip(&alpha).map(|(r, a)| r * a).sum();
            let log_marginal = -0.5 * data_fit
                - log_det
                - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
            return Ok(GpPosterior {
                kernel: kernel.clone(),
                observations: observations.to_vec(),
                mean,
                chol: k,
                alpha,
                log_marginal,
            });
        }
        jitter = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 };
        if jitter > MAX_JITTER {
            return Err(Error::Numerical(
                "kernel matrix not positive definite after maximum jitter".into(),
            ));
        }
    }
}

impl GpPosterior {
    /// Posterior mean and variance at an encoded point.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let n = self.observations.len();
        let ks: Vec<f64> = self
            .observations
            .iter()
            .map(|o| self.kernel.k(&o.encoded, x))
            .collect();
        let mean = self.mean + ks.iter().zip(&self.alpha).map(|(k, a)| k * a).sum::<f64>();
        let v = solve_lower(&self.chol, n, &ks);
        let var = self.kernel.signal_variance - v.iter().map(|t| t * t).sum::<f64>();
        (mean, var.max(0.0))
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_marginal
    }

    pub fn best_y(&self) -> f64 {
        self.observations
            .iter()
            .map(|o| o.y)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn norm_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

/// Expected improvement over `best_y` for maximization, with exploration
/// margin `xi`. Degenerates to `max(0, mean-best-xi)` at zero variance.
pub fn expected_improvement(mean: f64, variance: f64, best_y: f64, xi: f64) -> f64 {
    let gap = mean - best_y - xi;
    if variance <= 0.0 {
        return gap.max(0.0);
    }
    let sd = variance.sqrt();
    let z = gap / sd;
    (gap * norm_cdf(z) + sd * norm_pdf(z)).max(0.0)
}

/// Radical-inverse Halton value for 1-based `index`.
fn halton(mut index: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while index > 0 {
        f /= base as f64;
        r += f * (index % base) as f64;
        index /= base;
    }
    r
}

const HALTON_BASES: [usize; ENCODED_DIM] = [2, 3, 5, 7, 11, 13];

/// Number of acquisition candidates scanned per proposal.
pub const N_CANDIDATES: usize = 2048;

/// Maximize EI over `N_CANDIDATES` seeded quasi-random candidates snapped
/// onto the valid encoded manifold; ties resolve to the lowest index.
pub fn propose_next(
    gp: &GpPosterior,
    space: &SearchSpace,
    xi: f64,
    rng: &mut ChaCha8Rng,
) -> (HyperParams, f64) {
    let shift: Vec<f64> = (0..ENCODED_DIM).map(|_| rng.random::<f64>()).collect();
    let best = gp.best_y();
    let mut best_ei = f64::NEG_INFINITY;
    let mut best_point = vec![0.5; ENCODED_DIM];
    for i in 0..N_CANDIDATES {
        let mut v: Vec<f64> = (0..ENCODED_DIM)
            .map(|d| (halton(i + 1, HALTON_BASES[d]) + shift[d]).fract())
            .collect();
        space.snap(&mut v);
        let (mean, var) = gp.predict(&v);
        let ei = expected_improvement(mean, var, best, xi);
        if ei > best_ei {
            best_ei = ei;
            best_point = v;
        }
    }
    (space.decode(&best_point), best_ei)
}

/// Seeded Latin-hypercube-style stratified initial design of size `k`.
pub fn initial_design(space: &SearchSpace, k: usize, seed: u64) -> Vec<HyperParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0x1417]));
    let mut strata: Vec<Vec<f64>> = Vec::with_capacity(ENCODED_DIM);
    for _ in 0..ENCODED_DIM {
        let mut vals: Vec<f64> = (0..k)
            .map(|s| (s as f64 + rng.random::<f64>()) / k as f64)
            .collect();
        use rand::seq::SliceRandom;
        vals.shuffle(&mut rng);
        strata.push(vals);
    }
    (0..k)
        .map(|i| {
            let mut v: Vec<f64> = (0..ENCODED_DIM).map(|d| strata[d][i]).collect();
            space.snap(&mut v);
            space.decode(&v)
        })
        .collect()
}

/// Loop controls. `n_max` counts total objective evaluations including the
/// `k_init` initial design.
#[derive(Clone, Debug)]
pub struct BoOptions {
    pub k_init: usize,
    pub n_max: usize,
    pub xi: f64,
    pub noise_variance: f64,
    pub seed: u64,
}

impl Default for BoOptions {
    fn default() -> Self {
        BoOptions {
            k_init: 5,
            n_max: 25,
            xi: 0.01,
            noise_variance: 1e-6,
            seed: 0,
        }
    }
}

/// One trace record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoIteration {
    pub iter: usize,
    pub theta: HyperParams,
    pub y: f64,
    /// Acquisition value of the proposal; `None` during the initial design.
    pub ei: Option<f64>,
    pub kernel: KernelParams,
    /// True when the objective failed and `y` was recorded as 0.
    pub failed: bool,
}

/// Full optimization trace plus the incumbent.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoTrace {
    pub iterations: Vec<BoIteration>,
    pub best_theta: HyperParams,
    pub best_y: f64,
}

const LENGTHSCALE_GRID: [f64; 7] = [0.05, 0.1, 0.2, 0.4, 0.8, 1.6, 3.2];

fn refit_kernel(observations: &[Observation], noise: f64) -> Result<GpPosterior> {
    let n = observations.len() as f64;
    let mean = observations.iter().map(|o| o.y).sum::<f64>() / n;
    let var = observations.iter().map(|o| (o.y - mean).powi(2)).sum::<f64>() / n;
    let signal = var.max(1e-8);
    let mut best: Option<GpPosterior> = None;
    for &l in &LENGTHSCALE_GRID {
        let kernel = KernelParams::isotropic(signal, l, noise);
        if let Ok(gp) = gp_fit(observations, &kernel) {
            let better = best
                .as_ref()
                .map(|b| gp.log_marginal_likelihood() > b.log_marginal_likelihood())
                .unwrap_or(true);
            if better {
                best = Some(gp);
            }
        }
    }
    best.ok_or_else(|| Error::Numerical("no kernel in the grid produced a PD matrix".into()))
}

/// Run Bayesian optimization against `objective` (values in [0,1],
/// maximized). Objective failures are recorded as `y = 0` and flagged.
pub fn bo_loop<F>(space: &SearchSpace, mut objective: F, opts: &BoOptions) -> Result<BoTrace>
where
    F: FnMut(&HyperParams) -> Result<f64>,
{
    if opts.n_max <= opts.k_init {
        return Err(Error::Argument(format!(
            "n_max {} must exceed k_init {}",
            opts.n_max, opts.k_init
        )));
    }
    if opts.k_init == 0 {
        return Err(Error::Argument("k_init must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(opts.seed, &[0xb0]));
    let mut observations: Vec<Observation> = Vec::new();
    let mut iterations: Vec<BoIteration> = Vec::new();
    let default_kernel = KernelParams::isotropic(1.0, 0.4, opts.noise_variance);

    let evaluate = |theta: &HyperParams,
                        ei: Option<f64>,
                        kernel: &KernelParams,
                        iter: usize,
                        observations: &mut Vec<Observation>,
                        iterations: &mut Vec<BoIteration>,
                        objective: &mut F|
     -> Result<()> {
        let (y, failed) = match objective(theta) {
            Ok(v) => (v.clamp(0.0, 1.0), false),
            Err(_) => (0.0, true),
        };
        observations.push(Observation {
            theta: theta.clone(),
            encoded: space.encode(theta)?,
            y,
        });
        iterations.push(BoIteration {
            iter,
            theta: theta.clone(),
            y,
            ei,
            kernel: kernel.clone(),
            failed,
        });
        Ok(())
    };

    for (i, theta) in initial_design(space, opts.k_init, opts.seed)
        .iter()
        .enumerate()
    {
        evaluate(
            theta,
            None,
            &default_kernel,
            i,
            &mut observations,
            &mut iterations,
            &mut objective,
        )?;
    }

    for iter in opts.k_init..opts.n_max {
        let gp = refit_kernel(&observations, opts.noise_variance)?;
        let (theta, ei) = propose_next(&gp, space, opts.xi, &mut rng);
        evaluate(
            &theta,
            Some(ei),
            &gp.kernel,
            iter,
            &mut observations,
            &mut iterations,
            &mut objective,
        )?;
    }

    let best = observations
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.y.partial_cmp(&b.y).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    Ok(BoTrace {
        best_theta: observations[best].theta.clone(),
        best_y: observations[best].y,
        iterations,
    })
}

/// Append-style JSONL writer for a trace: one record per iteration.
pub fn write_trace_jsonl(path: &Path, trace: &BoTrace) -> Result<()> {
    let mut out = Vec::new();
    for it in &trace.iterations {
        serde_json::to_writer(&mut out, it)
            .map_err(|e| Error::Data(format!("trace serialization: {e}")))?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(space: &SearchSpace, pts: &[(f64, f64)]) -> Vec<Observation> {
        // Build observations varying only the lr coordinate.
        pts.iter()
            .map(|&(lr_coord, y)| {
                let mut v = vec![0.0, 1.0, 0.0, lr_coord, 0.0, 0.0];
                space.snap(&mut v);
                let theta = space.decode(&v);
                Observation {
                    encoded: space.encode(&theta).unwrap(),
                    theta,
                    y,
                }
            })
            .collect()
    }

    #[test]
    fn encode_endpoints() {
        let space = SearchSpace::default();
        let mut h = HyperParams::default_for(crate::models::ArchId::InceptionLike);
        h.units = 128;
        h.learning_rate = 1e-5;
        let v = space.encode(&h).unwrap();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[LR_COORD], 0.0);
        h.units = 1024;
        h.learning_rate = 1e-1;
        let v = space.encode(&h).unwrap();
        assert_eq!(v[0], 1.0);
        assert!((v[LR_COORD] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn encode_rejects_out_of_bounds() {
        let space = SearchSpace::default();
        let mut h = HyperParams::default_for(crate::models::ArchId::InceptionLike);
        h.units = 100;
        assert!(space.encode(&h).is_err());
    }

    #[test]
    fn encode_is_injective_on_random_grid_points() {
        let space = SearchSpace::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut thetas = Vec::new();
        while thetas.len() < 50 {
            let mut v: Vec<f64> = (0..ENCODED_DIM).map(|_| rng.random()).collect();
            space.snap(&mut v);
            let t = space.decode(&v);
            if !thetas.contains(&t) {
                thetas.push(t);
            }
        }
        let encoded: Vec<Vec<f64>> = thetas.iter().map(|t| space.encode(t).unwrap()).collect();
        for i in 0..encoded.len() {
            for j in i + 1..encoded.len() {
                assert_ne!(encoded[i], encoded[j], "{:?} vs {:?}", thetas[i], thetas[j]);
            }
        }
    }

    #[test]
    fn decode_tie_prefers_sgd() {
        let space = SearchSpace::default();
        let v = vec![0.0, 0.5, 0.5, 0.5, 0.0, 0.0];
        assert_eq!(space.decode(&v).optimizer, OptimizerKind::Sgd);
    }

    #[test]
    fn single_observation_interpolates() {
        let space = SearchSpace::default();
        let data = obs(&space, &[(0.4, 0.7)]);
        let gp = gp_fit(&data, &KernelParams::isotropic(1.0, 0.3, 0.0)).unwrap();
        let (m, v) = gp.predict(&data[0].encoded);
        assert!((m - 0.7).abs() < 1e-9);
        assert!(v < 1e-8);
    }

    #[test]
    fn far_point_reverts_to_prior() {
        let space = SearchSpace::default();
        let data = obs(&space, &[(0.0, 0.9)]);
        let gp = gp_fit(&data, &KernelParams::isotropic(0.5, 0.02, 0.0)).unwrap();
        let mut probe = data[0].encoded.clone();
        probe[LR_COORD] = 1.0;
        let (m, v) = gp.predict(&probe);
        assert!((m - gp.mean).abs() < 1e-3);
        assert!((v - 0.5).abs() < 1e-3);
    }

    #[test]
    fn posterior_matches_dense_solve_oracle() {
        let space = SearchSpace::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<(f64, f64)> = (0..5)
            .map(|_| (rng.random::<f64>(), rng.random::<f64>()))
            .collect();
        let data = obs(&space, &pts);
        let kernel = KernelParams::isotropic(0.8, 0.35, 1e-4);
        let gp = gp_fit(&data, &kernel).unwrap();

        // Dense inverse via Gauss-Jordan.
        let n = data.len();
        let mut k = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                k[i][j] = kernel.k(&data[i].encoded, &data[j].encoded);
            }
            k[i][i] += kernel.noise_variance;
        }
        let mut inv = vec![vec![0.0; n]; n];
        for (i, row) in inv.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        for col in 0..n {
            let piv = k[col][col];
            for j in 0..n {
                k[col][j] /= piv;
                inv[col][j] /= piv;
            }
            for r in 0..n {
                if r != col {
                    let f = k[r][col];
                    for j in 0..n {
                        k[r][j] -= f * k[col][j];
                        inv[r][j] -= f * inv[col][j];
                    }
                }
            }
        }
        let mean_y = pts.iter().map(|p| p.1).sum::<f64>() / n as f64;
        for probe_i in 0..3 {
            let mut probe = data[probe_i].encoded.clone();
            probe[LR_COORD] = (probe[LR_COORD] + 0.21).fract();
            let ks: Vec<f64> = data.iter().map(|o| kernel.k(&o.encoded, &probe)).collect();
            let mut want_mean = mean_y;
            for i in 0..n {
                for j in 0..n {
                    want_mean += ks[i] * inv[i][j] * (data[j].y - mean_y);
                }
            }
            let mut quad = 0.0;
            for i in 0..n {
                for j in 0..n {
                    quad += ks[i] * inv[i][j] * ks[j];
                }
            }
            let want_var = kernel.signal_variance - quad;
            let (m, v) = gp.predict(&probe);
            assert!((m - want_mean).abs() < 1e-8, "{} vs {}", m, want_mean);
            assert!((v - want_var.max(0.0)).abs() < 1e-8);
        }
    }

    #[test]
    fn symmetric_midpoint_averages() {
        let space = SearchSpace::default();
        let data = obs(&space, &[(0.3, 0.2), (0.7, 0.8)]);
        let gp = gp_fit(&data, &KernelParams::isotropic(1.0, 0.3, 0.0)).unwrap();
        let mut probe = data[0].encoded.clone();
        probe[LR_COORD] = 0.5;
        let (m, _) = gp.predict(&probe);
        assert!((m - 0.5).abs() < 1e-9);
    }

    #[test]
    fn duplicate_points_with_zero_noise_fail() {
        let space = SearchSpace::default();
        let data = obs(&space, &[(0.4, 0.5), (0.4, 0.6)]);
        assert!(gp_fit(&data, &KernelParams::isotropic(1.0, 0.3, 0.0)).is_err());
        assert!(gp_fit(&data, &KernelParams::isotropic(1.0, 0.3, 1e-4)).is_ok());
    }

    #[test]
    fn variance_never_grows_with_data() {
        let space = SearchSpace::default();
        let kernel = KernelParams::isotropic(1.0, 0.4, 1e-6);
        let mut pts = vec![(0.1, 0.3), (0.8, 0.6), (0.45, 0.9)];
        let probes: Vec<Vec<f64>> = (0..5)
            .map(|i| {
                let mut v = vec![0.0, 1.0, 0.0, i as f64 / 4.0, 0.0, 0.0];
                space.snap(&mut v);
                v
            })
            .collect();
        let before = gp_fit(&obs(&space, &pts), &kernel).unwrap();
        pts.push((0.6, 0.4));
        let after = gp_fit(&obs(&space, &pts), &kernel).unwrap();
        for p in &probes {
            let (_, v0) = before.predict(p);
            let (_, v1) = after.predict(p);
            assert!(v1 <= v0 + 1e-9, "variance grew: {} -> {}", v0, v1);
        }
    }

    #[test]
    fn ei_closed_forms() {
        assert_eq!(expected_improvement(0.3, 0.0, 0.5, 0.0), 0.0);
        let want = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((expected_improvement(0.5, 1.0, 0.5, 0.0) - want).abs() < 1e-12);
    }

    #[test]
    fn ei_matches_quadrature_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..25 {
            let mu = rng.random::<f64>() * 2.0 - 1.0;
            let sd = rng.random::<f64>() * 1.5 + 0.05;
            let best = rng.random::<f64>() * 2.0 - 1.0;
            let got = expected_improvement(mu, sd * sd, best, 0.0);
            // Simpson quadrature of max(0, y-best) under N(mu, sd^2).
            let lo = best.max(mu - 12.0 * sd);
            let hi = mu + 12.0 * sd;
            let mut want = 0.0;
            if hi > lo {
                let steps = 40_000;
                let dx = (hi - lo) / steps as f64;
                let f = |y: f64| (y - best) * norm_pdf((y - mu) / sd) / sd;
                let mut s = f(lo) + f(hi);
                for i in 1..steps {
                    let y = lo + i as f64 * dx;
                    s += f(y) * if i % 2 == 1 { 4.0 } else { 2.0 };
                }
                want = s * dx / 3.0;
            }
            assert!((got - want).abs() < 1e-6, "mu={mu} sd={sd} best={best}: {got} vs {want}");
        }
    }

    #[test]
    fn proposal_is_deterministic_and_maximal() {
        let space = SearchSpace::default();
        let data = obs(&space, &[(0.5, 0.9)]);
        let gp = gp_fit(&data, &KernelParams::isotropic(1.0, 0.25, 0.0)).unwrap();
        let mut rng1 = ChaCha8Rng::seed_from_u64(3);
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        let (t1, ei1) = propose_next(&gp, &space, 0.01, &mut rng1);
        let (t2, _) = propose_next(&gp, &space, 0.01, &mut rng2);
        assert_eq!(t1, t2);

        // Re-scan: no candidate beats the returned EI.
        let mut rng3 = ChaCha8Rng::seed_from_u64(3);
        let shift: Vec<f64> = (0..ENCODED_DIM).map(|_| rng3.random::<f64>()).collect();
        for i in 0..N_CANDIDATES {
            let mut v: Vec<f64> = (0..ENCODED_DIM)
                .map(|d| (halton(i + 1, HALTON_BASES[d]) + shift[d]).fract())
                .collect();
            space.snap(&mut v);
            let (m, var) = gp.predict(&v);
            assert!(expected_improvement(m, var, gp.best_y(), 0.01) <= ei1 + 1e-15);
        }

        // EI at the (noiseless) observed point is 0, so the proposal
        // differs from it.
        let (m, v) = gp.predict(&data[0].encoded);
        assert!(expected_improvement(m, v, gp.best_y(), 0.0) < 1e-12);
        assert_ne!(space.encode(&t1).unwrap(), data[0].encoded);
    }

    #[test]
    fn bo_finds_testbed_optimum() {
        let space = SearchSpace::default();
        let objective = |h: &HyperParams| -> Result<f64> {
            let c = space.encode(h).unwrap()[LR_COORD];
            Ok(1.0 - (c - 0.3) * (c - 0.3))
        };
        let mut hits = 0;
        for seed in 0..10 {
            let trace = bo_loop(
                &space,
                objective,
                &BoOptions {
                    seed,
                    ..BoOptions::default()
                },
            )
            .unwrap();
            assert_eq!(trace.iterations.len(), 25);
            let c = space.encode(&trace.best_theta).unwrap()[LR_COORD];
            if (c - 0.3).abs() <= 0.05 {
                hits += 1;
            }
        }
        assert!(hits >= 9, "only {hits}/10 seeds found the optimum");
    }

    #[test]
    fn bo_constant_objective() {
        let space = SearchSpace::default();
        let trace = bo_loop(&space, |_| Ok(0.42), &BoOptions::default()).unwrap();
        assert_eq!(trace.best_y, 0.42);
        assert!(trace.iterations.iter().all(|i| i.y == 0.42));
    }

    #[test]
    fn bo_loop_accounting_and_failures() {
        let space = SearchSpace::default();
        let opts = BoOptions {
            k_init: 5,
            n_max: 6,
            ..BoOptions::default()
        };
        let mut calls = 0;
        let trace = bo_loop(
            &space,
            |_| {
                calls += 1;
                if calls == 2 {
                    Err(Error::Numerical("synthetic failure".into()))
                } else {
                    Ok(0.5)
                }
            },
            &opts,
        )
        .unwrap();
        assert_eq!(trace.iterations.len(), 6);
        assert_eq!(trace.iterations.iter().filter(|i| i.ei.is_some()).count(), 1);
        assert_eq!(trace.iterations.iter().filter(|i| i.failed).count(), 1);
        assert_eq!(trace.iterations[1].y, 0.0);

        assert!(bo_loop(&space, |_| Ok(0.1), &BoOptions { k_init: 5, n_max: 5, ..BoOptions::default() }).is_err());
    }

    #[test]
    fn bo_trace_is_pure_function_of_seed() {
        let space = SearchSpace::default();
        let objective = |h: &HyperParams| -> Result<f64> {
            let e = space.encode(h).unwrap();
            Ok(1.0 - (e[LR_COORD] - 0.6).abs() * 0.5 - e[5] * 0.1)
        };
        let opts = BoOptions {
            seed: 77,
            ..BoOptions::default()
        };
        let a = bo_loop(&space, objective, &opts).unwrap();
        let b = bo_loop(&space, objective, &opts).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        // Incumbent never decreases along the trace.
        let mut best = f64::NEG_INFINITY;
        for it in &a.iterations {
            best = best.max(it.y);
        }
        assert_eq!(best, a.best_y);
    }
}
