//! Guide priors: per-patient, per-topic probabilities that a phenotype is
//! present, estimated from phenotype counts with two parallel two-component
//! mixture models (Poisson on raw counts, Gaussian on log counts).

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::corpus::PhecodeCountMatrix;
use crate::error::{Error, Result};
use crate::tsv::{self, TsvWriter};

pub const PRIOR_HEADER: [&str; 3] = ["patient_id", "phenotype_id", "pi"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    /// Relative log-likelihood change that stops EM.
    pub tol: f64,
    pub max_iter: usize,
    pub sigma_floor: f64,
    pub rate_floor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            tol: 1e-8,
            max_iter: 500,
            sigma_floor: 1e-3,
            rate_floor: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub em: EmConfig,
    /// Lower clamp ε applied to every prior entry.
    pub floor: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            em: EmConfig::default(),
            floor: 1e-6,
        }
    }
}

/// Count transform for the Gaussian mixture: ln(u + 1), defined at zero.
pub fn transform_count(u: u64) -> f64 {
    (u as f64 + 1.0).ln()
}

const LOG_TINY: f64 = -1e300;

fn log_sum_exp2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Parameters of a fitted two-component Poisson mixture; component 1 is the foreground.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoissonParams {
    pub rho0: f64,
    pub rho1: f64,
    /// Mixing weight of the foreground component.
    pub weight: f64,
    pub degenerate: bool,
}

impl PoissonParams {
    fn log_components(&self, u: u64) -> (f64, f64) {
        let uf = u as f64;
        let lf = ln_gamma(uf + 1.0);
        let lp = |rho: f64| if u == 0 { -rho } else { uf * rho.ln() - rho - lf };
        (
            (1.0 - self.weight).max(f64::MIN_POSITIVE).ln() + lp(self.rho0),
            self.weight.max(f64::MIN_POSITIVE).ln() + lp(self.rho1),
        )
    }

    /// Posterior probability that `u` came from the foreground component.
    pub fn responsibility(&self, u: u64) -> f64 {
        if self.degenerate {
            return 0.5;
        }
        let (l0, l1) = self.log_components(u);
        (l1 - log_sum_exp2(l0, l1)).exp()
    }

    pub fn log_likelihood(&self, counts: &[u64]) -> f64 {
        counts
            .iter()
            .map(|&u| {
                let (l0, l1) = self.log_components(u);
                log_sum_exp2(l0, l1)
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoissonMixtureFit {
    pub params: PoissonParams,
    /// Foreground responsibility of each input point under the final parameters.
    pub responsibilities: Vec<f64>,
    /// Log-likelihood after initialization and after every EM iteration.
    pub log_likelihood_trace: Vec<f64>,
    pub n_iter: usize,
}

impl PoissonMixtureFit {
    pub fn rho0(&self) -> f64 {
        self.params.rho0
    }
    pub fn rho1(&self) -> f64 {
        self.params.rho1
    }
    pub fn degenerate(&self) -> bool {
        self.params.degenerate
    }
}

fn distinct_count<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut v: Vec<T> = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    v.dedup();
    v.len()
}

fn converged(prev: f64, cur: f64, tol: f64) -> bool {
    (cur - prev).abs() <= tol * prev.abs().max(f64::MIN_POSITIVE)
}

pub fn fit_poisson_mixture(counts: &[u64], cfg: &EmConfig) -> PoissonMixtureFit {
    if distinct_count(counts) < 2 {
        return PoissonMixtureFit {
            params: PoissonParams {
                rho0: counts.first().map(|&u| u as f64).unwrap_or(0.0),
                rho1: counts.first().map(|&u| u as f64).unwrap_or(0.0),
                weight: 0.5,
                degenerate: true,
            },
            responsibilities: vec![0.5; counts.len()],
            log_likelihood_trace: Vec::new(),
            n_iter: 0,
        };
    }
    let mut sorted: Vec<f64> = counts.iter().map(|&u| u as f64).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut p = PoissonParams {
        rho0: quantile(&sorted, 0.25) + 0.1,
        rho1: quantile(&sorted, 0.90) + 0.1,
        weight: 0.5,
        degenerate: false,
    };
    if p.rho1 <= p.rho0 {
        p.rho1 = sorted[sorted.len() - 1] + 0.1;
    }
    let mut trace = vec![p.log_likelihood(counts)];
    let mut resp = vec![0.0; counts.len()];
    let mut n_iter = 0;
    for _ in 0..cfg.max_iter {
        n_iter += 1;
        for (r, &u) in resp.iter_mut().zip(counts) {
            *r = p.responsibility(u);
        }
        let (mut s0, mut s1, mut su0, mut su1) = (0.0, 0.0, 0.0, 0.0);
        for (&r, &u) in resp.iter().zip(counts) {
            let uf = u as f64;
            s1 += r;
            su1 += r * uf;
            s0 += 1.0 - r;
            su0 += (1.0 - r) * uf;
        }
        if s0 > 0.0 {
            p.rho0 = (su0 / s0).max(cfg.rate_floor);
        }
        if s1 > 0.0 {
            p.rho1 = (su1 / s1).max(cfg.rate_floor);
        }
        p.weight = s1 / counts.len() as f64;
        let ll = p.log_likelihood(counts);
        let prev = *trace.last().unwrap();
        trace.push(ll);
        if converged(prev, ll, cfg.tol) {
            break;
        }
    }
    if p.rho0 > p.rho1 {
        p = PoissonParams {
            rho0: p.rho1,
            rho1: p.rho0,
            weight: 1.0 - p.weight,
            degenerate: false,
        };
    }
    let responsibilities = counts.iter().map(|&u| p.responsibility(u)).collect();
    PoissonMixtureFit {
        params: p,
        responsibilities,
        log_likelihood_trace: trace,
        n_iter,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mu0: f64,
    pub mu1: f64,
    pub sigma0: f64,
    pub sigma1: f64,
    pub weight: f64,
    pub degenerate: bool,
}

impl GaussianParams {
    fn log_components(&self, x: f64) -> (f64, f64) {
        let lpdf = |mu: f64, s: f64| {
            let z = (x - mu) / s;
            -0.5 * z * z - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
        };
        (
            (1.0 - self.weight).max(f64::MIN_POSITIVE).ln() + lpdf(self.mu0, self.sigma0),
            self.weight.max(f64::MIN_POSITIVE).ln() + lpdf(self.mu1, self.sigma1),
        )
    }

    /// Posterior foreground probability of a transformed value.
    pub fn responsibility_value(&self, x: f64) -> f64 {
        if self.degenerate {
            return 0.5;
        }
        let (l0, l1) = self.log_components(x);
        let r = (l1 - log_sum_exp2(l0, l1)).exp();
        if r.is_nan() { 0.5 } else { r }
    }

    pub fn responsibility(&self, u: u64) -> f64 {
        self.responsibility_value(transform_count(u))
    }

    pub fn log_likelihood(&self, xs: &[f64]) -> f64 {
        xs.iter()
            .map(|&x| {
                let (l0, l1) = self.log_components(x);
                log_sum_exp2(l0, l1).max(LOG_TINY)
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixtureFit {
    pub params: GaussianParams,
    pub responsibilities: Vec<f64>,
    pub log_likelihood_trace: Vec<f64>,
    pub n_iter: usize,
}

impl GaussianMixtureFit {
    pub fn degenerate(&self) -> bool {
        self.params.degenerate
    }
}

/// Gaussian mixture on counts transformed by [`transform_count`].
pub fn fit_gaussian_mixture(counts: &[u64], cfg: &EmConfig) -> GaussianMixtureFit {
    let xs: Vec<f64> = counts.iter().map(|&u| transform_count(u)).collect();
    fit_gaussian_mixture_values(&xs, cfg)
}

/// Two-component univariate Gaussian mixture on already-transformed values.
pub fn fit_gaussian_mixture_values(xs: &[f64], cfg: &EmConfig) -> GaussianMixtureFit {
    if distinct_count(xs) < 2 {
        let v = xs.first().copied().unwrap_or(0.0);
        return GaussianMixtureFit {
            params: GaussianParams {
                mu0: v,
                mu1: v,
                sigma0: cfg.sigma_floor,
                sigma1: cfg.sigma_floor,
                weight: 0.5,
                degenerate: true,
            },
            responsibilities: vec![0.5; xs.len()],
            log_likelihood_trace: Vec::new(),
            n_iter: 0,
        };
    }
    let n = xs.len() as f64;
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n)
        .sqrt()
        .max(cfg.sigma_floor);
    let mut p = GaussianParams {
        mu0: quantile(&sorted, 0.25),
        mu1: quantile(&sorted, 0.90),
        sigma0: sd,
        sigma1: sd,
        weight: 0.5,
        degenerate: false,
    };
    if p.mu1 <= p.mu0 {
        p.mu1 = sorted[sorted.len() - 1];
    }
    let mut trace = vec![p.log_likelihood(xs)];
    let mut resp = vec![0.0; xs.len()];
    let mut n_iter = 0;
    for _ in 0..cfg.max_iter {
        n_iter += 1;
        for (r, &x) in resp.iter_mut().zip(xs) {
            *r = p.responsibility_value(x);
        }
        let s1: f64 = resp.iter().sum();
        let s0 = n - s1;
        if s1 > 0.0 {
            p.mu1 = resp.iter().zip(xs).map(|(r, x)| r * x).sum::<f64>() / s1;
            let v1 = resp.iter().zip(xs).map(|(r, x)| r * (x - p.mu1).powi(2)).sum::<f64>() / s1;
            p.sigma1 = v1.sqrt().max(cfg.sigma_floor);
        }
        if s0 > 0.0 {
            p.mu0 = resp.iter().zip(xs).map(|(r, x)| (1.0 - r) * x).sum::<f64>() / s0;
            let v0 = resp
                .iter()
                .zip(xs)
                .map(|(r, x)| (1.0 - r) * (x - p.mu0).powi(2))
                .sum::<f64>()
                / s0;
            p.sigma0 = v0.sqrt().max(cfg.sigma_floor);
        }
        p.weight = s1 / n;
        let ll = p.log_likelihood(xs);
        let prev = *trace.last().unwrap();
        trace.push(ll);
        if converged(prev, ll, cfg.tol) {
            break;
        }
    }
    if p.mu0 > p.mu1 {
        p = GaussianParams {
            mu0: p.mu1,
            mu1: p.mu0,
            sigma0: p.sigma1,
            sigma1: p.sigma0,
            weight: 1.0 - p.weight,
            degenerate: false,
        };
    }
    let responsibilities = xs.iter().map(|&x| p.responsibility_value(x)).collect();
    GaussianMixtureFit {
        params: p,
        responsibilities,
        log_likelihood_trace: trace,
        n_iter,
    }
}

/// P×K matrix of prior probabilities π_jk in [ε, 1]. Rows need not sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMatrix {
    n_patients: usize,
    n_topics: usize,
    data: Vec<f64>,
}

impl PriorMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let k = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Data("ragged prior rows".into()));
        }
        if rows.iter().flatten().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::Data("prior entries must be positive and finite".into()));
        }
        Ok(PriorMatrix {
            n_patients: rows.len(),
            n_topics: k,
            data: rows.into_iter().flatten().collect(),
        })
    }

    /// π_jk = 1/K for every entry (unguided models).
    pub fn uniform(n_patients: usize, n_topics: usize) -> Self {
        PriorMatrix {
            n_patients,
            n_topics,
            data: vec![1.0 / n_topics as f64; n_patients * n_topics],
        }
    }

    pub fn n_patients(&self) -> usize {
        self.n_patients
    }

    pub fn n_topics(&self) -> usize {
        self.n_topics
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.data[j * self.n_topics + k]
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.n_topics..(j + 1) * self.n_topics]
    }

    pub fn select_rows(&self, rows: &[usize]) -> PriorMatrix {
        PriorMatrix {
            n_patients: rows.len(),
            n_topics: self.n_topics,
            data: rows.iter().flat_map(|&j| self.row(j).iter().copied()).collect(),
        }
    }
}

/// Per-column prior model, kept with a trained model so new patients can be scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnPrior {
    pub poisson: PoissonParams,
    pub gaussian: GaussianParams,
}

impl ColumnPrior {
    fn binary_fallback(&self) -> bool {
        self.poisson.degenerate && self.gaussian.degenerate
    }

    pub fn probability(&self, u: u64, floor: f64) -> f64 {
        if self.binary_fallback() {
            return binary_value(u, floor);
        }
        let p = 0.5 * (self.poisson.responsibility(u) + self.gaussian.responsibility(u));
        p.clamp(floor, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorModel {
    Uniform,
    Binary { floor: f64 },
    Mixture { floor: f64, columns: Vec<ColumnPrior> },
}

impl PriorModel {
    /// Prior row for one patient's phenotype counts. Patients without any
    /// guide-modality phenotype counts get 1/K everywhere; the flag reports it.
    pub fn prior_row(&self, counts: &[u64]) -> (Vec<f64>, bool) {
        let k = counts.len();
        if matches!(self, PriorModel::Uniform) || counts.iter().all(|&u| u == 0) {
            return (vec![1.0 / k as f64; k], true);
        }
        let row = match self {
            PriorModel::Uniform => unreachable!(),
            PriorModel::Binary { floor } => counts.iter().map(|&u| binary_value(u, *floor)).collect(),
            PriorModel::Mixture { floor, columns } => counts
                .iter()
                .zip(columns)
                .map(|(&u, c)| c.probability(u, *floor))
                .collect(),
        };
        (row, false)
    }

    /// Applies the stored fits to every row of a count matrix (training semantics:
    /// no 1/K substitution for all-zero rows).
    pub fn apply(&self, u: &PhecodeCountMatrix) -> PriorMatrix {
        let k = u.n_phenotypes();
        let rows = (0..u.n_patients())
            .map(|j| match self {
                PriorModel::Uniform => vec![1.0 / k as f64; k],
                PriorModel::Binary { floor } => u.row(j).iter().map(|&x| binary_value(x, *floor)).collect(),
                PriorModel::Mixture { floor, columns } => u
                    .row(j)
                    .iter()
                    .zip(columns)
                    .map(|(&x, c)| c.probability(x, *floor))
                    .collect(),
            })
            .collect();
        PriorMatrix {
            n_patients: u.n_patients(),
            n_topics: k,
            data: flatten(rows),
        }
    }
}

fn flatten(rows: Vec<Vec<f64>>) -> Vec<f64> {
    rows.into_iter().flatten().collect()
}

fn binary_value(u: u64, floor: f64) -> f64 {
    if u > 0 {
        1.0
    } else {
        floor
    }
}

/// How guide probabilities are derived from phenotype counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    #[default]
    Mixture,
    Binary,
}

impl PriorMode {
    pub fn fit(self, u: &PhecodeCountMatrix, cfg: &PriorConfig) -> Result<PriorModel> {
        match self {
            PriorMode::Mixture => fit_prior_model(u, cfg),
            PriorMode::Binary => Ok(PriorModel::Binary { floor: cfg.floor }),
        }
    }
}

impl std::str::FromStr for PriorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixture" => Ok(PriorMode::Mixture),
            "binary" => Ok(PriorMode::Binary),
            other => Err(Error::Config(format!("unknown prior mode {other:?} (expected mixture or binary)"))),
        }
    }
}

/// Fits both mixtures on every phenotype column (columns in parallel).
pub fn fit_prior_model(u: &PhecodeCountMatrix, cfg: &PriorConfig) -> Result<PriorModel> {
    if u.n_phenotypes() == 0 {
        return Err(Error::Data("phenotype count matrix has no columns".into()));
    }
    let columns = (0..u.n_phenotypes())
        .into_par_iter()
        .map(|k| {
            let col = u.column(k);
            ColumnPrior {
                poisson: fit_poisson_mixture(&col, &cfg.em).params,
                gaussian: fit_gaussian_mixture(&col, &cfg.em).params,
            }
        })
        .collect();
    Ok(PriorModel::Mixture {
        floor: cfg.floor,
        columns,
    })
}

/// π_jk = ½(Poisson responsibility + Gaussian responsibility), clamped to [ε, 1].
pub fn compute_prior(u: &PhecodeCountMatrix, cfg: &PriorConfig) -> Result<PriorMatrix> {
    Ok(fit_prior_model(u, cfg)?.apply(u))
}

/// π_jk = 1 when the phenotype was observed, ε otherwise.
pub fn binary_prior(u: &PhecodeCountMatrix, cfg: &PriorConfig) -> PriorMatrix {
    PriorModel::Binary { floor: cfg.floor }.apply(u)
}

pub fn write_prior(
    prior: &PriorMatrix,
    patient_ids: &[String],
    phenotype_ids: &[String],
    path: &Path,
    provenance: Option<&str>,
) -> Result<()> {
    let mut w = TsvWriter::create(path, provenance, &PRIOR_HEADER)?;
    for (j, pid) in patient_ids.iter().enumerate() {
        for (k, ph) in phenotype_ids.iter().enumerate() {
            w.row(&[pid.as_str(), ph.as_str(), &prior.get(j, k).to_string()])?;
        }
    }
    w.finish()
}

/// Loads a dense prior file aligned to `patient_ids`. Phenotypes are ordered
/// by first appearance; every (patient, phenotype) pair must be present.
pub fn load_prior(path: &Path, patient_ids: &[String]) -> Result<(PriorMatrix, Vec<String>)> {
    let file = tsv::read(path, &PRIOR_HEADER)?;
    let mut phen: Vec<String> = Vec::new();
    let mut phen_idx: HashMap<String, usize> = HashMap::new();
    let mut values: HashMap<(String, usize), f64> = HashMap::new();
    for row in &file.rows {
        let k = *phen_idx.entry(row.fields[1].clone()).or_insert_with(|| {
            phen.push(row.fields[1].clone());
            phen.len() - 1
        });
        let v: f64 = row.fields[2]
            .parse()
            .ok()
            .filter(|v: &f64| *v > 0.0 && *v <= 1.0)
            .ok_or_else(|| file.parse_err(row.line, format!("pi must be in (0, 1], got {:?}", row.fields[2])))?;
        values.insert((row.fields[0].clone(), k), v);
    }
    let rows = patient_ids
        .iter()
        .map(|pid| {
            (0..phen.len())
                .map(|k| {
                    values.get(&(pid.clone(), k)).copied().ok_or_else(|| {
                        Error::Data(format!("{}: missing prior for patient {pid}, phenotype {}", path.display(), phen[k]))
                    })
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((PriorMatrix::from_rows(rows)?, phen))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Mixture log-likelihood maximised over the mixing weight by golden-section search.
    fn profiled_poisson_ll(counts: &[u64], rho0: f64, rho1: f64) -> f64 {
        let ll = |w: f64| {
            counts
                .iter()
                .map(|&u| {
                    let uf = u as f64;
                    let lf = ln_gamma(uf + 1.0);
                    let a = (1.0 - w) * (uf * rho0.ln() - rho0 - lf).exp();
                    let b = w * (uf * rho1.ln() - rho1 - lf).exp();
                    (a + b).ln()
                })
                .sum::<f64>()
        };
        let (mut lo, mut hi) = (1e-9, 1.0 - 1e-9);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..80 {
            let a = hi - g * (hi - lo);
            let b = lo + g * (hi - lo);
            if ll(a) < ll(b) {
                lo = a;
            } else {
                hi = b;
            }
        }
        ll(0.5 * (lo + hi))
    }

    fn grid_oracle(counts: &[u64], step: f64, max: f64) -> (f64, f64, f64) {
        let n = (max / step).round() as usize;
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
        for a in 1..=n {
            for b in a..=n {
                let (r0, r1) = (a as f64 * step, b as f64 * step);
                let v = profiled_poisson_ll(counts, r0, r1);
                if v > best.0 {
                    best = (v, r0, r1);
                }
            }
        }
        best
    }

    #[test]
    fn poisson_two_point_masses() {
        let counts = [0, 0, 0, 0, 10, 10];
        let fit = fit_poisson_mixture(&counts, &EmConfig::default());
        let (best_ll, g0, g1) = grid_oracle(&counts, 0.05, 15.0);
        assert!(!fit.degenerate());
        assert!(fit.rho0() < 0.05 && (fit.rho0() - g0).abs() <= 0.05);
        assert!((fit.rho1() - g1).abs() <= 0.05, "{} vs {g1}", fit.rho1());
        assert!((fit.rho1() - 10.0).abs() < 1e-3);
        let ll = fit.params.log_likelihood(&counts);
        assert!(ll >= best_ll - 1e-9);
        for (r, e) in fit.responsibilities.iter().zip([0.0, 0.0, 0.0, 0.0, 1.0, 1.0]) {
            // at the MLE a zero count keeps foreground odds e^-10 / 2
            assert!((r - e).abs() < 1e-4, "{:?}", fit.responsibilities);
        }
    }

    #[test]
    fn poisson_identical_counts_degenerate() {
        let fit = fit_poisson_mixture(&[5, 5, 5, 5], &EmConfig::default());
        assert!(fit.degenerate());
        assert_eq!(fit.responsibilities, vec![0.5; 4]);
    }

    #[test]
    fn poisson_recovers_sampled_rates() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Poisson};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (a, b) = (Poisson::new(1.0).unwrap(), Poisson::new(20.0).unwrap());
        let counts: Vec<u64> = (0..2000)
            .map(|i| if i % 2 == 0 { a.sample(&mut rng) as u64 } else { b.sample(&mut rng) as u64 })
            .collect();
        let fit = fit_poisson_mixture(&counts, &EmConfig::default());
        assert!((fit.rho0() - 1.0).abs() < 0.2, "rho0 {}", fit.rho0());
        assert!((fit.rho1() - 20.0).abs() < 1.0, "rho1 {}", fit.rho1());
        // coarse grid oracle around the optimum: EM must be at least as good
        let (best_ll, g0, g1) = grid_oracle(&counts, 0.25, 25.0);
        assert!(fit.params.log_likelihood(&counts) >= best_ll - 1e-6);
        assert!((fit.rho0() - g0).abs() <= 0.25 && (fit.rho1() - g1).abs() <= 0.25);
    }

    #[test]
    fn gaussian_point_masses_hit_floor() {
        let hi = 20f64.ln() + 1.0;
        let xs: Vec<f64> = (0..200).map(|i| if i < 100 { 1.0 } else { hi }).collect();
        let cfg = EmConfig::default();
        let fit = fit_gaussian_mixture_values(&xs, &cfg);
        assert!((fit.params.mu0 - 1.0).abs() < 1e-9);
        assert!((fit.params.mu1 - hi).abs() < 1e-9);
        assert_eq!(fit.params.sigma0, cfg.sigma_floor);
        assert_eq!(fit.params.sigma1, cfg.sigma_floor);
    }

    #[test]
    fn gaussian_all_equal_degenerate() {
        let fit = fit_gaussian_mixture(&[3, 3, 3], &EmConfig::default());
        assert!(fit.degenerate());
        assert_eq!(fit.responsibilities, vec![0.5; 3]);
    }

    #[test]
    fn gaussian_mirror_symmetry() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (a, b) = (Normal::new(0.0, 0.5).unwrap(), Normal::new(5.0, 1.0).unwrap());
        let xs: Vec<f64> = (0..400)
            .map(|i| if i % 3 == 0 { b.sample(&mut rng) } else { a.sample(&mut rng) })
            .collect();
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        let f = fit_gaussian_mixture_values(&xs, &EmConfig::default());
        let g = fit_gaussian_mixture_values(&neg, &EmConfig::default());
        assert!((f.params.mu0 + g.params.mu1).abs() < 1e-6);
        assert!((f.params.mu1 + g.params.mu0).abs() < 1e-6);
        for (r, s) in f.responsibilities.iter().zip(&g.responsibilities) {
            assert!((r - (1.0 - s)).abs() < 1e-6);
        }
    }

    #[test]
    fn prior_averages_and_clamps() {
        let col = ColumnPrior {
            poisson: PoissonParams { rho0: 0.5, rho1: 8.0, weight: 0.3, degenerate: false },
            gaussian: GaussianParams { mu0: 0.2, mu1: 2.0, sigma0: 0.3, sigma1: 0.5, weight: 0.3, degenerate: false },
        };
        for u in [0u64, 1, 2, 5, 9] {
            let expected = 0.5 * (col.poisson.responsibility(u) + col.gaussian.responsibility(u));
            assert_eq!(col.probability(u, 1e-6), expected.clamp(1e-6, 1.0));
        }
        // averaging rule on given responsibilities
        assert!((0.5f64 * (0.8 + 0.6) - 0.7).abs() < 1e-15);
        let pinned = ColumnPrior {
            poisson: PoissonParams { rho0: 1.0, rho1: 1e6, weight: 1e-300, degenerate: false },
            gaussian: GaussianParams { mu0: 0.0, mu1: 100.0, sigma0: 1e-3, sigma1: 1e-3, weight: 1e-300, degenerate: false },
        };
        assert_eq!(pinned.probability(0, 1e-6), 1e-6);
    }

    #[test]
    fn binary_prior_rules() {
        let u = PhecodeCountMatrix::from_rows(vec![vec![3, 0], vec![0, 0]]).unwrap();
        let p = binary_prior(&u, &PriorConfig::default());
        assert_eq!(p.row(0), &[1.0, 1e-6]);
        assert_eq!(p.row(1), &[1e-6, 1e-6]);
    }

    #[test]
    fn degenerate_column_falls_back_to_binary() {
        let u = PhecodeCountMatrix::from_rows(vec![vec![2, 0], vec![2, 5], vec![2, 0], vec![2, 6]]).unwrap();
        let p = compute_prior(&u, &PriorConfig::default()).unwrap();
        for j in 0..4 {
            assert_eq!(p.get(j, 0), 1.0);
        }
        assert!(p.get(1, 1) > 0.9 && p.get(0, 1) < 0.1);
    }

    #[test]
    fn heldout_rows_without_phenotypes_are_uniform() {
        let u = PhecodeCountMatrix::from_rows(vec![vec![0, 1], vec![4, 0], vec![0, 0], vec![7, 2]]).unwrap();
        let model = fit_prior_model(&u, &PriorConfig::default()).unwrap();
        let (row, flagged) = model.prior_row(&[0, 0]);
        assert!(flagged);
        assert_eq!(row, vec![0.5, 0.5]);
        let (row, flagged) = model.prior_row(&[4, 0]);
        assert!(!flagged);
        assert_eq!(row, model.apply(&u).row(1));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn em_log_likelihood_non_decreasing(counts in proptest::collection::vec(0u64..40, 5..80)) {
            let cfg = EmConfig::default();
            let fp = fit_poisson_mixture(&counts, &cfg);
            for w in fp.log_likelihood_trace.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-10, "poisson {:?}", w);
            }
            prop_assert!(fp.degenerate() || fp.rho0() <= fp.rho1());
            let fg = fit_gaussian_mixture(&counts, &cfg);
            for w in fg.log_likelihood_trace.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-10, "gaussian {:?}", w);
            }
            for r in fp.responsibilities.iter().chain(&fg.responsibilities) {
                prop_assert!((0.0..=1.0).contains(r));
            }
        }

        #[test]
        fn shifted_counts_keep_rate_order(counts in proptest::collection::vec(0u64..30, 6..50), c in 1u64..20) {
            let shifted: Vec<u64> = counts.iter().map(|u| u + c).collect();
            let f = fit_poisson_mixture(&shifted, &EmConfig::default());
            prop_assert!(f.degenerate() || f.rho0() < f.rho1() || (f.rho0() - f.rho1()).abs() < 1e-9);
        }

        #[test]
        fn prior_row_permutation_invariant(rows in proptest::collection::vec(proptest::collection::vec(0u64..12, 3), 4..20), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let u = PhecodeCountMatrix::from_rows(rows.clone()).unwrap();
            let mut perm: Vec<usize> = (0..rows.len()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let up = PhecodeCountMatrix::from_rows(perm.iter().map(|&j| rows[j].clone()).collect()).unwrap();
            let p = compute_prior(&u, &PriorConfig::default()).unwrap();
            let q = compute_prior(&up, &PriorConfig::default()).unwrap();
            for (new, &old) in perm.iter().enumerate() {
                for k in 0..3 {
                    prop_assert!((p.get(old, k) - q.get(new, k)).abs() < 1e-6);
                    prop_assert!(p.get(old, k) >= 1e-6 && p.get(old, k) <= 1.0);
                }
            }
        }
    }
}
