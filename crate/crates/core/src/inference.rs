//! Collapsed variational inference for guided, survival-supervised topic models.
//!
//! Every distinct token type `(feature, count)` of a patient document carries
//! one responsibility vector γ over the K topics. Statistics are expected
//! counts: a type with multiplicity c contributes c·γ, and when its own γ is
//! refreshed its full c·γ is excluded first.
//!
//! The four model variants share one engine:
//!
//! | variant        | guide prior π | survival term |
//! |----------------|---------------|---------------|
//! | `mixehr`       | 1/K           | no            |
//! | `mixehr_g`     | fitted        | no            |
//! | `mixehr_surv`  | 1/K           | yes           |
//! | `mixehr_surg`  | fitted        | yes           |

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::digamma;

use crate::corpus::{Corpus, GuideMap, SurvivalOutcome, TokenCount, Vocabulary};
use crate::error::{Error, Result};
use crate::prior::{PriorMatrix, PriorModel};
use crate::survival::{self, BaselineHazard, CoxConfig, LINPRED_CLIP};

/// Lower bound applied to every hyperparameter after a fixed-point step.
pub const HYPER_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Mixehr,
    MixehrG,
    MixehrSurv,
    MixehrSurg,
}

impl Variant {
    pub fn guided(self) -> bool {
        matches!(self, Variant::MixehrG | Variant::MixehrSurg)
    }

    pub fn supervised(self) -> bool {
        matches!(self, Variant::MixehrSurv | Variant::MixehrSurg)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mixehr => "mixehr",
            Variant::MixehrG => "mixehr_g",
            Variant::MixehrSurv => "mixehr_surv",
            Variant::MixehrSurg => "mixehr_surg",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixehr" => Ok(Variant::Mixehr),
            "mixehr_g" => Ok(Variant::MixehrG),
            "mixehr_surv" => Ok(Variant::MixehrSurv),
            "mixehr_surg" => Ok(Variant::MixehrSurg),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected mixehr, mixehr_g, mixehr_surv or mixehr_surg)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k: usize,
    pub max_sweeps: usize,
    /// Relative change of the likelihood proxy that ends training.
    pub tol: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub variant: Variant,
    pub seed: u64,
    pub cox_refit_every: usize,
    pub a_alpha: f64,
    pub b_alpha: f64,
    pub a_beta: f64,
    pub b_beta: f64,
    /// Worker threads for the zero-order E-step; 0 or 1 selects the
    /// sequential reference sweep.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 10,
            max_sweeps: 100,
            tol: 1e-5,
            lambda1: 1e-3,
            lambda2: 1e-3,
            variant: Variant::MixehrSurg,
            seed: 0,
            cox_refit_every: 1,
            a_alpha: 1.0,
            b_alpha: 1.0,
            a_beta: 1.0,
            b_beta: 1.0,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.k == 0 {
            return bad("K must be at least 1");
        }
        if !(self.tol > 0.0) {
            return bad("tol must be positive");
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("lambda1 and lambda2 must be non-negative");
        }
        if self.cox_refit_every == 0 {
            return bad("cox_refit_every must be at least 1");
        }
        for (name, v) in [
            ("a_alpha", self.a_alpha),
            ("b_alpha", self.b_alpha),
            ("a_beta", self.a_beta),
            ("b_beta", self.b_beta),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn cox(&self) -> CoxConfig {
        CoxConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            ..CoxConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub alpha: Vec<f64>,
    /// One vector per modality.
    pub beta: Vec<Vec<f64>>,
    pub a_alpha: f64,
    pub b_alpha: f64,
    pub a_beta: f64,
    pub b_beta: f64,
}

/// Guide information needed to train a guided variant and to score held-out patients.
#[derive(Debug, Clone, PartialEq)]
pub struct Guidance {
    pub matrix: PriorMatrix,
    pub model: PriorModel,
    pub guide: Option<GuideSpec>,
}

/// Feature → phenotype map together with the modality it applies to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuideSpec {
    pub map: GuideMap,
    pub modality: usize,
}

/// Token responsibilities and the expected-count statistics derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    k: usize,
    /// Per modality, `offsets[m][j]..offsets[m][j + 1]` indexes patient j's types.
    offsets: Vec<Vec<usize>>,
    /// Per modality, flat `[type * K + k]`.
    gamma: Vec<Vec<f64>>,
    /// Per modality, flat `[v * K + k]`.
    n_wk: Vec<Vec<f64>>,
    n_k: Vec<Vec<f64>>,
    /// Flat `[j * K + k]`.
    n_jk: Vec<f64>,
    gamma_bar: Vec<f64>,
}

impl VariationalState {
    fn layout(corpus: &Corpus) -> Vec<Vec<usize>> {
        (0..corpus.n_modalities())
            .map(|m| {
                let mut off = Vec::with_capacity(corpus.n_patients() + 1);
                off.push(0);
                for p in corpus.patients() {
                    off.push(off.last().unwrap() + p.tokens(m).len());
                }
                off
            })
            .collect()
    }

    /// Builds a state from explicit responsibilities (one flat K-blocked vector
    /// per modality, patient-major in corpus order) and derives all statistics.
    pub fn from_gamma(corpus: &Corpus, k: usize, gamma: Vec<Vec<f64>>) -> Result<Self> {
        let offsets = Self::layout(corpus);
        if gamma.len() != corpus.n_modalities() {
            return Err(Error::Data("one responsibility block per modality required".into()));
        }
        for (m, g) in gamma.iter().enumerate() {
            if g.len() != offsets[m].last().unwrap() * k {
                return Err(Error::Data(format!("modality {m}: wrong number of responsibilities")));
            }
        }
        let mut state = VariationalState {
            k,
            n_wk: corpus.vocabularies().iter().map(|v| vec![0.0; v.size() * k]).collect(),
            n_k: vec![vec![0.0; k]; corpus.n_modalities()],
            n_jk: vec![0.0; corpus.n_patients() * k],
            gamma_bar: vec![0.0; corpus.n_patients() * k],
            offsets,
            gamma,
        };
        state.rebuild(corpus);
        Ok(state)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_patients(&self) -> usize {
        self.n_jk.len() / self.k
    }

    /// γ of patient j's t-th distinct type in modality m.
    pub fn gamma(&self, m: usize, j: usize, t: usize) -> &[f64] {
        let i = self.offsets[m][j] + t;
        &self.gamma[m][i * self.k..(i + 1) * self.k]
    }

    fn patient_block(&self, m: usize, j: usize) -> &[f64] {
        &self.gamma[m][self.offsets[m][j] * self.k..self.offsets[m][j + 1] * self.k]
    }

    pub fn n_wk(&self, m: usize, v: usize) -> &[f64] {
        &self.n_wk[m][v * self.k..(v + 1) * self.k]
    }

    pub fn n_k(&self, m: usize) -> &[f64] {
        &self.n_k[m]
    }

    pub fn n_jk(&self, j: usize) -> &[f64] {
        &self.n_jk[j * self.k..(j + 1) * self.k]
    }

    /// Mean responsibilities of patient j (previous completed sweep).
    pub fn gamma_bar(&self, j: usize) -> &[f64] {
        &self.gamma_bar[j * self.k..(j + 1) * self.k]
    }

    pub fn gamma_bar_rows(&self) -> Vec<Vec<f64>> {
        self.gamma_bar.chunks(self.k).map(|r| r.to_vec()).collect()
    }

    /// Normalized expected counts n_jk / Σ_k n_jk; None for empty patients.
    pub fn theta(&self, j: usize) -> Option<Vec<f64>> {
        normalize(self.n_jk(j))
    }

    /// Recomputes every statistic from γ in a fixed order.
    fn rebuild(&mut self, corpus: &Corpus) {
        let k = self.k;
        self.n_wk.iter_mut().for_each(|x| x.fill(0.0));
        self.n_k.iter_mut().for_each(|x| x.fill(0.0));
        self.n_jk.fill(0.0);
        for (j, p) in corpus.patients().iter().enumerate() {
            let mut blocks = Vec::with_capacity(corpus.n_modalities());
            for m in 0..corpus.n_modalities() {
                let toks = p.tokens(m);
                let g = self.patient_block(m, j).to_vec();
                for (tok, gt) in toks.iter().zip(g.chunks(k)) {
                    let c = tok.count as f64;
                    let v = tok.feature;
                    for kk in 0..k {
                        let x = c * gt[kk];
                        self.n_wk[m][v * k + kk] += x;
                        self.n_k[m][kk] += x;
                        self.n_jk[j * k + kk] += x;
                    }
                }
                blocks.push(g);
            }
            let views: Vec<(&[f64], &[TokenCount])> =
                blocks.iter().enumerate().map(|(m, b)| (b.as_slice(), p.tokens(m))).collect();
            let gb = mean_responsibilities(&views, k).unwrap_or_else(|| vec![1.0 / k as f64; k]);
            self.gamma_bar[j * k..(j + 1) * k].copy_from_slice(&gb);
        }
    }
}

fn normalize(x: &[f64]) -> Option<Vec<f64>> {
    let s: f64 = x.iter().sum();
    if s > 0.0 && s.is_finite() {
        Some(x.iter().map(|v| v / s).collect())
    } else {
        None
    }
}

/// Per-modality count-weighted mean of γ, averaged over non-empty modalities
/// and renormalized to the simplex. None when the patient has no tokens.
pub(crate) fn mean_responsibilities(blocks: &[(&[f64], &[TokenCount])], k: usize) -> Option<Vec<f64>> {
    let mut acc = vec![0.0; k];
    let mut any = false;
    for (gamma, toks) in blocks {
        let n: f64 = toks.iter().map(|t| t.count as f64).sum();
        if n == 0.0 {
            continue;
        }
        any = true;
        for (tok, g) in toks.iter().zip(gamma.chunks(k)) {
            let w = tok.count as f64 / n;
            for kk in 0..k {
                acc[kk] += w * g[kk];
            }
        }
    }
    if any {
        normalize(&acc)
    } else {
        None
    }
}

/// Draws α, β and γ from the seeded generator and derives the statistics.
pub fn init_state(corpus: &Corpus, cfg: &TrainConfig, seed: u64) -> Result<(VariationalState, Hyperparams)> {
    cfg.validate()?;
    let k = cfg.k;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ga = Gamma::new(cfg.a_alpha, 1.0 / cfg.b_alpha).map_err(|e| Error::Config(e.to_string()))?;
    let gb = Gamma::new(cfg.a_beta, 1.0 / cfg.b_beta).map_err(|e| Error::Config(e.to_string()))?;
    let alpha: Vec<f64> = (0..k).map(|_| ga.sample(&mut rng).max(HYPER_FLOOR)).collect();
    let beta: Vec<Vec<f64>> = corpus
        .vocabularies()
        .iter()
        .map(|v| (0..v.size()).map(|_| gb.sample(&mut rng).max(HYPER_FLOOR)).collect())
        .collect();
    let offsets = VariationalState::layout(corpus);
    let gamma: Vec<Vec<f64>> = offsets
        .iter()
        .map(|off| {
            let n_types = *off.last().unwrap();
            let mut g = Vec::with_capacity(n_types * k);
            for _ in 0..n_types {
                let draw: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
                g.extend(normalize(&draw).unwrap_or_else(|| vec![1.0 / k as f64; k]));
            }
            g
        })
        .collect();
    let state = VariationalState::from_gamma(corpus, k, gamma)?;
    let hyper = Hyperparams {
        alpha,
        beta,
        a_alpha: cfg.a_alpha,
        b_alpha: cfg.b_alpha,
        a_beta: cfg.a_beta,
        b_beta: cfg.b_beta,
    };
    Ok((state, hyper))
}

/// Survival inputs of one patient for the γ update.
#[derive(Debug, Clone, Copy)]
pub struct SurvivalTerm<'a> {
    pub w: &'a [f64],
    /// H₀(T_j).
    pub cumulative_hazard: f64,
    pub event: bool,
    /// wᵀγ̄_j from the previous sweep.
    pub linear_predictor: f64,
}

/// Multiplicative survival factor per topic for a modality holding `n_tokens`
/// tokens, scaled so its largest entry is 1.
pub fn survival_factor(term: &SurvivalTerm<'_>, n_tokens: f64, out: &mut [f64]) {
    let d = if term.event { 1.0 } else { 0.0 };
    let scale = term.cumulative_hazard * (term.linear_predictor + 1.0);
    let mut max = f64::NEG_INFINITY;
    for (o, &wk) in out.iter_mut().zip(term.w) {
        let r = wk / n_tokens;
        *o = (d * r - scale * r.exp()).clamp(-LINPRED_CLIP, LINPRED_CLIP);
        max = max.max(*o);
    }
    out.iter_mut().for_each(|o| *o = (*o - max).exp());
}

struct TypeUpdate<'a> {
    old: &'a [f64],
    count: f64,
    prior: &'a [f64],
    n_jk: &'a [f64],
    n_wk: &'a [f64],
    n_k: &'a [f64],
    beta_v: f64,
    beta_sum: f64,
    surv: Option<&'a [f64]>,
}

fn compute_gamma(u: &TypeUpdate<'_>, out: &mut [f64]) -> bool {
    let mut sum = 0.0;
    for kk in 0..out.len() {
        let own = u.count * u.old[kk];
        let doc = u.prior[kk] + (u.n_jk[kk] - own).max(0.0);
        let word = u.beta_v + (u.n_wk[kk] - own).max(0.0);
        let norm = u.beta_sum + (u.n_k[kk] - own).max(0.0);
        let mut val = doc * word / norm;
        if let Some(f) = u.surv {
            val *= f[kk];
        }
        out[kk] = val;
        sum += val;
    }
    if !(sum > 0.0 && sum.is_finite()) {
        return false;
    }
    out.iter_mut().for_each(|x| *x /= sum);
    true
}

/// Per-patient pseudo-counts α_k·π_jk.
fn prior_counts(alpha: &[f64], pi: &[f64]) -> Vec<f64> {
    alpha.iter().zip(pi).map(|(a, p)| a * p).collect()
}

/// Refreshes γ of one token type in place, updating the statistics
/// incrementally, and returns the new vector.
#[allow(clippy::too_many_arguments)]
pub fn update_gamma(
    state: &mut VariationalState,
    corpus: &Corpus,
    hyper: &Hyperparams,
    prior_row: &[f64],
    surv: Option<&SurvivalTerm<'_>>,
    j: usize,
    m: usize,
    t: usize,
) -> Result<Vec<f64>> {
    let k = state.k;
    let p = corpus.patient(j);
    let n_tokens = p.n_tokens(m) as f64;
    let tok = p.tokens(m)[t];
    let factor = surv.map(|s| {
        let mut f = vec![0.0; k];
        survival_factor(s, n_tokens, &mut f);
        f
    });
    let prior = prior_counts(&hyper.alpha, prior_row);
    let beta_sum: f64 = hyper.beta[m].iter().sum();
    let mut out = vec![0.0; k];
    apply_type(state, m, j, t, tok, &prior, hyper.beta[m][tok.feature], beta_sum, factor.as_deref(), &mut out)
        .then_some(())
        .ok_or_else(|| Error::NonFinite(format!("responsibilities of patient {}", p.patient_id)))?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn apply_type(
    state: &mut VariationalState,
    m: usize,
    j: usize,
    t: usize,
    tok: TokenCount,
    prior: &[f64],
    beta_v: f64,
    beta_sum: f64,
    surv: Option<&[f64]>,
    out: &mut [f64],
) -> bool {
    let k = state.k;
    let i = state.offsets[m][j] + t;
    let v = tok.feature;
    let c = tok.count as f64;
    let ok = {
        let u = TypeUpdate {
            old: &state.gamma[m][i * k..(i + 1) * k],
            count: c,
            prior,
            n_jk: &state.n_jk[j * k..(j + 1) * k],
            n_wk: &state.n_wk[m][v * k..(v + 1) * k],
            n_k: &state.n_k[m],
            beta_v,
            beta_sum,
            surv,
        };
        compute_gamma(&u, out)
    };
    if !ok {
        return false;
    }
    for kk in 0..k {
        let delta = c * (out[kk] - state.gamma[m][i * k + kk]);
        state.n_jk[j * k + kk] += delta;
        state.n_wk[m][v * k + kk] += delta;
        state.n_k[m][kk] += delta;
        state.gamma[m][i * k + kk] = out[kk];
    }
    true
}

/// One fixed-point step for α with per-patient prior scaling:
///
/// α_k ← (a − 1 + α_k Σ_j π_jk[Ψ(α_kπ_jk + n_jk) − Ψ(α_kπ_jk)])
///       / (b + Σ_j π_jk[Ψ(A_j + N_j) − Ψ(A_j)]),   A_j = Σ_k α_kπ_jk.
///
/// `n_jk` is flat P×K; `pi` None means π ≡ 1.
pub fn alpha_step(alpha: &[f64], n_jk: &[f64], pi: Option<&PriorMatrix>, a: f64, b: f64) -> Result<Vec<f64>> {
    let k = alpha.len();
    let p = n_jk.len() / k;
    let mut num = vec![0.0; k];
    let mut den = vec![0.0; k];
    for j in 0..p {
        let row = &n_jk[j * k..(j + 1) * k];
        let n_j: f64 = row.iter().sum();
        if n_j <= 0.0 {
            continue;
        }
        let pij = |kk: usize| pi.map_or(1.0, |m| m.get(j, kk));
        let a_j: f64 = (0..k).map(|kk| alpha[kk] * pij(kk)).sum();
        let d_j = digamma(a_j + n_j) - digamma(a_j);
        for kk in 0..k {
            let x = alpha[kk] * pij(kk);
            num[kk] += pij(kk) * (digamma(x + row[kk]) - digamma(x));
            den[kk] += pij(kk) * d_j;
        }
    }
    (0..k)
        .map(|kk| {
            let v = (a - 1.0 + alpha[kk] * num[kk]) / (b + den[kk]);
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("alpha update for topic {kk}")));
            }
            Ok(v.max(HYPER_FLOOR))
        })
        .collect()
}

/// One fixed-point step for a modality's asymmetric β:
///
/// β_v ← (a − 1 + β_v Σ_k[Ψ(β_v + n_vk) − Ψ(β_v)]) / (b + Σ_k[Ψ(B + n_k) − Ψ(B)]),  B = Σ_v β_v.
///
/// `n_wk` is flat V×K.
pub fn beta_step(beta: &[f64], n_wk: &[f64], k: usize, a: f64, b: f64) -> Result<Vec<f64>> {
    let v_size = beta.len();
    let big_b: f64 = beta.iter().sum();
    let mut n_k = vec![0.0; k];
    for v in 0..v_size {
        for kk in 0..k {
            n_k[kk] += n_wk[v * k + kk];
        }
    }
    let psi_b = digamma(big_b);
    let den = b + n_k.iter().map(|&n| digamma(big_b + n) - psi_b).sum::<f64>();
    (0..v_size)
        .map(|v| {
            let bv = beta[v];
            let psi = digamma(bv);
            let s: f64 = (0..k).map(|kk| digamma(bv + n_wk[v * k + kk]) - psi).sum();
            let out = (a - 1.0 + bv * s) / den;
            if !out.is_finite() {
                return Err(Error::NonFinite(format!("beta update for word {v}")));
            }
            Ok(out.max(HYPER_FLOOR))
        })
        .collect()
}

pub fn update_alpha(state: &VariationalState, hyper: &Hyperparams, prior: Option<&PriorMatrix>) -> Result<Vec<f64>> {
    alpha_step(&hyper.alpha, &state.n_jk, prior, hyper.a_alpha, hyper.b_alpha)
}

pub fn update_beta(state: &VariationalState, hyper: &Hyperparams) -> Result<Vec<Vec<f64>>> {
    hyper
        .beta
        .iter()
        .zip(&state.n_wk)
        .map(|(b, n)| beta_step(b, n, state.k, hyper.a_beta, hyper.b_beta))
        .collect()
}

/// Posterior-mean topic distributions, flat K×V per modality.
pub fn estimate_phi(state: &VariationalState, hyper: &Hyperparams) -> Vec<Vec<f64>> {
    let k = state.k;
    hyper
        .beta
        .iter()
        .zip(&state.n_wk)
        .map(|(beta, n_wk)| {
            let v_size = beta.len();
            let mut phi = vec![0.0; k * v_size];
            for kk in 0..k {
                let row = &mut phi[kk * v_size..(kk + 1) * v_size];
                for v in 0..v_size {
                    row[v] = beta[v] + n_wk[v * k + kk];
                }
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|x| *x /= s);
            }
            phi
        })
        .collect()
}

/// Σ_m Σ_types c·log Σ_k θ_k φ_k,x for one document.
pub(crate) fn document_log_likelihood(
    theta: &[f64],
    tokens: impl Iterator<Item = (usize, TokenCount)>,
    phi: &[Vec<f64>],
    vocab_sizes: &[usize],
) -> f64 {
    let k = theta.len();
    let mut ll = 0.0;
    for (m, tok) in tokens {
        let v_size = vocab_sizes[m];
        let p: f64 = (0..k).map(|kk| theta[kk] * phi[m][kk * v_size + tok.feature]).sum();
        ll += tok.count as f64 * p.ln();
    }
    ll
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalHead {
    pub w: Vec<f64>,
    pub baseline: BaselineHazard,
    pub cox_converged: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainDiagnostics {
    pub n_sweeps: usize,
    pub converged: bool,
    pub likelihood_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub hyper: Hyperparams,
    /// Flat K×V per modality.
    pub phi: Vec<Vec<f64>>,
    pub survival: Option<SurvivalHead>,
    pub prior_model: PriorModel,
    pub guide: Option<GuideSpec>,
    pub vocabularies: Vec<Vocabulary>,
    pub diagnostics: TrainDiagnostics,
}

impl TrainedModel {
    pub fn k(&self) -> usize {
        self.hyper.alpha.len()
    }

    pub fn n_modalities(&self) -> usize {
        self.vocabularies.len()
    }

    pub fn phi_row(&self, m: usize, k: usize) -> &[f64] {
        let v = self.vocabularies[m].size();
        &self.phi[m][k * v..(k + 1) * v]
    }

    pub fn survival_head(&self) -> Result<&SurvivalHead> {
        self.survival.as_ref().ok_or(Error::NoSurvivalHead)
    }
}

/// Drives training one sweep at a time.
pub struct Trainer<'a> {
    corpus: &'a Corpus,
    outcomes: Option<&'a [SurvivalOutcome]>,
    guidance: Option<&'a Guidance>,
    cfg: TrainConfig,
    state: VariationalState,
    hyper: Hyperparams,
    head: Option<SurvivalHead>,
    trace: Vec<f64>,
    pool: Option<rayon::ThreadPool>,
    /// Guide prior, or 1/K everywhere for unguided variants.
    pi: PriorMatrix,
}

impl<'a> Trainer<'a> {
    pub fn new(
        corpus: &'a Corpus,
        outcomes: Option<&'a [SurvivalOutcome]>,
        guidance: Option<&'a Guidance>,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.variant.supervised() {
            let out = outcomes.ok_or_else(|| {
                Error::Config(format!("variant {} needs survival outcomes", cfg.variant))
            })?;
            if out.len() != corpus.n_patients()
                || out.iter().zip(corpus.patients()).any(|(o, p)| o.patient_id != p.patient_id)
            {
                return Err(Error::Data("survival outcomes are not aligned with the corpus".into()));
            }
        }
        if cfg.variant.guided() {
            let g = guidance
                .ok_or_else(|| Error::Config(format!("variant {} needs a guide prior", cfg.variant)))?;
            if g.matrix.n_patients() != corpus.n_patients() || g.matrix.n_topics() != cfg.k {
                return Err(Error::Data(format!(
                    "prior is {}x{} but corpus has {} patients and K = {}",
                    g.matrix.n_patients(),
                    g.matrix.n_topics(),
                    corpus.n_patients(),
                    cfg.k
                )));
            }
        }
        let (state, hyper) = init_state(corpus, cfg, cfg.seed)?;
        let pool = if cfg.threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.threads)
                    .build()
                    .map_err(|e| Error::Config(e.to_string()))?,
            )
        } else {
            None
        };
        let pi = match guidance {
            Some(g) if cfg.variant.guided() => g.matrix.clone(),
            _ => PriorMatrix::uniform(corpus.n_patients(), cfg.k),
        };
        Ok(Trainer {
            pi,
            corpus,
            outcomes: if cfg.variant.supervised() { outcomes } else { None },
            guidance: if cfg.variant.guided() { guidance } else { None },
            cfg: cfg.clone(),
            state,
            hyper,
            head: None,
            trace: Vec::new(),
            pool,
        })
    }

    pub fn state(&self) -> &VariationalState {
        &self.state
    }

    pub fn hyper(&self) -> &Hyperparams {
        &self.hyper
    }

    pub fn survival_head(&self) -> Option<&SurvivalHead> {
        self.head.as_ref()
    }

    pub fn likelihood_trace(&self) -> &[f64] {
        &self.trace
    }

    fn pi_row(&self, j: usize) -> &[f64] {
        self.pi.row(j)
    }

    /// Survival term inputs for patient j, if a head has been fitted.
    fn survival_inputs(&self, j: usize) -> Option<(f64, bool, f64)> {
        let head = self.head.as_ref()?;
        let o = &self.outcomes?[j];
        let lp: f64 = head.w.iter().zip(self.state.gamma_bar(j)).map(|(a, b)| a * b).sum();
        Some((head.baseline.cumulative_at(o.time), o.event, lp))
    }

    /// New γ blocks (one per modality) for patient j against frozen statistics.
    fn patient_update(&self, j: usize, beta_sums: &[f64]) -> Result<Vec<Vec<f64>>> {
        let k = self.cfg.k;
        let p = self.corpus.patient(j);
        let prior = prior_counts(&self.hyper.alpha, self.pi_row(j));
        let surv = self.survival_inputs(j);
        let mut blocks = Vec::with_capacity(self.corpus.n_modalities());
        for m in 0..self.corpus.n_modalities() {
            let toks = p.tokens(m);
            let mut block = vec![0.0; toks.len() * k];
            let factor = self.modality_factor(surv, p.n_tokens(m));
            for (t, tok) in toks.iter().enumerate() {
                let i = self.state.offsets[m][j] + t;
                let v = tok.feature;
                let u = TypeUpdate {
                    old: &self.state.gamma[m][i * k..(i + 1) * k],
                    count: tok.count as f64,
                    prior: &prior,
                    n_jk: self.state.n_jk(j),
                    n_wk: self.state.n_wk(m, v),
                    n_k: &self.state.n_k[m],
                    beta_v: self.hyper.beta[m][v],
                    beta_sum: beta_sums[m],
                    surv: factor.as_deref(),
                };
                if !compute_gamma(&u, &mut block[t * k..(t + 1) * k]) {
                    return Err(Error::NonFinite(format!("responsibilities of patient {}", p.patient_id)));
                }
            }
            blocks.push(block);
        }
        Ok(blocks)
    }

    fn modality_factor(&self, surv: Option<(f64, bool, f64)>, n_tokens: u64) -> Option<Vec<f64>> {
        let (h0, event, lp) = surv?;
        if n_tokens == 0 {
            return None;
        }
        let head = self.head.as_ref()?;
        let term = SurvivalTerm {
            w: &head.w,
            cumulative_hazard: h0,
            event,
            linear_predictor: lp,
        };
        let mut f = vec![0.0; self.cfg.k];
        survival_factor(&term, n_tokens as f64, &mut f);
        Some(f)
    }

    fn e_step(&mut self) -> Result<()> {
        let beta_sums: Vec<f64> = self.hyper.beta.iter().map(|b| b.iter().sum()).collect();
        let n = self.corpus.n_patients();
        if let Some(pool) = &self.pool {
            let updates: Vec<Result<Vec<Vec<f64>>>> =
                pool.install(|| (0..n).into_par_iter().map(|j| self.patient_update(j, &beta_sums)).collect());
            let k = self.cfg.k;
            for (j, upd) in updates.into_iter().enumerate() {
                for (m, block) in upd?.into_iter().enumerate() {
                    let start = self.state.offsets[m][j] * k;
                    self.state.gamma[m][start..start + block.len()].copy_from_slice(&block);
                }
            }
        } else {
            let k = self.cfg.k;
            let mut out = vec![0.0; k];
            for j in 0..n {
                let p = self.corpus.patient(j);
                let prior = prior_counts(&self.hyper.alpha, self.pi_row(j));
                let surv = self.survival_inputs(j);
                for m in 0..self.corpus.n_modalities() {
                    let factor = self.modality_factor(surv, p.n_tokens(m));
                    for (t, &tok) in p.tokens(m).iter().enumerate() {
                        let beta_v = self.hyper.beta[m][tok.feature];
                        if !apply_type(
                            &mut self.state,
                            m,
                            j,
                            t,
                            tok,
                            &prior,
                            beta_v,
                            beta_sums[m],
                            factor.as_deref(),
                            &mut out,
                        ) {
                            return Err(Error::NonFinite(format!(
                                "responsibilities of patient {}",
                                p.patient_id
                            )));
                        }
                    }
                }
            }
        }
        self.state.rebuild(self.corpus);
        Ok(())
    }

    fn refit_cox(&mut self) -> Result<()> {
        let Some(outcomes) = self.outcomes else {
            return Ok(());
        };
        let keep: Vec<usize> = (0..self.corpus.n_patients())
            .filter(|&j| !self.corpus.patient(j).is_empty())
            .collect();
        let x: Vec<Vec<f64>> = keep.iter().map(|&j| self.state.gamma_bar(j).to_vec()).collect();
        let y: Vec<SurvivalOutcome> = keep.iter().map(|&j| outcomes[j].clone()).collect();
        let warm = self.head.as_ref().map(|h| h.w.clone());
        let fit = survival::fit_cox_elastic_net_from(&x, &y, &self.cfg.cox(), warm.as_deref())?;
        let baseline = survival::breslow_baseline(&x, &y, &fit.w)?;
        self.head = Some(SurvivalHead {
            w: fit.w,
            baseline,
            cox_converged: fit.converged,
        });
        Ok(())
    }

    /// Training likelihood proxy with the current φ.
    pub fn likelihood_proxy(&self, sweep: usize) -> Result<f64> {
        let phi = estimate_phi(&self.state, &self.hyper);
        let sizes: Vec<usize> = self.corpus.vocabularies().iter().map(|v| v.size()).collect();
        let mut total = 0.0;
        for (j, p) in self.corpus.patients().iter().enumerate() {
            let Some(theta) = self.state.theta(j) else {
                continue;
            };
            let toks = (0..p.n_modalities()).flat_map(|m| p.tokens(m).iter().map(move |&t| (m, t)));
            let ll = document_log_likelihood(&theta, toks, &phi, &sizes);
            if !ll.is_finite() {
                return Err(Error::NonFinite(format!(
                    "likelihood proxy at sweep {sweep}, patient {}",
                    p.patient_id
                )));
            }
            total += ll;
        }
        Ok(total)
    }

    /// One E-step plus M-step. Returns the likelihood proxy after the sweep.
    pub fn sweep(&mut self) -> Result<f64> {
        let s = self.trace.len() + 1;
        self.e_step()?;
        let alpha = update_alpha(&self.state, &self.hyper, Some(&self.pi))?;
        let beta = update_beta(&self.state, &self.hyper)?;
        self.hyper.alpha = alpha;
        self.hyper.beta = beta;
        if self.cfg.variant.supervised() && s % self.cfg.cox_refit_every == 0 {
            self.refit_cox()?;
        }
        let ll = self.likelihood_proxy(s)?;
        log::debug!("sweep {s}: likelihood proxy {ll:.6}");
        self.trace.push(ll);
        Ok(ll)
    }

    /// Sweeps until the relative proxy change drops below tol or the budget runs out.
    pub fn run(&mut self) -> Result<bool> {
        while self.trace.len() < self.cfg.max_sweeps {
            let ll = self.sweep()?;
            if let [.., prev, _] = self.trace[..] {
                if ((ll - prev) / prev.abs().max(f64::MIN_POSITIVE)).abs() < self.cfg.tol {
                    return Ok(true);
                }
            }
        }
        Ok(false)
    }

    pub fn finish(mut self, converged: bool) -> Result<TrainedModel> {
        if self.cfg.variant.supervised() && self.head.is_none() {
            self.refit_cox()?;
        }
        let (prior_model, guide) = match self.guidance {
            Some(g) => (g.model.clone(), g.guide.clone()),
            None => (PriorModel::Uniform, None),
        };
        Ok(TrainedModel {
            phi: estimate_phi(&self.state, &self.hyper),
            config: self.cfg,
            hyper: self.hyper,
            survival: self.head,
            prior_model,
            guide,
            vocabularies: self.corpus.vocabularies().to_vec(),
            diagnostics: TrainDiagnostics {
                n_sweeps: self.trace.len(),
                converged,
                likelihood_trace: self.trace,
            },
        })
    }

    pub fn into_parts(self) -> (VariationalState, Hyperparams, Option<SurvivalHead>) {
        (self.state, self.hyper, self.head)
    }
}

pub fn train(
    corpus: &Corpus,
    outcomes: Option<&[SurvivalOutcome]>,
    guidance: Option<&Guidance>,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    Ok(train_with_state(corpus, outcomes, guidance, cfg)?.0)
}

/// Trains and also returns the final variational state (training γ̄, θ).
pub fn train_with_state(
    corpus: &Corpus,
    outcomes: Option<&[SurvivalOutcome]>,
    guidance: Option<&Guidance>,
    cfg: &TrainConfig,
) -> Result<(TrainedModel, VariationalState)> {
    let mut trainer = Trainer::new(corpus, outcomes, guidance, cfg)?;
    let converged = trainer.run()?;
    let state = trainer.state.clone();
    log::info!(
        "trained {} with K = {} in {} sweeps (converged: {converged})",
        cfg.variant,
        cfg.k,
        trainer.trace.len()
    );
    Ok((trainer.finish(converged)?, state))
}
