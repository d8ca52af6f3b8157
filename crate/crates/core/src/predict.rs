//! Held-out topic inference and personalized risk.
//!
//! A new patient's responsibilities are refined against the trained topic
//! distributions with the patient's own counts as the only free statistics.
//! No survival information enters: at prediction time the outcome is unknown.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{phecode_counts, Corpus, PatientRecord, TokenCount};
use crate::error::{Error, Result};
use crate::inference::{document_log_likelihood, mean_responsibilities, TrainedModel};
use crate::prior::{PriorMatrix, PriorModel};
use crate::survival::{hazard_ratio, survival_function, SurvivalFunction};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictConfig {
    /// Relative change of the document log-likelihood that ends the loop.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            tol: 1e-6,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub gamma_bar: Vec<f64>,
    pub theta: Vec<f64>,
    /// exp(wᵀγ̄); None when the model has no survival head.
    pub hazard_ratio: Option<f64>,
    pub log_marginal: f64,
    pub n_iters: usize,
    /// Likelihood after initialization and after every iteration.
    pub log_marginal_trace: Vec<f64>,
    /// Set for patients without tokens, whose topics fall back to the prior.
    pub empty: bool,
}

fn check_patient(model: &TrainedModel, patient: &PatientRecord) -> Result<()> {
    if patient.n_modalities() != model.n_modalities() {
        return Err(Error::Data(format!(
            "patient {} has {} modalities, model has {}",
            patient.patient_id,
            patient.n_modalities(),
            model.n_modalities()
        )));
    }
    for (m, vocab) in model.vocabularies.iter().enumerate() {
        if let Some(t) = patient.tokens(m).iter().find(|t| t.feature >= vocab.size()) {
            return Err(Error::Data(format!(
                "patient {}: feature index {} outside modality {} vocabulary",
                patient.patient_id, t.feature, vocab.name
            )));
        }
    }
    Ok(())
}

pub fn infer_heldout_topics(
    model: &TrainedModel,
    patient: &PatientRecord,
    prior_row: &[f64],
    cfg: &PredictConfig,
) -> Result<PredictionResult> {
    check_patient(model, patient)?;
    let k = model.k();
    if prior_row.len() != k {
        return Err(Error::Data(format!("prior row has {} entries, K = {k}", prior_row.len())));
    }
    let pseudo: Vec<f64> = model.hyper.alpha.iter().zip(prior_row).map(|(a, p)| a * p).collect();
    let hr = |gb: &[f64]| model.survival.as_ref().map(|h| hazard_ratio(&h.w, gb));

    if patient.is_empty() {
        let s: f64 = pseudo.iter().sum();
        let gb: Vec<f64> = pseudo.iter().map(|x| x / s).collect();
        return Ok(PredictionResult {
            hazard_ratio: hr(&gb),
            theta: gb.clone(),
            gamma_bar: gb,
            log_marginal: 0.0,
            n_iters: 0,
            log_marginal_trace: vec![0.0],
            empty: true,
        });
    }

    let sizes: Vec<usize> = model.vocabularies.iter().map(|v| v.size()).collect();
    let tokens: Vec<(usize, TokenCount)> = (0..patient.n_modalities())
        .flat_map(|m| patient.tokens(m).iter().map(move |&t| (m, t)))
        .collect();
    let phi_at = |m: usize, kk: usize, v: usize| model.phi[m][kk * sizes[m] + v];

    // step-1 solution with zero counts: γ ∝ α_kπ_k φ_k,x
    let mut gamma = vec![0.0; tokens.len() * k];
    let mut n_k = vec![0.0; k];
    for (i, &(m, tok)) in tokens.iter().enumerate() {
        let g = &mut gamma[i * k..(i + 1) * k];
        for kk in 0..k {
            g[kk] = pseudo[kk] * phi_at(m, kk, tok.feature);
        }
        normalize_in_place(g, &patient.patient_id)?;
        for kk in 0..k {
            n_k[kk] += tok.count as f64 * g[kk];
        }
    }
    let total: f64 = tokens.iter().map(|(_, t)| t.count as f64).sum();
    let loglik = |n_k: &[f64]| {
        let theta: Vec<f64> = n_k.iter().map(|x| x / total).collect();
        document_log_likelihood(&theta, tokens.iter().copied(), &model.phi, &sizes)
    };
    let mut ll = loglik(&n_k);
    let mut trace = vec![ll];
    let mut iters = 0;
    let mut buf = vec![0.0; k];
    while iters < cfg.max_iter {
        iters += 1;
        // every token against the previous statistics, then one refresh
        let mut next_n = vec![0.0; k];
        for (i, &(m, tok)) in tokens.iter().enumerate() {
            let c = tok.count as f64;
            let g = &mut gamma[i * k..(i + 1) * k];
            for kk in 0..k {
                buf[kk] = (pseudo[kk] + (n_k[kk] - c * g[kk]).max(0.0)) * phi_at(m, kk, tok.feature);
            }
            normalize_in_place(&mut buf, &patient.patient_id)?;
            g.copy_from_slice(&buf);
            for kk in 0..k {
                next_n[kk] += c * g[kk];
            }
        }
        n_k = next_n;
        let next = loglik(&n_k);
        if !next.is_finite() {
            return Err(Error::NonFinite(format!("held-out likelihood of patient {}", patient.patient_id)));
        }
        trace.push(next);
        let rel = ((next - ll) / ll.abs().max(f64::MIN_POSITIVE)).abs();
        ll = next;
        if rel < cfg.tol {
            break;
        }
    }

    let mut blocks = Vec::with_capacity(patient.n_modalities());
    let mut start = 0;
    for m in 0..patient.n_modalities() {
        let n = patient.tokens(m).len();
        blocks.push((&gamma[start * k..(start + n) * k], patient.tokens(m)));
        start += n;
    }
    let gamma_bar = mean_responsibilities(&blocks, k).expect("patient has tokens");
    let s: f64 = n_k.iter().sum();
    let theta: Vec<f64> = n_k.iter().map(|x| x / s).collect();
    Ok(PredictionResult {
        hazard_ratio: hr(&gamma_bar),
        gamma_bar,
        theta,
        log_marginal: ll,
        n_iters: iters,
        log_marginal_trace: trace,
        empty: false,
    })
}

fn normalize_in_place(g: &mut [f64], patient: &str) -> Result<()> {
    let s: f64 = g.iter().sum();
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::NonFinite(format!("held-out responsibilities of patient {patient}")));
    }
    g.iter_mut().for_each(|x| *x /= s);
    Ok(())
}

/// Guide prior for patients outside the training set, from the stored prior
/// model. The flags mark patients that fell back to 1/K.
pub fn heldout_prior(model: &TrainedModel, corpus: &Corpus) -> Result<(PriorMatrix, Vec<bool>)> {
    let k = model.k();
    let p = corpus.n_patients();
    match (&model.prior_model, &model.guide) {
        (PriorModel::Uniform, _) | (_, None) => Ok((PriorMatrix::uniform(p, k), vec![true; p])),
        (pm, Some(g)) => {
            if g.map.n_phenotypes() != k {
                return Err(Error::Data(format!(
                    "guide map has {} phenotypes but the model has K = {k}",
                    g.map.n_phenotypes()
                )));
            }
            let u = phecode_counts(corpus, &g.map, g.modality)?;
            let (rows, flags): (Vec<Vec<f64>>, Vec<bool>) = (0..p).map(|j| pm.prior_row(u.row(j))).unzip();
            Ok((PriorMatrix::from_rows(rows)?, flags))
        }
    }
}

#[derive(Debug, Clone)]
pub struct RiskPrediction {
    pub patient_id: String,
    pub topics: PredictionResult,
    /// wᵀγ̄ before clipping; ranks patients exactly like the hazard ratio.
    pub linear_predictor: f64,
    pub hazard_ratio: f64,
    pub survival: SurvivalFunction,
}

/// Held-out topics, hazard ratios and survival curves for every patient.
/// `prior` defaults to [`heldout_prior`].
pub fn predict_risk(
    model: &TrainedModel,
    corpus: &Corpus,
    prior: Option<&PriorMatrix>,
    cfg: &PredictConfig,
) -> Result<Vec<RiskPrediction>> {
    let head = model.survival_head()?;
    let computed;
    let prior = match prior {
        Some(p) => p,
        None => {
            computed = heldout_prior(model, corpus)?.0;
            &computed
        }
    };
    if prior.n_patients() != corpus.n_patients() {
        return Err(Error::Data("prior rows do not match the corpus".into()));
    }
    corpus
        .patients()
        .par_iter()
        .enumerate()
        .map(|(j, p)| {
            let topics = infer_heldout_topics(model, p, prior.row(j), cfg)?;
            let hr = hazard_ratio(&head.w, &topics.gamma_bar);
            Ok(RiskPrediction {
                patient_id: p.patient_id.clone(),
                linear_predictor: head.w.iter().zip(&topics.gamma_bar).map(|(a, b)| a * b).sum(),
                hazard_ratio: hr,
                survival: survival_function(&head.baseline, hr)?,
                topics,
            })
        })
        .collect()
}

/// Held-out topics for every patient without requiring a survival head.
pub fn infer_corpus(
    model: &TrainedModel,
    corpus: &Corpus,
    prior: &PriorMatrix,
    cfg: &PredictConfig,
) -> Result<Vec<PredictionResult>> {
    corpus
        .patients()
        .par_iter()
        .enumerate()
        .map(|(j, p)| infer_heldout_topics(model, p, prior.row(j), cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocabulary;
    use crate::inference::{train_with_state, Hyperparams, SurvivalHead, TrainConfig, TrainDiagnostics, Variant};
    use crate::survival::BaselineHazard;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vocab(n: usize) -> Vocabulary {
        Vocabulary::new(0, "dx", (0..n).map(|i| format!("f{i}")).collect()).unwrap()
    }

    fn model(phi: Vec<f64>, k: usize, v: usize, w: Option<Vec<f64>>) -> TrainedModel {
        TrainedModel {
            config: TrainConfig { k, ..Default::default() },
            hyper: Hyperparams {
                alpha: vec![1.0; k],
                beta: vec![vec![1.0; v]],
                a_alpha: 1.0,
                b_alpha: 1.0,
                a_beta: 1.0,
                b_beta: 1.0,
            },
            phi: vec![phi],
            survival: w.map(|w| SurvivalHead {
                w,
                baseline: BaselineHazard { event_times: vec![1.0, 2.0], cumulative: vec![0.3, 0.9] },
                cox_converged: true,
            }),
            prior_model: PriorModel::Uniform,
            guide: None,
            vocabularies: vec![vocab(v)],
            diagnostics: TrainDiagnostics::default(),
        }
    }

    #[test]
    fn single_topic() {
        let m = model(vec![0.5, 0.5], 1, 2, None);
        let p = PatientRecord::new("a", vec![vec![(0, 3), (1, 1)]]);
        let r = infer_heldout_topics(&m, &p, &[1.0], &PredictConfig::default()).unwrap();
        assert_eq!(r.gamma_bar, vec![1.0]);
        assert_eq!(r.theta, vec![1.0]);
        assert_eq!(r.hazard_ratio, None);
    }

    #[test]
    fn exclusive_word_forces_its_topic() {
        // word 0 only exists in topic 1
        let m = model(vec![0.0, 0.5, 0.5, 0.5, 0.25, 0.25], 2, 3, Some(vec![0.0, 1.0]));
        let p = PatientRecord::new("a", vec![vec![(0, 1)]]);
        let r = infer_heldout_topics(&m, &p, &[0.5, 0.5], &PredictConfig::default()).unwrap();
        assert_eq!(r.gamma_bar, vec![0.0, 1.0]);
        assert!((r.hazard_ratio.unwrap() - 1f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn empty_patient_falls_back_to_prior() {
        let mut m = model(vec![0.5, 0.5, 0.5, 0.5], 2, 2, Some(vec![1.0, 0.0]));
        m.hyper.alpha = vec![1.0, 3.0];
        let p = PatientRecord::new("a", vec![vec![]]);
        let r = infer_heldout_topics(&m, &p, &[1.0, 1.0], &PredictConfig::default()).unwrap();
        assert!(r.empty);
        assert_eq!(r.gamma_bar, vec![0.25, 0.75]);
        assert_eq!(r.theta, r.gamma_bar);
        assert!((r.hazard_ratio.unwrap() - 0.25f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn out_of_vocabulary_is_rejected() {
        let m = model(vec![0.5, 0.5], 1, 2, None);
        let p = PatientRecord::new("a", vec![vec![(5, 1)]]);
        assert!(infer_heldout_topics(&m, &p, &[1.0], &PredictConfig::default()).is_err());
    }

    fn random_model(rng: &mut ChaCha8Rng, k: usize, v: usize) -> TrainedModel {
        let mut phi = vec![0.0; k * v];
        for row in phi.chunks_mut(v) {
            row.iter_mut().for_each(|x| *x = rng.random::<f64>().powi(3) + 1e-3);
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
        let mut m = model(phi, k, v, Some((0..k).map(|_| rng.random_range(-2.0..2.0)).collect()));
        m.hyper.alpha = (0..k).map(|_| rng.random_range(0.05..2.0)).collect();
        m
    }

    #[test]
    fn heldout_outputs_are_simplex_deterministic_and_converged() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let k = rng.random_range(2..6);
            let v = rng.random_range(3..15);
            let m = random_model(&mut rng, k, v);
            let toks = (0..rng.random_range(1..30)).map(|_| (rng.random_range(0..v), rng.random_range(1..4))).collect();
            let p = PatientRecord::new("x", vec![toks]);
            let prior: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
            let r = infer_heldout_topics(&m, &p, &prior, &PredictConfig::default()).unwrap();
            let tr = &r.log_marginal_trace;
            let last = (tr[tr.len() - 1] - tr[tr.len() - 2]).abs() / tr[tr.len() - 2].abs();
            assert!(last < 1e-6 || r.n_iters == 200);
            assert!((r.gamma_bar.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((r.theta.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let again = infer_heldout_topics(&m, &p, &prior, &PredictConfig::default()).unwrap();
            assert_eq!(r, again);
        }
    }

    #[test]
    fn risk_ordering_and_zero_weights() {
        let m = model(vec![0.9, 0.1, 0.1, 0.9], 2, 2, Some(vec![0.0, 2.0]));
        let corpus = Corpus::new(
            vec![vocab(2)],
            vec![
                PatientRecord::new("a", vec![vec![(1, 5)]]),
                PatientRecord::new("b", vec![vec![(0, 5)]]),
            ],
        )
        .unwrap();
        let preds = predict_risk(&m, &corpus, None, &PredictConfig::default()).unwrap();
        assert!(preds[0].hazard_ratio > preds[1].hazard_ratio);
        for t in [0.5, 1.0, 1.5, 2.5] {
            assert!(preds[0].survival.at(t) <= preds[1].survival.at(t));
        }
        for p in &preds {
            assert_eq!(p.hazard_ratio, hazard_ratio(&[0.0, 2.0], &p.topics.gamma_bar));
        }
        let zero = model(vec![0.9, 0.1, 0.1, 0.9], 2, 2, Some(vec![0.0, 0.0]));
        for p in predict_risk(&zero, &corpus, None, &PredictConfig::default()).unwrap() {
            assert_eq!(p.survival.at(1.5), (-0.3f64).exp());
        }
        let unsup = model(vec![0.9, 0.1, 0.1, 0.9], 2, 2, None);
        assert!(matches!(
            predict_risk(&unsup, &corpus, None, &PredictConfig::default()),
            Err(Error::NoSurvivalHead)
        ));
    }

    #[test]
    fn training_patient_theta_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let patients: Vec<PatientRecord> = (0..60)
            .map(|j| {
                let base = 4 * (j % 3);
                let toks = (0..40).map(|_| (base + rng.random_range(0..4), 1)).collect();
                PatientRecord::new(format!("p{j:02}"), vec![toks])
            })
            .collect();
        let corpus = Corpus::new(vec![vocab(12)], patients).unwrap();
        let cfg = TrainConfig { k: 3, variant: Variant::Mixehr, max_sweeps: 300, tol: 1e-8, seed: 2, ..Default::default() };
        let (m, state) = train_with_state(&corpus, None, None, &cfg).unwrap();
        let prior = PriorMatrix::uniform(60, 3);
        for j in 0..60 {
            let r = infer_heldout_topics(&m, corpus.patient(j), prior.row(j), &PredictConfig::default()).unwrap();
            let train_theta = state.theta(j).unwrap();
            let tv: f64 = 0.5 * r.theta.iter().zip(&train_theta).map(|(a, b)| (a - b).abs()).sum::<f64>();
            assert!(tv < 0.05, "patient {j}: tv {tv}");
        }
    }
}
