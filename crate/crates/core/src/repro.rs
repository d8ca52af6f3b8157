//! End-to-end runs on simulated data: simulate, split, train, predict, score.

use std::time::Instant;

use pathfinding::prelude::{kuhn_munkres, Matrix};
use serde::{Deserialize, Serialize};

use crate::corpus::{phecode_counts, Corpus, GuideMap, SurvivalOutcome};
use crate::error::{Error, Result};
use crate::evaluate::{coefficient_roc, dynamic_auc_curve, quantile_grid, DynamicAucCurve};
use crate::inference::{train_with_state, GuideSpec, Guidance, SurvivalHead, TrainConfig, TrainedModel, Variant};
use crate::prior::{PriorConfig, PriorMode};
use crate::predict::{predict_risk, PredictConfig};
use crate::simulate::{
    design2_beta, simulate_design1, simulate_design2, split_indices, Design2Inputs, SimConfig1, SimConfig2, SimulatedDataset,
};
use crate::survival::{breslow_baseline, fit_cox_elastic_net};

pub const GRID_POINTS: usize = 37;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design1Run {
    pub sim: SimConfig1,
    pub train: TrainConfig,
    pub test_fraction: f64,
    /// Also train the unsupervised model followed by a separate Cox fit.
    pub with_pipeline: bool,
}

impl Design1Run {
    /// Scaled Design 1: P = 8000·scale patients, K = 100, V = 500, 10 planted
    /// coefficients, trained with the supervised unguided variant.
    pub fn scaled(scale: f64, seed: u64) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::Config("scale must be positive".into()));
        }
        let sim = SimConfig1 {
            p: ((8000.0 * scale).round() as usize).max(10),
            k: 100,
            v: 500,
            n_nonzero: 10,
            seed,
            ..SimConfig1::default()
        };
        let train = TrainConfig {
            k: sim.k,
            variant: Variant::MixehrSurv,
            seed,
            ..TrainConfig::default()
        };
        Ok(Design1Run {
            sim,
            train,
            test_fraction: 0.2,
            with_pipeline: false,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design1Report {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub grid: Vec<f64>,
    pub auc: DynamicAucCurve,
    /// Same grid, equal risk scores credited ½ instead of 1.
    pub auc_tie_half: f64,
    pub distinct_risk_scores: usize,
    /// ROC area of |ŵ| (after topic alignment) against the planted support.
    pub coefficient_roc_area: f64,
    pub mean_abs_w_true_support: f64,
    /// AUC of the true z̄ and true w on the test patients.
    pub oracle_auc: f64,
    pub pipeline: Option<PipelineScore>,
    pub n_sweeps: usize,
    pub converged: bool,
    pub seconds: f64,
}

/// Test-set scores of the unsupervised-topics-then-Cox baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineScore {
    pub auc: f64,
    pub auc_tie_half: f64,
    pub distinct_risk_scores: usize,
}

struct TestScore {
    curve: DynamicAucCurve,
    tie_half: f64,
    distinct: usize,
}

/// Matches learned topics to true topics by maximum total cosine similarity
/// of the topic-word rows. Returns, for every true topic, the learned index.
pub fn align_topics(learned: &[f64], truth: &[Vec<f64>], v: usize) -> Vec<usize> {
    let k = truth.len();
    let unit = |row: &[f64]| -> Vec<f64> {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter().map(|x| x / n).collect()
    };
    let learned: Vec<Vec<f64>> = (0..k).map(|i| unit(&learned[i * v..(i + 1) * v])).collect();
    let truth: Vec<Vec<f64>> = truth.iter().map(|r| unit(r)).collect();
    let mut weights = Matrix::new(k, k, 0i64);
    for a in 0..k {
        for b in 0..k {
            let cos: f64 = truth[a].iter().zip(&learned[b]).map(|(x, y)| x * y).sum();
            weights[(a, b)] = (cos * 1e12).round() as i64;
        }
    }
    kuhn_munkres(&weights).1
}

fn subset_outcomes(all: &[SurvivalOutcome], idx: &[usize]) -> Vec<SurvivalOutcome> {
    idx.iter().map(|&j| all[j].clone()).collect()
}

fn test_auc(model: &TrainedModel, data: &SimulatedDataset, test: &[usize], grid: &[f64]) -> Result<TestScore> {
    let corpus = data.corpus.subset(test);
    let preds = predict_risk(model, &corpus, None, &PredictConfig::default())?;
    // the linear predictor orders patients like the HR without the exp clip
    let lin: Vec<f64> = preds.iter().map(|p| p.linear_predictor).collect();
    let times: Vec<f64> = test.iter().map(|&j| data.outcomes[j].time).collect();
    let mut sorted = lin.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    sorted.dedup();
    Ok(TestScore {
        curve: dynamic_auc_curve(&times, &lin, grid, false)?,
        tie_half: dynamic_auc_curve(&times, &lin, grid, true)?.mean_auc,
        distinct: sorted.len(),
    })
}

/// Unsupervised topics on the training set, then a separate Cox fit on their γ̄.
fn pipeline_model(data: &SimulatedDataset, train_idx: &[usize], cfg: &TrainConfig) -> Result<TrainedModel> {
    let corpus = data.corpus.subset(train_idx);
    let outcomes = subset_outcomes(&data.outcomes, train_idx);
    let unsup = TrainConfig {
        variant: Variant::Mixehr,
        ..cfg.clone()
    };
    let (mut model, state) = train_with_state(&corpus, None, None, &unsup)?;
    let keep: Vec<usize> = (0..corpus.n_patients()).filter(|&j| !corpus.patient(j).is_empty()).collect();
    let features: Vec<Vec<f64>> = keep.iter().map(|&j| state.gamma_bar(j).to_vec()).collect();
    let out: Vec<SurvivalOutcome> = keep.iter().map(|&j| outcomes[j].clone()).collect();
    let fit = fit_cox_elastic_net(&features, &out, &cfg.cox())?;
    let baseline = breslow_baseline(&features, &out, &fit.w)?;
    model.survival = Some(SurvivalHead {
        w: fit.w,
        baseline,
        cox_converged: fit.converged,
    });
    Ok(model)
}

pub fn run_design1(run: &Design1Run) -> Result<Design1Report> {
    let start = Instant::now();
    let data = simulate_design1(&run.sim)?;
    let (train_idx, test_idx) = split_indices(data.corpus.n_patients(), run.test_fraction, run.sim.seed);
    let test_times: Vec<f64> = test_idx.iter().map(|&j| data.outcomes[j].time).collect();
    let grid = quantile_grid(&test_times, GRID_POINTS);

    let train_corpus = data.corpus.subset(&train_idx);
    let train_out = subset_outcomes(&data.outcomes, &train_idx);
    let (model, _) = train_with_state(&train_corpus, Some(&train_out), None, &run.train)?;
    let scored = test_auc(&model, &data, &test_idx, &grid)?;

    let head = model.survival_head()?;
    let map = align_topics(&model.phi[0], &data.truth.phi, run.sim.v);
    let w_aligned: Vec<f64> = map.iter().map(|&learned| head.w[learned]).collect();
    let support = data.truth.support();
    let roc = coefficient_roc(&w_aligned, &support, false)?;
    let tp: Vec<f64> = w_aligned.iter().zip(&support).filter(|(_, &s)| s).map(|(w, _)| w.abs()).collect();

    let oracle_lin: Vec<f64> = test_idx
        .iter()
        .map(|&j| data.truth.w.iter().zip(&data.truth.zbar[j]).map(|(a, b)| a * b).sum())
        .collect();
    let oracle_auc = dynamic_auc_curve(&test_times, &oracle_lin, &grid, false)?.mean_auc;

    let pipeline = if run.with_pipeline {
        let m = pipeline_model(&data, &train_idx, &run.train)?;
        let s = test_auc(&m, &data, &test_idx, &grid)?;
        Some(PipelineScore {
            auc: s.curve.mean_auc,
            auc_tie_half: s.tie_half,
            distinct_risk_scores: s.distinct,
        })
    } else {
        None
    };

    Ok(Design1Report {
        seed: run.sim.seed,
        n_train: train_idx.len(),
        n_test: test_idx.len(),
        grid,
        coefficient_roc_area: roc.area,
        mean_abs_w_true_support: tp.iter().sum::<f64>() / tp.len() as f64,
        oracle_auc,
        pipeline,
        n_sweeps: model.diagnostics.n_sweeps,
        converged: model.diagnostics.converged,
        auc: scored.curve,
        auc_tie_half: scored.tie_half,
        distinct_risk_scores: scored.distinct,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Guide probabilities for `corpus` from its guide-modality phenotype counts.
pub fn build_guidance(corpus: &Corpus, guide: &GuideMap, modality: usize, mode: PriorMode, cfg: &PriorConfig) -> Result<Guidance> {
    let u = phecode_counts(corpus, guide, modality)?;
    let model = mode.fit(&u, cfg)?;
    Ok(Guidance {
        matrix: model.apply(&u),
        model,
        guide: Some(GuideSpec {
            map: guide.clone(),
            modality,
        }),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design2Run {
    pub sim: SimConfig2,
    pub train: TrainConfig,
    pub prior_mode: PriorMode,
    pub test_fraction: f64,
}

impl Design2Run {
    pub fn new(seed: u64) -> Self {
        Design2Run {
            sim: SimConfig2 { seed, ..SimConfig2::default() },
            train: TrainConfig {
                variant: Variant::MixehrSurg,
                seed,
                ..TrainConfig::default()
            },
            prior_mode: PriorMode::Mixture,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design2Report {
    pub seed: u64,
    pub k: usize,
    /// Distinct β values used to draw φ.
    pub beta_values: Vec<f64>,
    pub n_nonzero: usize,
    pub expected_nonzero: usize,
    pub flagged: Vec<String>,
    pub n_train: usize,
    pub n_test: usize,
    pub auc: Option<DynamicAucCurve>,
    pub auc_tie_half: Option<f64>,
    pub coefficient_roc_area: Option<f64>,
    pub oracle_auc: Option<f64>,
    pub seconds: f64,
}

/// Simulates Design 2 and, when `train` is set, fits the guided supervised
/// model on 80% and scores the rest. Topics are phenotypes, so no alignment.
pub fn run_design2(inputs: &Design2Inputs, run: &Design2Run, train: bool) -> Result<Design2Report> {
    let start = Instant::now();
    let data = simulate_design2(inputs, &run.sim)?;
    let k = inputs.n_topics();
    let (_, beta) = design2_beta(inputs, run.sim.beta_scale, run.sim.beta_offset);
    let mut beta_values: Vec<f64> = beta.into_iter().flatten().collect();
    beta_values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    beta_values.dedup();
    let mut report = Design2Report {
        seed: run.sim.seed,
        k,
        beta_values,
        n_nonzero: data.truth.w.iter().filter(|&&x| x != 0.0).count(),
        expected_nonzero: (run.sim.nonzero_fraction * k as f64).round() as usize,
        flagged: data.flagged.clone(),
        n_train: 0,
        n_test: 0,
        auc: None,
        auc_tie_half: None,
        coefficient_roc_area: None,
        oracle_auc: None,
        seconds: 0.0,
    };
    if train {
        let (train_idx, test_idx) = split_indices(data.corpus.n_patients(), run.test_fraction, run.sim.seed);
        let test_times: Vec<f64> = test_idx.iter().map(|&j| data.outcomes[j].time).collect();
        let grid = quantile_grid(&test_times, GRID_POINTS);
        let train_corpus = data.corpus.subset(&train_idx);
        let train_out = subset_outcomes(&data.outcomes, &train_idx);
        let guidance = build_guidance(&train_corpus, &inputs.guide, 0, run.prior_mode, &PriorConfig::default())?;
        let cfg = TrainConfig { k, ..run.train.clone() };
        let (model, _) = train_with_state(&train_corpus, Some(&train_out), Some(&guidance), &cfg)?;
        let scored = test_auc(&model, &data, &test_idx, &grid)?;
        let support = data.truth.support();
        report.coefficient_roc_area = coefficient_roc(&model.survival_head()?.w, &support, false).ok().map(|r| r.area);
        let oracle_lin: Vec<f64> = test_idx
            .iter()
            .map(|&j| data.truth.w.iter().zip(&data.truth.zbar[j]).map(|(a, b)| a * b).sum())
            .collect();
        report.oracle_auc = Some(dynamic_auc_curve(&test_times, &oracle_lin, &grid, false)?.mean_auc);
        report.auc_tie_half = Some(scored.tie_half);
        report.auc = Some(scored.curve);
        report.n_train = train_idx.len();
        report.n_test = test_idx.len();
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}
