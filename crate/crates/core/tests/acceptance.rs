//! Acceptance criteria. Prints one PASS/FAIL line per criterion. Criteria 1–3
//! are statistical targets of the scaled simulation and are reported as
//! measured; criteria 4–6 are hard invariants and abort the run on failure.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use survtopic::corpus::{Corpus, PatientRecord, SurvivalOutcome, Vocabulary};
use survtopic::evaluate::{binary_mutual_information, dynamic_auc, dynamic_auc_brute_force, kaplan_meier, log_rank_test};
use survtopic::inference::{train, TrainConfig, Trainer, Variant};
use survtopic::model_io::{load_model, save_model};
use survtopic::predict::{heldout_prior, infer_heldout_topics, PredictConfig};
use survtopic::prior::{fit_gaussian_mixture, fit_poisson_mixture, EmConfig};
use survtopic::repro::{run_design1, run_design2, Design1Report, Design1Run, Design2Run};
use survtopic::simulate::{sample_survival_times, standin_design2_inputs};
use survtopic::survival::{breslow_baseline, outcomes_from, partial_log_likelihood, partial_score};

fn report(id: u32, pass: bool, detail: &str) {
    println!("criterion {id}: {} {detail}", if pass { "PASS" } else { "FAIL" });
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

const DESIGN1_SEEDS: u64 = 10;

fn design1_reports() -> Vec<Design1Report> {
    (1..=DESIGN1_SEEDS)
        .into_par_iter()
        .map(|seed| {
            let mut run = Design1Run::scaled(0.25, seed).expect("config");
            run.with_pipeline = true;
            run_design1(&run).expect("design 1 run")
        })
        .collect()
}

fn design1_criteria() {
    let start = Instant::now();
    let reports = design1_reports();
    for r in &reports {
        let p = r.pipeline.as_ref().expect("pipeline");
        println!(
            "  seed {:>2}: auc {:.4} (tie-half {:.4}, {} distinct) | pipeline {:.4} (tie-half {:.4}, {} distinct) | oracle {:.4} | roc {:.4} | mean|w| {:.3} | sweeps {}",
            r.seed,
            r.auc.mean_auc,
            r.auc_tie_half,
            r.distinct_risk_scores,
            p.auc,
            p.auc_tie_half,
            p.distinct_risk_scores,
            r.oracle_auc,
            r.coefficient_roc_area,
            r.mean_abs_w_true_support,
            r.n_sweeps
        );
        assert!(r.auc.mean_auc.is_finite() && r.coefficient_roc_area.is_finite());
        assert_eq!(r.grid.len(), 37);
    }
    let auc = mean(reports.iter().map(|r| r.auc.mean_auc));
    let oracle = mean(reports.iter().map(|r| r.oracle_auc));
    report(
        1,
        auc >= 0.80,
        &format!(
            "mean test AUC {auc:.4} over {} seeds (target >= 0.80; oracle with true topics and true w {oracle:.4})",
            reports.len()
        ),
    );

    let roc = mean(reports.iter().map(|r| r.coefficient_roc_area));
    let shrink = mean(reports.iter().map(|r| r.mean_abs_w_true_support));
    report(
        2,
        roc >= 0.95 && shrink > 0.0 && shrink < 6.0,
        &format!("coefficient ROC area {roc:.4} (target >= 0.95); mean |w| on true support {shrink:.3} (target in (0, 6))"),
    );

    let wins = reports.iter().filter(|r| r.auc.mean_auc >= r.pipeline.as_ref().unwrap().auc).count();
    let wins_half = reports
        .iter()
        .filter(|r| r.auc_tie_half >= r.pipeline.as_ref().unwrap().auc_tie_half)
        .count();
    let pipe = mean(reports.iter().map(|r| r.pipeline.as_ref().unwrap().auc));
    report(
        3,
        wins >= 7,
        &format!(
            "joint >= pipeline in {wins}/{} seeds (target >= 7); pipeline mean AUC {pipe:.4}; with ties scored 1/2: {wins_half}/{}",
            reports.len(),
            reports.len()
        ),
    );
    println!("  design 1 wall time {:.1}s", start.elapsed().as_secs_f64());
}

/// LDA-generated corpus with sparse topics, so topic structure exists.
fn lda_corpus(seed: u64, p: usize, k: usize, v: usize, tokens: usize) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_topic = v / k;
    let vocab = Vocabulary::new(0, "dx", (0..v).map(|i| format!("f{i:03}")).collect()).unwrap();
    let patients = (0..p)
        .map(|j| {
            let main = rng.random_range(0..k);
            let mut counts = vec![0u32; v];
            for _ in 0..tokens {
                let topic = if rng.random::<f64>() < 0.8 { main } else { rng.random_range(0..k) };
                counts[topic * per_topic + rng.random_range(0..per_topic)] += 1;
            }
            let pairs = counts.iter().enumerate().filter(|(_, &c)| c > 0).map(|(f, &c)| (f, c)).collect();
            PatientRecord::new(format!("P{j:04}"), vec![pairs])
        })
        .collect();
    Corpus::new(vec![vocab], patients).unwrap()
}

fn random_outcomes(corpus: &Corpus, seed: u64) -> Vec<SurvivalOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    corpus
        .patients()
        .iter()
        .map(|p| SurvivalOutcome {
            patient_id: p.patient_id.clone(),
            time: rng.random_range(0.1..10.0),
            event: rng.random::<f64>() < 0.7,
        })
        .collect()
}

fn check(name: &str, ok: bool, failures: &mut Vec<String>) {
    println!("  {} {name}", if ok { "ok  " } else { "FAIL" });
    if !ok {
        failures.push(name.to_string());
    }
}

fn sweeps_keep_invariants(corpus: &Corpus, outcomes: &[SurvivalOutcome]) -> (bool, bool, f64) {
    let cfg = TrainConfig {
        k: 4,
        variant: Variant::MixehrSurv,
        max_sweeps: 15,
        seed: 5,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(corpus, Some(outcomes), None, &cfg).unwrap();
    let (mut normalized, mut reconciled) = (true, true);
    for _ in 0..cfg.max_sweeps {
        trainer.sweep().unwrap();
        let s = trainer.state();
        let mut n_wk = vec![vec![0.0; cfg.k]; corpus.vocabulary(0).size()];
        for (j, p) in corpus.patients().iter().enumerate() {
            let mut n_jk = vec![0.0; cfg.k];
            for (t, tok) in p.tokens(0).iter().enumerate() {
                let g = s.gamma(0, j, t);
                normalized &= (g.iter().sum::<f64>() - 1.0).abs() < 1e-10 && g.iter().all(|&x| x >= 0.0);
                for k in 0..cfg.k {
                    n_wk[tok.feature][k] += tok.count as f64 * g[k];
                    n_jk[k] += tok.count as f64 * g[k];
                }
            }
            reconciled &= n_jk.iter().zip(s.n_jk(j)).all(|(a, b)| (a - b).abs() < 1e-8);
        }
        for (v, row) in n_wk.iter().enumerate() {
            reconciled &= row.iter().zip(s.n_wk(0, v)).all(|(a, b)| (a - b).abs() < 1e-8);
        }
    }
    let trace = trainer.likelihood_trace();
    let worst_drop = trace.windows(2).map(|w| (w[0] - w[1]) / w[0].abs()).fold(0.0f64, f64::max);
    (normalized, reconciled, worst_drop)
}

fn files_equal(a: &Path, b: &Path, skip: &str) -> bool {
    let mut names: Vec<_> = fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    !names.is_empty()
        && names
            .iter()
            .filter(|n| n.to_str() != Some(skip))
            .all(|n| fs::read(a.join(n)).ok() == fs::read(b.join(n)).ok())
}

fn criterion4_invariant_suites() {
    let mut failures = Vec::new();

    let corpus = lda_corpus(11, 60, 4, 40, 50);
    let outcomes = random_outcomes(&corpus, 12);
    let (normalized, reconciled, worst_drop) = sweeps_keep_invariants(&corpus, &outcomes);
    check("gamma rows on the simplex after every sweep", normalized, &mut failures);
    check("statistics reconcile with gamma after every sweep", reconciled, &mut failures);
    check(&format!("likelihood proxy monotone within 1e-4 (worst relative drop {worst_drop:.2e})"), worst_drop <= 1e-4, &mut failures);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let counts: Vec<u64> = (0..300).map(|i| if i % 3 == 0 { rng.random_range(5..15) } else { rng.random_range(0..2) }).collect();
    let em = EmConfig::default();
    let monotone = |trace: &[f64]| trace.windows(2).all(|w| w[1] >= w[0] - 1e-9 * w[0].abs());
    let poisson = fit_poisson_mixture(&counts, &em);
    let gauss = fit_gaussian_mixture(&counts, &em);
    check("EM log-likelihood non-decreasing (Poisson and Gaussian)", monotone(&poisson.log_likelihood_trace) && monotone(&gauss.log_likelihood_trace), &mut failures);

    let times = [2.0, 1.0, 3.0, 3.0, 5.0, 4.0];
    let events = [true, true, false, true, true, false];
    let out = outcomes_from(&times, &events);
    let feats = vec![vec![0.3, 0.7]; times.len()];
    let base = breslow_baseline(&feats, &out, &[0.0, 0.0]).unwrap();
    // Nelson–Aalen: d/n at 1, 2, 3, 5 with risk sets 6, 5, 4, 1
    let na = [1.0 / 6.0, 1.0 / 6.0 + 1.0 / 5.0, 1.0 / 6.0 + 1.0 / 5.0 + 1.0 / 4.0, 1.0 / 6.0 + 1.0 / 5.0 + 1.0 / 4.0 + 1.0];
    let ok = [1.0, 2.0, 3.0, 5.0].iter().zip(na).all(|(&t, h)| (base.cumulative_at(t) - h).abs() < 1e-12);
    check("Breslow equals Nelson–Aalen at w = 0", ok, &mut failures);

    let n = 40;
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect();
    let tt: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
    let ee: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.6).collect();
    let out = outcomes_from(&tt, &ee);
    let w = [0.4, -1.1, 0.7];
    let score = partial_score(&x, &out, &w).unwrap();
    let ok = (0..3).all(|i| {
        let h = 1e-6;
        let (mut up, mut dn) = (w, w);
        up[i] += h;
        dn[i] -= h;
        let fd = (partial_log_likelihood(&x, &out, &up).unwrap() - partial_log_likelihood(&x, &out, &dn).unwrap()) / (2.0 * h);
        (fd - score[i]).abs() <= 1e-4 * score[i].abs().max(1e-8)
    });
    check("Cox score matches central differences within 1e-4 relative", ok, &mut failures);

    let mut agree = true;
    for _ in 0..1000 {
        let n = rng.random_range(2..40);
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(0..10) as f64).collect();
        let hr: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
        let at = rng.random_range(0..10) as f64 + 0.5;
        for half in [false, true] {
            agree &= dynamic_auc(&t, &hr, at, half) == dynamic_auc_brute_force(&t, &hr, at, half);
        }
    }
    check("dynamic AUC fast equals brute force on 1000 random instances", agree, &mut failures);

    let km = kaplan_meier(&[1.0, 2.0, 2.0, 3.0], &[true, true, false, true]).unwrap();
    let km_ok = (km.at(1.0) - 0.75).abs() < 1e-15 && (km.at(2.0) - 0.5).abs() < 1e-15 && km.at(3.0) == 0.0;
    let lr = log_rank_test(&[1.0, 2.0, 3.0], &[true; 3], &[4.0, 5.0, 6.0], &[true; 3]).unwrap();
    check("Kaplan–Meier and log-rank hand cases", km_ok && (lr.chi_square - 1369.0 / 271.0).abs() < 1e-12, &mut failures);

    // 2×2 table [[3, 1], [1, 3]] over 8 patients
    let xs = [false, false, false, false, true, true, true, true];
    let ys = [false, false, false, true, false, true, true, true];
    let mi_oracle = 2.0 * (3.0 / 8.0) * (1.5f64).ln() + 2.0 * (1.0 / 8.0) * (0.5f64).ln();
    check("mutual information matches the contingency oracle", (binary_mutual_information(&xs, &ys) - mi_oracle).abs() < 1e-14, &mut failures);

    let cfg = TrainConfig {
        k: 4,
        variant: Variant::MixehrSurv,
        max_sweeps: 8,
        seed: 9,
        ..TrainConfig::default()
    };
    let model = train(&corpus, Some(&outcomes), None, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_model(&model, dir.path()).unwrap();
    let back = load_model(dir.path()).unwrap();
    let bits = back.phi.iter().flatten().zip(model.phi.iter().flatten()).all(|(a, b)| a.to_bits() == b.to_bits());
    check("serialization round trip is bit-exact", back == model && bits, &mut failures);

    let runs: Vec<_> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for d in &runs {
        let sim = d.path().join("sim");
        let model_dir = d.path().join("model");
        let s = |p: &Path| p.to_str().unwrap().to_string();
        let args = [
            "survtopic", "--seed", "4", "--log-level", "warn", "simulate", "--design", "1", "--patients", "120", "--topics", "6",
            "--vocab-size", "60", "--nonzero", "2", "--out",
        ];
        assert_eq!(survtopic::cli::run(args.iter().map(|a| a.to_string()).chain([s(&sim)])), 0);
        let train_args = [
            "survtopic".to_string(), "--seed".into(), "4".into(), "--log-level".into(), "warn".into(), "train".into(),
            "--vocab".into(), s(&sim.join("vocab.tsv")), "--corpus".into(), s(&sim.join("corpus.tsv")),
            "--survival".into(), s(&sim.join("survival.tsv")), "--variant".into(), "mixehr_surv".into(),
            "--topics".into(), "6".into(), "--max-sweeps".into(), "6".into(), "--out".into(), s(&model_dir),
        ];
        assert_eq!(survtopic::cli::run(train_args), 0);
    }
    let same = ["sim", "model"]
        .iter()
        .all(|sub| files_equal(&runs[0].path().join(sub), &runs[1].path().join(sub), "run_manifest.json"));
    check("seed determinism: byte-identical reruns", same, &mut failures);

    // reported, not part of the criterion: the held-out loop is not a likelihood ascent
    let (prior, _) = heldout_prior(&model, &corpus).unwrap();
    let worst = corpus
        .patients()
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let r = infer_heldout_topics(&model, p, prior.row(j), &PredictConfig::default()).unwrap();
            r.log_marginal_trace.windows(2).map(|w| (w[0] - w[1]) / w[0].abs()).fold(0.0f64, f64::max)
        })
        .fold(0.0f64, f64::max);
    println!("  note held-out log-likelihood worst relative drop {worst:.2e} (not monotone; see README)");

    report(4, failures.is_empty(), &format!("{} invariant failures", failures.len()));
    assert!(failures.is_empty(), "invariants failed: {failures:?}");
}

fn criterion5_design2_mechanics() {
    let start = Instant::now();
    let inputs = standin_design2_inputs(50, 5, 2000, 80.0, 7).unwrap();
    let r = run_design2(&inputs, &Design2Run::new(7), false).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let expected = (0.10 * r.k as f64).round() as usize;
    let pass = r.beta_values == [0.6, 3.6] && r.n_nonzero == expected && r.expected_nonzero == expected && secs < 60.0;
    report(
        5,
        pass,
        &format!("K = {}, beta values {:?}, nonzero w {}/{expected}, {secs:.1}s", r.k, r.beta_values, r.n_nonzero),
    );
    assert!(pass);
}

fn criterion6_survival_sampler_ks() {
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let zbar = vec![vec![0.5, 0.5]; n];
    let mut t = sample_survival_times(&zbar, &[0.0, 0.0], 1.0, &mut rng).unwrap();
    t.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let ks = t
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = 1.0 - (-x).exp();
            (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
        })
        .fold(0.0f64, f64::max);
    report(6, ks < 0.02, &format!("KS statistic {ks:.5} vs Exponential(1) at n = {n} (target < 0.02)"));
    assert!(ks < 0.02);
}

fn main() {
    criterion4_invariant_suites();
    criterion5_design2_mechanics();
    criterion6_survival_sampler_ks();
    design1_criteria();
}
