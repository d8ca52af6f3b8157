//! Synthetic corpora with planted survival signal.
//!
//! Design 1 draws everything from Gamma/Dirichlet priors over a single
//! modality. Design 2 anchors each topic to the features a guide map assigns
//! to it and takes per-patient topic mixtures and document lengths from files.
//! Both sample times by inverting a constant baseline hazard.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use crate::corpus::{load_guide_map, Corpus, GuideMap, PatientRecord, SurvivalOutcome, Vocabulary};
use crate::error::{Error, Result};
use crate::survival::LINPRED_CLIP;
use crate::tsv::{self, TsvWriter};

pub const FREQUENCY_HEADER: [&str; 3] = ["patient_id", "phenotype_id", "frequency"];
pub const RECORD_COUNT_HEADER: [&str; 2] = ["patient_id", "n_tokens"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig1 {
    pub v: usize,
    pub k: usize,
    pub p: usize,
    pub tokens_per_patient: usize,
    pub n_nonzero: usize,
    pub w_value: f64,
    pub alpha_shape: f64,
    pub alpha_scale: f64,
    pub beta_shape: f64,
    pub beta_scale: f64,
    pub lambda_baseline: f64,
    /// Rate of independent exponential censoring; None keeps every event.
    pub censoring_rate: Option<f64>,
    pub seed: u64,
}

impl Default for SimConfig1 {
    fn default() -> Self {
        SimConfig1 {
            v: 1000,
            k: 500,
            p: 8000,
            tokens_per_patient: 100,
            n_nonzero: 50,
            w_value: 6.0,
            alpha_shape: 10.0,
            alpha_scale: 1.0,
            beta_shape: 2.0,
            beta_scale: 500.0,
            lambda_baseline: 1.0,
            censoring_rate: None,
            seed: 0,
        }
    }
}

impl SimConfig1 {
    pub fn validate(&self) -> Result<()> {
        if self.v == 0 || self.k == 0 || self.p == 0 || self.tokens_per_patient == 0 {
            return Err(Error::Config("V, K, P and tokens per patient must be positive".into()));
        }
        if self.n_nonzero > self.k {
            return Err(Error::Config(format!(
                "{} nonzero coefficients requested but K = {}",
                self.n_nonzero, self.k
            )));
        }
        for (name, x) in [
            ("alpha shape", self.alpha_shape),
            ("alpha scale", self.alpha_scale),
            ("beta shape", self.beta_shape),
            ("beta scale", self.beta_scale),
            ("lambda", self.lambda_baseline),
        ] {
            if !(x > 0.0 && x.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        check_censoring(self.censoring_rate)
    }
}

fn check_censoring(rate: Option<f64>) -> Result<()> {
    match rate {
        Some(r) if !(r > 0.0 && r.is_finite()) => Err(Error::Config("censoring rate must be positive".into())),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig2 {
    pub beta_scale: f64,
    pub beta_offset: f64,
    pub nonzero_fraction: f64,
    pub w_value: f64,
    /// When set, θ_j ~ Dir(c · normalized frequencies) instead of the frequencies themselves.
    pub dirichlet_concentration: Option<f64>,
    pub lambda_baseline: f64,
    pub censoring_rate: Option<f64>,
    pub seed: u64,
}

impl Default for SimConfig2 {
    fn default() -> Self {
        SimConfig2 {
            beta_scale: 3.0,
            beta_offset: 0.6,
            nonzero_fraction: 0.10,
            w_value: 6.0,
            dirichlet_concentration: None,
            lambda_baseline: 1.0,
            censoring_rate: None,
            seed: 0,
        }
    }
}

/// Ground truth behind a simulated corpus. Patient rows follow corpus order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub w: Vec<f64>,
    pub alpha: Vec<f64>,
    /// K×V topic-word distributions.
    pub phi: Vec<Vec<f64>>,
    pub theta: Vec<Vec<f64>>,
    /// Empirical topic proportions from the sampled assignments.
    pub zbar: Vec<Vec<f64>>,
    /// Topic assignment of every sampled token, in sampling order.
    pub z: Vec<Vec<u32>>,
}

impl GroundTruth {
    pub fn support(&self) -> Vec<bool> {
        self.w.iter().map(|&x| x != 0.0).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedDataset {
    pub corpus: Corpus,
    pub outcomes: Vec<SurvivalOutcome>,
    pub truth: GroundTruth,
    /// Patients whose topic mixture fell back to uniform (Design 2 only).
    pub flagged: Vec<String>,
}

/// Normalized Gamma draws. Entries with zero concentration stay zero; if every
/// draw underflows, the mass goes to one index chosen by the generator.
pub fn sample_dirichlet<R: Rng + ?Sized>(rng: &mut R, conc: &[f64]) -> Vec<f64> {
    let mut x: Vec<f64> = conc
        .iter()
        .map(|&a| if a > 0.0 { Gamma::new(a, 1.0).expect("positive shape").sample(rng) } else { 0.0 })
        .collect();
    let s: f64 = x.iter().sum();
    if s > 0.0 {
        x.iter_mut().for_each(|v| *v /= s);
    } else {
        let live: Vec<usize> = (0..conc.len()).filter(|&i| conc[i] > 0.0).collect();
        let pick = live[rng.random_range(0..live.len())];
        x.iter_mut().enumerate().for_each(|(i, v)| *v = (i == pick) as u8 as f64);
    }
    x
}

/// T = −ln(U)·exp(−lin)/λ, the inverse of S(t) = exp(−λt·exp(lin)) at U.
pub fn survival_time_from_uniform(u: f64, linear_predictor: f64, lambda: f64) -> f64 {
    -u.ln() * (-linear_predictor.clamp(-LINPRED_CLIP, LINPRED_CLIP)).exp() / lambda
}

pub fn sample_survival_times<R: Rng + ?Sized>(zbar: &[Vec<f64>], w: &[f64], lambda: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Config("baseline hazard rate must be positive".into()));
    }
    Ok(zbar
        .iter()
        .map(|z| {
            let lin: f64 = w.iter().zip(z).map(|(a, b)| a * b).sum();
            let mut u: f64 = rng.random();
            while u == 0.0 {
                u = rng.random();
            }
            survival_time_from_uniform(u, lin, lambda)
        })
        .collect())
}

fn outcomes_for<R: Rng + ?Sized>(
    ids: &[String],
    times: Vec<f64>,
    censoring: Option<f64>,
    rng: &mut R,
) -> Vec<SurvivalOutcome> {
    let cens = censoring.map(|r| Exp::new(r).expect("validated rate"));
    ids.iter()
        .zip(times)
        .map(|(id, t)| {
            let (time, event) = match &cens {
                Some(d) => {
                    let c: f64 = d.sample(rng);
                    if c < t && c > 0.0 { (c, false) } else { (t, true) }
                }
                None => (t, true),
            };
            SurvivalOutcome {
                patient_id: id.clone(),
                time,
                event,
            }
        })
        .collect()
}

fn patient_ids(p: usize) -> Vec<String> {
    let width = p.to_string().len().max(4);
    (0..p).map(|j| format!("P{j:0width$}")).collect()
}

/// Samples a document of `n` tokens; returns the raw features and topic labels.
fn sample_document<R: Rng + ?Sized>(
    rng: &mut R,
    theta: &[f64],
    topic_words: &[WeightedIndex<f64>],
    n: usize,
) -> (Vec<usize>, Vec<u32>) {
    let topics = WeightedIndex::new(theta).expect("θ is a distribution");
    let mut words = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    for _ in 0..n {
        let k = topics.sample(rng);
        words.push(topic_words[k].sample(rng));
        z.push(k as u32);
    }
    (words, z)
}

fn zbar_of(z: &[u32], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; k];
    if z.is_empty() {
        return vec![1.0 / k as f64; k];
    }
    for &t in z {
        out[t as usize] += 1.0;
    }
    let n = z.len() as f64;
    out.iter_mut().for_each(|x| *x /= n);
    out
}

fn planted_weights<R: Rng + ?Sized>(rng: &mut R, k: usize, n_nonzero: usize, value: f64) -> Vec<f64> {
    let mut w = vec![0.0; k];
    for i in sample_indices(rng, k, n_nonzero) {
        w[i] = value;
    }
    w
}

struct Assembled {
    vocab: Vocabulary,
    ids: Vec<String>,
    phi: Vec<Vec<f64>>,
    thetas: Vec<Vec<f64>>,
    lengths: Vec<usize>,
    w: Vec<f64>,
    alpha: Vec<f64>,
    lambda: f64,
    censoring: Option<f64>,
}

fn assemble<R: Rng + ?Sized>(a: Assembled, rng: &mut R) -> Result<(Corpus, Vec<SurvivalOutcome>, GroundTruth)> {
    let k = a.phi.len();
    let topic_words: Vec<WeightedIndex<f64>> = a
        .phi
        .iter()
        .map(|row| WeightedIndex::new(row).map_err(|e| Error::Degenerate(format!("topic distribution: {e}"))))
        .collect::<Result<_>>()?;
    // truth rows follow the corpus, which orders patients by id
    let mut order: Vec<usize> = (0..a.ids.len()).collect();
    order.sort_by(|&x, &y| a.ids[x].cmp(&a.ids[y]));
    let ids: Vec<String> = order.iter().map(|&j| a.ids[j].clone()).collect();
    let thetas: Vec<Vec<f64>> = order.iter().map(|&j| a.thetas[j].clone()).collect();
    let mut patients = Vec::with_capacity(ids.len());
    let mut z_all = Vec::with_capacity(ids.len());
    let mut zbar = Vec::with_capacity(ids.len());
    for (i, &j) in order.iter().enumerate() {
        let (id, theta, n) = (&ids[i], &thetas[i], a.lengths[j]);
        let (words, z) = sample_document(rng, theta, &topic_words, n);
        patients.push(PatientRecord::new(id.clone(), vec![words.into_iter().map(|v| (v, 1)).collect()]));
        zbar.push(zbar_of(&z, k));
        z_all.push(z);
    }
    let times = sample_survival_times(&zbar, &a.w, a.lambda, rng)?;
    let outcomes = outcomes_for(&ids, times, a.censoring, rng);
    let corpus = Corpus::new(vec![a.vocab], patients)?;
    let truth = GroundTruth {
        w: a.w,
        alpha: a.alpha,
        phi: a.phi,
        theta: thetas,
        zbar,
        z: z_all,
    };
    Ok((corpus, outcomes, truth))
}

pub fn simulate_design1(cfg: &SimConfig1) -> Result<SimulatedDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ga = Gamma::new(cfg.alpha_shape, cfg.alpha_scale).map_err(|e| Error::Config(e.to_string()))?;
    let gb = Gamma::new(cfg.beta_shape, cfg.beta_scale).map_err(|e| Error::Config(e.to_string()))?;
    let alpha: Vec<f64> = (0..cfg.k).map(|_| ga.sample(&mut rng)).collect();
    let beta: Vec<f64> = (0..cfg.v).map(|_| gb.sample(&mut rng)).collect();
    let phi: Vec<Vec<f64>> = (0..cfg.k).map(|_| sample_dirichlet(&mut rng, &beta)).collect();
    let thetas: Vec<Vec<f64>> = (0..cfg.p).map(|_| sample_dirichlet(&mut rng, &alpha)).collect();
    let w = planted_weights(&mut rng, cfg.k, cfg.n_nonzero, cfg.w_value);
    let width = cfg.v.to_string().len();
    let vocab = Vocabulary::new(0, "dx", (0..cfg.v).map(|v| format!("w{v:0width$}")).collect())?;
    let (corpus, outcomes, truth) = assemble(
        Assembled {
            vocab,
            ids: patient_ids(cfg.p),
            phi,
            thetas,
            lengths: vec![cfg.tokens_per_patient; cfg.p],
            w,
            alpha,
            lambda: cfg.lambda_baseline,
            censoring: cfg.censoring_rate,
        },
        &mut rng,
    )?;
    Ok(SimulatedDataset {
        corpus,
        outcomes,
        truth,
        flagged: Vec::new(),
    })
}

/// Empirical inputs of Design 2: a guide map plus per-patient phenotype
/// frequencies and document lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct Design2Inputs {
    pub guide: GuideMap,
    /// Patient ids in output order.
    pub patient_ids: Vec<String>,
    /// P×K nonnegative frequencies over the guide's phenotypes.
    pub frequencies: Vec<Vec<f64>>,
    pub record_counts: Vec<usize>,
}

impl Design2Inputs {
    pub fn n_topics(&self) -> usize {
        self.guide.n_phenotypes()
    }

    /// Guide features in lexicographic order; this is the simulated vocabulary.
    pub fn features(&self) -> Vec<String> {
        let mut f: Vec<String> = self.guide.pairs().map(|(a, _)| a.to_string()).collect();
        f.sort();
        f.dedup();
        f
    }
}

pub fn load_design2_inputs(guide_path: &Path, frequency_path: &Path, counts_path: &Path) -> Result<Design2Inputs> {
    let guide = load_guide_map(guide_path)?;
    let k = guide.n_phenotypes();
    let index: BTreeMap<&str, usize> = guide.phenotype_ids().iter().enumerate().map(|(i, p)| (p.as_str(), i)).collect();

    let counts_file = tsv::read(counts_path, &RECORD_COUNT_HEADER)?;
    let mut patient_ids = Vec::new();
    let mut record_counts = Vec::new();
    let mut row_of: BTreeMap<String, usize> = BTreeMap::new();
    for row in &counts_file.rows {
        let id = row.fields[0].clone();
        let n: usize = row.fields[1]
            .parse()
            .map_err(|_| counts_file.parse_err(row.line, format!("bad token count {:?}", row.fields[1])))?;
        if row_of.insert(id.clone(), patient_ids.len()).is_some() {
            return Err(counts_file.parse_err(row.line, format!("duplicate patient {id}")));
        }
        patient_ids.push(id);
        record_counts.push(n);
    }

    let freq_file = tsv::read(frequency_path, &FREQUENCY_HEADER)?;
    let mut frequencies = vec![vec![0.0; k]; patient_ids.len()];
    for row in &freq_file.rows {
        let j = *row_of
            .get(&row.fields[0])
            .ok_or_else(|| freq_file.parse_err(row.line, format!("patient {} missing from counts file", row.fields[0])))?;
        let kk = *index
            .get(row.fields[1].as_str())
            .ok_or_else(|| freq_file.parse_err(row.line, format!("unknown phenotype {}", row.fields[1])))?;
        let f: f64 = row.fields[2]
            .parse()
            .ok()
            .filter(|x: &f64| *x >= 0.0 && x.is_finite())
            .ok_or_else(|| freq_file.parse_err(row.line, format!("bad frequency {:?}", row.fields[2])))?;
        frequencies[j][kk] += f;
    }
    Ok(Design2Inputs {
        guide,
        patient_ids,
        frequencies,
        record_counts,
    })
}

pub fn write_design2_inputs(inputs: &Design2Inputs, dir: &Path, provenance: Option<&str>) -> Result<[PathBuf; 3]> {
    let guide_path = dir.join("guide_map.tsv");
    let freq_path = dir.join("phenotype_frequencies.tsv");
    let counts_path = dir.join("record_counts.tsv");
    crate::corpus::write_guide_map(&inputs.guide, &guide_path, provenance)?;
    let mut fw = TsvWriter::create(&freq_path, provenance, &FREQUENCY_HEADER)?;
    let mut cw = TsvWriter::create(&counts_path, provenance, &RECORD_COUNT_HEADER)?;
    for (j, id) in inputs.patient_ids.iter().enumerate() {
        cw.row(&[id.clone(), inputs.record_counts[j].to_string()])?;
        for (k, &f) in inputs.frequencies[j].iter().enumerate() {
            if f > 0.0 {
                fw.row(&[id.clone(), inputs.guide.phenotype_ids()[k].clone(), format!("{f}")])?;
            }
        }
    }
    fw.finish()?;
    cw.finish()?;
    Ok([guide_path, freq_path, counts_path])
}

/// Stand-in for the empirical Design 2 inputs: each phenotype owns a block of
/// features (a few features map to two phenotypes), patients carry a handful
/// of phenotypes with Poisson frequencies and Poisson-distributed lengths.
pub fn standin_design2_inputs(k: usize, features_per_topic: usize, p: usize, mean_tokens: f64, seed: u64) -> Result<Design2Inputs> {
    if k == 0 || features_per_topic == 0 || p == 0 || !(mean_tokens > 0.0) {
        return Err(Error::Config("stand-in sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kw = k.to_string().len().max(3);
    let v = k * features_per_topic;
    let vw = v.to_string().len();
    let mut pairs = Vec::new();
    for kk in 0..k {
        for f in 0..features_per_topic {
            pairs.push((format!("icd{:0vw$}", kk * features_per_topic + f), format!("phe{kk:0kw$}")));
        }
    }
    // shared features: roughly one in ten phenotypes borrows a neighbour's first feature
    for kk in 0..k {
        if k > 1 && rng.random_bool(0.1) {
            let other = (kk + 1) % k;
            pairs.push((format!("icd{:0vw$}", other * features_per_topic), format!("phe{kk:0kw$}")));
        }
    }
    let guide = GuideMap::from_pairs(pairs)?;
    let pois_len = Poisson::new(mean_tokens).map_err(|e| Error::Config(e.to_string()))?;
    let pois_freq = Poisson::new(3.0).expect("valid rate");
    let ids = patient_ids(p);
    let mut frequencies = Vec::with_capacity(p);
    let mut record_counts = Vec::with_capacity(p);
    for _ in 0..p {
        let n_pheno = rng.random_range(1..=k.min(5));
        let mut row = vec![0.0; k];
        for kk in sample_indices(&mut rng, k, n_pheno) {
            row[kk] = 1.0 + pois_freq.sample(&mut rng);
        }
        frequencies.push(row);
        record_counts.push((pois_len.sample(&mut rng) as usize).max(1));
    }
    Ok(Design2Inputs {
        guide,
        patient_ids: ids,
        frequencies,
        record_counts,
    })
}

/// β_kv = 𝟙[v maps to k]·scale + offset.
pub fn design2_beta(inputs: &Design2Inputs, scale: f64, offset: f64) -> (Vec<String>, Vec<Vec<f64>>) {
    let features = inputs.features();
    let beta = (0..inputs.n_topics())
        .map(|k| {
            features
                .iter()
                .map(|f| if inputs.guide.is_mapped(f, k) { scale + offset } else { offset })
                .collect()
        })
        .collect();
    (features, beta)
}

pub fn simulate_design2(inputs: &Design2Inputs, cfg: &SimConfig2) -> Result<SimulatedDataset> {
    if !(cfg.beta_scale > 0.0 && cfg.beta_offset > 0.0) {
        return Err(Error::Config("beta scale and offset must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.nonzero_fraction) {
        return Err(Error::Config("nonzero fraction must lie in [0, 1]".into()));
    }
    if !(cfg.lambda_baseline > 0.0) {
        return Err(Error::Config("baseline hazard rate must be positive".into()));
    }
    check_censoring(cfg.censoring_rate)?;
    let p = inputs.patient_ids.len();
    if inputs.frequencies.len() != p || inputs.record_counts.len() != p {
        return Err(Error::Data("frequency and record-count rows must match the patient list".into()));
    }
    let k = inputs.n_topics();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (features, beta) = design2_beta(inputs, cfg.beta_scale, cfg.beta_offset);
    let phi: Vec<Vec<f64>> = beta.iter().map(|b| sample_dirichlet(&mut rng, b)).collect();
    let mut flagged = Vec::new();
    let thetas: Vec<Vec<f64>> = inputs
        .frequencies
        .iter()
        .zip(&inputs.patient_ids)
        .map(|(row, id)| {
            let s: f64 = row.iter().sum();
            if s <= 0.0 {
                flagged.push(id.clone());
                return vec![1.0 / k as f64; k];
            }
            let freq: Vec<f64> = row.iter().map(|x| x / s).collect();
            match cfg.dirichlet_concentration {
                Some(c) => sample_dirichlet(&mut rng, &freq.iter().map(|f| c * f).collect::<Vec<_>>()),
                None => freq,
            }
        })
        .collect();
    let n_nonzero = (cfg.nonzero_fraction * k as f64).round() as usize;
    let w = planted_weights(&mut rng, k, n_nonzero, cfg.w_value);
    let vocab = Vocabulary::new(0, "dx", features)?;
    let (corpus, outcomes, truth) = assemble(
        Assembled {
            vocab,
            ids: inputs.patient_ids.clone(),
            phi,
            thetas,
            lengths: inputs.record_counts.clone(),
            w,
            alpha: Vec::new(),
            lambda: cfg.lambda_baseline,
            censoring: cfg.censoring_rate,
        },
        &mut rng,
    )?;
    Ok(SimulatedDataset {
        corpus,
        outcomes,
        truth,
        flagged,
    })
}

/// Seeded split into (train, test) index lists, each sorted ascending.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_test = ((n as f64) * test_fraction).round() as usize;
    let mut test: Vec<usize> = sample_indices(&mut rng, n, n_test.min(n)).into_vec();
    test.sort_unstable();
    let mut is_test = vec![false; n];
    test.iter().for_each(|&i| is_test[i] = true);
    let train = (0..n).filter(|&i| !is_test[i]).collect();
    (train, test)
}
