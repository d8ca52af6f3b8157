//! Multi-modal sparse count corpora, survival outcomes and the
//! feature-to-phenotype guide map.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tsv::{self, TsvWriter};

pub const CORPUS_HEADER: [&str; 4] = ["patient_id", "modality", "feature_id", "count"];
pub const VOCAB_HEADER: [&str; 2] = ["modality", "feature_id"];
pub const SURVIVAL_HEADER: [&str; 3] = ["patient_id", "time", "event"];
pub const GUIDE_HEADER: [&str; 2] = ["feature_id", "phenotype_id"];

/// Feature vocabulary of one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub modality_id: usize,
    pub name: String,
    feature_ids: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(modality_id: usize, name: impl Into<String>, feature_ids: Vec<String>) -> Result<Self> {
        let name = name.into();
        if feature_ids.is_empty() {
            return Err(Error::Data(format!("modality {name:?} has an empty vocabulary")));
        }
        let mut index = HashMap::with_capacity(feature_ids.len());
        for (i, f) in feature_ids.iter().enumerate() {
            if index.insert(f.clone(), i).is_some() {
                return Err(Error::Data(format!(
                    "duplicate feature {f:?} in modality {name:?}"
                )));
            }
        }
        Ok(Vocabulary {
            modality_id,
            name,
            feature_ids,
            index,
        })
    }

    pub fn size(&self) -> usize {
        self.feature_ids.len()
    }

    pub fn feature_ids(&self) -> &[String] {
        &self.feature_ids
    }

    pub fn feature_id(&self, v: usize) -> &str {
        &self.feature_ids[v]
    }

    pub fn index_of(&self, feature: &str) -> Option<usize> {
        self.index.get(feature).copied()
    }

    /// Rebuilds the lookup table after deserialization.
    pub(crate) fn reindex(&mut self) -> Result<()> {
        *self = Vocabulary::new(self.modality_id, self.name.clone(), std::mem::take(&mut self.feature_ids))?;
        Ok(())
    }
}

/// One distinct feature of a patient document together with its multiplicity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCount {
    pub feature: usize,
    pub count: u32,
}

/// A patient's bag of tokens, stored per modality as sorted `(feature, count)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    tokens: Vec<Vec<TokenCount>>,
}

impl PatientRecord {
    /// Builds a record from unsorted, possibly repeated `(feature, count)` pairs per modality.
    /// Repeated features are summed; zero counts are dropped.
    pub fn new(patient_id: impl Into<String>, per_modality: Vec<Vec<(usize, u32)>>) -> Self {
        let tokens = per_modality
            .into_iter()
            .map(|pairs| {
                let mut merged: BTreeMap<usize, u32> = BTreeMap::new();
                for (f, c) in pairs {
                    if c > 0 {
                        *merged.entry(f).or_insert(0) += c;
                    }
                }
                merged
                    .into_iter()
                    .map(|(feature, count)| TokenCount { feature, count })
                    .collect()
            })
            .collect();
        PatientRecord {
            patient_id: patient_id.into(),
            tokens,
        }
    }

    pub fn n_modalities(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self, modality: usize) -> &[TokenCount] {
        &self.tokens[modality]
    }

    /// N_j^(m): number of token instances in modality `m`.
    pub fn n_tokens(&self, modality: usize) -> u64 {
        self.tokens[modality].iter().map(|t| t.count as u64).sum()
    }

    pub fn total_tokens(&self) -> u64 {
        (0..self.tokens.len()).map(|m| self.n_tokens(m)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_tokens() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    vocabularies: Vec<Vocabulary>,
    patients: Vec<PatientRecord>,
}

impl Corpus {
    /// Validates every token against its vocabulary and sorts patients by id.
    pub fn new(vocabularies: Vec<Vocabulary>, mut patients: Vec<PatientRecord>) -> Result<Self> {
        if vocabularies.is_empty() {
            return Err(Error::Data("corpus needs at least one modality".into()));
        }
        for (m, v) in vocabularies.iter().enumerate() {
            if v.modality_id != m {
                return Err(Error::Data(format!(
                    "vocabulary {:?} declared with modality id {} at position {m}",
                    v.name, v.modality_id
                )));
            }
        }
        for p in &patients {
            if p.n_modalities() != vocabularies.len() {
                return Err(Error::Data(format!(
                    "patient {} has {} modalities, schema declares {}",
                    p.patient_id,
                    p.n_modalities(),
                    vocabularies.len()
                )));
            }
            for (m, vocab) in vocabularies.iter().enumerate() {
                if let Some(t) = p.tokens(m).iter().find(|t| t.feature >= vocab.size()) {
                    return Err(Error::Data(format!(
                        "patient {}: feature index {} out of range for modality {:?} (size {})",
                        p.patient_id,
                        t.feature,
                        vocab.name,
                        vocab.size()
                    )));
                }
            }
        }
        patients.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
        if let Some(w) = patients.windows(2).find(|w| w[0].patient_id == w[1].patient_id) {
            return Err(Error::Data(format!("duplicate patient id {}", w[0].patient_id)));
        }
        Ok(Corpus {
            vocabularies,
            patients,
        })
    }

    pub fn n_patients(&self) -> usize {
        self.patients.len()
    }

    pub fn n_modalities(&self) -> usize {
        self.vocabularies.len()
    }

    pub fn vocabularies(&self) -> &[Vocabulary] {
        &self.vocabularies
    }

    pub fn vocabulary(&self, m: usize) -> &Vocabulary {
        &self.vocabularies[m]
    }

    pub fn patients(&self) -> &[PatientRecord] {
        &self.patients
    }

    pub fn patient(&self, j: usize) -> &PatientRecord {
        &self.patients[j]
    }

    pub fn patient_index(&self, id: &str) -> Option<usize> {
        self.patients
            .binary_search_by(|p| p.patient_id.as_str().cmp(id))
            .ok()
    }

    pub fn patient_ids(&self) -> Vec<String> {
        self.patients.iter().map(|p| p.patient_id.clone()).collect()
    }

    /// Indices of patients without any token.
    pub fn empty_patients(&self) -> Vec<usize> {
        (0..self.patients.len())
            .filter(|&j| self.patients[j].is_empty())
            .collect()
    }

    /// New corpus restricted to the given patient indices (same vocabularies).
    pub fn subset(&self, indices: &[usize]) -> Corpus {
        let mut patients: Vec<PatientRecord> =
            indices.iter().map(|&j| self.patients[j].clone()).collect();
        patients.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
        Corpus {
            vocabularies: self.vocabularies.clone(),
            patients,
        }
    }

    pub fn modality_index(&self, name: &str) -> Option<usize> {
        modality_index(&self.vocabularies, name)
    }
}

fn modality_index(vocabs: &[Vocabulary], name: &str) -> Option<usize> {
    vocabs
        .iter()
        .position(|v| v.name == name)
        .or_else(|| name.parse::<usize>().ok().filter(|&m| m < vocabs.len()))
}

/// Loads modality declarations from a `modality<TAB>feature_id` file.
/// Modalities are numbered by first appearance; features keep file order.
pub fn load_vocabularies(path: &Path) -> Result<Vec<Vocabulary>> {
    let file = tsv::read(path, &VOCAB_HEADER)?;
    let mut names: Vec<String> = Vec::new();
    let mut features: Vec<Vec<String>> = Vec::new();
    for row in &file.rows {
        let m = match names.iter().position(|n| n == &row.fields[0]) {
            Some(m) => m,
            None => {
                names.push(row.fields[0].clone());
                features.push(Vec::new());
                names.len() - 1
            }
        };
        features[m].push(row.fields[1].clone());
    }
    names
        .into_iter()
        .zip(features)
        .enumerate()
        .map(|(m, (name, f))| {
            Vocabulary::new(m, name, f).map_err(|e| file.parse_err(0, e.to_string()))
        })
        .collect()
}

pub fn write_vocabularies(vocabs: &[Vocabulary], path: &Path, provenance: Option<&str>) -> Result<()> {
    let mut w = TsvWriter::create(path, provenance, &VOCAB_HEADER)?;
    for v in vocabs {
        for f in v.feature_ids() {
            w.row(&[v.name.as_str(), f.as_str()])?;
        }
    }
    w.finish()
}

/// Loads a corpus file (`patient_id, modality, feature_id, count`). Duplicate
/// `(patient, modality, feature)` rows are summed.
pub fn load_corpus(path: &Path, vocabularies: &[Vocabulary]) -> Result<Corpus> {
    let file = tsv::read(path, &CORPUS_HEADER)?;
    let n_mod = vocabularies.len();
    let mut by_patient: BTreeMap<String, Vec<Vec<(usize, u32)>>> = BTreeMap::new();
    for row in &file.rows {
        let [pid, modality, feature, count] = [
            &row.fields[0],
            &row.fields[1],
            &row.fields[2],
            &row.fields[3],
        ];
        if pid.is_empty() {
            return Err(file.parse_err(row.line, "empty patient_id"));
        }
        let m = modality_index(vocabularies, modality)
            .ok_or_else(|| file.parse_err(row.line, format!("unknown modality {modality:?}")))?;
        let v = vocabularies[m].index_of(feature).ok_or_else(|| {
            file.parse_err(
                row.line,
                format!("feature {feature:?} not in vocabulary of modality {:?}", vocabularies[m].name),
            )
        })?;
        let c: u32 = count
            .parse()
            .ok()
            .filter(|&c| c > 0)
            .ok_or_else(|| file.parse_err(row.line, format!("count must be a positive integer, got {count:?}")))?;
        by_patient
            .entry(pid.clone())
            .or_insert_with(|| vec![Vec::new(); n_mod])[m]
            .push((v, c));
    }
    let patients = by_patient
        .into_iter()
        .map(|(pid, toks)| PatientRecord::new(pid, toks))
        .collect();
    Corpus::new(vocabularies.to_vec(), patients)
}

pub fn write_corpus(corpus: &Corpus, path: &Path, provenance: Option<&str>) -> Result<()> {
    let mut w = TsvWriter::create(path, provenance, &CORPUS_HEADER)?;
    for p in corpus.patients() {
        for (m, vocab) in corpus.vocabularies().iter().enumerate() {
            for t in p.tokens(m) {
                w.row(&[
                    p.patient_id.as_str(),
                    vocab.name.as_str(),
                    vocab.feature_id(t.feature),
                    &t.count.to_string(),
                ])?;
            }
        }
    }
    w.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalOutcome {
    pub patient_id: String,
    /// Observed time, min(event time, censoring time).
    pub time: f64,
    /// True when the event was observed, false when censored.
    pub event: bool,
}

/// Loads survival outcomes aligned to the corpus patient order.
pub fn load_survival(path: &Path, corpus: &Corpus) -> Result<Vec<SurvivalOutcome>> {
    let by_id = load_survival_table(path)?;
    corpus
        .patients()
        .iter()
        .map(|p| {
            by_id
                .get(&p.patient_id)
                .cloned()
                .ok_or_else(|| Error::Data(format!("{}: no survival record for patient {}", path.display(), p.patient_id)))
        })
        .collect()
}

/// Loads every row of a survival file keyed by patient id.
pub fn load_survival_table(path: &Path) -> Result<BTreeMap<String, SurvivalOutcome>> {
    let file = tsv::read(path, &SURVIVAL_HEADER)?;
    let mut out = BTreeMap::new();
    for row in &file.rows {
        let pid = row.fields[0].clone();
        let time: f64 = row.fields[1]
            .parse()
            .map_err(|_| file.parse_err(row.line, format!("invalid time {:?}", row.fields[1])))?;
        if !(time.is_finite() && time > 0.0) {
            return Err(file.parse_err(row.line, format!("time must be positive, got {time}")));
        }
        let event = match row.fields[2].as_str() {
            "1" => true,
            "0" => false,
            other => {
                return Err(file.parse_err(row.line, format!("event must be 0 or 1, got {other:?}")))
            }
        };
        if out
            .insert(pid.clone(), SurvivalOutcome { patient_id: pid.clone(), time, event })
            .is_some()
        {
            return Err(file.parse_err(row.line, format!("duplicate patient {pid}")));
        }
    }
    Ok(out)
}

pub fn write_survival(outcomes: &[SurvivalOutcome], path: &Path, provenance: Option<&str>) -> Result<()> {
    let mut w = TsvWriter::create(path, provenance, &SURVIVAL_HEADER)?;
    for o in outcomes {
        w.row(&[
            o.patient_id.as_str(),
            &o.time.to_string(),
            if o.event { "1" } else { "0" },
        ])?;
    }
    w.finish()
}

/// Feature → phenotype relation; the phenotype order defines topic indices.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GuideMap {
    phenotype_ids: Vec<String>,
    mapping: BTreeMap<String, Vec<usize>>,
}

impl GuideMap {
    /// Builds a map from `(feature, phenotype)` pairs; phenotypes are indexed by first appearance.
    pub fn from_pairs<I, A, B>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (A, B)>,
        A: Into<String>,
        B: Into<String>,
    {
        let mut g = GuideMap::default();
        let mut pidx: HashMap<String, usize> = HashMap::new();
        for (f, p) in pairs {
            let p = p.into();
            let k = *pidx.entry(p.clone()).or_insert_with(|| {
                g.phenotype_ids.push(p);
                g.phenotype_ids.len() - 1
            });
            let ks = g.mapping.entry(f.into()).or_default();
            if !ks.contains(&k) {
                ks.push(k);
            }
        }
        if g.phenotype_ids.is_empty() {
            return Err(Error::Data("guide map defines no phenotypes".into()));
        }
        Ok(g)
    }

    pub fn n_phenotypes(&self) -> usize {
        self.phenotype_ids.len()
    }

    pub fn phenotype_ids(&self) -> &[String] {
        &self.phenotype_ids
    }

    pub fn phenotypes_of(&self, feature: &str) -> &[usize] {
        self.mapping.get(feature).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn is_mapped(&self, feature: &str, k: usize) -> bool {
        self.phenotypes_of(feature).contains(&k)
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> + '_ {
        self.mapping.iter().flat_map(move |(f, ks)| {
            ks.iter()
                .map(move |&k| (f.as_str(), self.phenotype_ids[k].as_str()))
        })
    }

    /// Keeps only the listed phenotype indices, renumbering them in the given order.
    pub fn restrict(&self, keep: &[usize]) -> Result<GuideMap> {
        let remap: HashMap<usize, usize> = keep.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        let mut mapping = BTreeMap::new();
        for (f, ks) in &self.mapping {
            let kept: Vec<usize> = ks.iter().filter_map(|k| remap.get(k).copied()).collect();
            if !kept.is_empty() {
                mapping.insert(f.clone(), kept);
            }
        }
        let phenotype_ids: Vec<String> = keep.iter().map(|&k| self.phenotype_ids[k].clone()).collect();
        if phenotype_ids.is_empty() {
            return Err(Error::Data("phenotype filter removed every phenotype".into()));
        }
        Ok(GuideMap {
            phenotype_ids,
            mapping,
        })
    }
}

pub fn load_guide_map(path: &Path) -> Result<GuideMap> {
    let file = tsv::read(path, &GUIDE_HEADER)?;
    GuideMap::from_pairs(file.rows.iter().map(|r| (r.fields[0].clone(), r.fields[1].clone())))
        .map_err(|e| file.parse_err(0, e.to_string()))
}

pub fn write_guide_map(guide: &GuideMap, path: &Path, provenance: Option<&str>) -> Result<()> {
    let mut w = TsvWriter::create(path, provenance, &GUIDE_HEADER)?;
    for (f, p) in guide.pairs() {
        w.row(&[f, p])?;
    }
    w.finish()
}

/// Dense P×K matrix of phenotype counts u_jk.
#[derive(Debug, Clone, PartialEq)]
pub struct PhecodeCountMatrix {
    n_patients: usize,
    n_phenotypes: usize,
    data: Vec<u64>,
}

impl PhecodeCountMatrix {
    pub fn zeros(n_patients: usize, n_phenotypes: usize) -> Self {
        PhecodeCountMatrix {
            n_patients,
            n_phenotypes,
            data: vec![0; n_patients * n_phenotypes],
        }
    }

    pub fn from_rows(rows: Vec<Vec<u64>>) -> Result<Self> {
        let k = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Data("ragged phenotype count rows".into()));
        }
        Ok(PhecodeCountMatrix {
            n_patients: rows.len(),
            n_phenotypes: k,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn n_patients(&self) -> usize {
        self.n_patients
    }

    pub fn n_phenotypes(&self) -> usize {
        self.n_phenotypes
    }

    pub fn get(&self, j: usize, k: usize) -> u64 {
        self.data[j * self.n_phenotypes + k]
    }

    pub fn row(&self, j: usize) -> &[u64] {
        &self.data[j * self.n_phenotypes..(j + 1) * self.n_phenotypes]
    }

    pub fn column(&self, k: usize) -> Vec<u64> {
        (0..self.n_patients).map(|j| self.get(j, k)).collect()
    }

    pub fn column_sums(&self) -> Vec<u64> {
        (0..self.n_phenotypes)
            .map(|k| (0..self.n_patients).map(|j| self.get(j, k)).sum())
            .collect()
    }

    /// Phenotypes observed (u > 0) in strictly more than `min_fraction` of patients.
    pub fn prevalent_phenotypes(&self, min_fraction: f64) -> Vec<usize> {
        (0..self.n_phenotypes)
            .filter(|&k| {
                let present = (0..self.n_patients).filter(|&j| self.get(j, k) > 0).count();
                present as f64 > min_fraction * self.n_patients as f64
            })
            .collect()
    }

    pub fn select_columns(&self, keep: &[usize]) -> PhecodeCountMatrix {
        let rows = (0..self.n_patients)
            .map(|j| keep.iter().map(|&k| self.get(j, k)).collect())
            .collect();
        PhecodeCountMatrix::from_rows(rows).expect("rectangular by construction")
    }
}

/// Counts guide-modality tokens per phenotype. A token mapping to several
/// phenotypes increments each; unmapped features contribute nothing.
pub fn phecode_counts(corpus: &Corpus, guide: &GuideMap, guide_modality: usize) -> Result<PhecodeCountMatrix> {
    if guide_modality >= corpus.n_modalities() {
        return Err(Error::Config(format!(
            "guide modality {guide_modality} not declared (corpus has {})",
            corpus.n_modalities()
        )));
    }
    let vocab = corpus.vocabulary(guide_modality);
    let feature_map: Vec<&[usize]> = vocab
        .feature_ids()
        .iter()
        .map(|f| guide.phenotypes_of(f))
        .collect();
    let unmapped = feature_map.iter().filter(|ks| ks.is_empty()).count();
    if unmapped > 0 {
        log::warn!(
            "{unmapped} of {} features in modality {:?} have no phenotype mapping",
            vocab.size(),
            vocab.name
        );
    }
    let mut u = PhecodeCountMatrix::zeros(corpus.n_patients(), guide.n_phenotypes());
    for (j, p) in corpus.patients().iter().enumerate() {
        for t in p.tokens(guide_modality) {
            for &k in feature_map[t.feature] {
                u.data[j * u.n_phenotypes + k] += t.count as u64;
            }
        }
    }
    Ok(u)
}
