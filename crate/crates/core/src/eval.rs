//! Metrics, patient-disjoint splits and the experiment runners.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifiers::{
    concat_features, fit_logistic, forest_proba_many, logistic_proba, train_forest, DEFAULT_TREES,
};
use crate::consensus::{balance_items, Design, Label, Source};
use crate::nn::{build_network, train_inputs, Arch, TrainConfig};
use crate::qif::{strip_size_features, SQRT_AREA};
use crate::{seed, Error, Result};

fn check_binary(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: scores.len(),
            found: labels.len(),
        });
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.iter().filter(|&&l| l == 0).count();
    if pos + neg != labels.len() {
        return Err(Error::InvalidInput("labels must be 0 or 1".into()));
    }
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    Ok((pos, neg))
}

/// Mann-Whitney AUC via mid-ranks: P(s+ > s-) + P(tie) / 2.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// (FPR, TPR) at every unique score, highest first, plus both endpoints.
pub fn roc_points(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    if pts.last() != Some(&(1.0, 1.0)) {
        pts.push((1.0, 1.0));
    }
    Ok(pts)
}

pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// (acc, sens, spc) predicting positive iff score >= threshold.
pub fn confusion_at(scores: &[f64], labels: &[u8], threshold: f64) -> Result<(f64, f64, f64)> {
    let (pos, neg) = check_binary(scores, labels)?;
    let (mut tp, mut tn) = (0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, 1) => tp += 1,
            (false, 0) => tn += 1,
            _ => {}
        }
    }
    Ok((
        (tp + tn) as f64 / scores.len() as f64,
        tp as f64 / pos as f64,
        tn as f64 / neg as f64,
    ))
}

pub fn accuracy_at(scores: &[f64], labels: &[u8], threshold: f64) -> f64 {
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| u8::from(s >= threshold) == l)
        .count();
    hits as f64 / scores.len().max(1) as f64
}

/// Patient-disjoint split into (train, validation) item indices.
///
/// Patients are shuffled, then the shortest patient prefix whose item count
/// is closest to `train_fraction` of all items becomes the training side.
/// Shuffles are redrawn (same stream) until both sides hold both classes,
/// up to a fixed number of attempts. With `balance`, each side is then
/// undersampled to equal class counts.
pub fn split_by_patient(
    patients: &[&str],
    labels: &[Label],
    train_fraction: f64,
    balance: bool,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    const ATTEMPTS: usize = 1000;
    if patients.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: patients.len(),
            found: labels.len(),
        });
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::InvalidInput(format!("train fraction {train_fraction}")));
    }
    let mut groups: Vec<(&str, Vec<usize>)> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for (i, &p) in patients.iter().enumerate() {
        let g = *slot.entry(p).or_insert_with(|| {
            groups.push((p, Vec::new()));
            groups.len() - 1
        });
        groups[g].1.push(i);
    }
    if groups.len() < 2 {
        return Err(Error::TooFewPatients(format!("{} patient(s); need at least 2", groups.len())));
    }
    if !labels.contains(&Label::Positive) || !labels.contains(&Label::Negative) {
        return Err(Error::SingleClass);
    }
    let target = train_fraction * patients.len() as f64;
    let mut rng = seed::rng(seed);
    let both = |idx: &[usize]| {
        idx.iter().any(|&i| labels[i] == Label::Positive)
            && idx.iter().any(|&i| labels[i] == Label::Negative)
    };
    let mut result = None;
    for _ in 0..ATTEMPTS {
        groups.shuffle(&mut rng);
        let mut cum = 0usize;
        let mut best_k = 1;
        let mut best_gap = f64::INFINITY;
        for k in 1..groups.len() {
            cum += groups[k - 1].1.len();
            let gap = (cum as f64 - target).abs();
            if gap < best_gap {
                best_gap = gap;
                best_k = k;
            }
        }
        let mut train: Vec<usize> = groups[..best_k].iter().flat_map(|g| g.1.clone()).collect();
        let mut val: Vec<usize> = groups[best_k..].iter().flat_map(|g| g.1.clone()).collect();
        train.sort_unstable();
        val.sort_unstable();
        let ok = both(&train) && both(&val);
        result = Some((train, val));
        if ok {
            break;
        }
    }
    let (mut train, mut val) = result.expect("at least one attempt");
    if balance {
        train = balance_items(train, seed::sub_seed(seed, "balance_train"), |&i| labels[i]);
        val = balance_items(val, seed::sub_seed(seed, "balance_val"), |&i| labels[i]);
    }
    Ok((train, val))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "cnn21")]
    Cnn21,
    #[serde(rename = "cnn21+rf")]
    Cnn21Rf,
    #[serde(rename = "cnn47")]
    Cnn47,
    #[serde(rename = "cnn47+rf")]
    Cnn47Rf,
    #[serde(rename = "lm")]
    Lm,
    #[serde(rename = "rf")]
    Rf,
    #[serde(rename = "rf_no_size")]
    RfNoSize,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::Cnn47,
        ModelKind::Cnn47Rf,
        ModelKind::Cnn21,
        ModelKind::Cnn21Rf,
        ModelKind::Lm,
        ModelKind::Rf,
        ModelKind::RfNoSize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Cnn21 => "cnn21",
            ModelKind::Cnn21Rf => "cnn21+rf",
            ModelKind::Cnn47 => "cnn47",
            ModelKind::Cnn47Rf => "cnn47+rf",
            ModelKind::Lm => "lm",
            ModelKind::Rf => "rf",
            ModelKind::RfNoSize => "rf_no_size",
        }
    }

    pub fn arch(self) -> Option<Arch> {
        match self {
            ModelKind::Cnn21 | ModelKind::Cnn21Rf => Some(Arch::Cnn21),
            ModelKind::Cnn47 | ModelKind::Cnn47Rf => Some(Arch::Cnn47),
            _ => None,
        }
    }

    fn file_stem(self) -> String {
        self.name().replace('+', "_")
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        ModelKind::ALL
            .into_iter()
            .find(|m| m.name() == t)
            .ok_or_else(|| Error::InvalidInput(format!("unknown model {s:?}")))
    }
}

pub fn parse_models(list: &str) -> Result<Vec<ModelKind>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

/// One candidate item with everything any model might need.
#[derive(Debug, Clone, PartialEq)]
pub struct DataItem {
    pub item_id: String,
    pub patient_id: String,
    /// Consensus rating 1..=5, or 0 for a non-nodule locus.
    pub rating: u8,
    pub qif: Option<Vec<f64>>,
    pub patch21: Option<Vec<f64>>,
    pub patch47: Option<Vec<f64>>,
}

impl DataItem {
    pub fn source(&self) -> Source {
        if self.rating == 0 {
            Source::NonNodule
        } else {
            Source::Nodule
        }
    }

    fn patch(&self, arch: Arch) -> Option<&Vec<f64>> {
        match arch {
            Arch::Cnn21 => self.patch21.as_ref(),
            Arch::Cnn47 => self.patch47.as_ref(),
        }
    }
}

/// Items that carry a label under `design`, with their labels.
pub fn labeled(items: &[DataItem], design: Design) -> (Vec<usize>, Vec<Label>) {
    items
        .iter()
        .enumerate()
        .filter_map(|(i, it)| design.label_for_rating(it.rating).map(|l| (i, l)))
        .unzip()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub train: TrainConfig,
    pub n_trees: usize,
    pub threshold: f64,
    pub balance: bool,
    pub train_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            train: TrainConfig::default(),
            n_trees: DEFAULT_TREES,
            threshold: 0.5,
            balance: true,
            train_fraction: 0.8,
        }
    }
}

impl EvalConfig {
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub auc: f64,
    pub acc: f64,
    pub sens: f64,
    pub spc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub design: String,
    pub rows: Vec<MetricRow>,
    pub roc: Vec<(String, Vec<(f64, f64)>)>,
    pub seed: u64,
    pub sub_seeds: Vec<(String, u64)>,
    pub config_hash: String,
    pub n_train: usize,
    pub n_validation: usize,
    pub validation_ids: Vec<String>,
}

impl EvalReport {
    pub fn row(&self, model: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.model == model)
    }
}

fn needed<'a, T>(v: Option<&'a T>, what: &str, id: &str) -> Result<&'a T> {
    v.ok_or_else(|| Error::InvalidInput(format!("item {id} has no {what}")))
}

fn qif_of(it: &DataItem) -> Result<&Vec<f64>> {
    needed(it.qif.as_ref(), "QIF vector", &it.item_id)
}

struct TrainedCnn {
    train_features: Vec<Vec<f64>>,
    val_features: Vec<Vec<f64>>,
    val_scores: Vec<f64>,
}

fn train_cnn(
    arch: Arch,
    items: &[DataItem],
    train: &[usize],
    y_train: &[u8],
    val: &[usize],
    config: &EvalConfig,
    seed: u64,
) -> Result<TrainedCnn> {
    let inputs = |idx: &[usize]| -> Result<Vec<Vec<f64>>> {
        idx.iter()
            .map(|&i| needed(items[i].patch(arch), arch.name(), &items[i].item_id).cloned())
            .collect()
    };
    let xs = inputs(train)?;
    let xv = inputs(val)?;
    let tag = arch.name();
    let net = build_network(arch, seed::sub_seed(seed, &format!("{}/{tag}", seed::INIT)));
    let tc = TrainConfig {
        seed: seed::sub_seed(seed, &format!("train/{tag}")),
        ..config.train.clone()
    };
    let out = train_inputs(net, &xs, y_train, &tc)?;
    let model = out.checkpoints.selected().clone();
    Ok(TrainedCnn {
        train_features: model.features_inputs(&xs)?,
        val_features: model.features_inputs(&xv)?,
        val_scores: model.predict_inputs(&xv)?,
    })
}

/// Trains every requested model on one patient-disjoint training side and
/// scores all of them on the same validation side.
pub fn run_design(
    design: Design,
    models: &[ModelKind],
    items: &[DataItem],
    config: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    let (idx, labels) = labeled(items, design);
    let patients: Vec<&str> = idx.iter().map(|&i| items[i].patient_id.as_str()).collect();
    let split_seed = seed::sub_seed(seed, seed::SPLIT);
    let (tr, va) = split_by_patient(&patients, &labels, config.train_fraction, config.balance, split_seed)?;
    let train: Vec<usize> = tr.iter().map(|&k| idx[k]).collect();
    let val: Vec<usize> = va.iter().map(|&k| idx[k]).collect();
    let y_train: Vec<u8> = tr.iter().map(|&k| labels[k].as_u8()).collect();
    let y_val: Vec<u8> = va.iter().map(|&k| labels[k].as_u8()).collect();
    let forest_seed = seed::sub_seed(seed, seed::FOREST);

    let mut cnns: HashMap<Arch, TrainedCnn> = HashMap::new();
    let mut rows = Vec::new();
    let mut roc = Vec::new();
    for &m in models {
        let scores: Vec<f64> = match m {
            ModelKind::Cnn21 | ModelKind::Cnn47 | ModelKind::Cnn21Rf | ModelKind::Cnn47Rf => {
                let arch = m.arch().expect("cnn model");
                if let std::collections::hash_map::Entry::Vacant(e) = cnns.entry(arch) {
                    let t = train_cnn(arch, items, &train, &y_train, &val, config, seed)?;
                    e.insert(t);
                }
                let t = &cnns[&arch];
                if m.name().ends_with("+rf") {
                    let fuse = |rows: &[usize], feats: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
                        rows.iter()
                            .zip(feats)
                            .map(|(&i, f)| concat_features(f, qif_of(&items[i])?))
                            .collect()
                    };
                    let xt = fuse(&train, &t.train_features)?;
                    let xv = fuse(&val, &t.val_features)?;
                    let f = train_forest(&xt, &y_train, config.n_trees, forest_seed)?;
                    forest_proba_many(&f, &xv)?
                } else {
                    t.val_scores.clone()
                }
            }
            ModelKind::Lm => {
                let size = |rows: &[usize]| -> Result<Vec<f64>> {
                    rows.iter().map(|&i| Ok(qif_of(&items[i])?[SQRT_AREA])).collect()
                };
                let lm = fit_logistic(&size(&train)?, &y_train)?;
                size(&val)?.iter().map(|&x| logistic_proba(&lm, x)).collect()
            }
            ModelKind::Rf | ModelKind::RfNoSize => {
                let no_size = m == ModelKind::RfNoSize;
                let xt = qif_matrix(items, &train, no_size)?;
                let xv = qif_matrix(items, &val, no_size)?;
                let f = train_forest(&xt, &y_train, config.n_trees, forest_seed)?;
                forest_proba_many(&f, &xv)?
            }
        };
        let (acc, sens, spc) = confusion_at(&scores, &y_val, config.threshold)?;
        rows.push(MetricRow {
            model: m.name().into(),
            auc: auc(&scores, &y_val)?,
            acc,
            sens,
            spc,
        });
        roc.push((m.name().into(), roc_points(&scores, &y_val)?));
    }
    Ok(EvalReport {
        design: design.name().into(),
        rows,
        roc,
        seed,
        sub_seeds: vec![
            (seed::SPLIT.into(), split_seed),
            (seed::FOREST.into(), forest_seed),
        ],
        config_hash: config.hash(),
        n_train: train.len(),
        n_validation: val.len(),
        validation_ids: val.iter().map(|&i| items[i].item_id.clone()).collect(),
    })
}

fn qif_matrix(items: &[DataItem], rows: &[usize], no_size: bool) -> Result<Vec<Vec<f64>>> {
    rows.iter()
        .map(|&i| {
            let q = qif_of(&items[i])?;
            if no_size {
                strip_size_features(q)
            } else {
                Ok(q.clone())
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReducedMode {
    Train80,
    Train20,
    OnePlusOneMinus,
}

impl FromStr for ReducedMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "train80" => Ok(ReducedMode::Train80),
            "train20" => Ok(ReducedMode::Train20),
            "one_plus_one_minus" | "1+1-" | "1+/1_" => Ok(ReducedMode::OnePlusOneMinus),
            _ => Err(Error::InvalidInput(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialLog {
    pub trial: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_features: usize,
    pub acc: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedResult {
    pub design: String,
    pub model: String,
    pub mode: ReducedMode,
    pub mean_acc: f64,
    pub mean_auc: f64,
    pub trials: Vec<TrialLog>,
}

fn fit_and_score(
    model: ModelKind,
    items: &[DataItem],
    train: &[usize],
    y_train: &[u8],
    test: &[usize],
    y_test: &[u8],
    config: &EvalConfig,
    forest_seed: u64,
    trial: usize,
) -> Result<TrialLog> {
    let (scores, n_features) = match model {
        ModelKind::Lm => {
            let x: Vec<f64> = train.iter().map(|&i| Ok(qif_of(&items[i])?[SQRT_AREA])).collect::<Result<_>>()?;
            let lm = fit_logistic(&x, y_train)?;
            let s = test
                .iter()
                .map(|&i| Ok(logistic_proba(&lm, qif_of(&items[i])?[SQRT_AREA])))
                .collect::<Result<Vec<_>>>()?;
            (s, 1)
        }
        ModelKind::Rf | ModelKind::RfNoSize => {
            let no_size = model == ModelKind::RfNoSize;
            let xt = qif_matrix(items, train, no_size)?;
            let xv = qif_matrix(items, test, no_size)?;
            let f = train_forest(&xt, y_train, config.n_trees, forest_seed)?;
            (forest_proba_many(&f, &xv)?, f.n_features)
        }
        other => {
            return Err(Error::InvalidInput(format!(
                "reduced training supports rf, rf_no_size and lm, not {}",
                other.name()
            )))
        }
    };
    Ok(TrialLog {
        trial,
        n_train: train.len(),
        n_test: test.len(),
        n_features,
        acc: accuracy_at(&scores, y_test, config.threshold),
        auc: auc(&scores, y_test)?,
    })
}

/// Reduced-training protocols on QIF features. `one_plus_one_minus` samples
/// nodules, not patients, per the described protocol.
pub fn run_reduced_training(
    design: Design,
    model: ModelKind,
    mode: ReducedMode,
    trials: usize,
    items: &[DataItem],
    config: &EvalConfig,
    seed: u64,
) -> Result<ReducedResult> {
    let (idx, labels) = labeled(items, design);
    let forest_seed = seed::sub_seed(seed, seed::FOREST);
    let logs: Vec<TrialLog> = match mode {
        ReducedMode::Train80 | ReducedMode::Train20 => {
            let frac = if mode == ReducedMode::Train80 { 0.8 } else { 0.2 };
            let patients: Vec<&str> = idx.iter().map(|&i| items[i].patient_id.as_str()).collect();
            let (tr, te) = split_by_patient(&patients, &labels, frac, config.balance, seed::sub_seed(seed, seed::SPLIT))?;
            let pick = |v: &[usize]| -> (Vec<usize>, Vec<u8>) {
                v.iter().map(|&k| (idx[k], labels[k].as_u8())).unzip()
            };
            let (train, yt) = pick(&tr);
            let (test, yv) = pick(&te);
            vec![fit_and_score(model, items, &train, &yt, &test, &yv, config, forest_seed, 0)?]
        }
        ReducedMode::OnePlusOneMinus => {
            if trials == 0 {
                return Err(Error::InvalidInput("trials must be >= 1".into()));
            }
            let pos: Vec<usize> = (0..idx.len()).filter(|&k| labels[k] == Label::Positive).collect();
            let neg: Vec<usize> = (0..idx.len()).filter(|&k| labels[k] == Label::Negative).collect();
            if pos.len() < 2 || neg.len() < 2 {
                return Err(Error::SingleClass);
            }
            let trial_seed = seed::sub_seed(seed, seed::TRIALS);
            (0..trials)
                .into_par_iter()
                .map(|t| {
                    let mut rng = seed::rng(trial_seed ^ t as u64);
                    let p = *pos.choose(&mut rng).expect("non-empty");
                    let n = *neg.choose(&mut rng).expect("non-empty");
                    let train = vec![idx[p], idx[n]];
                    let rest: Vec<usize> = (0..idx.len()).filter(|&k| k != p && k != n).collect();
                    let test: Vec<usize> = rest.iter().map(|&k| idx[k]).collect();
                    let yv: Vec<u8> = rest.iter().map(|&k| labels[k].as_u8()).collect();
                    fit_and_score(model, items, &train, &[1, 0], &test, &yv, config, forest_seed ^ t as u64, t)
                })
                .collect::<Result<_>>()?
        }
    };
    let n = logs.len() as f64;
    Ok(ReducedResult {
        design: design.name().into(),
        model: model.name().into(),
        mode,
        mean_acc: logs.iter().map(|l| l.acc).sum::<f64>() / n,
        mean_auc: logs.iter().map(|l| l.auc).sum::<f64>() / n,
        trials: logs,
    })
}

pub const METRICS_HEADER: [&str; 7] = ["model", "design", "auc", "acc", "sens", "spc", "seed"];

pub fn metrics_csv(report: &EvalReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER)?;
    for r in &report.rows {
        w.write_record([
            r.model.clone(),
            report.design.clone(),
            r.auc.to_string(),
            r.acc.to_string(),
            r.sens.to_string(),
            r.spc.to_string(),
            report.seed.to_string(),
        ])?;
    }
    w.into_inner()
        .map_err(|e| Error::InvalidInput(format!("csv buffer: {e}")))
}

pub fn roc_svg(model: &str, design: &str, auc: Option<f64>, points: &[(f64, f64)]) -> String {
    const SIZE: f64 = 400.0;
    const PAD: f64 = 50.0;
    let span = SIZE - 2.0 * PAD;
    let px = |x: f64| PAD + x * span;
    let py = |y: f64| SIZE - PAD - y * span;
    let poly = points
        .iter()
        .map(|&(x, y)| format!("{:.4},{:.4}", px(x), py(y)))
        .collect::<Vec<_>>()
        .join(" ");
    let title = match auc {
        Some(a) => format!("{model} ({design}) AUC = {a:.3}"),
        None => format!("{model} ({design})"),
    };
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="400" height="400" viewBox="0 0 400 400">"#);
    let _ = writeln!(s, r#"<rect width="400" height="400" fill="white"/>"#);
    let _ = writeln!(s, r#"<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="black"/>"#, PAD, SIZE - PAD, SIZE - PAD);
    let _ = writeln!(s, r#"<line x1="{0}" y1="{0}" x2="{0}" y2="{1}" stroke="black"/>"#, PAD, SIZE - PAD);
    let _ = writeln!(s, r#"<line x1="{0}" y1="{1}" x2="{1}" y2="{0}" stroke="gray" stroke-dasharray="4 4"/>"#, PAD, SIZE - PAD);
    let _ = writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{poly}"/>"#);
    let _ = writeln!(s, r#"<text x="200" y="385" text-anchor="middle" font-size="14">False positive rate</text>"#);
    let _ = writeln!(s, r#"<text x="15" y="200" text-anchor="middle" font-size="14" transform="rotate(-90 15 200)">True positive rate</text>"#);
    let _ = writeln!(s, r#"<text x="200" y="30" text-anchor="middle" font-size="14">{}</text>"#, xml_text(&title));
    s.push_str("</svg>\n");
    s
}

fn xml_text(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `metrics.csv` and one `roc_<model>.svg` per model; returns the paths.
pub fn export_report(report: &EvalReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let csv_path = out_dir.join("metrics.csv");
    fs::write(&csv_path, metrics_csv(report)?).map_err(|e| Error::io(&csv_path, e))?;
    written.push(csv_path);
    for (model, pts) in &report.roc {
        let stem = model
            .parse::<ModelKind>()
            .map(ModelKind::file_stem)
            .unwrap_or_else(|_| model.replace(|c: char| !c.is_ascii_alphanumeric(), "_"));
        let path = out_dir.join(format!("roc_{stem}.svg"));
        let a = report.row(model).map(|r| r.auc);
        fs::write(&path, roc_svg(model, &report.design, a, pts)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn brute_auc(s: &[f64], l: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if l[i] == 1 && l[j] == 0 {
                    den += 1.0;
                    if s[i] > s[j] {
                        num += 1.0;
                    } else if s[i] == s[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.3, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.4; 6], &[1, 0, 1, 0, 1, 0]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::SingleClass)));
    }

    #[test]
    fn auc_matches_pair_count_and_trapezoid() {
        let mut rng = seed::rng(3);
        for _ in 0..50 {
            let n = rng.gen_range(2..120);
            let s: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..20) as f64) / 4.0).collect();
            let mut l: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            l[0] = 0;
            l[1] = 1;
            let a = auc(&s, &l).unwrap();
            assert!((a - brute_auc(&s, &l)).abs() < 1e-12);
            assert!((a - trapezoid_area(&roc_points(&s, &l).unwrap())).abs() < 1e-12);
        }
    }

    #[test]
    fn roc_examples() {
        let p = roc_points(&[0.9, 0.8, 0.3, 0.2], &[1, 1, 0, 0]).unwrap();
        assert!(p.contains(&(0.0, 1.0)));
        assert_eq!(roc_points(&[0.5; 4], &[1, 0, 1, 0]).unwrap(), vec![(0.0, 0.0), (1.0, 1.0)]);
    }

    #[test]
    fn confusion_examples() {
        assert_eq!(confusion_at(&[0.6, 0.4], &[1, 0], 0.5).unwrap(), (1.0, 1.0, 1.0));
        assert_eq!(confusion_at(&[0.5, 0.4], &[1, 0], 0.5).unwrap().1, 1.0);
        let (_, sens, spc) = confusion_at(&[0.9, 0.8, 0.7], &[1, 0, 0], 0.5).unwrap();
        assert_eq!((sens, spc), (1.0, 0.0));
    }

    #[test]
    fn split_examples() {
        let ids: Vec<String> = (0..10).map(|i| format!("p{i}")).collect();
        let pats: Vec<&str> = ids.iter().map(String::as_str).collect();
        let labels: Vec<Label> = (0..10)
            .map(|i| if i % 2 == 0 { Label::Positive } else { Label::Negative })
            .collect();
        let (tr, va) = split_by_patient(&pats, &labels, 0.8, false, 5).unwrap();
        assert_eq!((tr.len(), va.len()), (8, 2));
        assert!(matches!(
            split_by_patient(&["a", "a"], &[Label::Positive, Label::Negative], 0.8, false, 1),
            Err(Error::TooFewPatients(_))
        ));
    }

    #[test]
    fn split_balanced_sides() {
        let mut rng = seed::rng(8);
        let ids: Vec<String> = (0..60).map(|i| format!("p{}", i / 3)).collect();
        let pats: Vec<&str> = ids.iter().map(String::as_str).collect();
        let labels: Vec<Label> = (0..60)
            .map(|_| if rng.gen_bool(0.3) { Label::Positive } else { Label::Negative })
            .collect();
        let (tr, va) = split_by_patient(&pats, &labels, 0.8, true, 2).unwrap();
        for side in [&tr, &va] {
            let p = side.iter().filter(|&&i| labels[i] == Label::Positive).count();
            assert_eq!(2 * p, side.len());
        }
    }

    #[test]
    fn export_is_deterministic() {
        let report = EvalReport {
            design: "S1vS45".into(),
            rows: vec![MetricRow {
                model: "rf".into(),
                auc: 0.75,
                acc: 0.5,
                sens: 1.0,
                spc: 0.0,
            }],
            roc: vec![("rf".into(), vec![(0.0, 0.0), (0.5, 1.0), (1.0, 1.0)])],
            seed: 7,
            sub_seeds: vec![],
            config_hash: String::new(),
            n_train: 0,
            n_validation: 0,
            validation_ids: vec![],
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let fa = export_report(&report, a.path()).unwrap();
        export_report(&report, b.path()).unwrap();
        assert_eq!(fa.len(), 2);
        for f in &fa {
            let name = f.file_name().unwrap();
            assert_eq!(fs::read(f).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
        let empty = EvalReport {
            rows: vec![],
            roc: vec![],
            ..report
        };
        assert_eq!(
            String::from_utf8(metrics_csv(&empty).unwrap()).unwrap(),
            "model,design,auc,acc,sens,spc,seed\n"
        );
    }
}
