//! Predictions and confidence scores.
//!
//! The zero-shot branch scores an image against the class prompt embeddings;
//! the verification branch compares the auxiliary image embedding with the
//! prototype of the predicted class. Baselines operate on the zero-shot
//! logits and probabilities only.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedstore::{dot, Dataset, Split, TextClassEmbeddings};
use crate::error::{Error, Result};
use crate::protobank::PrototypeBank;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    /// Softmax temperature applied to cosine logits.
    pub tau: f64,
    /// Weight of the image-to-image term in the combined score.
    pub i2i_weight: f64,
    pub energy_temperature: f64,
    pub mcm_temperature: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            tau: 0.01,
            i2i_weight: 1.0,
            energy_temperature: 1.0,
            mcm_temperature: 1.0,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature("tau", self.tau)?;
        check_temperature("energy_temperature", self.energy_temperature)?;
        check_temperature("mcm_temperature", self.mcm_temperature)?;
        if !(self.i2i_weight >= 0.0 && self.i2i_weight.is_finite()) {
            return Err(Error::Config(format!(
                "i2i_weight must be finite and >= 0, got {}",
                self.i2i_weight
            )));
        }
        Ok(())
    }
}

pub(crate) fn check_temperature(name: &str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be finite and > 0, got {value}")))
    }
}

fn max_of(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `softmax(logits / temperature)` with max subtraction.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let m = max_of(logits);
    let exps: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - m) / temperature).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log(sum(exp(z)))` without overflow.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = max_of(z);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// `log_softmax(logits / temperature)`.
pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|&l| l / temperature).collect();
    let lse = log_sum_exp(&scaled);
    scaled.into_iter().map(|z| z - lse).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShot {
    pub predicted: usize,
    pub probs: Vec<f64>,
    /// Cosine similarity to each class prompt embedding.
    pub logits: Vec<f64>,
}

/// Zero-shot classification of a unit image embedding against the class
/// prompt embeddings.
pub fn zeroshot_predict(image: &[f32], text: &TextClassEmbeddings, tau: f64) -> Result<ZeroShot> {
    check_temperature("tau", tau)?;
    if image.len() != text.dims() {
        return Err(Error::DimensionMismatch {
            context: "image embedding vs text embeddings".into(),
            expected: text.dims(),
            found: image.len(),
        });
    }
    let logits: Vec<f64> = (0..text.class_count())
        .map(|c| dot(image, text.class_embedding(c)))
        .collect();
    let probs = softmax(&logits, tau);
    Ok(ZeroShot {
        predicted: argmax(&probs),
        probs,
        logits,
    })
}

/// Cosine logits of an auxiliary embedding against every prototype.
pub(crate) fn prototype_logits(aux: &[f32], bank: &PrototypeBank) -> Result<Vec<f64>> {
    if aux.len() != bank.dims() {
        return Err(Error::DimensionMismatch {
            context: "auxiliary embedding vs prototypes".into(),
            expected: bank.dims(),
            found: aux.len(),
        });
    }
    Ok((0..bank.class_count())
        .map(|c| dot(aux, bank.prototype(c)))
        .collect())
}

/// Image-to-image similarity between an auxiliary embedding and the prototype
/// of the predicted class.
pub fn score_i2i(aux: &[f32], bank: &PrototypeBank, predicted: usize) -> Result<f64> {
    if predicted >= bank.class_count() {
        return Err(Error::ClassOutOfRange {
            class: predicted,
            class_count: bank.class_count(),
        });
    }
    if aux.len() != bank.dims() {
        return Err(Error::DimensionMismatch {
            context: "auxiliary embedding vs prototypes".into(),
            expected: bank.dims(),
            found: aux.len(),
        });
    }
    Ok(dot(aux, bank.prototype(predicted)))
}

/// Combined confidence `s_it + weight * s_ii`.
pub fn combined_score(s_it: f64, s_ii: f64, weight: f64) -> f64 {
    s_it + weight * s_ii
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    pub predicted: usize,
    /// Sum of the text-branch and prototype-branch softmaxes; totals 2.
    pub probs: Vec<f64>,
}

/// Ensemble of the zero-shot softmax and the prototype softmax.
pub fn ensemble_predict(
    image: &[f32],
    aux: &[f32],
    text: &TextClassEmbeddings,
    bank: &PrototypeBank,
    tau: f64,
) -> Result<EnsemblePrediction> {
    let zs = zeroshot_predict(image, text, tau)?;
    ensemble_from_zeroshot(&zs, aux, bank, tau)
}

fn ensemble_from_zeroshot(
    zs: &ZeroShot,
    aux: &[f32],
    bank: &PrototypeBank,
    tau: f64,
) -> Result<EnsemblePrediction> {
    if bank.class_count() != zs.probs.len() {
        return Err(Error::DimensionMismatch {
            context: "prototype classes vs text classes".into(),
            expected: zs.probs.len(),
            found: bank.class_count(),
        });
    }
    let image_probs = softmax(&prototype_logits(aux, bank)?, tau);
    let probs: Vec<f64> = zs
        .probs
        .iter()
        .zip(&image_probs)
        .map(|(a, b)| a + b)
        .collect();
    Ok(EnsemblePrediction {
        predicted: argmax(&probs),
        probs,
    })
}

/// Ensemble confidence: largest ensemble probability plus `s_ii`.
pub fn ensemble_confidence(ensemble_probs: &[f64], s_ii: f64) -> f64 {
    max_of(ensemble_probs) + s_ii
}

/// Maximum softmax probability.
pub fn score_msp(probs: &[f64]) -> f64 {
    max_of(probs)
}

/// Largest raw cosine logit.
pub fn score_maxlogit(logits: &[f64]) -> f64 {
    max_of(logits)
}

/// Negative free energy `T * logsumexp(z / T)` on the scaled logits `z = logits / tau`.
pub fn score_energy(logits: &[f64], tau: f64, temperature: f64) -> f64 {
    let z: Vec<f64> = logits.iter().map(|&l| l / tau / temperature).collect();
    temperature * log_sum_exp(&z)
}

/// Negative Shannon entropy in nats, with `0 log 0 = 0`.
pub fn score_entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum()
}

/// Maximum softmax probability of the raw cosines at the MCM temperature.
pub fn score_mcm(logits: &[f64], temperature: f64) -> f64 {
    score_msp(&softmax(logits, temperature))
}

/// Sum of squared probabilities.
pub fn score_doctor(probs: &[f64]) -> f64 {
    probs.iter().map(|p| p * p).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineScores {
    pub msp: f64,
    pub maxlogit: f64,
    pub energy: f64,
    pub entropy: f64,
    pub mcm: f64,
    pub doctor: f64,
}

impl BaselineScores {
    pub fn compute(zs: &ZeroShot, config: &ScoringConfig) -> Self {
        BaselineScores {
            msp: score_msp(&zs.probs),
            maxlogit: score_maxlogit(&zs.logits),
            energy: score_energy(&zs.logits, config.tau, config.energy_temperature),
            entropy: score_entropy(&zs.probs),
            mcm: score_mcm(&zs.logits, config.mcm_temperature),
            doctor: score_doctor(&zs.probs),
        }
    }
}

/// Per-sample prediction and every confidence score.
///
/// `s_ii`, `kappa`, `ensemble_predicted` and `kappa_star` are absent when
/// scoring ran without prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub sample_id: String,
    pub label: usize,
    pub predicted: usize,
    pub s_it: f64,
    pub s_ii: Option<f64>,
    pub kappa: Option<f64>,
    pub ensemble_predicted: Option<usize>,
    pub kappa_star: Option<f64>,
    pub baselines: BaselineScores,
    pub correct: Option<bool>,
    pub correct_ens: Option<bool>,
}

/// Scores one sample. `aux` and `bank` must be given together.
pub fn score_sample(
    sample_id: &str,
    label: usize,
    image: &[f32],
    text: &TextClassEmbeddings,
    verification: Option<(&[f32], &PrototypeBank)>,
    config: &ScoringConfig,
) -> Result<ScoredPrediction> {
    let zs = zeroshot_predict(image, text, config.tau)?;
    let baselines = BaselineScores::compute(&zs, config);
    let s_it = baselines.msp;
    let (s_ii, kappa, ensemble_predicted, kappa_star) = match verification {
        Some((aux, bank)) => {
            let s_ii = score_i2i(aux, bank, zs.predicted)?;
            let ens = ensemble_from_zeroshot(&zs, aux, bank, config.tau)?;
            (
                Some(s_ii),
                Some(combined_score(s_it, s_ii, config.i2i_weight)),
                Some(ens.predicted),
                Some(ensemble_confidence(&ens.probs, s_ii)),
            )
        }
        None => (None, None, None, None),
    };
    Ok(ScoredPrediction {
        sample_id: sample_id.to_owned(),
        label,
        predicted: zs.predicted,
        s_it,
        s_ii,
        kappa,
        ensemble_predicted,
        kappa_star,
        baselines,
        correct: Some(zs.predicted == label),
        correct_ens: ensemble_predicted.map(|p| p == label),
    })
}

/// Scores every test-split sample in manifest order. Passing a bank enables
/// the prototype-verified scores and requires the auxiliary image space.
pub fn score_batch(
    dataset: &Dataset,
    bank: Option<&PrototypeBank>,
    config: &ScoringConfig,
) -> Result<Vec<ScoredPrediction>> {
    config.validate()?;
    let image = dataset.vlm_image()?;
    let text = dataset.vlm_text()?;
    if text.class_count() != dataset.class_count() {
        return Err(Error::DimensionMismatch {
            context: "text rows vs class count".into(),
            expected: dataset.class_count(),
            found: text.class_count(),
        });
    }
    let aux = match bank {
        Some(bank) => {
            let aux = dataset.aux_image()?;
            if aux.dims() != bank.dims() {
                return Err(Error::DimensionMismatch {
                    context: "prototype bank vs aux_image embeddings".into(),
                    expected: bank.dims(),
                    found: aux.dims(),
                });
            }
            if bank.class_count() != dataset.class_count() {
                return Err(Error::DimensionMismatch {
                    context: "prototype classes vs class count".into(),
                    expected: dataset.class_count(),
                    found: bank.class_count(),
                });
            }
            Some(aux)
        }
        None => None,
    };

    let test = dataset.manifest.indices_in_split(Split::Test);
    test.par_iter()
        .map(|&i| {
            let record = &dataset.manifest.samples[i];
            let verification = aux.zip(bank).map(|(aux, bank)| (aux.row(i), bank));
            score_sample(
                &record.id,
                record.label,
                image.row(i),
                text,
                verification,
                config,
            )
        })
        .collect()
}

/// Column order of the predictions file.
pub const PREDICTION_COLUMNS: [&str; 16] = [
    "sample_id",
    "label",
    "pred",
    "pred_ens",
    "s_it",
    "s_ii",
    "kappa",
    "kappa_star",
    "msp",
    "maxlogit",
    "energy",
    "entropy",
    "mcm",
    "doctor",
    "correct",
    "correct_ens",
];

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRow {
    sample_id: String,
    label: usize,
    pred: usize,
    pred_ens: Option<usize>,
    s_it: f64,
    s_ii: Option<f64>,
    kappa: Option<f64>,
    kappa_star: Option<f64>,
    msp: f64,
    maxlogit: f64,
    energy: f64,
    entropy: f64,
    mcm: f64,
    doctor: f64,
    correct: Option<bool>,
    correct_ens: Option<bool>,
}

impl From<&ScoredPrediction> for PredictionRow {
    fn from(p: &ScoredPrediction) -> Self {
        PredictionRow {
            sample_id: p.sample_id.clone(),
            label: p.label,
            pred: p.predicted,
            pred_ens: p.ensemble_predicted,
            s_it: p.s_it,
            s_ii: p.s_ii,
            kappa: p.kappa,
            kappa_star: p.kappa_star,
            msp: p.baselines.msp,
            maxlogit: p.baselines.maxlogit,
            energy: p.baselines.energy,
            entropy: p.baselines.entropy,
            mcm: p.baselines.mcm,
            doctor: p.baselines.doctor,
            correct: p.correct,
            correct_ens: p.correct_ens,
        }
    }
}

impl From<PredictionRow> for ScoredPrediction {
    fn from(r: PredictionRow) -> Self {
        ScoredPrediction {
            sample_id: r.sample_id,
            label: r.label,
            predicted: r.pred,
            s_it: r.s_it,
            s_ii: r.s_ii,
            kappa: r.kappa,
            ensemble_predicted: r.pred_ens,
            kappa_star: r.kappa_star,
            baselines: BaselineScores {
                msp: r.msp,
                maxlogit: r.maxlogit,
                energy: r.energy,
                entropy: r.entropy,
                mcm: r.mcm,
                doctor: r.doctor,
            },
            correct: r.correct,
            correct_ens: r.correct_ens,
        }
    }
}

/// Writes predictions as comma-separated text. `meta` pairs are emitted as
/// leading `# key=value` comment lines.
pub fn write_predictions(
    path: impl AsRef<Path>,
    predictions: &[ScoredPrediction],
    meta: &[(&str, String)],
) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for (key, value) in meta {
        writeln!(buf, "# {key}={value}").expect("write to vec");
    }
    {
        let mut writer = csv::Writer::from_writer(&mut buf);
        if predictions.is_empty() {
            writer
                .write_record(PREDICTION_COLUMNS)
                .map_err(|e| Error::Predictions(e.to_string()))?;
        }
        for p in predictions {
            writer
                .serialize(PredictionRow::from(p))
                .map_err(|e| Error::Predictions(e.to_string()))?;
        }
        writer
            .flush()
            .map_err(|e| Error::io(path, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// `# key=value` lines from the head of a predictions file, in order.
pub type PredictionMeta = Vec<(String, String)>;

/// Reads a predictions file, returning the rows and any `# key=value` metadata.
pub fn read_predictions(
    path: impl AsRef<Path>,
) -> Result<(Vec<ScoredPrediction>, PredictionMeta)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let meta = text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .filter_map(|l| {
            let (k, v) = l.trim_start_matches('#').trim_start().split_once('=')?;
            Some((k.to_owned(), v.to_owned()))
        })
        .collect();

    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Predictions(e.to_string()))?
        .clone();
    if headers.iter().ne(PREDICTION_COLUMNS.iter().copied()) {
        return Err(Error::Predictions(format!(
            "unexpected header {:?}",
            headers.iter().collect::<Vec<_>>()
        )));
    }
    let mut predictions = Vec::new();
    for (line, row) in reader.deserialize::<PredictionRow>().enumerate() {
        let row = row.map_err(|e| Error::Predictions(format!("record {}: {e}", line + 1)))?;
        predictions.push(row.into());
    }
    Ok((predictions, meta))
}
