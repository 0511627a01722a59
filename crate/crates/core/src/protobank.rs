//! Per-class visual prototypes in the auxiliary encoder space.
//!
//! A prototype is the L2-normalized mean of N seeded training samples of its
//! class. Prototypes can optionally be refined by full-batch gradient descent
//! on the cross-entropy of the text/prototype ensemble, with the text branch
//! frozen and each prototype re-projected to the unit sphere after its update.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::embedstore::{
    normalize_f64, read_embeddings, write_embeddings, Dataset, EmbeddingMatrix, NormState, Split,
    TextClassEmbeddings,
};
use crate::error::{Error, Result};
use crate::scorers::{argmax, check_temperature, log_softmax, softmax};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub temperature: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 10,
            learning_rate: 0.001,
            temperature: 0.01,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        check_temperature("temperature", self.temperature)
    }
}

/// Per-epoch loss and ensemble accuracy on the fine-tuning samples, measured
/// before that epoch's update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneTrace {
    pub config: FinetuneConfig,
    pub loss: Vec<f64>,
    pub accuracy: Vec<f64>,
}

/// A class that had fewer training samples than the requested shot count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShotShortfall {
    pub class: usize,
    pub requested: usize,
    pub available: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    encoder_id: String,
    dataset_id: Option<String>,
    prototypes: EmbeddingMatrix,
    shots: usize,
    provenance: Vec<Vec<String>>,
    finetuned: bool,
    finetune_config: Option<FinetuneConfig>,
}

#[derive(Serialize, Deserialize)]
struct BankSidecar {
    encoder_id: String,
    #[serde(default)]
    dataset_id: Option<String>,
    class_count: usize,
    dims: usize,
    shots: usize,
    provenance: Vec<Vec<String>>,
    finetuned: bool,
    finetune_config: Option<FinetuneConfig>,
}

impl PrototypeBank {
    /// Wraps precomputed prototypes (normalized if raw) with empty provenance.
    pub fn from_prototypes(encoder_id: impl Into<String>, prototypes: EmbeddingMatrix) -> Result<Self> {
        let prototypes = match prototypes.norm_state() {
            NormState::Unit => prototypes,
            NormState::Raw => crate::embedstore::l2_normalize(&prototypes)?,
        };
        Ok(PrototypeBank {
            encoder_id: encoder_id.into(),
            dataset_id: None,
            provenance: vec![Vec::new(); prototypes.rows()],
            prototypes,
            shots: 0,
            finetuned: false,
            finetune_config: None,
        })
    }

    pub fn encoder_id(&self) -> &str {
        &self.encoder_id
    }

    /// Id of the dataset whose training split supplied the shots.
    pub fn dataset_id(&self) -> Option<&str> {
        self.dataset_id.as_deref()
    }

    pub fn set_dataset_id(&mut self, id: impl Into<String>) {
        self.dataset_id = Some(id.into());
    }

    pub fn class_count(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn dims(&self) -> usize {
        self.prototypes.dims()
    }

    pub fn prototype(&self, class: usize) -> &[f32] {
        self.prototypes.row(class)
    }

    pub fn prototypes(&self) -> &EmbeddingMatrix {
        &self.prototypes
    }

    pub fn shots(&self) -> usize {
        self.shots
    }

    pub fn provenance(&self) -> &[Vec<String>] {
        &self.provenance
    }

    pub fn finetuned(&self) -> bool {
        self.finetuned
    }

    pub fn finetune_config(&self) -> Option<&FinetuneConfig> {
        self.finetune_config.as_ref()
    }

    fn sidecar_path(tvem_path: &Path) -> PathBuf {
        tvem_path.with_extension("json")
    }

    /// Writes the prototypes to `path` (TVEM) and the metadata sidecar next to
    /// it with a `.json` extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_embeddings(&self.prototypes, path)?;
        let sidecar = BankSidecar {
            encoder_id: self.encoder_id.clone(),
            dataset_id: self.dataset_id.clone(),
            class_count: self.class_count(),
            dims: self.dims(),
            shots: self.shots,
            provenance: self.provenance.clone(),
            finetuned: self.finetuned,
            finetune_config: self.finetune_config,
        };
        let side = Self::sidecar_path(path);
        let mut text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        text.push('\n');
        fs::write(&side, text).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let prototypes = read_embeddings(path)?;
        let side = Self::sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: BankSidecar = serde_json::from_str(&text).map_err(|e| Error::parse(&side, e))?;
        if sidecar.class_count != prototypes.rows() || sidecar.dims != prototypes.dims() {
            return Err(Error::parse(
                &side,
                format!(
                    "sidecar declares {}x{}, prototypes are {}x{}",
                    sidecar.class_count,
                    sidecar.dims,
                    prototypes.rows(),
                    prototypes.dims()
                ),
            ));
        }
        if sidecar.provenance.len() != prototypes.rows() {
            return Err(Error::parse(&side, "provenance must list one entry per class"));
        }
        let prototypes = match prototypes.norm_state() {
            NormState::Unit => prototypes,
            NormState::Raw => crate::embedstore::l2_normalize(&prototypes)?,
        };
        Ok(PrototypeBank {
            encoder_id: sidecar.encoder_id,
            dataset_id: sidecar.dataset_id,
            prototypes,
            shots: sidecar.shots,
            provenance: sidecar.provenance,
            finetuned: sidecar.finetuned,
            finetune_config: sidecar.finetune_config,
        })
    }
}

/// Builds one prototype per class from `aux` rows.
///
/// Row `i` belongs to class `labels[i]` and is identified by `sample_ids[i]`.
/// For class `c`, `min(shots, available)` rows are drawn uniformly without
/// replacement from a ChaCha20 stream seeded with `seed` on stream `c`, then
/// averaged in row order and normalized.
pub fn build_prototypes(
    aux: &EmbeddingMatrix,
    labels: &[usize],
    sample_ids: &[String],
    class_names: &[String],
    shots: usize,
    seed: u64,
) -> Result<(PrototypeBank, Vec<ShotShortfall>)> {
    if shots == 0 {
        return Err(Error::Config("shots must be at least 1".into()));
    }
    if aux.norm_state() != NormState::Unit {
        return Err(Error::Config("prototype inputs must be unit-normalized".into()));
    }
    if labels.len() != aux.rows() || sample_ids.len() != aux.rows() {
        return Err(Error::DimensionMismatch {
            context: "labels/sample ids vs embedding rows".into(),
            expected: aux.rows(),
            found: labels.len().min(sample_ids.len()),
        });
    }
    let class_count = class_names.len();
    let mut by_class = vec![Vec::new(); class_count];
    for (row, &label) in labels.iter().enumerate() {
        if label >= class_count {
            return Err(Error::ClassOutOfRange {
                class: label,
                class_count,
            });
        }
        by_class[label].push(row);
    }

    let dims = aux.dims();
    let mut values = Vec::with_capacity(class_count * dims);
    let mut provenance = Vec::with_capacity(class_count);
    let mut shortfalls = Vec::new();
    for (class, rows) in by_class.iter().enumerate() {
        if rows.is_empty() {
            return Err(Error::EmptyClass {
                class,
                name: class_names[class].clone(),
            });
        }
        let take = shots.min(rows.len());
        if take < shots {
            shortfalls.push(ShotShortfall {
                class,
                requested: shots,
                available: rows.len(),
            });
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(class as u64);
        let mut picked: Vec<usize> = index::sample(&mut rng, rows.len(), take)
            .into_iter()
            .map(|k| rows[k])
            .collect();
        picked.sort_unstable();

        let mut mean = vec![0.0f64; dims];
        for &row in &picked {
            for (m, &x) in mean.iter_mut().zip(aux.row(row)) {
                *m += f64::from(x);
            }
        }
        for m in &mut mean {
            *m /= take as f64;
        }
        let unit = normalize_f64(&mean).ok_or(Error::ZeroNormRow { row: class })?;
        values.extend(unit.iter().map(|&x| x as f32));
        provenance.push(picked.iter().map(|&r| sample_ids[r].clone()).collect());
    }

    let prototypes = EmbeddingMatrix::new(class_count, dims, values, NormState::Unit)?;
    let bank = PrototypeBank {
        encoder_id: "aux_image".into(),
        dataset_id: None,
        prototypes,
        shots,
        provenance,
        finetuned: false,
        finetune_config: None,
    };
    Ok((bank, shortfalls))
}

/// Builds prototypes from the training split of a dataset's auxiliary space.
pub fn build_from_dataset(
    dataset: &Dataset,
    shots: usize,
    seed: u64,
) -> Result<(PrototypeBank, Vec<ShotShortfall>)> {
    let aux = dataset.aux_image()?;
    let train = dataset.manifest.indices_in_split(Split::Train);
    let train_aux = if train.is_empty() {
        None
    } else {
        Some(aux.select_rows(&train)?)
    };
    let Some(train_aux) = train_aux else {
        return Err(Error::EmptyClass {
            class: 0,
            name: dataset
                .manifest
                .class_names
                .first()
                .cloned()
                .unwrap_or_default(),
        });
    };
    let labels: Vec<usize> = train.iter().map(|&i| dataset.manifest.samples[i].label).collect();
    let ids: Vec<String> = train
        .iter()
        .map(|&i| dataset.manifest.samples[i].id.clone())
        .collect();
    let (mut bank, shortfalls) = build_prototypes(
        &train_aux,
        &labels,
        &ids,
        &dataset.manifest.class_names,
        shots,
        seed,
    )?;
    bank.set_dataset_id(dataset.manifest.dataset_id.clone());
    Ok((bank, shortfalls))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrad {
    pub loss: f64,
    /// Row-major `class_count x dims` gradient with respect to the prototypes.
    pub grad: Vec<f64>,
}

/// Cross-entropy of the text/prototype ensemble over a fixed set of samples.
///
/// The loss for one sample is `-ln((p_text[y] + p_proto[y]) / 2)`; the text
/// branch is precomputed and constant, so only the prototype softmax carries
/// gradient. Prototypes are taken as given (no normalization inside the loss).
#[derive(Debug, Clone)]
pub struct EnsembleObjective {
    class_count: usize,
    dims: usize,
    tau: f64,
    text_log_probs: Vec<Vec<f64>>,
    aux: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl EnsembleObjective {
    pub fn new(
        vlm_image: &EmbeddingMatrix,
        aux_image: &EmbeddingMatrix,
        text: &TextClassEmbeddings,
        labels: &[usize],
        tau: f64,
    ) -> Result<Self> {
        check_temperature("tau", tau)?;
        let n = labels.len();
        if n == 0 {
            return Err(Error::Config("objective needs at least one sample".into()));
        }
        if vlm_image.rows() != n || aux_image.rows() != n {
            return Err(Error::DimensionMismatch {
                context: "embedding rows vs labels".into(),
                expected: n,
                found: vlm_image.rows().min(aux_image.rows()),
            });
        }
        if vlm_image.dims() != text.dims() {
            return Err(Error::DimensionMismatch {
                context: "vlm_image vs text dims".into(),
                expected: text.dims(),
                found: vlm_image.dims(),
            });
        }
        let class_count = text.class_count();
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::ClassOutOfRange {
                class: bad,
                class_count,
            });
        }
        let text_log_probs = vlm_image
            .iter_rows()
            .map(|img| {
                let logits: Vec<f64> = (0..class_count)
                    .map(|c| crate::embedstore::dot(img, text.class_embedding(c)))
                    .collect();
                log_softmax(&logits, tau)
            })
            .collect();
        let aux = aux_image
            .iter_rows()
            .map(|r| r.iter().map(|&x| f64::from(x)).collect())
            .collect();
        Ok(EnsembleObjective {
            class_count,
            dims: aux_image.dims(),
            tau,
            text_log_probs,
            aux,
            labels: labels.to_vec(),
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    fn check_shape(&self, prototypes: &[f64]) -> Result<()> {
        if prototypes.len() != self.class_count * self.dims {
            return Err(Error::DimensionMismatch {
                context: "prototype parameters".into(),
                expected: self.class_count * self.dims,
                found: prototypes.len(),
            });
        }
        Ok(())
    }

    fn proto_logits(&self, aux: &[f64], prototypes: &[f64]) -> Vec<f64> {
        prototypes
            .chunks_exact(self.dims)
            .map(|p| p.iter().zip(aux).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn loss_and_grad(&self, prototypes: &[f64]) -> Result<LossAndGrad> {
        self.check_shape(prototypes)?;
        let n = self.labels.len() as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; prototypes.len()];
        for ((aux, text_lp), &y) in self.aux.iter().zip(&self.text_log_probs).zip(&self.labels) {
            let proto_lp = log_softmax(&self.proto_logits(aux, prototypes), self.tau);
            let log_sum = log_add_exp(text_lp[y], proto_lp[y]);
            loss += std::f64::consts::LN_2 - log_sum;
            // share of the true-class ensemble mass coming from the prototype branch
            let share = (proto_lp[y] - log_sum).exp();
            for c in 0..self.class_count {
                let indicator = if c == y { 1.0 } else { 0.0 };
                let d_logit = -share * (indicator - proto_lp[c].exp()) / self.tau / n;
                if d_logit == 0.0 {
                    continue;
                }
                let row = &mut grad[c * self.dims..(c + 1) * self.dims];
                for (g, a) in row.iter_mut().zip(aux) {
                    *g += d_logit * a;
                }
            }
        }
        Ok(LossAndGrad {
            loss: loss / n,
            grad,
        })
    }

    pub fn loss(&self, prototypes: &[f64]) -> Result<f64> {
        Ok(self.loss_and_grad(prototypes)?.loss)
    }

    /// Fraction of samples whose ensemble argmax equals the label.
    pub fn accuracy(&self, prototypes: &[f64]) -> Result<f64> {
        self.check_shape(prototypes)?;
        let hits = self
            .aux
            .iter()
            .zip(&self.text_log_probs)
            .zip(&self.labels)
            .filter(|((aux, text_lp), &y)| {
                let proto = softmax(&self.proto_logits(aux, prototypes), self.tau);
                let ens: Vec<f64> = text_lp.iter().zip(&proto).map(|(t, p)| t.exp() + p).collect();
                argmax(&ens) == y
            })
            .count();
        Ok(hits as f64 / self.labels.len() as f64)
    }
}

fn prototypes_f64(bank: &PrototypeBank) -> Vec<f64> {
    bank.prototypes
        .values()
        .iter()
        .map(|&x| f64::from(x))
        .collect()
}

/// Ensemble cross-entropy and its gradient with respect to the bank's prototypes.
pub fn ensemble_ce_loss_and_grad(
    bank: &PrototypeBank,
    vlm_image: &EmbeddingMatrix,
    aux_image: &EmbeddingMatrix,
    text: &TextClassEmbeddings,
    labels: &[usize],
    tau: f64,
) -> Result<LossAndGrad> {
    let objective = EnsembleObjective::new(vlm_image, aux_image, text, labels, tau)?;
    if objective.class_count() != bank.class_count() || objective.dims() != bank.dims() {
        return Err(Error::DimensionMismatch {
            context: "prototype bank vs objective".into(),
            expected: objective.class_count() * objective.dims(),
            found: bank.class_count() * bank.dims(),
        });
    }
    objective.loss_and_grad(&prototypes_f64(bank))
}

/// Full-batch gradient descent on the prototypes.
///
/// Each epoch evaluates loss and gradient on every sample, steps
/// `P_c -= lr * grad_c`, and renormalizes `P_c`. Classes whose gradient row is
/// exactly zero are left untouched, so `lr = 0` returns the input bit for bit.
pub fn finetune_prototypes(
    bank: &PrototypeBank,
    vlm_image: &EmbeddingMatrix,
    aux_image: &EmbeddingMatrix,
    text: &TextClassEmbeddings,
    labels: &[usize],
    config: &FinetuneConfig,
) -> Result<(PrototypeBank, FinetuneTrace)> {
    config.validate()?;
    let objective = EnsembleObjective::new(vlm_image, aux_image, text, labels, config.temperature)?;
    if objective.class_count() != bank.class_count() || objective.dims() != bank.dims() {
        return Err(Error::DimensionMismatch {
            context: "prototype bank vs fine-tuning data".into(),
            expected: objective.class_count() * objective.dims(),
            found: bank.class_count() * bank.dims(),
        });
    }

    let dims = bank.dims();
    let mut params = prototypes_f64(bank);
    let mut touched = vec![false; bank.class_count()];
    let mut trace = FinetuneTrace {
        config: *config,
        loss: Vec::with_capacity(config.epochs),
        accuracy: Vec::with_capacity(config.epochs),
    };

    for _ in 0..config.epochs {
        let LossAndGrad { loss, grad } = objective.loss_and_grad(&params)?;
        trace.loss.push(loss);
        trace.accuracy.push(objective.accuracy(&params)?);
        if config.learning_rate == 0.0 {
            continue;
        }
        for (class, (row, g)) in params
            .chunks_exact_mut(dims)
            .zip(grad.chunks_exact(dims))
            .enumerate()
        {
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let stepped: Vec<f64> = row
                .iter()
                .zip(g)
                .map(|(p, g)| p - config.learning_rate * g)
                .collect();
            let unit = normalize_f64(&stepped).ok_or(Error::ZeroNormRow { row: class })?;
            row.copy_from_slice(&unit);
            touched[class] = true;
        }
    }

    let mut values = bank.prototypes.values().to_vec();
    for (class, &t) in touched.iter().enumerate() {
        if t {
            for (dst, &src) in values[class * dims..(class + 1) * dims]
                .iter_mut()
                .zip(&params[class * dims..(class + 1) * dims])
            {
                *dst = src as f32;
            }
        }
    }
    let mut out = bank.clone();
    out.prototypes = EmbeddingMatrix::new(bank.class_count(), dims, values, NormState::Unit)?;
    out.finetuned = true;
    out.finetune_config = Some(*config);
    Ok((out, trace))
}

/// Fine-tunes on the samples recorded in the bank's provenance.
pub fn finetune_from_dataset(
    bank: &PrototypeBank,
    dataset: &Dataset,
    config: &FinetuneConfig,
) -> Result<(PrototypeBank, FinetuneTrace)> {
    let index = dataset.sample_index();
    let mut rows = Vec::new();
    for (class, ids) in bank.provenance().iter().enumerate() {
        for id in ids {
            let &row = index.get(id.as_str()).ok_or_else(|| {
                Error::Manifest(format!("provenance sample {id} (class {class}) not in manifest"))
            })?;
            rows.push(row);
        }
    }
    if rows.is_empty() {
        return Err(Error::Config("prototype bank has empty provenance".into()));
    }
    let labels: Vec<usize> = rows.iter().map(|&r| dataset.manifest.samples[r].label).collect();
    let vlm = dataset.vlm_image()?.select_rows(&rows)?;
    let aux = dataset.aux_image()?.select_rows(&rows)?;
    finetune_prototypes(bank, &vlm, &aux, dataset.vlm_text()?, &labels, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|c| format!("c{c}")).collect()
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    fn unit(rows: &[&[f32]]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(rows, NormState::Unit).unwrap()
    }

    #[test]
    fn single_shot_prototype_is_the_sample() {
        let e: &[f32] = &[0.6, 0.8, 0.0];
        let (bank, short) =
            build_prototypes(&unit(&[e]), &[0], &ids(1), &names(1), 1, 3).unwrap();
        assert!(short.is_empty());
        assert_eq!(bank.prototype(0), e);
        assert_eq!(bank.provenance()[0], vec!["s0".to_string()]);
    }

    #[test]
    fn identical_samples_average_to_themselves() {
        let e: &[f32] = &[0.0, 1.0];
        let (bank, _) =
            build_prototypes(&unit(&[e, e]), &[0, 0], &ids(2), &names(1), 2, 0).unwrap();
        assert_eq!(bank.prototype(0), e);
    }

    #[test]
    fn orthogonal_pair_averages_to_diagonal() {
        let (bank, _) = build_prototypes(
            &unit(&[&[1.0, 0.0], &[0.0, 1.0]]),
            &[0, 0],
            &ids(2),
            &names(1),
            2,
            0,
        )
        .unwrap();
        for &v in bank.prototype(0) {
            assert!((f64::from(v) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-7);
        }
    }

    #[test]
    fn empty_class_is_an_error() {
        let err = build_prototypes(&unit(&[&[1.0, 0.0]]), &[0], &ids(1), &names(2), 1, 0)
            .unwrap_err();
        assert!(matches!(err, Error::EmptyClass { class: 1, .. }), "{err}");
    }

    #[test]
    fn shortfall_is_reported_and_all_samples_used() {
        let (bank, short) = build_prototypes(
            &unit(&[&[1.0, 0.0], &[0.0, 1.0]]),
            &[0, 0],
            &ids(2),
            &names(1),
            16,
            0,
        )
        .unwrap();
        assert_eq!(
            short,
            vec![ShotShortfall {
                class: 0,
                requested: 16,
                available: 2
            }]
        );
        assert_eq!(bank.provenance()[0].len(), 2);
    }

    #[test]
    fn sampling_is_seeded() {
        let rows: Vec<Vec<f32>> = (0..12)
            .map(|i| {
                let mut r = vec![0.0f32; 12];
                r[i] = 1.0;
                r
            })
            .collect();
        let m = EmbeddingMatrix::from_rows(&rows, NormState::Unit).unwrap();
        let labels = vec![0; 12];
        let a = build_prototypes(&m, &labels, &ids(12), &names(1), 4, 9).unwrap().0;
        let b = build_prototypes(&m, &labels, &ids(12), &names(1), 4, 9).unwrap().0;
        let c = build_prototypes(&m, &labels, &ids(12), &names(1), 4, 10).unwrap().0;
        assert_eq!(a, b);
        assert_eq!(a.provenance()[0].len(), 4);
        assert_ne!(a.provenance(), c.provenance());
    }

    #[test]
    fn bank_round_trips_through_disk() {
        let (mut bank, _) = build_prototypes(
            &unit(&[&[1.0, 0.0], &[0.0, 1.0]]),
            &[0, 1],
            &ids(2),
            &names(2),
            1,
            0,
        )
        .unwrap();
        bank.set_dataset_id("src");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.tvem");
        bank.save(&path).unwrap();
        assert!(dir.path().join("bank.json").exists());
        assert_eq!(PrototypeBank::load(&path).unwrap(), bank);
    }

    fn single_class_setup() -> (PrototypeBank, EmbeddingMatrix, TextClassEmbeddings) {
        let bank = PrototypeBank::from_prototypes("aux_image", unit(&[&[0.6, 0.8]])).unwrap();
        let img = unit(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let text = TextClassEmbeddings::new(unit(&[&[1.0, 0.0]]), None).unwrap();
        (bank, img, text)
    }

    #[test]
    fn single_class_loss_and_gradient_vanish() {
        let (bank, img, text) = single_class_setup();
        let lg = ensemble_ce_loss_and_grad(&bank, &img, &img, &text, &[0, 0], 0.01).unwrap();
        assert_eq!(lg.loss, 0.0);
        assert!(lg.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_class_finetune_is_identity() {
        let (bank, img, text) = single_class_setup();
        let cfg = FinetuneConfig {
            epochs: 1,
            ..Default::default()
        };
        let (out, trace) = finetune_prototypes(&bank, &img, &img, &text, &[0, 0], &cfg).unwrap();
        assert_eq!(out.prototypes(), bank.prototypes());
        assert!(out.finetuned());
        assert_eq!(trace.loss.len(), 1);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let bank =
            PrototypeBank::from_prototypes("aux_image", unit(&[&[0.6, 0.8], &[0.8, -0.6]])).unwrap();
        let img = unit(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let text = TextClassEmbeddings::new(unit(&[&[1.0, 0.0], &[0.0, 1.0]]), None).unwrap();
        let cfg = FinetuneConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        let (out, trace) = finetune_prototypes(&bank, &img, &img, &text, &[0, 1], &cfg).unwrap();
        assert_eq!(
            out.prototypes().values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            bank.prototypes().values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(trace.loss.len(), 10);
    }

    #[test]
    fn finetune_rejects_bad_configs() {
        let (bank, img, text) = single_class_setup();
        for cfg in [
            FinetuneConfig { epochs: 0, ..Default::default() },
            FinetuneConfig { learning_rate: -0.1, ..Default::default() },
            FinetuneConfig { temperature: 0.0, ..Default::default() },
        ] {
            assert!(finetune_prototypes(&bank, &img, &img, &text, &[0, 0], &cfg).is_err());
        }
    }

    #[test]
    fn gradient_pulls_true_prototype_toward_sample() {
        // aux sample equals P_0 and is orthogonal to P_1; text branch uniform
        let bank =
            PrototypeBank::from_prototypes("aux_image", unit(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]))
                .unwrap();
        let s = std::f32::consts::FRAC_1_SQRT_2;
        let vlm = unit(&[&[0.0, 0.0, 1.0]]);
        let text = TextClassEmbeddings::new(unit(&[&[s, s, 0.0], &[s, -s, 0.0]]), None).unwrap();
        let aux = unit(&[&[1.0, 0.0, 0.0]]);
        let lg = ensemble_ce_loss_and_grad(&bank, &vlm, &aux, &text, &[0], 0.5).unwrap();
        // descent direction -grad projected on the sample must be positive
        let projection: f64 = -lg.grad[0];
        assert!(projection > 0.0, "{:?}", lg.grad);
        // the wrong class is pushed away from the sample
        assert!(-lg.grad[3] < 0.0, "{:?}", lg.grad);
    }

    #[test]
    fn loss_stays_finite_at_small_temperature() {
        // true class strongly disfavoured in both branches
        let bank =
            PrototypeBank::from_prototypes("aux_image", unit(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        let text = TextClassEmbeddings::new(unit(&[&[1.0, 0.0], &[0.0, 1.0]]), None).unwrap();
        let x = unit(&[&[0.0, 1.0]]);
        let lg = ensemble_ce_loss_and_grad(&bank, &x, &x, &text, &[0], 0.001).unwrap();
        assert!(lg.loss.is_finite() && lg.loss > 100.0);
        assert!(lg.grad.iter().all(|g| g.is_finite()));
    }
}
