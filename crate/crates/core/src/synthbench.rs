//! Synthetic embedding spaces with a controllable modality gap.
//!
//! Class `c` is centred on the standard basis direction `e_c`. Image samples
//! in each space are `normalize(e_c + noise)`; text embeddings are
//! `normalize(e_c + gap * u + noise)` where `u = e_C` is orthogonal to every
//! centre, so raising the gap pushes the text region away from the images.
//!
//! Randomness: ChaCha20 (`rand_chacha::ChaCha20Rng::seed_from_u64(seed)`)
//! with one stream per class and purpose (`4 * class + k`, k = 0 vlm image,
//! 1 aux image, 2 text, 3 split). Standard normals come from the Box-Muller
//! transform on 53-bit uniforms `(next_u64() >> 11) * 2^-53`, consuming both
//! outputs of each pair in order (cosine first).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::embedstore::{
    normalize_f64, Dataset, DatasetManifest, EmbeddingMatrix, EncoderSpace, NormState, SampleRecord, Split,
    TextClassEmbeddings,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub dims: usize,
    pub samples_per_class: usize,
    /// Per-coordinate noise standard deviation of the VLM image embeddings.
    pub vlm_image_spread: f64,
    /// Per-coordinate noise standard deviation of the auxiliary image embeddings.
    pub aux_image_spread: f64,
    /// Per-coordinate noise standard deviation of the text embeddings.
    pub text_noise: f64,
    /// Length of the shared offset added to every text embedding before normalization.
    pub gap_magnitude: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 10,
            dims: 64,
            samples_per_class: 40,
            vlm_image_spread: 0.9,
            aux_image_spread: 0.45,
            text_noise: 0.35,
            gap_magnitude: 2.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("synthetic data needs at least 2 classes".into()));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be at least 1".into()));
        }
        if self.dims < self.classes {
            return Err(Error::Config(format!(
                "dims ({}) must be >= classes ({})",
                self.dims, self.classes
            )));
        }
        if self.gap_magnitude > 0.0 && self.dims < self.classes + 1 {
            return Err(Error::Config(format!(
                "a nonzero gap needs dims >= classes + 1 ({} < {})",
                self.dims,
                self.classes + 1
            )));
        }
        for (name, v) in [
            ("vlm_image_spread", self.vlm_image_spread),
            ("aux_image_spread", self.aux_image_spread),
            ("text_noise", self.text_noise),
            ("gap_magnitude", self.gap_magnitude),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Standard normal variates via Box-Muller on a ChaCha20 stream.
struct GaussianStream {
    rng: ChaCha20Rng,
    spare: Option<f64>,
}

impl GaussianStream {
    fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        GaussianStream { rng, spare: None }
    }

    fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - u lies in (0, 1], keeping the log finite
        let radius = (-2.0 * (1.0 - self.uniform()).ln()).sqrt();
        let angle = std::f64::consts::TAU * self.uniform();
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }
}

const STREAM_VLM: u64 = 0;
const STREAM_AUX: u64 = 1;
const STREAM_TEXT: u64 = 2;
const STREAM_SPLIT: u64 = 3;

fn noisy_unit(center: &[f64], spread: f64, noise: &mut GaussianStream) -> Result<Vec<f32>> {
    let v: Vec<f64> = center.iter().map(|&c| c + spread * noise.next()).collect();
    let unit = normalize_f64(&v)
        .ok_or_else(|| Error::Config("sampled a zero vector; change the seed".into()))?;
    Ok(unit.into_iter().map(|x| x as f32).collect())
}

pub type SyntheticDataset = Dataset;

/// Generates a manifest and the three embedding spaces for `config`.
pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let SynthConfig {
        classes,
        dims,
        samples_per_class,
        seed,
        ..
    } = *config;
    let basis = |i: usize| -> Vec<f64> {
        let mut v = vec![0.0; dims];
        v[i] = 1.0;
        v
    };

    let n = classes * samples_per_class;
    let mut vlm = Vec::with_capacity(n * dims);
    let mut aux = Vec::with_capacity(n * dims);
    let mut text = Vec::with_capacity(classes * dims);
    let mut samples = Vec::with_capacity(n);
    let train_count = samples_per_class.div_ceil(2);

    for class in 0..classes {
        let center = basis(class);
        let stream = |k: u64| GaussianStream::new(seed, 4 * class as u64 + k);

        let mut vlm_noise = stream(STREAM_VLM);
        let mut aux_noise = stream(STREAM_AUX);
        for _ in 0..samples_per_class {
            vlm.extend(noisy_unit(&center, config.vlm_image_spread, &mut vlm_noise)?);
        }
        for _ in 0..samples_per_class {
            aux.extend(noisy_unit(&center, config.aux_image_spread, &mut aux_noise)?);
        }

        let mut shifted = center.clone();
        if config.gap_magnitude > 0.0 {
            shifted[classes] += config.gap_magnitude;
        }
        text.extend(noisy_unit(&shifted, config.text_noise, &mut stream(STREAM_TEXT))?);

        let mut order: Vec<usize> = (0..samples_per_class).collect();
        let mut split_rng = ChaCha20Rng::seed_from_u64(seed);
        split_rng.set_stream(4 * class as u64 + STREAM_SPLIT);
        order.shuffle(&mut split_rng);
        let mut split = vec![Split::Test; samples_per_class];
        for &k in &order[..train_count] {
            split[k] = Split::Train;
        }
        samples.extend((0..samples_per_class).map(|k| SampleRecord {
            id: format!("c{class}-s{k}"),
            label: class,
            split: split[k],
        }));
    }

    let mut metadata = BTreeMap::new();
    metadata.insert(
        "synth_config".to_owned(),
        serde_json::to_value(config).expect("config serializes"),
    );
    let manifest = DatasetManifest {
        dataset_id: format!("synth-seed{seed}"),
        class_names: (0..classes).map(|c| format!("class_{c}")).collect(),
        samples,
        embedding_refs: [
            EncoderSpace::VlmImage,
            EncoderSpace::VlmText,
            EncoderSpace::AuxImage,
        ]
        .into_iter()
        .map(|space| (space, format!("{space}.tvem")))
        .collect(),
        metadata,
    };
    Dataset::new(
        manifest,
        Some(EmbeddingMatrix::new(n, dims, vlm, NormState::Unit)?),
        Some(TextClassEmbeddings::new(
            EmbeddingMatrix::new(classes, dims, text, NormState::Unit)?,
            None,
        )?),
        Some(EmbeddingMatrix::new(n, dims, aux, NormState::Unit)?),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedstore::{dot, validate_manifest};
    use crate::scorers::zeroshot_predict;

    fn noiseless() -> SynthConfig {
        SynthConfig {
            classes: 3,
            dims: 5,
            samples_per_class: 4,
            vlm_image_spread: 0.0,
            aux_image_spread: 0.0,
            text_noise: 0.0,
            gap_magnitude: 0.0,
            seed: 1,
        }
    }

    #[test]
    fn noiseless_samples_sit_on_centres() {
        let ds = generate_synthetic(&noiseless()).unwrap();
        let vlm = ds.vlm_image().unwrap();
        let aux = ds.aux_image().unwrap();
        let text = ds.vlm_text().unwrap();
        for (i, s) in ds.manifest.samples.iter().enumerate() {
            let zs = zeroshot_predict(vlm.row(i), text, 0.01).unwrap();
            assert_eq!(zs.predicted, s.label);
            assert_eq!(dot(aux.row(i), text.class_embedding(s.label)), 1.0);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig::default();
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.vlm_image, b.vlm_image);
        assert_eq!(a.aux_image, b.aux_image);
        assert_eq!(a.vlm_text, b.vlm_text);
        let c = generate_synthetic(&SynthConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.vlm_image, c.vlm_image);
    }

    #[test]
    fn gap_separates_text_from_images() {
        let cfg = SynthConfig {
            gap_magnitude: 2.0,
            ..noiseless()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let vlm = ds.vlm_image().unwrap();
        let aux = ds.aux_image().unwrap();
        let text = ds.vlm_text().unwrap();
        let expected = 1.0 / 5f64.sqrt();
        let mut min_text = f64::INFINITY;
        for (i, s) in ds.manifest.samples.iter().enumerate() {
            let own = dot(vlm.row(i), text.class_embedding(s.label));
            assert!((own - expected).abs() < 1e-6, "{own}");
            for c in 0..cfg.classes {
                min_text = min_text.min(dot(vlm.row(i), text.class_embedding(c)));
            }
            assert_eq!(dot(aux.row(i), vlm.row(i)), 1.0);
        }
        assert!(min_text < 1.0);
    }

    #[test]
    fn emitted_files_validate() {
        let ds = generate_synthetic(&SynthConfig::default()).unwrap();
        assert!(validate_manifest(&ds.manifest, &ds.loaded_spaces()).is_empty());
        let train = ds.manifest.indices_in_split(Split::Train).len();
        assert_eq!(train, 10 * 20);
    }

    #[test]
    fn rejects_invalid_configs() {
        let base = noiseless();
        for cfg in [
            SynthConfig { classes: 1, ..base },
            SynthConfig { dims: 2, ..base },
            SynthConfig { dims: 3, gap_magnitude: 1.0, ..base },
            SynthConfig { samples_per_class: 0, ..base },
            SynthConfig { text_noise: f64::NAN, ..base },
        ] {
            assert!(generate_synthetic(&cfg).is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn gaussian_stream_moments() {
        let mut g = GaussianStream::new(3, 0);
        let draws: Vec<f64> = (0..200_000).map(|_| g.next()).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / draws.len() as f64;
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((var - 1.0).abs() < 0.01, "{var}");
    }

    fn mean_within_class(ds: &Dataset, m: &EmbeddingMatrix) -> f64 {
        // average similarity of each sample to its class centre e_c
        let total: f64 = ds
            .manifest
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| f64::from(m.row(i)[s.label]))
            .sum();
        total / ds.manifest.samples.len() as f64
    }

    #[test]
    fn aux_space_is_tighter_than_vlm_space() {
        for seed in 1..=5 {
            let ds = generate_synthetic(&SynthConfig {
                seed,
                ..Default::default()
            })
            .unwrap();
            let aux = mean_within_class(&ds, ds.aux_image().unwrap());
            let vlm = mean_within_class(&ds, ds.vlm_image().unwrap());
            assert!(aux > vlm, "seed {seed}: aux {aux} vlm {vlm}");
        }
    }

    #[test]
    fn text_image_similarity_falls_with_gap() {
        let mean_text_image = |gap: f64| {
            let ds = generate_synthetic(&SynthConfig {
                gap_magnitude: gap,
                ..Default::default()
            })
            .unwrap();
            let vlm = ds.vlm_image().unwrap();
            let text = ds.vlm_text().unwrap();
            let mut total = 0.0;
            for r in vlm.iter_rows() {
                for c in 0..text.class_count() {
                    total += dot(r, text.class_embedding(c));
                }
            }
            total / (vlm.rows() * text.class_count()) as f64
        };
        let (g0, g1, g2) = (mean_text_image(0.0), mean_text_image(1.0), mean_text_image(2.0));
        assert!(g0 > g1 && g1 > g2, "{g0} {g1} {g2}");
    }
}
