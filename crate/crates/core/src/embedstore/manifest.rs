use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{l2_normalize, read_embeddings, write_embeddings, EmbeddingMatrix, NormState, TextClassEmbeddings};
use crate::error::{Error, Result};

/// Metadata key holding the prompt template used for the text embeddings.
pub const TEXT_TEMPLATE_KEY: &str = "text_template";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderSpace {
    /// Image embeddings from the vision-language model.
    VlmImage,
    /// Class prompt embeddings from the vision-language model.
    VlmText,
    /// Image embeddings from the auxiliary vision encoder.
    AuxImage,
}

impl EncoderSpace {
    pub const ALL: [EncoderSpace; 3] = [
        EncoderSpace::VlmImage,
        EncoderSpace::VlmText,
        EncoderSpace::AuxImage,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EncoderSpace::VlmImage => "vlm_image",
            EncoderSpace::VlmText => "vlm_text",
            EncoderSpace::AuxImage => "aux_image",
        }
    }
}

impl fmt::Display for EncoderSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub label: usize,
    pub split: Split,
}

/// Class vocabulary, per-sample labels and splits, and the embedding files
/// for each encoder space. Image files hold one row per sample in manifest
/// order; the text file holds one row per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub class_names: Vec<String>,
    pub samples: Vec<SampleRecord>,
    pub embedding_refs: BTreeMap<EncoderSpace, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl DatasetManifest {
    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
    }

    pub fn to_json_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn indices_in_split(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NoClasses,
    LabelOutOfRange {
        sample_id: String,
        label: usize,
        class_count: usize,
    },
    DuplicateSampleId(String),
    TextRowsMismatch {
        rows: usize,
        class_count: usize,
    },
    SampleRowsMismatch {
        space: EncoderSpace,
        rows: usize,
        samples: usize,
    },
    TextDimsMismatch {
        image_dims: usize,
        text_dims: usize,
    },
    UnreferencedSpace(EncoderSpace),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoClasses => write!(f, "class vocabulary is empty"),
            Violation::LabelOutOfRange {
                sample_id,
                label,
                class_count,
            } => write!(
                f,
                "label out of range: sample {sample_id} has label {label}, class count is {class_count}"
            ),
            Violation::DuplicateSampleId(id) => write!(f, "duplicate sample id {id}"),
            Violation::TextRowsMismatch { rows, class_count } => {
                write!(f, "text rows ≠ class count ({rows} vs {class_count})")
            }
            Violation::SampleRowsMismatch {
                space,
                rows,
                samples,
            } => write!(f, "{space} rows ≠ sample count ({rows} vs {samples})"),
            Violation::TextDimsMismatch {
                image_dims,
                text_dims,
            } => write!(
                f,
                "vlm_image dims ≠ vlm_text dims ({image_dims} vs {text_dims})"
            ),
            Violation::UnreferencedSpace(space) => {
                write!(f, "{space} embeddings supplied but not referenced by the manifest")
            }
        }
    }
}

/// Checks labels, sample ids, and row-count alignment of the loaded embeddings.
/// An empty result means the manifest is consistent.
pub fn validate_manifest(
    manifest: &DatasetManifest,
    loaded: &[(EncoderSpace, &EmbeddingMatrix)],
) -> Vec<Violation> {
    let mut violations = Vec::new();
    let class_count = manifest.class_count();
    if class_count == 0 {
        violations.push(Violation::NoClasses);
    }

    let mut seen = HashSet::new();
    for s in &manifest.samples {
        if s.label >= class_count {
            violations.push(Violation::LabelOutOfRange {
                sample_id: s.id.clone(),
                label: s.label,
                class_count,
            });
        }
        if !seen.insert(s.id.as_str()) {
            violations.push(Violation::DuplicateSampleId(s.id.clone()));
        }
    }

    for &(space, matrix) in loaded {
        if !manifest.embedding_refs.contains_key(&space) {
            violations.push(Violation::UnreferencedSpace(space));
        }
        match space {
            EncoderSpace::VlmText => {
                if matrix.rows() != class_count {
                    violations.push(Violation::TextRowsMismatch {
                        rows: matrix.rows(),
                        class_count,
                    });
                }
            }
            EncoderSpace::VlmImage | EncoderSpace::AuxImage => {
                if matrix.rows() != manifest.samples.len() {
                    violations.push(Violation::SampleRowsMismatch {
                        space,
                        rows: matrix.rows(),
                        samples: manifest.samples.len(),
                    });
                }
            }
        }
    }

    let dims_of = |wanted: EncoderSpace| {
        loaded
            .iter()
            .find(|(space, _)| *space == wanted)
            .map(|(_, m)| m.dims())
    };
    if let (Some(image_dims), Some(text_dims)) =
        (dims_of(EncoderSpace::VlmImage), dims_of(EncoderSpace::VlmText))
    {
        if image_dims != text_dims {
            violations.push(Violation::TextDimsMismatch {
                image_dims,
                text_dims,
            });
        }
    }

    violations
}

/// A manifest together with its loaded, unit-normalized embeddings.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub vlm_image: Option<EmbeddingMatrix>,
    pub vlm_text: Option<TextClassEmbeddings>,
    pub aux_image: Option<EmbeddingMatrix>,
}

fn ensure_unit(matrix: EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    match matrix.norm_state() {
        NormState::Unit => Ok(matrix),
        NormState::Raw => l2_normalize(&matrix),
    }
}

impl Dataset {
    /// Assembles a dataset from in-memory parts, normalizing raw matrices and
    /// rejecting any manifest violation.
    pub fn new(
        manifest: DatasetManifest,
        vlm_image: Option<EmbeddingMatrix>,
        vlm_text: Option<TextClassEmbeddings>,
        aux_image: Option<EmbeddingMatrix>,
    ) -> Result<Self> {
        let dataset = Dataset {
            manifest,
            vlm_image: vlm_image.map(ensure_unit).transpose()?,
            vlm_text,
            aux_image: aux_image.map(ensure_unit).transpose()?,
        };
        let violations = validate_manifest(&dataset.manifest, &dataset.loaded_spaces());
        if !violations.is_empty() {
            let joined = violations
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("; ");
            return Err(Error::Manifest(joined));
        }
        Ok(dataset)
    }

    /// Loads a manifest and every embedding file it references. Relative
    /// paths are resolved against the manifest's directory.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest = DatasetManifest::from_json_file(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new(""));
        let resolve = |space: EncoderSpace| -> Option<PathBuf> {
            manifest.embedding_refs.get(&space).map(|p| root.join(p))
        };

        let vlm_image = resolve(EncoderSpace::VlmImage)
            .map(read_embeddings)
            .transpose()?;
        let aux_image = resolve(EncoderSpace::AuxImage)
            .map(read_embeddings)
            .transpose()?;
        let template = manifest
            .metadata
            .get(TEXT_TEMPLATE_KEY)
            .and_then(|v| v.as_str())
            .map(str::to_owned);
        let vlm_text = resolve(EncoderSpace::VlmText)
            .map(read_embeddings)
            .transpose()?
            .map(|m| TextClassEmbeddings::new(m, template))
            .transpose()?;

        Dataset::new(manifest, vlm_image, vlm_text, aux_image)
    }

    /// Writes the manifest to `dir/manifest.json` and each present space to
    /// `dir/<space>.tvem`, rewriting `embedding_refs` to match. Returns the
    /// manifest path.
    pub fn save(&mut self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.manifest.embedding_refs.clear();
        let spaces: [(EncoderSpace, Option<&EmbeddingMatrix>); 3] = [
            (EncoderSpace::VlmImage, self.vlm_image.as_ref()),
            (EncoderSpace::VlmText, self.vlm_text.as_ref().map(|t| t.matrix())),
            (EncoderSpace::AuxImage, self.aux_image.as_ref()),
        ];
        for (space, matrix) in spaces {
            if let Some(m) = matrix {
                let file = format!("{space}.tvem");
                write_embeddings(m, dir.join(&file))?;
                self.manifest.embedding_refs.insert(space, file);
            }
        }
        if let Some(template) = self.vlm_text.as_ref().and_then(|t| t.template()) {
            self.manifest.metadata.insert(
                TEXT_TEMPLATE_KEY.to_owned(),
                serde_json::Value::String(template.to_owned()),
            );
        }
        let path = dir.join("manifest.json");
        self.manifest.to_json_file(&path)?;
        Ok(path)
    }

    pub fn loaded_spaces(&self) -> Vec<(EncoderSpace, &EmbeddingMatrix)> {
        let mut out = Vec::new();
        if let Some(m) = &self.vlm_image {
            out.push((EncoderSpace::VlmImage, m));
        }
        if let Some(t) = &self.vlm_text {
            out.push((EncoderSpace::VlmText, t.matrix()));
        }
        if let Some(m) = &self.aux_image {
            out.push((EncoderSpace::AuxImage, m));
        }
        out
    }

    pub fn class_count(&self) -> usize {
        self.manifest.class_count()
    }

    pub fn vlm_image(&self) -> Result<&EmbeddingMatrix> {
        self.vlm_image
            .as_ref()
            .ok_or_else(|| Error::MissingSpace(EncoderSpace::VlmImage.to_string()))
    }

    pub fn vlm_text(&self) -> Result<&TextClassEmbeddings> {
        self.vlm_text
            .as_ref()
            .ok_or_else(|| Error::MissingSpace(EncoderSpace::VlmText.to_string()))
    }

    pub fn aux_image(&self) -> Result<&EmbeddingMatrix> {
        self.aux_image
            .as_ref()
            .ok_or_else(|| Error::MissingSpace(EncoderSpace::AuxImage.to_string()))
    }

    pub fn sample_index(&self) -> HashMap<&str, usize> {
        self.manifest
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(labels: &[usize], class_count: usize) -> DatasetManifest {
        DatasetManifest {
            dataset_id: "toy".into(),
            class_names: (0..class_count).map(|c| format!("class{c}")).collect(),
            samples: labels
                .iter()
                .enumerate()
                .map(|(i, &label)| SampleRecord {
                    id: format!("s{i}"),
                    label,
                    split: if i % 2 == 0 { Split::Train } else { Split::Test },
                })
                .collect(),
            embedding_refs: [
                (EncoderSpace::VlmImage, "vlm_image.tvem".to_owned()),
                (EncoderSpace::VlmText, "vlm_text.tvem".to_owned()),
            ]
            .into_iter()
            .collect(),
            metadata: BTreeMap::new(),
        }
    }

    fn unit_rows(n: usize, dims: usize) -> EmbeddingMatrix {
        let rows: Vec<Vec<f32>> = (0..n)
            .map(|i| {
                let mut r = vec![0.0; dims];
                r[i % dims] = 1.0;
                r
            })
            .collect();
        EmbeddingMatrix::from_rows(&rows, NormState::Unit).unwrap()
    }

    #[test]
    fn consistent_manifest_has_no_violations() {
        let m = manifest(&[0, 1, 1, 0], 2);
        let img = unit_rows(4, 3);
        let txt = unit_rows(2, 3);
        let v = validate_manifest(
            &m,
            &[(EncoderSpace::VlmImage, &img), (EncoderSpace::VlmText, &txt)],
        );
        assert!(v.is_empty(), "{v:?}");
    }

    #[test]
    fn label_equal_to_class_count_is_flagged() {
        let m = manifest(&[0, 2], 2);
        let v = validate_manifest(&m, &[]);
        assert_eq!(v.len(), 1);
        assert!(v[0].to_string().starts_with("label out of range"));
    }

    #[test]
    fn short_text_file_is_flagged() {
        let m = manifest(&[0, 1, 2], 3);
        let txt = unit_rows(2, 3);
        let v = validate_manifest(&m, &[(EncoderSpace::VlmText, &txt)]);
        assert_eq!(v.len(), 1);
        assert!(v[0].to_string().starts_with("text rows ≠ class count"));
    }

    #[test]
    fn duplicate_ids_and_row_mismatch() {
        let mut m = manifest(&[0, 1, 1], 2);
        m.samples[2].id = "s0".into();
        let img = unit_rows(2, 3);
        let v = validate_manifest(&m, &[(EncoderSpace::VlmImage, &img)]);
        assert!(v.contains(&Violation::DuplicateSampleId("s0".into())));
        assert!(v.contains(&Violation::SampleRowsMismatch {
            space: EncoderSpace::VlmImage,
            rows: 2,
            samples: 3
        }));
    }

    #[test]
    fn manifest_json_uses_documented_field_names() {
        let m = manifest(&[0], 1);
        let json: serde_json::Value = serde_json::to_value(&m).unwrap();
        let obj = json.as_object().unwrap();
        for key in ["dataset_id", "class_names", "samples", "embedding_refs"] {
            assert!(obj.contains_key(key), "missing {key}");
        }
        let sample = &json["samples"][0];
        assert_eq!(sample["id"], "s0");
        assert_eq!(sample["label"], 0);
        assert_eq!(sample["split"], "train");
        assert_eq!(json["embedding_refs"]["vlm_image"], "vlm_image.tvem");
    }

    #[test]
    fn save_and_load_normalizes_raw_inputs() {
        let m = manifest(&[0, 1], 2);
        let raw = EmbeddingMatrix::from_rows(&[[3.0f32, 4.0], [0.0, 2.0]], NormState::Raw).unwrap();
        let text = TextClassEmbeddings::new(unit_rows(2, 2), Some("a photo of a [CLASS]".into()))
            .unwrap();
        let mut ds = Dataset::new(m, Some(raw), Some(text), None).unwrap();
        assert_eq!(ds.vlm_image.as_ref().unwrap().row(0), &[0.6, 0.8]);

        let dir = tempfile::tempdir().unwrap();
        let path = ds.save(dir.path()).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back.vlm_image, ds.vlm_image);
        assert_eq!(back.vlm_text().unwrap().template(), Some("a photo of a [CLASS]"));
        assert!(back.aux_image().is_err());
    }
}
