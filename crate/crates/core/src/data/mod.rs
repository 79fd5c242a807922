//! Datasets, on-disk formats, negative-pair construction and batch sampling.

pub mod format;
mod pairs;
mod schedule;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::EmbeddingBatch;

pub use format::{
    load_embeddings, load_embeddings_with_meta, save_embeddings, save_embeddings_with_meta,
    Metadata,
};
pub use pairs::{build_shuffled_pairs, seeded_derangement, ShuffledPair};
pub use schedule::{epoch_batches, mixed_schedule, BatchDescriptor, BatchKind, SamplerConfig};
pub use synth::{generate_synthetic, ground_truth_similarity, GeneratorConfig, SyntheticData};

/// Positionally aligned image-text pairs: row `i` of every batch describes
/// the same pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalDataset {
    /// Raw inputs to the student encoder.
    pub text_features: EmbeddingBatch,
    pub image_teacher: EmbeddingBatch,
    pub text_teachers: Vec<EmbeddingBatch>,
    /// Latent semantics, known only for synthetic data.
    pub ground_truth: Option<EmbeddingBatch>,
}

impl MultimodalDataset {
    pub fn len(&self) -> usize {
        self.text_features.n()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let mut sizes = vec![("image_teacher", self.image_teacher.n())];
        sizes.extend(self.text_teachers.iter().map(|t| ("text_teacher", t.n())));
        if let Some(gt) = &self.ground_truth {
            sizes.push(("ground_truth", gt.n()));
        }
        for (name, m) in sizes {
            if m != n {
                return Err(Error::shape("MultimodalDataset", n, format!("{m} rows in {name}")));
            }
        }
        if self.text_teachers.is_empty() {
            return Err(Error::Empty("dataset has no text teachers"));
        }
        Ok(())
    }
}

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

fn split_files(split: &str, n_text_teachers: usize) -> Vec<(String, String)> {
    let mut files = vec![
        (format!("{split}.text_features"), format!("{split}_text_features.dalr")),
        (format!("{split}.image_teacher"), format!("{split}_image_teacher.dalr")),
    ];
    for k in 0..n_text_teachers {
        files.push((
            format!("{split}.text_teacher.{k}"),
            format!("{split}_text_teacher_{k}.dalr"),
        ));
    }
    files.push((format!("{split}.ground_truth"), format!("{split}_ground_truth.dalr")));
    files
}

/// Writes every split of a synthetic corpus plus `manifest.txt` listing
/// the files. Returns the manifest path.
pub fn write_synthetic(dir: &Path, data: &SyntheticData, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Metadata::new();
    manifest.insert("seed".into(), seed.to_string());
    manifest.insert(
        "text_teachers".into(),
        data.train.text_teachers.len().to_string(),
    );
    for (split, ds) in SPLITS.iter().zip([&data.train, &data.dev, &data.test]) {
        let files = split_files(split, ds.text_teachers.len());
        let mut batches = vec![&ds.text_features, &ds.image_teacher];
        batches.extend(ds.text_teachers.iter());
        let gt = ds
            .ground_truth
            .as_ref()
            .ok_or(Error::Empty("synthetic split without ground truth"))?;
        batches.push(gt);
        for ((key, file), batch) in files.into_iter().zip(batches) {
            let mut meta = Metadata::new();
            meta.insert(format::META_SOURCE.into(), key.clone());
            meta.insert(format::META_NORMALIZED.into(), batch.is_normalized().to_string());
            meta.insert(format::META_SEED.into(), seed.to_string());
            save_embeddings_with_meta(batch, &dir.join(&file), &meta)?;
            manifest.insert(key, file);
        }
    }
    let path = dir.join(MANIFEST_FILE);
    format::write_metadata(&path, &manifest)?;
    Ok(path)
}

/// Loads one split listed in a manifest. Ground truth is optional.
pub fn load_split(manifest_path: &Path, split: &str) -> Result<MultimodalDataset> {
    let manifest = format::read_metadata(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let get = |key: String| -> Result<PathBuf> {
        manifest
            .get(&key)
            .map(|f| dir.join(f))
            .ok_or_else(|| Error::format(manifest_path, format!("missing key `{key}`")))
    };
    let k: usize = manifest
        .get("text_teachers")
        .map(|v| v.parse())
        .transpose()
        .map_err(|_| Error::format(manifest_path, "text_teachers is not an integer"))?
        .unwrap_or(1);
    let gt_key = format!("{split}.ground_truth");
    let ground_truth = match manifest.get(&gt_key) {
        Some(_) => Some(load_embeddings(&get(gt_key)?)?),
        None => None,
    };
    let ds = MultimodalDataset {
        text_features: load_embeddings(&get(format!("{split}.text_features"))?)?,
        image_teacher: load_embeddings(&get(format!("{split}.image_teacher"))?)?,
        text_teachers: (0..k)
            .map(|i| load_embeddings(&get(format!("{split}.text_teacher.{i}"))?))
            .collect::<Result<_>>()?,
        ground_truth,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_and_reload_manifest() {
        let cfg = GeneratorConfig {
            n_pairs: 6,
            n_dev: 3,
            n_test: 3,
            ..Default::default()
        };
        let data = generate_synthetic(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_synthetic(dir.path(), &data, cfg.seed).unwrap();
        let train = load_split(&manifest, "train").unwrap();
        assert_eq!(train.len(), 6);
        assert_eq!(train.text_teachers.len(), 2);
        assert!(train.image_teacher.is_normalized());
        let dev = load_split(&manifest, "dev").unwrap();
        assert_eq!(dev.len(), 3);
        assert!(load_split(&manifest, "nope").is_err());
    }
}
