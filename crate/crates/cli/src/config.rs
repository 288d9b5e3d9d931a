use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use sdtseg::raster::{read_field_stack, read_mask, LabelMask};
use sdtseg::trainer::{generate_synthetic, Dataset, SynthSpec, TrainConfig};
use sdtseg::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Image/mask file pairs. Images are 3-channel SDTF stacks, masks are PGM.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSet {
    pub images: Vec<PathBuf>,
    pub masks: Vec<PathBuf>,
}

/// Everything that affects a run's results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synth: SynthSpec,
    /// Fraction of the synthetic images held out for validation.
    pub val_fraction: f64,
    pub precision: Precision,
    pub out_dir: PathBuf,
    /// Class count for file masks; inferred from the data when absent.
    pub classes: Option<usize>,
    /// File datasets replace the synthetic generator when given.
    pub train_files: Option<FileSet>,
    pub val_files: Option<FileSet>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
            val_fraction: 0.2,
            precision: Precision::F32,
            out_dir: PathBuf::from("run"),
            classes: None,
            train_files: None,
            val_files: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.train.validate()?;
        self.synth.validate()?;
        if !(0.0..1.0).contains(&self.val_fraction) {
            bail!("val_fraction {} outside [0, 1)", self.val_fraction);
        }
        if self.train_files.is_none() && self.val_files.is_some() {
            bail!("val_files given without train_files");
        }
        Ok(())
    }

    /// Training and validation sets.
    pub fn datasets<T: Real>(&self) -> anyhow::Result<(Dataset<T>, Dataset<T>)> {
        match &self.train_files {
            Some(files) => {
                let train = load_files(files, self.classes)?;
                let classes = self.classes.or(train.classes());
                let val = match &self.val_files {
                    Some(v) => load_files(v, classes)?,
                    None => Dataset::new(vec![], vec![])?,
                };
                Ok((train, val))
            }
            None => Ok(generate_synthetic::<T>(&self.synth)?.split(self.val_fraction, self.synth.seed)),
        }
    }
}

pub fn load_image<T: Real>(path: &Path) -> anyhow::Result<Tensor<T>> {
    let stack = read_field_stack::<T>(path).with_context(|| format!("reading image {}", path.display()))?;
    if stack.channels() != 3 {
        bail!("{}: expected 3 channels, found {}", path.display(), stack.channels());
    }
    Ok(stack.to_tensor())
}

fn load_files<T: Real>(files: &FileSet, classes: Option<usize>) -> anyhow::Result<Dataset<T>> {
    if files.images.len() != files.masks.len() {
        bail!("{} images but {} masks", files.images.len(), files.masks.len());
    }
    let images = files.images.iter().map(|p| load_image::<T>(p)).collect::<anyhow::Result<Vec<_>>>()?;
    let mut masks = files
        .masks
        .iter()
        .map(|p| read_mask(p, classes).with_context(|| format!("reading mask {}", p.display())))
        .collect::<anyhow::Result<Vec<LabelMask>>>()?;
    if classes.is_none() {
        // inferred per file; agree on the largest
        let c = masks.iter().map(LabelMask::classes).max().unwrap_or(2);
        masks = masks.into_iter().map(|m| m.with_classes(c)).collect::<Result<_, _>>()?;
    }
    Ok(Dataset::new(images, masks)?)
}
