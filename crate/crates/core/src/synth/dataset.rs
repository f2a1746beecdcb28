//! On-disk dataset layout: `characters/<seed>/` sample folders plus a
//! tab-separated manifest.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use super::{make_sample_with, rng_for, split_dataset, Character, SampleConfig, TrainingSample};
use crate::error::{Error, Result};
use crate::geom::{read_udp, write_udp, RgbaImage};

pub const MANIFEST: &str = "manifest.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub seed: u64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub characters: usize,
    pub seed: u64,
    pub ratio: (usize, usize),
    pub sample: SampleConfig,
    /// Fraction of characters whose sample carries no dense-pose label.
    pub unlabeled_fraction: f64,
}

/// Character seeds drawn from a dataset seed; distinct by construction.
pub fn character_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = rng_for(seed, 6);
    let mut out: Vec<u64> = Vec::with_capacity(n);
    while out.len() < n {
        let s = rng.gen::<u64>() >> 16;
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

/// Generates every character's sample and writes the layout under `dir`.
pub fn write_dataset(dir: &Path, cfg: &DatasetConfig) -> Result<Vec<ManifestEntry>> {
    cfg.sample.validate()?;
    if !(0.0..=1.0).contains(&cfg.unlabeled_fraction) {
        return Err(Error::Config(format!("unlabeled fraction {} outside [0,1]", cfg.unlabeled_fraction)));
    }
    let seeds = character_seeds(cfg.seed, cfg.characters);
    let (_, val) = split_dataset(&seeds, cfg.ratio, cfg.seed)?;
    let mut entries = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let split = if val.contains(&seed) { Split::Val } else { Split::Train };
        let mut rng = rng_for(seed, 7);
        let labeled = rng.gen::<f64>() >= cfg.unlabeled_fraction;
        let sample_cfg = SampleConfig { labeled, ..cfg.sample };
        let sample = make_sample_with(&Character::from_seed(seed)?, &sample_cfg, rng.gen())?;
        SampleDir::write(&dir.join("characters").join(seed.to_string()), &sample)?;
        entries.push(ManifestEntry { seed, split });
    }
    let text: String = entries.iter().map(|e| format!("{}\t{}\n", e.seed, e.split)).collect();
    fs::write(dir.join(MANIFEST), text)?;
    Ok(entries)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    let mut offset = 0u64;
    for (i, line) in text.lines().enumerate() {
        let bad = |detail: String| Error::Parse { offset, detail: format!("{}: line {}: {detail}", path.display(), i + 1) };
        let mut cols = line.split('\t');
        let seed = cols
            .next()
            .and_then(|s| s.parse::<u64>().ok())
            .ok_or_else(|| bad(format!("expected a seed, found {line:?}")))?;
        let split = match cols.next() {
            Some("train") => Split::Train,
            Some("val") => Split::Val,
            other => return Err(bad(format!("expected train or val, found {other:?}"))),
        };
        if cols.next().is_some() {
            return Err(bad("extra columns".into()));
        }
        out.push(ManifestEntry { seed, split });
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}

/// Reads every sample of one split listed in the dataset manifest under `dir`.
pub fn read_split(dir: &Path, split: Split) -> Result<Vec<TrainingSample>> {
    read_manifest(&dir.join(MANIFEST))?
        .iter()
        .filter(|e| e.split == split)
        .map(|e| SampleDir::read(&dir.join("characters").join(e.seed.to_string())))
        .collect()
}

/// Reader and writer for one `characters/<seed>/` folder.
pub struct SampleDir;

impl SampleDir {
    pub fn write(dir: &Path, s: &TrainingSample) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (i, img) in s.sheet.iter().enumerate() {
            img.write_png(dir.join(format!("sheet_{i}.png")))?;
        }
        s.target.write_png(dir.join("target.png"))?;
        if let Some(udp) = &s.target_udp {
            write_udp(udp, dir.join("target.udpf"))?;
        }
        for (j, img) in s.augmented.iter().enumerate() {
            img.write_png(dir.join(format!("aug_{j}.png")))?;
        }
        Ok(())
    }

    fn numbered(dir: &Path, prefix: &str) -> Vec<PathBuf> {
        (0..).map(|i| dir.join(format!("{prefix}_{i}.png"))).take_while(|p| p.exists()).collect()
    }

    pub fn read(dir: &Path) -> Result<TrainingSample> {
        let sheet = Self::numbered(dir, "sheet").iter().map(RgbaImage::read_png).collect::<Result<Vec<_>>>()?;
        let augmented = Self::numbered(dir, "aug").iter().map(RgbaImage::read_png).collect::<Result<Vec<_>>>()?;
        if sheet.is_empty() || augmented.is_empty() {
            return Err(Error::Config(format!("{} holds no sheet or augmented images", dir.display())));
        }
        let udp_path = dir.join("target.udpf");
        let target_udp = if udp_path.exists() { Some(read_udp(udp_path)?) } else { None };
        Ok(TrainingSample { sheet, target: RgbaImage::read_png(dir.join("target.png"))?, target_udp, augmented })
    }
}
