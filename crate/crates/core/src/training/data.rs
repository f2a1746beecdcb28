//! Sample sources, batching and background prefetch.

use std::sync::mpsc;
use std::thread;

use rand::seq::index::sample as sample_indices;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::{RgbaImage, UdpImage};
use crate::synth::{gen_background, gen_pose, make_sample_with, rng_for, Character, SampleConfig, TrainingSample};
use crate::tensor::{Real, Tensor};

/// Anything that can deterministically produce a training sample from a seed.
pub trait SampleSource: Sync {
    fn sample(&self, seed: u64, m: usize, k: usize, labeled: bool) -> Result<TrainingSample>;
    fn resolution(&self) -> usize;
}

/// Samples rendered on demand from fresh random poses of a fixed cast.
pub struct Procedural {
    pub characters: Vec<Character>,
    pub base: SampleConfig,
}

impl SampleSource for Procedural {
    fn sample(&self, seed: u64, m: usize, k: usize, labeled: bool) -> Result<TrainingSample> {
        if self.characters.is_empty() {
            return Err(Error::Config("no characters to sample from".into()));
        }
        let mut rng = rng_for(seed, 4);
        let ch = &self.characters[rng.gen_range(0..self.characters.len())];
        make_sample_with(ch, &SampleConfig { m, k, labeled, ..self.base }, rng.gen())
    }

    fn resolution(&self) -> usize {
        self.base.resolution
    }
}

/// A fixed list of samples, such as a dataset split read from disk. Views are
/// cycled to the requested counts and labels dropped for unlabeled draws.
pub struct FixedSamples {
    samples: Vec<TrainingSample>,
    resolution: usize,
}

impl FixedSamples {
    pub fn new(samples: Vec<TrainingSample>) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptySet("samples"))?;
        let resolution = first.target.height;
        if samples.iter().any(|s| s.target.height != resolution || s.target.width != resolution) {
            return Err(Error::Config("samples must share one square resolution".into()));
        }
        Ok(FixedSamples { samples, resolution })
    }

    pub fn samples(&self) -> &[TrainingSample] {
        &self.samples
    }
}

impl SampleSource for FixedSamples {
    fn sample(&self, seed: u64, m: usize, k: usize, labeled: bool) -> Result<TrainingSample> {
        let mut rng = rng_for(seed, 4);
        let s = &self.samples[rng.gen_range(0..self.samples.len())];
        Ok(TrainingSample {
            sheet: crate::synth::fill_views(&s.sheet, m)?,
            target: s.target.clone(),
            target_udp: if labeled { s.target_udp.clone() } else { None },
            augmented: crate::synth::fill_views(&s.augmented, k)?,
        })
    }

    fn resolution(&self) -> usize {
        self.resolution
    }
}

pub struct BankCharacter {
    pub character: Character,
    pub poses: Vec<crate::geom::Pose>,
    pub views: Vec<(RgbaImage, UdpImage)>,
}

/// A small fixed set of characters, each rendered once in a fixed set of poses.
pub struct PoseBank {
    pub characters: Vec<BankCharacter>,
    pub backgrounds: Vec<RgbaImage>,
    pub resolution: usize,
}

impl PoseBank {
    pub fn render(seeds: &[u64], poses: usize, resolution: usize, backgrounds: usize, seed: u64) -> Result<Self> {
        if seeds.is_empty() || poses < 2 || backgrounds == 0 {
            return Err(Error::Config(format!(
                "a pose bank needs characters, at least 2 poses and a background (got {}, {poses}, {backgrounds})",
                seeds.len()
            )));
        }
        crate::network::check_resolution(resolution, resolution)?;
        let mut characters = Vec::with_capacity(seeds.len());
        for &s in seeds {
            let character = Character::from_seed(s)?;
            let cam = character.camera(resolution);
            let mut rng = rng_for(s ^ seed, 2);
            let mut list = Vec::with_capacity(poses);
            while list.len() < poses {
                let p = gen_pose(rng.gen(), &character.spec);
                if !list.contains(&p) {
                    list.push(p);
                }
            }
            let views = list.iter().map(|p| character.render(p, &cam)).collect::<Result<Vec<_>>>()?;
            characters.push(BankCharacter { character, poses: list, views });
        }
        let mut rng = rng_for(seed, 3);
        let backgrounds = (0..backgrounds).map(|_| gen_background(rng.gen(), resolution, resolution)).collect();
        Ok(PoseBank { characters, backgrounds, resolution })
    }

    /// Sheet views drawn from the bank around a target that is rendered elsewhere.
    fn sheet_for(&self, c: usize, exclude: Option<usize>, m: usize, rng: &mut impl Rng) -> Vec<RgbaImage> {
        let pool: Vec<usize> = (0..self.characters[c].views.len()).filter(|&i| Some(i) != exclude).collect();
        let take = m.min(pool.len());
        let mut chosen: Vec<usize> = sample_indices(rng, pool.len(), take).into_iter().map(|i| pool[i]).collect();
        while chosen.len() < m {
            chosen.push(chosen[chosen.len() % take]);
        }
        chosen.iter().map(|&i| self.characters[c].views[i].0.clone()).collect()
    }

    fn augment(&self, target: &RgbaImage, k: usize, rng: &mut impl Rng) -> Result<Vec<RgbaImage>> {
        (0..k).map(|_| target.over(&self.backgrounds[rng.gen_range(0..self.backgrounds.len())])).collect()
    }

    /// Every rendered pose of every character once as a target, with a sheet
    /// drawn from the character's other poses.
    pub fn pool(&self, m: usize, k: usize, seed: u64) -> Result<Vec<TrainingSample>> {
        let mut rng = rng_for(seed, 4);
        let mut out = Vec::new();
        for (c, bc) in self.characters.iter().enumerate() {
            for (t, (target, udp)) in bc.views.iter().enumerate() {
                let sheet = self.sheet_for(c, Some(t), m, &mut rng);
                let augmented = self.augment(target, k, &mut rng)?;
                out.push(TrainingSample { sheet, target: target.clone(), target_udp: Some(udp.clone()), augmented });
            }
        }
        Ok(out)
    }

    /// Samples whose targets are fresh poses of the bank's characters that the
    /// bank never rendered; sheets come from the bank.
    pub fn held_out(&self, per_character: usize, m: usize, seed: u64) -> Result<Vec<TrainingSample>> {
        let mut out = Vec::new();
        let mut rng = rng_for(seed, 4);
        for (c, bc) in self.characters.iter().enumerate() {
            let cam = bc.character.camera(self.resolution);
            let mut fresh = Vec::new();
            while fresh.len() < per_character {
                let p = gen_pose(rng.gen(), &bc.character.spec);
                if !bc.poses.contains(&p) && !fresh.contains(&p) {
                    fresh.push(p);
                }
            }
            for p in &fresh {
                let (target, udp) = bc.character.render(p, &cam)?;
                let sheet = self.sheet_for(c, None, m, &mut rng);
                let augmented = self.augment(&target, 1, &mut rng)?;
                out.push(TrainingSample { sheet, target, target_udp: Some(udp), augmented });
            }
        }
        Ok(out)
    }
}

impl SampleSource for PoseBank {
    fn sample(&self, seed: u64, m: usize, k: usize, labeled: bool) -> Result<TrainingSample> {
        let mut rng = rng_for(seed, 4);
        let c = rng.gen_range(0..self.characters.len());
        let t = rng.gen_range(0..self.characters[c].views.len());
        let (target, udp) = &self.characters[c].views[t];
        let sheet = self.sheet_for(c, Some(t), m, &mut rng);
        let augmented = self.augment(target, k, &mut rng)?;
        Ok(TrainingSample { sheet, target: target.clone(), target_udp: labeled.then(|| udp.clone()), augmented })
    }

    fn resolution(&self) -> usize {
        self.resolution
    }
}

/// Stacked network inputs for one optimisation step.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T: Real> {
    /// `[B * m, 4, H, W]`
    pub sheet: Tensor<T>,
    /// `[B * k, 3, H, W]`
    pub augmented: Tensor<T>,
    /// `[B, 4, H, W]`
    pub target: Tensor<T>,
    /// Labels of the samples in `labeled`, stacked in that order.
    pub udp: Option<Tensor<T>>,
    pub labeled: Vec<usize>,
    pub m: usize,
    pub k: usize,
}

fn rgb_of<T: Real>(img: &RgbaImage) -> Tensor<T> {
    let t = img.to_tensor::<T>();
    let [_, _, h, w] = t.dims4().expect("image tensor");
    let data = t.data()[..3 * h * w].to_vec();
    Tensor::new(vec![1, 3, h, w], data).expect("shape matches data")
}

impl<T: Real> Batch<T> {
    pub fn from_samples(samples: &[TrainingSample], m: usize, k: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptySet("batch"));
        }
        let mut sheet = Vec::new();
        let mut augmented = Vec::new();
        let mut target = Vec::new();
        let mut udp = Vec::new();
        let mut labeled = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            let views = crate::synth::fill_views(&s.sheet, m)?;
            sheet.extend(views.iter().map(|v| v.to_tensor::<T>()));
            let aug = crate::synth::fill_views(&s.augmented, k)?;
            augmented.extend(aug.iter().map(rgb_of::<T>));
            target.push(s.target.to_tensor::<T>());
            if let Some(u) = &s.target_udp {
                udp.push(u.to_tensor::<T>());
                labeled.push(i);
            }
        }
        let stack = |v: &[Tensor<T>]| Tensor::stack_batch(&v.iter().collect::<Vec<_>>());
        Ok(Batch {
            sheet: stack(&sheet)?,
            augmented: stack(&augmented)?,
            target: stack(&target)?,
            udp: if udp.is_empty() { None } else { Some(stack(&udp)?) },
            labeled,
            m,
            k,
        })
    }

    pub fn len(&self) -> usize {
        self.target.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Seed of batch item `index` at `iteration`; independent of how batches are produced.
pub fn sample_seed(seed: u64, iteration: u64, index: usize) -> u64 {
    let mut rng = rng_for(seed ^ iteration.wrapping_mul(0x9e37_79b9_7f4a_7c15), 4 + index as u64);
    rng.gen()
}

#[derive(Clone, Copy, Debug)]
pub struct BatchPlan {
    pub seed: u64,
    pub batch_size: usize,
    pub m: usize,
    pub k: usize,
    pub unlabeled_fraction: f64,
}

impl BatchPlan {
    pub fn build<T: Real>(&self, source: &dyn SampleSource, iteration: u64) -> Result<Batch<T>> {
        let samples = (0..self.batch_size)
            .map(|i| {
                let s = sample_seed(self.seed, iteration, i);
                let labeled = rng_for(s, 7).gen::<f64>() >= self.unlabeled_fraction;
                source.sample(s, self.m, self.k, labeled)
            })
            .collect::<Result<Vec<_>>>()?;
        Batch::from_samples(&samples, self.m, self.k)
    }
}

/// Runs `consume` on the batches of `iterations` in order while a worker
/// thread prepares up to `depth` batches ahead.
pub fn with_prefetch<T: Real + Send>(
    source: &dyn SampleSource,
    plan: BatchPlan,
    iterations: std::ops::Range<u64>,
    depth: usize,
    mut consume: impl FnMut(u64, Batch<T>) -> Result<()>,
) -> Result<()> {
    if depth == 0 {
        for it in iterations {
            consume(it, plan.build(source, it)?)?;
        }
        return Ok(());
    }
    thread::scope(|scope| {
        let (tx, rx) = mpsc::sync_channel::<(u64, Result<Batch<T>>)>(depth);
        let range = iterations.clone();
        scope.spawn(move || {
            for it in range {
                if tx.send((it, plan.build(source, it))).is_err() {
                    break;
                }
            }
        });
        for (it, batch) in rx {
            consume(it, batch?)?;
        }
        Ok(())
    })
}
