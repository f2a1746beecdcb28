//! Joint detector and renderer training, evaluation and ablations.

mod data;
mod losses;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub use data::{
    sample_seed, with_prefetch, BankCharacter, Batch, BatchPlan, FixedSamples, PoseBank, Procedural, SampleSource,
};
pub use losses::{
    coefficients, composite_white, composite_white_tensor, loss_cons, loss_mask, loss_perc, loss_photo, loss_udp,
    total_loss, LossParts, LossWeights, PerceptualProxy, BCE_CLAMP, PROXY_SEED,
};

use crate::error::{Error, Result};
use crate::network::{
    decode_opt_state, detect_averaged, Bound, encode, encode_opt_state, load_checkpoint, render, save_checkpoint, Model,
    ModelConfig,
};
use crate::synth::{fill_views, TrainingSample};
use crate::tensor::{AdamW, AdamWConfig, OptState, Real, Tape, Tensor, Var};

/// Consecutive steps above the threshold before training is abandoned.
pub const DIVERGENCE_STEPS: u32 = 100;
pub const DIVERGENCE_FACTOR: f64 = 10.0;

pub const METRICS_HEADER: &str = "iter\tl_udp\tl_mask\tl_photo\tl_perc\tl_cons\ttotal";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    /// Sheet views per training sample.
    pub m: usize,
    /// Augmented detector views per target.
    pub k: usize,
    /// Sheet views at evaluation.
    pub n: usize,
    pub iterations: u64,
    pub batch_size: usize,
    pub resolution: usize,
    pub model: ModelConfig,
    pub optimizer: AdamWConfig,
    pub weights: LossWeights,
    pub seed: u64,
    pub unlabeled_fraction: f64,
    pub log_every: u64,
    /// Batches prepared ahead by a worker thread; 0 builds them inline.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            m: 4,
            k: 4,
            n: 4,
            iterations: 1000,
            batch_size: 4,
            resolution: 64,
            model: ModelConfig::default(),
            optimizer: AdamWConfig::default(),
            weights: LossWeights::default(),
            seed: 0,
            unlabeled_fraction: 0.0,
            log_every: 10,
            prefetch: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.k == 0 || self.n == 0 {
            return Err(Error::Config(format!("m, k and n must be at least 1 (got {}, {}, {})", self.m, self.k, self.n)));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_size and log_every must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.unlabeled_fraction) {
            return Err(Error::Config(format!("unlabeled_fraction {} outside [0,1]", self.unlabeled_fraction)));
        }
        crate::network::check_resolution(self.resolution, self.resolution)?;
        self.model.validate()?;
        self.optimizer.validate()?;
        self.weights.validate()
    }

    pub fn plan(&self) -> BatchPlan {
        BatchPlan {
            seed: self.seed,
            batch_size: self.batch_size,
            m: self.m,
            k: self.k,
            unlabeled_fraction: self.unlabeled_fraction,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    /// Steps completed when these were recorded.
    pub iteration: u64,
    pub parts: LossParts,
    pub total: f64,
    pub seconds: f64,
}

impl Metrics {
    /// One metrics stream line, without the trailing newline.
    pub fn line(&self) -> String {
        let p = &self.parts;
        format!("{}\t{}\t{}\t{}\t{}\t{}\t{}", self.iteration, p.udp, p.mask, p.photo, p.perc, p.cons, self.total)
    }

    pub fn parse_line(line: &str) -> Result<Metrics> {
        let bad = || Error::Parse { offset: 0, detail: format!("bad metrics line {line:?}") };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 7 {
            return Err(bad());
        }
        let iteration = cols[0].parse().map_err(|_| bad())?;
        let v = cols[1..].iter().map(|c| c.parse::<f64>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?;
        Ok(Metrics {
            iteration,
            parts: LossParts { udp: v[0], mask: v[1], photo: v[2], perc: v[3], cons: v[4] },
            total: v[5],
            seconds: 0.0,
        })
    }
}

/// Running sums over a logging window.
#[derive(Clone, Copy, Debug, Default)]
struct Window {
    sum: LossParts,
    total: f64,
    count: u64,
}

impl Window {
    fn add(&mut self, p: &LossParts, total: f64) {
        self.sum.udp += p.udp;
        self.sum.mask += p.mask;
        self.sum.perc += p.perc;
        self.sum.photo += p.photo;
        self.sum.cons += p.cons;
        self.total += total;
        self.count += 1;
    }

    fn mean(&self, iteration: u64, seconds: f64) -> Metrics {
        let c = self.count.max(1) as f64;
        let s = &self.sum;
        Metrics {
            iteration,
            parts: LossParts { udp: s.udp / c, mask: s.mask / c, perc: s.perc / c, photo: s.photo / c, cons: s.cons / c },
            total: self.total / c,
            seconds,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DivergenceGuard {
    pub initial: Option<f64>,
    pub over: u32,
}

impl DivergenceGuard {
    pub fn observe(&mut self, iteration: u64, total: f64) -> Result<()> {
        let initial = *self.initial.get_or_insert(total);
        if total > DIVERGENCE_FACTOR * initial {
            self.over += 1;
        } else {
            self.over = 0;
        }
        if self.over >= DIVERGENCE_STEPS {
            return Err(Error::Divergence { iteration, total, initial, steps: self.over });
        }
        Ok(())
    }
}

/// How often the supervised losses were evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LossCalls {
    pub udp: u64,
    pub mask: u64,
}

/// Bookkeeping stored next to a checkpoint so that training can resume exactly.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
struct ResumeState {
    iteration: u64,
    guard: DivergenceGuard,
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const STATE_FILE: &str = "train_state.json";
pub const METRICS_FILE: &str = "metrics.tsv";

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub state: OptState<f32>,
    pub iteration: u64,
    pub guard: DivergenceGuard,
    pub calls: LossCalls,
    optimizer: AdamW,
    proxy: PerceptualProxy<f32>,
}

/// Loss graph of one batch.
pub struct JointLoss<'t, T: Real> {
    pub total: Var<'t, T>,
    pub parts: LossParts,
    /// Whether the supervised detector terms were evaluated.
    pub supervised: bool,
}

/// The full training objective of `batch`: detector over the augmented views,
/// renderer over the sheet, and every weighted loss term.
pub fn joint_loss<'t, T: Real>(
    tape: &'t Tape<T>,
    vars: &Bound<'t, T>,
    cfg: &ModelConfig,
    weights: &LossWeights,
    proxy: &PerceptualProxy<T>,
    batch: &Batch<T>,
) -> Result<JointLoss<'t, T>> {
    let b = batch.len();
    let rgb = tape.constant(batch.augmented.clone());
    let (mean, each) = detect_averaged(vars, cfg, rgb, batch.k)?;
    let enc = encode(vars, tape.constant(batch.sheet.clone()), batch.m)?;
    let rendered = render(vars, cfg, &enc, mean)?;

    let coef = coefficients(weights, true);
    let photo = loss_photo(rendered, &batch.target)?;
    let perc = if coef[2] > 0.0 { Some(loss_perc(proxy, rendered, &batch.target)?) } else { None };
    let cons = loss_cons(each, mean, batch.k)?;
    let mut parts = LossParts {
        photo: photo.value().item().to_f64c(),
        perc: perc.map_or(0.0, |v| v.value().item().to_f64c()),
        cons: cons.value().item().to_f64c(),
        ..Default::default()
    };
    let mut terms = vec![(photo, coef[3]), (cons, coef[4])];
    if let Some(p) = perc {
        terms.push((p, coef[2]));
    }
    if let Some(udp) = &batch.udp {
        // supervised terms cover only labeled samples, weighted by their share of the batch
        let picked: Vec<Var<'t, T>> = batch.labeled.iter().map(|&i| mean.slice_batch(i, 1)).collect::<Result<_>>()?;
        let pred = tape.stack_batch(&picked)?;
        let share = batch.labeled.len() as f64 / b as f64;
        let (l_udp, _) = loss_udp(pred, udp)?;
        let l_mask = loss_mask(pred, udp)?;
        parts.udp = l_udp.value().item().to_f64c();
        parts.mask = l_mask.value().item().to_f64c();
        terms.push((l_udp, coef[0] * share));
        terms.push((l_mask, coef[1] * share));
    }
    let mut total: Option<Var<'t, T>> = None;
    for (v, c) in terms {
        if c == 0.0 {
            continue;
        }
        let term = v.scale(c);
        total = Some(match total {
            None => term,
            Some(t) => t.add(&term)?,
        });
    }
    let total = total.unwrap_or_else(|| tape.constant(Tensor::scalar(T::zero())));
    Ok(JointLoss { total, parts, supervised: batch.udp.is_some() })
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model, config.seed)?;
        let state = model.params.opt_state();
        Ok(Trainer {
            optimizer: AdamW::new(config.optimizer)?,
            proxy: PerceptualProxy::new(PROXY_SEED),
            config,
            model,
            state,
            iteration: 0,
            guard: DivergenceGuard::default(),
            calls: LossCalls::default(),
        })
    }

    /// One optimisation step on `batch`; returns the loss parts and total.
    pub fn train_step(&mut self, batch: &Batch<f32>) -> Result<(LossParts, f64)> {
        let tape = Tape::new();
        let params = self.model.params.clone();
        let vars = params.bind(&tape, true);
        let fwd = joint_loss(&tape, &vars, &self.config.model, &self.config.weights, &self.proxy, batch)?;
        if fwd.supervised {
            self.calls.udp += 1;
            self.calls.mask += 1;
        }
        let has_gt = batch.udp.is_some();
        // reject non-finite parts before any parameter moves
        total_loss(&fwd.parts, &self.config.weights, has_gt)?;
        let total = fwd.total.value().item() as f64;
        if !total.is_finite() {
            return Err(Error::NonFinite("total".into()));
        }
        let grads = vars.grads(&tape.backward(fwd.total)?);
        drop(vars);
        let (names, tensors) = self.model.params.split_mut();
        self.optimizer.step(names, tensors, &grads, &mut self.state)?;
        self.iteration += 1;
        self.guard.observe(self.iteration, total)?;
        Ok((fwd.parts, total))
    }

    /// Trains until `config.iterations`, calling `log` with window means every
    /// `log_every` steps and at the end.
    pub fn train(&mut self, source: &dyn SampleSource, mut log: impl FnMut(&Metrics) -> Result<()>) -> Result<Vec<Metrics>> {
        if source.resolution() != self.config.resolution {
            return Err(Error::Config(format!(
                "data resolution {} differs from configured {}",
                source.resolution(),
                self.config.resolution
            )));
        }
        let start = Instant::now();
        let mut window = Window::default();
        let mut out = Vec::new();
        let plan = self.config.plan();
        let (every, end) = (self.config.log_every, self.config.iterations);
        with_prefetch(source, plan, self.iteration..end, self.config.prefetch, |_, batch| {
            let (parts, total) = self.train_step(&batch)?;
            window.add(&parts, total);
            if self.iteration.is_multiple_of(every) || self.iteration == end {
                let m = window.mean(self.iteration, start.elapsed().as_secs_f64());
                log(&m)?;
                out.push(m);
                window = Window::default();
            }
            Ok(())
        })?;
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_checkpoint(&self.model.params, dir.join(CHECKPOINT_FILE))?;
        fs::write(dir.join(OPTIMIZER_FILE), encode_opt_state(&self.model.params, &self.state))?;
        let st = ResumeState { iteration: self.iteration, guard: self.guard };
        fs::write(dir.join(STATE_FILE), serde_json::to_string_pretty(&st).expect("plain data"))?;
        Ok(())
    }

    /// Restores parameters, optimizer moments and step counters from `dir`.
    pub fn resume(config: TrainConfig, dir: &Path) -> Result<Self> {
        let mut t = Trainer::new(config)?;
        load_checkpoint(dir.join(CHECKPOINT_FILE), &mut t.model.params)?;
        t.state = decode_opt_state(&fs::read(dir.join(OPTIMIZER_FILE))?, &t.model.params)?;
        let path = dir.join(STATE_FILE);
        let text = fs::read_to_string(&path)?;
        let st: ResumeState = serde_json::from_str(&text).map_err(|e| json_error(&path, e))?;
        t.iteration = st.iteration;
        t.guard = st.guard;
        Ok(t)
    }
}

pub(crate) fn json_error(path: &Path, e: serde_json::Error) -> Error {
    Error::Json { path: path.to_path_buf(), line: e.line(), column: e.column(), detail: e.to_string() }
}

/// Appends metrics lines to a file, writing the header first when the file is new.
pub struct MetricsWriter {
    path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        if !path.exists() {
            fs::write(&path, format!("{METRICS_HEADER}\n"))?;
        }
        Ok(MetricsWriter { path })
    }

    pub fn append(&self, m: &Metrics) -> Result<()> {
        let mut f = fs::OpenOptions::new().append(true).open(&self.path)?;
        writeln!(f, "{}", m.line())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Vec<Metrics>> {
        let text = fs::read_to_string(path)?;
        text.lines().skip(1).filter(|l| !l.is_empty()).map(Metrics::parse_line).collect()
    }
}

/// Mean losses over `samples` rendered from `n` sheet views with one detection each.
pub fn evaluate(model: &Model<f32>, samples: &[TrainingSample], n: usize) -> Result<Metrics> {
    Ok(evaluate_each(model, samples, n)?.0)
}

/// Like [`evaluate`], also returning each sample's photometric loss.
pub fn evaluate_each(model: &Model<f32>, samples: &[TrainingSample], n: usize) -> Result<(Metrics, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    if n == 0 {
        return Err(Error::Config("evaluation needs at least one sheet view".into()));
    }
    let proxy = PerceptualProxy::<f32>::new(PROXY_SEED);
    let start = Instant::now();
    let mut window = Window::default();
    let mut photos = Vec::with_capacity(samples.len());
    for s in samples {
        let mut s = s.clone();
        s.sheet = fill_views(&s.sheet, n)?;
        let batch = Batch::<f32>::from_samples(std::slice::from_ref(&s), n, 1)?;
        let tape = Tape::new();
        let p = model.params.bind(&tape, false);
        let (udp, _) = detect_averaged(&p, &model.config, tape.constant(batch.augmented.clone()), 1)?;
        let enc = encode(&p, tape.constant(batch.sheet.clone()), n)?;
        let out = render(&p, &model.config, &enc, udp)?;
        let mut parts = LossParts {
            photo: loss_photo(out, &batch.target)?.value().item() as f64,
            perc: loss_perc(&proxy, out, &batch.target)?.value().item() as f64,
            ..Default::default()
        };
        if let Some(gt) = &batch.udp {
            parts.udp = loss_udp(udp, gt)?.0.value().item() as f64;
            parts.mask = loss_mask(udp, gt)?.value().item() as f64;
        }
        photos.push(parts.photo);
        window.add(&parts, total_loss(&parts, &LossWeights::default(), batch.udp.is_some())?);
    }
    Ok((window.mean(0, start.elapsed().as_secs_f64()), photos))
}

/// Step of the central differences in [`pipeline_gradcheck`].
const PIPELINE_STEP: f64 = 1e-6;

/// One parameter element compared by [`pipeline_gradcheck`].
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl ParamCheck {
    pub fn relative_error(&self) -> f64 {
        crate::tensor::gradcheck::relative_error(self.analytic, self.numeric)
    }
}

/// Compares the tape gradient of the whole training objective with central
/// differences on `count` randomly chosen parameter elements, in double precision.
pub fn pipeline_gradcheck(cfg: ModelConfig, resolution: usize, count: usize, seed: u64) -> Result<Vec<ParamCheck>> {
    use rand::Rng;
    let source = Procedural {
        characters: vec![crate::synth::Character::from_seed(seed)?],
        base: crate::synth::SampleConfig { crop: false, ..crate::synth::SampleConfig::new(2, 2, resolution) },
    };
    let plan = BatchPlan { seed, batch_size: 1, m: 2, k: 2, unlabeled_fraction: 0.0 };
    let batch: Batch<f64> = plan.build(&source, 0)?;
    let mut model = Model::<f64>::new(cfg, seed)?;
    let proxy = PerceptualProxy::<f64>::new(PROXY_SEED);
    let weights = LossWeights::default();
    let loss = |m: &Model<f64>| -> Result<f64> {
        let tape = Tape::new();
        let vars = m.params.bind(&tape, false);
        Ok(joint_loss(&tape, &vars, &m.config, &weights, &proxy, &batch)?.total.value().item())
    };
    let grads = {
        let tape = Tape::new();
        let vars = model.params.bind(&tape, true);
        let total = joint_loss(&tape, &vars, &model.config, &weights, &proxy, &batch)?.total;
        vars.grads(&tape.backward(total)?)
    };
    let total: usize = model.params.tensors().iter().map(Tensor::numel).sum();
    let mut rng = crate::synth::rng_for(seed, 9);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut flat = rng.gen_range(0..total);
        let mut t = 0;
        while flat >= model.params.tensors()[t].numel() {
            flat -= model.params.tensors()[t].numel();
            t += 1;
        }
        let x0 = model.params.tensors()[t].data()[flat];
        model.params.tensors_mut()[t].data_mut()[flat] = x0 + PIPELINE_STEP;
        let up = loss(&model)?;
        model.params.tensors_mut()[t].data_mut()[flat] = x0 - PIPELINE_STEP;
        let down = loss(&model)?;
        model.params.tensors_mut()[t].data_mut()[flat] = x0;
        out.push(ParamCheck {
            name: model.params.names()[t].clone(),
            index: flat,
            analytic: grads[t].data()[flat],
            numeric: (up - down) / (2.0 * PIPELINE_STEP),
        });
    }
    Ok(out)
}

/// One configuration of an ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    pub label: String,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AblationOutcome {
    Finished(Metrics),
    Divergence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub config: AblationConfig,
    pub outcome: AblationOutcome,
}

pub const ABLATION_HEADER: &str =
    "config\tm\tn\tmessage_blocks\tgrid_sample\tcinn\tmask\tphoto\tperc\tL_photo\tL_perc\tL_udp\tL_mask";

/// Trains every configuration on `source` and evaluates it on `eval`.
/// A diverged run becomes a row, not an error.
pub fn ablation_run(grid: &[AblationConfig], source: &dyn SampleSource, eval: &[TrainingSample]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(grid.len());
    for cfg in grid {
        let mut trainer = Trainer::new(cfg.train)?;
        let outcome = match trainer.train(source, |_| Ok(())) {
            Ok(_) => AblationOutcome::Finished(evaluate(&trainer.model, eval, cfg.train.n)?),
            Err(Error::Divergence { .. }) => AblationOutcome::Divergence,
            Err(e) => return Err(e),
        };
        log::info!("ablation {} finished: {outcome:?}", cfg.label);
        rows.push(AblationRow { config: cfg.clone(), outcome });
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let t = &r.config.train;
        let w = &t.weights;
        let on = |b: bool| if b { "on" } else { "off" };
        let _ = write!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.config.label,
            t.m,
            t.n,
            t.model.message_blocks,
            on(t.model.grid_sample),
            on(t.model.cinn),
            on(w.alpha > 0.0),
            on(w.gamma > 0.0),
            on(w.beta > 0.0)
        );
        match &r.outcome {
            AblationOutcome::Finished(m) => {
                let p = &m.parts;
                let _ = writeln!(out, "\t{:.6}\t{:.6}\t{:.6}\t{:.6}", p.photo, p.perc, p.udp, p.mask);
            }
            AblationOutcome::Divergence => out.push_str("\tDivergence\tDivergence\tDivergence\tDivergence\n"),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guard_trips_after_sustained_blowup() {
        let mut g = DivergenceGuard::default();
        g.observe(1, 1.0).unwrap();
        for i in 0..99 {
            g.observe(i + 2, 11.0).unwrap();
        }
        g.observe(200, 5.0).unwrap();
        assert_eq!(g.over, 0);
        for i in 0..99 {
            g.observe(i, 11.0).unwrap();
        }
        assert!(matches!(g.observe(400, 11.0), Err(Error::Divergence { steps: 100, .. })));
    }

    #[test]
    fn metrics_line_round_trip() {
        let m = Metrics {
            iteration: 7,
            parts: LossParts { udp: 0.1, mask: 1.0 / 3.0, perc: 2e-9, photo: 0.5, cons: 0.0 },
            total: 1.25,
            seconds: 3.0,
        };
        let back = Metrics::parse_line(&m.line()).unwrap();
        assert_eq!(back, Metrics { seconds: 0.0, ..m });
        assert!(Metrics::parse_line("1\t2").is_err());
    }

    #[test]
    fn config_rejects_nonsense() {
        assert!(TrainConfig { k: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { resolution: 50, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { unlabeled_fraction: 1.5, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
