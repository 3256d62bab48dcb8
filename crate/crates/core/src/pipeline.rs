//! Training loop: frozen registration, both networks, irrelevance + defect
//! loss, reverse-mode gradients and Adam updates, with JSON-lines logging and
//! resumable checkpoints.
//!
//! Sample order is a pure function of `(seed, epoch)`, so a run resumed from
//! a checkpoint replays exactly the batches the uninterrupted run would see.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::{self, ContainerHeader};
use crate::diffnet::{self, ArchConfig, NetParams};
use crate::error::{Error, Result};
use crate::image::{DefectMap, ImageBuf, Plane};
use crate::losses::{self, IrrelevanceLoss, LossComponents};
use crate::registration::{self, PoseSim2};
use crate::simgen::{self, GenConfig, LoadedPair, SamplePair};

pub const CHECKPOINT_KIND: &str = "checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MODEL_KIND: &str = "model";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    /// Template aligned by the registration stage.
    #[default]
    Estimated,
    /// Template warped with the recorded pose.
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Generated dataset directory; absent means pairs are generated on the fly.
    pub dataset: Option<PathBuf>,
    /// Generator used on the fly (its `seed` keys the stream).
    pub generator: GenConfig,
    /// Pairs per epoch when generating on the fly.
    pub pairs_per_epoch: usize,
    pub epochs: usize,
    /// Stops early after this many optimizer steps.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub sigma_bins: f64,
    pub irrelevance_temperature: f64,
    /// Multiplies the irrelevance term of the total loss.
    pub irrelevance_weight: f64,
    pub border_margin: usize,
    pub alignment: Alignment,
    pub seed: u64,
    /// Steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Sums per-sample gradients in sample order.
    pub deterministic: bool,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            generator: GenConfig {
                image_size: 128,
                translation_px: [-25.0, 25.0],
                ..GenConfig::default()
            },
            pairs_per_epoch: 2000,
            epochs: 20,
            max_steps: None,
            batch_size: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            sigma_bins: losses::DEFAULT_SIGMA_BINS,
            irrelevance_temperature: losses::DEFAULT_IRRELEVANCE_TEMPERATURE,
            irrelevance_weight: 1.0,
            border_margin: losses::DEFAULT_BORDER_MARGIN,
            alignment: Alignment::Estimated,
            seed: 0,
            checkpoint_every: 0,
            deterministic: true,
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.irrelevance_weight >= 0.0 && self.irrelevance_weight.is_finite()) {
            return bad(format!("irrelevance_weight must be nonnegative, got {}", self.irrelevance_weight));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("beta1, beta2 must lie in [0, 1) and epsilon be positive".into());
        }
        if self.dataset.is_none() {
            self.generator.validate()?;
            if self.pairs_per_epoch == 0 {
                return bad("pairs_per_epoch must be positive".into());
            }
        }
        self.arch.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }
}

/// One training example.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    pub template: ImageBuf,
    pub source: ImageBuf,
    pub gt_mask: DefectMap,
    pub gt_pose: Option<PoseSim2>,
}

impl TrainSample {
    pub fn from_pair(id: String, pair: SamplePair) -> Self {
        Self {
            id,
            template: pair.template,
            source: pair.source,
            gt_mask: pair.gt_mask,
            gt_pose: Some(pair.gt_pose),
        }
    }

    fn from_loaded(pair: LoadedPair) -> Result<Self> {
        let gt_mask = pair
            .gt_mask
            .ok_or_else(|| Error::InvalidArgument(format!("pair {} has no mask", pair.id)))?;
        Ok(Self {
            id: pair.id,
            template: pair.template,
            source: pair.source,
            gt_mask,
            gt_pose: pair.gt_pose,
        })
    }
}

/// A sample whose template is already in the source frame.
#[derive(Debug, Clone)]
struct Prepared {
    id: String,
    aligned: ImageBuf,
    source: ImageBuf,
    gt_mask: DefectMap,
}

fn prepare(sample: &TrainSample, alignment: Alignment) -> Result<Prepared> {
    let aligned = match alignment {
        Alignment::Estimated => registration::register(&sample.template, &sample.source)?.aligned_template,
        Alignment::GroundTruth => {
            let pose = sample.gt_pose.ok_or_else(|| {
                Error::InvalidArgument(format!("pair {} has no pose for ground-truth alignment", sample.id))
            })?;
            registration::warp_sim2(&sample.template, &pose)?
        }
    };
    Ok(Prepared {
        id: sample.id.clone(),
        aligned,
        source: sample.source.clone(),
        gt_mask: sample.gt_mask.clone(),
    })
}

/// Where batches come from.
pub enum TrainData {
    /// Fixed pairs; templates are aligned once up front.
    Fixed(Vec<TrainSample>),
    /// Pairs generated per `(epoch, index)`.
    Stream(GenConfig, usize),
}

enum Source {
    Fixed(Vec<Prepared>),
    Stream(GenConfig, usize),
}

impl Source {
    fn len(&self) -> usize {
        match self {
            Source::Fixed(v) => v.len(),
            Source::Stream(_, n) => *n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub irr: f64,
    pub def: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
    pub irr: f64,
    pub def: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: Vec<StepStats>,
    /// Only epochs completed within this session.
    pub epochs: Vec<EpochStats>,
}

pub struct Trainer {
    cfg: TrainConfig,
    params: NetParams,
    m: Vec<f64>,
    v: Vec<f64>,
    step: usize,
    source: Source,
    irr: IrrelevanceLoss,
    image_size: (usize, usize),
    out_dir: Option<PathBuf>,
    log: Option<BufWriter<File>>,
}

impl Trainer {
    /// Fresh parameters from `cfg.seed`; data from `cfg.dataset` or the stream.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let data = load_data(&cfg)?;
        Self::with_data(cfg, data)
    }

    pub fn with_data(cfg: TrainConfig, data: TrainData) -> Result<Self> {
        let params = diffnet::init_params(cfg.seed, cfg.arch)?;
        let n = params.param_count();
        Self::assemble(cfg, params, vec![0.0; n], vec![0.0; n], 0, data)
    }

    /// Resumes from a checkpoint using the configuration stored in it.
    pub fn resume(path: &Path) -> Result<Self> {
        let (cfg, _) = read_checkpoint_config(path)?;
        let data = load_data(&cfg)?;
        Self::resume_with_data(path, data)
    }

    pub fn resume_with_data(path: &Path, data: TrainData) -> Result<Self> {
        let (header, blocks) = container::read(path)?;
        if header.kind != CHECKPOINT_KIND {
            return Err(Error::corrupt(path, format!("expected a checkpoint, found kind {:?}", header.kind)));
        }
        let (cfg, step) = checkpoint_extra(path, &header)?;
        let mut blocks = blocks.into_iter();
        let params = NetParams::from_parts(path, header, blocks.next())?;
        let n = params.param_count();
        let m = blocks.next().filter(|b| b.len() == n);
        let v = blocks.next().filter(|b| b.len() == n);
        let (Some(m), Some(v)) = (m, v) else {
            return Err(Error::corrupt(path, "missing optimizer state"));
        };
        if cfg.arch != params.arch {
            return Err(Error::corrupt(path, "configuration and parameters disagree on architecture"));
        }
        Self::assemble(cfg, params, m, v, step, data)
    }

    fn assemble(cfg: TrainConfig, params: NetParams, m: Vec<f64>, v: Vec<f64>, step: usize, data: TrainData) -> Result<Self> {
        cfg.validate()?;
        let source = match data {
            TrainData::Fixed(samples) => {
                if samples.is_empty() {
                    return Err(Error::InvalidArgument("training set is empty".into()));
                }
                let alignment = cfg.alignment;
                Source::Fixed(samples.par_iter().map(|s| prepare(s, alignment)).collect::<Result<_>>()?)
            }
            TrainData::Stream(g, n) => Source::Stream(g, n),
        };
        let size = match &source {
            Source::Fixed(v) => v[0].source.shape(),
            Source::Stream(g, _) => (g.image_size, g.image_size),
        };
        let target = losses::target_one_peak(256, cfg.sigma_bins)?;
        let irr = IrrelevanceLoss::new(size.0, size.1, target, cfg.irrelevance_temperature)?;
        Ok(Self {
            cfg,
            params,
            m,
            v,
            step,
            source,
            irr,
            image_size: size,
            out_dir: None,
            log: None,
        })
    }

    /// Directory for the log, checkpoints and diagnostics. Appends to an
    /// existing log.
    pub fn set_output_dir(&mut self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log_path = dir.join("train_log.jsonl");
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        self.log = Some(BufWriter::new(file));
        self.out_dir = Some(dir.to_path_buf());
        Ok(())
    }

    /// Changes how long a resumed run goes on; the data order is unaffected.
    pub fn override_limits(&mut self, epochs: Option<usize>, max_steps: Option<usize>, checkpoint_every: Option<usize>) -> Result<()> {
        if let Some(e) = epochs {
            self.cfg.epochs = e;
        }
        if let Some(m) = max_steps {
            self.cfg.max_steps = Some(m);
        }
        if let Some(c) = checkpoint_every {
            self.cfg.checkpoint_every = c;
        }
        self.cfg.validate()
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &NetParams {
        &self.params
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.source.len().div_ceil(self.cfg.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        let all = self.steps_per_epoch() * self.cfg.epochs;
        self.cfg.max_steps.map_or(all, |m| m.min(all))
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// Indices of the batch taken at global step `step`.
    fn batch_indices(&self, step: usize) -> (usize, Vec<usize>) {
        let spe = self.steps_per_epoch();
        let (epoch, b) = (step / spe, step % spe);
        let n = self.source.len();
        let lo = b * self.cfg.batch_size;
        let hi = (lo + self.cfg.batch_size).min(n);
        let idx = match &self.source {
            Source::Fixed(_) => {
                let mut order: Vec<usize> = (0..n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(simgen::pair_seed(self.cfg.seed, epoch as u64));
                order.shuffle(&mut rng);
                order[lo..hi].to_vec()
            }
            Source::Stream(..) => (lo..hi).collect(),
        };
        (epoch, idx)
    }

    fn fetch(&self, epoch: usize, idx: &[usize]) -> Result<Vec<Prepared>> {
        match &self.source {
            Source::Fixed(v) => Ok(idx.iter().map(|&i| v[i].clone()).collect()),
            Source::Stream(g, _) => {
                let epoch_seed = simgen::pair_seed(g.seed, epoch as u64);
                idx.par_iter()
                    .map(|&i| {
                        let seed = simgen::pair_seed(epoch_seed, i as u64);
                        let sample = TrainSample::from_pair(format!("e{epoch}-{i}"), simgen::gen_pair(seed, g)?);
                        prepare(&sample, self.cfg.alignment)
                    })
                    .collect()
            }
        }
    }

    fn sample_grad(&self, s: &Prepared) -> Result<(LossComponents, Vec<f64>)> {
        let p = &self.params;
        let input = diffnet::network_input(&p.arch, &s.aligned, &s.source)?;
        let dt = diffnet::difference_forward_taped(p, input)?;
        let (o_t, o_s) = dt.outputs();
        let mt = diffnet::mask_forward_taped(p, &o_t, &o_s)?;
        let w = self.cfg.irrelevance_weight;
        let (irr, mut g_t, mut g_s) = if w != 0.0 {
            let (v, mut g_t, mut g_s) = self.irr.value_and_grad(&o_t, &o_s)?;
            g_t.data_mut().iter_mut().chain(g_s.data_mut().iter_mut()).for_each(|g| *g *= w);
            (v, g_t, g_s)
        } else {
            let (h, wd) = o_t.shape();
            (self.irr.value(&o_t, &o_s)?, Plane::zeros(h, wd), Plane::zeros(h, wd))
        };
        let (def, g_o) = losses::defect_loss_grad(&mt.output(), &s.gt_mask, self.cfg.border_margin)?;
        let mut grads = vec![0.0; p.param_count()];
        let (gm_t, gm_s) = diffnet::mask_backward(p, &mt, &g_o, &mut grads);
        add_assign(&mut g_t, &gm_t);
        add_assign(&mut g_s, &gm_s);
        diffnet::difference_backward(p, &dt, &g_t, &g_s, &mut grads, false);
        Ok((LossComponents { irr, def }, grads))
    }

    /// One optimizer step on the next batch.
    pub fn step(&mut self) -> Result<StepStats> {
        let (epoch, idx) = self.batch_indices(self.step);
        let batch = self.fetch(epoch, &idx)?;
        let per_sample: Vec<Result<(LossComponents, Vec<f64>)>> =
            batch.par_iter().map(|s| self.sample_grad(s)).collect();
        let n = batch.len() as f64;
        let mut grads = vec![0.0; self.params.param_count()];
        let (mut irr, mut def) = (0.0, 0.0);
        let mut failure = None;
        let results: Vec<_> = per_sample.into_iter().collect::<Vec<_>>();
        if self.cfg.deterministic {
            for r in &results {
                match r {
                    Ok((c, g)) => {
                        irr += c.irr;
                        def += c.def;
                        add_slice(&mut grads, g);
                    }
                    Err(e) => failure = Some(e.to_string()),
                }
            }
        } else {
            let (i, d, g) = results
                .par_iter()
                .filter_map(|r| r.as_ref().ok())
                .map(|(c, g)| (c.irr, c.def, g.clone()))
                .reduce(
                    || (0.0, 0.0, vec![0.0; grads.len()]),
                    |mut a, b| {
                        add_slice(&mut a.2, &b.2);
                        (a.0 + b.0, a.1 + b.1, a.2)
                    },
                );
            (irr, def, grads) = (i, d, g);
            failure = results.iter().find_map(|r| r.as_ref().err().map(|e| e.to_string()));
        }
        let (irr, def) = (irr / n, def / n);
        let loss = self.cfg.irrelevance_weight * irr + def;
        grads.iter_mut().for_each(|g| *g /= n);
        let finite = loss.is_finite() && grads.iter().all(|g| g.is_finite());
        if failure.is_some() || !finite {
            let reason = failure.unwrap_or_else(|| format!("non-finite loss or gradient (irr={irr}, def={def})"));
            self.write_diagnostic(epoch, &batch, irr, def, &reason)?;
            return Err(Error::Numerical(format!("step {}: {reason}", self.step)));
        }
        self.adam_update(&grads);
        if !self.params.is_finite() {
            let reason = "parameters became non-finite".to_string();
            self.write_diagnostic(epoch, &batch, irr, def, &reason)?;
            return Err(Error::Numerical(format!("step {}: {reason}", self.step)));
        }
        let stats = StepStats {
            step: self.step,
            epoch,
            loss,
            irr,
            def,
        };
        self.step += 1;
        self.log_line(&json!({"step": stats.step, "epoch": epoch, "loss": loss, "irr": irr, "def": def}))?;
        Ok(stats)
    }

    fn adam_update(&mut self, grads: &[f64]) {
        let c = &self.cfg;
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for i in 0..grads.len() {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            self.params.values[i] -= c.learning_rate * mhat / (vhat.sqrt() + c.epsilon);
        }
    }

    fn log_line(&mut self, value: &serde_json::Value) -> Result<()> {
        if let Some(log) = self.log.as_mut() {
            let path = self.out_dir.as_deref().unwrap_or(Path::new("train_log.jsonl"));
            writeln!(log, "{value}").and_then(|_| log.flush()).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    fn write_diagnostic(&self, epoch: usize, batch: &[Prepared], irr: f64, def: f64, reason: &str) -> Result<()> {
        let Some(dir) = &self.out_dir else {
            return Ok(());
        };
        let path = dir.join(format!("nonfinite_step{}.json", self.step));
        let value = json!({
            "step": self.step,
            "epoch": epoch,
            "reason": reason,
            "irr": irr.to_string(),
            "def": def.to_string(),
            "pairs": batch.iter().map(|p| p.id.clone()).collect::<Vec<_>>(),
            "params_finite": self.params.is_finite(),
        });
        fs::write(&path, serde_json::to_string_pretty(&value).unwrap_or_default()).map_err(|e| Error::io(&path, e))
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut header: ContainerHeader = self.params.header(CHECKPOINT_KIND);
        header.extra = json!({
            "format_version": CHECKPOINT_VERSION,
            "step": self.step,
            "config": self.cfg,
        });
        container::write(path, &header, &[&self.params.values, &self.m, &self.v])
    }

    /// Parameters alone, tagged with the training image size.
    pub fn save_model(&self, path: &Path) -> Result<()> {
        let mut header = self.params.header(MODEL_KIND);
        header.extra = json!({"image_size": [self.image_size.0, self.image_size.1]});
        container::write(path, &header, &[&self.params.values])
    }

    /// Trains to the end, checkpointing into the output directory if one is set.
    pub fn run(&mut self) -> Result<TrainSummary> {
        let spe = self.steps_per_epoch();
        let mut steps = Vec::new();
        let mut epochs = Vec::new();
        let mut acc: Vec<StepStats> = Vec::new();
        while !self.is_done() {
            let s = self.step()?;
            let epoch_end = self.step % spe == 0 || self.is_done();
            acc.push(s.clone());
            steps.push(s);
            if self.cfg.checkpoint_every > 0 && self.step % self.cfg.checkpoint_every == 0 {
                if let Some(dir) = self.out_dir.clone() {
                    self.save_checkpoint(&dir.join(format!("checkpoint_{:07}.bin", self.step)))?;
                }
            }
            if epoch_end {
                let first = acc[0].step;
                let epoch = acc[0].epoch;
                // a session that began mid-epoch does not report that epoch
                if first % spe == 0 {
                    let k = acc.len() as f64;
                    let e = EpochStats {
                        epoch,
                        steps: acc.len(),
                        loss: acc.iter().map(|s| s.loss).sum::<f64>() / k,
                        irr: acc.iter().map(|s| s.irr).sum::<f64>() / k,
                        def: acc.iter().map(|s| s.def).sum::<f64>() / k,
                    };
                    self.log_line(&json!({"epoch_end": e.epoch, "steps": e.steps, "mean_loss": e.loss, "mean_irr": e.irr, "mean_def": e.def}))?;
                    epochs.push(e);
                }
                acc.clear();
            }
        }
        if let Some(dir) = self.out_dir.clone() {
            self.save_checkpoint(&dir.join("checkpoint_final.bin"))?;
            self.save_model(&dir.join("model.bin"))?;
        }
        Ok(TrainSummary { steps, epochs })
    }
}

fn add_assign(a: &mut Plane, b: &Plane) {
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}

fn add_slice(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

fn checkpoint_extra(path: &Path, header: &ContainerHeader) -> Result<(TrainConfig, usize)> {
    let version = header.extra.get("format_version").and_then(|v| v.as_u64());
    if version != Some(CHECKPOINT_VERSION as u64) {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: version.unwrap_or(0) as u32,
        });
    }
    let step = header
        .extra
        .get("step")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::corrupt(path, "checkpoint lacks a step counter"))? as usize;
    let cfg: TrainConfig = serde_json::from_value(header.extra.get("config").cloned().unwrap_or_default())
        .map_err(|e| Error::corrupt(path, format!("checkpoint config: {e}")))?;
    Ok((cfg, step))
}

/// Configuration and step stored in a checkpoint.
pub fn read_checkpoint_config(path: &Path) -> Result<(TrainConfig, usize)> {
    let (header, _) = container::read(path)?;
    checkpoint_extra(path, &header)
}

/// Parameters from either a plain parameter file or a checkpoint.
pub fn load_params(path: &Path) -> Result<NetParams> {
    let (header, blocks) = container::read(path)?;
    NetParams::from_parts(path, header, blocks.into_iter().next())
}

/// Image size a model or checkpoint was trained at, when recorded.
pub fn trained_size(path: &Path) -> Result<Option<(usize, usize)>> {
    let (header, _) = container::read(path)?;
    if let Some(v) = header.extra.get("image_size").and_then(|v| v.as_array()) {
        if let [h, w] = v.as_slice() {
            if let (Some(h), Some(w)) = (h.as_u64(), w.as_u64()) {
                return Ok(Some((h as usize, w as usize)));
            }
        }
    }
    if header.kind == CHECKPOINT_KIND {
        let (cfg, _) = checkpoint_extra(path, &header)?;
        if cfg.dataset.is_none() {
            let s = cfg.generator.image_size;
            return Ok(Some((s, s)));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub o: DefectMap,
    pub o_t: DefectMap,
    pub o_s: DefectMap,
    /// Pose in input pixels.
    pub pose: PoseSim2,
    /// Inputs were resampled to the trained size and outputs back.
    pub resampled: bool,
}

fn resize(img: &ImageBuf, h: usize, w: usize) -> Result<ImageBuf> {
    let planes: Vec<Plane> = (0..img.channels()).map(|c| img.channel(c).resize_nearest(h, w)).collect();
    if planes.len() == 1 {
        return Ok(ImageBuf::from_plane(planes.into_iter().next().expect("one plane")));
    }
    let n = planes.len();
    let mut data = vec![0.0; h * w * n];
    for (c, p) in planes.iter().enumerate() {
        for (i, &v) in p.data().iter().enumerate() {
            data[i * n + c] = v;
        }
    }
    ImageBuf::new(h, w, n, data)
}

/// Full forward pass on one pair. Inputs whose size differs from
/// `trained_size` are resampled (nearest neighbor) to it, and the maps are
/// resampled back.
pub fn infer(
    params: &NetParams,
    template: &ImageBuf,
    source: &ImageBuf,
    trained_size: Option<(usize, usize)>,
) -> Result<Inference> {
    template.ensure_same_shape(source, "infer")?;
    let (h, w) = source.shape();
    let target = trained_size.unwrap_or((h, w));
    let resampled = target != (h, w);
    let (t, s) = if resampled {
        (resize(template, target.0, target.1)?, resize(source, target.0, target.1)?)
    } else {
        (template.clone(), source.clone())
    };
    let out = diffnet::full_forward(params, &t, &s)?;
    let back = |p: DefectMap| if resampled { p.resize_nearest(h, w) } else { p };
    let mut pose = out.registration.pose;
    if resampled {
        pose.tx *= w as f64 / target.1 as f64;
        pose.ty *= h as f64 / target.0 as f64;
    }
    Ok(Inference {
        o: back(out.o),
        o_t: back(out.o_t),
        o_s: back(out.o_s),
        pose,
        resampled,
    })
}

fn load_data(cfg: &TrainConfig) -> Result<TrainData> {
    match &cfg.dataset {
        Some(dir) => {
            let ds = simgen::read_dataset(dir)?;
            let samples = ds.pairs.into_iter().map(TrainSample::from_loaded).collect::<Result<_>>()?;
            Ok(TrainData::Fixed(samples))
        }
        None => Ok(TrainData::Stream(cfg.generator.clone(), cfg.pairs_per_epoch)),
    }
}

/// Generates `count` pairs in memory, keyed like [`simgen::gen_dataset`].
pub fn generated_samples(cfg: &GenConfig, count: usize) -> Result<Vec<TrainSample>> {
    Ok(simgen::gen_dataset(cfg, count)?
        .into_iter()
        .enumerate()
        .map(|(i, p)| TrainSample::from_pair(simgen::pair_id(i), p))
        .collect())
}

/// Trains per `cfg`, writing log and checkpoints under `out_dir`.
pub fn train(cfg: TrainConfig, out_dir: &Path) -> Result<(NetParams, TrainSummary)> {
    let mut trainer = Trainer::new(cfg)?;
    trainer.set_output_dir(out_dir)?;
    let summary = trainer.run()?;
    Ok((trainer.params().clone(), summary))
}
