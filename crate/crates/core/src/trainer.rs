//! Two-stage optimization: geometry with view-dependent color, then
//! physically based appearance and lighting with the color encoder removed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use avatar_tensor::geometry::{dot3, sub3};
use avatar_tensor::{Tape, Tensor, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::write_atomic;
use crate::model::{probe_radiance, GaussianAvatar, ModelConfig, PosedVars, RenderMode};
use crate::objectives::{
    covisibility_mask, gather_pairs, gaussian_correspondences, infonce_gc, sample_correspondence_pairs, stage1_loss,
    stage2_loss, virtual_camera, FeatureExtractor, GaussianSet, LossTerms, LossWeights, Targets, COVIS_MARGIN_DEG,
};
use crate::params::ParamSet;
use crate::raster::Camera;
use crate::skinning::PoseSequence;
use crate::synth::SceneDataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Images per step. Only 1 is supported.
    pub batch: usize,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub seed: u64,
    /// Run the contrastive term every this many stage-2 steps (0 disables it).
    pub gc_every: usize,
    /// Write a checkpoint every this many steps when an output directory is given (0: only at stage ends).
    pub checkpoint_every: usize,
    pub loss: LossWeights,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 1,
            stage1_iters: 3000,
            stage2_iters: 3000,
            seed: 0,
            gc_every: 1,
            checkpoint_every: 0,
            loss: LossWeights::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.batch != 1 {
            return Err(Error::Config("batch must be 1".into()));
        }
        if self.stage1_iters == 0 || self.stage2_iters == 0 {
            return Err(Error::Config("iteration counts must be positive".into()));
        }
        self.loss.validate()?;
        self.model.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Adam with bias correction and a step count per parameter, so tensors
/// that join later start with correct bias correction. Steps with any
/// non-finite gradient are skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied (not skipped) steps.
    pub t: u64,
    steps: BTreeMap<String, u64>,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            steps: BTreeMap::new(),
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Drops optimizer state for parameters no longer present.
    pub fn retain(&mut self, params: &ParamSet) {
        self.steps.retain(|k, _| params.contains(k));
        self.m.retain(|k, _| params.contains(k));
        self.v.retain(|k, _| params.contains(k));
    }

    /// Applies one update; returns false when the step was skipped.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>) -> Result<bool> {
        for (name, g) in grads {
            let p = params.require(name)?;
            if p.shape() != g.shape() {
                return Err(Error::invalid(format!("gradient for {name} has shape {:?}, parameter {:?}", g.shape(), p.shape())));
            }
        }
        if grads.values().flat_map(|g| g.data()).any(|v| !v.is_finite()) {
            return Ok(false);
        }
        self.t += 1;
        for (name, g) in grads {
            let t = self.steps.entry(name.clone()).or_insert(0);
            *t += 1;
            let c1 = 1.0 - self.beta1.powf(*t as f64);
            let c2 = 1.0 - self.beta2.powf(*t as f64);
            let p = params.get_mut(name).unwrap();
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            for (((x, &gi), mi), vi) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *x -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(true)
    }

    pub fn moments(&self, name: &str) -> Option<(&Tensor, &Tensor)> {
        Some((self.m.get(name)?, self.v.get(name)?))
    }

    fn store(&self, set: &mut ParamSet) {
        for (k, m) in &self.m {
            set.insert(format!("adam.m.{k}"), m.clone());
            set.insert(format!("adam.v.{k}"), self.v[k].clone());
            set.insert(format!("adam.t.{k}"), Tensor::scalar(self.steps[k] as f64));
        }
        set.insert("adam.t", Tensor::scalar(self.t as f64));
    }

    fn restore(set: &ParamSet, lr: f64) -> Result<Self> {
        let mut adam = Self::new(lr);
        adam.t = set.require("adam.t")?.item()? as u64;
        for (k, t) in set.iter() {
            if let Some(name) = k.strip_prefix("adam.m.") {
                adam.m.insert(name.to_string(), t.clone());
                adam.v.insert(name.to_string(), set.require(&format!("adam.v.{name}"))?.clone());
                adam.steps.insert(name.to_string(), set.require(&format!("adam.t.{name}"))?.item()? as u64);
            }
        }
        Ok(adam)
    }
}

/// Model parameters, optimizer state and progress counters.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub adam: Adam,
    pub stage1_done: usize,
    pub stage2_done: usize,
}

impl Checkpoint {
    pub fn to_param_set(&self) -> ParamSet {
        let mut set = self.params.clone();
        self.adam.store(&mut set);
        set.insert("trainer.stage1", Tensor::scalar(self.stage1_done as f64));
        set.insert("trainer.stage2", Tensor::scalar(self.stage2_done as f64));
        set
    }

    pub fn from_param_set(set: &ParamSet, lr: f64) -> Result<Self> {
        let mut params = ParamSet::new();
        for (k, t) in set.iter() {
            if !k.starts_with("adam.") && !k.starts_with("trainer.") {
                params.insert(k.clone(), t.clone());
            }
        }
        Ok(Self {
            params,
            adam: Adam::restore(set, lr)?,
            stage1_done: set.require("trainer.stage1")?.item()? as usize,
            stage2_done: set.require("trainer.stage2")?.item()? as usize,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_param_set().save(path)
    }

    pub fn load(path: &Path, lr: f64) -> Result<Self> {
        Self::from_param_set(&ParamSet::load(path)?, lr)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub stage: u8,
    pub iteration: usize,
    pub frame: usize,
    pub total: f64,
    pub l1: f64,
    pub perceptual: f64,
    pub normal: f64,
    pub gc: Option<f64>,
    pub skipped: bool,
}

pub fn format_curve(curve: &[LossRecord]) -> String {
    let mut s = String::from("stage,iteration,frame,total,l1,perceptual,normal,gc,skipped\n");
    for r in curve {
        let gc = r.gc.map_or(String::new(), |g| format!("{g:e}"));
        let _ = writeln!(
            s,
            "{},{},{},{:e},{:e},{:e},{:e},{},{}",
            r.stage, r.iteration, r.frame, r.total, r.l1, r.perceptual, r.normal, gc, r.skipped
        );
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    fn trains(self, name: &str) -> bool {
        let group = name.split('.').next().unwrap_or(name);
        match self {
            Stage::One => matches!(group, "geo" | "skin" | "offset" | "color"),
            Stage::Two => matches!(group, "geo" | "skin" | "offset" | "material" | "visibility" | "probe"),
        }
    }

    fn index(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

/// Point on `cam`'s optical axis at the depth of the centroid of `points`.
pub fn orbit_target(cam: &Camera, points: &Tensor) -> Vec3 {
    let c = cam.center();
    let axis = [cam.rotation[2][0], cam.rotation[2][1], cam.rotation[2][2]];
    let n = points.rows().max(1) as f64;
    let mut m = [0.0; 3];
    for i in 0..points.rows() {
        let r = points.row(i);
        (0..3).for_each(|a| m[a] += r[a] / n);
    }
    let depth = dot3(sub3(m, c), axis).max(1e-3);
    [c[0] + depth * axis[0], c[1] + depth * axis[1], c[2] + depth * axis[2]]
}

pub struct Trainer {
    pub config: TrainConfig,
    pub avatar: GaussianAvatar,
    pub adam: Adam,
    pub stage1_done: usize,
    pub stage2_done: usize,
    pub curve: Vec<LossRecord>,
    phi: FeatureExtractor,
    targets: Vec<Targets>,
    camera: Arc<Camera>,
    frames: usize,
}

impl Trainer {
    /// Fresh model initialized from the dataset's template.
    pub fn new(data: &SceneDataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let avatar = GaussianAvatar::init_from_template(
            &data.figure.template(),
            data.figure.skeleton(),
            config.model.clone(),
            config.seed,
        )?;
        Self::with_avatar(data, config, avatar)
    }

    pub fn with_avatar(data: &SceneDataset, config: TrainConfig, avatar: GaussianAvatar) -> Result<Self> {
        config.validate()?;
        let frames = data.training_frames();
        if frames == 0 || data.records.is_empty() {
            return Err(Error::invalid("dataset has no training frames"));
        }
        let cam = data.training_camera();
        let targets = (0..frames)
            .map(|t| {
                let r = data.record(t, cam);
                Targets::new(&r.rgb, &r.normal, &r.alpha)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            adam: Adam::new(config.lr),
            phi: FeatureExtractor::new(config.seed ^ 0x5eed),
            camera: Arc::new(data.cameras[cam].clone()),
            config,
            avatar,
            stage1_done: 0,
            stage2_done: 0,
            curve: Vec::new(),
            targets,
            frames,
        })
    }

    /// Restores model and optimizer from a checkpoint.
    pub fn resume(data: &SceneDataset, config: TrainConfig, ckpt: Checkpoint) -> Result<Self> {
        let mut t = Self::new(data, config)?;
        t.avatar.params = ckpt.params;
        t.adam = ckpt.adam;
        t.adam.lr = t.config.lr;
        t.stage1_done = ckpt.stage1_done;
        t.stage2_done = ckpt.stage2_done;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.avatar.params.clone(),
            adam: self.adam.clone(),
            stage1_done: self.stage1_done,
            stage2_done: self.stage2_done,
        }
    }

    fn step_rng(&self, stage: Stage, iteration: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(((stage.index() as u64) << 40) | iteration as u64);
        rng
    }

    /// One stage-1 step on a randomly drawn training frame.
    pub fn step_stage1(&mut self, data: &SceneDataset) -> Result<LossRecord> {
        let iteration = self.stage1_done;
        let mut rng = self.step_rng(Stage::One, iteration);
        let frame = rng.gen_range(0..self.frames);
        let window = PoseSequence::window(&data.poses, frame, self.config.model.window)?;
        let mut tape = Tape::new();
        let bound = self.avatar.params.bind(&mut tape, |n| Stage::One.trains(n));
        let posed = self.avatar.pose(&mut tape, &bound, &window)?;
        let render = self.avatar.render(&mut tape, &posed, &self.camera, RenderMode::ShColor, None)?;
        let terms = stage1_loss(&mut tape, render, &self.targets[frame], &self.phi, &self.config.loss)?;
        let record = self.apply(&tape, &bound, terms, Stage::One, iteration, frame)?;
        self.stage1_done += 1;
        Ok(record)
    }

    /// One stage-2 step: PBR render, plus the contrastive term against a
    /// freshly drawn virtual view.
    pub fn step_stage2(&mut self, data: &SceneDataset) -> Result<LossRecord> {
        if self.stage1_done == 0 {
            return Err(Error::invalid("stage 2 needs a stage-1 model"));
        }
        if self.avatar.has_color() {
            self.avatar.remove_color();
        }
        self.adam.retain(&self.avatar.params);
        let iteration = self.stage2_done;
        let mut rng = self.step_rng(Stage::Two, iteration);
        let frame = rng.gen_range(0..self.frames);
        let window = PoseSequence::window(&data.poses, frame, self.config.model.window)?;
        let mut tape = Tape::new();
        let bound = self.avatar.params.bind(&mut tape, |n| Stage::Two.trains(n));
        let posed = self.avatar.pose(&mut tape, &bound, &window)?;
        let radiance = probe_radiance(&mut tape, &bound)?;
        let render = self.avatar.render(&mut tape, &posed, &self.camera, RenderMode::Pbr, Some(radiance))?;
        let gc_on = self.config.loss.gc > 0.0 && self.config.gc_every > 0 && iteration % self.config.gc_every == 0;
        let gc = if gc_on { self.gc_term(&mut tape, &posed, render, radiance, &mut rng)? } else { None };
        let terms = stage2_loss(&mut tape, render, &self.targets[frame], &self.phi, gc, &self.config.loss)?;
        let record = self.apply(&tape, &bound, terms, Stage::Two, iteration, frame)?;
        self.stage2_done += 1;
        Ok(record)
    }

    fn gc_term(
        &self,
        tape: &mut Tape,
        posed: &PosedVars,
        render: avatar_tensor::Var,
        radiance: avatar_tensor::Var,
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<avatar_tensor::Var>> {
        let cam_a = &self.camera;
        let means = tape.value(posed.means).clone();
        let cam_b = Arc::new(virtual_camera(cam_a, orbit_target(cam_a, &means), rng)?);
        let set = GaussianSet::from_tape(tape, posed.means, posed.covariances, posed.opacity, posed.normals);
        let covis = covisibility_mask(&set, cam_a, &cam_b, COVIS_MARGIN_DEG)?;
        let corr = gaussian_correspondences(&set, &covis, cam_a, &cam_b);
        if corr.is_empty() {
            return Ok(None);
        }
        let other = self.avatar.render(tape, posed, &cam_b, RenderMode::Pbr, Some(radiance))?;
        let rgb_a = tape.slice_cols(render, 0..3)?;
        let rgb_b = tape.slice_cols(other, 0..3)?;
        let fa = self.phi.features(tape, rgb_a, cam_a.width, cam_a.height)?;
        let fb = self.phi.features(tape, rgb_b, cam_b.width, cam_b.height)?;
        let scales: Vec<_> = fa.iter().map(|m| (m.width, m.height, m.stride)).collect();
        let pairs = sample_correspondence_pairs(&corr, &scales, self.config.loss.pairs, rng)?;
        let gathered = gather_pairs(tape, &fa, &fb, &pairs)?;
        let sum = infonce_gc(tape, &gathered)?;
        // Per-positive mean keeps the weight independent of N and the scale count.
        Ok(Some(tape.scale(sum, 1.0 / (gathered.len() * self.config.loss.pairs) as f64)?))
    }

    fn apply(
        &mut self,
        tape: &Tape,
        bound: &crate::params::Bound,
        terms: LossTerms,
        stage: Stage,
        iteration: usize,
        frame: usize,
    ) -> Result<LossRecord> {
        let grads = tape.backward(terms.total)?;
        let grads = bound.gradients(tape, &grads);
        let total = tape.value(terms.total).item()?;
        let skipped = !total.is_finite() || !self.adam.step(&mut self.avatar.params, &grads)?;
        let record = LossRecord {
            stage: stage.index(),
            iteration,
            frame,
            total,
            l1: tape.value(terms.l1).item()?,
            perceptual: tape.value(terms.perceptual).item()?,
            normal: tape.value(terms.normal).item()?,
            gc: terms.gc.map(|g| tape.value(g).item()).transpose()?,
            skipped,
        };
        self.curve.push(record);
        Ok(record)
    }

    /// Runs the remaining steps of `stage`, checkpointing into `out` when given.
    pub fn run_stage(
        &mut self,
        data: &SceneDataset,
        stage: Stage,
        out: Option<&Path>,
        mut progress: impl FnMut(&LossRecord),
    ) -> Result<()> {
        let (target, every) = match stage {
            Stage::One => (self.config.stage1_iters, self.config.checkpoint_every),
            Stage::Two => (self.config.stage2_iters, self.config.checkpoint_every),
        };
        loop {
            let done = match stage {
                Stage::One => self.stage1_done,
                Stage::Two => self.stage2_done,
            };
            if done >= target {
                break;
            }
            let r = match stage {
                Stage::One => self.step_stage1(data)?,
                Stage::Two => self.step_stage2(data)?,
            };
            progress(&r);
            if let Some(dir) = out {
                if every > 0 && (r.iteration + 1) % every == 0 {
                    self.save(dir)?;
                }
            }
        }
        if let Some(dir) = out {
            self.save(dir)?;
        }
        Ok(())
    }

    /// Writes `checkpoint.bin`, `losses.csv` and `config.toml` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
        write_atomic(&dir.join(CURVE_FILE), format_curve(&self.curve).as_bytes())?;
        write_atomic(&dir.join(CONFIG_FILE), self.config.to_toml().as_bytes())
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CURVE_FILE: &str = "losses.csv";
pub const CONFIG_FILE: &str = "config.toml";

/// Loads a trained avatar for `data` from a training output directory.
pub fn load_avatar(data: &SceneDataset, dir: &Path) -> Result<GaussianAvatar> {
    let config = TrainConfig::load(&dir.join(CONFIG_FILE))?;
    let ckpt = Checkpoint::load(&dir.join(CHECKPOINT_FILE), config.lr)?;
    let mut avatar =
        GaussianAvatar::init_from_template(&data.figure.template(), data.figure.skeleton(), config.model, config.seed)?;
    avatar.params = ckpt.params;
    Ok(avatar)
}
