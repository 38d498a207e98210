//! Degrader training, generator pretraining, full adversarial training and
//! inference.
//!
//! One epoch is one pass over the prepared triple list in seeded order. All
//! randomness comes from RNGs keyed by (seed, phase, epoch or step), so a run
//! resumed from a checkpoint follows the uninterrupted trajectory.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use refsr_autograd::ops::{abs, add, mean, scale, sub};
use refsr_autograd::{grad_values, no_grad, Adam, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, Container};
use crate::dataset::{derived_rng, TrainingTriple};
use crate::error::{bail_arg, Error, Result};
use crate::features::{extract_pyramid, ExtractorConfig, FeatureExtractor, FeatureMap};
use crate::imaging::{down_up, resize_to, ImageTensor};
use crate::losses::{
    adv_d_var, adv_g_var, deg_var, per_var, rec_var, tex_var, texture_reference, transferred_grams, LossWeights,
    TextureLevel, TextureTarget,
};
use crate::matching::{match_features_with, read_match_dump, transfer_at_level, write_match_dump, MatchConfig, MatchMap};
use crate::networks::{
    critic_forward, critic_min_size, degrader_forward, ArchConfig, CriticConfig, DegraderConfig, FusionConfig,
    Generator, NetworkParams, UpscalerConfig,
};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const GENERATOR_FILE: &str = "generator.ckpt";
pub const DEGRADER_FILE: &str = "degrader.ckpt";
pub const CRITIC_FILE: &str = "critic.ckpt";
/// Version of the resumable training-state layout.
pub const STATE_VERSION: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Degrader,
    Pretrain,
    Full,
}

impl Phase {
    pub fn tag(self) -> &'static str {
        match self {
            Phase::Degrader => "degrader",
            Phase::Pretrain => "pretrain",
            Phase::Full => "full",
        }
    }

    pub fn state_file(self) -> String {
        format!("state-{}.ckpt", self.tag())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Upscaling factor `s = 2^L`; matching needs `L ≥ 3`.
    pub scale: usize,
    pub lr_rate: f64,
    pub degrader_epochs: usize,
    pub pretrain_epochs: usize,
    pub full_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Critic updates per generator update after the warm-up; 0 disables the critic.
    pub critic_steps_per_gen: usize,
    pub critic_warmup_steps: u64,
    pub critic_warmup_steps_per_gen: usize,
    pub texture_target: TextureTarget,
    /// Pyramid levels entering the texture loss; defaults to `L−2, L−1, L`.
    pub texture_levels: Option<Vec<usize>>,
    pub extractor: ExtractorConfig,
    pub matching: MatchConfig,
    pub width: usize,
    pub upscaler_blocks: usize,
    pub fusion_blocks: usize,
    pub degrader_width: usize,
    pub critic: CriticConfig,
    /// Share of degrader pairs held out for checkpoint selection.
    pub val_fraction: f64,
    /// Save resumable state every this many steps (0: only at epoch ends).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scale: 8,
            lr_rate: 1e-4,
            degrader_epochs: 10,
            pretrain_epochs: 2,
            full_epochs: 20,
            batch_size: 8,
            seed: 0,
            weights: LossWeights::default(),
            critic_steps_per_gen: 1,
            critic_warmup_steps: 500,
            critic_warmup_steps_per_gen: 5,
            texture_target: TextureTarget::default(),
            texture_levels: None,
            extractor: ExtractorConfig::default(),
            matching: MatchConfig::default(),
            width: 64,
            upscaler_blocks: 8,
            fusion_blocks: 4,
            degrader_width: 32,
            critic: CriticConfig::default(),
            val_fraction: 0.125,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// `L = log2 s`.
    pub fn levels(&self) -> usize {
        self.scale.trailing_zeros() as usize
    }

    pub fn match_level(&self) -> usize {
        self.levels() - 2
    }

    pub fn texture_levels(&self) -> Vec<usize> {
        let l = self.levels();
        self.texture_levels.clone().unwrap_or_else(|| vec![l - 2, l - 1, l])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Configuration(m));
        if !matches!(self.scale, 8 | 16) {
            return bad(format!("scale must be 8 or 16 (matching runs two levels below the top), got {}", self.scale));
        }
        if !(self.lr_rate.is_finite() && self.lr_rate > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        if self.width == 0 || self.degrader_width == 0 {
            return bad("network widths must be positive".into());
        }
        self.weights.validate()?;
        let levels = self.texture_levels();
        let l = self.levels();
        if levels.is_empty() || levels.iter().any(|&v| v + 2 < l || v > l) {
            return bad(format!("texture levels {levels:?} must be a non-empty subset of {}..={l}", l - 2));
        }
        self.weights.lambdas(levels.len())?;
        Ok(())
    }

    pub fn degrader_config(&self) -> DegraderConfig {
        DegraderConfig { scale: self.scale, width: self.degrader_width }
    }

    pub fn init_generator(&self, extractor: &FeatureExtractor) -> Result<Generator> {
        let up = UpscalerConfig { scale: self.scale, width: self.width, blocks: self.upscaler_blocks };
        let fusion =
            FusionConfig { width: self.width, transfer_channels: extractor.channels_at(0)?, blocks: self.fusion_blocks };
        Generator::with_configs(up, fusion, self.seed)
    }

    fn critic_steps_at(&self, step: u64) -> usize {
        if self.critic_steps_per_gen == 0 {
            0
        } else if step < self.critic_warmup_steps {
            self.critic_warmup_steps_per_gen
        } else {
            self.critic_steps_per_gen
        }
    }
}

/// Where a run keeps its logs, state and match cache.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    /// Continue from the phase's saved state when one exists.
    pub resume: bool,
    /// Stop the phase (saving state) once this many steps are done.
    pub stop_after: Option<u64>,
}

/// One logged optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: Phase,
    pub step: u64,
    pub epoch: usize,
    pub rec: f64,
    pub tex: f64,
    pub deg: f64,
    pub per: f64,
    pub adv: f64,
    pub total: f64,
    pub critic: Option<f64>,
    pub val: Option<f64>,
    pub wall_time: f64,
}

impl StepRecord {
    fn new(phase: Phase, step: u64, epoch: usize) -> Self {
        Self {
            phase,
            step,
            epoch,
            rec: 0.0,
            tex: 0.0,
            deg: 0.0,
            per: 0.0,
            adv: 0.0,
            total: 0.0,
            critic: None,
            val: None,
            wall_time: 0.0,
        }
    }
}

/// Mean of the first and last `window` values.
pub fn moving_average_ends(values: &[f64], window: usize) -> Option<(f64, f64)> {
    let w = window.min(values.len());
    if w == 0 {
        return None;
    }
    let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((avg(&values[..w]), avg(&values[values.len() - w..])))
}

fn append_log(opts: &RunOptions, rec: &StepRecord) -> Result<()> {
    let Some(dir) = &opts.out_dir else { return Ok(()) };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(LOG_FILE);
    let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
    let line = serde_json::to_string(rec).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
}

/// Reads a JSONL training log.
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

fn check_finite(step: u64, term: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence { step, term: term.into() })
    }
}

/// Concatenates `[1, ...]` tensors along the batch axis.
fn stack(parts: &[&Tensor]) -> Tensor {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.len();
    Tensor::new(&shape, parts.iter().flat_map(|t| t.data().iter().copied()).collect())
}

fn epoch_order(seed: u64, phase: Phase, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derived_rng(seed, &[phase.tag(), "epoch", &epoch.to_string()]));
    order
}

fn batch_indices(order: &[usize], within: usize, batch: usize) -> &[usize] {
    let start = within * batch;
    &order[start..(start + batch).min(order.len())]
}

fn prefixed<'a>(prefix: &'a str, map: &'a BTreeMap<String, Tensor>) -> impl Iterator<Item = (String, Tensor)> + 'a {
    map.iter().map(move |(k, t)| (format!("{prefix}{k}"), t.clone()))
}

fn strip(prefix: &str, map: &BTreeMap<String, Tensor>) -> BTreeMap<String, Tensor> {
    map.iter().filter_map(|(k, t)| k.strip_prefix(prefix).map(|s| (s.to_string(), t.clone()))).collect()
}

fn params_container_meta(p: &NetworkParams) -> serde_json::Value {
    p.to_container().meta
}

/// Resumable training state: networks, optimizer moments and the next step.
struct State {
    phase: Phase,
    next_step: u64,
    generator: Option<Generator>,
    gen_opt: Adam,
    net: Option<NetworkParams>,
    net_opt: Adam,
    best: Option<(f64, NetworkParams)>,
}

impl State {
    fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = BTreeMap::new();
        let mut meta = serde_json::json!({
            "state_version": STATE_VERSION,
            "phase": self.phase,
            "next_step": self.next_step,
        });
        if let Some(g) = &self.generator {
            let c = g.to_container();
            meta["generator"] = c.meta;
            tensors.extend(prefixed("gen/", &c.tensors));
            tensors.extend(prefixed("gen_opt/", &self.gen_opt.state_tensors()));
        }
        if let Some(n) = &self.net {
            meta["net"] = params_container_meta(n);
            tensors.extend(prefixed("net/", &n.tensors));
            tensors.extend(prefixed("net_opt/", &self.net_opt.state_tensors()));
        }
        if let Some((v, b)) = &self.best {
            meta["best"] = serde_json::json!({ "val": v, "params": params_container_meta(b) });
            tensors.extend(prefixed("best/", &b.tensors));
        }
        checkpoint::save(&Container { meta, tensors }, path)
    }

    fn load(path: &Path, phase: Phase, lr: f64) -> Result<Self> {
        let c = checkpoint::load(path)?;
        let found: Phase = serde_json::from_value(c.meta["phase"].clone())
            .map_err(|e| Error::Configuration(format!("{}: bad phase tag ({e})", path.display())))?;
        if found != phase || c.meta["state_version"].as_u64() != Some(STATE_VERSION) {
            return Err(Error::Configuration(format!(
                "{} holds `{}` state, expected `{}`",
                path.display(),
                found.tag(),
                phase.tag()
            )));
        }
        let mut st = State {
            phase,
            next_step: c.meta["next_step"].as_u64().unwrap_or(0),
            generator: None,
            gen_opt: Adam::new(lr),
            net: None,
            net_opt: Adam::new(lr),
            best: None,
        };
        if c.meta.get("generator").is_some() {
            let g = Generator::from_container(Container { meta: c.meta["generator"].clone(), tensors: strip("gen/", &c.tensors) })?;
            st.gen_opt.load_state_tensors(&strip("gen_opt/", &c.tensors));
            st.generator = Some(g);
        }
        if c.meta.get("net").is_some() {
            let n = NetworkParams::from_container(Container { meta: c.meta["net"].clone(), tensors: strip("net/", &c.tensors) })?;
            st.net_opt.load_state_tensors(&strip("net_opt/", &c.tensors));
            st.net = Some(n);
        }
        if let Some(b) = c.meta.get("best") {
            let p = NetworkParams::from_container(Container { meta: b["params"].clone(), tensors: strip("best/", &c.tensors) })?;
            st.best = Some((b["val"].as_f64().unwrap_or(f64::INFINITY), p));
        }
        Ok(st)
    }
}

fn state_path(opts: &RunOptions, phase: Phase) -> Option<PathBuf> {
    opts.out_dir.as_ref().map(|d| d.join(phase.state_file()))
}

fn resume_state(opts: &RunOptions, phase: Phase, lr: f64) -> Result<Option<State>> {
    match state_path(opts, phase) {
        Some(p) if opts.resume && p.is_file() => {
            let st = State::load(&p, phase, lr)?;
            log::info!("resuming {} from step {}", phase.tag(), st.next_step);
            Ok(Some(st))
        }
        _ => Ok(None),
    }
}

fn maybe_save(st: &State, opts: &RunOptions) -> Result<()> {
    match state_path(opts, st.phase) {
        Some(p) => st.save(&p),
        None => Ok(()),
    }
}

/// How a phase ended.
#[derive(Clone, Debug)]
pub struct DegraderOutcome {
    /// Parameters with the lowest validation loss seen (the initial ones included).
    pub params: NetworkParams,
    pub initial_val: f64,
    pub best_val: f64,
    pub records: Vec<StepRecord>,
    pub completed: bool,
}

fn degrader_l1(cfg: &DegraderConfig, p: &NetworkParams, hr: &Tensor, lr: &Tensor) -> f64 {
    no_grad(|| {
        let out = degrader_forward(cfg, &p.bind(false), &Var::constant(hr.clone()));
        mean(&abs(&sub(&out, &Var::constant(lr.clone())))).item()
    })
}

/// Splits pair indices into (train, validation).
pub fn validation_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let n_val = if n < 2 || fraction == 0.0 { 0 } else { ((n as f64 * fraction).round() as usize).clamp(1, n - 1) };
    idx.shuffle(&mut derived_rng(seed, &["degrader", "split"]));
    let val = idx.split_off(n - n_val);
    idx.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (idx, val)
}

/// Trains `H_D` to map HR tiles onto their LR counterparts under mean ℓ1,
/// keeping the parameters with the best held-out loss.
pub fn train_degrader(pairs: &[(ImageTensor, ImageTensor)], cfg: &TrainConfig, opts: &RunOptions) -> Result<DegraderOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        bail_arg!("degrader training needs at least one (hr, lr) pair");
    }
    let dcfg = cfg.degrader_config();
    for (i, (hr, lr)) in pairs.iter().enumerate() {
        if hr.height() != lr.height() * cfg.scale || hr.width() != lr.width() * cfg.scale || hr.channels() != 3 {
            bail_arg!("pair {i}: hr {:?} and lr {:?} do not differ by scale {}", hr.dims(), lr.dims(), cfg.scale);
        }
    }
    let hrs: Vec<Tensor> = pairs.iter().map(|p| p.0.to_tensor()).collect();
    let lrs: Vec<Tensor> = pairs.iter().map(|p| p.1.to_tensor()).collect();
    let (train, val) = validation_split(pairs.len(), cfg.val_fraction, cfg.seed);
    let eval_set = if val.is_empty() { &train } else { &val };
    let evaluate = |p: &NetworkParams| {
        let total: f64 = eval_set.iter().map(|&i| degrader_l1(&dcfg, p, &hrs[i], &lrs[i])).sum();
        total / eval_set.len() as f64
    };

    let init = NetworkParams::init(ArchConfig::Degrader(dcfg), cfg.seed.wrapping_add(2))?;
    let initial_val = evaluate(&init);
    let mut st = match resume_state(opts, Phase::Degrader, cfg.lr_rate)? {
        Some(s) => s,
        None => State {
            phase: Phase::Degrader,
            next_step: 0,
            generator: None,
            gen_opt: Adam::new(cfg.lr_rate),
            net: Some(init.clone()),
            net_opt: Adam::new(cfg.lr_rate),
            best: Some((initial_val, init)),
        },
    };
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
    let total = steps_per_epoch * cfg.degrader_epochs as u64;
    let start = Instant::now();
    let mut records = Vec::new();
    let mut completed = true;
    while st.next_step < total {
        let step = st.next_step;
        let epoch = (step / steps_per_epoch) as usize;
        let order: Vec<usize> = epoch_order(cfg.seed, Phase::Degrader, epoch, train.len()).into_iter().map(|i| train[i]).collect();
        let idx = batch_indices(&order, (step % steps_per_epoch) as usize, cfg.batch_size);
        let hr = stack(&idx.iter().map(|&i| &hrs[i]).collect::<Vec<_>>());
        let lr = stack(&idx.iter().map(|&i| &lrs[i]).collect::<Vec<_>>());
        let net = st.net.as_mut().expect("degrader state");
        let bound = net.bind(true);
        let loss = mean(&abs(&sub(&degrader_forward(&dcfg, &bound, &Var::constant(hr)), &Var::constant(lr))));
        let value = check_finite(step, "degradation l1", loss.item())?;
        let (names, vars) = bound.flat();
        let grads: BTreeMap<String, Tensor> = names.into_iter().zip(grad_values(&loss, &vars)).collect();
        st.net_opt.step(&mut net.tensors, &grads);
        st.next_step += 1;

        let mut rec = StepRecord::new(Phase::Degrader, step, epoch);
        rec.rec = value;
        rec.total = value;
        let epoch_end = st.next_step % steps_per_epoch == 0;
        if epoch_end {
            let v = check_finite(step, "degradation validation l1", evaluate(st.net.as_ref().unwrap()))?;
            rec.val = Some(v);
            log::info!("degrader epoch {epoch}: train l1 {value:.5}, validation l1 {v:.5}");
            if st.best.as_ref().is_none_or(|(b, _)| v < *b) {
                st.best = Some((v, st.net.clone().unwrap()));
            }
        }
        rec.wall_time = start.elapsed().as_secs_f64();
        append_log(opts, &rec)?;
        records.push(rec);
        if epoch_end || (cfg.checkpoint_every > 0 && st.next_step % cfg.checkpoint_every == 0) {
            maybe_save(&st, opts)?;
        }
        if opts.stop_after.is_some_and(|s| st.next_step >= s) && st.next_step < total {
            maybe_save(&st, opts)?;
            completed = false;
            break;
        }
    }
    let (best_val, params) = st.best.clone().expect("best tracked from the start");
    if completed {
        if let Some(dir) = &opts.out_dir {
            crate::networks::save_params(&params, &dir.join(DEGRADER_FILE))?;
        }
    }
    Ok(DegraderOutcome { params, initial_val, best_val, records, completed })
}

/// A triple with everything a generator step needs precomputed.
#[derive(Clone, Debug)]
pub struct Sample {
    pub key: String,
    /// `[1, h, w, 3]`.
    pub lr: Tensor,
    /// `[1, s·h, s·w, 3]`.
    pub hr: Tensor,
    /// Transferred reference features at the top level, `[1, s·h, s·w, C_T]`.
    pub f_t: Tensor,
    /// Texture-loss targets per configured level, `[1, C_l, C_l]`; empty when
    /// the texture loss is off.
    pub grams: Vec<Tensor>,
}

fn match_cache_key(lr: &ImageTensor, reference: &ImageTensor, scale: usize, extractor: &FeatureExtractor, m: &MatchConfig) -> String {
    let mut h = Sha256::new();
    for img in [lr, reference] {
        let (a, b, c) = img.dims();
        for d in [a, b, c] {
            h.update((d as u64).to_le_bytes());
        }
        for v in img.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.update((scale as u64).to_le_bytes());
    h.update(extractor.id().as_bytes());
    h.update(serde_json::to_vec(m).unwrap_or_default());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn check_reference(lr: &ImageTensor, reference: &ImageTensor, scale: usize, m: &MatchConfig) -> Result<()> {
    let min = 4 * m.patch_size.max(1);
    let min = min.div_ceil(scale) * scale;
    if reference.height() < min
        || reference.width() < min
        || !reference.height().is_multiple_of(scale)
        || !reference.width().is_multiple_of(scale)
    {
        bail_arg!(
            "reference {}x{} cannot tile the target: it needs sides that are multiples of {scale} and at least {min}px",
            reference.height(),
            reference.width()
        );
    }
    if lr.height() * scale < min || lr.width() * scale < min {
        bail_arg!("{}x{} input is too small: the upscaled image needs sides of at least {min}px", lr.height(), lr.width());
    }
    Ok(())
}

/// Matches `φ^(L−2)(I_LR↑)` against `φ^(L−2)(I_Ref↓↑)`, reading and filling
/// the on-disk cache when one is given.
pub fn compute_match(
    lr: &ImageTensor,
    reference: &ImageTensor,
    scale: usize,
    extractor: &FeatureExtractor,
    mcfg: &MatchConfig,
    cache_dir: Option<&Path>,
) -> Result<MatchMap> {
    check_reference(lr, reference, scale, mcfg)?;
    let top = scale.trailing_zeros() as usize;
    let level = top - 2;
    let cache = cache_dir.map(|d| d.join(format!("{}.match", match_cache_key(lr, reference, scale, extractor, mcfg))));
    if let Some(path) = cache.as_ref().filter(|p| p.is_file()) {
        match read_match_dump(path) {
            Ok(m) if m.level == level => return Ok(m),
            Ok(_) => log::warn!("{}: cached match is for another level; recomputing", path.display()),
            Err(e) => log::warn!("{}: unreadable match cache ({e}); recomputing", path.display()),
        }
    }
    let up = resize_to(lr, lr.height() * scale, lr.width() * scale)?;
    let ref_du = down_up(reference, scale)?;
    let q = extract_pyramid(&up, &[level], top, extractor)?;
    let r = extract_pyramid(&ref_du, &[level], top, extractor)?;
    let m = match_features_with(q.level(level)?, r.level(level)?, mcfg, level)?;
    if let Some(path) = cache {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_match_dump(&m, &path)?;
    }
    Ok(m)
}

/// `F_T^L`: reference features at the top level rearranged by the match.
pub fn transferred_features(reference: &ImageTensor, m: &MatchMap, scale: usize, extractor: &FeatureExtractor) -> Result<FeatureMap> {
    let top = scale.trailing_zeros() as usize;
    let pyr = extract_pyramid(reference, &[top], top, extractor)?;
    Ok(transfer_at_level(&pyr, m, top)?.data)
}

/// Precomputes matches, transferred features and (when `w_tex > 0`) texture targets.
pub fn prepare_samples(
    triples: &[TrainingTriple],
    cfg: &TrainConfig,
    extractor: &FeatureExtractor,
    cache_dir: Option<&Path>,
) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let levels = cfg.texture_levels();
    triples
        .iter()
        .map(|t| {
            if t.scale != cfg.scale {
                bail_arg!("triple {} has scale {}, config says {}", t.key, t.scale, cfg.scale);
            }
            let m = compute_match(&t.lr, &t.reference, cfg.scale, extractor, &cfg.matching, cache_dir)?;
            let f_t = transferred_features(&t.reference, &m, cfg.scale, extractor)?;
            if (f_t.height(), f_t.width()) != (t.hr.height(), t.hr.width()) {
                bail_arg!("triple {}: transferred features are {:?}, hr is {:?}", t.key, f_t.dims(), t.hr.dims());
            }
            let grams = if cfg.weights.w_tex > 0.0 {
                let tex_ref = texture_reference(&t.reference, cfg.texture_target)?;
                let pyr = extract_pyramid(&tex_ref, &levels, cfg.levels(), extractor)?;
                transferred_grams(&pyr, &m, &levels)?.iter().map(|g| g.to_tensor()).collect()
            } else {
                Vec::new()
            };
            Ok(Sample { key: t.key.clone(), lr: t.lr.to_tensor(), hr: t.hr.to_tensor(), f_t: f_t.to_tensor(), grams })
        })
        .collect()
}

struct Batch {
    lr: Var,
    hr: Var,
    f_t: Var,
    grams: Vec<Tensor>,
}

fn make_batch(samples: &[Sample], idx: &[usize]) -> Batch {
    let pick = |f: &dyn Fn(&Sample) -> &Tensor| stack(&idx.iter().map(|&i| f(&samples[i])).collect::<Vec<_>>());
    let n_levels = samples[idx[0]].grams.len();
    Batch {
        lr: Var::constant(pick(&|s| &s.lr)),
        hr: Var::constant(pick(&|s| &s.hr)),
        f_t: Var::constant(pick(&|s| &s.f_t)),
        grams: (0..n_levels).map(|k| pick(&|s| &s.grams[k])).collect(),
    }
}

struct GenContext<'a> {
    cfg: &'a TrainConfig,
    extractor: &'a FeatureExtractor,
    degrader: Option<&'a NetworkParams>,
}

/// One generator update; returns the step's unweighted terms and total.
fn generator_step(
    ctx: &GenContext<'_>,
    phase: Phase,
    gen: &mut Generator,
    opt: &mut Adam,
    critic: Option<&NetworkParams>,
    batch: &Batch,
    rec: &mut StepRecord,
) -> Result<()> {
    let w = &ctx.cfg.weights;
    let step = rec.step;
    let up = gen.upscaler.bind(true);
    let fu = gen.fusion.bind(true);
    let sr = gen.forward(&up, &fu, &batch.lr, &batch.f_t);
    let mut terms: Vec<(&str, f64, Var)> = vec![("rec", w.w_rec, rec_var(&sr, &batch.hr)?)];
    if w.w_tex > 0.0 {
        let lambdas = w.lambdas(batch.grams.len())?;
        let levels: Vec<TextureLevel> = ctx
            .cfg
            .texture_levels()
            .into_iter()
            .zip(lambdas)
            .zip(&batch.grams)
            .map(|((level, lambda), target)| TextureLevel { level, lambda, target: target.clone() })
            .collect();
        terms.push(("tex", w.w_tex, tex_var(&sr, &levels, ctx.cfg.levels(), ctx.extractor)?));
    }
    if phase == Phase::Full {
        if w.w_deg > 0.0 {
            let d = ctx.degrader.ok_or_else(|| Error::Configuration("degradation loss needs a trained degrader".into()))?;
            terms.push(("deg", w.w_deg, deg_var(&sr, &batch.lr, d)?));
        }
        if w.w_per > 0.0 {
            terms.push(("per", w.w_per, per_var(&sr, &batch.hr, ctx.extractor)?));
        }
        if w.w_adv > 0.0 {
            let c = critic.ok_or_else(|| Error::Configuration("adversarial loss needs a critic".into()))?;
            let ArchConfig::Critic(ccfg) = c.config else { unreachable!("critic built from config") };
            let bound = c.bind(false);
            let d = move |x: &Var| critic_forward(&ccfg, &bound, x);
            terms.push(("adv", w.w_adv, adv_g_var(&sr, &d)));
        }
    }
    let mut total: Option<Var> = None;
    for (name, weight, v) in &terms {
        let value = check_finite(step, name, v.item())?;
        match *name {
            "rec" => rec.rec = value,
            "tex" => rec.tex = value,
            "deg" => rec.deg = value,
            "per" => rec.per = value,
            _ => rec.adv = value,
        }
        let weighted = scale(v, *weight);
        total = Some(match total {
            Some(t) => add(&t, &weighted),
            None => weighted,
        });
    }
    let total = total.expect("reconstruction term always present");
    rec.total = check_finite(step, "total", total.item())?;
    let (mut names, mut vars) = up.flat();
    names.iter_mut().for_each(|n| *n = format!("upscaler/{n}"));
    let (fnames, fvars) = fu.flat();
    names.extend(fnames.into_iter().map(|n| format!("fusion/{n}")));
    vars.extend(fvars);
    let grads: BTreeMap<String, Tensor> = names.into_iter().zip(grad_values(&total, &vars)).collect();
    let mut params = gen.tensors();
    opt.step(&mut params, &grads);
    gen.set_tensors(&params)
}

/// One critic update on a batch; returns the critic loss.
fn critic_step(cfg: &TrainConfig, gen: &Generator, critic: &mut NetworkParams, opt: &mut Adam, batch: &Batch, step: u64, k: usize) -> Result<f64> {
    let sr = no_grad(|| gen.forward(&gen.upscaler.bind(false), &gen.fusion.bind(false), &batch.lr, &batch.f_t));
    let sr = Var::constant(sr.value().clone());
    let n = sr.shape()[0];
    let mut rng = derived_rng(cfg.seed, &["full", "critic", &step.to_string(), &k.to_string()]);
    let eps: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let ArchConfig::Critic(ccfg) = critic.config else { unreachable!("critic built from config") };
    let bound = critic.bind(true);
    let d = |x: &Var| critic_forward(&ccfg, &bound, x);
    let loss = adv_d_var(&d, &batch.hr, &sr, cfg.weights.gp_coef, &eps)?;
    let value = check_finite(step, "critic", loss.total.item())?;
    let (names, vars) = bound.flat();
    let grads: BTreeMap<String, Tensor> = names.into_iter().zip(grad_values(&loss.total, &vars)).collect();
    opt.step(&mut critic.tensors, &grads);
    Ok(value)
}

#[derive(Clone, Debug)]
pub struct GeneratorOutcome {
    pub generator: Generator,
    pub critic: Option<NetworkParams>,
    pub records: Vec<StepRecord>,
    pub completed: bool,
}

fn run_generator_phase(
    phase: Phase,
    samples: &[Sample],
    cfg: &TrainConfig,
    ctx: &GenContext<'_>,
    init: Generator,
    opts: &RunOptions,
) -> Result<GeneratorOutcome> {
    let epochs = if phase == Phase::Pretrain { cfg.pretrain_epochs } else { cfg.full_epochs };
    let use_critic = phase == Phase::Full && (cfg.critic_steps_per_gen > 0 || cfg.weights.w_adv > 0.0);
    if samples.is_empty() && epochs > 0 {
        bail_arg!("{} needs at least one training triple", phase.tag());
    }
    if use_critic {
        let min = critic_min_size(&cfg.critic);
        if let Some(s) = samples.iter().find(|s| s.hr.shape()[1] < min || s.hr.shape()[2] < min) {
            return Err(Error::Configuration(format!(
                "critic with {} stages needs tiles of at least {min}px; triple {} is smaller",
                cfg.critic.stages, s.key
            )));
        }
    }
    if cfg.weights.w_tex > 0.0 && samples.iter().any(|s| s.grams.len() != cfg.texture_levels().len()) {
        bail_arg!("samples were prepared without texture targets but w_tex > 0");
    }
    let mut st = match resume_state(opts, phase, cfg.lr_rate)? {
        Some(s) => s,
        None => State {
            phase,
            next_step: 0,
            generator: Some(init),
            gen_opt: Adam::new(cfg.lr_rate),
            net: if use_critic {
                Some(NetworkParams::init(ArchConfig::Critic(cfg.critic), cfg.seed.wrapping_add(3))?)
            } else {
                None
            },
            net_opt: Adam::new(cfg.lr_rate),
            best: None,
        },
    };
    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size) as u64;
    let total = steps_per_epoch * epochs as u64;
    let start = Instant::now();
    let mut records = Vec::new();
    let mut completed = true;
    let mut order_cache: Option<(usize, Vec<usize>)> = None;
    while st.next_step < total {
        let step = st.next_step;
        let epoch = (step / steps_per_epoch) as usize;
        if order_cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
            order_cache = Some((epoch, epoch_order(cfg.seed, phase, epoch, samples.len())));
        }
        let order = &order_cache.as_ref().unwrap().1;
        let batch = make_batch(samples, batch_indices(order, (step % steps_per_epoch) as usize, cfg.batch_size));
        let mut rec = StepRecord::new(phase, step, epoch);
        let gen = st.generator.as_mut().expect("generator state");
        if let Some(critic) = st.net.as_mut() {
            let mut last = None;
            for k in 0..cfg.critic_steps_at(step) {
                last = Some(critic_step(cfg, gen, critic, &mut st.net_opt, &batch, step, k)?);
            }
            rec.critic = last;
        }
        generator_step(ctx, phase, gen, &mut st.gen_opt, st.net.as_ref(), &batch, &mut rec)?;
        st.next_step += 1;
        rec.wall_time = start.elapsed().as_secs_f64();
        append_log(opts, &rec)?;
        records.push(rec);
        let epoch_end = st.next_step % steps_per_epoch == 0;
        if epoch_end {
            let last = records.last().expect("record pushed above");
            log::info!("{} epoch {epoch}: step {step}, total {:.5}, rec {:.5}", phase.tag(), last.total, last.rec);
        }
        if epoch_end || (cfg.checkpoint_every > 0 && st.next_step % cfg.checkpoint_every == 0) {
            maybe_save(&st, opts)?;
        }
        if opts.stop_after.is_some_and(|s| st.next_step >= s) && st.next_step < total {
            maybe_save(&st, opts)?;
            completed = false;
            break;
        }
    }
    let generator = st.generator.take().expect("generator state");
    if completed {
        if let Some(dir) = &opts.out_dir {
            generator.save(&dir.join(GENERATOR_FILE))?;
            if let Some(c) = &st.net {
                crate::networks::save_params(c, &dir.join(CRITIC_FILE))?;
            }
        }
    }
    Ok(GeneratorOutcome { generator, critic: st.net.take(), records, completed })
}

fn check_degrader(cfg: &TrainConfig, degrader: &NetworkParams) -> Result<()> {
    degrader.expect_arch("degrader")?;
    match degrader.config {
        ArchConfig::Degrader(d) if d.scale == cfg.scale => Ok(()),
        ArchConfig::Degrader(d) => {
            Err(Error::Configuration(format!("degrader was trained for scale {}, run uses {}", d.scale, cfg.scale)))
        }
        _ => unreachable!("arch checked above"),
    }
}

fn check_generator(cfg: &TrainConfig, gen: &Generator, extractor: &FeatureExtractor) -> Result<()> {
    if gen.scale() != cfg.scale {
        return Err(Error::Configuration(format!("generator is for scale {}, run uses {}", gen.scale(), cfg.scale)));
    }
    let tc = extractor.channels_at(0)?;
    if gen.fusion_config().transfer_channels != tc {
        return Err(Error::Configuration(format!(
            "generator expects {} transferred channels but extractor `{}` yields {tc}",
            gen.fusion_config().transfer_channels,
            extractor.id()
        )));
    }
    Ok(())
}

/// Optimizes `w_rec·L_rec + w_tex·L_tex` for `pretrain_epochs`. The degrader
/// is not used in this phase; when given it is only checked for compatibility.
pub fn pretrain_generator(
    samples: &[Sample],
    cfg: &TrainConfig,
    degrader: Option<&NetworkParams>,
    extractor: &FeatureExtractor,
    init: Generator,
    opts: &RunOptions,
) -> Result<GeneratorOutcome> {
    cfg.validate()?;
    if let Some(d) = degrader {
        check_degrader(cfg, d)?;
    }
    check_generator(cfg, &init, extractor)?;
    let ctx = GenContext { cfg, extractor, degrader };
    run_generator_phase(Phase::Pretrain, samples, cfg, &ctx, init, opts)
}

/// Alternates critic and generator updates with all five loss terms for
/// `full_epochs`. The degrader stays frozen.
pub fn train_full(
    samples: &[Sample],
    cfg: &TrainConfig,
    degrader: &NetworkParams,
    extractor: &FeatureExtractor,
    init: Generator,
    opts: &RunOptions,
) -> Result<GeneratorOutcome> {
    cfg.validate()?;
    check_degrader(cfg, degrader)?;
    check_generator(cfg, &init, extractor)?;
    let ctx = GenContext { cfg, extractor, degrader: Some(degrader) };
    run_generator_phase(Phase::Full, samples, cfg, &ctx, init, opts)
}

/// Full inference: match at level `L−2`, transfer at level `L`, fuse.
pub fn super_resolve(
    lr: &ImageTensor,
    reference: &ImageTensor,
    gen: &Generator,
    extractor: &FeatureExtractor,
    mcfg: &MatchConfig,
) -> Result<ImageTensor> {
    let s = gen.scale();
    if !matches!(s, 8 | 16) {
        return Err(Error::Configuration(format!("super-resolution runs at scale 8 or 16, generator has {s}")));
    }
    if lr.channels() != 3 || reference.channels() != 3 {
        bail_arg!("inputs must be RGB");
    }
    let tc = extractor.channels_at(0)?;
    if gen.fusion_config().transfer_channels != tc {
        return Err(Error::Configuration(format!(
            "generator expects {} transferred channels but extractor `{}` yields {tc}",
            gen.fusion_config().transfer_channels,
            extractor.id()
        )));
    }
    let m = compute_match(lr, reference, s, extractor, mcfg, None)?;
    let f_t = transferred_features(reference, &m, s, extractor)?;
    if (f_t.height(), f_t.width()) != (lr.height() * s, lr.width() * s) {
        bail_arg!(
            "{}x{} input does not tile evenly with patch size {} and stride {}",
            lr.height(),
            lr.width(),
            mcfg.patch_size,
            mcfg.stride
        );
    }
    let out = no_grad(|| {
        gen.forward(
            &gen.upscaler.bind(false),
            &gen.fusion.bind(false),
            &Var::constant(lr.to_tensor()),
            &Var::constant(f_t.to_tensor()),
        )
    });
    ImageTensor::from_tensor(out.value(), 0)
}
