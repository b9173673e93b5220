//! The dual-branch training loop.
//!
//! Each step augments every sample into two views, runs the supervised
//! branch on one and the unsupervised branch on the other, evaluates all
//! losses at full resolution for each of the four output scales, and takes
//! one Adam step per branch. Distillation teachers are constants: their
//! gradients are computed by the loss functions and thrown away here.

use std::io::Write;
use std::path::Path;

use log::info;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_pair, AugmentedPair};
use crate::checkpoint::{BranchState, Checkpoint};
use crate::config::{BranchTag, Config, TrainMode};
use crate::error::{Error, Result};
use crate::eval::{evaluate_network, Metrics};
use crate::losses::{
    distillation_loss, smoothness_loss, supervised_l1, supervised_uncertainty_loss, total_losses,
    unsupervised_uncertainty_loss, LossReport, Reprojection,
};
use crate::model::{images_to_tensor, resize_bilinear, resize_bilinear_adjoint, tensor_plane, BranchNetwork, RawOutput, NUM_SCALES};
use crate::nn::{Adam, AdamConfig, Tensor};
use crate::synthdata::{dataset_samples, generate_dataset, load_dataset, mix, DatasetParams};
use crate::types::{DepthMap, DepthRange, FrameSample, LogUncertaintyMap, LossWeights};

/// Which totals contribute gradients; both in normal training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Objectives {
    pub total_s: bool,
    pub total_u: bool,
}

impl Objectives {
    pub const BOTH: Self = Self {
        total_s: true,
        total_u: true,
    };
}

/// Networks, optimizer states and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub config: Config,
    pub branches: Vec<BranchState>,
    pub step: usize,
}

/// Loss report and per-branch parameter gradients of one step.
pub struct StepGradients {
    pub report: LossReport,
    /// Same order as [`Trainer::branches`].
    pub grads: Vec<Vec<f32>>,
}

fn branch_seed(seed: u64, tag: BranchTag) -> u64 {
    // The baseline shares the unsupervised branch's initialization.
    match tag {
        BranchTag::Supervised => mix(seed, 1),
        BranchTag::Unsupervised | BranchTag::Baseline => mix(seed, 2),
    }
}

/// Seed of the augmentation of sample `index` at `step`.
pub fn augment_seed(seed: u64, step: usize, index: usize) -> u64 {
    mix(mix(seed, 0xa0_0000 + step as u64), index as u64)
}

/// One branch's full-resolution prediction at one scale.
struct Upsampled {
    depth: DepthMap,
    /// `d depth / d raw` per pixel.
    slope: Array2<f64>,
    log_sigma: Option<LogUncertaintyMap>,
}

fn upsample(raw: &RawOutput, b: usize, s: usize, h: usize, w: usize, range: &DepthRange) -> Result<Upsampled> {
    let disp = resize_bilinear(&tensor_plane(&raw.disparity[s], b), h, w);
    let depth = DepthMap::within(disp.mapv(|r| range.clamp(range.depth_from_disparity(r))), range)?;
    let slope = disp.mapv(|r| range.depth_from_disparity_grad(r));
    let log_sigma = if raw.log_sigma.is_empty() {
        None
    } else {
        Some(LogUncertaintyMap::new(resize_bilinear(&tensor_plane(&raw.log_sigma[s], b), h, w))?)
    };
    Ok(Upsampled {
        depth,
        slope,
        log_sigma,
    })
}

/// Output gradients of one branch, one tensor per scale.
struct OutputGrads {
    disparity: Vec<Tensor>,
    log_sigma: Vec<Tensor>,
}

impl OutputGrads {
    fn new(raw: &RawOutput) -> Self {
        let z = |t: &Tensor| Tensor::zeros(t.n, t.c, t.h, t.w);
        Self {
            disparity: raw.disparity.iter().map(z).collect(),
            log_sigma: raw.log_sigma.iter().map(z).collect(),
        }
    }

    /// Pulls full-resolution gradients back through the depth squashing
    /// and the bilinear upsampling of scale `s`.
    fn push(&mut self, b: usize, s: usize, up: &Upsampled, d_depth: &Array2<f64>, d_log_sigma: Option<&Array2<f64>>, k: f64) {
        let t = &mut self.disparity[s];
        let g = resize_bilinear_adjoint(&(d_depth * &up.slope), t.h, t.w);
        add_plane(t, b, &g, k);
        if let Some(gs) = d_log_sigma {
            let t = &mut self.log_sigma[s];
            let g = resize_bilinear_adjoint(gs, t.h, t.w);
            add_plane(t, b, &g, k);
        }
    }
}

fn add_plane(t: &mut Tensor, b: usize, g: &Array2<f64>, k: f64) {
    for (d, s) in t.sample_mut(b).iter_mut().zip(g.iter()) {
        *d += (s * k) as f32;
    }
}

fn check_finite(report: &LossReport, step: usize) -> Result<()> {
    match report.first_non_finite() {
        Some(term) => Err(Error::NonFiniteLoss { term, step }),
        None => Ok(()),
    }
}

impl Trainer {
    /// Fresh networks for the configured mode.
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let tags: &[BranchTag] = match config.train.mode {
            TrainMode::Semi => &[BranchTag::Supervised, BranchTag::Unsupervised],
            TrainMode::Supervised => &[BranchTag::Supervised],
            TrainMode::Unsupervised => &[BranchTag::Unsupervised],
            TrainMode::Baseline => &[BranchTag::Baseline],
        };
        let adam = AdamConfig {
            lr: config.train.lr,
            ..Default::default()
        };
        let branches = tags
            .iter()
            .map(|&tag| {
                let net = BranchNetwork::new(config.model.clone(), branch_seed(config.seed, tag))?;
                Ok(BranchState {
                    tag,
                    adam: Adam::new(adam, net.num_params()),
                    net,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            branches,
            step: 0,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        Self {
            config: ck.config,
            branches: ck.branches,
            step: ck.step,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            config: self.config.clone(),
            branches: self.branches.clone(),
        }
    }

    fn index(&self, tag: BranchTag) -> Option<usize> {
        self.branches.iter().position(|b| b.tag == tag)
    }

    pub fn branch(&self, tag: BranchTag) -> Option<&BranchState> {
        self.index(tag).map(|i| &self.branches[i])
    }

    pub fn networks(&self) -> Vec<(BranchTag, &BranchNetwork)> {
        self.branches.iter().map(|b| (b.tag, &b.net)).collect()
    }

    /// Whether distillation is active at the current step.
    pub fn distilling(&self) -> bool {
        self.config.train.mode == TrainMode::Semi && self.step >= self.config.train.warmup
    }

    /// Losses and parameter gradients of one step on `batch`, without
    /// touching any state.
    pub fn gradients(&self, batch: &[FrameSample], objectives: Objectives) -> Result<StepGradients> {
        if batch.is_empty() {
            return Err(Error::DegenerateBatch("empty batch".into()));
        }
        let cfg = &self.config;
        let weights = &cfg.loss;
        let range = cfg.model.range;
        let pairs: Vec<AugmentedPair> = batch
            .iter()
            .enumerate()
            .map(|(i, s)| augment_pair(s, &cfg.augment, augment_seed(cfg.seed, self.step, i)))
            .collect();
        let (h, w) = pairs[0].clean.target.shape();

        let s_idx = self.index(BranchTag::Supervised);
        let u_idx = self.index(BranchTag::Unsupervised);
        let b_idx = self.index(BranchTag::Baseline);
        let forward = |i: usize, supervised_view: bool, with_sigma: bool| {
            let images: Vec<_> = pairs
                .iter()
                .map(|p| if supervised_view { &p.view_s.target } else { &p.view_u.target })
                .collect();
            self.branches[i].net.forward(&images_to_tensor(&images), with_sigma)
        };
        let mut outputs: Vec<Option<(RawOutput, _)>> = (0..self.branches.len()).map(|_| None).collect();
        if let Some(i) = s_idx {
            outputs[i] = Some(forward(i, true, true)?);
        }
        if let Some(i) = u_idx {
            outputs[i] = Some(forward(i, false, true)?);
        }
        if let Some(i) = b_idx {
            outputs[i] = Some(forward(i, false, false)?);
        }
        let mut out_grads: Vec<OutputGrads> = outputs
            .iter()
            .map(|o| OutputGrads::new(&o.as_ref().expect("every branch ran").0))
            .collect();

        let distill = self.distilling() && s_idx.is_some() && u_idx.is_some();
        let opts = cfg.reprojection();
        let obj = &cfg.objective;
        let k = 1.0 / (NUM_SCALES * batch.len()) as f64;
        let mut sum = LossReport::default();

        for (b, pair) in pairs.iter().enumerate() {
            let clean = &pair.clean;
            for s in 0..NUM_SCALES {
                let up = |i: Option<usize>| -> Result<Option<Upsampled>> {
                    i.map(|i| upsample(&outputs[i].as_ref().expect("ran").0, b, s, h, w, &range)).transpose()
                };
                let sup = up(s_idx)?;
                let uns = up(u_idx)?;
                let base = up(b_idx)?;
                let mut r = LossReport::default();

                let mut g_sup: Option<(Array2<f64>, Array2<f64>)> = None;
                if let Some(p) = &sup {
                    r.l_s = supervised_l1(&p.depth, &clean.sparse_gt)?.value;
                    let l = supervised_uncertainty_loss(
                        &p.depth,
                        p.log_sigma.as_ref().expect("uncertainty decoder ran"),
                        &clean.sparse_gt,
                        weights.mu_s,
                        weights.m,
                        obj.filtering,
                    )?;
                    r.l_su = l.value;
                    g_sup = Some((l.d_depth, l.d_log_sigma));
                }

                let mut g_uns: Option<(Array2<f64>, Array2<f64>)> = None;
                if let Some(p) = &uns {
                    let rep = Reprojection::compute(&clean.target, &clean.sources, &p.depth, &clean.camera, &opts)?;
                    let n = rep.num_valid();
                    if n == 0 {
                        return Err(Error::DegenerateBatch("no pixel has a valid warp".into()));
                    }
                    r.l_u = rep.pe.sum() / n as f64;
                    let ls = p.log_sigma.as_ref().expect("uncertainty decoder ran");
                    let nll = unsupervised_uncertainty_loss(&rep.pe, &rep.valid, ls, weights.mu_u)?;
                    r.l_uu = nll.value;
                    let smooth = smoothness_loss(&p.depth, &clean.target, obj.smooth_normalized)?;
                    r.l_smooth = smooth.value;
                    let mut d_depth = rep.depth_vjp(&clean.target, &clean.sources, &nll.d_pe);
                    d_depth.scaled_add(weights.lambda_smooth, &smooth.d_depth);
                    g_uns = Some((d_depth, nll.d_log_sigma));
                }

                if distill {
                    let (ps, pu) = (sup.as_ref().expect("semi"), uns.as_ref().expect("semi"));
                    let ls_s = ps.log_sigma.as_ref().expect("ran");
                    let ls_u = pu.log_sigma.as_ref().expect("ran");
                    let sd = distillation_loss(&ps.depth, &pu.depth, ls_u, obj.distill_mode, obj.tau)?;
                    let ud = distillation_loss(&pu.depth, &ps.depth, ls_s, obj.distill_mode, obj.tau)?;
                    r.l_sd = sd.value;
                    r.l_ud = ud.value;
                    // Only the student side is kept; teacher gradients are dropped.
                    if weights.lambda_s > 0.0 {
                        g_sup.as_mut().expect("semi").0.scaled_add(weights.lambda_s, &sd.d_student);
                    }
                    if weights.lambda_u > 0.0 {
                        g_uns.as_mut().expect("semi").0.scaled_add(weights.lambda_u, &ud.d_student);
                    }
                }

                if let Some(p) = &base {
                    let l1 = supervised_l1(&p.depth, &clean.sparse_gt)?;
                    let rep = Reprojection::compute(&clean.target, &clean.sources, &p.depth, &clean.camera, &opts)?;
                    let n = rep.num_valid();
                    if n == 0 {
                        return Err(Error::DegenerateBatch("no pixel has a valid warp".into()));
                    }
                    let smooth = smoothness_loss(&p.depth, &clean.target, obj.smooth_normalized)?;
                    r.l_s = l1.value;
                    r.l_u = rep.pe.sum() / n as f64;
                    r.l_smooth = smooth.value;
                    let grad_pe = rep.valid.mapv(|ok| if ok { weights.lambda_u / n as f64 } else { 0.0 });
                    let mut d_depth = rep.depth_vjp(&clean.target, &clean.sources, &grad_pe);
                    d_depth += &l1.d_depth;
                    d_depth.scaled_add(weights.lambda_smooth, &smooth.d_depth);
                    if objectives.total_s || objectives.total_u {
                        out_grads[b_idx.expect("baseline")].push(b, s, p, &d_depth, None, k);
                    }
                }

                if let (Some(i), Some((dd, ds)), true) = (s_idx, &g_sup, objectives.total_s) {
                    out_grads[i].push(b, s, sup.as_ref().expect("sup"), dd, Some(ds), k);
                }
                if let (Some(i), Some((dd, ds)), true) = (u_idx, &g_uns, objectives.total_u) {
                    out_grads[i].push(b, s, uns.as_ref().expect("uns"), dd, Some(ds), k);
                }

                let t = total_losses(&r, weights);
                r.total_s = if s_idx.is_some() { t.total_s } else { 0.0 };
                r.total_u = if u_idx.is_some() { t.total_u } else { 0.0 };
                r.baseline = if b_idx.is_some() { t.baseline } else { 0.0 };
                sum = sum.add(&r);
            }
        }
        let report = sum.scaled(k);
        check_finite(&report, self.step)?;

        let grads = self
            .branches
            .iter()
            .zip(&outputs)
            .zip(&out_grads)
            .map(|((br, out), g)| {
                let (_, acts) = out.as_ref().expect("ran");
                let mut grads = vec![0.0f32; br.net.num_params()];
                let d_ls = (!g.log_sigma.is_empty()).then_some(g.log_sigma.as_slice());
                br.net.backward(acts, &g.disparity, d_ls, &mut grads);
                grads
            })
            .collect();
        Ok(StepGradients { report, grads })
    }

    /// One optimizer update of every branch.
    pub fn train_step(&mut self, batch: &[FrameSample]) -> Result<LossReport> {
        let StepGradients { report, grads } = self.gradients(batch, Objectives::BOTH)?;
        if let Some(i) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteOutput(match self.branches[i].tag {
                BranchTag::Supervised => "supervised branch gradients",
                BranchTag::Unsupervised => "unsupervised branch gradients",
                BranchTag::Baseline => "baseline gradients",
            }));
        }
        for (br, g) in self.branches.iter_mut().zip(&grads) {
            br.adam.step(&mut br.net.params, g);
        }
        self.step += 1;
        Ok(report)
    }

    /// Metrics of every network on `samples`.
    pub fn validate(&self, samples: &[FrameSample]) -> Result<Vec<(BranchTag, Metrics)>> {
        self.branches
            .iter()
            .map(|b| Ok((b.tag, evaluate_network(&b.net, samples, self.config.eval.median_scale)?)))
            .collect()
    }
}

/// Training and validation samples.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Vec<FrameSample>,
    pub val: Vec<FrameSample>,
}

/// Seed of the generated training split.
pub fn train_data_seed(seed: u64) -> u64 {
    mix(seed, 11)
}

/// Seed of the generated validation split.
pub fn val_data_seed(seed: u64) -> u64 {
    mix(seed, 12)
}

/// Parameters of the generated validation split.
pub fn val_params(config: &Config) -> DatasetParams {
    DatasetParams {
        frames: config.val_frames,
        ..config.data.clone()
    }
}

/// Training samples from `dataset.root`, or generated.
pub fn prepare_train(config: &Config) -> Result<Vec<FrameSample>> {
    let train = match &config.dataset_root {
        Some(root) => load_dataset(root)?,
        None => dataset_samples(&generate_dataset(train_data_seed(config.seed), &config.data)?)?,
    };
    if train.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    Ok(train)
}

/// Validation samples from `dataset.val_root`, or a separately seeded
/// generated split when the training data is generated too; empty
/// otherwise.
pub fn prepare_val(config: &Config) -> Result<Vec<FrameSample>> {
    match (&config.val_root, &config.dataset_root) {
        (Some(root), _) => load_dataset(root),
        (None, None) if config.val_frames >= 3 => {
            dataset_samples(&generate_dataset(val_data_seed(config.seed), &val_params(config))?)
        }
        _ => Ok(Vec::new()),
    }
}

pub fn prepare_data(config: &Config) -> Result<TrainData> {
    Ok(TrainData {
        train: prepare_train(config)?,
        val: prepare_val(config)?,
    })
}

/// Yields batches of sample indices forever, reshuffling every epoch.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
    batch: usize,
}

impl BatchSampler {
    pub fn new(len: usize, batch: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..len).collect(),
            pos: 0,
            epoch: 0,
            seed,
            batch,
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        self.order.sort_unstable();
        self.order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.seed, 0xe0_0000 + self.epoch)));
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        (0..self.batch)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.epoch += 1;
                    self.pos = 0;
                    self.shuffle();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: usize,
    pub branch: BranchTag,
    pub metrics: Metrics,
}

pub struct FitResult {
    pub trainer: Trainer,
    /// `(step, report)` for every step.
    pub history: Vec<(usize, LossReport)>,
    pub validation: Vec<ValidationRecord>,
}

pub fn history_csv(history: &[(usize, LossReport)]) -> String {
    let mut out = String::from(LossReport::CSV_HEADER);
    out.push('\n');
    for (step, r) in history {
        out.push_str(&r.csv_row(*step));
        out.push('\n');
    }
    out
}

pub fn validation_csv(records: &[ValidationRecord]) -> String {
    let mut out = format!("step,branch,{}\n", Metrics::CSV_HEADER);
    for r in records {
        out.push_str(&format!("{},{},{}\n", r.step, r.branch, r.metrics.csv_fields()));
    }
    out
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.csv";
pub const VALIDATION_FILE: &str = "validation.csv";

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

fn persist(out: &Path, trainer: &Trainer, history: &[(usize, LossReport)], validation: &[ValidationRecord]) -> Result<()> {
    trainer.checkpoint().save(&out.join(CHECKPOINT_FILE))?;
    write_file(&out.join(HISTORY_FILE), &history_csv(history))?;
    write_file(&out.join(VALIDATION_FILE), &validation_csv(validation))
}

/// Trains for `config.train.steps` steps. With `out`, writes the
/// checkpoint, loss history and validation history there periodically and
/// at the end.
pub fn fit(config: &Config, data: &TrainData, out: Option<&Path>) -> Result<FitResult> {
    let trainer = Trainer::new(config.clone())?;
    fit_from(trainer, data, out)
}

/// Parses a file written by [`history_csv`]. The baseline objective is not
/// stored and is recomputed from its parts with `weights`.
pub fn parse_history_csv(text: &str, weights: &LossWeights) -> Result<Vec<(usize, LossReport)>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(LossReport::CSV_HEADER) {
        return Err(Error::Validation("loss history has an unexpected header".into()));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = || Error::Validation(format!("loss history line {}: cannot parse `{line}`", i + 2));
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 10 {
                return Err(bad());
            }
            let step = fields[0].trim().parse().map_err(|_| bad())?;
            let v = fields[1..]
                .iter()
                .map(|f| f.trim().parse::<f64>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            let mut r = LossReport {
                l_s: v[0],
                l_u: v[1],
                l_smooth: v[2],
                l_su: v[3],
                l_uu: v[4],
                l_sd: v[5],
                l_ud: v[6],
                total_s: v[7],
                total_u: v[8],
                baseline: 0.0,
            };
            r.baseline = total_losses(&r, weights).baseline;
            Ok((step, r))
        })
        .collect()
}

/// Continues training `trainer` until `config.train.steps`.
pub fn fit_from(trainer: Trainer, data: &TrainData, out: Option<&Path>) -> Result<FitResult> {
    resume_fit(trainer, Vec::new(), data, out)
}

/// Like [`fit_from`], with the loss history of the steps already taken so
/// that the persisted history covers the whole run. Entries at or after the
/// trainer's step are dropped.
pub fn resume_fit(
    mut trainer: Trainer,
    mut history: Vec<(usize, LossReport)>,
    data: &TrainData,
    out: Option<&Path>,
) -> Result<FitResult> {
    let cfg = trainer.config.clone();
    if data.train.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut sampler = BatchSampler::new(data.train.len(), cfg.train.batch, mix(cfg.seed, 3));
    // Replay the sampler so a resumed run sees the same batches.
    for _ in 0..trainer.step {
        sampler.next_batch();
    }
    history.retain(|(step, _)| *step < trainer.step);
    let mut validation = Vec::new();
    let validate = |trainer: &Trainer, validation: &mut Vec<ValidationRecord>| -> Result<()> {
        if data.val.is_empty() {
            return Ok(());
        }
        for (branch, metrics) in trainer.validate(&data.val)? {
            info!("step {} {branch}: abs_rel {:.4} rmse {:.4}", trainer.step, metrics.abs_rel, metrics.rmse);
            validation.push(ValidationRecord {
                step: trainer.step,
                branch,
                metrics,
            });
        }
        Ok(())
    };

    while trainer.step < cfg.train.steps {
        let batch: Vec<FrameSample> = sampler.next_batch().into_iter().map(|i| data.train[i].clone()).collect();
        let step = trainer.step;
        let report = trainer.train_step(&batch)?;
        history.push((step, report));
        if step % 100 == 0 {
            info!(
                "step {step}: total_s {:.4} total_u {:.4} baseline {:.4}",
                report.total_s, report.total_u, report.baseline
            );
        }
        let done = trainer.step;
        if cfg.train.eval_every > 0 && done % cfg.train.eval_every == 0 && done < cfg.train.steps {
            validate(&trainer, &mut validation)?;
        }
        if let Some(dir) = out {
            if cfg.train.checkpoint_every > 0 && done % cfg.train.checkpoint_every == 0 && done < cfg.train.steps {
                persist(dir, &trainer, &history, &validation)?;
            }
        }
    }
    validate(&trainer, &mut validation)?;
    if let Some(dir) = out {
        persist(dir, &trainer, &history, &validation)?;
    }
    Ok(FitResult {
        trainer,
        history,
        validation,
    })
}
