//! Three-pass training loop: photometric pass, appearance/spatial
//! augmentation pass, semantic copy-paste pass; one combined optimizer step
//! per batch. Includes the ablation switchboard, periodic validation, and
//! checkpointing.

use crate::augment::{
    apply_semantic_augmentation, arflow_transform, extract_pole_cutouts, extract_vehicle_cutouts,
    ArTransformParams, CacheSet, TransformedSample,
};
use crate::data::{preprocess, PreprocessConfig};
use crate::error::{Error, Result};
use crate::eval::{EvalReport, ReportAccumulator};
use crate::kernels::{occlusion_from_fb, OCC_A1, OCC_A2};
use crate::losses::{
    ar_loss, photometric_loss, semaug_loss, smoothness_loss, total_loss, LossRegion, LossWeights,
    Schedule,
};
use crate::model::{
    load_checkpoint, one_hot_batch, save_checkpoint, Direction, FlowNet, NetworkOutput,
};
use crate::types::{FlowField, Image, OcclusionMask, Sample, SemanticMap};
use ndarray::{Array2, Array3, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semarflow_autograd::{backward, clip_global_norm, Adam, AdamConfig, Element, Tensor};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Which class groups feed the occluder cache (Table-4 ablation axis).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugClasses {
    Vehicles,
    VehiclesAndPoles,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    /// Fixed rate of the first phase.
    pub base_lr: f64,
    /// Fraction of the run at which the one-cycle phase begins.
    pub onecycle_start_frac: f64,
    pub max_lr: f64,
    /// Warmup fraction within the cycle.
    pub pct_up: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base_lr: 2e-4,
            onecycle_start_frac: 0.5,
            max_lr: 4e-4,
            pct_up: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }
}

impl LrSchedule {
    /// Constant phase, then linear warmup to the max rate and linear
    /// annealing to max / final_div_factor.
    pub fn rate(&self, iteration: u64, total: u64) -> f64 {
        let t = iteration as f64 / total.max(1) as f64;
        if t < self.onecycle_start_frac {
            return self.base_lr;
        }
        let span = (1.0 - self.onecycle_start_frac).max(1e-9);
        let p = (t - self.onecycle_start_frac) / span;
        if p < self.pct_up {
            let lo = self.max_lr / self.div_factor;
            lo + (self.max_lr - lo) * (p / self.pct_up)
        } else {
            let lo = self.max_lr / self.final_div_factor;
            self.max_lr + (lo - self.max_lr) * ((p - self.pct_up) / (1.0 - self.pct_up))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub schedule: Schedule,
    pub weights: LossWeights,
    pub use_smoothness: bool,
    pub smoothness_weight: f64,
    pub use_semaug: bool,
    pub aug_classes: AugClasses,
    pub loss_region: LossRegion,
    pub cache_capacity: usize,
    /// Global-norm gradient clip; `None` disables it.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub validate_every_frac: f64,
    pub ar_params: ArTransformParams,
    pub preprocess: PreprocessConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1000,
            batch_size: 2,
            lr: LrSchedule::default(),
            beta1: 0.9,
            beta2: 0.999,
            schedule: Schedule::default(),
            weights: LossWeights::default(),
            use_smoothness: false,
            smoothness_weight: 0.1,
            use_semaug: true,
            aug_classes: AugClasses::VehiclesAndPoles,
            loss_region: LossRegion::FullSupport,
            cache_capacity: 64,
            grad_clip: Some(1.0),
            seed: 0,
            validate_every_frac: 0.05,
            ar_params: ArTransformParams::default(),
            preprocess: PreprocessConfig {
                target: None,
                hflip_prob: 0.5,
                swap_prob: 0.5,
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.schedule.validate()?;
        if !(0.0..=1.0).contains(&self.validate_every_frac) {
            return Err(Error::Config("validate_every_frac must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Loss breakdown of one optimizer step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepStats {
    pub iteration: u64,
    pub total: f64,
    pub photometric: f64,
    pub ar: f64,
    pub aug: f64,
    pub smoothness: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub pass3_ran: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValRecord {
    pub iteration: u64,
    pub epe_all: f64,
    pub epe_noc: Option<f64>,
    pub epe_occ: Option<f64>,
    pub fl_all: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct History {
    pub steps: Vec<StepStats>,
    pub validations: Vec<ValRecord>,
}

// independent deterministic RNG streams per purpose, so toggling one pass
// never shifts another pass's draws
const STREAM_SHUFFLE: u64 = 0x51;
const STREAM_PREPROCESS: u64 = 0x52;
const STREAM_PASS2: u64 = 0x53;
const STREAM_PASS3: u64 = 0x54;
const STREAM_CACHE: u64 = 0x55;

fn mix(seed: u64, stream: u64, step: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ step.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_rng(seed: u64, stream: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, stream, step))
}

pub struct Trainer<T: Element> {
    pub model: FlowNet<T>,
    pub cfg: TrainConfig,
    opt: Adam<T>,
    caches: CacheSet,
    cache_touches: u64,
    iteration: u64,
}

fn image_batch<T: Element>(images: &[&Image]) -> Tensor<T> {
    let (h, w) = (images[0].height(), images[0].width());
    let mut out = ArrayD::zeros(vec![images.len(), 3, h, w]);
    for (i, img) in images.iter().enumerate() {
        out.index_axis_mut(Axis(0), i)
            .assign(&img.data.mapv(T::from_f32).into_dyn());
    }
    Tensor::constant(out)
}

fn stack_planes<T: Element>(planes: &[ArrayD<T>]) -> ArrayD<T> {
    let mut shape = planes[0].shape().to_vec();
    shape[0] = planes.len();
    let mut out = ArrayD::zeros(shape);
    for (i, p) in planes.iter().enumerate() {
        out.index_axis_mut(Axis(0), i)
            .assign(&p.index_axis(Axis(0), 0));
    }
    out
}

fn flow_to_array<T: Element>(flow: &FlowField) -> ArrayD<T> {
    let (h, w) = (flow.height(), flow.width());
    flow.data
        .mapv(T::from_f32)
        .into_shape_with_order(ndarray::IxDyn(&[1, 2, h, w]))
        .unwrap()
}

fn mask_to_array<T: Element>(mask: &Array2<u8>) -> ArrayD<T> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    mask.mapv(|v| T::from_f32(v as f32))
        .into_shape_with_order(ndarray::IxDyn(&[1, 1, h, w]))
        .unwrap()
}

/// Per-sample finest forward flow, detached to f32.
fn finest_flow_per_sample<T: Element>(out: &NetworkOutput<T>) -> Vec<FlowField> {
    let u = out.finest_fw();
    let (n, _, h, w) = u.dims4();
    (0..n)
        .map(|i| {
            let mut f = Array3::<f32>::zeros((2, h, w));
            for c in 0..2 {
                for y in 0..h {
                    for x in 0..w {
                        f[[c, y, x]] = u.data()[[i, c, y, x]].as_f32();
                    }
                }
            }
            FlowField::new(f)
        })
        .collect()
}

fn occ_per_sample<T: Element>(occ: &ArrayD<T>) -> Vec<OcclusionMask> {
    let (n, _, h, w) = (occ.shape()[0], occ.shape()[1], occ.shape()[2], occ.shape()[3]);
    (0..n)
        .map(|i| {
            let mut m = Array2::<u8>::zeros((h, w));
            for y in 0..h {
                for x in 0..w {
                    if occ[[i, 0, y, x]] > T::from_f64(0.5) {
                        m[[y, x]] = 1;
                    }
                }
            }
            OcclusionMask { data: m }
        })
        .collect()
}

impl<T: Element> Trainer<T> {
    pub fn new(model: FlowNet<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = Adam::new(
            model.store(),
            AdamConfig {
                beta1: cfg.beta1,
                beta2: cfg.beta2,
                eps: 1e-8,
            },
        );
        let caches = CacheSet::new(cfg.cache_capacity);
        Ok(Trainer {
            model,
            cfg,
            opt,
            caches,
            cache_touches: 0,
            iteration: 0,
        })
    }

    /// Rebuild a trainer from a checkpoint written by [`Trainer::save`],
    /// restoring optimizer moments and the iteration counter. The occluder
    /// cache restarts empty.
    pub fn resume(path: &Path, cfg: TrainConfig) -> Result<Self> {
        let (model, manifest, extra) = load_checkpoint::<T>(path)?;
        let mut trainer = Trainer::new(model, cfg)?;
        trainer.opt.restore_state(trainer.model.store(), &extra);
        trainer.iteration = manifest.iteration;
        Ok(trainer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let extra = self.opt.state_arrays(self.model.store());
        save_checkpoint(path, &self.model, self.iteration, self.cfg.seed, &extra)
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.opt.steps()
    }

    pub fn cache_touches(&self) -> u64 {
        self.cache_touches
    }

    pub fn cache_len(&self) -> usize {
        self.caches.total_len()
    }

    fn forward_batch(
        &self,
        leaves: &[Tensor<T>],
        i1s: &[&Image],
        i2s: &[&Image],
        s1s: &[&SemanticMap],
        s2s: &[&SemanticMap],
    ) -> Result<NetworkOutput<T>> {
        let i1 = image_batch::<T>(i1s);
        let i2 = image_batch::<T>(i2s);
        let s1 = one_hot_batch::<T>(s1s);
        let s2 = one_hot_batch::<T>(s2s);
        self.model.forward(leaves, &i1, &i2, &s1, &s2)
    }

    /// One optimizer step over a batch. Runs pass 1 always, pass 2 and
    /// pass 3 per the schedule, then mines this batch's cutouts into the
    /// cache (sampling happens before pushing).
    pub fn train_step(&mut self, batch: &[Sample]) -> Result<StepStats> {
        let it = self.iteration;
        let total_iters = self.cfg.iterations;
        let mut rng_pre = stream_rng(self.cfg.seed, STREAM_PREPROCESS, it);
        let samples: Vec<Sample> = batch
            .iter()
            .map(|s| preprocess(s, &self.cfg.preprocess, &mut rng_pre))
            .collect::<Result<_>>()?;

        let leaves = self.model.bind_leaves();

        // ---- pass 1: photometric ----
        let i1s: Vec<&Image> = samples.iter().map(|s| &s.i1).collect();
        let i2s: Vec<&Image> = samples.iter().map(|s| &s.i2).collect();
        let s1s: Vec<&SemanticMap> = samples.iter().map(|s| &s.s1).collect();
        let s2s: Vec<&SemanticMap> = samples.iter().map(|s| &s.s2).collect();
        let out = self.forward_batch(&leaves, &i1s, &i2s, &s1s, &s2s)?;

        let mut weights = self.cfg.weights.clone();
        weights.measure_weights = self.cfg.schedule.measure_weights(it, total_iters);
        let i1_t = image_batch::<T>(&i1s);
        let i2_t = image_batch::<T>(&i2s);
        let l_ph = photometric_loss(&i1_t, &i2_t, &out, &weights)?;

        let l_sm = if self.cfg.use_smoothness {
            let fw = smoothness_loss(out.finest_fw(), &i1_t)?;
            let bw = smoothness_loss(out.finest_bw(), &i2_t)?;
            Some(fw.add(&bw).scale(T::from_f64(0.5)))
        } else {
            None
        };

        // full-resolution first-pass products, detached
        let occ_fw = occlusion_from_fb(
            out.finest_fw().data(),
            out.finest_bw().data(),
            OCC_A1,
            OCC_A2,
        )?;
        let first_pass_flows = finest_flow_per_sample(&out);
        let first_pass_occs = occ_per_sample(&occ_fw);

        // ---- pass 2: appearance/spatial self-supervision ----
        let mut l_ar: Option<Tensor<T>> = None;
        if self.cfg.schedule.pass2_active(it, total_iters) {
            let mut rng2 = stream_rng(self.cfg.seed, STREAM_PASS2, it);
            let transformed: Vec<TransformedSample> = samples
                .iter()
                .zip(&first_pass_flows)
                .zip(&first_pass_occs)
                .map(|((s, f), o)| arflow_transform(s, f, o, &self.cfg.ar_params, &mut rng2))
                .collect::<Result<_>>()?;
            let ti1: Vec<&Image> = transformed.iter().map(|t| &t.i1).collect();
            let ti2: Vec<&Image> = transformed.iter().map(|t| &t.i2).collect();
            let ts1: Vec<&SemanticMap> = transformed.iter().map(|t| &t.s1).collect();
            let ts2: Vec<&SemanticMap> = transformed.iter().map(|t| &t.s2).collect();
            let out2 = self.forward_batch(&leaves, &ti1, &ti2, &ts1, &ts2)?;

            let targets = stack_planes(
                &transformed
                    .iter()
                    .map(|t| flow_to_array::<T>(&t.u_target))
                    .collect::<Vec<_>>(),
            );
            let occs = stack_planes(
                &transformed
                    .iter()
                    .map(|t| mask_to_array::<T>(&t.occ_target.data))
                    .collect::<Vec<_>>(),
            );
            let (loss, _degenerate) = ar_loss(&targets, out2.finest_fw(), &occs);
            l_ar = Some(loss);
        }

        // ---- pass 3: semantic copy-paste self-supervision ----
        let mut l_aug: Option<Tensor<T>> = None;
        let mut pass3_ran = false;
        if self.cfg.use_semaug && self.cfg.schedule.pass3_active(it, total_iters) {
            let mut rng3 = stream_rng(self.cfg.seed, STREAM_PASS3, it);
            self.cache_touches += 1;
            let mut augmented = Vec::with_capacity(samples.len());
            let mut ok = true;
            for (s, (f, o)) in samples
                .iter()
                .zip(first_pass_flows.iter().zip(&first_pass_occs))
            {
                let mut placed = None;
                for _ in 0..3 {
                    let drawn = match self.cfg.aug_classes {
                        AugClasses::Vehicles => self.caches.vehicles.sample(&mut rng3),
                        AugClasses::VehiclesAndPoles => self.caches.sample(&mut rng3),
                    };
                    let Some((cutout, aug_flow)) = drawn else { break };
                    match apply_semantic_augmentation(s, f, o, cutout, aug_flow) {
                        Ok(a) => {
                            placed = Some(a);
                            break;
                        }
                        Err(Error::NoOccluder) => continue,
                        Err(e) => return Err(e),
                    }
                }
                match placed {
                    Some(a) => augmented.push(a),
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok && !augmented.is_empty() {
                let ai1: Vec<&Image> = augmented.iter().map(|a| &a.i1).collect();
                let ai2: Vec<&Image> = augmented.iter().map(|a| &a.i2).collect();
                let as1: Vec<&SemanticMap> = augmented.iter().map(|a| &a.s1).collect();
                let as2: Vec<&SemanticMap> = augmented.iter().map(|a| &a.s2).collect();
                let out3 = self.forward_batch(&leaves, &ai1, &ai2, &as1, &as2)?;
                let targets = stack_planes(
                    &augmented
                        .iter()
                        .map(|a| flow_to_array::<T>(&a.u_target))
                        .collect::<Vec<_>>(),
                );
                let occs = stack_planes(
                    &augmented
                        .iter()
                        .map(|a| mask_to_array::<T>(&a.occ_orig.data))
                        .collect::<Vec<_>>(),
                );
                let masks = stack_planes(
                    &augmented
                        .iter()
                        .map(|a| mask_to_array::<T>(&a.paste_mask))
                        .collect::<Vec<_>>(),
                );
                let (loss, _degenerate) =
                    semaug_loss(&targets, out3.finest_fw(), &occs, &masks, self.cfg.loss_region);
                l_aug = Some(loss);
                pass3_ran = true;
            }
        }

        // ---- combine, check, update ----
        let mut objective = total_loss(&l_ph, l_ar.as_ref(), l_aug.as_ref(), &self.cfg.weights);
        if let Some(sm) = &l_sm {
            objective = objective.add(&sm.scale(T::from_f64(self.cfg.smoothness_weight)));
        }

        let stats_values = [
            objective.item().as_f64(),
            l_ph.item().as_f64(),
            l_ar.as_ref().map(|t| t.item().as_f64()).unwrap_or(0.0),
            l_aug.as_ref().map(|t| t.item().as_f64()).unwrap_or(0.0),
            l_sm.as_ref().map(|t| t.item().as_f64()).unwrap_or(0.0),
        ];
        if stats_values.iter().any(|v| !v.is_finite()) {
            let ids: Vec<&str> = batch.iter().map(|s| s.id.as_str()).collect();
            return Err(Error::Train(format!(
                "non-finite loss at iteration {it}: total={} ph={} ar={} aug={} sm={} on batch {ids:?}",
                stats_values[0], stats_values[1], stats_values[2], stats_values[3], stats_values[4]
            )));
        }

        let grad_store = backward(&objective);
        let mut grads: Vec<Option<ArrayD<T>>> = Vec::with_capacity(leaves.len());
        let mut grad_store = grad_store;
        for leaf in &leaves {
            grads.push(grad_store.take(leaf));
        }
        let grad_norm = match self.cfg.grad_clip {
            Some(max) => clip_global_norm(&mut grads, max),
            None => {
                let mut sq = 0.0;
                for g in grads.iter().flatten() {
                    sq += g.iter().map(|&x| x.as_f64() * x.as_f64()).sum::<f64>();
                }
                sq.sqrt()
            }
        };
        let lr = self.cfg.lr.rate(it, total_iters);
        self.opt.step(self.model.store_mut(), &grads, lr);

        // ---- mine this batch's occluders into the cache (after sampling) ----
        if self.cfg.use_semaug {
            let mut rng_cache = stream_rng(self.cfg.seed, STREAM_CACHE, it);
            self.cache_touches += 1;
            for (s, f) in samples.iter().zip(&first_pass_flows) {
                for cutout in extract_vehicle_cutouts(s, f) {
                    self.caches.push(cutout, &mut rng_cache);
                }
                if self.cfg.aug_classes == AugClasses::VehiclesAndPoles {
                    for cutout in extract_pole_cutouts(s, f) {
                        self.caches.push(cutout, &mut rng_cache);
                    }
                }
            }
        }

        self.iteration += 1;
        Ok(StepStats {
            iteration: it,
            total: stats_values[0],
            photometric: stats_values[1],
            ar: stats_values[2],
            aug: stats_values[3],
            smoothness: stats_values[4],
            lr,
            grad_norm,
            pass3_ran,
        })
    }

    /// Full training run with shuffled batches, periodic validation, and
    /// best/last checkpointing.
    pub fn fit(
        &mut self,
        train: &[Sample],
        val: &[Sample],
        checkpoint_dir: Option<&Path>,
        on_step: impl FnMut(&StepStats),
    ) -> Result<History> {
        self.fit_until(train, val, checkpoint_dir, on_step, self.cfg.iterations)
    }

    /// Like [`Trainer::fit`] but stopping at `stop` iterations while keeping
    /// every schedule relative to the configured total (checkpoint-resume
    /// keeps identical phase boundaries).
    pub fn fit_until(
        &mut self,
        train: &[Sample],
        val: &[Sample],
        checkpoint_dir: Option<&Path>,
        mut on_step: impl FnMut(&StepStats),
        stop: u64,
    ) -> Result<History> {
        if train.is_empty() && stop > self.iteration {
            return Err(Error::Config("training set is empty".into()));
        }
        let mut history = History::default();
        let total = self.cfg.iterations;
        let bpe = train.len().div_ceil(self.cfg.batch_size).max(1);
        let every = ((total as f64 * self.cfg.validate_every_frac).round() as u64).max(1);
        let mut best_epe = f64::INFINITY;

        let stop = stop.min(total);
        let mut order: Vec<usize> = Vec::new();
        while self.iteration < stop {
            let it = self.iteration;
            let pos = (it as usize) % bpe;
            if pos == 0 || order.is_empty() {
                let epoch = it / bpe as u64;
                order = (0..train.len()).collect();
                order.shuffle(&mut stream_rng(self.cfg.seed, STREAM_SHUFFLE, epoch));
            }
            let batch: Vec<Sample> = (0..self.cfg.batch_size)
                .map(|k| train[order[(pos * self.cfg.batch_size + k) % train.len()]].clone())
                .collect();
            let stats = self.train_step(&batch)?;
            on_step(&stats);
            history.steps.push(stats);

            let done = self.iteration >= stop;
            if !val.is_empty() && (self.iteration % every == 0 || done) {
                let report = evaluate_model(&self.model, val, self.cfg.batch_size.max(1))?;
                history.validations.push(ValRecord {
                    iteration: self.iteration,
                    epe_all: report.epe_all,
                    epe_noc: report.epe_noc,
                    epe_occ: report.epe_occ,
                    fl_all: report.fl_all,
                });
                if let Some(dir) = checkpoint_dir {
                    if report.epe_all < best_epe {
                        best_epe = report.epe_all;
                        self.save(&dir.join("best.ckpt"))?;
                    }
                    self.save(&dir.join("last.ckpt"))?;
                }
            }
        }
        if let Some(dir) = checkpoint_dir {
            self.save(&dir.join("last.ckpt"))?;
        }
        Ok(history)
    }
}

/// Run inference on one sample (batch of one).
pub fn infer_flow<T: Element>(model: &FlowNet<T>, sample: &Sample) -> Result<(FlowField, FlowField)> {
    let i1 = image_batch::<T>(&[&sample.i1]);
    let i2 = image_batch::<T>(&[&sample.i2]);
    let s1 = one_hot_batch::<T>(&[&sample.s1]);
    let s2 = one_hot_batch::<T>(&[&sample.s2]);
    let out = model.infer(&i1, &i2, &s1, &s2)?;
    let to_field = |t: &Tensor<T>| {
        let (_, _, h, w) = t.dims4();
        let mut f = Array3::<f32>::zeros((2, h, w));
        for c in 0..2 {
            for y in 0..h {
                for x in 0..w {
                    f[[c, y, x]] = t.data()[[0, c, y, x]].as_f32();
                }
            }
        }
        FlowField::new(f)
    };
    Ok((to_field(out.finest_fw()), to_field(out.finest_bw())))
}

/// Evaluate a model over labeled samples. Occlusion partitions come from
/// the generator's exact masks when present, otherwise from the estimator's
/// forward-backward consistency.
pub fn evaluate_model<T: Element>(
    model: &FlowNet<T>,
    samples: &[Sample],
    batch_size: usize,
) -> Result<EvalReport> {
    let mut acc = ReportAccumulator::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let i1s: Vec<&Image> = chunk.iter().map(|s| &s.i1).collect();
        let i2s: Vec<&Image> = chunk.iter().map(|s| &s.i2).collect();
        let s1s: Vec<&SemanticMap> = chunk.iter().map(|s| &s.s1).collect();
        let s2s: Vec<&SemanticMap> = chunk.iter().map(|s| &s.s2).collect();
        let i1 = image_batch::<T>(&i1s);
        let i2 = image_batch::<T>(&i2s);
        let s1 = one_hot_batch::<T>(&s1s);
        let s2 = one_hot_batch::<T>(&s2s);
        let out = model.infer(&i1, &i2, &s1, &s2)?;
        let preds = finest_flow_per_sample(&out);
        let est_occ = occlusion_from_fb(
            out.finest_fw().data(),
            out.finest_bw().data(),
            OCC_A1,
            OCC_A2,
        )?;
        let est_occs = occ_per_sample(&est_occ);
        for (i, s) in chunk.iter().enumerate() {
            let (Some(gt), Some(valid)) = (&s.gt_flow, &s.gt_valid) else {
                continue;
            };
            let occ = s.gt_occ.clone().unwrap_or_else(|| est_occs[i].clone());
            acc.add_sample(&preds[i], gt, valid, &occ, &s.s1)?;
        }
    }
    acc.finalize(None)
}
