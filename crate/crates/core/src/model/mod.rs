//! The flow network: a shared two-stream (image + semantics) pyramid encoder
//! and an iterative residual decoder whose flow estimator, context network,
//! and upsampling-mask network are shared across levels.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};

use crate::error::{Error, Result};
use crate::kernels::{
    convex_upsample, correlation_volume, warp_backward, Padding, UPSAMPLE_MASK_CHANNELS,
};
use crate::types::{SemanticMap, IGNORE_LABEL, NUM_CLASSES};
use ndarray::{Array3, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semarflow_autograd::{
    bilinear_resize, conv2d, kaiming_uniform, Conv2dSpec, Element, ParamId, ParamStore, Tensor,
};
use serde::{Deserialize, Serialize};

const LEAKY_SLOPE: f64 = 0.1;
/// Decoder iterations run over pyramid levels 6 down to 2.
pub const DECODER_LEVELS: [usize; 5] = [6, 5, 4, 3, 2];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Encoder level at which the semantic and image streams concatenate.
    pub merge_level: usize,
    /// Per-level encoder channel counts (levels 1..6).
    pub chan: [usize; 6],
    pub corr_radius: usize,
    /// Width of the per-level 1x1 compressor feeding the shared estimator.
    pub compress_ch: usize,
    /// Dense-connected flow-estimator widths; the last one is the carried
    /// feature width of the internal estimate F.
    pub estimator_widths: [usize; 5],
    /// Hidden widths of the dilated context network (dilations 1,2,4,8,16,1
    /// plus a final plain output conv).
    pub context_widths: [usize; 6],
    pub upmask_hidden: usize,
    pub use_learned_upsampler: bool,
    /// Weight-initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            merge_level: 3,
            chan: [16, 32, 64, 96, 128, 192],
            corr_radius: 4,
            compress_ch: 40,
            estimator_widths: [40, 40, 32, 28, 24],
            context_widths: [40, 40, 40, 32, 32, 24],
            upmask_hidden: 80,
            use_learned_upsampler: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.merge_level) {
            return Err(Error::Config(format!(
                "merge_level must be in 1..=4, got {}",
                self.merge_level
            )));
        }
        if self.chan.iter().any(|&c| c == 0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Feature channel count of pyramid level `l` (2..=6): concatenated
    /// two-stream width at and below the merge level, single-stream above.
    pub fn pyramid_channels(&self, l: usize) -> usize {
        if l <= self.merge_level {
            2 * self.chan[l - 1]
        } else {
            self.chan[l - 1]
        }
    }

    fn feat_ch(&self) -> usize {
        self.estimator_widths[4]
    }

    fn corr_channels(&self) -> usize {
        let side = 2 * self.corr_radius + 1;
        side * side
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
    spec: Conv2dSpec,
}

struct Blocks {
    /// Image-stream groups 1..=merge, two convs each.
    img: Vec<[ConvIds; 2]>,
    /// Semantic-stream groups 1..=merge.
    sem: Vec<[ConvIds; 2]>,
    /// Shared groups merge+1..=6.
    shared: Vec<[ConvIds; 2]>,
    /// Per-level 1x1 compressors, indexed by level-2.
    compress: Vec<ConvIds>,
    /// Shared dense flow estimator + flow head.
    estimator: Vec<ConvIds>,
    est_head: ConvIds,
    /// Shared dilated context network (hidden convs + output conv).
    context: Vec<ConvIds>,
    ctx_head: ConvIds,
    /// Shared upsampling-mask network.
    upmask: [ConvIds; 2],
}

/// The flow network. Parameters live in a [`ParamStore`]; a forward pass
/// binds them as graph leaves (training) or constants (inference).
pub struct FlowNet<T: Element> {
    cfg: ModelConfig,
    store: ParamStore<T>,
    blocks: Blocks,
}

/// Multi-scale bidirectional flow prediction. Index by level via
/// [`NetworkOutput::flow`]: level l lives at resolution (H/2^(l-2), W/2^(l-2)).
pub struct NetworkOutput<T: Element> {
    /// Forward (1->2) flow, index 0 = level 2 ... index 4 = level 6.
    pub u_fw: Vec<Tensor<T>>,
    /// Backward (2->1) flow, same indexing.
    pub u_bw: Vec<Tensor<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl<T: Element> NetworkOutput<T> {
    pub fn flow(&self, dir: Direction, level: usize) -> &Tensor<T> {
        assert!((2..=6).contains(&level));
        match dir {
            Direction::Forward => &self.u_fw[level - 2],
            Direction::Backward => &self.u_bw[level - 2],
        }
    }

    /// Full-resolution forward flow (level 2).
    pub fn finest_fw(&self) -> &Tensor<T> {
        &self.u_fw[0]
    }

    pub fn finest_bw(&self) -> &Tensor<T> {
        &self.u_bw[0]
    }
}

fn add_conv<T: Element>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    spec: Conv2dSpec,
) -> ConvIds {
    let w = store.add(
        format!("{name}.w"),
        kaiming_uniform(&[cout, cin, k, k], cin * k * k, LEAKY_SLOPE, rng),
    );
    let b = store.add(format!("{name}.b"), semarflow_autograd::zeros(&[cout]));
    ConvIds { w, b, spec }
}

/// Zero-initialized conv: flow residual heads and mask logits start at zero
/// so the network begins from the zero-flow estimate (full photometric
/// support under forward-backward consistency) and uniform upsampling
/// coefficients.
fn add_conv_zero<T: Element>(
    store: &mut ParamStore<T>,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    spec: Conv2dSpec,
) -> ConvIds {
    let w = store.add(
        format!("{name}.w"),
        semarflow_autograd::zeros(&[cout, cin, k, k]),
    );
    let b = store.add(format!("{name}.b"), semarflow_autograd::zeros(&[cout]));
    ConvIds { w, b, spec }
}

impl ConvIds {
    fn apply<T: Element>(&self, leaves: &[Tensor<T>], x: &Tensor<T>) -> Tensor<T> {
        conv2d(x, &leaves[self.w.0], &leaves[self.b.0], self.spec)
    }

    fn apply_leaky<T: Element>(&self, leaves: &[Tensor<T>], x: &Tensor<T>) -> Tensor<T> {
        self.apply(leaves, x).leaky_relu(T::from_f64(LEAKY_SLOPE))
    }
}

impl<T: Element> FlowNet<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        // The halving conv of each group keeps dilation 2 (stride 2, pad 2);
        // the second conv is a plain 3x3.
        let down = Conv2dSpec::new(2, 2, 2);
        let same = Conv2dSpec::new(1, 1, 1);
        let one = Conv2dSpec::new(1, 0, 1);

        let group = |store: &mut ParamStore<T>,
                     rng: &mut ChaCha8Rng,
                     name: &str,
                     cin: usize,
                     cout: usize| {
            [
                add_conv(store, rng, &format!("{name}.c0"), cin, cout, 3, down),
                add_conv(store, rng, &format!("{name}.c1"), cout, cout, 3, same),
            ]
        };

        let m = cfg.merge_level;
        let mut img = Vec::new();
        let mut sem = Vec::new();
        for l in 1..=m {
            let cin = if l == 1 { 3 } else { cfg.chan[l - 2] };
            img.push(group(&mut store, &mut rng, &format!("enc.img.l{l}"), cin, cfg.chan[l - 1]));
        }
        for l in 1..=m {
            let cin = if l == 1 { NUM_CLASSES } else { cfg.chan[l - 2] };
            sem.push(group(&mut store, &mut rng, &format!("enc.sem.l{l}"), cin, cfg.chan[l - 1]));
        }
        let mut shared = Vec::new();
        for l in m + 1..=6 {
            let cin = if l == m + 1 {
                2 * cfg.chan[m - 1]
            } else {
                cfg.chan[l - 2]
            };
            shared.push(group(
                &mut store,
                &mut rng,
                &format!("enc.shared.l{l}"),
                cin,
                cfg.chan[l - 1],
            ));
        }

        let feat = cfg.feat_ch();
        let mut compress = Vec::new();
        for l in 2..=6 {
            let cin = cfg.corr_channels() + cfg.pyramid_channels(l) + 2 + feat;
            compress.push(add_conv(
                &mut store,
                &mut rng,
                &format!("dec.compress.l{l}"),
                cin,
                cfg.compress_ch,
                1,
                one,
            ));
        }

        let mut estimator = Vec::new();
        let mut cin = cfg.compress_ch;
        for (i, &width) in cfg.estimator_widths.iter().enumerate() {
            estimator.push(add_conv(
                &mut store,
                &mut rng,
                &format!("dec.est.c{i}"),
                cin,
                width,
                3,
                same,
            ));
            cin += width;
        }
        let est_head = add_conv_zero(&mut store, "dec.est.head", cin, 2, 3, same);

        let dilations = [1usize, 2, 4, 8, 16, 1];
        let mut context = Vec::new();
        let mut cin = feat + 2;
        for (i, (&width, &d)) in cfg.context_widths.iter().zip(&dilations).enumerate() {
            context.push(add_conv(
                &mut store,
                &mut rng,
                &format!("dec.ctx.c{i}"),
                cin,
                width,
                3,
                Conv2dSpec::new(1, d, d),
            ));
            cin = width;
        }
        let ctx_head = add_conv_zero(&mut store, "dec.ctx.head", cin, 2, 3, same);

        let upmask = [
            add_conv(&mut store, &mut rng, "dec.up.c0", feat + 2, cfg.upmask_hidden, 3, same),
            add_conv_zero(
                &mut store,
                "dec.up.c1",
                cfg.upmask_hidden,
                UPSAMPLE_MASK_CHANNELS,
                1,
                one,
            ),
        ];

        Ok(FlowNet {
            cfg,
            store,
            blocks: Blocks {
                img,
                sem,
                shared,
                compress,
                estimator,
                est_head,
                context,
                ctx_head,
                upmask,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Bind parameters as differentiable leaves (one training step's view).
    pub fn bind_leaves(&self) -> Vec<Tensor<T>> {
        self.store.bind()
    }

    /// Bind parameters as constants: no tape is built behind the outputs.
    pub fn bind_constants(&self) -> Vec<Tensor<T>> {
        self.store
            .iter()
            .map(|(_, v)| Tensor::constant(v.clone()))
            .collect()
    }

    /// Encoder: two parallel streams through levels 1..merge_level, then a
    /// single stream to level 6. Returns features for levels 2..=6
    /// (index l-2). Each input resolution must be divisible by 64.
    pub fn encode(
        &self,
        leaves: &[Tensor<T>],
        img: &Tensor<T>,
        sem_onehot: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>> {
        let (_, _, h, w) = img.dims4();
        if h % 64 != 0 {
            return Err(Error::dimension("height", format!("{h} not divisible by 64")));
        }
        if w % 64 != 0 {
            return Err(Error::dimension("width", format!("{w} not divisible by 64")));
        }
        let m = self.cfg.merge_level;
        let mut pyramid = Vec::new(); // levels 2..=6

        let mut xi = img.clone();
        let mut xs = sem_onehot.clone();
        for l in 1..=m {
            xi = self.blocks.img[l - 1][1]
                .apply_leaky(leaves, &self.blocks.img[l - 1][0].apply_leaky(leaves, &xi));
            xs = self.blocks.sem[l - 1][1]
                .apply_leaky(leaves, &self.blocks.sem[l - 1][0].apply_leaky(leaves, &xs));
            if l >= 2 {
                pyramid.push(Tensor::concat_channels(&[xi.clone(), xs.clone()]));
            }
        }
        let mut x = Tensor::concat_channels(&[xi, xs]);
        for (i, l) in (m + 1..=6).enumerate() {
            x = self.blocks.shared[i][1]
                .apply_leaky(leaves, &self.blocks.shared[i][0].apply_leaky(leaves, &x));
            debug_assert!(l >= 2);
            pyramid.push(x.clone());
        }
        Ok(pyramid)
    }

    /// One decoder iteration at level `l`, refining the carried estimate.
    fn decode_step(
        &self,
        leaves: &[Tensor<T>],
        l: usize,
        f1: &Tensor<T>,
        f2: &Tensor<T>,
        prev: Option<&(Tensor<T>, Tensor<T>)>,
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let (n, _, h, w) = f1.dims4();
        let two = T::from_f64(2.0);
        let (mut flow, feat_prev) = match prev {
            // Upsample the previous internal estimate; flow magnitudes scale
            // with the grid.
            Some((pf, pfeat)) => (
                bilinear_resize(pf, h, w).scale(two),
                bilinear_resize(pfeat, h, w),
            ),
            // Level 6 starts from the zero estimate.
            None => (
                Tensor::constant(ArrayD::zeros(vec![n, 2, h, w])),
                Tensor::constant(ArrayD::zeros(vec![n, self.cfg.feat_ch(), h, w])),
            ),
        };

        let warped = warp_backward(f2, &flow, Padding::Zeros).expect("checked shapes");
        let cv = correlation_volume(f1, &warped, self.cfg.corr_radius).expect("checked shapes");
        let x = Tensor::concat_channels(&[cv, f1.clone(), flow.clone(), feat_prev]);
        let mut x = self.blocks.compress[l - 2].apply_leaky(leaves, &x);

        for conv in &self.blocks.estimator {
            let y = conv.apply_leaky(leaves, &x);
            x = Tensor::concat_channels(&[x, y]);
        }
        let feat = x.slice_channels(x.shape()[1] - self.cfg.feat_ch(), self.cfg.feat_ch());
        let residual = self.blocks.est_head.apply(leaves, &x);
        flow = flow.add(&residual);

        let mut c = Tensor::concat_channels(&[feat.clone(), flow.clone()]);
        for conv in &self.blocks.context {
            c = conv.apply_leaky(leaves, &c);
        }
        let refinement = self.blocks.ctx_head.apply(leaves, &c);
        flow = flow.add(&refinement);

        let f_in = Tensor::concat_channels(&[feat.clone(), flow.clone()]);
        let up = if self.cfg.use_learned_upsampler {
            let hmask = self.blocks.upmask[0].apply_leaky(leaves, &f_in);
            let mask = self.blocks.upmask[1].apply(leaves, &hmask);
            convex_upsample(&flow, &mask).expect("mask channels fixed")
        } else {
            bilinear_resize(&flow, 4 * h, 4 * w).scale(T::from_f64(4.0))
        };
        (flow, feat, up)
    }

    /// Decoder loop over levels 6..2 for one direction.
    fn decode(&self, leaves: &[Tensor<T>], pyr1: &[Tensor<T>], pyr2: &[Tensor<T>]) -> Vec<Tensor<T>> {
        let mut outputs = vec![None, None, None, None, None];
        let mut carried: Option<(Tensor<T>, Tensor<T>)> = None;
        for &l in DECODER_LEVELS.iter() {
            let f1 = &pyr1[l - 2];
            let f2 = &pyr2[l - 2];
            let (flow, feat, up) = self.decode_step(leaves, l, f1, f2, carried.as_ref());
            outputs[l - 2] = Some(up);
            carried = Some((flow, feat));
        }
        outputs.into_iter().map(Option::unwrap).collect()
    }

    /// Full bidirectional forward pass. `s1`/`s2` are one-hot semantic
    /// tensors [N, 19, H, W] (build them with [`one_hot_batch`]).
    ///
    /// Both frames run through the shared encoder in one doubled batch, and
    /// both flow directions run through the shared decoder the same way
    /// (source pyramid [f1; f2] against target pyramid [f2; f1]).
    pub fn forward(
        &self,
        leaves: &[Tensor<T>],
        i1: &Tensor<T>,
        i2: &Tensor<T>,
        s1: &Tensor<T>,
        s2: &Tensor<T>,
    ) -> Result<NetworkOutput<T>> {
        crate::kernels::expect_same_nhw(i1, i2, "forward")?;
        crate::kernels::expect_same_nhw(i1, s1, "forward")?;
        crate::kernels::expect_same_nhw(i1, s2, "forward")?;
        let n = i1.shape()[0];
        let img = Tensor::concat_batch(&[i1.clone(), i2.clone()]);
        let sem = Tensor::concat_batch(&[s1.clone(), s2.clone()]);
        let pyr = self.encode(leaves, &img, &sem)?;
        let mut pyr_src = Vec::with_capacity(pyr.len());
        let mut pyr_tgt = Vec::with_capacity(pyr.len());
        for f in &pyr {
            let f1 = f.slice_batch(0, n);
            let f2 = f.slice_batch(n, n);
            pyr_src.push(Tensor::concat_batch(&[f1.clone(), f2.clone()]));
            pyr_tgt.push(Tensor::concat_batch(&[f2, f1]));
        }
        let u_all = self.decode(leaves, &pyr_src, &pyr_tgt);
        let mut u_fw = Vec::with_capacity(u_all.len());
        let mut u_bw = Vec::with_capacity(u_all.len());
        for u in &u_all {
            u_fw.push(u.slice_batch(0, n));
            u_bw.push(u.slice_batch(n, n));
        }
        Ok(NetworkOutput { u_fw, u_bw })
    }

    /// Inference pass: constants only, no gradient tape.
    pub fn infer(
        &self,
        i1: &Tensor<T>,
        i2: &Tensor<T>,
        s1: &Tensor<T>,
        s2: &Tensor<T>,
    ) -> Result<NetworkOutput<T>> {
        let consts = self.bind_constants();
        self.forward(&consts, i1, i2, s1, s2)
    }
}

/// One-hot encode a semantic map: [19, H, W]; the ignore label maps to an
/// all-zero row.
pub fn one_hot<T: Element>(sem: &SemanticMap) -> Array3<T> {
    let (h, w) = (sem.height(), sem.width());
    let mut out = Array3::zeros((NUM_CLASSES, h, w));
    for y in 0..h {
        for x in 0..w {
            let id = sem.ids[[y, x]];
            if id != IGNORE_LABEL {
                out[[id as usize, y, x]] = T::one();
            }
        }
    }
    out
}

/// Stack per-sample one-hot maps into an [N, 19, H, W] tensor constant.
pub fn one_hot_batch<T: Element>(sems: &[&SemanticMap]) -> Tensor<T> {
    assert!(!sems.is_empty());
    let (h, w) = (sems[0].height(), sems[0].width());
    let n = sems.len();
    let mut out = ArrayD::zeros(vec![n, NUM_CLASSES, h, w]);
    for (i, s) in sems.iter().enumerate() {
        let oh = one_hot::<T>(s);
        out.index_axis_mut(ndarray::Axis(0), i)
            .assign(&oh.into_dyn());
    }
    Tensor::constant(out)
}
