//! Hierarchical flow denoiser: a conditioned U-Net with per-level flow and
//! feature projectors around a shared core, the multiscale flow loss,
//! staged training, and the coarse-to-fine sampler that strings together
//! DDIM steps and stage transitions.
//!
//! The denoiser is x0-parameterized: it predicts the clean normalized flow
//! pair at the current level; the implied noise is recovered algebraically
//! by the scheduler when stepping. Flows enter the network normalized by
//! [`FlowNormalizer`]; with the per-level divisor `d_max / 2^level`, a
//! given physical motion has the same normalized value at every level, so
//! a stage transition leaves normalized values unchanged and only the
//! spatial grid doubles.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, NodeId, Params};
use crate::data::TripletSource;
use crate::error::{Error, Result};
use crate::nn::{timestep_embedding, Conv2dLayer, GroupNormLayer, LinearLayer};
use crate::optim::{AdamW, OneCycle};
use crate::schedules::{make_sampling_path, NoiseSchedule, StagePlan};
use crate::synthesizer::{
    resize_flow_graph, stack_batch, standardize_graph, BatchSampler,
    FeatureStats, FeaturePyramid, Synthesizer,
};
use crate::tensor::{mix_seed, Tensor};

pub const PARAM_PREFIX: &str = "diff.";

/// Per-level flow scaling for diffusion: divisor `d_max / 2^level`, so
/// normalized values are level-invariant for the same physical motion.
/// `d_max` must be a power of two so normalize/denormalize round-trip
/// exactly in floating point.
#[derive(Debug, Clone, Copy)]
pub struct FlowNormalizer {
    d_max: f32,
}

impl FlowNormalizer {
    pub fn new(d_max: f32) -> Result<Self> {
        if !(d_max > 0.0) || d_max.log2().fract() != 0.0 {
            return Err(Error::invalid(format!(
                "d_max must be a positive power of two, got {d_max}"
            )));
        }
        Ok(FlowNormalizer { d_max })
    }

    pub fn d_max(&self) -> f32 {
        self.d_max
    }

    pub fn divisor(&self, level: usize) -> f32 {
        self.d_max / (1u32 << level) as f32
    }

    pub fn normalize(&self, flow_px: &Tensor, level: usize) -> Tensor {
        flow_px.scale(1.0 / self.divisor(level))
    }

    pub fn denormalize(&self, flow_norm: &Tensor, level: usize) -> Tensor {
        flow_norm.scale(self.divisor(level))
    }
}

impl Default for FlowNormalizer {
    fn default() -> Self {
        FlowNormalizer { d_max: 64.0 }
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserConfig {
    pub k0: usize,
    pub k1: usize,
    /// Core widths at the three U-Net depths.
    pub width: usize,
    pub width_mid: usize,
    pub width_deep: usize,
    pub temb_dim: usize,
    /// Encoder feature channels per level `k0..=k1` (conditioning input).
    pub cond_channels: Vec<usize>,
    /// One core shared by every level (per-level cores when false, the
    /// "unshared" ablation arm).
    pub share_core: bool,
}

impl DenoiserConfig {
    pub fn desk(k0: usize, k1: usize, cond_channels: Vec<usize>) -> Self {
        DenoiserConfig {
            k0,
            k1,
            width: 48,
            width_mid: 64,
            width_deep: 96,
            temb_dim: 64,
            cond_channels,
            share_core: true,
        }
    }

    pub fn num_levels(&self) -> usize {
        self.k1 - self.k0 + 1
    }

    fn validate(&self) -> Result<()> {
        if self.k0 > self.k1 {
            return Err(Error::invalid("k0 must be <= k1"));
        }
        if self.cond_channels.len() != self.num_levels() {
            return Err(Error::invalid(format!(
                "cond_channels must list levels {}..={}",
                self.k0, self.k1
            )));
        }
        for w in [self.width, self.width_mid, self.width_deep] {
            if w == 0 || w % 8 != 0 {
                return Err(Error::invalid("core widths must be positive multiples of 8"));
            }
        }
        if self.temb_dim % 2 != 0 {
            return Err(Error::invalid("temb_dim must be even"));
        }
        Ok(())
    }
}

struct ResBlock {
    gn1: GroupNormLayer,
    conv1: Conv2dLayer,
    temb: LinearLayer,
    gn2: GroupNormLayer,
    conv2: Conv2dLayer,
}

impl ResBlock {
    fn new<R: Rng>(params: &mut Params, rng: &mut R, name: &str, c: usize, temb_dim: usize) -> Self {
        ResBlock {
            gn1: GroupNormLayer::new(params, &format!("{name}.gn1"), c, 8),
            conv1: Conv2dLayer::new(params, rng, &format!("{name}.c1"), c, c, 3, 1),
            temb: LinearLayer::new(params, rng, &format!("{name}.temb"), temb_dim, c),
            gn2: GroupNormLayer::new(params, &format!("{name}.gn2"), c, 8),
            conv2: Conv2dLayer::with_gain(params, rng, &format!("{name}.c2"), c, c, 3, 1, 0.2),
        }
    }

    fn forward(&self, g: &mut Graph, params: &Params, x: NodeId, temb: NodeId) -> NodeId {
        let h = self.gn1.forward(g, params, x);
        let h = g.silu(h);
        let h = self.conv1.forward(g, params, h);
        let e = self.temb.forward(g, params, temb);
        let h = g.add_chan_vec(h, e);
        let h = self.gn2.forward(g, params, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, params, h);
        g.add(x, h)
    }
}

/// The fixed-width U-Net shared across levels.
struct Core {
    temb1: LinearLayer,
    temb2: LinearLayer,
    stem: Conv2dLayer,
    rb_top: ResBlock,
    down1: Conv2dLayer,
    rb_mid: ResBlock,
    down2: Conv2dLayer,
    rb_deep: ResBlock,
    up1: Conv2dLayer,
    fuse1: Conv2dLayer,
    rb_mid2: ResBlock,
    up2: Conv2dLayer,
    fuse2: Conv2dLayer,
    rb_top2: ResBlock,
    out_gn: GroupNormLayer,
    out: Conv2dLayer,
}

impl Core {
    fn new<R: Rng>(params: &mut Params, rng: &mut R, name: &str, cfg: &DenoiserConfig) -> Self {
        let (w, wm, wd, e) = (cfg.width, cfg.width_mid, cfg.width_deep, cfg.temb_dim);
        Core {
            temb1: LinearLayer::new(params, rng, &format!("{name}.temb1"), e, e),
            temb2: LinearLayer::new(params, rng, &format!("{name}.temb2"), e, e),
            stem: Conv2dLayer::new(params, rng, &format!("{name}.stem"), 2 * w, w, 3, 1),
            rb_top: ResBlock::new(params, rng, &format!("{name}.rb_top"), w, e),
            down1: Conv2dLayer::new(params, rng, &format!("{name}.down1"), w, wm, 3, 2),
            rb_mid: ResBlock::new(params, rng, &format!("{name}.rb_mid"), wm, e),
            down2: Conv2dLayer::new(params, rng, &format!("{name}.down2"), wm, wd, 3, 2),
            rb_deep: ResBlock::new(params, rng, &format!("{name}.rb_deep"), wd, e),
            up1: Conv2dLayer::new(params, rng, &format!("{name}.up1"), wd, wm, 3, 1),
            fuse1: Conv2dLayer::new(params, rng, &format!("{name}.fuse1"), 2 * wm, wm, 3, 1),
            rb_mid2: ResBlock::new(params, rng, &format!("{name}.rb_mid2"), wm, e),
            up2: Conv2dLayer::new(params, rng, &format!("{name}.up2"), wm, w, 3, 1),
            fuse2: Conv2dLayer::new(params, rng, &format!("{name}.fuse2"), 2 * w, w, 3, 1),
            rb_top2: ResBlock::new(params, rng, &format!("{name}.rb_top2"), w, e),
            out_gn: GroupNormLayer::new(params, &format!("{name}.out_gn"), w, 8),
            out: Conv2dLayer::with_gain(params, rng, &format!("{name}.out"), w, 4, 3, 1, 0.1),
        }
    }

    fn forward(&self, g: &mut Graph, params: &Params, x: NodeId, temb_raw: NodeId) -> NodeId {
        let e = self.temb1.forward(g, params, temb_raw);
        let e = g.silu(e);
        let temb = self.temb2.forward(g, params, e);

        let h = self.stem.forward(g, params, x);
        let top = self.rb_top.forward(g, params, h, temb);
        let d1 = self.down1.forward(g, params, top);
        let mid = self.rb_mid.forward(g, params, d1, temb);
        let d2 = self.down2.forward(g, params, mid);
        let deep = self.rb_deep.forward(g, params, d2, temb);

        let u1 = g.nearest_up2(deep);
        let u1 = self.up1.forward(g, params, u1);
        let u1 = g.concat_c(&[u1, mid]);
        let u1 = self.fuse1.forward(g, params, u1);
        let u1 = self.rb_mid2.forward(g, params, u1, temb);

        let u2 = g.nearest_up2(u1);
        let u2 = self.up2.forward(g, params, u2);
        let u2 = g.concat_c(&[u2, top]);
        let u2 = self.fuse2.forward(g, params, u2);
        let u2 = self.rb_top2.forward(g, params, u2, temb);

        let o = self.out_gn.forward(g, params, u2);
        let o = g.silu(o);
        self.out.forward(g, params, o)
    }
}

struct LevelProjectors {
    flow: Conv2dLayer,
    feat: Conv2dLayer,
}

/// Denoiser weights: shared core (or per-level cores for the unshared
/// ablation) plus per-level flow/feature projectors.
pub struct Denoiser {
    cfg: DenoiserConfig,
    cores: Vec<Core>,
    projectors: Vec<LevelProjectors>,
}

impl Denoiser {
    pub fn new<R: Rng>(params: &mut Params, rng: &mut R, cfg: DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let n_cores = if cfg.share_core { 1 } else { cfg.num_levels() };
        let cores = (0..n_cores)
            .map(|i| {
                let name = if cfg.share_core {
                    format!("{PARAM_PREFIX}core")
                } else {
                    format!("{PARAM_PREFIX}core_l{}", cfg.k0 + i)
                };
                Core::new(params, rng, &name, &cfg)
            })
            .collect();
        let projectors = (cfg.k0..=cfg.k1)
            .map(|level| {
                let cond = cfg.cond_channels[level - cfg.k0];
                LevelProjectors {
                    flow: Conv2dLayer::new(
                        params,
                        rng,
                        &format!("{PARAM_PREFIX}l{level}.flowproj"),
                        4,
                        cfg.width,
                        3,
                        1,
                    ),
                    feat: Conv2dLayer::new(
                        params,
                        rng,
                        &format!("{PARAM_PREFIX}l{level}.featproj"),
                        2 * cond,
                        cfg.width,
                        3,
                        1,
                    ),
                }
            })
            .collect();
        Ok(Denoiser {
            cfg,
            cores,
            projectors,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    fn core_for(&self, level: usize) -> &Core {
        if self.cfg.share_core {
            &self.cores[0]
        } else {
            &self.cores[level - self.cfg.k0]
        }
    }

    /// Predict the clean normalized bilateral flow at `level` from the
    /// noisy pair and the (raw) conditioning features, which are
    /// standardized here with the frozen stage-1 statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn denoise(
        &self,
        g: &mut Graph,
        params: &Params,
        feat0: NodeId,
        feat1: NodeId,
        f0_t: NodeId,
        f1_t: NodeId,
        t: usize,
        level: usize,
        stats: &FeatureStats,
    ) -> Result<(NodeId, NodeId)> {
        if level < self.cfg.k0 || level > self.cfg.k1 {
            return Err(Error::invalid(format!(
                "level {level} outside [{}, {}]",
                self.cfg.k0, self.cfg.k1
            )));
        }
        let proj = &self.projectors[level - self.cfg.k0];
        let (mean, std) = stats
            .level(level)
            .ok_or_else(|| Error::invalid(format!("no feature stats for level {level}")))?;
        let z0 = standardize_graph(g, feat0, mean, std);
        let z1 = standardize_graph(g, feat1, mean, std);
        let cond_in = g.concat_c(&[z0, z1]);
        let cond = proj.feat.forward(g, params, cond_in);

        let flow_in = g.concat_c(&[f0_t, f1_t]);
        let flow = proj.flow.forward(g, params, flow_in);

        let x = g.concat_c(&[flow, cond]);
        let n = g.value(x).shape()[0];
        let emb = timestep_embedding(t as f32, self.cfg.temb_dim);
        let mut batched = Tensor::zeros(&[n, self.cfg.temb_dim]);
        for ni in 0..n {
            batched.data_mut()[ni * self.cfg.temb_dim..(ni + 1) * self.cfg.temb_dim]
                .copy_from_slice(emb.data());
        }
        let temb = g.constant(batched);
        let out = self.core_for(level).forward(g, params, x, temb);
        Ok((g.narrow_c(out, 0, 2), g.narrow_c(out, 2, 2)))
    }
}

/// What the sampler needs from a denoiser: a clean-flow prediction at one
/// level. Implemented by [`Denoiser`] and by test doubles (e.g. the
/// ground-truth oracle used to validate the sampler algebra).
pub trait DenoisePredictor {
    #[allow(clippy::too_many_arguments)]
    fn predict(
        &self,
        g: &mut Graph,
        params: &Params,
        feat0: NodeId,
        feat1: NodeId,
        f0_t: NodeId,
        f1_t: NodeId,
        t: usize,
        level: usize,
        stats: &FeatureStats,
    ) -> Result<(NodeId, NodeId)>;
}

impl DenoisePredictor for Denoiser {
    fn predict(
        &self,
        g: &mut Graph,
        params: &Params,
        feat0: NodeId,
        feat1: NodeId,
        f0_t: NodeId,
        f1_t: NodeId,
        t: usize,
        level: usize,
        stats: &FeatureStats,
    ) -> Result<(NodeId, NodeId)> {
        self.denoise(g, params, feat0, feat1, f0_t, f1_t, t, level, stats)
    }
}

/// Multiscale flow loss: per-element mean L1 over both flows, summed over
/// levels.
pub fn flow_loss(preds: &[(usize, Tensor, Tensor)], gts: &[(usize, Tensor, Tensor)]) -> Result<f32> {
    if preds.len() != gts.len() {
        return Err(Error::invalid("flow_loss: level sets differ"));
    }
    let mut total = 0.0f64;
    for ((lp, p0, p1), (lg, g0, g1)) in preds.iter().zip(gts) {
        if lp != lg {
            return Err(Error::invalid(format!(
                "flow_loss: level mismatch {lp} vs {lg}"
            )));
        }
        if p0.shape() != g0.shape() || p1.shape() != g1.shape() {
            return Err(Error::invalid("flow_loss: shape mismatch"));
        }
        total += p0.sub(g0).abs_mean() as f64 + p1.sub(g1).abs_mean() as f64;
    }
    Ok(total as f32)
}

/// Graph version of [`flow_loss`], one mean-abs term per flow per level.
pub fn flow_loss_graph(
    g: &mut Graph,
    preds: &[(usize, NodeId, NodeId)],
    gts: &[(usize, NodeId, NodeId)],
) -> Result<NodeId> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::invalid("flow_loss: level sets differ or empty"));
    }
    let mut acc: Option<NodeId> = None;
    for ((lp, p0, p1), (lg, g0, g1)) in preds.iter().zip(gts) {
        if lp != lg {
            return Err(Error::invalid(format!(
                "flow_loss: level mismatch {lp} vs {lg}"
            )));
        }
        for (p, t) in [(p0, g0), (p1, g1)] {
            let d = g.sub(*p, *t);
            let a = g.abs(d);
            let m = g.mean(a);
            acc = Some(match acc {
                None => m,
                Some(prev) => g.add(prev, m),
            });
        }
    }
    Ok(acc.unwrap())
}

/// Conditioning features for levels `k0..=k1`, taken from two encoded
/// pyramids.
pub fn condition_features(
    p0: &FeaturePyramid,
    p1: &FeaturePyramid,
    k0: usize,
    k1: usize,
) -> Vec<(usize, NodeId, NodeId)> {
    (k0..=k1)
        .map(|l| (l, p0.levels[l], p1.levels[l]))
        .collect()
}

// --- training ---

#[derive(Debug, Clone)]
pub struct DiffTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr_peak: f32,
    pub lr_final: f32,
    pub weight_decay: f32,
    pub seed: u64,
    /// Resume point (see the synthesizer trainer).
    pub start_step: usize,
    /// Stop before `steps` (chunked training); 0 means run to the end.
    pub stop_step: usize,
    /// Draw `t` uniformly over each level's own stage interval (the
    /// default) or over the whole axis (ablation).
    pub uniform_t: bool,
}

impl Default for DiffTrainConfig {
    fn default() -> Self {
        DiffTrainConfig {
            steps: 600,
            batch: 8,
            lr_peak: 4e-4,
            lr_final: 4e-5,
            weight_decay: 1e-4,
            seed: 0,
            start_step: 0,
            stop_step: 0,
            uniform_t: false,
        }
    }
}

/// Draw one training timestep per plan level: uniform over the level's
/// own stage interval (or over the whole axis with `uniform_t`), always
/// at least 1.
pub fn draw_timesteps<R: Rng>(plan: &StagePlan, uniform_t: bool, rng: &mut R) -> Vec<(usize, usize)> {
    plan.levels()
        .iter()
        .map(|&level| {
            let (lo, hi) = plan.interval(level).unwrap();
            let (lo, hi) = if uniform_t {
                (1, plan.t_max())
            } else {
                (lo.max(1), hi)
            };
            (level, rng.gen_range(lo..hi))
        })
        .collect()
}

/// One phase-2 log row: total Eq.-10 loss plus per-level components and
/// the timesteps drawn this step.
#[derive(Debug, Clone)]
pub struct DiffLogRow {
    pub step: usize,
    pub loss: f32,
    pub lr: f32,
    pub per_level: Vec<(usize, f32)>,
    pub t_draws: Vec<(usize, usize)>,
}

/// Phase-2 training: freeze the synthesizer, condition on its encoder
/// features, and supervise the denoiser with the multiscale flow loss.
/// Levels and their timestep intervals come from `plan`; a single-level
/// plan reproduces the fixed-resolution ablation arm.
#[allow(clippy::too_many_arguments)]
pub fn train_diffusion(
    source: &dyn TripletSource,
    synth: &Synthesizer,
    den: &Denoiser,
    params: &mut Params,
    stats: &FeatureStats,
    sched: &NoiseSchedule,
    plan: &StagePlan,
    norm: &FlowNormalizer,
    cfg: &DiffTrainConfig,
    opt: &mut AdamW,
    mut log: impl FnMut(&DiffLogRow),
) -> Result<Vec<DiffLogRow>> {
    if source.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    for &level in plan.levels() {
        if level < den.config().k0 || level > den.config().k1 {
            return Err(Error::invalid(format!(
                "plan level {level} outside denoiser range"
            )));
        }
    }
    let sched_lr = OneCycle::new(cfg.lr_peak, cfg.lr_final, cfg.steps);
    let mut sampler = BatchSampler::new(source.len(), cfg.batch, mix_seed(cfg.seed, 2));
    for _ in 0..cfg.start_step {
        sampler.next_batch();
    }
    let stop = if cfg.stop_step == 0 {
        cfg.steps
    } else {
        cfg.stop_step.min(cfg.steps)
    };
    let mut rows = Vec::with_capacity(stop.saturating_sub(cfg.start_step));

    // The synthesizer is frozen in this phase, so per-sample conditioning
    // features and ground-truth flows can be computed once and reused
    // across epochs (capped so huge datasets fall back to re-encoding).
    struct CacheEntry {
        feats: Vec<(usize, Tensor, Tensor)>,
        f0: Tensor,
        f1: Tensor,
    }
    let cache_cap = 4000usize;
    let mut cache: Vec<Option<CacheEntry>> = Vec::new();
    if source.len() <= cache_cap {
        cache.resize_with(source.len(), || None);
    }
    let levels: Vec<usize> = plan.levels().to_vec();

    for step in cfg.start_step..stop {
        let idxs = sampler.next_batch();
        let mut batch_entries: Vec<CacheEntry> = Vec::with_capacity(idxs.len());
        for &i in &idxs {
            if let Some(Some(hit)) = cache.get(i) {
                batch_entries.push(CacheEntry {
                    feats: hit.feats.clone(),
                    f0: hit.f0.clone(),
                    f1: hit.f1.clone(),
                });
                continue;
            }
            let t = source.get(i)?;
            if !t.has_flow() {
                return Err(Error::invalid(format!(
                    "sample {i} has no ground-truth flow; diffusion training needs flows"
                )));
            }
            let (c, h, w) = t.i0.dims3();
            let mut eg = Graph::new();
            let n0 = eg.constant(t.i0.clone().reshaped(&[1, c, h, w]));
            let n1 = eg.constant(t.i1.clone().reshaped(&[1, c, h, w]));
            let (p0, p1) = synth.encode(&mut eg, params, n0, n1)?;
            let feats = levels
                .iter()
                .map(|&l| {
                    (
                        l,
                        eg.value(p0.levels[l]).clone(),
                        eg.value(p1.levels[l]).clone(),
                    )
                })
                .collect();
            let entry = CacheEntry {
                feats,
                f0: t.f0.as_ref().unwrap().tensor().clone().reshaped(&[1, 2, h, w]),
                f1: t.f1.as_ref().unwrap().tensor().clone().reshaped(&[1, 2, h, w]),
            };
            if let Some(slot) = cache.get_mut(i) {
                *slot = Some(CacheEntry {
                    feats: entry.feats.clone(),
                    f0: entry.f0.clone(),
                    f1: entry.f1.clone(),
                });
            }
            batch_entries.push(entry);
        }
        let f0 = stack_batch(&batch_entries.iter().map(|e| &e.f0).collect::<Vec<_>>());
        let f1 = stack_batch(&batch_entries.iter().map(|e| &e.f1).collect::<Vec<_>>());
        let (_, _, h, w) = f0.dims4();

        let mut g = Graph::new();
        let feat_nodes: Vec<(usize, NodeId, NodeId)> = levels
            .iter()
            .map(|&l| {
                let a = stack_batch(
                    &batch_entries
                        .iter()
                        .map(|e| &e.feats.iter().find(|(ll, _, _)| *ll == l).unwrap().1)
                        .collect::<Vec<_>>(),
                );
                let b = stack_batch(
                    &batch_entries
                        .iter()
                        .map(|e| &e.feats.iter().find(|(ll, _, _)| *ll == l).unwrap().2)
                        .collect::<Vec<_>>(),
                );
                (l, g.constant(a), g.constant(b))
            })
            .collect();
        let f0n = g.constant(f0);
        let f1n = g.constant(f1);

        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x7000 + step as u64));
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        let t_draws = draw_timesteps(plan, cfg.uniform_t, &mut rng);

        for &(level, t) in &t_draws {

            let (lh, lw) = (h >> level, w >> level);
            let gt0 = resize_flow_graph(&mut g, f0n, lh, lw);
            let gt1 = resize_flow_graph(&mut g, f1n, lh, lw);
            let div = norm.divisor(level);
            let gt0n = g.mul_scalar(gt0, 1.0 / div);
            let gt1n = g.mul_scalar(gt1, 1.0 / div);

            // Noisy input built outside the gradient path.
            let (a, b) = sched.q_coeffs(t);
            let noisy = |g: &mut Graph, clean: NodeId, rng: &mut ChaCha8Rng| {
                let shape = g.value(clean).shape().to_vec();
                let eps = g.constant(Tensor::randn(&shape, rng));
                let scaled = g.mul_scalar(clean, a as f32);
                let scaled_eps = g.mul_scalar(eps, b as f32);
                let x = g.add(scaled, scaled_eps);
                g.detach(x)
            };
            let x0t = noisy(&mut g, gt0n, &mut rng);
            let x1t = noisy(&mut g, gt1n, &mut rng);

            let (_, c0, c1) = *feat_nodes
                .iter()
                .find(|(ll, _, _)| *ll == level)
                .expect("plan levels drive feat_nodes");
            let (pr0, pr1) = den.denoise(&mut g, params, c0, c1, x0t, x1t, t, level, stats)?;
            let gt0d = g.detach(gt0n);
            let gt1d = g.detach(gt1n);
            preds.push((level, pr0, pr1));
            gts.push((level, gt0d, gt1d));
        }

        let loss = flow_loss_graph(&mut g, &preds, &gts)?;
        let loss_v = g.value(loss).scalar();
        let per_level: Vec<(usize, f32)> = preds
            .iter()
            .zip(&gts)
            .map(|((l, p0_, p1_), (_, g0_, g1_))| {
                let d0 = g.value(*p0_).sub(g.value(*g0_)).abs_mean();
                let d1 = g.value(*p1_).sub(g.value(*g1_)).abs_mean();
                (*l, d0 + d1)
            })
            .collect();
        g.backward(loss);
        g.accumulate_param_grads(params);
        let lr = sched_lr.lr_at(step);
        opt.step(params, lr);

        let row = DiffLogRow {
            step,
            loss: loss_v,
            lr,
            per_level,
            t_draws,
        };
        log(&row);
        rows.push(row);
    }
    Ok(rows)
}

// --- sampling ---

#[derive(Debug, Clone, Copy)]
pub struct SampleOptions {
    pub n_steps: usize,
    pub seed: u64,
    pub sigma: f64,
    /// Cut gradients between sampler steps (memory-lean joint training).
    pub detach_between_steps: bool,
}

impl SampleOptions {
    pub fn deterministic(n_steps: usize, seed: u64) -> Self {
        SampleOptions {
            n_steps,
            seed,
            sigma: 0.0,
            detach_between_steps: false,
        }
    }
}

/// Counters and per-stage wall times recorded by one sampler run.
#[derive(Debug, Clone, Default)]
pub struct SampleInstrumentation {
    pub denoiser_calls: usize,
    pub stage_transitions: usize,
    pub calls_per_level: Vec<(usize, usize)>,
    pub millis_per_level: Vec<(usize, f64)>,
}

impl SampleInstrumentation {
    fn bump_call(&mut self, level: usize) {
        self.denoiser_calls += 1;
        match self.calls_per_level.iter_mut().find(|(l, _)| *l == level) {
            Some((_, c)) => *c += 1,
            None => self.calls_per_level.push((level, 1)),
        }
    }

    fn add_time(&mut self, level: usize, ms: f64) {
        match self.millis_per_level.iter_mut().find(|(l, _)| *l == level) {
            Some((_, t)) => *t += ms,
            None => self.millis_per_level.push((level, ms)),
        }
    }
}

/// Walk the staged sampling path on the graph, returning the final clean
/// normalized prediction per level (coarse to fine), each at its own
/// resolution. Conditioning features are picked from `cond` by level.
#[allow(clippy::too_many_arguments)]
pub fn sample_flow_multiscale_graph(
    g: &mut Graph,
    params: &Params,
    den: &dyn DenoisePredictor,
    cond: &[(usize, NodeId, NodeId)],
    stats: &FeatureStats,
    sched: &NoiseSchedule,
    plan: &StagePlan,
    norm: &FlowNormalizer,
    opts: &SampleOptions,
    instr: &mut SampleInstrumentation,
) -> Result<Vec<(usize, NodeId, NodeId)>> {
    let path = make_sampling_path(plan, opts.n_steps)?;
    let coarsest = plan.coarsest();
    let feat = |level: usize| -> Result<(NodeId, NodeId)> {
        cond.iter()
            .find(|(l, _, _)| *l == level)
            .map(|&(_, a, b)| (a, b))
            .ok_or_else(|| Error::invalid(format!("missing conditioning features for level {level}")))
    };

    let (fa, _) = feat(coarsest)?;
    let (n, _, ch, cw) = g.value(fa).dims4();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(opts.seed, 0x5A17));
    let mut x0 = g.constant(Tensor::randn(&[n, 2, ch, cw], &mut rng));
    let mut x1 = g.constant(Tensor::randn(&[n, 2, ch, cw], &mut rng));

    let mut outputs: Vec<(usize, NodeId, NodeId)> = Vec::new();
    let entries = path.entries();
    for (j, e) in entries.iter().enumerate() {
        let started = Instant::now();
        let (c0, c1) = feat(e.level)?;
        let (p0, p1) = den.predict(g, params, c0, c1, x0, x1, e.t, e.level, stats)?;
        instr.bump_call(e.level);

        let is_last = j + 1 == entries.len();
        let t_prev = if is_last { 0 } else { entries[j + 1].t };

        if is_last || entries[j + 1].level != e.level {
            // Final clean estimate this stage emits.
            outputs.push((e.level, p0, p1));
        }

        if is_last {
            x0 = p0;
            x1 = p1;
        } else if e.boundary_after {
            // Stage transition: denormalize to pixel units, 2x upsample
            // with doubled values, renormalize at the finer level, then
            // re-noise at t_prev. With power-of-two divisors the value
            // scaling cancels exactly; the explicit chain keeps the
            // pixel-unit semantics visible.
            let div = norm.divisor(e.level);
            let next_div = norm.divisor(e.level - 1);
            let (a, b) = sched.q_coeffs(t_prev);
            let (_, _, hh, ww) = g.value(p0).dims4();
            let transit = |g: &mut Graph, p: NodeId, rng: &mut ChaCha8Rng| {
                let px = g.mul_scalar(p, div);
                let up = g.resize_bilinear(px, 2 * hh, 2 * ww);
                let up2 = g.mul_scalar(up, 2.0);
                let renorm = g.mul_scalar(up2, 1.0 / next_div);
                let eps = g.constant(Tensor::randn(&[n, 2, 2 * hh, 2 * ww], rng));
                let sig = g.mul_scalar(renorm, a as f32);
                let noise = g.mul_scalar(eps, b as f32);
                g.add(sig, noise)
            };
            x0 = transit(g, p0, &mut rng);
            x1 = transit(g, p1, &mut rng);
            instr.stage_transitions += 1;
        } else {
            let (c0f, ctf) = sched.ddim_coeffs(e.t, t_prev, opts.sigma)?;
            let step = |g: &mut Graph, xt: NodeId, pred: NodeId, rng: &mut ChaCha8Rng| {
                let sp = g.mul_scalar(pred, c0f as f32);
                let sx = g.mul_scalar(xt, ctf as f32);
                let mut out = g.add(sp, sx);
                if opts.sigma > 0.0 {
                    let shape = g.value(out).shape().to_vec();
                    let eps = g.constant(Tensor::randn(&shape, rng));
                    out = g.axpy(out, opts.sigma as f32, eps);
                }
                out
            };
            x0 = step(g, x0, p0, &mut rng);
            x1 = step(g, x1, p1, &mut rng);
        }
        if opts.detach_between_steps && !is_last {
            x0 = g.detach(x0);
            x1 = g.detach(x1);
        }
        instr.add_time(e.level, started.elapsed().as_secs_f64() * 1e3);
    }
    Ok(outputs)
}

/// Tensor-level sampler over a single frame pair: encodes nothing, expects
/// raw conditioning features per level. Returns per-level bilateral flows
/// in pixel units at each level's own resolution, coarse to fine.
#[allow(clippy::too_many_arguments)]
pub fn sample_flow_multiscale(
    params: &Params,
    den: &dyn DenoisePredictor,
    features: &[(usize, Tensor, Tensor)],
    stats: &FeatureStats,
    sched: &NoiseSchedule,
    plan: &StagePlan,
    norm: &FlowNormalizer,
    opts: &SampleOptions,
) -> Result<(Vec<(usize, Tensor, Tensor)>, SampleInstrumentation)> {
    let mut g = Graph::new();
    let cond: Vec<(usize, NodeId, NodeId)> = features
        .iter()
        .map(|(l, a, b)| (*l, g.constant(a.clone()), g.constant(b.clone())))
        .collect();
    let mut instr = SampleInstrumentation::default();
    let outs = sample_flow_multiscale_graph(
        &mut g, params, den, &cond, stats, sched, plan, norm, opts, &mut instr,
    )?;
    let result = outs
        .into_iter()
        .map(|(level, f0, f1)| {
            (
                level,
                norm.denormalize(g.value(f0), level),
                norm.denormalize(g.value(f1), level),
            )
        })
        .collect();
    Ok((result, instr))
}

/// The finest-level flow pair in pixel units, plus instrumentation.
#[allow(clippy::too_many_arguments)]
pub fn sample_flow(
    params: &Params,
    den: &dyn DenoisePredictor,
    features: &[(usize, Tensor, Tensor)],
    stats: &FeatureStats,
    sched: &NoiseSchedule,
    plan: &StagePlan,
    norm: &FlowNormalizer,
    opts: &SampleOptions,
) -> Result<(Tensor, Tensor, SampleInstrumentation)> {
    let (outs, instr) = sample_flow_multiscale(
        params, den, features, stats, sched, plan, norm, opts,
    )?;
    let finest = plan.finest();
    let (_, f0, f1) = outs
        .into_iter()
        .find(|(l, _, _)| *l == finest)
        .expect("sampler always emits the finest level");
    Ok((f0, f1, instr))
}
