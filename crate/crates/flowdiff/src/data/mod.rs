//! Synthetic triplet generation with analytic ground-truth bilateral flow,
//! plus loaders for external triplet directories and Middlebury flow files.
//!
//! A [`MotionSpec`] describes a textured background plus a back-to-front
//! list of sprites, each with a translation over the frame interval and
//! optional rotation and scaling, all anchored at the midpoint frame.
//! Rendering the spec at times 0, 0.5 and 1 gives the triplet; the layer
//! transforms give the exact backward flows from the midpoint to either
//! endpoint. Occluded pixels carry the front layer's flow and are marked
//! invalid so metrics can exclude them.

pub mod flo;
pub mod io;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::tensor::{mix_seed, Tensor};
use crate::warping::FlowField;

pub use flo::{read_flo, write_flo};
pub use io::{read_image, write_image, DirDataset};

/// Anything that yields triplets by index. Sources are pure per index, so
/// iteration can fan out across threads.
pub trait TripletSource: Sync {
    fn len(&self) -> usize;
    fn get(&self, idx: usize) -> Result<Triplet>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct TripletMeta {
    pub spec_hash: u64,
    pub seed: u64,
}

/// One training/eval sample: the two input frames, the midpoint target,
/// and (when known) the bilateral backward flows from the midpoint plus a
/// validity mask that is 0 on occluded or boundary pixels.
#[derive(Debug, Clone)]
pub struct Triplet {
    pub i0: Tensor,
    pub it: Tensor,
    pub i1: Tensor,
    pub f0: Option<FlowField>,
    pub f1: Option<FlowField>,
    pub valid: Option<Tensor>,
    pub meta: TripletMeta,
}

impl Triplet {
    pub fn height(&self) -> usize {
        self.it.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.it.shape()[2]
    }

    pub fn has_flow(&self) -> bool {
        self.f0.is_some() && self.f1.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpriteKind {
    Rect,
    Disk,
}

/// One moving layer. Position, rotation and scale are anchored at the
/// midpoint: at `tau` the sprite sits at `center + (tau - 0.5) * d`,
/// rotated by `(tau - 0.5) * rotation` and scaled by
/// `1 + (tau - 0.5) * scale_delta`.
#[derive(Debug, Clone)]
pub struct Layer {
    pub kind: SpriteKind,
    pub half_w: f32,
    pub half_h: f32,
    pub center: (f32, f32),
    pub translation: (f32, f32),
    pub rotation: f32,
    pub scale_delta: f32,
    pub texture_seed: u64,
}

impl Layer {
    fn is_rigid_translation(&self) -> bool {
        self.rotation == 0.0 && self.scale_delta == 0.0
    }

    fn pose(&self, tau: f32) -> (f32, f32, f32, f32) {
        let dt = tau - 0.5;
        let cx = self.center.0 + dt * self.translation.0;
        let cy = self.center.1 + dt * self.translation.1;
        let angle = dt * self.rotation;
        let scale = 1.0 + dt * self.scale_delta;
        (cx, cy, angle, scale)
    }

    /// Signed distance to the sprite edge in local units (negative inside).
    fn signed_dist(&self, lx: f32, ly: f32) -> f32 {
        match self.kind {
            SpriteKind::Rect => (lx.abs() - self.half_w).max(ly.abs() - self.half_h),
            SpriteKind::Disk => {
                let r = self.half_w;
                (lx * lx + (ly * self.half_w / self.half_h).powi(2)).sqrt() - r
            }
        }
    }

    /// Local sprite coordinates of canvas point (x, y) at time `tau`.
    fn local_at(&self, tau: f32, x: f32, y: f32) -> (f32, f32) {
        let (cx, cy, angle, scale) = self.pose(tau);
        let dx = x - cx;
        let dy = y - cy;
        let (s, c) = (-angle).sin_cos();
        let rx = c * dx - s * dy;
        let ry = s * dx + c * dy;
        (rx / scale, ry / scale)
    }

    /// Canvas position at time `tau` of the material point whose local
    /// coordinates are `(lx, ly)`.
    fn world_at(&self, tau: f32, lx: f32, ly: f32) -> (f32, f32) {
        let (cx, cy, angle, scale) = self.pose(tau);
        let (s, c) = angle.sin_cos();
        let rx = scale * (c * lx - s * ly);
        let ry = scale * (s * lx + c * ly);
        (cx + rx, cy + ry)
    }

    fn max_radius(&self) -> f32 {
        let diag = (self.half_w * self.half_w + self.half_h * self.half_h).sqrt();
        diag * (1.0 + 0.5 * self.scale_delta.abs())
    }
}

/// Full description of one synthetic scene.
#[derive(Debug, Clone)]
pub struct MotionSpec {
    pub width: usize,
    pub height: usize,
    pub background_translation: (f32, f32),
    pub background_seed: u64,
    /// Back-to-front; later layers occlude earlier ones.
    pub layers: Vec<Layer>,
    /// Largest displacement this spec is allowed to contain.
    pub d_max: f32,
}

impl MotionSpec {
    /// Static scene: textured background, no layers, no motion.
    pub fn static_scene(width: usize, height: usize, seed: u64) -> Self {
        MotionSpec {
            width,
            height,
            background_translation: (0.0, 0.0),
            background_seed: seed,
            layers: Vec::new(),
            d_max: 16.0,
        }
    }

    pub fn is_translation_only(&self) -> bool {
        self.layers.iter().all(Layer::is_rigid_translation)
    }

    /// Order-sensitive fingerprint of every field, recorded in triplet
    /// metadata.
    pub fn digest(&self) -> u64 {
        let mut h = mix_seed(0x5eed, self.width as u64);
        h = mix_seed(h, self.height as u64);
        h = mix_seed(h, self.background_seed);
        h = mix_seed(h, self.background_translation.0.to_bits() as u64);
        h = mix_seed(h, self.background_translation.1.to_bits() as u64);
        h = mix_seed(h, self.d_max.to_bits() as u64);
        for l in &self.layers {
            h = mix_seed(h, matches!(l.kind, SpriteKind::Disk) as u64);
            for v in [
                l.half_w,
                l.half_h,
                l.center.0,
                l.center.1,
                l.translation.0,
                l.translation.1,
                l.rotation,
                l.scale_delta,
            ] {
                h = mix_seed(h, v.to_bits() as u64);
            }
            h = mix_seed(h, l.texture_seed);
        }
        h
    }

    fn validate(&self) -> Result<()> {
        if self.width < 4 || self.height < 4 {
            return Err(Error::invalid("canvas must be at least 4x4"));
        }
        let mag = |v: (f32, f32)| (v.0 * v.0 + v.1 * v.1).sqrt();
        if mag(self.background_translation) > self.d_max {
            return Err(Error::invalid("background displacement exceeds d_max"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if mag(l.translation) > self.d_max {
                return Err(Error::invalid(format!(
                    "layer {i} displacement exceeds d_max"
                )));
            }
            let bound = l.max_radius() + 1.5;
            for tau in [0.0f32, 0.5, 1.0] {
                let (cx, cy, _, _) = l.pose(tau);
                if cx - bound < 0.0
                    || cy - bound < 0.0
                    || cx + bound > (self.width - 1) as f32
                    || cy + bound > (self.height - 1) as f32
                {
                    return Err(Error::invalid(format!(
                        "layer {i} leaves the canvas at tau={tau}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Knobs for random spec sampling; defaults match the desk-scale dataset
/// (64x64, displacements up to 16 px, rotation up to 10 degrees, scale in
/// [0.9, 1.1]).
#[derive(Debug, Clone)]
pub struct MotionOpts {
    pub width: usize,
    pub height: usize,
    pub d_max: f32,
    pub background_max_disp: f32,
    pub max_layers: usize,
    pub rotation: bool,
    pub scaling: bool,
}

impl Default for MotionOpts {
    fn default() -> Self {
        MotionOpts {
            width: 64,
            height: 64,
            d_max: 16.0,
            background_max_disp: 8.0,
            max_layers: 2,
            rotation: true,
            scaling: true,
        }
    }
}

impl MotionSpec {
    /// Draw a random in-bounds spec.
    pub fn sample<R: Rng>(opts: &MotionOpts, rng: &mut R) -> Self {
        let bg_mag = rng.gen_range(0.0..opts.background_max_disp);
        let bg_ang = rng.gen_range(0.0..std::f32::consts::TAU);
        let n_layers = rng.gen_range(1..=opts.max_layers);
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let kind = if rng.gen_bool(0.5) {
                SpriteKind::Rect
            } else {
                SpriteKind::Disk
            };
            // Sprite extent scales with the canvas so small scenes stay
            // feasible.
            let min_dim = opts.width.min(opts.height) as f32;
            let lo = (min_dim * 0.10).max(2.0);
            let hi = (min_dim * 0.17).max(lo + 0.5);
            let half_w = rng.gen_range(lo..hi);
            let half_h = match kind {
                SpriteKind::Disk => half_w * rng.gen_range(0.8..1.25),
                SpriteKind::Rect => rng.gen_range(lo..hi),
            };
            let rotation = if opts.rotation && rng.gen_bool(0.5) {
                rng.gen_range(-1.0f32..1.0) * 10.0f32.to_radians()
            } else {
                0.0
            };
            let scale_delta = if opts.scaling && rng.gen_bool(0.5) {
                rng.gen_range(-0.1..0.1)
            } else {
                0.0
            };
            let mut layer = Layer {
                kind,
                half_w,
                half_h,
                center: (0.0, 0.0),
                translation: (0.0, 0.0),
                rotation,
                scale_delta,
                texture_seed: rng.gen(),
            };
            // Sample a displacement the canvas can still contain, then place
            // the center with the swept extent as margin.
            let bound = layer.max_radius() + 1.5;
            let room = 0.5 * (opts.width.min(opts.height) - 1) as f32 - bound - 1.0;
            let max_mag = opts.d_max.min((2.0 * room).max(0.0));
            let mag = rng.gen_range(0.0..max_mag.max(0.1));
            let ang = rng.gen_range(0.0..std::f32::consts::TAU);
            layer.translation = (mag * ang.cos(), mag * ang.sin());
            let mx = bound + 0.5 * layer.translation.0.abs() + 1.0;
            let my = bound + 0.5 * layer.translation.1.abs() + 1.0;
            let span = |m: f32, extent: usize| -> (f32, f32) {
                let hi = (extent - 1) as f32 - m;
                if hi > m {
                    (m, hi)
                } else {
                    let mid = (extent - 1) as f32 * 0.5;
                    (mid, mid + 1e-3)
                }
            };
            let (x_lo, x_hi) = span(mx, opts.width);
            let (y_lo, y_hi) = span(my, opts.height);
            layer.center = (rng.gen_range(x_lo..x_hi), rng.gen_range(y_lo..y_hi));
            layers.push(layer);
        }
        MotionSpec {
            width: opts.width,
            height: opts.height,
            background_translation: (bg_mag * bg_ang.cos(), bg_mag * bg_ang.sin()),
            background_seed: rng.gen(),
            layers,
            d_max: opts.d_max,
        }
    }
}

// --- texture synthesis ---

fn hash01(seed: u64, octave: u64, ix: i64, iy: i64) -> f32 {
    let h = mix_seed(
        mix_seed(mix_seed(seed, octave), ix as u64),
        (iy as u64).wrapping_mul(0x9e37_79b9),
    );
    ((h >> 40) as f32) / ((1u64 << 24) as f32)
}

fn smoothstep(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Smooth value noise, one octave. `wrap` (in lattice cells) makes the
/// pattern toroidal for backgrounds.
fn value_noise(seed: u64, octave: u64, x: f32, y: f32, cell: f32, wrap: Option<(i64, i64)>) -> f32 {
    let gx = x / cell;
    let gy = y / cell;
    let ix = gx.floor();
    let iy = gy.floor();
    let fx = smoothstep(gx - ix);
    let fy = smoothstep(gy - iy);
    let (ix, iy) = (ix as i64, iy as i64);
    let idx = |i: i64, j: i64| -> (i64, i64) {
        match wrap {
            Some((wx, wy)) => (i.rem_euclid(wx), j.rem_euclid(wy)),
            None => (i, j),
        }
    };
    let (x0, y0) = idx(ix, iy);
    let (x1, y1) = idx(ix + 1, iy + 1);
    let v00 = hash01(seed, octave, x0, y0);
    let v01 = hash01(seed, octave, x1, y0);
    let v10 = hash01(seed, octave, x0, y1);
    let v11 = hash01(seed, octave, x1, y1);
    (v00 * (1.0 - fx) + v01 * fx) * (1.0 - fy) + (v10 * (1.0 - fx) + v11 * fx) * fy
}

/// Three-octave RGB texture in [0.06, 0.94], smooth enough that bilinear
/// resampling stays within the flow-consistency tolerance.
fn texture_rgb(seed: u64, x: f32, y: f32, wrap_extent: Option<(f32, f32)>) -> [f32; 3] {
    let mut out = [0.0f32; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let cs = mix_seed(seed, 101 + c as u64);
        let mut v = 0.0;
        let mut wsum = 0.0;
        for (octave, (cell, amp)) in [(8.0f32, 0.55f32), (16.0, 0.3), (32.0, 0.15)]
            .into_iter()
            .enumerate()
        {
            let wrap = wrap_extent.map(|(wx, wy)| {
                (
                    ((wx / cell).round() as i64).max(1),
                    ((wy / cell).round() as i64).max(1),
                )
            });
            v += amp * value_noise(cs, octave as u64, x, y, cell, wrap);
            wsum += amp;
        }
        *o = 0.06 + 0.88 * (v / wsum);
    }
    out
}

fn sprite_rgb(seed: u64, lx: f32, ly: f32) -> [f32; 3] {
    let tint = [
        hash01(seed, 7, 1, 1),
        hash01(seed, 7, 2, 2),
        hash01(seed, 7, 3, 3),
    ];
    let tex = texture_rgb(mix_seed(seed, 33), lx + 128.0, ly + 128.0, None);
    let mut out = [0.0f32; 3];
    for c in 0..3 {
        out[c] = (0.42 * tint[c] + 0.58 * tex[c]).clamp(0.02, 0.98);
    }
    out
}

// --- rendering & flow synthesis ---

fn render_frame(spec: &MotionSpec, tau: f32) -> Tensor {
    let (w, h) = (spec.width, spec.height);
    let mut img = Tensor::zeros(&[3, h, w]);
    let plane = h * w;
    let dt = tau - 0.5;
    let wrap = Some((w as f32, h as f32));
    for y in 0..h {
        for x in 0..w {
            let xf = x as f32;
            let yf = y as f32;
            let bx = xf - dt * spec.background_translation.0;
            let by = yf - dt * spec.background_translation.1;
            let mut rgb = texture_rgb(spec.background_seed, bx, by, wrap);
            for layer in &spec.layers {
                let (lx, ly) = layer.local_at(tau, xf, yf);
                let d = layer.signed_dist(lx, ly);
                // 1-px antialiasing band around the sprite edge.
                let alpha = (0.5 - d).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    let srgb = sprite_rgb(layer.texture_seed, lx, ly);
                    for c in 0..3 {
                        rgb[c] = rgb[c] * (1.0 - alpha) + srgb[c] * alpha;
                    }
                }
            }
            for c in 0..3 {
                img.data_mut()[c * plane + y * w + x] = rgb[c];
            }
        }
    }
    img
}

/// Index of the front-most layer covering (x, y) at `tau`; `None` is the
/// background.
fn owner_at(spec: &MotionSpec, tau: f32, x: f32, y: f32) -> Option<usize> {
    for (i, layer) in spec.layers.iter().enumerate().rev() {
        let (lx, ly) = layer.local_at(tau, x, y);
        if layer.signed_dist(lx, ly) <= 0.0 {
            return Some(i);
        }
    }
    None
}

/// Render the triplet and derive the analytic bilateral flow.
pub fn generate_triplet(spec: &MotionSpec, seed: u64) -> Result<Triplet> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let plane = h * w;

    let i0 = render_frame(spec, 0.0);
    let it = render_frame(spec, 0.5);
    let i1 = render_frame(spec, 1.0);

    let mut f0 = Tensor::zeros(&[2, h, w]);
    let mut f1 = Tensor::zeros(&[2, h, w]);
    let mut valid = Tensor::filled(&[1, h, w], 1.0);

    let bg = spec.background_translation;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let xf = x as f32;
            let yf = y as f32;
            let owner = owner_at(spec, 0.5, xf, yf);

            let ((u0, v0), (u1, v1)) = match owner {
                None => ((-0.5 * bg.0, -0.5 * bg.1), (0.5 * bg.0, 0.5 * bg.1)),
                Some(i) => {
                    let layer = &spec.layers[i];
                    if layer.is_rigid_translation() {
                        let d = layer.translation;
                        ((-0.5 * d.0, -0.5 * d.1), (0.5 * d.0, 0.5 * d.1))
                    } else {
                        let (lx, ly) = layer.local_at(0.5, xf, yf);
                        let (px0, py0) = layer.world_at(0.0, lx, ly);
                        let (px1, py1) = layer.world_at(1.0, lx, ly);
                        ((px0 - xf, py0 - yf), (px1 - xf, py1 - yf))
                    }
                }
            };
            f0.data_mut()[p] = u0;
            f0.data_mut()[plane + p] = v0;
            f1.data_mut()[p] = u1;
            f1.data_mut()[plane + p] = v1;

            // Invalidate the antialiasing band around any sprite edge and
            // pixels whose source point is owned by someone else.
            let mut ok = true;
            for layer in &spec.layers {
                let (lx, ly) = layer.local_at(0.5, xf, yf);
                if layer.signed_dist(lx, ly).abs() < 1.5 {
                    ok = false;
                    break;
                }
            }
            if ok {
                ok = owner_at(spec, 0.0, xf + u0, yf + v0) == owner
                    && owner_at(spec, 1.0, xf + u1, yf + v1) == owner;
            }
            if !ok {
                valid.data_mut()[p] = 0.0;
            }
        }
    }

    Ok(Triplet {
        i0,
        it,
        i1,
        f0: Some(FlowField::new(f0)?),
        f1: Some(FlowField::new(f1)?),
        valid: Some(valid),
        meta: TripletMeta {
            spec_hash: spec.digest(),
            seed,
        },
    })
}

/// Seeded sequence of random scenes, rendered on demand.
pub struct SyntheticDataset {
    specs: Vec<(MotionSpec, u64)>,
}

impl SyntheticDataset {
    pub fn generate(count: usize, opts: &MotionOpts, base_seed: u64) -> Self {
        let specs = (0..count)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(base_seed, i as u64));
                let spec = MotionSpec::sample(opts, &mut rng);
                (spec, mix_seed(base_seed, 0x1000_0000 + i as u64))
            })
            .collect();
        SyntheticDataset { specs }
    }

    pub fn spec(&self, idx: usize) -> &MotionSpec {
        &self.specs[idx].0
    }
}

impl TripletSource for SyntheticDataset {
    fn len(&self) -> usize {
        self.specs.len()
    }

    fn get(&self, idx: usize) -> Result<Triplet> {
        let (spec, seed) = &self.specs[idx];
        generate_triplet(spec, *seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warping::backward_warp;

    fn single_translation_spec(d: (f32, f32)) -> MotionSpec {
        MotionSpec {
            width: 64,
            height: 64,
            background_translation: (0.0, 0.0),
            background_seed: 42,
            layers: vec![Layer {
                kind: SpriteKind::Rect,
                half_w: 9.0,
                half_h: 7.0,
                center: (32.0, 30.0),
                translation: d,
                rotation: 0.0,
                scale_delta: 0.0,
                texture_seed: 7,
            }],
            d_max: 16.0,
        }
    }

    #[test]
    fn translation_flow_is_half_displacement() {
        let spec = single_translation_spec((8.0, 0.0));
        let t = generate_triplet(&spec, 1).unwrap();
        let f0 = t.f0.as_ref().unwrap();
        let f1 = t.f1.as_ref().unwrap();
        // Center of the sprite is covered at all three times.
        assert_eq!(f1.uv(30, 32), (4.0, 0.0));
        assert_eq!(f0.uv(30, 32), (-4.0, 0.0));
        // Far corner is background: zero flow.
        assert_eq!(f0.uv(2, 2), (0.0, 0.0));
    }

    #[test]
    fn static_spec_gives_identical_frames_and_zero_flow() {
        let spec = MotionSpec::static_scene(32, 40, 5);
        let t = generate_triplet(&spec, 0).unwrap();
        assert_eq!(t.i0, t.it);
        assert_eq!(t.it, t.i1);
        assert_eq!(t.f0.unwrap().tensor().max_abs(), 0.0);
        assert_eq!(t.f1.unwrap().tensor().max_abs(), 0.0);
    }

    #[test]
    fn generation_is_deterministic() {
        let opts = MotionOpts::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = MotionSpec::sample(&opts, &mut rng);
        let a = generate_triplet(&spec, 3).unwrap();
        let b = generate_triplet(&spec, 3).unwrap();
        assert_eq!(a.i0, b.i0);
        assert_eq!(a.it, b.it);
        assert_eq!(a.i1, b.i1);
        assert_eq!(a.f0.unwrap().tensor(), b.f0.unwrap().tensor());
        assert_eq!(a.meta.spec_hash, b.meta.spec_hash);
    }

    #[test]
    fn bilateral_flows_negate_for_pure_translation() {
        let opts = MotionOpts {
            rotation: false,
            scaling: false,
            ..MotionOpts::default()
        };
        let ds = SyntheticDataset::generate(4, &opts, 11);
        for i in 0..ds.len() {
            let t = ds.get(i).unwrap();
            let f0 = t.f0.unwrap().into_tensor();
            let f1 = t.f1.unwrap().into_tensor();
            assert_eq!(f0, f1.scale(-1.0), "triplet {i}");
        }
    }

    #[test]
    fn sprite_leaving_canvas_is_invalid_spec() {
        let mut spec = single_translation_spec((8.0, 0.0));
        spec.layers[0].center = (58.0, 32.0);
        match generate_triplet(&spec, 0) {
            Err(Error::InvalidArgument(msg)) => assert!(msg.contains("canvas")),
            other => panic!("expected invalid spec, got {other:?}"),
        }
    }

    #[test]
    fn flow_consistency_on_translation_only_scenes() {
        // backward_warp(I0, f0) must reproduce It on valid pixels within
        // bilinear rendering tolerance (2/255 mean absolute error).
        let opts = MotionOpts {
            rotation: false,
            scaling: false,
            ..MotionOpts::default()
        };
        let ds = SyntheticDataset::generate(6, &opts, 77);
        for i in 0..ds.len() {
            let t = ds.get(i).unwrap();
            let warped = backward_warp(&t.i0, t.f0.as_ref().unwrap().tensor()).unwrap();
            let valid = t.valid.as_ref().unwrap();
            let plane = t.height() * t.width();
            let mut err = 0.0f64;
            let mut count = 0.0f64;
            for p in 0..plane {
                if valid.data()[p] == 1.0 {
                    for c in 0..3 {
                        err += (warped.data()[c * plane + p] - t.it.data()[c * plane + p]).abs()
                            as f64;
                        count += 1.0;
                    }
                }
            }
            let mean = err / count;
            assert!(mean <= 2.0 / 255.0, "triplet {i}: mean abs err {mean}");
            assert!(count > 0.0);
        }
    }

    #[test]
    fn rotation_and_scale_flows_match_finite_pose_differences() {
        let spec = MotionSpec {
            width: 64,
            height: 64,
            background_translation: (2.0, -1.0),
            background_seed: 8,
            layers: vec![Layer {
                kind: SpriteKind::Disk,
                half_w: 10.0,
                half_h: 10.0,
                center: (30.0, 34.0),
                translation: (6.0, 2.0),
                rotation: 0.15,
                scale_delta: 0.08,
                texture_seed: 91,
            }],
            d_max: 16.0,
        };
        let t = generate_triplet(&spec, 0).unwrap();
        let f0 = t.f0.unwrap();
        // Sprite center pixel: its material point is the sprite center, so
        // the flow is exactly the center displacement.
        let (u, v) = f0.uv(34, 30);
        assert!((u - (-3.0)).abs() < 1e-4, "{u}");
        assert!((v - (-1.0)).abs() < 1e-4, "{v}");
    }

    #[test]
    fn occluded_pixels_are_masked() {
        // Sprite moves right by 8: pixels just left of the sprite at the
        // midpoint are background now but covered by the sprite at tau=0.
        let spec = single_translation_spec((8.0, 0.0));
        let t = generate_triplet(&spec, 0).unwrap();
        let valid = t.valid.unwrap();
        let w = 64;
        // Background pixel at x=20: left of the sprite at the midpoint
        // (edge 23) but inside its tau=0 footprint [19, 37] -> occluded.
        let probe = (30usize, 20usize);
        assert_eq!(valid.data()[probe.0 * w + probe.1], 0.0);
        // A pixel far away stays valid.
        assert_eq!(valid.data()[5 * w + 5], 1.0);
    }
}
