//! The staged sampler driven by a perfect denoiser: substituting a
//! ground-truth oracle for the network isolates the scheduler algebra, so
//! the sampled flow must land on the target for any step count.

use flowdiff::autograd::{Graph, NodeId, Params};
use flowdiff::diffusion::{
    sample_flow, DenoisePredictor, FlowNormalizer, SampleOptions,
};
use flowdiff::error::Result;
use flowdiff::schedules::{make_noise_schedule, make_stage_plan, ScheduleKind};
use flowdiff::synthesizer::FeatureStats;
use flowdiff::tensor::Tensor;
use flowdiff::warping::resize_flow;

struct Oracle {
    per_level: Vec<(usize, Tensor, Tensor)>,
}

impl DenoisePredictor for Oracle {
    fn predict(
        &self,
        g: &mut Graph,
        _params: &Params,
        _f0: NodeId,
        _f1: NodeId,
        _x0: NodeId,
        _x1: NodeId,
        _t: usize,
        level: usize,
        _stats: &FeatureStats,
    ) -> Result<(NodeId, NodeId)> {
        let (_, a, b) = self
            .per_level
            .iter()
            .find(|(l, _, _)| *l == level)
            .unwrap();
        Ok((g.constant(a.clone()), g.constant(b.clone())))
    }
}

fn main() {
    let size = 64usize;
    let (k0, k1) = (2usize, 4usize);
    let norm = FlowNormalizer::new(16.0).unwrap();

    // A smooth "ground-truth" flow field, resized and normalized per level.
    let mut full = Tensor::zeros(&[2, size, size]);
    for c in 0..2 {
        for y in 0..size {
            for x in 0..size {
                let v = 4.0
                    * (std::f32::consts::TAU * (x as f32 / size as f32) * 0.5).sin()
                    * (std::f32::consts::TAU * (y as f32 / size as f32) * 0.25).cos();
                full.data_mut()[c * size * size + y * size + x] = if c == 0 { v } else { -v };
            }
        }
    }
    let mut per_level = Vec::new();
    let mut features = Vec::new();
    for level in (k0..=k1).rev() {
        let s = size >> level;
        let f = resize_flow(&full, s, s).unwrap();
        let n = norm.normalize(&f, level).reshaped(&[1, 2, s, s]);
        per_level.push((level, n.clone(), n.scale(-1.0)));
        // The oracle ignores conditioning; empty placeholders suffice.
        features.push((level, Tensor::zeros(&[1, 1, s, s]), Tensor::zeros(&[1, 1, s, s])));
    }
    let oracle = Oracle { per_level };

    let sched = make_noise_schedule(1000, ScheduleKind::LinearBeta).unwrap();
    let plan = make_stage_plan(1000, k0, k1).unwrap();
    let stats = FeatureStats::identity(&[2, 3, 4], &[1, 1, 1]);
    let params = Params::new();

    for n_steps in [3usize, 6, 12] {
        let (f0, _f1, instr) = sample_flow(
            &params,
            &oracle,
            &features,
            &stats,
            &sched,
            &plan,
            &norm,
            &SampleOptions::deterministic(n_steps, 7),
        )
        .unwrap();
        let gt = resize_flow(&full, size >> k0, size >> k0).unwrap();
        let plane = (size >> k0) * (size >> k0);
        let mut epe = 0.0f64;
        for p in 0..plane {
            let du = f0.data()[p] - gt.data()[p];
            let dv = f0.data()[plane + p] - gt.data()[plane + p];
            epe += ((du * du + dv * dv) as f64).sqrt();
        }
        epe /= plane as f64;
        println!(
            "n_steps={n_steps:2}: epe {epe:.2e} px, denoiser calls {}, transitions {}",
            instr.denoiser_calls, instr.stage_transitions
        );
    }
}
