//! Per-stage timing breakdown and metric report on a (briefly) trained
//! model: encoder, each diffusion scale, decoder, total.

use flowdiff::data::SyntheticDataset;
use flowdiff::eval::run_benchmark;
use flowdiff::pipeline::{train_all, PhaseSel, PipelineConfig, HELDOUT_SALT};
use flowdiff::tensor::mix_seed;

fn main() {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "runs/benchmark_demo".into());
    let cfg = PipelineConfig {
        train_count: 48,
        eval_count: 8,
        phase1_steps: 40,
        phase2_steps: 60,
        phase3_steps: 10,
        autosave_every: 0,
        ..PipelineConfig::default()
    };
    let train = SyntheticDataset::generate(cfg.train_count, &cfg.motion_opts(), cfg.seed);
    let model = train_all(&train, &cfg, out.as_ref(), PhaseSel::All, false, |_| {}).unwrap();

    let heldout = SyntheticDataset::generate(
        cfg.eval_count,
        &cfg.motion_opts(),
        mix_seed(cfg.seed, HELDOUT_SALT),
    );
    let report = run_benchmark(&model, &heldout, 0, None).unwrap();
    print!("{}", report.to_table());
    report.write(out.as_ref()).unwrap();
    println!("reports written under {out}");
}
