//! End-to-end run: train all three phases on synthetic data, then report
//! held-out PSNR against the overlay baseline and per-level flow EPE.
//!
//! Budgets are small so the example finishes in minutes; scale them with
//! `FLOWDIFF_SCALE` (e.g. `FLOWDIFF_SCALE=4` for a longer run) and override
//! the output directory with the first argument.

use flowdiff::data::SyntheticDataset;
use flowdiff::eval::evaluate_model;
use flowdiff::pipeline::{train_all, PhaseSel, PipelineConfig, HELDOUT_SALT};
use flowdiff::tensor::mix_seed;

fn main() {
    let scale: usize = std::env::var("FLOWDIFF_SCALE")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(1);
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "runs/full_pipeline".into());

    let cfg = PipelineConfig {
        train_count: 200 * scale,
        eval_count: 64,
        phase1_steps: 120 * scale,
        phase2_steps: 240 * scale,
        phase3_steps: 60 * scale,
        autosave_every: 0,
        ..PipelineConfig::default()
    };
    println!("training into {out} (scale {scale})");
    let train = SyntheticDataset::generate(cfg.train_count, &cfg.motion_opts(), cfg.seed);
    let model = train_all(&train, &cfg, out.as_ref(), PhaseSel::All, false, |row| {
        if row.step % 20 == 0 {
            println!("{} {} {:.5} {:.3e}", row.phase, row.step, row.loss, row.lr);
        }
    })
    .expect("training failed");

    let heldout = SyntheticDataset::generate(
        cfg.eval_count,
        &cfg.motion_opts(),
        mix_seed(cfg.seed, HELDOUT_SALT),
    );
    for n_steps in [3usize, 6] {
        let summary = evaluate_model(&model, &heldout, 0, Some(n_steps)).expect("eval failed");
        println!(
            "\nn_steps={n_steps}: psnr {:.2} dB (overlay {:.2} dB), epe {:.3} px",
            summary.psnr_mean_db,
            summary.overlay_psnr_mean_db,
            summary.epe_mean_px.unwrap_or(f64::NAN),
        );
        for (level, e) in &summary.per_level_epe_mean {
            println!("  level {level}: epe {e:.3} px");
        }
    }
}
