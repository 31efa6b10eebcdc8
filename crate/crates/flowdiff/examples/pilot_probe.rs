//! Scratch pilot driver: trains with a config file and prints trend metrics.

use flowdiff::data::SyntheticDataset;
use flowdiff::eval::evaluate_model;
use flowdiff::pipeline::{load_config, train_all, PhaseSel, HELDOUT_SALT};
use flowdiff::tensor::mix_seed;

fn main() {
    let cfg_path = std::env::args().nth(1).expect("config path");
    let out = std::env::args().nth(2).expect("out dir");
    let cfg = load_config(cfg_path.as_ref()).unwrap();
    let train = SyntheticDataset::generate(cfg.train_count, &cfg.motion_opts(), cfg.seed);
    let t0 = std::time::Instant::now();
    let model = train_all(&train, &cfg, out.as_ref(), PhaseSel::All, false, |row| {
        if row.step % 50 == 0 {
            println!("{} {} {:.5} {:.3e}", row.phase, row.step, row.loss, row.lr);
        }
    })
    .unwrap();
    println!("trained in {:.0}s", t0.elapsed().as_secs_f64());
    let heldout = SyntheticDataset::generate(
        cfg.eval_count,
        &cfg.motion_opts(),
        mix_seed(cfg.seed, HELDOUT_SALT),
    );
    for n_steps in [3usize, 6] {
        let s = evaluate_model(&model, &heldout, 0, Some(n_steps)).unwrap();
        println!(
            "n_steps={n_steps}: psnr {:.2} (overlay {:.2}), epe {:.3}",
            s.psnr_mean_db,
            s.overlay_psnr_mean_db,
            s.epe_mean_px.unwrap()
        );
        for (l, e) in &s.per_level_epe_mean {
            println!("  level {l}: {e:.3}");
        }
    }
}
