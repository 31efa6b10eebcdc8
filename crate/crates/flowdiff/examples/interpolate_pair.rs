//! Midpoint interpolation for an image pair via a trained checkpoint.
//!
//! Usage: interpolate_pair <ckpt> <i0.png> <i1.png> <out.png>
//! Without arguments it trains a small model first and interpolates a
//! synthetic pair, writing everything under runs/interpolate_demo.

use flowdiff::data::{self, SyntheticDataset, TripletSource};
use flowdiff::eval::psnr;
use flowdiff::pipeline::{train_all, InterpolateOptions, Model, PhaseSel, PipelineConfig};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.len() == 4 {
        let model = Model::load(args[0].as_ref()).unwrap();
        let i0 = data::read_image(args[1].as_ref()).unwrap();
        let i1 = data::read_image(args[2].as_ref()).unwrap();
        let out = model
            .interpolate(&i0, &i1, &InterpolateOptions::default())
            .unwrap();
        data::write_image(&out.image, args[3].as_ref()).unwrap();
        println!("wrote {}", args[3]);
        return;
    }

    let root = "runs/interpolate_demo";
    let cfg = PipelineConfig {
        train_count: 48,
        phase1_steps: 40,
        phase2_steps: 60,
        phase3_steps: 10,
        autosave_every: 0,
        ..PipelineConfig::default()
    };
    let train = SyntheticDataset::generate(cfg.train_count, &cfg.motion_opts(), cfg.seed);
    let model = train_all(&train, &cfg, root.as_ref(), PhaseSel::All, false, |_| {}).unwrap();

    let t = SyntheticDataset::generate(1, &cfg.motion_opts(), 999).get(0).unwrap();
    let out = model
        .interpolate(&t.i0, &t.i1, &InterpolateOptions::default())
        .unwrap();
    let dir = std::path::Path::new(root);
    data::write_image(&t.i0, &dir.join("i0.png")).unwrap();
    data::write_image(&t.i1, &dir.join("i1.png")).unwrap();
    data::write_image(&out.image, &dir.join("mid.png")).unwrap();
    data::write_flo(&out.flow0, &dir.join("mid.f0.flo")).unwrap();
    println!(
        "interpolated {}x{} pair: psnr {:.2} dB vs ground truth; outputs in {root}",
        t.width(),
        t.height(),
        psnr(&out.image, &t.it).unwrap()
    );
}
