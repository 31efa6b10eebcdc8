//! Phase 1 in isolation: overfit the flow-guided synthesizer on a handful
//! of triplets with ground-truth flows and watch the photometric loss.

use flowdiff::autograd::Params;
use flowdiff::data::SyntheticDataset;
use flowdiff::optim::{AdamW, AdamWConfig};
use flowdiff::synthesizer::{
    train_synthesizer, PhotometricWeights, SynthTrainConfig, Synthesizer, SynthesizerConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let ds = SyntheticDataset::generate(16, &Default::default(), 3);
    let mut params = Params::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let synth = Synthesizer::new(&mut params, &mut rng, SynthesizerConfig::default()).unwrap();

    let cfg = SynthTrainConfig {
        steps: 150,
        batch: 4,
        weights: PhotometricWeights {
            lambda_perc: 0.0,
            lambda_style: 0.0,
        },
        ..SynthTrainConfig::default()
    };
    let mut opt = AdamW::new(&params, AdamWConfig::default());
    let curve = train_synthesizer(&ds, &synth, &mut params, &cfg, None, &mut opt, |row| {
        if row.step % 10 == 0 {
            println!("step {:>4}  loss {:.5}  lr {:.2e}", row.step, row.loss, row.lr);
        }
    })
    .unwrap();
    println!(
        "\nloss {:.5} -> {:.5} over {} steps",
        curve[0],
        curve.last().unwrap(),
        curve.len()
    );
}
