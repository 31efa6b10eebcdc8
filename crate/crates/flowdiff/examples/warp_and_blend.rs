//! The geometric kernels on their own: backward-warp a rendered frame by
//! the ground-truth flow and blend the two warped inputs.

use flowdiff::data::{generate_triplet, MotionOpts, MotionSpec};
use flowdiff::eval::psnr;
use flowdiff::tensor::Tensor;
use flowdiff::warping::{backward_warp, blend};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let spec = MotionSpec::sample(&MotionOpts::default(), &mut rng);
    let t = generate_triplet(&spec, 1).unwrap();
    let f0 = t.f0.as_ref().unwrap();
    let f1 = t.f1.as_ref().unwrap();

    let w0 = backward_warp(&t.i0, f0.tensor()).unwrap();
    let w1 = backward_warp(&t.i1, f1.tensor()).unwrap();
    println!("psnr(warp(I0,f0), It) = {:.2} dB", psnr(&w0, &t.it).unwrap());
    println!("psnr(warp(I1,f1), It) = {:.2} dB", psnr(&w1, &t.it).unwrap());

    // A half-half blend of the two warps with no residual.
    let (h, w) = (t.height(), t.width());
    let half = Tensor::filled(&[1, h, w], 0.5);
    let zero = Tensor::zeros(&[3, h, w]);
    let blended = blend(&w0, &w1, &half, &zero).unwrap();
    println!("psnr(blend, It)       = {:.2} dB", psnr(&blended, &t.it).unwrap());

    let overlay = flowdiff::eval::overlay_baseline(&t.i0, &t.i1);
    println!("psnr(overlay, It)     = {:.2} dB  (no-motion baseline)", psnr(&overlay, &t.it).unwrap());
}
