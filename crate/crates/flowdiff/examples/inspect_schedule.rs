//! Stage plans and sampling paths: how the timestep axis splits across
//! pyramid levels and where the DDIM walk evaluates the denoiser.

use flowdiff::schedules::{
    make_noise_schedule, make_sampling_path, make_stage_plan, ScheduleKind,
};

fn main() {
    let t_max = 1000;
    let sched = make_noise_schedule(t_max, ScheduleKind::LinearBeta).unwrap();
    println!("alpha_bar[0]    = {}", sched.alpha_bar(0));
    println!("alpha_bar[500]  = {:.6}", sched.alpha_bar(500));
    println!("alpha_bar[1000] = {:.3e}", sched.alpha_bar(1000));

    let plan = make_stage_plan(t_max, 2, 4).unwrap();
    println!("\nlevel  interval");
    for (level, lo, hi) in plan.rows() {
        println!("{level}      [{lo}, {hi})");
    }

    for n_steps in [3usize, 6, 12] {
        let path = make_sampling_path(&plan, n_steps).unwrap();
        let ts: Vec<String> = path
            .entries()
            .iter()
            .map(|e| {
                format!(
                    "{}@L{}{}",
                    e.t,
                    e.level,
                    if e.boundary_after { "*" } else { "" }
                )
            })
            .collect();
        println!("\nn_steps={n_steps}: {}", ts.join(" "));
    }
    println!("\n(* marks a stage transition: 2x upsample + re-noise)");
}
