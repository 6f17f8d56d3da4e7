use cellpush::lcp::{self, SolveOptions};
use cellpush::model::Velocity;
use cellpush::scen;
use cellpush::dynamics;

fn main() {
    // ranch k=9 seed=0, action 2 (train+test chained), fails at step 1.
    let sc = scen::make_archetype("ranch", 9, 0).unwrap();
    let s0 = sc.initial_state();
    let all: Vec<_> = sc.train_actions.iter().chain(&sc.test_actions).cloned().collect();
    let action = &all[2];
    let mut state = s0.clone();
    let mut vel = Velocity::zero(sc.grid.k());
    let mut warm: Option<lcp::LcpSolution> = None;
    let mut per = action.clone();
    per.duration = 1;
    let opts = SolveOptions { equality_multipliers: false, max_iter: 40, ..Default::default() };
    for t in 0..2 {
        let act = if t < action.duration { Some(&per) } else { None };
        let problem = lcp::assemble_push(&sc.grid, &sc.true_params, &state, &vel, act, sc.dt).unwrap();
        println!("--- step {t} ---");
        match lcp::solve_warm(&problem, &opts, warm.as_ref()) {
            Ok(sol) => {
                println!("ok in {} iters", sol.iterations);
                let out = dynamics::step_full(&sc.grid, &sc.true_params, &state, &vel, act, sc.dt, &opts, warm.as_ref()).unwrap();
                state = out.state; vel = out.velocity; warm = Some(out.solution);
            }
            Err(e) => { println!("FAIL {e}"); return; }
        }
    }
}
