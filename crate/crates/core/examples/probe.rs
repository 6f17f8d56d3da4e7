use cellpush::lcp::{self, SolveOptions};
use cellpush::model::Velocity;
use cellpush::scen;
use cellpush::dynamics;

fn main() {
    let mut failures = 0;
    for name in ["uniform", "hammer", "book", "ranch", "crimp", "toolbox"] {
        for k in [9, 25] {
            for seed in 0..4u64 {
                let sc = scen::make_archetype(name, k, seed).unwrap();
                let s0 = sc.initial_state();
                let all: Vec<_> = sc.train_actions.iter().chain(&sc.test_actions).cloned().collect();
                for (ai, action) in all.iter().enumerate() {
                    let mut state = s0.clone();
                    let mut vel = Velocity::zero(sc.grid.k());
                    let mut warm: Option<lcp::LcpSolution> = None;
                    let mut per = action.clone();
                    per.duration = 1;
                    let opts = SolveOptions { equality_multipliers: false, ..Default::default() };
                    for t in 0..(action.duration + 400) {
                        let act = if t < action.duration { Some(&per) } else { None };
                        let problem = lcp::assemble_push(&sc.grid, &sc.true_params, &state, &vel, act, sc.dt).unwrap();
                        match lcp::solve_warm(&problem, &opts, warm.as_ref()) {
                            Ok(sol) => {
                                state = {
                                    let out = dynamics::step_full(&sc.grid, &sc.true_params, &state, &vel, act, sc.dt, &opts, warm.as_ref()).unwrap();
                                    vel = out.velocity;
                                    warm = Some(out.solution);
                                    out.state
                                };
                                let _ = sol;
                                if vel.max_speed() < 1e-7 && t >= action.duration { break; }
                            }
                            Err(e) => {
                                failures += 1;
                                println!("{name} k={k} seed={seed} action {ai} step {t}: {e}");
                                let opts2 = SolveOptions { max_iter: 50000, equality_multipliers: false, ..Default::default() };
                                match lcp::solve(&problem, &opts2) {
                                    Ok(s) => println!("  cold 50000: converged in {} iters", s.iterations),
                                    Err(e2) => println!("  cold 50000: STILL FAILS {e2}"),
                                }
                                break;
                            }
                        }
                    }
                }
            }
        }
    }
    println!("total failures: {failures}");
}
