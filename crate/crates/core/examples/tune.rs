//! Scratch harness for tuning the optimizer on the simulated tasks.
//! Usage: cargo run --example tune -- <task> [seeds] [iters]

use veg_core::policy::OptimizerConfig;
use veg_core::sim::DetectorConfig;
use veg_core::train::{sim_environment, train, Environment};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let task = args.get(1).map(String::as_str).unwrap_or("push-straight");
    let seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let iters: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(10);

    let mut cfg = OptimizerConfig { iterations: iters, ..Default::default() };
    if task == "pour" {
        cfg.rollouts_per_iter = 10;
    }
    if let Ok(v) = std::env::var("TUNE_KL") {
        cfg.kl_epsilon = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("TUNE_BLEND") {
        cfg.pi2_blend = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("TUNE_STD") {
        let s: f64 = v.parse().unwrap();
        cfg.exploration_std = [s, s, s, s / 3.0];
    }
    if let Ok(v) = std::env::var("TUNE_LAMBDA") {
        cfg.action_cost_lambda = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("TUNE_WINDOW") {
        cfg.fit_window = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("TUNE_TEMP") {
        cfg.pi2_temperature = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("TUNE_RIDGE") {
        cfg.ridge_lambda = v.parse().unwrap();
    }
    if let Ok(v) = std::env::var("TUNE_NUDGE") {
        cfg.nudge_scale = v.parse().unwrap();
    }
    eprintln!("cfg: {cfg:?}");
    let perturbation: f64 = std::env::var("TUNE_PERT")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0.06);
    let mut successes = 0;
    for seed in 0..seeds {
        let env =
            sim_environment(task, &cfg, DetectorConfig::default(), perturbation, seed).unwrap();
        if std::env::var("TUNE_REPLAY").is_ok() {
            // sanity probe: open-loop demo-action replay from the perturbed start
            let (n, m, horizon) = env.dims();
            let mut policy =
                veg_core::policy::LinearGaussianPolicy::init(n, m, horizon, &cfg.exploration_std);
            policy.offsets = env.demo.actions.clone();
            let report = env.evaluate(&policy, 12345).unwrap();
            let cost = env.rollout(&policy, 12345, true).unwrap().total_cost();
            println!(
                "seed {seed} replay: success={} pos_err={:.4} cost={:.3}",
                report.success, report.position_error, cost
            );
            if report.success {
                successes += 1;
            }
            continue;
        }
        let result = train(&env, &cfg, seed).unwrap();
        let report = env.evaluate(&result.policy, 12345).unwrap();
        if std::env::var("TUNE_SEEDSENS").is_ok() {
            for s in [1u64, 2, 3] {
                let r = env.evaluate(&result.policy, s).unwrap();
                let c = env.rollout(&result.policy, s, true).unwrap().total_cost();
                println!("  eval seed {s}: success={} pos_err={:.4} cost={c:.3}", r.success, r.position_error);
            }
        }
        let curve: Vec<String> = result
            .curve
            .iter()
            .map(|s| format!("{:.3}/{:.3}/k{:.2}", s.mean_cost, s.eval_cost, s.kl_epsilon))
            .collect();
        println!(
            "seed {seed}: success={} pos_err={:.4} yaw_err={:?}\n  curve: {}",
            report.success,
            report.position_error,
            report.yaw_error,
            curve.join(" ")
        );
        if std::env::var("TUNE_TRACE").is_ok() {
            let r = veg_core::sim::rollout(
                &env.initial,
                &result.policy,
                &env.demo.trace,
                &env.ctx,
                12345,
                true,
            )
            .unwrap();
            for (t, f) in r.trace.frames.iter().enumerate() {
                if t % 5 == 0 || t == r.trace.frames.len() - 1 {
                    let h = f.hand().unwrap().position;
                    let b = f
                        .entity(&veg_core::trace::EntityId::new("block"))
                        .unwrap()
                        .position;
                    println!(
                        "  t={t:2} hand ({:.3},{:.3},{:.3}) block ({:.3},{:.3},{:.3})",
                        h[0], h[1], h[2], b[0], b[1], b[2]
                    );
                }
            }
        }
        if std::env::var("TUNE_PROBE").is_ok() {
            let base = env.rollout(&result.policy, 987, true).unwrap().total_cost();
            let (_, _, horizon) = env.dims();
            for (name, lo, hi, dx, dy) in [
                ("early +x", 0, 10, 5.0, 0.0),
                ("mid   +x", 10, 20, 5.0, 0.0),
                ("late  +x", 20, 30, 5.0, 0.0),
                ("late +2x", 20, 30, 10.0, 0.0),
                ("late  +y", 20, 30, 0.0, 5.0),
                ("late  -y", 20, 30, 0.0, -5.0),
                ("mid   +y", 10, 20, 0.0, 5.0),
                ("mid   -y", 10, 20, 0.0, -5.0),
            ] {
                let mut p = result.policy.clone();
                for t in lo..hi.min(horizon) {
                    p.offsets[t][0] += dx;
                    p.offsets[t][1] += dy;
                }
                let c = env.rollout(&p, 987, true).unwrap().total_cost();
                println!("  probe {name}: {c:.4} (base {base:.4})");
            }
        }
        if report.success {
            successes += 1;
        }
    }
    println!("{task}: {successes}/{seeds}");
}
