//! Deep diagnostic of one chance-constrained run: per-bus duals, auxiliary
//! variables, violation rates, and per-inverter setpoint statistics.

use nalgebra::DVector;
use voltpolicy::data;
use voltpolicy::evaluation;
use voltpolicy::policy::{standard_dims, PolicyNetwork};
use voltpolicy::scenarios::{self, MeterMask};
use voltpolicy::training::{self, chance_step, StepOutcome, TrainConfig, TrainerState};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let alpha: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.5);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(20);
    let feeder = data::feeder37().unwrap();
    let profiles = data::profiles37().unwrap().expand().unwrap();
    let dataset = scenarios::generate_dataset(&profiles, 0.1, 5, 1).unwrap();
    let (mut train_set, _) = scenarios::split(dataset, 0.8, 1).unwrap();
    let mask = MeterMask::full(&feeder);
    scenarios::apply_mask(&mut train_set, &mask);
    let dims = standard_dims(
        mask.metered_buses().len(),
        feeder.n(),
        feeder.controlled_buses().len(),
    );

    let cfg = TrainConfig::chance(alpha, epochs, 1);
    let mut net = PolicyNetwork::init(&dims, cfg.seed);
    let mut state = TrainerState::new(&net, &feeder, &cfg);
    let probe_buses = [16usize, 23];
    let s_max_all = DVector::from_vec(feeder.s_max_controlled());
    let v_max_vec = DVector::from_vec(feeder.v_max());
    for epoch in 0..cfg.epochs {
        state.dual.set_epoch(epoch as u64 + 1);
        let mut viol = 0;
        let mut g_sum = vec![0.0f64; probe_buses.len()];
        let mut act_sum = vec![0usize; probe_buses.len()];
        let mut count = 0usize;
        for scenario in &train_set {
            match chance_step(&mut net, &mut state, &feeder, scenario, &cfg).unwrap() {
                StepOutcome::Updated { violated, .. } => {
                    if violated {
                        viol += 1;
                    }
                    // Recompute the post-update hinge terms the dual ascent saw.
                    let p_g_ctrl = training::controlled_solar(&feeder, &scenario.theta);
                    let q = net.forward(&scenario.phi, &p_g_ctrl, &s_max_all).unwrap().q;
                    let sol = voltpolicy::powerflow::solve(
                        &feeder,
                        &scenario.theta,
                        &training::embed_controlled(&feeder, &q),
                    );
                    let g = training::hinge_high(&state.dual.t_high, &sol.v, &v_max_vec, alpha);
                    let act = training::active_high(&state.dual.t_high, &sol.v, &v_max_vec);
                    for (j, &bus) in probe_buses.iter().enumerate() {
                        g_sum[j] += g[bus - 1];
                        act_sum[j] += act[bus - 1] as usize;
                    }
                    count += 1;
                }
                _ => {}
            }
        }
        let stats: Vec<String> = probe_buses
            .iter()
            .enumerate()
            .map(|(j, &bus)| {
                format!(
                    "bus{bus}: E[g] {:+.5} act {:.2} dual {:.4} t {:+.5}",
                    g_sum[j] / count as f64,
                    act_sum[j] as f64 / count as f64,
                    state.dual.lambda_high[bus - 1],
                    state.dual.t_high[bus - 1]
                )
            })
            .collect();
        println!("epoch {epoch:>2}: viol {viol:>4}  {}", stats.join("  "));
    }

    let report = evaluation::evaluate_policy(&net, &feeder, &train_set, "policy").unwrap();
    println!("bus  p_high  lambda_hi  t_high   mean_v");
    for bus in 1..=feeder.n() {
        let i = bus - 1;
        if report.violation_high[i] > 0.01 || state.dual.lambda_high[i] > 0.01 {
            println!(
                "{bus:>3}  {:.3}  {:.4}  {:+.4}  {:.4}",
                report.violation_high[i],
                state.dual.lambda_high[i],
                state.dual.t_high[i],
                report.per_bus_mean_voltage()[i]
            );
        }
    }

    // Setpoint statistics per inverter across the training set.
    let s_max = DVector::from_vec(feeder.s_max_controlled());
    let c = feeder.controlled_buses().len();
    let mut mins = vec![f64::MAX; c];
    let mut maxs = vec![f64::MIN; c];
    let mut sums = vec![0.0; c];
    for s in &train_set {
        let p_g_ctrl = training::controlled_solar(&feeder, &s.theta);
        let q = net.forward(&s.phi, &p_g_ctrl, &s_max).unwrap().q;
        for j in 0..c {
            mins[j] = mins[j].min(q[j]);
            maxs[j] = maxs[j].max(q[j]);
            sums[j] += q[j];
        }
    }
    println!("inverter bus: q mean / min / max (s_max)");
    for (j, &bus) in feeder.controlled_buses().iter().enumerate() {
        println!(
            "{bus:>3}: {:+.4} / {:+.4} / {:+.4}  ({:.4})",
            sums[j] / train_set.len() as f64,
            mins[j],
            maxs[j],
            s_max[j]
        );
    }
}
