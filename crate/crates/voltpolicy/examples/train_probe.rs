//! Trains the averaged-formulation policy on the bundled feeder and prints
//! the before/after voltage picture plus the three-way loss comparison.

use nalgebra::DVector;
use voltpolicy::data;
use voltpolicy::evaluation::{self, OpfOptions};
use voltpolicy::policy::{standard_dims, PolicyNetwork};
use voltpolicy::scenarios::{self, MeterMask};
use voltpolicy::training::{self, TrainConfig};

fn main() {
    let started = std::time::Instant::now();
    let feeder = data::feeder37().unwrap();
    let profiles = data::profiles37().unwrap().expand().unwrap();
    let dataset = scenarios::generate_dataset(&profiles, 0.1, 5, 1).unwrap();
    let (mut train_set, mut test_set) = scenarios::split(dataset, 0.8, 1).unwrap();
    let mask = MeterMask::full(&feeder);
    scenarios::apply_mask(&mut train_set, &mask);
    scenarios::apply_mask(&mut test_set, &mask);

    let cfg = TrainConfig::averaged(15, 1);
    let dims = standard_dims(mask.metered_buses().len(), feeder.n(), feeder.controlled_buses().len());
    let mut net = PolicyNetwork::init(&dims, cfg.seed);
    let log = training::train(&mut net, &feeder, &train_set, &cfg).unwrap();
    println!("trained in {:.1?}s", started.elapsed().as_secs_f64());
    for row in &log {
        println!(
            "epoch {:>2}  loss {:.5e}  max_dual_hi {:.3}  violations {:>3}  recourse {}",
            row.epoch, row.loss, row.max_lambda_high, row.violations, row.recourse_events
        );
    }

    for (name, set) in [("train", &train_set), ("test", &test_set)] {
        let zero = evaluation::evaluate_zero_policy(&feeder, set, "none").unwrap();
        let policy = evaluation::evaluate_policy(&net, &feeder, set, "policy").unwrap();
        let mean_v = policy.per_bus_mean_voltage();
        let worst = mean_v.iter().cloned().fold(f64::MIN, f64::max);
        let lowest = mean_v.iter().cloned().fold(f64::MAX, f64::min);
        let in_band = mean_v.iter().filter(|&&v| (0.97..=1.03).contains(&v)).count();
        println!(
            "[{name}] zero mean loss {:.5e} | policy mean loss {:.5e} | mean_v in band {}/{} (min {:.4}, max {:.4})",
            zero.mean_loss, policy.mean_loss, in_band, mean_v.len(), lowest, worst
        );
        let probe: Vec<f64> = policy.violation_any();
        let max_prob = probe.iter().cloned().fold(0.0, f64::max);
        println!("[{name}] max per-bus violation probability after training: {max_prob:.3}");
    }

    let sample: Vec<_> = test_set.iter().take(60).cloned().collect();
    let opf = evaluation::evaluate_opf(&feeder, &sample, "opf", &OpfOptions::default()).unwrap();
    let policy = evaluation::evaluate_policy(&net, &feeder, &sample, "policy").unwrap();
    println!(
        "[test sample] opf mean loss {:.5e} ({} infeasible) | policy {:.5e}",
        opf.mean_loss,
        opf.infeasible.len(),
        policy.mean_loss
    );

    // Inspect one setpoint to see the policy's behavior at peak solar.
    let s_max = DVector::from_vec(feeder.s_max_controlled());
    let s = &test_set[0];
    let p_g_ctrl = training::controlled_solar(&feeder, &s.theta);
    let q = net.forward(&s.phi, &p_g_ctrl, &s_max).unwrap().q;
    println!("sample setpoints at t={}: {:?}", s.timestamp_index, q.as_slice());
}
