//! Trains the chance-constrained policy at several violation budgets and
//! prints the resulting per-bus sampled violation probabilities.

use voltpolicy::data;
use voltpolicy::evaluation;
use voltpolicy::policy::{standard_dims, PolicyNetwork};
use voltpolicy::scenarios::{self, MeterMask};
use voltpolicy::training::{self, GradientMode, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.iter().position(|a| a == "--epochs").map(|i| args[i + 1].parse().unwrap()).unwrap_or(20);
    let gradient_mode = if args.iter().any(|a| a == "--zeroth-order") {
        GradientMode::ZerothOrder
    } else {
        GradientMode::Analytic
    };
    let feeder = data::feeder37().unwrap();
    let profiles = data::profiles37().unwrap().expand().unwrap();
    let dataset = scenarios::generate_dataset(&profiles, 0.1, 5, 1).unwrap();
    let (mut train_set, mut test_set) = scenarios::split(dataset, 0.8, 1).unwrap();
    let mask = MeterMask::full(&feeder);
    scenarios::apply_mask(&mut train_set, &mask);
    scenarios::apply_mask(&mut test_set, &mask);
    let dims = standard_dims(
        mask.metered_buses().len(),
        feeder.n(),
        feeder.controlled_buses().len(),
    );

    let mut prev: Option<Vec<f64>> = None;
    for alpha in [0.7, 0.5, 0.3] {
        let started = std::time::Instant::now();
        let mut cfg = TrainConfig::chance(alpha, epochs, 1).with_gradient_mode(gradient_mode);
        if args.iter().any(|a| a == "--per-step") {
            cfg.dual_decay = training::DualDecay::PerStep;
        }
        let mut net = PolicyNetwork::init(&dims, cfg.seed);
        let log = training::train(&mut net, &feeder, &train_set, &cfg).unwrap();
        let last = log.last().unwrap();
        let report = evaluation::evaluate_policy(&net, &feeder, &train_set, "policy").unwrap();
        let any = report.violation_any();
        let max_prob = any.iter().cloned().fold(0.0, f64::max);
        let total: f64 = any.iter().sum();
        let over_budget = any.iter().filter(|&&p| p > alpha).count();
        println!(
            "alpha={alpha}  [{:?}] {:.0}s  max_dual_hi {:.3}  train: max p {:.3}  sum p {:.2}  buses>alpha {}  mean loss {:.4e}",
            gradient_mode,
            started.elapsed().as_secs_f64(),
            last.max_lambda_high,
            max_prob,
            total,
            over_budget,
            report.mean_loss,
        );
        let max_low = report.violation_low.iter().cloned().fold(0.0, f64::max);
        let max_high = report.violation_high.iter().cloned().fold(0.0, f64::max);
        println!(
            "           train sides: max p_low {:.3}  max p_high {:.3}  max_dual_lo {:.3}",
            max_low, max_high, last.max_lambda_low
        );
        let test_report = evaluation::evaluate_policy(&net, &feeder, &test_set, "policy").unwrap();
        let t_any = test_report.violation_any();
        println!(
            "           test: max p {:.3}  mean-v max {:.4}",
            t_any.iter().cloned().fold(0.0, f64::max),
            test_report
                .per_bus_mean_voltage()
                .iter()
                .cloned()
                .fold(f64::MIN, f64::max)
        );
        if let Some(bigger_alpha) = &prev {
            let inversions: Vec<(usize, f64, f64)> = any
                .iter()
                .enumerate()
                .filter(|(i, &p)| p > bigger_alpha[*i] + 1e-12)
                .map(|(i, &p)| (i + 1, bigger_alpha[i], p))
                .collect();
            println!(
                "           inversions vs previous alpha: {} buses, worst +{:.4}",
                inversions.len(),
                inversions
                    .iter()
                    .map(|(_, a, b)| b - a)
                    .fold(0.0f64, f64::max)
            );
        }
        prev = Some(any.clone());
    }
}
