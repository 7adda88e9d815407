//! Sensitivity sweep: chance training at one alpha across seeds, reporting
//! the worst per-bus violation probability on the training set.

use voltpolicy::data;
use voltpolicy::evaluation;
use voltpolicy::policy::{standard_dims, PolicyNetwork};
use voltpolicy::scenarios::{self, MeterMask};
use voltpolicy::training::{self, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let alpha: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.3);
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

    for seed in [1u64, 2, 3, 4] {
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::chance(alpha, epochs, seed)
        };
        let mut net = PolicyNetwork::init(&dims, cfg.seed);
        let log = training::train(&mut net, &feeder, &train_set, &cfg).unwrap();
        let report = evaluation::evaluate_policy(&net, &feeder, &train_set, "policy").unwrap();
        let any = report.violation_any();
        let max_p = any.iter().cloned().fold(0.0, f64::max);
        let over: Vec<usize> = any
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > alpha)
            .map(|(i, _)| i + 1)
            .collect();
        println!(
            "alpha={alpha} seed={seed} epochs={epochs}: max p {:.3}  over-budget buses {:?}  dual_hi {:.3}  loss {:.4e}",
            max_p,
            over,
            log.last().unwrap().max_lambda_high,
            report.mean_loss
        );
    }
}
