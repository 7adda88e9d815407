//! Prints the no-compensation voltage profile of the bundled feeder over a
//! generated scenario window: per-bus mean voltages, violation frequencies,
//! and the buses an uncontrolled feeder pushes out of band.

use voltpolicy::data;
use voltpolicy::evaluation::{self, OpfOptions};
use voltpolicy::scenarios;

fn main() {
    let feeder = data::feeder37().expect("bundled feeder");
    let profiles = data::profiles37().expect("bundled profiles").expand().unwrap();
    let dataset = scenarios::generate_dataset(&profiles, 0.1, 5, 1).unwrap();
    let (train, _test) = scenarios::split(dataset, 0.8, 1).unwrap();

    let report = evaluation::evaluate_zero_policy(&feeder, &train, "none").unwrap();
    println!(
        "scenarios: {}  converged: {}  divergent: {}",
        train.len(),
        report.records.len(),
        report.divergent.len()
    );
    println!("mean loss: {:.6e}", report.mean_loss);

    let mean_v = report.per_bus_mean_voltage();
    let any = report.violation_any();
    println!("bus  mean_v   p_low   p_high  p_any");
    for bus in 1..=feeder.n() {
        let i = bus - 1;
        let marker = if mean_v[i] > 1.03 {
            " OVER"
        } else if mean_v[i] < 0.97 {
            " UNDER"
        } else {
            ""
        };
        println!(
            "{bus:>3}  {:.4}  {:.3}  {:.3}  {:.3}{marker}",
            mean_v[i],
            report.violation_low[i],
            report.violation_high[i],
            any[i]
        );
    }
    let over = mean_v.iter().filter(|&&v| v > 1.03).count();
    let under = mean_v.iter().filter(|&&v| v < 0.97).count();
    let busy = any.iter().filter(|&&p| p > 0.5).count();
    println!("buses with mean over-voltage: {over}, mean under-voltage: {under}");
    println!("buses violating in >50% of scenarios: {busy}");

    // Feasibility of the per-scenario OPF on a subsample.
    let sample: Vec<_> = train.iter().take(40).cloned().collect();
    let opf = evaluation::evaluate_opf(&feeder, &sample, "opf", &OpfOptions::default()).unwrap();
    println!(
        "opf on {} scenarios: {} feasible, {} infeasible, {} divergent, mean loss {:.6e}",
        sample.len(),
        opf.records.len() - opf.infeasible.len(),
        opf.infeasible.len(),
        opf.divergent.len(),
        opf.mean_loss
    );
}
