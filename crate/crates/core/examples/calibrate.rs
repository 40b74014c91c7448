//! Sweeps the reference setup over seeds and prints per-strategy means.
//!
//! Usage: `calibrate [spread eta_l0 eta_g0 first_seed]`, defaults from the
//! reference config and seeds 1..=5.

use fedcl::harness::{run_experiment, ExperimentConfig, Strategy};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<f64> = std::env::args().skip(1).map(|s| s.parse()).collect::<Result<_, _>>()?;
    let base = ExperimentConfig::reference(1, Strategy::Fedknow);
    let arg = |i: usize, d: f64| args.get(i).copied().unwrap_or(d);
    let first = arg(3, 1.0) as u64;
    for s in Strategy::ALL {
        let (mut f, mut a) = (0.0, 0.0);
        for seed in first..first + 5 {
            let mut cfg = ExperimentConfig::reference(seed, s);
            cfg.stream.spread = arg(0, base.stream.spread);
            cfg.schedule.eta_l0 = arg(1, base.schedule.eta_l0);
            cfg.schedule.eta_g0 = arg(2, base.schedule.eta_g0);
            let r = run_experiment(&cfg)?;
            f += r.final_mean_forgetting().unwrap_or(f64::NAN) / 5.0;
            a += r.final_avg_accuracy() / 5.0;
        }
        println!("{:<12} mean forgetting {f:.4}  final avg accuracy {a:.4}", s.name());
    }
    Ok(())
}
