//! Group-relative advantages, the clipped surrogate, and the full numeric check
//! including the bandit run.
//!
//! cargo run --example grpo_check

use memrec::grpo::{clipped_term, compute_advantages, run_verification, VerifyConfig};
use memrec::pipeline::verify_summary;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let rewards = [10.2, 10.2, 3.66, 3.66, 3.66];
    let adv = compute_advantages(&rewards, 1e-8)?;
    println!("rewards    {rewards:?}");
    println!(
        "advantages {:?}\n",
        adv.iter()
            .map(|a| (a * 1e4).round() / 1e4)
            .collect::<Vec<_>>()
    );

    println!("clipped term, epsilon 0.2");
    println!("{:>6} {:>8} {:>8}", "ratio", "A=+1", "A=-1");
    for ratio in [0.5, 0.8, 1.0, 1.2, 1.5] {
        println!(
            "{ratio:>6} {:>8.3} {:>8.3}",
            clipped_term(ratio, 1.0, 0.2),
            clipped_term(ratio, -1.0, 0.2)
        );
    }

    let cfg = VerifyConfig {
        seed: 7,
        ..VerifyConfig::default()
    };
    let report = run_verification(&cfg)?;
    println!("\n{}", verify_summary(&report));
    let t = &report.bandit.trajectory;
    for step in (0..t.mean_rewards.len()).step_by(t.mean_rewards.len().div_ceil(10).max(1)) {
        let expected = t.expected_rewards[step].map_or("-".into(), |e| format!("{e:.3}"));
        println!(
            "  step {step:>4}: group mean {:.2}, expected {expected}",
            t.mean_rewards[step]
        );
    }
    Ok(())
}
