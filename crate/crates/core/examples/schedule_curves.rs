//! Injection weight over the denoising trajectory for each schedule variant.

use p3s::injection::{schedule_weight, LearnedWeights, ScheduleVariant, WeightSchedule};

fn main() -> p3s::Result<()> {
    let total = 1000;
    let learned = WeightSchedule {
        learned: Some(LearnedWeights::init(0.2, 7)),
        ..WeightSchedule::with_variant(ScheduleVariant::Learned)
    };
    let variants = [
        ("polynomial", WeightSchedule::default()),
        ("increasing", WeightSchedule::with_variant(ScheduleVariant::Increasing)),
        ("fixed(1)", WeightSchedule::fixed(1.0)),
        ("learned(init)", learned),
    ];
    print!("{:>6}", "t");
    for (name, _) in &variants {
        print!("{name:>15}");
    }
    println!();
    for t in (0..=total).rev().step_by(100) {
        print!("{t:>6}");
        for (_, s) in &variants {
            print!("{:>15.4}", schedule_weight(t as f64, total, s)?);
        }
        println!();
    }
    Ok(())
}
