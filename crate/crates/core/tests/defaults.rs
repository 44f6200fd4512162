//! Published hyperparameters that the defaults must carry.

use p3s::evaluator::EvalProtocol;
use p3s::injection::{InjectionConfig, ScheduleVariant, WeightSchedule};
use p3s::losses::AcPlacement;
use p3s::sampler::SampleRequest;
use p3s::trainer::TrainConfig;

#[test]
fn training_defaults() {
    let t = TrainConfig::default();
    assert_eq!(t.learning_rate, 1e-5);
    assert_eq!(t.epochs, 60);
    assert_eq!(t.condition_dropout, 0.10);
    assert_eq!(t.gamma, 0.1);
    assert_eq!(t.lambda, 0.2);
    assert_eq!(t.ac_layers, AcPlacement::LastLayer);
    assert_eq!(t.prompt(), "a photo of [V] object");
    assert_eq!(InjectionConfig::default().lambda, 0.2);
}

#[test]
fn schedule_defaults() {
    let s = WeightSchedule::default();
    assert_eq!(s.variant, ScheduleVariant::Polynomial);
    assert_eq!((s.alpha, s.beta, s.k), (0.5, 0.2, 2.0));
}

#[test]
fn sampling_and_protocol_defaults() {
    let r = SampleRequest::default();
    assert_eq!((r.steps, r.guidance, r.eta), (50, 7.5, 0.0));
    let p = EvalProtocol::default();
    assert_eq!((p.prompts.len(), p.images_per_prompt), (25, 4));
    assert_eq!(p.images_per_class(), 100);
}
