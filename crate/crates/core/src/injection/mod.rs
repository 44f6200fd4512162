//! Trainable simplified copy, attention injection and the weight schedule.

mod checkpoint;
mod copy;
mod schedule;

pub use checkpoint::{Checkpoint, SubjectRecord, TrainProgress, CHECKPOINT_FORMAT};
pub use copy::{
    bind_learned, copy_forward, denoise_joint, denoise_joint_weighted, extract_injection_features,
    init_trainable_copy, injected_self_attention, joint_forward_on_tape, plain_self_attention, AttentionProjections,
    FeatureWeight, InjectionConfig, InjectionFeatures, InjectionModel, JointOutput, JointTape, SimplifiedCopy,
    SubjectSource, COPY_PREFIX,
};
pub use schedule::{schedule_weight, LearnedVars, LearnedWeights, ScheduleVariant, WeightSchedule, LEARNED_HIDDEN};
