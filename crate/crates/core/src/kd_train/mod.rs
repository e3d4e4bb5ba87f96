//! Distillation training of a student whose skips are altered gradually
//! while a frozen teacher supplies soft targets.

mod data;
mod loss;
mod train;

pub use data::{Dataset, SyntheticTask, TaskData};
pub use loss::{kd_loss, kd_loss_on_tape, KdLossConfig, LabelDistance, Labels, TeacherDistance};
pub use train::{
    candidate_count, pretrain, train_hardware_aware, train_supervised, write_history_csv, EpochRecord, Model,
    SgdConfig, TrainPlan, TrainReport,
};
