#![allow(dead_code)]

use ckd_harness::config::ExperimentConfig;
use ckd_harness::task::{generate_task, Dataset};
use ckd_harness::train::{train_teacher, TrainedModel};

/// Seconds-scale config: small task, 2/16/2 teacher, 1/8/2 student.
pub fn tiny_config() -> ExperimentConfig {
    ExperimentConfig::from_toml_with(
        r#"
seed = 3
[task]
vocab_size = 14
seq_len = 16
num_classes = 4
train_size = 64
dev_size = 48
test_size = 48
[teacher]
layers = 2
hidden = 16
heads = 2
ffn = 32
[student]
layers = 1
hidden = 8
heads = 2
ffn = 16
[teacher_train]
epochs = 2
lr = 0.003
[student_train]
epochs = 2
lr = 0.003
[distill]
delta = 4
[suite]
num_seeds = 2
[adaptive]
steps = 6
batch_size = 4
importance_batch = 16
"#,
        &[],
    )
    .expect("tiny config is valid")
}

pub fn tiny_teacher() -> (ExperimentConfig, Dataset, TrainedModel) {
    let cfg = tiny_config();
    let data = generate_task(&cfg.task).expect("task");
    let teacher = train_teacher(&cfg, &data).expect("teacher");
    (cfg, data, teacher)
}
