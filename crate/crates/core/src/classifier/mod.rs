//! Small convolutional classifier over spectrogram images and its evaluation suite.

pub mod metrics;
pub mod model;
pub mod train;

pub use metrics::{
    average_precision, confusion_matrix, metrics_from_confusion, report_from_probabilities, roc_auc,
    roc_auc_fixed_thresholds,
    ConfusionMetrics, MetricsReport,
};
pub use model::{
    default_classes, forward, grad_check, init_model, loss_and_grads, softmax, ForwardOutput, GradCheckReport, Gradients, Model,
};
pub use train::{
    checkpoint_json, model_from_checkpoint_json,
    build_images, evaluate, load_checkpoint, save_checkpoint, split_images, stratified_split, train, EpochStats, TrainConfig,
    WindowSelection,
};
