//! Pre-training loop, checkpoints and the linear-probe evaluation.

mod checkpoint;
mod config;
mod export;
mod model;
mod optim;
mod probe;
mod train;

pub use checkpoint::{checkpoint_paths, Checkpoint};
pub use config::{ablation_mode, AblationMode, SceneSet, TrainConfig, SEED_ENV};
pub use export::{cell_prototypes, export_curvature, export_prototypes, export_views, loss_tape_json};
pub use model::{
    batch_gradient, depth_guided_maps, draw_scene, init_params, param_group, range_error, render_ranges,
    scene_features, scene_field, scene_gradient, scene_loss, SceneDraw, SceneLoss, StepStats,
};
pub use optim::{cosine_lr, Adam};
pub use probe::{fit_probe, linear_probe, observed_cells, voxel_labels, RECEPTIVE_RADIUS, ProbeConfig, ProbeReport, CLASSES, EMPTY, FOREGROUND, GROUND};
pub use train::{checkpoint_stem, read_log, resume, train, LogRow, Trainer, LOG_FILE, LOG_HEADER};
