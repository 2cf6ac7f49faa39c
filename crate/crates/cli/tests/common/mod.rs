use uwkit_cli::config::RunConfig;
use uwkit_core::encoder::Role;
use uwkit_core::EncoderConfig;

/// A configuration small enough to train for a few dozen steps in seconds.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.scene.image_size = 64;
    cfg.data.scene.min_radius = 5.0;
    cfg.data.scene.max_radius = 14.0;
    cfg.data.scene.max_instances = 3;
    cfg.data.train_images = 8;
    cfg.data.holdout_images = 4;
    let enc = |depth, dim, role| EncoderConfig {
        image_size: 64,
        patch_size: 16,
        depth,
        dim,
        heads: 2,
        mlp_ratio: 2,
        role,
    };
    cfg.teacher = enc(4, 32, Role::Teacher);
    cfg.student = enc(2, 16, Role::Student);
    cfg.distill.tap_layers = vec![1, 2];
    cfg.distill.gat.hidden_per_head = 8;
    cfg.model.eupg.hidden = 32;
    cfg.model.eupg.rois_per_image = 16;
    cfg.model.decoder.width = 16;
    cfg.model.decoder.mlp_dim = 32;
    cfg.train.batch_size = 4;
    cfg.train.epochs = 2;
    cfg
}
