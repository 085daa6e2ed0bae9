//! Train a tiny model through the public API and round-trip its checkpoint.

use pfn_core::backbones::PFNModel;
use pfn_core::training::{train, validate, TrainConfig, ValidationSuite};

fn tiny(attention: &str) -> TrainConfig {
    TrainConfig::from_text(&format!(
        "prior = 1d\npoints_per_dataset = 20\nepochs = 2\nsteps_per_epoch = 5\nbatch_size = 2\n\
         warmup_epochs = 1\nwidth = 8\nffn_dim = 16\nheads = 2\nbucket_count = 10\nbucket_samples = 400\n\
         val_datasets = 3\nattention = {attention}\nseed = 3\n"
    ))
    .unwrap()
}

#[test]
fn train_is_deterministic_and_checkpoint_round_trips() {
    for attention in ["va", "dva"] {
        let cfg = tiny(attention);
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(a.log.to_csv(), b.log.to_csv());
        assert!(a.best_val_nll.is_finite());

        let restored = PFNModel::from_bytes(&a.best.to_bytes()).unwrap();
        let suite = ValidationSuite::generate(&cfg.data, 3, 11).unwrap();
        let direct = validate(&a.best, &suite).unwrap();
        assert_eq!(direct.to_bits(), validate(&restored, &suite).unwrap().to_bits());
    }
}
