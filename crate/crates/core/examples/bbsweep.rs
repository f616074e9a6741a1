//! Backbone recipe sweep scored by held-out embedding cosine AUC.

use hnfv::backbone::{train_reference_backbone, BackboneConfig};
use hnfv::config::RunConfig;
use hnfv::data::{split_identities, synth_identity_dataset, LabeledImageSet};
use hnfv::backbone::EmbeddingBackbone;
use hnfv::eval::roc_curve;

fn cos_auc(backbone: &EmbeddingBackbone, ds: &LabeledImageSet) -> f64 {
    let ids = ds.identity_count();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for id in 0..ids {
        let own = ds.indices_of(id);
        let other = ds.indices_of((id + 1) % ids);
        let e0 = backbone.embed(&ds.image_tensor(own[0])).unwrap();
        for j in 1..=5 {
            scores.push(e0.cosine(&backbone.embed(&ds.image_tensor(own[j])).unwrap()));
            labels.push(true);
            scores.push(e0.cosine(&backbone.embed(&ds.image_tensor(other[j])).unwrap()));
            labels.push(false);
        }
    }
    roc_curve(&scores, &labels).unwrap().1
}

fn main() {
    let cfg = RunConfig::default();
    let full = synth_identity_dataset(&cfg.synth_config()).unwrap();
    let (train_ds, _v, test_ds) =
        split_identities(&full, (cfg.train_frac, cfg.val_frac, cfg.test_frac), cfg.split_seed)
            .unwrap();
    let variants: Vec<(&str, BackboneConfig)> = vec![
        ("wide_dim32", BackboneConfig { channels: vec![32, 64, 128, 256], embedding_dim: 32, input_size: 32, epochs: 10, batch_size: 32, lr: 1e-2, weight_decay: 1e-5, seed: 11 }),
        ("wide_dim64", BackboneConfig { channels: vec![32, 64, 128, 256], embedding_dim: 64, input_size: 32, epochs: 10, batch_size: 32, lr: 1e-2, weight_decay: 1e-5, seed: 11 }),
        ("wide_ep20_wd1e-3", BackboneConfig { channels: vec![32, 64, 128, 256], embedding_dim: 128, input_size: 32, epochs: 20, batch_size: 32, lr: 1e-2, weight_decay: 1e-3, seed: 11 }),
        ("wide_dim64_ep20_wd1e-3", BackboneConfig { channels: vec![32, 64, 128, 256], embedding_dim: 64, input_size: 32, epochs: 20, batch_size: 32, lr: 1e-2, weight_decay: 1e-3, seed: 11 }),
        ("wider", BackboneConfig { channels: vec![48, 96, 192, 384], embedding_dim: 128, input_size: 32, epochs: 10, batch_size: 32, lr: 1e-2, weight_decay: 1e-5, seed: 11 }),
    ];
    for (name, bc) in variants {
        let (bb, acc) = train_reference_backbone(&train_ds, &bc).unwrap();
        println!("{name}: cls acc {acc:.3}, heldout cos auc {:.4}", cos_auc(&bb, &test_ds));
    }
}
