//! Embedding-space ceiling check: cosine-similarity scoring of test pairs
//! through the saved backbone alone. Arg: artifact dir.

use hnfv::config::RunConfig;
use hnfv::data::split_identities;
use hnfv::data::synth_identity_dataset;
use hnfv::eval::roc_curve;
use hnfv::modelio;

fn main() {
    let dir = std::env::args().nth(1).unwrap();
    let cfg = RunConfig::default();
    let full = synth_identity_dataset(&cfg.synth_config()).unwrap();
    let (_t, _v, test_ds) =
        split_identities(&full, (cfg.train_frac, cfg.val_frac, cfg.test_frac), cfg.split_seed)
            .unwrap();
    let backbone = modelio::load_backbone(format!("{dir}/backbone.hnfv")).unwrap();
    let ids = test_ds.identity_count();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for id in 0..ids {
        let own = test_ds.indices_of(id);
        let other = test_ds.indices_of((id + 1) % ids);
        let e0 = backbone.embed(&test_ds.image_tensor(own[0])).unwrap();
        for j in 1..=5 {
            let ep = backbone.embed(&test_ds.image_tensor(own[j])).unwrap();
            scores.push(e0.cosine(&ep));
            labels.push(true);
            let en = backbone.embed(&test_ds.image_tensor(other[j])).unwrap();
            scores.push(e0.cosine(&en));
            labels.push(false);
        }
    }
    let (_pts, auc) = roc_curve(&scores, &labels).unwrap();
    println!("embedding cosine auc {auc:.4}");
}
