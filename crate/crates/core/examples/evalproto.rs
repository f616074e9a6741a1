//! Compare evaluation protocols on a saved system. Arg: artifact dir with
//! backbone.hnfv + hypernet.hnfv.

use hnfv::config::{RunConfig, System};
use hnfv::data::{split_identities, synth_identity_dataset, LabeledImageSet};
use hnfv::eval::evaluate_tensor_pairs;
use hnfv::modelio;
use hnfv::tensor::Tensor;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn next_id_pairs(ds: &LabeledImageSet) -> Vec<(Tensor, Tensor, bool)> {
    let ids = ds.identity_count();
    let mut pairs = Vec::new();
    for id in 0..ids {
        let own = ds.indices_of(id);
        let other = ds.indices_of((id + 1) % ids);
        for j in 1..=5 {
            pairs.push((ds.image_tensor(own[0]), ds.image_tensor(own[j]), true));
            pairs.push((ds.image_tensor(own[0]), ds.image_tensor(other[j]), false));
        }
    }
    pairs
}

fn random_impostor_pairs(ds: &LabeledImageSet, per_id: usize) -> Vec<(Tensor, Tensor, bool)> {
    let ids = ds.identity_count();
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut pairs = Vec::new();
    for id in 0..ids {
        let own = ds.indices_of(id);
        for j in 0..per_id {
            pairs.push((
                ds.image_tensor(own[0]),
                ds.image_tensor(own[1 + j % (own.len() - 1)]),
                true,
            ));
            let mut o = id;
            while o == id {
                o = (rng.next_u32() as usize) % ids;
            }
            let them = ds.indices_of(o);
            let k = (rng.next_u32() as usize) % them.len();
            pairs.push((ds.image_tensor(own[0]), ds.image_tensor(them[k]), false));
        }
    }
    pairs
}

fn main() {
    let dir = std::env::args().nth(1).unwrap();
    let cfg = RunConfig::default();
    let full = synth_identity_dataset(&cfg.synth_config()).unwrap();
    let (_train, _val, test_ds) =
        split_identities(&full, (cfg.train_frac, cfg.val_frac, cfg.test_frac), cfg.split_seed)
            .unwrap();
    let backbone = modelio::load_backbone(format!("{dir}/backbone.hnfv")).unwrap();
    let (hypernet, arch) = modelio::load_hypernet(format!("{dir}/hypernet.hnfv")).unwrap();
    let sys = System { backbone, hypernet, arch };

    for (name, pairs) in [
        ("next-id 5/5", next_id_pairs(&test_ds)),
        ("random 5/5", random_impostor_pairs(&test_ds, 5)),
        ("random 10/10", random_impostor_pairs(&test_ds, 10)),
    ] {
        let a = evaluate_tensor_pairs(&sys, &pairs, false).unwrap();
        let s = evaluate_tensor_pairs(&sys, &pairs, true).unwrap();
        println!(
            "{name}: asym acc {:.4} auc {:.4} | sym acc {:.4} auc {:.4} ({} pairs)",
            a.mean_accuracy, a.auc, s.mean_accuracy, s.auc, pairs.len()
        );
    }
}
