//! End-to-end pilot: synth data, backbone, hypernet training, held-out pair
//! accuracy. Args: total_steps kcs_start warmup.

use hnfv::backbone::train_reference_backbone;
use hnfv::config::{RunConfig, System};
use hnfv::data::{split_identities, synth_identity_dataset, LabeledImageSet};
use hnfv::eval::evaluate_tensor_pairs;
use hnfv::hypernet::{HyperNetwork, HypernetConfig};
use hnfv::tensor::Tensor;
use hnfv::train::train;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn test_pairs(ds: &LabeledImageSet) -> Vec<(Tensor, Tensor, bool)> {
    let mut pairs = Vec::new();
    let ids = ds.identity_count();
    for id in 0..ids {
        let own = ds.indices_of(id);
        let other = ds.indices_of((id + 1) % ids);
        for j in 0..5 {
            pairs.push((
                ds.image_tensor(own[0]),
                ds.image_tensor(own[1 + j]),
                true,
            ));
            pairs.push((
                ds.image_tensor(own[0]),
                ds.image_tensor(other[1 + j]),
                false,
            ));
        }
    }
    pairs
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cfg = RunConfig::default();
    let mut tc = cfg.train_config();
    tc.total_steps = args[0].parse().unwrap();
    tc.kcs_start = args[1].parse().unwrap();
    tc.warmup_steps = args[2].parse().unwrap();
    if let Some(lr) = args.get(3) {
        tc.lr = lr.parse().unwrap();
    }
    if let Some(b0) = args.get(4) {
        tc.initial_batch_identities = b0.parse().unwrap();
        if tc.initial_batch_identities <= tc.beta as usize {
            tc.beta = 1.0;
        }
    }
    if let Ok(a) = std::env::var("PILOT_ALPHA_END") {
        tc.alpha_end = a.parse().unwrap();
    }
    if let Ok(w) = std::env::var("PILOT_WD") {
        tc.weight_decay = w.parse().unwrap();
    }
    let mut hn_cfg = cfg.hypernet_config();
    if let Ok(h) = std::env::var("PILOT_HIDDEN") {
        hn_cfg.hidden = h.split(',').map(|x| x.parse().unwrap()).collect();
    }
    eprintln!("config: {tc:?} hidden {:?}", hn_cfg.hidden);

    let t0 = Instant::now();
    let full = synth_identity_dataset(&cfg.synth_config()).unwrap();
    let (train_ds, _val, test_ds) =
        split_identities(&full, (cfg.train_frac, cfg.val_frac, cfg.test_frac), cfg.split_seed)
            .unwrap();
    let (backbone, acc) = train_reference_backbone(&train_ds, &cfg.backbone_config()).unwrap();
    println!("backbone acc {acc:.3} at {:.0}s", t0.elapsed().as_secs_f64());

    let arch = cfg.arch().unwrap();
    let (hn, log) = train(&train_ds, &backbone, arch.clone(), &hn_cfg, &tc, None)
        .unwrap();
    println!(
        "trained {} steps, final loss {:.4}, at {:.0}s",
        log.len(),
        log.last().unwrap().loss,
        t0.elapsed().as_secs_f64()
    );

    let pairs = test_pairs(&test_ds);
    let sys = System { backbone, hypernet: hn, arch: arch.clone() };
    if let Ok(dir) = std::env::var("PILOT_SAVE") {
        std::fs::create_dir_all(&dir).unwrap();
        hnfv::modelio::save_backbone(&sys.backbone, format!("{dir}/backbone.hnfv")).unwrap();
        hnfv::modelio::save_hypernet(
            &sys.hypernet,
            &arch.id,
            arch.input_size,
            format!("{dir}/hypernet.hnfv"),
        )
        .unwrap();
    }
    let report = evaluate_tensor_pairs(&sys, &pairs, false).unwrap();
    println!("trained pair accuracy {:.4} auc {:.4}", report.mean_accuracy, report.auc);
    let sym = evaluate_tensor_pairs(&sys, &pairs, true).unwrap();
    println!("symmetric accuracy {:.4} auc {:.4}", sym.mean_accuracy, sym.auc);

    let mut rng = ChaCha8Rng::seed_from_u64(999);
    let fresh = HyperNetwork::new(
        sys.backbone.embedding_dim(),
        arch.layout(),
        &hn_cfg,
        &mut rng,
    );
    let untrained = System { backbone: sys.backbone, hypernet: fresh, arch };
    let report0 = evaluate_tensor_pairs(&untrained, &pairs, false).unwrap();
    println!(
        "untrained pair accuracy {:.4} auc {:.4}",
        report0.mean_accuracy, report0.auc
    );
    println!("total {:.0}s", t0.elapsed().as_secs_f64());
}
