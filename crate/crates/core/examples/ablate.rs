//! Ablation scan at reduced scale: full system vs no-KCS vs no-norm vs the
//! direct baseline. Args: total_steps kcs_start warmup lr [seeds...].

use hnfv::backbone::{train_reference_backbone, BackboneConfig};
use hnfv::config::System;
use hnfv::data::{split_identities, synth_identity_dataset, LabeledImageSet, SynthConfig};
use hnfv::eval::evaluate_tensor_pairs;
use hnfv::hypernet::HypernetConfig;
use hnfv::tensor::Tensor;
use hnfv::train::{train, train_direct_baseline, TrainConfig};
use hnfv::verifier::VerifierArchitecture;
use std::time::Instant;

fn heldout_pairs(ds: &LabeledImageSet) -> Vec<(Tensor, Tensor, bool)> {
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

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let total: usize = args[0].parse().unwrap();
    let kcs: usize = args[1].parse().unwrap();
    let warmup: usize = args[2].parse().unwrap();
    let lr: f64 = args[3].parse().unwrap();
    let seeds: Vec<u64> = if args.len() > 4 {
        args[4..].iter().map(|a| a.parse().unwrap()).collect()
    } else {
        vec![101, 202, 303]
    };

    let t0 = Instant::now();
    let full_ds = synth_identity_dataset(&SynthConfig {
        identities: 40,
        samples_per_identity: 8,
        image_size: 32,
        latent_dim: 16,
        shift_px: 3,
        brightness: 0.2,
        noise_sigma: 0.05,
        seed: 42,
    })
    .unwrap();
    let (train_ds, _val, test_ds) = split_identities(&full_ds, (0.7, 0.1, 0.2), 1).unwrap();
    let (backbone, acc) = train_reference_backbone(
        &train_ds,
        &BackboneConfig {
            channels: vec![16, 32, 64],
            embedding_dim: 32,
            input_size: 32,
            epochs: 40,
            batch_size: 32,
            lr: 3e-2,
            weight_decay: 1e-5,
            seed: 5,
        },
    )
    .unwrap();
    println!("backbone acc {acc:.3} at {:.0}s", t0.elapsed().as_secs_f64());

    let pairs = heldout_pairs(&test_ds);
    let base_cfg = |seed: u64| TrainConfig {
        initial_batch_identities: 2,
        images_per_identity: 2,
        total_steps: total,
        kcs_start: kcs,
        beta: 1.0,
        lr,
        momentum: 0.9,
        weight_decay: 1e-4,
        warmup_steps: warmup,
        alpha_start: 1e-6,
        alpha_end: 1e-4,
        clusters: Some(5),
        seed,
    };
    let hn_cfg = HypernetConfig { hidden: vec![128, 128], final_init_scale: 0.01 };
    let arch = VerifierArchitecture::desk32();
    let run = |cfg: &TrainConfig| -> f64 {
        let (hn, log) = train(&train_ds, &backbone, arch.clone(), &hn_cfg, cfg, None).unwrap();
        let system =
            System { backbone: backbone.clone(), hypernet: hn, arch: arch.clone() };
        let r = evaluate_tensor_pairs(&system, &pairs, false).unwrap();
        eprintln!("  loss {:.4} acc {:.4} auc {:.4}", log.last().unwrap().loss, r.mean_accuracy, r.auc);
        r.mean_accuracy
    };
    let mut sums = [0.0f64; 4];
    for &seed in &seeds {
        println!("seed {seed}");
        sums[0] += run(&base_cfg(seed));
        let mut c = base_cfg(seed);
        c.kcs_start = c.total_steps;
        sums[1] += run(&c);
        let mut c = base_cfg(seed);
        c.alpha_start = 0.0;
        c.alpha_end = 0.0;
        sums[2] += run(&c);
        let (bl, _) = train_direct_baseline(&train_ds, arch.clone(), &base_cfg(seed), None).unwrap();
        let r = evaluate_tensor_pairs(&bl, &pairs, false).unwrap();
        eprintln!("  direct acc {:.4} auc {:.4}", r.mean_accuracy, r.auc);
        sums[3] += r.mean_accuracy;
    }
    let n = seeds.len() as f64;
    println!(
        "means: full {:.4} no-kcs {:.4} no-norm {:.4} direct {:.4}, total {:.0}s",
        sums[0] / n,
        sums[1] / n,
        sums[2] / n,
        sums[3] / n,
        t0.elapsed().as_secs_f64()
    );
}
