//! Rough per-phase timing of one training step at full batch size.

use hnfv::hypernet::{HyperNetwork, HypernetConfig};
use hnfv::tensor::Tensor;
use hnfv::train::{lambda_factor, norm_loss, target_matrix, total_loss, weighted_bce};
use hnfv::verifier::VerifierArchitecture;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let arch = VerifierArchitecture::desk32();
    let nb = 64;
    let d = 128;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rnd = |n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.next_u32() as f64 / u32::MAX as f64 - 0.5).collect()
    };
    let emb = Tensor::param(rnd(nb * d), &[nb, d]);
    let images = Tensor::from_vec(rnd(nb * 3 * 32 * 32), &[nb, 3, 32, 32]);
    let hn = HyperNetwork::new(d, arch.layout(), &HypernetConfig::default(), &mut rng);
    let ids: Vec<usize> = (0..nb).map(|i| i / 2).collect();
    let y = target_matrix(&ids);
    let lambda = lambda_factor(32, 2.0).unwrap();

    for round in 0..3 {
        let t0 = Instant::now();
        let thetas = hn.forward(&emb).unwrap();
        let t1 = Instant::now();
        let yhat = arch.batched_predict(&images, &thetas).unwrap();
        let t2 = Instant::now();
        let bce = weighted_bce(&yhat, &y, lambda).unwrap();
        let loss = total_loss(&bce, &norm_loss(&thetas), 1e-4).unwrap();
        let t3 = Instant::now();
        loss.backward().unwrap();
        let t4 = Instant::now();
        println!(
            "round {round}: hn_fwd {:.3}s predict {:.3}s loss {:.3}s backward {:.3}s total {:.3}s",
            (t1 - t0).as_secs_f64(),
            (t2 - t1).as_secs_f64(),
            (t3 - t2).as_secs_f64(),
            (t4 - t3).as_secs_f64(),
            (t4 - t0).as_secs_f64()
        );
        for (_, p) in hn.params() {
            p.zero_grad();
        }
        emb.zero_grad();
    }
}
