use diffrisk::embed::mlp::HIDDEN;
use diffrisk::embed::{mlp_score, train_mlp, MlpClassifier, MlpConfig};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Forward pass written out index by index.
fn brute_score(m: &MlpClassifier, e: &[f64]) -> f64 {
    let mut a: Vec<f64> = (0..e.len()).map(|j| (e[j] - m.input_mean[j]) / m.input_scale[j]).collect();
    let last = m.network.layers.len() - 1;
    for (l, layer) in m.network.layers.iter().enumerate() {
        let mut next = vec![0.0; layer.outputs];
        for k in 0..layer.outputs {
            let mut z = layer.b[k];
            for j in 0..layer.inputs {
                z += layer.w[k * layer.inputs + j] * a[j];
            }
            next[k] = if l < last { z.tanh() } else { z };
        }
        a = next;
    }
    1.0 / (1.0 + (-a[0]).exp())
}

fn dataset(seed: u64, n: usize, d: usize) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
    let y = x.iter().map(|r| r[0] + 0.5 * r[1] > 0.3).collect();
    (x, y)
}

#[test]
fn forward_pass_matches_brute_force() {
    let (x, y) = dataset(3, 120, 6);
    let cfg = MlpConfig {
        epochs: 3,
        ..MlpConfig::default()
    };
    let m = train_mlp(&x, &y, &cfg).unwrap();
    let sizes: Vec<usize> = m.network.layers.iter().map(|l| l.outputs).collect();
    assert_eq!(sizes[..3], HIDDEN);
    assert_eq!(sizes[3], 1);
    for e in &x {
        let got = mlp_score(&m, e).unwrap();
        assert!((got - brute_score(&m, e)).abs() < 1e-10);
    }
    assert!(mlp_score(&m, &x[0][..5]).is_err());
}

#[test]
fn training_is_seeded_and_learns() {
    let (x, y) = dataset(4, 300, 5);
    let cfg = MlpConfig {
        epochs: 40,
        seed: 9,
        ..MlpConfig::default()
    };
    let a = train_mlp(&x, &y, &cfg).unwrap();
    assert_eq!(a, train_mlp(&x, &y, &cfg).unwrap());
    let other = train_mlp(&x, &y, &MlpConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(a.network, other.network);

    let meta = &a.train_meta;
    assert!(meta.final_loss.unwrap() < 0.5 * meta.initial_loss.unwrap(), "{meta:?}");
    let correct = x
        .iter()
        .zip(&y)
        .filter(|(e, l)| (mlp_score(&a, e).unwrap() > 0.5) == **l)
        .count();
    assert!(correct as f64 / x.len() as f64 > 0.9);
}
