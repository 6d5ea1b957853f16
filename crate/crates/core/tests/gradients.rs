mod common;

use common::{gradient_check, gradient_check_with, gradient_configs, random_point, FD_EPS};
use linkage_core::network::{forward_pair, num_params, Activation, Fusion, NetConfig};
use linkage_core::training::{total_loss, LossConfig};

#[test]
fn every_configuration_matches_finite_differences() {
    let loss = LossConfig::default();
    for cfg in gradient_configs() {
        assert!(num_params(&cfg) <= 200, "{cfg:?}");
        for seed in 0..4 {
            let err = gradient_check(&cfg, &loss, seed).expect("a kink-free point");
            assert!(err < 1e-4, "{cfg:?} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn default_sine_frequency_matches_with_a_finer_step() {
    let loss = LossConfig::default();
    for cfg in gradient_configs().into_iter().filter(|c| c.activation == Activation::Sine) {
        let cfg = NetConfig { sine_omega0: 30.0, ..cfg };
        for seed in 0..2 {
            let err = gradient_check_with(&cfg, &loss, seed, 1e-6).expect("a kink-free point");
            assert!(err < 1e-4, "{cfg:?} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn uneven_widths_and_depths_match_finite_differences() {
    let loss = LossConfig {
        weight_recon: 0.7,
        margin: 3.0,
        contrastive_scale: 1.5,
        ..LossConfig::default()
    };
    for depth in [1, 2, 3] {
        for activation in [Activation::Relu, Activation::Sine] {
            let cfg = NetConfig {
                input_dim: 7,
                hidden_dim: 5,
                latent_dim: 3,
                depth,
                activation,
                skip_connections: true,
                fusion: Fusion::DecoderAdd,
                sine_omega0: 5.0,
            };
            assert!(num_params(&cfg) <= 200);
            let err = gradient_check(&cfg, &loss, 11).expect("a kink-free point");
            assert!(err < 1e-4, "depth {depth} {activation}: {err:e}");
        }
    }
}

#[test]
fn head_gradients_match_finite_differences() {
    let cfg = NetConfig {
        input_dim: 5,
        hidden_dim: 4,
        latent_dim: 3,
        depth: 2,
        activation: Activation::Sine,
        skip_connections: false,
        fusion: Fusion::None,
        sine_omega0: 2.0,
    };
    let loss = LossConfig::default();
    for seed in 0..6 {
        let p = random_point(&cfg, seed);
        let trace = forward_pair(&p.params, &p.x[0], &p.x[1], &p.geo).unwrap();
        let targets = [p.targets[0].as_slice(), p.targets[1].as_slice()];
        let (_, heads) = total_loss(&trace, targets, p.linked, &loss);
        for b in 0..2 {
            for i in 0..cfg.latent_dim {
                let mut up = trace.clone();
                up.branches[b].encoder.last_mut().unwrap().out[i] += FD_EPS;
                let mut down = trace.clone();
                down.branches[b].encoder.last_mut().unwrap().out[i] -= FD_EPS;
                let fd = (total_loss(&up, targets, p.linked, &loss).0.total
                    - total_loss(&down, targets, p.linked, &loss).0.total)
                    / (2.0 * FD_EPS);
                let a = heads.latent[b][i];
                assert!((a - fd).abs() <= 1e-6 * a.abs().max(1.0), "latent {b}/{i}: {a} vs {fd}");
            }
            for i in 0..cfg.input_dim {
                let mut up = trace.clone();
                up.branches[b].decoder.last_mut().unwrap().out[i] += FD_EPS;
                let mut down = trace.clone();
                down.branches[b].decoder.last_mut().unwrap().out[i] -= FD_EPS;
                let fd = (total_loss(&up, targets, p.linked, &loss).0.total
                    - total_loss(&down, targets, p.linked, &loss).0.total)
                    / (2.0 * FD_EPS);
                let a = heads.reconstruction[b][i];
                assert!((a - fd).abs() <= 1e-6 * a.abs().max(1.0), "recon {b}/{i}: {a} vs {fd}");
            }
        }
    }
}
