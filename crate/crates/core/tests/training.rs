//! Optimizer and training-loop behaviour on small models.

use hsi_peft::adapters::{attach, AdapterSpec, Method};
use hsi_peft::config::RunConfig;
use hsi_peft::harness::{prepare, train};
use hsi_peft::model::{ModelConfig, VitModel};
use hsi_peft::optim::{AdamW, OptimizerConfig};
use hsi_peft::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

fn small() -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        depth: 2,
        heads: 4,
        ..ModelConfig::tiny(3)
    }
}

#[test]
fn every_trainable_tensor_gets_a_gradient_within_a_few_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for method in Method::ALL {
        let mut model = VitModel::<f32>::new(small(), 2).unwrap();
        if method != Method::Full {
            attach(&mut model, &AdapterSpec::new(method), 3).unwrap();
        }
        let mut opt = AdamW::new(&model, OptimizerConfig::default()).unwrap();
        let mut touched: BTreeMap<String, bool> = BTreeMap::new();
        // Zero-initialized factors block the gradient of their partner until
        // the first update, hence more than one step.
        for _ in 0..3 {
            let x: Vec<f32> = (0..4 * 32 * 32 * 12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
            model.zero_grad();
            model.loss_and_backward(&x, &labels).unwrap();
            model.visit(|name, _, p| {
                if p.trainable {
                    *touched.entry(name.to_string()).or_default() |= p.grad.data().iter().any(|g| *g != 0.0);
                }
            });
            opt.step(&mut model).unwrap();
        }
        let silent: Vec<_> = touched.iter().filter(|(_, t)| !**t).map(|(n, _)| n.as_str()).collect();
        assert!(silent.is_empty(), "{method}: no gradient for {silent:?}");
    }
}

#[test]
fn nan_gradient_is_reported_before_any_update() {
    let mut model = VitModel::<f32>::new(small(), 2).unwrap();
    attach(&mut model, &AdapterSpec::new(Method::Lora), 3).unwrap();
    let mut opt = AdamW::new(&model, OptimizerConfig::default()).unwrap();
    model.visit_mut(|name, _, p| {
        if name == "layer1.v.A" {
            p.grad.data_mut()[0] = f32::NAN;
        }
    });
    let before = model.clone();
    match opt.step(&mut model) {
        Err(Error::Numerical(msg)) => assert!(msg.contains("layer1.v.A"), "{msg}"),
        other => panic!("expected a numerical error, got {other:?}"),
    }
    let mut same = true;
    before.visit(|name, _, a| {
        model.visit(|n, _, b| {
            if n == name {
                same &= a.value.data() == b.value.data();
            }
        })
    });
    assert!(same);
}

#[test]
fn adapters_beat_linear_probe_at_default_rates() {
    let oa = |method: &str| {
        let cfg = RunConfig::from_text(&format!(
            "[adapter]\nmethod = {method}\n[train]\nepochs = 5\neval_every = 5\n"
        ))
        .unwrap();
        train(&cfg, &prepare(&cfg).unwrap()).unwrap().best.oa
    };
    let (lp, lora) = (oa("lp"), oa("lora"));
    assert!(lora >= lp, "LoRA {lora} < LP {lp}");
    assert!(lora > 0.8, "LoRA {lora}");
}
