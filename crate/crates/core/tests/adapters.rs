mod common;

use coopadapt_core::adapters::{
    cia_confidence_min, lsa_pool, lsa_select, CiaConfig, DomainAdapters, LsaConfig, LsaInput,
};
use coopadapt_core::nn::{Graph, ParamStore, Tensor};
use coopadapt_core::sample::{AgentType, Domain};
use coopadapt_core::training::step::{sample_graph, Reversal, SampleTerms};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::from_vec(shape, v.to_vec()).unwrap()
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Adapters over single-channel maps with width-1 hidden layers, so weights can be set by hand.
fn unit_adapters(h: usize, w: usize, use_conf: bool) -> (ParamStore, DomainAdapters) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let lsa = LsaConfig {
        hidden: 1,
        ..LsaConfig::default()
    };
    let cia = CiaConfig {
        hidden: 1,
        use_conf,
        ..CiaConfig::default()
    };
    let a = DomainAdapters::new(&mut store, lsa, cia, 1, h, w, &mut rng).unwrap();
    (store, a)
}

fn set(store: &mut ParamStore, name: &str, v: &[f64]) {
    let id = store.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let p = store.get_mut(id);
    assert_eq!(p.len(), v.len(), "{name}");
    p.data_mut().copy_from_slice(v);
}

/// Discriminator computing `logit = pooled - 5` for non-negative pooled features.
fn shifted_identity_disc(store: &mut ParamStore) {
    for i in 0..3 {
        set(store, &format!("adapters.lsa.disc.fc{i}.weight"), &[1.0]);
        set(store, &format!("adapters.lsa.disc.fc{i}.bias"), &[if i == 2 { -5.0 } else { 0.0 }]);
    }
}

#[test]
fn selection_examples() {
    let mut g = Graph::new();
    let f = g.input(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let m = g.input(t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]));
    let out = lsa_select(&mut g, f, m).unwrap();
    assert_eq!(g.value(out).data(), &[0.0, 2.0, 3.0, 0.0]);

    let ones = g.input(Tensor::full(&[2, 2], 1.0));
    let same = lsa_select(&mut g, f, ones).unwrap();
    assert_eq!(g.value(same).data(), g.value(f).data());

    let zeros = g.input(Tensor::zeros(&[2, 2]));
    let z = lsa_select(&mut g, f, zeros).unwrap();
    assert!(g.value(z).data().iter().all(|&v| v == 0.0));

    let bad = g.input(Tensor::zeros(&[3, 2]));
    assert!(lsa_select(&mut g, f, bad).is_err());
}

#[test]
fn pooling_examples() {
    let mut g = Graph::new();
    let ones = g.input(Tensor::full(&[1, 2, 2], 1.0));
    let p = lsa_pool(&mut g, ones).unwrap();
    assert_eq!(g.value(p).data(), &[1.0]);

    let f = g.input(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let p = lsa_pool(&mut g, f).unwrap();
    assert_eq!(g.value(p).data(), &[2.5]);

    let m = g.input(t(&[2, 2], &[0.0, 0.0, 0.0, 4.0]));
    let s = lsa_select(&mut g, f, m).unwrap();
    let p = lsa_pool(&mut g, s).unwrap();
    assert_eq!(g.value(p).data(), &[4.0]);
}

#[test]
fn sim_loss_at_chance_is_ln2() {
    let (mut store, a) = unit_adapters(1, 1, true);
    set(&mut store, "adapters.lsa.disc.fc2.weight", &[0.0]);
    set(&mut store, "adapters.lsa.disc.fc2.bias", &[0.0]);
    let mut g = Graph::new();
    let batch: Vec<LsaInput> = [(0.3, Domain::Source), (-1.2, Domain::Target), (2.0, Domain::Target)]
        .iter()
        .map(|&(v, d)| LsaInput {
            features: g.input(t(&[1, 1, 1], &[v])),
            domain: d,
        })
        .collect();
    let l = a.lsa_loss::<ChaCha8Rng>(&mut g, &store, &batch, -0.05, None).unwrap();
    assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn sim_loss_two_sample_example() {
    let (mut store, a) = unit_adapters(1, 1, true);
    shifted_identity_disc(&mut store);
    let mut g = Graph::new();
    let batch = vec![
        LsaInput {
            features: g.input(t(&[1, 1, 1], &[logit(0.8) + 5.0])),
            domain: Domain::Target,
        },
        LsaInput {
            features: g.input(t(&[1, 1, 1], &[logit(0.3) + 5.0])),
            domain: Domain::Source,
        },
    ];
    let l = a.lsa_loss::<ChaCha8Rng>(&mut g, &store, &batch, -0.05, None).unwrap();
    let expected = -0.5 * (0.8f64.ln() + 0.7f64.ln());
    assert!((g.value(l).item() - expected).abs() < 1e-9);
    assert!((g.value(l).item() - 0.2899).abs() < 1e-4);
}

#[test]
fn sim_loss_vanishes_for_confident_correct_predictions() {
    let (mut store, a) = unit_adapters(1, 1, true);
    shifted_identity_disc(&mut store);
    let mut g = Graph::new();
    let batch = vec![
        LsaInput {
            features: g.input(t(&[1, 1, 1], &[45.0])),
            domain: Domain::Target,
        },
        LsaInput {
            features: g.input(t(&[1, 1, 1], &[0.0])),
            domain: Domain::Source,
        },
    ];
    let l = a.lsa_loss::<ChaCha8Rng>(&mut g, &store, &batch, -0.05, None).unwrap();
    assert!(g.value(l).item() < 1e-2);
    assert!(a.lsa_loss::<ChaCha8Rng>(&mut g, &store, &[], -0.05, None).is_err());
}

#[test]
fn confidence_min_examples() {
    let a = t(&[1, 2], &[0.9, 0.1]);
    let b = t(&[1, 2], &[0.2, 0.8]);
    assert_eq!(cia_confidence_min(&[a.clone(), b]).unwrap().data(), &[0.2, 0.1]);
    assert_eq!(cia_confidence_min(std::slice::from_ref(&a)).unwrap(), a);
    assert!(cia_confidence_min(&[a, t(&[2, 1], &[0.0, 0.0])]).is_err());
    assert!(cia_confidence_min(&[]).is_err());
}

/// Agent discriminator whose class-0 probability is `sigmoid(x)` for `x >= 0`.
fn sigmoid_agent_disc(store: &mut ParamStore) {
    for i in 0..2 {
        set(store, &format!("adapters.cia.disc.conv{i}.weight"), &[1.0]);
        set(store, &format!("adapters.cia.disc.conv{i}.bias"), &[0.0]);
    }
    set(store, "adapters.cia.disc.conv2.weight", &[0.0, -1.0]);
    set(store, "adapters.cia.disc.conv2.bias", &[0.0, 0.0]);
}

#[test]
fn agent_loss_examples() {
    let (mut store, a) = unit_adapters(1, 2, true);
    sigmoid_agent_disc(&mut store);
    let mut g = Graph::new();
    let f = g.input(t(&[1, 1, 2], &[logit(0.9), 0.0]));
    let conf = t(&[1, 2], &[1.0, 0.2]);
    let l = a
        .cia_loss(&mut g, &store, &[(vec![(f, AgentType::Vehicle)], conf)], -0.1)
        .unwrap();
    let expected = -0.9f64.ln() - 0.2 * 0.5f64.ln();
    assert!((g.value(l).item() - expected).abs() < 1e-9);
    assert!((g.value(l).item() - 0.2440).abs() < 1e-4);

    let zero = Tensor::zeros(&[1, 2]);
    let l0 = a
        .cia_loss(&mut g, &store, &[(vec![(f, AgentType::Infrastructure)], zero)], -0.1)
        .unwrap();
    assert_eq!(g.value(l0).item(), 0.0);
    assert!(a.cia_loss(&mut g, &store, &[], -0.1).is_err());
}

#[test]
fn agent_loss_uniform_logits_is_ln2() {
    let (mut store, a) = unit_adapters(1, 1, true);
    sigmoid_agent_disc(&mut store);
    set(&mut store, "adapters.cia.disc.conv2.weight", &[0.0, 0.0]);
    let mut g = Graph::new();
    let f = g.input(t(&[1, 1, 1], &[0.7]));
    let l = a
        .cia_loss(&mut g, &store, &[(vec![(f, AgentType::Vehicle)], Tensor::full(&[1, 1], 1.0))], -0.1)
        .unwrap();
    assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn agent_loss_normalizes_by_agents_and_samples() {
    let (mut store, a) = unit_adapters(1, 2, true);
    sigmoid_agent_disc(&mut store);
    let mut g = Graph::new();
    let conf = t(&[1, 2], &[1.0, 0.2]);
    let f1 = g.input(t(&[1, 1, 2], &[logit(0.9), 0.0]));
    let f2 = g.input(t(&[1, 1, 2], &[1.0, 2.0]));
    let f3 = g.input(t(&[1, 1, 2], &[0.5, 0.0]));
    let p = |x: f64| 1.0 / (1.0 + (-x).exp());
    // agent label 1 (infrastructure) has probability 1 - sigmoid(x)
    let ce = |x: f64, label: usize| if label == 0 { -p(x).ln() } else { -(1.0 - p(x)).ln() };
    let s1 = (ce(logit(0.9), 0) + 0.2 * ce(0.0, 0) + ce(1.0, 1) + 0.2 * ce(2.0, 1)) / 2.0;
    let s2 = ce(0.5, 1) + 0.2 * ce(0.0, 1);
    let l = a
        .cia_loss(
            &mut g,
            &store,
            &[
                (vec![(f1, AgentType::Vehicle), (f2, AgentType::Infrastructure)], conf.clone()),
                (vec![(f3, AgentType::Infrastructure)], conf),
            ],
            -0.1,
        )
        .unwrap();
    assert!((g.value(l).item() - (s1 + s2) / 2.0).abs() < 1e-12);
}

#[test]
fn use_conf_off_weights_every_cell_by_one() {
    let (mut s_on, a_on) = unit_adapters(1, 2, true);
    let (mut s_off, a_off) = unit_adapters(1, 2, false);
    sigmoid_agent_disc(&mut s_on);
    sigmoid_agent_disc(&mut s_off);
    let mut g = Graph::new();
    let f = g.input(t(&[1, 1, 2], &[0.4, 1.3]));
    let agents = vec![(f, AgentType::Vehicle)];
    let off = a_off.cia_loss(&mut g, &s_off, &[(agents.clone(), t(&[1, 2], &[0.3, 0.0]))], -0.1).unwrap();
    let ones = a_on.cia_loss(&mut g, &s_on, &[(agents, Tensor::full(&[1, 2], 1.0))], -0.1).unwrap();
    assert_eq!(g.value(off).item(), g.value(ones).item());
}

#[test]
fn zero_confidence_cells_pass_no_gradient() {
    let model = common::tiny_model(3);
    let a = model.adapters.as_ref().unwrap();
    let mut g = Graph::new();
    let c = model.encoded_channels();
    let data: Vec<f64> = (0..c * 16).map(|i| ((i * 37) % 11) as f64 / 5.0 - 1.0).collect();
    let f = g.input(t(&[c, 4, 4], &data));
    let mut conf = vec![0.0; 16];
    for cell in [1, 6, 11] {
        conf[cell] = 0.7;
    }
    let l = a
        .cia_loss(&mut g, &model.store, &[(vec![(f, AgentType::Vehicle)], t(&[4, 4], &conf))], -0.1)
        .unwrap();
    let grads = g.backward(l).unwrap();
    let gf = grads.wrt(f).unwrap();
    for ch in 0..c {
        for cell in 0..16 {
            let v = gf.data()[ch * 16 + cell];
            if conf[cell] == 0.0 {
                assert_eq!(v, 0.0, "channel {ch} cell {cell}");
            }
        }
    }
    assert!(gf.data().iter().any(|&v| v != 0.0));

    // all-zero confidence: no gradient at all, to the features or the discriminator
    let mut g = Graph::new();
    let f = g.input(t(&[c, 4, 4], &data));
    let l = a
        .cia_loss(&mut g, &model.store, &[(vec![(f, AgentType::Vehicle)], Tensor::zeros(&[4, 4]))], -0.1)
        .unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.wrt(f).unwrap().data().iter().all(|&v| v == 0.0));
    let mut pg = coopadapt_core::nn::Grads::for_store(&model.store);
    grads.accumulate_params(&g, &mut pg, 1.0);
    for (id, name, _) in model.store.iter() {
        if let Some(gr) = pg.get(id) {
            assert!(gr.data().iter().all(|&v| v == 0.0), "{name}");
        }
    }
}

#[test]
fn sim_gradient_ignores_annotation_content() {
    let model = common::tiny_model(5);
    let s = common::tiny_sample(9, Domain::Target);
    let mut other = s.clone();
    other.boxes = Some(vec![]);
    let terms = SampleTerms {
        lsa: Some(1.0),
        ..Default::default()
    };
    let rev = Reversal { lsa: -0.05, cia: -0.1 };
    let grads = |s| {
        let sg = sample_graph(&model, s, terms, rev, None, None).unwrap();
        let mut pg = coopadapt_core::nn::Grads::for_store(&model.store);
        coopadapt_core::training::step::accumulate(&sg, &mut pg).unwrap();
        model.store.ids().map(|id| pg.get_or_zeros(id, &model.store)).collect::<Vec<_>>()
    };
    assert_eq!(grads(&s), grads(&other));
}

#[test]
fn losses_are_invariant_to_batch_order() {
    let model = common::tiny_model(2);
    let a = model.adapters.as_ref().unwrap();
    let c = model.encoded_channels();
    let maps: Vec<Tensor> = (0..3)
        .map(|k| t(&[c, 4, 4], &(0..c * 16).map(|i| ((i * 7 + k * 13) % 9) as f64 / 4.0).collect::<Vec<_>>()))
        .collect();
    let domains = [Domain::Source, Domain::Target, Domain::Target];
    let eval = |order: &[usize]| {
        let mut g = Graph::new();
        let batch: Vec<LsaInput> = order
            .iter()
            .map(|&i| LsaInput {
                features: g.input(maps[i].clone()),
                domain: domains[i],
            })
            .collect();
        let l = a.lsa_loss::<ChaCha8Rng>(&mut g, &model.store, &batch, -0.05, None).unwrap();
        let samples: Vec<_> = order
            .iter()
            .map(|&i| (vec![(g.input(maps[i].clone()), AgentType::Vehicle)], Tensor::full(&[4, 4], 0.5)))
            .collect();
        let la = a.cia_loss(&mut g, &model.store, &samples, -0.1).unwrap();
        (g.value(l).item(), g.value(la).item())
    };
    let (l1, a1) = eval(&[0, 1, 2]);
    let (l2, a2) = eval(&[2, 0, 1]);
    assert!((l1 - l2).abs() < 1e-12 && (a1 - a2).abs() < 1e-12);
}

proptest! {
    #[test]
    fn ones_map_pooling_is_channel_mean(data in prop::collection::vec(-10.0..10.0f64, 2 * 3 * 4)) {
        let mut g = Graph::new();
        let f = g.input(t(&[2, 3, 4], &data));
        let m = g.input(Tensor::full(&[3, 4], 1.0));
        let s = lsa_select(&mut g, f, m).unwrap();
        let p = lsa_pool(&mut g, s).unwrap();
        for c in 0..2 {
            let mean = data[c * 12..(c + 1) * 12].iter().sum::<f64>() / 12.0;
            prop_assert!((g.value(p).data()[c] - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn confidence_min_is_dominated(maps in prop::collection::vec(prop::collection::vec(0.0..1.0f64, 6), 1..5)) {
        let ts: Vec<Tensor> = maps.iter().map(|m| t(&[2, 3], m)).collect();
        let out = cia_confidence_min(&ts).unwrap();
        for m in &ts {
            for (o, v) in out.data().iter().zip(m.data()) {
                prop_assert!(o <= v);
            }
        }
        for (u, o) in out.data().iter().enumerate() {
            prop_assert!(ts.iter().any(|m| m.data()[u] == *o));
        }
    }
}
