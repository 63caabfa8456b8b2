use rand::Rng;

use super::*;
use crate::autodiff::{backward, Graph};
use crate::seeding::rng_from_seed;

fn small_cfg(n: usize, m: usize) -> RimConfig {
    RimConfig {
        n_modules: n,
        n_active: m,
        module_size: 3,
        input_dim: 4,
        sel_key_dim: 5,
        sel_value_dim: 6,
        com_key_dim: 4,
    }
}

fn layer_fixture(
    n: usize,
    m: usize,
    seed: u64,
) -> (ParamStore<f64>, RimLayer, LayerState<f64>, Tensor<f64>) {
    let mut rng = rng_from_seed(seed);
    let mut store = ParamStore::new();
    let layer = RimLayer::new(&mut store, "rim", small_cfg(n, m), None, &mut rng).unwrap();
    let state = LayerState::zeros(n, 3);
    let input: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (store, layer, state, Tensor::from_vec(vec![4], input))
}

fn randomize_state(state: &mut LayerState<f64>, rng: &mut rand_chacha::ChaCha8Rng) {
    for h in &mut state.hidden {
        *h = Tensor::from_vec(
            vec![3],
            (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
    }
    for c in &mut state.cell {
        *c = Tensor::from_vec(
            vec![3],
            (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
    }
}

#[test]
fn full_activation_when_m_equals_n() {
    let (store, layer, mut state, input) = layer_fixture(4, 4, 1);
    let mut rng = rng_from_seed(2);
    randomize_state(&mut state, &mut rng);
    let vars = store.constants();
    let sel = layer.select_active(&vars, &state, &[&input], None).unwrap();
    assert_eq!(sel.active, vec![0, 1, 2, 3]);
}

#[test]
fn equal_scores_break_ties_by_ascending_index() {
    // zero hidden states give every module the identical query, hence
    // exactly equal selection scores
    let (store, layer, state, input) = layer_fixture(5, 2, 3);
    let vars = store.constants();
    let sel = layer.select_active(&vars, &state, &[&input], None).unwrap();
    let first = sel.scores[0];
    assert!(sel.scores.iter().all(|&s| s == first));
    assert_eq!(sel.active, vec![0, 1]);
}

#[test]
fn crafted_queries_select_the_aligned_modules() {
    // n=8, m=4; module hidden states are set so that queries of modules
    // {1,3,5,7} align with the input key and the rest anti-align.
    let cfg = RimConfig {
        n_modules: 8,
        n_active: 4,
        module_size: 2,
        input_dim: 1,
        sel_key_dim: 2,
        sel_value_dim: 2,
        com_key_dim: 2,
    };
    let mut rng = rng_from_seed(4);
    let mut store: ParamStore<f64> = ParamStore::new();
    let layer = RimLayer::new(&mut store, "rim", cfg, None, &mut rng).unwrap();

    // query projection = identity, input key projection sends 1.0 -> [1, 0]
    let qw = layer.query_sel.weight;
    store.data_mut(qw).copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    store.data_mut(layer.query_sel.bias).fill(0.0);
    store
        .data_mut(layer.key_bottom.weight)
        .copy_from_slice(&[1.0, 0.0]);
    store.data_mut(layer.key_bottom.bias).fill(0.0);

    let mut state = LayerState::zeros(8, 2);
    for k in 0..8 {
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        state.hidden[k] = Tensor::from_vec(vec![2], vec![sign, 0.0]);
    }
    let input = Tensor::from_vec(vec![1], vec![1.0]);
    let vars = store.constants();
    let sel = layer.select_active(&vars, &state, &[&input], None).unwrap();
    assert_eq!(sel.active, vec![1, 3, 5, 7]);

    // cross-check the selection masses against a direct scalar oracle:
    // rows are {null=0, key=[1,0]}, query of module k is [sign, 0]
    for k in 0..8 {
        let sign: f64 = if k % 2 == 1 { 1.0 } else { -1.0 };
        let logit = sign / (2.0f64).sqrt();
        let expect = logit.exp() / (logit.exp() + 1.0);
        assert!((sel.scores[k] - expect).abs() < 1e-12);
    }
}

#[test]
fn empty_active_set_leaves_state_bitwise_unchanged() {
    let (store, layer, mut state, input) = layer_fixture(3, 1, 5);
    let mut rng = rng_from_seed(6);
    randomize_state(&mut state, &mut rng);
    let vars = store.constants();
    let sel = layer.select_active(&vars, &state, &[&input], None).unwrap();
    let empty = Selection {
        active: vec![],
        attended: sel.attended,
        scores: sel.scores,
    };
    let out = layer.independent_update(&vars, &state, &empty);
    for k in 0..3 {
        assert_eq!(out.hidden[k].data(), state.hidden[k].data());
        assert_eq!(out.cell[k].data(), state.cell[k].data());
    }
    // communication with no active modules is also a no-op
    let out2 = layer.communicate(&vars, &out);
    for k in 0..3 {
        assert_eq!(out2.hidden[k].data(), out.hidden[k].data());
    }
}

#[test]
fn single_active_module_matches_standalone_cell_and_leaves_the_other() {
    let (store, layer, mut state, input) = layer_fixture(2, 1, 7);
    let mut rng = rng_from_seed(8);
    randomize_state(&mut state, &mut rng);
    let vars = store.constants();

    let sel = layer.select_active(&vars, &state, &[&input], None).unwrap();
    let forced = Selection {
        active: vec![0],
        attended: sel.attended.clone(),
        scores: sel.scores.clone(),
    };
    let out = layer.independent_update(&vars, &state, &forced);

    // module 1 untouched
    assert_eq!(out.hidden[1].data(), state.hidden[1].data());
    assert_eq!(out.cell[1].data(), state.cell[1].data());

    // module 0 equals a standalone cell step on the same attended row
    let (h, c) = layer.lstm[0].step(
        &vars,
        &sel.attended.row(0),
        &state.hidden[0],
        &state.cell[0],
    );
    assert_eq!(out.hidden[0].data(), h.data());
    assert_eq!(out.cell[0].data(), c.data());
}

#[test]
fn carried_state_survives_consecutive_inactive_steps() {
    let (store, layer, mut state, input) = layer_fixture(2, 1, 9);
    let mut rng = rng_from_seed(10);
    randomize_state(&mut state, &mut rng);
    let initial_h = state.hidden[1].data().to_vec();
    let initial_c = state.cell[1].data().to_vec();
    let vars = store.constants();

    for _ in 0..2 {
        let sel = layer.select_active(&vars, &state, &[&input], None).unwrap();
        let forced = Selection {
            active: vec![0],
            attended: sel.attended,
            scores: sel.scores,
        };
        state = layer.independent_update(&vars, &state, &forced);
        state = layer.communicate(&vars, &state);
    }
    assert_eq!(state.hidden[1].data(), initial_h.as_slice());
    assert_eq!(state.cell[1].data(), initial_c.as_slice());
}

#[test]
fn zero_value_projection_makes_communication_a_no_op() {
    let (mut store, layer, mut state, input) = layer_fixture(3, 2, 11);
    let mut rng = rng_from_seed(12);
    randomize_state(&mut state, &mut rng);
    store.data_mut(layer.value_com.weight).fill(0.0);
    let vars = store.constants();

    let after = layer.step(&vars, &state, &[&input], None).unwrap();
    let sel = layer.select_active(&vars, &state, &[&input], None).unwrap();
    let updated = layer.independent_update(&vars, &state, &sel);
    for k in 0..3 {
        assert_eq!(after.hidden[k].data(), updated.hidden[k].data());
    }
}

#[test]
fn single_module_communicates_with_itself() {
    let (store, layer, mut state, input) = layer_fixture(1, 1, 13);
    let mut rng = rng_from_seed(14);
    randomize_state(&mut state, &mut rng);
    let vars = store.constants();

    let sel = layer.select_active(&vars, &state, &[&input], None).unwrap();
    let updated = layer.independent_update(&vars, &state, &sel);
    let out = layer.communicate(&vars, &updated);

    // with one module the score is 1, so h = h_bar + V_com(h_bar)
    let v = layer.value_com.forward(&vars, &updated.hidden[0]);
    for ((got, base), res) in out.hidden[0]
        .data()
        .iter()
        .zip(updated.hidden[0].data())
        .zip(v.data())
    {
        assert!((got - (base + res)).abs() < 1e-12);
    }
}

#[test]
fn communication_matches_attention_scalar_oracle() {
    let (store, layer, mut state, input) = layer_fixture(3, 2, 15);
    let mut rng = rng_from_seed(16);
    randomize_state(&mut state, &mut rng);
    let vars = store.constants();

    let sel = layer.select_active(&vars, &state, &[&input], None).unwrap();
    let updated = layer.independent_update(&vars, &state, &sel);
    let out = layer.communicate(&vars, &updated);

    // scalar-loop oracle over the communication pass
    let lin = |l: &Linear, x: &[f64]| -> Vec<f64> {
        let w = store.data(l.weight);
        let b = store.data(l.bias);
        (0..l.out_dim)
            .map(|i| {
                let mut acc = b[i];
                for j in 0..l.in_dim {
                    acc += w[i * l.in_dim + j] * x[j];
                }
                acc
            })
            .collect()
    };
    let keys: Vec<Vec<f64>> = (0..3)
        .map(|k| lin(&layer.key_com, updated.hidden[k].data()))
        .collect();
    let vals: Vec<Vec<f64>> = (0..3)
        .map(|k| lin(&layer.value_com, updated.hidden[k].data()))
        .collect();
    for &k in &updated.active {
        let q = lin(&layer.query_com, updated.hidden[k].data());
        let logits: Vec<f64> = keys
            .iter()
            .map(|key| {
                q.iter().zip(key).map(|(a, b)| a * b).sum::<f64>() / (q.len() as f64).sqrt()
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|x| (x - max).exp()).sum();
        let mut mix = vec![0.0; 3];
        for (j, val) in vals.iter().enumerate() {
            let p = (logits[j] - max).exp() / denom;
            for (m, v) in mix.iter_mut().zip(val) {
                *m += p * v;
            }
        }
        for i in 0..3 {
            let expect = updated.hidden[k].data()[i] + mix[i];
            assert!((out.hidden[k].data()[i] - expect).abs() < 1e-10);
        }
    }
}

#[test]
fn thousand_random_steps_keep_exact_sparsity_and_carry_inactive_bits() {
    let (store, layer, mut state, _) = layer_fixture(4, 2, 17);
    let mut rng = rng_from_seed(18);
    randomize_state(&mut state, &mut rng);
    let vars = store.constants();

    for _ in 0..1000 {
        let input = Tensor::from_vec(
            vec![4],
            (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let next = layer.step(&vars, &state, &[&input], None).unwrap();
        assert_eq!(next.active.len(), 2);
        assert!(next.active.windows(2).all(|w| w[0] < w[1]));
        assert!(next.active.iter().all(|&k| k < 4));
        for k in 0..4 {
            if !next.active.contains(&k) {
                assert_eq!(next.hidden[k].data(), state.hidden[k].data());
                assert_eq!(next.cell[k].data(), state.cell[k].data());
            }
        }
        state = next;
    }
}

#[test]
fn selection_is_deterministic() {
    let (store, layer, mut state, input) = layer_fixture(6, 3, 19);
    let mut rng = rng_from_seed(20);
    randomize_state(&mut state, &mut rng);
    let vars = store.constants();
    let a = layer.select_active(&vars, &state, &[&input], None).unwrap();
    let b = layer.select_active(&vars, &state, &[&input], None).unwrap();
    assert_eq!(a.active, b.active);
    assert_eq!(a.scores, b.scores);
}

#[test]
fn inactive_modules_get_exactly_zero_lstm_gradients() {
    let (store, layer, mut state, input) = layer_fixture(4, 2, 21);
    let mut rng = rng_from_seed(22);
    randomize_state(&mut state, &mut rng);

    let graph = Graph::new();
    let vars = store.attach(&graph);
    let next = layer.step(&vars, &state, &[&input], None).unwrap();
    let refs: Vec<&Tensor<f64>> = next.hidden.iter().collect();
    let loss = Tensor::concat(&refs).mul(&Tensor::concat(&refs)).mean();
    let grads = backward(&loss).unwrap();

    let mut saw_nonzero_active = false;
    for k in 0..4 {
        let active = next.active.contains(&k);
        for id in layer.module_params(k) {
            let g = grads.get_or_zeros(vars.get(id));
            if active {
                saw_nonzero_active |= g.iter().any(|v| *v != 0.0);
            } else {
                assert!(
                    g.iter().all(|v| *v == 0.0),
                    "inactive module {k} received gradient"
                );
            }
        }
    }
    assert!(saw_nonzero_active, "active modules should receive gradient");

    // shared projections still learn
    let sel_q = grads.get_or_zeros(vars.get(layer.query_sel.weight));
    assert!(sel_q.iter().any(|v| *v != 0.0));
}
