//! Neural building blocks: linear maps, 2-D convolution, an LSTM cell,
//! and the key-value attention primitive.
//!
//! Initialization is uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) for all
//! weights with zero biases; the LSTM forget gate bias starts at +1.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, Vars};
use crate::scalar::Scalar;

// ── linear ───────────────────────────────────────────────────────────

pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add_uniform(
            format!("{name}.w"),
            vec![out_dim, in_dim],
            in_dim,
            rng,
        );
        let bias = store.add_zeros(format!("{name}.b"), vec![out_dim]);
        Linear {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    pub fn forward<S: Scalar>(&self, vars: &Vars<S>, x: &Tensor<S>) -> Tensor<S> {
        vars.get(self.weight)
            .matvec(x)
            .expect("linear: input dimension mismatch")
            .add(vars.get(self.bias))
    }

    /// Applies the map to every row of `[rows × in_dim]`.
    pub fn forward_rows<S: Scalar>(&self, vars: &Vars<S>, x: &Tensor<S>) -> Tensor<S> {
        x.matmul_nt(vars.get(self.weight))
            .expect("linear: row width mismatch")
            .add_row(vars.get(self.bias))
    }
}

// ── 2-D convolution ──────────────────────────────────────────────────

pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv2d {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add_uniform(
            format!("{name}.w"),
            vec![out_channels, in_channels, kernel, kernel],
            fan_in,
            rng,
        );
        let bias = store.add_zeros(format!("{name}.b"), vec![out_channels]);
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight,
            bias,
        }
    }

    pub fn forward<S: Scalar>(&self, vars: &Vars<S>, img: &Tensor<S>) -> Result<Tensor<S>> {
        img.conv2d(
            vars.get(self.weight),
            Some(vars.get(self.bias)),
            self.stride,
        )
    }
}

// ── LSTM cell ────────────────────────────────────────────────────────

/// Gate weights fused as one `[4H × (I+H)]` matrix over `[input ⊕ hidden]`,
/// gate order input/forget/output/candidate.
pub struct LstmCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LstmCell {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = input_dim + hidden_dim;
        let weight = store.add_uniform(
            format!("{name}.w"),
            vec![4 * hidden_dim, fan_in],
            fan_in,
            rng,
        );
        let bias = store.add_zeros(format!("{name}.b"), vec![4 * hidden_dim]);
        // forget-gate bias starts open
        for v in &mut store.data_mut(bias)[hidden_dim..2 * hidden_dim] {
            *v = S::one();
        }
        LstmCell {
            input_dim,
            hidden_dim,
            weight,
            bias,
        }
    }

    pub fn step<S: Scalar>(
        &self,
        vars: &Vars<S>,
        input: &Tensor<S>,
        hidden: &Tensor<S>,
        cell: &Tensor<S>,
    ) -> (Tensor<S>, Tensor<S>) {
        let h = self.hidden_dim;
        let z = Tensor::concat(&[input, hidden]);
        let gates = vars
            .get(self.weight)
            .matvec(&z)
            .expect("lstm: input width mismatch")
            .add(vars.get(self.bias));
        let i = gates.slice(0, h).sigmoid();
        let f = gates.slice(h, h).sigmoid();
        let o = gates.slice(2 * h, h).sigmoid();
        let g = gates.slice(3 * h, h).tanh();
        let cell_next = f.mul(cell).add(&i.mul(&g));
        let hidden_next = o.mul(&cell_next.tanh());
        (hidden_next, cell_next)
    }
}

// ── key-value attention ──────────────────────────────────────────────

/// Scaled dot-product attention. Returns the score matrix (rows sum to
/// one) and the score-weighted mix of the value rows; both stay on the
/// tape of their operands.
pub fn attention<S: Scalar>(
    queries: &Tensor<S>,
    keys: &Tensor<S>,
    values: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let d = *queries
        .shape()
        .last()
        .expect("attention: queries must be 2-D");
    if d == 0 || keys.shape().last() != Some(&d) {
        return Err(Error::Shape {
            op: "attention",
            lhs: queries.shape().to_vec(),
            rhs: keys.shape().to_vec(),
        });
    }
    if keys.shape()[0] != values.shape()[0] || keys.shape()[0] == 0 {
        return Err(Error::Shape {
            op: "attention",
            lhs: keys.shape().to_vec(),
            rhs: values.shape().to_vec(),
        });
    }
    let scale = S::from_f64(1.0 / (d as f64).sqrt());
    let scores = queries.matmul_nt(keys)?.scale(scale).softmax(1);
    let mixed = scores.matmul(values)?;
    Ok((scores, mixed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{backward, Graph};
    use crate::gradcheck;
    use crate::seeding::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec())
    }

    // Brute-force attention oracle: explicit exp/normalize/mix loops.
    fn attention_oracle(
        q: &[f64],
        k: &[f64],
        v: &[f64],
        nq: usize,
        nk: usize,
        d: usize,
        dv: usize,
    ) -> (Vec<f64>, Vec<f64>) {
        let mut scores = vec![0.0; nq * nk];
        for i in 0..nq {
            let mut logits = vec![0.0; nk];
            for j in 0..nk {
                let mut dot = 0.0;
                for l in 0..d {
                    dot += q[i * d + l] * k[j * d + l];
                }
                logits[j] = dot / (d as f64).sqrt();
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = logits.iter().map(|x| (x - max).exp()).sum();
            for j in 0..nk {
                scores[i * nk + j] = (logits[j] - max).exp() / denom;
            }
        }
        let mut out = vec![0.0; nq * dv];
        for i in 0..nq {
            for c in 0..dv {
                let mut acc = 0.0;
                for j in 0..nk {
                    acc += scores[i * nk + j] * v[j * dv + c];
                }
                out[i * dv + c] = acc;
            }
        }
        (scores, out)
    }

    #[test]
    fn attention_single_matching_key() {
        let q = t64(&[1, 2], &[1.0, -0.5]);
        let k = t64(&[1, 2], &[1.0, -0.5]);
        let v = t64(&[1, 1], &[7.0]);
        let (scores, out) = attention(&q, &k, &v).unwrap();
        assert_eq!(scores.data(), &[1.0]);
        assert_eq!(out.data(), &[7.0]);
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let q = t64(&[1, 2], &[0.3, 0.9]);
        let k = t64(&[2, 2], &[1.0, 2.0, 1.0, 2.0]);
        let v = t64(&[2, 2], &[4.0, 0.0, 0.0, 8.0]);
        let (scores, out) = attention(&q, &k, &v).unwrap();
        assert!((scores.data()[0] - 0.5).abs() < 1e-12);
        assert!((scores.data()[1] - 0.5).abs() < 1e-12);
        assert!((out.data()[0] - 2.0).abs() < 1e-12);
        assert!((out.data()[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn attention_matches_bruteforce_oracle() {
        let mut rng = rng_from_seed(21);
        let q: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let k: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let v: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let (scores, out) =
            attention(&t64(&[2, 3], &q), &t64(&[4, 3], &k), &t64(&[4, 2], &v)).unwrap();
        let (es, eo) = attention_oracle(&q, &k, &v, 2, 4, 3, 2);
        for (a, b) in scores.data().iter().zip(&es) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in out.data().iter().zip(&eo) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rejects_zero_width_keys() {
        let q = Tensor::<f64>::zeros(vec![1, 0]);
        let k = Tensor::<f64>::zeros(vec![2, 0]);
        let v = Tensor::<f64>::zeros(vec![2, 1]);
        assert!(matches!(attention(&q, &k, &v), Err(Error::Shape { .. })));
    }

    proptest! {
        // Score rows always form a distribution, and permuting the
        // key/value rows together leaves the mix unchanged.
        #[test]
        fn attention_rows_sum_to_one_and_permutation_equivariant(seed in 0u64..500) {
            let mut rng = rng_from_seed(seed);
            let nq = rng.gen_range(1..4usize);
            let nk = rng.gen_range(1..5usize);
            let d = rng.gen_range(1..4usize);
            let dv = rng.gen_range(1..4usize);
            let q: Vec<f64> = (0..nq * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let k: Vec<f64> = (0..nk * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let v: Vec<f64> = (0..nk * dv).map(|_| rng.gen_range(-2.0..2.0)).collect();

            let (scores, out) =
                attention(&t64(&[nq, d], &q), &t64(&[nk, d], &k), &t64(&[nk, dv], &v)).unwrap();
            for r in 0..nq {
                let row = &scores.data()[r * nk..(r + 1) * nk];
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
            }

            // rotate the rows of K and V by one
            let mut kp = k[d..].to_vec();
            kp.extend_from_slice(&k[..d]);
            let mut vp = v[dv..].to_vec();
            vp.extend_from_slice(&v[..dv]);
            let (_, out_p) =
                attention(&t64(&[nq, d], &q), &t64(&[nk, d], &kp), &t64(&[nk, dv], &vp)).unwrap();
            for (a, b) in out.data().iter().zip(out_p.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lstm_zero_params_halve_the_cell() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = rng_from_seed(1);
        let cell = LstmCell::new(&mut store, "cell", 2, 3, &mut rng);
        // zero every parameter, including the forget bias
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.data_mut(id) {
                *v = 0.0;
            }
        }
        let vars = store.constants();
        let c0 = t64(&[3], &[0.4, -1.0, 2.0]);
        let x = t64(&[2], &[0.7, -0.7]);
        let h = Tensor::zeros(vec![3]);
        let (h1, c1) = cell.step(&vars, &x, &h, &c0);
        for (got, c) in c1.data().iter().zip(c0.data()) {
            assert!((got - 0.5 * c).abs() < 1e-15);
        }
        for (got, c) in h1.data().iter().zip(c0.data()) {
            assert!((got - 0.5 * (0.5 * c).tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn lstm_all_zero_everything_gives_zero_hidden() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = rng_from_seed(1);
        let cell = LstmCell::new(&mut store, "cell", 2, 3, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.data_mut(id) {
                *v = 0.0;
            }
        }
        let vars = store.constants();
        let (h1, c1) = cell.step(
            &vars,
            &Tensor::zeros(vec![2]),
            &Tensor::zeros(vec![3]),
            &Tensor::zeros(vec![3]),
        );
        assert!(h1.data().iter().all(|v| *v == 0.0));
        assert!(c1.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lstm_matches_scalar_gate_oracle() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = rng_from_seed(9);
        let cell = LstmCell::new(&mut store, "cell", 3, 2, &mut rng);
        let vars = store.constants();

        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (h1, c1) = cell.step(&vars, &t64(&[3], &x), &t64(&[2], &h), &t64(&[2], &c));

        // scalar-loop oracle over the gate equations
        let w = store.data(cell.weight);
        let b = store.data(cell.bias);
        let z: Vec<f64> = x.iter().chain(h.iter()).cloned().collect();
        let sigma = |v: f64| 1.0 / (1.0 + (-v).exp());
        for j in 0..2 {
            let pre = |gate: usize| -> f64 {
                let row = (gate * 2 + j) * 5;
                let mut acc = b[gate * 2 + j];
                for l in 0..5 {
                    acc += w[row + l] * z[l];
                }
                acc
            };
            let i_g = sigma(pre(0));
            let f_g = sigma(pre(1));
            let o_g = sigma(pre(2));
            let g_g = pre(3).tanh();
            let c_new = f_g * c[j] + i_g * g_g;
            let h_new = o_g * c_new.tanh();
            assert!((c1.data()[j] - c_new).abs() < 1e-12);
            assert!((h1.data()[j] - h_new).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = rng_from_seed(2);
        let conv = Conv2d::new(&mut store, "c", 1, 1, 1, 1, &mut rng);
        store.data_mut(conv.weight)[0] = 1.0;
        let vars = store.constants();
        let img = t64(&[1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let out = conv.forward(&vars, &img).unwrap();
        assert_eq!(out.shape(), &[1, 3, 3]);
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn conv_ones_kernel_sums_the_window() {
        let w = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0; 4]);
        let img = Tensor::from_vec(vec![1, 2, 2], vec![1.0; 4]);
        let out = img.conv2d(&w, None, 1).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[4.0]);
    }

    #[test]
    fn conv_matches_quadruple_loop_oracle() {
        let mut rng = rng_from_seed(31);
        let img: Vec<f64> = (0..2 * 5 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..3 * 2 * 3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let out = t64(&[2, 5, 5], &img)
            .conv2d(&t64(&[3, 2, 3, 3], &w), Some(&t64(&[3], &b)), 2)
            .unwrap();
        assert_eq!(out.shape(), &[3, 2, 2]);

        // independent quadruple-loop oracle
        for oc in 0..3 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut acc = b[oc];
                    for ic in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iv = img[ic * 25 + (oy * 2 + ky) * 5 + (ox * 2 + kx)];
                                let wv = w[oc * 18 + ic * 9 + ky * 3 + kx];
                                acc += iv * wv;
                            }
                        }
                    }
                    let got = out.data()[oc * 4 + oy * 2 + ox];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_rejects_kernel_larger_than_input() {
        let img = Tensor::<f64>::zeros(vec![1, 2, 2]);
        let w = Tensor::<f64>::zeros(vec![1, 1, 3, 3]);
        assert!(matches!(img.conv2d(&w, None, 1), Err(Error::Shape { .. })));
    }

    #[test]
    fn nn_ops_pass_finite_difference_checks() {
        let mut rng = rng_from_seed(40);
        // conv + linear + lstm step composed into one scalar
        let img: Vec<f64> = (0..1 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cw: Vec<f64> = (0..2 * 1 * 2 * 2).map(|_| rng.gen_range(-0.7..0.7)).collect();
        let cb: Vec<f64> = (0..2).map(|_| rng.gen_range(-0.2..0.2)).collect();
        gradcheck::assert_gradients_close(
            &[
                (vec![1, 4, 4], img.clone()),
                (vec![2, 1, 2, 2], cw.clone()),
                (vec![2], cb.clone()),
            ],
            1e-4,
            |t| {
                let y = t[0].conv2d(&t[1], Some(&t[2]), 2).unwrap().relu();
                y.mul(&y).mean()
            },
        );

        let q: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        gradcheck::assert_gradients_close(
            &[(vec![2, 2], q), (vec![3, 2], k), (vec![3, 3], v)],
            1e-4,
            |t| {
                let (_, out) = attention(&t[0], &t[1], &t[2]).unwrap();
                out.mul(&out).mean()
            },
        );
    }

    #[test]
    fn lstm_step_passes_finite_difference_check() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = rng_from_seed(41);
        let cell = LstmCell::new(&mut store, "cell", 2, 3, &mut rng);
        let w0 = store.data(cell.weight).to_vec();
        let b0 = store.data(cell.bias).to_vec();
        let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        gradcheck::assert_gradients_close(
            &[
                (vec![12, 5], w0),
                (vec![12], b0),
                (vec![2], x),
                (vec![3], h),
                (vec![3], c),
            ],
            1e-4,
            |t| {
                // rebuild the gate math from raw tensors
                let z = Tensor::concat(&[&t[2], &t[3]]);
                let gates = t[0].matvec(&z).unwrap().add(&t[1]);
                let i = gates.slice(0, 3).sigmoid();
                let f = gates.slice(3, 3).sigmoid();
                let o = gates.slice(6, 3).sigmoid();
                let g = gates.slice(9, 3).tanh();
                let c1 = f.mul(&t[4]).add(&i.mul(&g));
                let h1 = o.mul(&c1.tanh());
                h1.mul(&h1).sum().add(&c1.mean())
            },
        );
    }

    #[test]
    fn backward_reaches_linear_params_through_rows() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = rng_from_seed(50);
        let lin = Linear::new(&mut store, "l", 3, 2, &mut rng);
        let graph = Graph::new();
        let vars = store.attach(&graph);
        let x = t64(&[4, 3], &(0..12).map(|i| i as f64 * 0.1).collect::<Vec<_>>());
        let loss = lin.forward_rows(&vars, &x).mean();
        let grads = backward(&loss).unwrap();
        assert!(grads.get(vars.get(lin.weight)).is_some());
        assert!(grads.get(vars.get(lin.bias)).is_some());
    }
}
