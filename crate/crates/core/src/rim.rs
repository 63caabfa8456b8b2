//! One layer of recurrent independent mechanisms.
//!
//! The layer holds `n` modules, each a private LSTM of `module_size`.
//! Per step a null-augmented input attention ranks the modules by how
//! much attention mass they put on the real input rows (the null row
//! means "no information"); the top `m` form the active set. Active
//! modules run their private LSTM on their own attention-mixed input,
//! then exchange information through a second attention pass whose
//! result is added residually. Inactive modules carry their state over
//! bitwise unchanged and contribute no tape nodes.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::{attention, Linear, LstmCell};
use crate::params::{ParamStore, Vars};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct RimConfig {
    pub n_modules: usize,
    pub n_active: usize,
    pub module_size: usize,
    /// Width of the bottom input source (the embedding for the first
    /// layer, the lower layer's module size above it).
    pub input_dim: usize,
    pub sel_key_dim: usize,
    pub sel_value_dim: usize,
    pub com_key_dim: usize,
}

impl RimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_modules >= 1
            && self.n_active >= 1
            && self.n_active <= self.n_modules
            && self.module_size >= 1
            && self.input_dim >= 1
            && self.sel_key_dim >= 1
            && self.sel_value_dim >= 1
            && self.com_key_dim >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid module layout: {self:?}")))
        }
    }
}

/// Hidden and cell vectors for all modules at one timestep, plus the
/// active set and the selection scores that produced it.
#[derive(Clone)]
pub struct LayerState<S: Scalar> {
    pub hidden: Vec<Tensor<S>>,
    pub cell: Vec<Tensor<S>>,
    /// Ascending module indices; exactly `n_active` after a step.
    pub active: Vec<usize>,
    /// Attention mass each module assigned to the real (non-null) rows.
    pub selection: Vec<f64>,
}

impl<S: Scalar> LayerState<S> {
    pub fn zeros(n_modules: usize, module_size: usize) -> Self {
        LayerState {
            hidden: (0..n_modules)
                .map(|_| Tensor::zeros(vec![module_size]))
                .collect(),
            cell: (0..n_modules)
                .map(|_| Tensor::zeros(vec![module_size]))
                .collect(),
            active: Vec::new(),
            selection: vec![0.0; n_modules],
        }
    }
}

/// Output of the selection pass.
pub struct Selection<S: Scalar> {
    pub active: Vec<usize>,
    /// `[n × sel_value_dim]`, one attention-mixed input row per module.
    pub attended: Tensor<S>,
    pub scores: Vec<f64>,
}

pub struct RimLayer {
    pub cfg: RimConfig,
    pub lstm: Vec<LstmCell>,
    pub query_sel: Linear,
    pub key_bottom: Linear,
    pub value_bottom: Linear,
    pub key_top: Option<Linear>,
    pub value_top: Option<Linear>,
    pub query_com: Linear,
    pub key_com: Linear,
    pub value_com: Linear,
}

impl RimLayer {
    /// `top_dim` is the module size of the layer above, when one exists.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        cfg: RimConfig,
        top_dim: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.module_size;
        let lstm = (0..cfg.n_modules)
            .map(|k| {
                LstmCell::new(
                    store,
                    &format!("{name}.module{k}.lstm"),
                    cfg.sel_value_dim,
                    s,
                    rng,
                )
            })
            .collect();
        let query_sel = Linear::new(store, &format!("{name}.sel.q"), s, cfg.sel_key_dim, rng);
        let key_bottom = Linear::new(
            store,
            &format!("{name}.sel.k_in"),
            cfg.input_dim,
            cfg.sel_key_dim,
            rng,
        );
        let value_bottom = Linear::new(
            store,
            &format!("{name}.sel.v_in"),
            cfg.input_dim,
            cfg.sel_value_dim,
            rng,
        );
        let (key_top, value_top) = match top_dim {
            Some(d) => (
                Some(Linear::new(
                    store,
                    &format!("{name}.sel.k_top"),
                    d,
                    cfg.sel_key_dim,
                    rng,
                )),
                Some(Linear::new(
                    store,
                    &format!("{name}.sel.v_top"),
                    d,
                    cfg.sel_value_dim,
                    rng,
                )),
            ),
            None => (None, None),
        };
        let query_com = Linear::new(store, &format!("{name}.com.q"), s, cfg.com_key_dim, rng);
        let key_com = Linear::new(store, &format!("{name}.com.k"), s, cfg.com_key_dim, rng);
        let value_com = Linear::new(store, &format!("{name}.com.v"), s, s, rng);
        Ok(RimLayer {
            cfg,
            lstm,
            query_sel,
            key_bottom,
            value_bottom,
            key_top,
            value_top,
            query_com,
            key_com,
            value_com,
        })
    }

    /// Null-augmented input attention. Each module queries from its own
    /// hidden state; key/value rows are a zero null row plus one row per
    /// bottom source vector and, when wired, per top source vector from
    /// the previous step. Modules are ranked by attention mass on the
    /// real rows (descending, ties by ascending index) and the top
    /// `n_active` win.
    pub fn select_active<S: Scalar>(
        &self,
        vars: &Vars<S>,
        state: &LayerState<S>,
        bottom: &[&Tensor<S>],
        top_prev: Option<&[&Tensor<S>]>,
    ) -> Result<Selection<S>> {
        let n = self.cfg.n_modules;
        assert!(!bottom.is_empty(), "selection needs at least one input row");

        let hidden_refs: Vec<&Tensor<S>> = state.hidden.iter().collect();
        let queries = self
            .query_sel
            .forward_rows(vars, &Tensor::stack_rows(&hidden_refs));

        let null_key = Tensor::zeros(vec![self.cfg.sel_key_dim]);
        let null_value = Tensor::zeros(vec![self.cfg.sel_value_dim]);
        let mut key_rows: Vec<Tensor<S>> = vec![null_key];
        let mut value_rows: Vec<Tensor<S>> = vec![null_value];
        for src in bottom {
            key_rows.push(self.key_bottom.forward(vars, src));
            value_rows.push(self.value_bottom.forward(vars, src));
        }
        if let Some(top) = top_prev {
            let (k_top, v_top) = (
                self.key_top.as_ref().expect("layer has no top-down wiring"),
                self.value_top.as_ref().expect("layer has no top-down wiring"),
            );
            for src in top {
                key_rows.push(k_top.forward(vars, src));
                value_rows.push(v_top.forward(vars, src));
            }
        }
        let keys = Tensor::stack_rows(&key_rows.iter().collect::<Vec<_>>());
        let values = Tensor::stack_rows(&value_rows.iter().collect::<Vec<_>>());

        let (scores, attended) = attention(&queries, &keys, &values)?;
        let rows = key_rows.len();
        let mass: Vec<f64> = (0..n)
            .map(|k| 1.0 - scores.data()[k * rows].as_f64())
            .collect();

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| mass[b].total_cmp(&mass[a]).then(a.cmp(&b)));
        let mut active: Vec<usize> = order[..self.cfg.n_active].to_vec();
        active.sort_unstable();

        Ok(Selection {
            active,
            attended,
            scores: mass,
        })
    }

    /// Independent dynamics: every active module advances its private
    /// LSTM on its own attended input; every other module's hidden and
    /// cell vectors are carried over untouched.
    pub fn independent_update<S: Scalar>(
        &self,
        vars: &Vars<S>,
        state: &LayerState<S>,
        selection: &Selection<S>,
    ) -> LayerState<S> {
        let mut hidden = state.hidden.clone();
        let mut cell = state.cell.clone();
        for &k in &selection.active {
            let input = selection.attended.row(k);
            let (h, c) = self.lstm[k].step(vars, &input, &state.hidden[k], &state.cell[k]);
            hidden[k] = h;
            cell[k] = c;
        }
        LayerState {
            hidden,
            cell,
            active: selection.active.clone(),
            selection: selection.scores.clone(),
        }
    }

    /// Communication bottleneck: active modules query, keys and values
    /// come from all modules, and the attention result is added
    /// residually to the active modules only.
    pub fn communicate<S: Scalar>(&self, vars: &Vars<S>, state: &LayerState<S>) -> LayerState<S> {
        if state.active.is_empty() {
            return state.clone();
        }
        let all_refs: Vec<&Tensor<S>> = state.hidden.iter().collect();
        let all_rows = Tensor::stack_rows(&all_refs);
        let keys = self.key_com.forward_rows(vars, &all_rows);
        let values = self.value_com.forward_rows(vars, &all_rows);

        let active_refs: Vec<&Tensor<S>> = state.active.iter().map(|&k| &state.hidden[k]).collect();
        let queries = self
            .query_com
            .forward_rows(vars, &Tensor::stack_rows(&active_refs));

        let (_, mixed) = attention(&queries, &keys, &values)
            .expect("communication attention dims are fixed by construction");

        let mut hidden = state.hidden.clone();
        for (j, &k) in state.active.iter().enumerate() {
            hidden[k] = hidden[k].add(&mixed.row(j));
        }
        LayerState {
            hidden,
            cell: state.cell.clone(),
            active: state.active.clone(),
            selection: state.selection.clone(),
        }
    }

    /// One full step: selection, independent dynamics, communication.
    pub fn step<S: Scalar>(
        &self,
        vars: &Vars<S>,
        state: &LayerState<S>,
        bottom: &[&Tensor<S>],
        top_prev: Option<&[&Tensor<S>]>,
    ) -> Result<LayerState<S>> {
        let selection = self.select_active(vars, state, bottom, top_prev)?;
        let updated = self.independent_update(vars, state, &selection);
        Ok(self.communicate(vars, &updated))
    }

    /// Ids of the private LSTM parameters of one module.
    pub fn module_params(&self, k: usize) -> [crate::params::ParamId; 2] {
        [self.lstm[k].weight, self.lstm[k].bias]
    }
}

#[cfg(test)]
mod tests;
