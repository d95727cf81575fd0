use super::affine::lookup;
use super::{NnError, ParamId, ParamInit, ParamSpec, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

/// LSTM cell with one fused gate matrix `W: [4h × (in+h)]` applied to `[x ; h]`.
///
/// Gate blocks are ordered input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_size: usize,
    pub hidden_size: usize,
}

/// Outgoing (`h`) and inner (`c`) state, each `[batch × h]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmState {
    pub h: NodeId,
    pub c: NodeId,
}

impl LstmState {
    pub fn zeros<T: Scalar>(g: &mut Graph<T>, batch: usize, hidden: usize) -> Self {
        Self {
            h: g.zeros(&[batch, hidden]),
            c: g.zeros(&[batch, hidden]),
        }
    }
}

impl LstmCell {
    pub fn specs(prefix: &str, input_size: usize, hidden_size: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec {
                name: format!("{prefix}.weight"),
                shape: vec![4 * hidden_size, input_size + hidden_size],
                init: ParamInit::Glorot {
                    fan_in: input_size + hidden_size,
                    fan_out: 4 * hidden_size,
                },
            },
            ParamSpec {
                name: format!("{prefix}.bias"),
                shape: vec![4 * hidden_size],
                init: ParamInit::ForgetBias { hidden: hidden_size },
            },
        ]
    }

    pub fn bind<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<Self, NnError> {
        let weight = lookup(store, &format!("{prefix}.weight"))?;
        let bias = lookup(store, &format!("{prefix}.bias"))?;
        let ws = store.get(weight).shape();
        let bs = store.get(bias).shape();
        if ws.len() != 2 || ws[0] % 4 != 0 || ws[0] == 0 || bs != [ws[0]] || ws[1] <= ws[0] / 4 {
            return Err(TensorError::Shape {
                op: "lstm bind",
                left: ws.to_vec(),
                right: bs.to_vec(),
            }
            .into());
        }
        let hidden_size = ws[0] / 4;
        Ok(Self {
            weight,
            bias,
            input_size: ws[1] - hidden_size,
            hidden_size,
        })
    }

    /// Prepends `extra` zero input columns to the gate matrix. With those columns at
    /// zero the widened cell computes exactly what the narrow one did on the old inputs.
    pub fn widen_input<T: Scalar>(&self, store: &mut ParamStore<T>, extra: usize) -> Result<Self, NnError> {
        let old = store.get(self.weight);
        let (rows, cols) = (old.shape()[0], old.shape()[1]);
        let mut data = Vec::with_capacity(rows * (cols + extra));
        for row in old.data().chunks(cols) {
            data.extend(std::iter::repeat_n(T::zero(), extra));
            data.extend_from_slice(row);
        }
        let widened = Tensor::new(&[rows, cols + extra], data)?;
        store.replace(self.weight, widened);
        Ok(Self {
            input_size: self.input_size + extra,
            ..self.clone()
        })
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// One recurrence step: `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`. Returns `(h', state')`.
pub fn lstm_step<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    cell: &LstmCell,
    x: NodeId,
    state: LstmState,
) -> Result<(NodeId, LstmState), TensorError> {
    let hs = cell.hidden_size;
    let xs = g.shape(x).to_vec();
    if xs.len() != 2 || xs[1] != cell.input_size || g.shape(state.h) != [xs[0], hs] || g.shape(state.c) != [xs[0], hs]
    {
        return Err(TensorError::Shape {
            op: "lstm_step",
            left: xs,
            right: vec![cell.input_size, hs],
        });
    }
    let w = g.param(ps, cell.weight);
    let b = g.param(ps, cell.bias);
    let joined = g.concat_last(&[x, state.h])?;
    let pre = g.matmul_t(joined, w)?;
    let gates = g.add_row(pre, b)?;
    let i_pre = g.slice(gates, 1, 0, hs)?;
    let f_pre = g.slice(gates, 1, hs, hs)?;
    let g_pre = g.slice(gates, 1, 2 * hs, hs)?;
    let o_pre = g.slice(gates, 1, 3 * hs, hs)?;
    let i = g.sigmoid(i_pre);
    let f = g.sigmoid(f_pre);
    let cand = g.tanh(g_pre);
    let o = g.sigmoid(o_pre);
    let keep = g.mul(f, state.c)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let squashed = g.tanh(c);
    let h = g.mul(o, squashed)?;
    Ok((h, LstmState { h, c }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Unrolled {
    pub outputs: Vec<NodeId>,
    /// State after each step, in order.
    pub states: Vec<LstmState>,
    pub final_state: LstmState,
}

/// Repeated [`lstm_step`] over `xs`, threading the state.
pub fn lstm_unroll<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    cell: &LstmCell,
    xs: &[NodeId],
    state0: LstmState,
) -> Result<Unrolled, NnError> {
    if xs.is_empty() {
        return Err(NnError::EmptySequence);
    }
    let mut state = state0;
    let mut outputs = Vec::with_capacity(xs.len());
    let mut states = Vec::with_capacity(xs.len());
    for &x in xs {
        let (y, next) = lstm_step(g, ps, cell, x, state)?;
        outputs.push(y);
        states.push(next);
        state = next;
    }
    Ok(Unrolled {
        outputs,
        states,
        final_state: state,
    })
}
