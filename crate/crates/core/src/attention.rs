//! Attention over a short window of previous combined LSTM states.
//!
//! The combined state of a step is `S = [h ; c]`. Before each step the current
//! combined state is scored against every stored state, the scores are
//! softmax-normalized into alignment weights, and the weighted states form a
//! context vector that is prepended to the step input.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::nn::{LstmState, NnError, ParamId, ParamInit, ParamSpec, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, NodeId, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// `score_j = W_a · [S_current ; S_j]`
    #[default]
    Concat,
    /// `score_j = W_a · S_j`
    Location,
}

/// Scoring weights. `W_a` is `[1 × 4h]` in concat mode and `[1 × 2h]` in location
/// mode, so the parameter count never depends on the window length.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub weight: ParamId,
    pub state_size: usize,
    pub mode: AttentionMode,
}

impl AttentionParams {
    pub fn width(state_size: usize, mode: AttentionMode) -> usize {
        match mode {
            AttentionMode::Concat => 2 * state_size,
            AttentionMode::Location => state_size,
        }
    }

    pub fn specs(prefix: &str, state_size: usize, mode: AttentionMode) -> Vec<ParamSpec> {
        let width = Self::width(state_size, mode);
        vec![ParamSpec {
            name: format!("{prefix}.weight"),
            shape: vec![1, width],
            init: ParamInit::Glorot {
                fan_in: width,
                fan_out: 1,
            },
        }]
    }

    pub fn bind<T: Scalar>(
        store: &ParamStore<T>,
        prefix: &str,
        state_size: usize,
        mode: AttentionMode,
    ) -> Result<Self, NnError> {
        let name = format!("{prefix}.weight");
        let weight = store.id(&name).ok_or(NnError::Unknown(name))?;
        let width = Self::width(state_size, mode);
        if store.get(weight).shape() != [1, width] {
            return Err(TensorError::Shape {
                op: "attention bind",
                left: store.get(weight).shape().to_vec(),
                right: vec![1, width],
            }
            .into());
        }
        Ok(Self {
            weight,
            state_size,
            mode,
        })
    }

    /// `(current part, per-state part)` of `W_a` as graph nodes.
    fn split<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>) -> Result<(Option<NodeId>, NodeId), TensorError> {
        let w = g.param(ps, self.weight);
        match self.mode {
            AttentionMode::Location => Ok((None, w)),
            AttentionMode::Concat => {
                let cur = g.slice(w, 1, 0, self.state_size)?;
                let prev = g.slice(w, 1, self.state_size, self.state_size)?;
                Ok((Some(cur), prev))
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct WindowEntry {
    state: NodeId,
    score: NodeId,
}

/// Up to `capacity` most recent combined states, oldest first.
///
/// Each state's own score term is computed once on insertion.
#[derive(Debug, Clone)]
pub struct StateWindow {
    entries: VecDeque<WindowEntry>,
    capacity: usize,
    weights: Option<(Option<NodeId>, NodeId)>,
}

impl StateWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            entries: VecDeque::with_capacity(capacity),
            capacity,
            weights: None,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn states(&self) -> Vec<NodeId> {
        self.entries.iter().map(|e| e.state).collect()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    fn split<T: Scalar>(
        &mut self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        params: &AttentionParams,
    ) -> Result<(Option<NodeId>, NodeId), TensorError> {
        if let Some(w) = self.weights {
            return Ok(w);
        }
        let w = params.split(g, ps)?;
        self.weights = Some(w);
        Ok(w)
    }

    /// Appends a combined state `[batch × 2h]`, evicting the oldest when full.
    pub fn push<T: Scalar>(
        &mut self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        params: &AttentionParams,
        state: NodeId,
    ) -> Result<(), TensorError> {
        let shape = g.shape(state).to_vec();
        if shape.len() != 2 || shape[1] != params.state_size {
            return Err(TensorError::Shape {
                op: "window push",
                left: shape,
                right: vec![params.state_size],
            });
        }
        if let Some(first) = self.entries.front() {
            if g.shape(first.state) != shape.as_slice() {
                return Err(TensorError::Shape {
                    op: "window push",
                    left: g.shape(first.state).to_vec(),
                    right: shape,
                });
            }
        }
        if self.capacity == 0 {
            return Ok(());
        }
        let (_, w_prev) = self.split(g, ps, params)?;
        let score = g.matmul_t(state, w_prev)?;
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(WindowEntry { state, score });
        Ok(())
    }
}

/// `S = [h ; c]`
pub fn combined_state<T: Scalar>(g: &mut Graph<T>, state: LstmState) -> Result<NodeId, TensorError> {
    g.concat_last(&[state.h, state.c])
}

/// Softmax-normalized alignment weights `[batch × k]` for the `k` stored states.
pub fn alignment<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    params: &AttentionParams,
    current: NodeId,
    window: &mut StateWindow,
) -> Result<NodeId, TensorError> {
    if window.is_empty() {
        return Err(TensorError::Empty { op: "alignment" });
    }
    let (w_cur, _) = window.split(g, ps, params)?;
    let parts: Vec<NodeId> = window.entries.iter().map(|e| e.score).collect();
    let mut scores = g.concat_last(&parts)?;
    if let Some(w_cur) = w_cur {
        let cur = g.matmul_t(current, w_cur)?;
        scores = g.add_col(scores, cur)?;
    }
    g.softmax(scores)
}

/// `C = (Σ_j a_j ⊙ S_j) / k`; the division is skipped when `divide_by_count` is false.
pub fn context_vector<T: Scalar>(
    g: &mut Graph<T>,
    weights: NodeId,
    window: &StateWindow,
    divide_by_count: bool,
) -> Result<NodeId, TensorError> {
    let states = window.states();
    let summed = g.weighted_sum(weights, &states)?;
    if divide_by_count {
        let k = T::of(states.len() as f64);
        Ok(g.scale(summed, T::one() / k))
    } else {
        Ok(summed)
    }
}

/// Step input `[C ; ZQ]` and the alignment weights that produced `C`.
#[derive(Debug, Clone, Copy)]
pub struct Augmented {
    pub input: NodeId,
    pub weights: Option<NodeId>,
}

/// Builds `[C ; ZQ]` for the next LSTM step. An empty window yields a zero context.
/// The caller pushes the new combined state after the step.
pub fn attend_and_augment<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    params: &AttentionParams,
    zq: NodeId,
    state: LstmState,
    window: &mut StateWindow,
    divide_by_count: bool,
) -> Result<Augmented, TensorError> {
    let batch = g.shape(zq)[0];
    if window.is_empty() {
        let context = g.zeros(&[batch, params.state_size]);
        let input = g.concat_last(&[context, zq])?;
        return Ok(Augmented { input, weights: None });
    }
    let current = combined_state(g, state)?;
    let weights = alignment(g, ps, params, current, window)?;
    let context = context_vector(g, weights, window, divide_by_count)?;
    let input = g.concat_last(&[context, zq])?;
    Ok(Augmented {
        input,
        weights: Some(weights),
    })
}
