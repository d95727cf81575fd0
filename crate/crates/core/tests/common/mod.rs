//! Oracles shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use anclaf::attention::{AttentionMode, AttentionParams};
use anclaf::metrics::{
    adversarial_losses, affect_loss, bin_of, class_weights, quadrant_cross_entropy, AdversarialForm, AffectLabel,
};
use anclaf::nn::{lstm_unroll, Activation, AffineLayer, LstmCell, LstmState, ParamStore};
use anclaf::tensor::{Graph, NodeId, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_FLOOR: f64 = 1e-7;

/// Builds a scalar loss from `inputs` and reports which input each checked leaf holds.
pub type Build = fn(&mut Graph<f64>, &[Tensor<f64>]) -> (NodeId, Vec<(usize, NodeId)>);

pub struct GradCase {
    pub name: &'static str,
    pub inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    pub build: Build,
}

#[derive(Debug)]
pub struct GradMismatch {
    pub input: usize,
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

fn loss_at(build: Build, inputs: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::new();
    let (loss, _) = build(&mut g, inputs);
    g.scalar_value(loss)
}

/// Central differences against the reverse sweep. An entry passes when its error is
/// within the absolute floor or within the relative tolerance.
pub fn grad_check(build: Build, inputs: &[Tensor<f64>]) -> Result<f64, GradMismatch> {
    let tracked: Vec<Tensor<f64>> = inputs.iter().map(|t| t.clone().with_requires_grad(true)).collect();
    let mut g = Graph::new();
    let (loss, leaves) = build(&mut g, &tracked);
    let grads = g.backward(loss).expect("scalar loss");
    let mut worst = 0.0f64;
    for (input, node) in leaves {
        let analytic = grads.get(node).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[input].len()]);
        for entry in 0..inputs[input].len() {
            let mut shifted = inputs.to_vec();
            shifted[input].data_mut()[entry] += FD_STEP;
            let up = loss_at(build, &shifted);
            shifted[input].data_mut()[entry] -= 2.0 * FD_STEP;
            let down = loss_at(build, &shifted);
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[entry];
            let err = (a - numeric).abs();
            let rel = err / a.abs().max(numeric.abs());
            if err > FD_ABS_FLOOR && rel > FD_REL_TOL {
                return Err(GradMismatch {
                    input,
                    entry,
                    analytic: a,
                    numeric,
                });
            }
            if err > FD_ABS_FLOOR {
                worst = worst.max(rel);
            }
        }
    }
    Ok(worst)
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=5)
}

/// Entries uniform in `[-2, 2]`, kept at least `gap` away from every point in `kinks`.
fn tensor_avoiding(rng: &mut ChaCha8Rng, shape: &[usize], kinks: &[f64], gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.random_range(-2.0..2.0);
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    tensor_avoiding(rng, shape, &[], 0.0)
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(0.2..2.0)).collect()).unwrap()
}

/// Magnitudes in `[0.5, 2]` with random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.5..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn leaf(g: &mut Graph<f64>, inputs: &[Tensor<f64>], i: usize) -> (usize, NodeId) {
    (i, g.leaf(&inputs[i]))
}

/// `Σ out ⊙ r` for a fixed non-uniform `r`, so every output entry matters differently.
fn project(g: &mut Graph<f64>, out: NodeId) -> NodeId {
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let r = (0..n).map(|i| (1.3 * i as f64 + 0.7).sin() + 0.25).collect();
    let r = g.constant_from(&shape, r).unwrap();
    let prod = g.mul(out, r).unwrap();
    g.sum(prod).unwrap()
}

fn unary_case(g: &mut Graph<f64>, inputs: &[Tensor<f64>], op: fn(&mut Graph<f64>, NodeId) -> NodeId) -> (NodeId, Vec<(usize, NodeId)>) {
    let a = leaf(g, inputs, 0);
    let y = op(g, a.1);
    (project(g, y), vec![a])
}

fn binary_case(
    g: &mut Graph<f64>,
    inputs: &[Tensor<f64>],
    op: fn(&mut Graph<f64>, NodeId, NodeId) -> NodeId,
) -> (NodeId, Vec<(usize, NodeId)>) {
    let a = leaf(g, inputs, 0);
    let b = leaf(g, inputs, 1);
    let y = op(g, a.1, b.1);
    (project(g, y), vec![a, b])
}

fn pair(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let shape = [dim(rng), dim(rng)];
    vec![tensor(rng, &shape), tensor(rng, &shape)]
}

fn matrix(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let shape = [dim(rng), dim(rng)];
    vec![tensor(rng, &shape)]
}

fn labels_tensor(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    let data = (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(&[n, 2], data).unwrap()
}

fn labels_of(t: &Tensor<f64>) -> Vec<AffectLabel> {
    t.data().chunks(2).map(|p| AffectLabel::new(p[0], p[1])).collect()
}

/// Every graph operation with a backward rule.
pub fn op_cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "matmul",
            inputs: |r| {
                let (m, k, p) = (dim(r), dim(r), dim(r));
                vec![tensor(r, &[m, k]), tensor(r, &[k, p])]
            },
            build: |g, x| binary_case(g, x, |g, a, b| g.matmul(a, b).unwrap()),
        },
        GradCase {
            name: "matmul_t",
            inputs: |r| {
                let (m, k, p) = (dim(r), dim(r), dim(r));
                vec![tensor(r, &[m, k]), tensor(r, &[p, k])]
            },
            build: |g, x| binary_case(g, x, |g, a, b| g.matmul_t(a, b).unwrap()),
        },
        GradCase {
            name: "add",
            inputs: pair,
            build: |g, x| binary_case(g, x, |g, a, b| g.add(a, b).unwrap()),
        },
        GradCase {
            name: "sub",
            inputs: pair,
            build: |g, x| binary_case(g, x, |g, a, b| g.sub(a, b).unwrap()),
        },
        GradCase {
            name: "mul",
            inputs: pair,
            build: |g, x| binary_case(g, x, |g, a, b| g.mul(a, b).unwrap()),
        },
        GradCase {
            name: "div",
            inputs: |r| {
                let shape = [dim(r), dim(r)];
                vec![tensor(r, &shape), away_from_zero(r, &shape)]
            },
            build: |g, x| binary_case(g, x, |g, a, b| g.div(a, b).unwrap()),
        },
        GradCase {
            name: "scale",
            inputs: matrix,
            build: |g, x| unary_case(g, x, |g, a| g.scale(a, -1.7)),
        },
        GradCase {
            name: "offset",
            inputs: matrix,
            build: |g, x| unary_case(g, x, |g, a| g.offset(a, 0.3)),
        },
        GradCase {
            name: "tanh",
            inputs: matrix,
            build: |g, x| unary_case(g, x, |g, a| g.tanh(a)),
        },
        GradCase {
            name: "sigmoid",
            inputs: matrix,
            build: |g, x| unary_case(g, x, |g, a| g.sigmoid(a)),
        },
        GradCase {
            name: "relu",
            inputs: |r| {
                let shape = [dim(r), dim(r)];
                vec![tensor_avoiding(r, &shape, &[0.0], 1e-3)]
            },
            build: |g, x| unary_case(g, x, |g, a| g.relu(a)),
        },
        GradCase {
            name: "exp",
            inputs: matrix,
            build: |g, x| unary_case(g, x, |g, a| g.exp(a)),
        },
        GradCase {
            name: "ln",
            inputs: |r| {
                let shape = [dim(r), dim(r)];
                vec![positive(r, &shape)]
            },
            build: |g, x| unary_case(g, x, |g, a| g.ln(a)),
        },
        GradCase {
            name: "sqrt",
            inputs: |r| {
                let shape = [dim(r), dim(r)];
                vec![positive(r, &shape)]
            },
            build: |g, x| unary_case(g, x, |g, a| g.sqrt(a)),
        },
        GradCase {
            name: "clamp",
            inputs: |r| {
                let shape = [dim(r), dim(r)];
                vec![tensor_avoiding(r, &shape, &[-1.0, 0.5], 1e-3)]
            },
            build: |g, x| unary_case(g, x, |g, a| g.clamp(a, -1.0, 0.5)),
        },
        GradCase {
            name: "add_row",
            inputs: |r| {
                let (m, n) = (dim(r), dim(r));
                vec![tensor(r, &[m, n]), tensor(r, &[n])]
            },
            build: |g, x| binary_case(g, x, |g, a, b| g.add_row(a, b).unwrap()),
        },
        GradCase {
            name: "add_col",
            inputs: |r| {
                let (m, n) = (dim(r), dim(r));
                vec![tensor(r, &[m, n]), tensor(r, &[m, 1])]
            },
            build: |g, x| binary_case(g, x, |g, a, b| g.add_col(a, b).unwrap()),
        },
        GradCase {
            name: "mul_col",
            inputs: |r| {
                let (m, n) = (dim(r), dim(r));
                vec![tensor(r, &[m, n]), tensor(r, &[m, 1])]
            },
            build: |g, x| binary_case(g, x, |g, a, b| g.mul_col(a, b).unwrap()),
        },
        GradCase {
            name: "softmax",
            inputs: matrix,
            build: |g, x| unary_case(g, x, |g, a| g.softmax(a).unwrap()),
        },
        GradCase {
            name: "log_softmax",
            inputs: matrix,
            build: |g, x| unary_case(g, x, |g, a| g.log_softmax(a).unwrap()),
        },
        GradCase {
            name: "concat_rows",
            inputs: |r| {
                let n = dim(r);
                let (a, b) = (dim(r), dim(r));
                vec![tensor(r, &[a, n]), tensor(r, &[b, n])]
            },
            build: |g, x| binary_case(g, x, |g, a, b| g.concat(&[a, b], 0).unwrap()),
        },
        GradCase {
            name: "concat_last",
            inputs: |r| {
                let m = dim(r);
                let (a, b) = (dim(r), dim(r));
                vec![tensor(r, &[m, a]), tensor(r, &[m, b])]
            },
            build: |g, x| binary_case(g, x, |g, a, b| g.concat_last(&[a, b]).unwrap()),
        },
        GradCase {
            name: "slice",
            inputs: |r| {
                let shape = [dim(r), dim(r) + 1];
                vec![tensor(r, &shape)]
            },
            build: |g, x| {
                unary_case(g, x, |g, a| {
                    let cols = g.shape(a)[1];
                    g.slice(a, 1, 1, cols - 1).unwrap()
                })
            },
        },
        GradCase {
            name: "reshape",
            inputs: matrix,
            build: |g, x| {
                unary_case(g, x, |g, a| {
                    let n = g.value(a).len();
                    g.reshape(a, &[n]).unwrap()
                })
            },
        },
        GradCase {
            name: "sum",
            inputs: matrix,
            build: |g, x| unary_case(g, x, |g, a| g.sum(a).unwrap()),
        },
        GradCase {
            name: "mean",
            inputs: matrix,
            build: |g, x| unary_case(g, x, |g, a| g.mean(a).unwrap()),
        },
        GradCase {
            name: "var",
            inputs: |r| {
                let shape = [dim(r), dim(r) + 1];
                vec![tensor(r, &shape)]
            },
            build: |g, x| unary_case(g, x, |g, a| g.var(a).unwrap()),
        },
        GradCase {
            name: "weighted_sum",
            inputs: |r| {
                let (m, k, d) = (dim(r), dim(r), dim(r));
                let mut v = vec![tensor(r, &[m, k])];
                v.extend((0..k).map(|_| tensor(r, &[m, d])));
                v
            },
            build: |g, x| {
                let leaves: Vec<(usize, NodeId)> = (0..x.len()).map(|i| leaf(g, x, i)).collect();
                let states: Vec<NodeId> = leaves[1..].iter().map(|l| l.1).collect();
                let y = g.weighted_sum(leaves[0].1, &states).unwrap();
                (project(g, y), leaves)
            },
        },
    ]
}

/// The three composite objectives.
pub fn loss_cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "affect_loss",
            inputs: |r| {
                let n = r.random_range(2..=16);
                vec![tensor(r, &[n, 2]), labels_tensor(r, n)]
            },
            build: |g, x| {
                let p = leaf(g, x, 0);
                let truths = labels_of(&x[1]);
                let w = class_weights(&truths).unwrap();
                (affect_loss(g, p.1, &truths, &w).unwrap(), vec![p])
            },
        },
        GradCase {
            name: "adversarial_loss_d",
            inputs: adversarial_inputs,
            build: |g, x| adversarial_case(g, x, 0),
        },
        GradCase {
            name: "adversarial_loss_g",
            inputs: adversarial_inputs,
            build: |g, x| adversarial_case(g, x, 1),
        },
        GradCase {
            name: "quadrant_cross_entropy",
            inputs: |r| {
                let n = dim(r);
                let targets = (0..n).map(|_| r.random_range(0..4) as f64).collect();
                vec![tensor(r, &[n, 4]), Tensor::new(&[n], targets).unwrap()]
            },
            build: |g, x| {
                let p = leaf(g, x, 0);
                let targets: Vec<usize> = x[1].data().iter().map(|&t| t as usize).collect();
                (quadrant_cross_entropy(g, p.1, &targets).unwrap(), vec![p])
            },
        },
    ]
}

fn adversarial_inputs(r: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let n = dim(r);
    let probs = |r: &mut ChaCha8Rng| Tensor::new(&[n, 1], (0..n).map(|_| r.random_range(0.05..0.95)).collect()).unwrap();
    vec![probs(r), probs(r)]
}

fn adversarial_case(g: &mut Graph<f64>, x: &[Tensor<f64>], which: usize) -> (NodeId, Vec<(usize, NodeId)>) {
    let real = leaf(g, x, 0);
    let fake = leaf(g, x, 1);
    let (ld, lg) = adversarial_losses(g, real.1, fake.1, AdversarialForm::NonSaturating).unwrap();
    (if which == 0 { ld } else { lg }, vec![real, fake])
}

fn store_of(names: &[&str], x: &[Tensor<f64>]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, t) in names.iter().zip(x) {
        s.add(*n, t.clone()).unwrap();
    }
    s
}

/// Layer compositions checked end to end with respect to their parameters.
pub fn layer_cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "two_affine_layers",
            inputs: |r| {
                let (b, i, h, o) = (dim(r), dim(r), dim(r), dim(r));
                vec![tensor(r, &[b, i]), tensor(r, &[h, i]), tensor(r, &[h]), tensor(r, &[o, h]), tensor(r, &[o])]
            },
            build: |g, x| {
                let s = store_of(&["a.weight", "a.bias", "b.weight", "b.bias"], &x[1..]);
                let l1 = AffineLayer::bind(&s, "a", Activation::Tanh).unwrap();
                let l2 = AffineLayer::bind(&s, "b", Activation::Sigmoid).unwrap();
                let input = leaf(g, x, 0);
                let h = l1.forward(g, &s, input.1).unwrap();
                let y = l2.forward(g, &s, h).unwrap();
                let loss = project(g, y);
                let mut leaves = vec![input];
                leaves.extend(s.ids().enumerate().map(|(i, id)| (i + 1, g.param(&s, id))));
                (loss, leaves)
            },
        },
        GradCase {
            name: "lstm_with_attention",
            inputs: |r| {
                let (i, h) = (dim(r), dim(r));
                let steps = r.random_range(1..=4);
                let mut v = vec![
                    tensor(r, &[4 * h, 2 * h + i + h]),
                    tensor(r, &[4 * h]),
                    tensor(r, &[1, 4 * h]),
                ];
                v.extend((0..steps).map(|_| tensor(r, &[1, i])));
                v
            },
            build: |g, x| {
                let s = store_of(&["lstm.weight", "lstm.bias", "att.weight"], x);
                let cell = LstmCell::bind(&s, "lstm").unwrap();
                let h = cell.hidden_size;
                let att = AttentionParams::bind(&s, "att", 2 * h, AttentionMode::Concat).unwrap();
                let xs: Vec<(usize, NodeId)> = (3..x.len()).map(|i| leaf(g, x, i)).collect();
                let mut state = LstmState::zeros(g, 1, h);
                let mut window = anclaf::attention::StateWindow::new(3);
                let mut outs = Vec::new();
                for &(_, zq) in &xs {
                    let aug =
                        anclaf::attention::attend_and_augment(g, &s, &att, zq, state, &mut window, true).unwrap();
                    let un = lstm_unroll(g, &s, &cell, &[aug.input], state).unwrap();
                    state = un.final_state;
                    outs.push(un.outputs[0]);
                    let combined = anclaf::attention::combined_state(g, state).unwrap();
                    window.push(g, &s, &att, combined).unwrap();
                }
                let all = g.concat_last(&outs).unwrap();
                let loss = project(g, all);
                let mut leaves: Vec<(usize, NodeId)> = s.ids().enumerate().map(|(i, id)| (i, g.param(&s, id))).collect();
                leaves.extend(xs);
                (loss, leaves)
            },
        },
    ]
}

/// Single-pass sums: `(n, Σx, Σy, Σx², Σy², Σxy)` turned into the three agreement metrics.
pub fn single_pass_metrics(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sx += a;
        sy += b;
        sxx += a * a;
        syy += b * b;
        sxy += a * b;
    }
    let (mx, my) = (sx / n, sy / n);
    let vx = sxx / n - mx * mx;
    let vy = syy / n - my * my;
    let cov = sxy / n - mx * my;
    let cor = cov / (vx * vy).sqrt();
    let ccc = 2.0 * cov / (vx + vy + (mx - my) * (mx - my));
    let icc = 2.0 * cov / (vx + vy);
    (cor, ccc, icc)
}

/// A random series pair with length in `3..=500`, mixed scale, offset and coupling.
pub fn series_pair(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let n = rng.random_range(3..=500);
    let scale = rng.random_range(0.1..3.0);
    let shift = rng.random_range(-1.0..1.0);
    let coupling = rng.random_range(-1.0..1.0);
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
    let y = x
        .iter()
        .map(|&v| coupling * v + shift + rng.random_range(-1.0..1.0) * scale * 0.5)
        .collect();
    (x, y)
}

/// Flat restatement of the class-balanced affect objective.
pub fn affect_loss_oracle(preds: &[[f64; 2]], truths: &[AffectLabel]) -> f64 {
    let n = truths.len();
    let mut total = 0.0;
    for dim in 0..2 {
        let p: Vec<f64> = preds.iter().map(|r| r[dim]).collect();
        let t: Vec<f64> = truths.iter().map(|l| l.get(dim)).collect();
        let mut counts = [0usize; 10];
        t.iter().for_each(|&v| counts[bin_of(v)] += 1);
        let inv: Vec<f64> = counts.iter().map(|&c| if c == 0 { 0.0 } else { 1.0 / c as f64 }).collect();
        let norm: f64 = inv.iter().sum();
        let mut rmse_term = 0.0;
        for b in 0..10 {
            if counts[b] == 0 {
                continue;
            }
            let se: f64 = (0..n).filter(|&i| bin_of(t[i]) == b).map(|i| (p[i] - t[i]).powi(2)).sum();
            rmse_term += inv[b] / norm * (se / counts[b] as f64).sqrt();
        }
        let (mp, mt) = (p.iter().sum::<f64>() / n as f64, t.iter().sum::<f64>() / n as f64);
        let vp = p.iter().map(|v| (v - mp).powi(2)).sum::<f64>() / n as f64;
        let vt = t.iter().map(|v| (v - mt).powi(2)).sum::<f64>() / n as f64;
        let cov = p.iter().zip(&t).map(|(a, b)| (a - mp) * (b - mt)).sum::<f64>() / n as f64;
        let cor = cov / (vp * vt).sqrt();
        let ccc = 2.0 * cov / (vp + vt + (mp - mt).powi(2));
        let icc = 2.0 * cov / (vp + vt);
        total += rmse_term + (1.0 - cor) + (1.0 - ccc) + (1.0 - icc);
    }
    total / 2.0
}

/// Largest gap between one unrolled graph and step-by-step graphs that carry the
/// state forward as plain values, over one random cell and sequence of length `1..=32`.
pub fn streaming_gap(rng: &mut ChaCha8Rng) -> f64 {
    let (input, hidden, batch) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=3));
    let len = rng.random_range(1..=32);
    let store: ParamStore<f64> = anclaf::nn::init_params(&LstmCell::specs("cell", input, hidden), rng.random()).unwrap();
    let cell = LstmCell::bind(&store, "cell").unwrap();
    let xs: Vec<Tensor<f64>> = (0..len).map(|_| tensor(rng, &[batch, input])).collect();

    let mut g = Graph::inference();
    let nodes: Vec<NodeId> = xs.iter().map(|x| g.constant(x)).collect();
    let start = LstmState::zeros(&mut g, batch, hidden);
    let un = lstm_unroll(&mut g, &store, &cell, &nodes, start).unwrap();

    let mut gap = 0.0f64;
    let (mut h, mut c) = (Tensor::zeros(&[batch, hidden]), Tensor::zeros(&[batch, hidden]));
    for (t, x) in xs.iter().enumerate() {
        let mut s = Graph::inference();
        let state = LstmState {
            h: s.constant(&h),
            c: s.constant(&c),
        };
        let xn = s.constant(x);
        let (y, next) = anclaf::nn::lstm_step(&mut s, &store, &cell, xn, state).unwrap();
        for (a, b) in [(y, un.outputs[t]), (next.c, un.states[t].c)] {
            for (p, q) in s.value(a).iter().zip(g.value(b)) {
                gap = gap.max((p - q).abs());
            }
        }
        h = s.tensor(next.h);
        c = s.tensor(next.c);
    }
    gap
}

/// Largest `|Σ_j a_j − 1|` over every attention vector of a rollout of `frames` random inputs.
pub fn attention_sum_gap(model: &anclaf::Model64, frames: usize, rng: &mut ChaCha8Rng) -> (f64, usize) {
    let mut g = Graph::inference();
    let zq: Vec<NodeId> = (0..frames)
        .map(|_| {
            let t = tensor(rng, &[2, model.arch.zq_dim()]);
            g.constant(&t)
        })
        .collect();
    let out = model.run_sequence(&mut g, &zq).unwrap();
    let mut gap = 0.0f64;
    let mut vectors = 0;
    for w in out.attention.iter().flatten() {
        let k = g.shape(*w)[1];
        assert!(k <= model.arch.seq_len);
        for row in g.value(*w).chunks(k) {
            gap = gap.max((row.iter().sum::<f64>() - 1.0).abs());
            vectors += 1;
        }
    }
    (gap, vectors)
}

/// Largest prediction gap between an S-n model and its freshly widened SA-n counterpart.
pub fn widened_gap(sequence: &anclaf::Model64, set: &anclaf::train::SequenceSet<'_>, seed: u64) -> f64 {
    let widened = sequence.with_attention(AttentionMode::Concat, seed).unwrap();
    let a = anclaf::train::evaluate_sequences(sequence, set).unwrap();
    let b = anclaf::train::evaluate_sequences(&widened, set).unwrap();
    assert_eq!(a.preds.len(), b.preds.len());
    a.preds
        .iter()
        .zip(&b.preds)
        .map(|(p, q)| (p.valence - q.valence).abs().max((p.arousal - q.arousal).abs()))
        .fold(0.0, f64::max)
}
