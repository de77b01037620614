//! Recurrent graph traversal over a complete vector scene graph.
//!
//! Step `m` for central node `c` with neighbors `k != c`:
//!
//! ```text
//! f_k = FF(o_k ⊕ e_{k,c} ⊕ h_{m-1} ⊕ i_m)
//! c_c = mean_k f_k
//! s_c = softmax(FF(o_c ⊕ c_c ⊕ i_m))[1]
//! h_m = sum_c s_c o_c
//! ```
//!
//! Both feed-forwards are ReLU perceptrons of configurable depth. The batched
//! path splits the first layer of `f` into column blocks so object and edge
//! projections are computed once per question and only the `h`/`i` block is
//! recomputed per step. The output layer is affine, so it is applied after
//! the mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Graph, Mlp, NnError, ParamStore, RngState, Tensor, Var};
use crate::scene_graph::pair_index;

#[derive(Clone, Debug)]
pub struct ExecEngine {
    pub dim: usize,
    pub neighbor: Mlp,
    pub classifier: Mlp,
}

impl ExecEngine {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, hidden: usize, rng: &mut RngState) -> Self {
        Self::with_depth(store, prefix, dim, hidden, 1, rng)
    }

    /// Both feed-forwards with `layers` hidden ReLU layers.
    pub fn with_depth(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        hidden: usize,
        layers: usize,
        rng: &mut RngState,
    ) -> Self {
        Self {
            dim,
            neighbor: Mlp::deep(store, &format!("{prefix}.neighbor"), 4 * dim, hidden, dim, layers, rng),
            classifier: Mlp::deep(store, &format!("{prefix}.classifier"), 3 * dim, hidden, 2, layers, rng),
        }
    }
}

fn check_row(g: &Graph, v: Var, dim: usize, what: &str) -> Result<()> {
    let s = g.value(v).shape();
    if s.len() != 2 || s[1] != dim {
        return Err(Error::Nn(NnError::Dimension(format!("{what}: expected width {dim}, got shape {s:?}"))));
    }
    Ok(())
}

/// `f_k` for one neighbor; all inputs are `1 x D`.
pub fn neighbor_feature(g: &mut Graph, engine: &ExecEngine, o_k: Var, e_k_central: Var, h_prev: Var, i_m: Var) -> Result<Var> {
    for (v, w) in [(o_k, "o_k"), (e_k_central, "edge"), (h_prev, "history"), (i_m, "instruction")] {
        check_row(g, v, engine.dim, w)?;
    }
    let x = g.concat_cols(&[o_k, e_k_central, h_prev, i_m])?;
    Ok(engine.neighbor.forward(g, x)?)
}

/// Mean of the neighbor features; the zero vector when there are none.
pub fn context_vector(g: &mut Graph, features: &[Var], dim: usize) -> Result<Var> {
    if features.is_empty() {
        return Ok(g.constant(Tensor::zeros(&[1, dim])));
    }
    let stacked = g.concat_rows(features)?;
    Ok(g.group_mean(stacked, features.len())?)
}

/// Two traverse logits `(not, yes)` for the central node.
pub fn classify_node(g: &mut Graph, engine: &ExecEngine, o_central: Var, context: Var, i_m: Var) -> Result<Var> {
    for (v, w) in [(o_central, "o_central"), (context, "context"), (i_m, "instruction")] {
        check_row(g, v, engine.dim, w)?;
    }
    let x = g.concat_cols(&[o_central, context, i_m])?;
    Ok(engine.classifier.forward(g, x)?)
}

/// `h = sum_i s_i o_i` for `scores` (`N x 1`) and `objects` (`N x D`).
pub fn history_vector(g: &mut Graph, scores: Var, objects: Var) -> Result<Var> {
    Ok(g.matmul_tn(scores, objects)?)
}

/// Probability of "traverse" per row of `N x 2` logits, as an `N x 1` column.
pub fn traverse_scores(g: &mut Graph, logits: Var) -> Result<Var> {
    let p = g.softmax(logits);
    Ok(g.slice_cols(p, 1, 1)?)
}

#[derive(Clone, Debug)]
pub struct StepVars {
    pub logits: Var,
    pub scores: Var,
    pub history: Var,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraversalState {
    pub step: usize,
    pub scores: Vec<f64>,
    pub bitmap: Vec<bool>,
    pub history: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExecTrace {
    pub states: Vec<TraversalState>,
    /// Decoded instruction text per step, when available.
    #[serde(default)]
    pub instructions: Vec<String>,
}

impl ExecTrace {
    pub fn from_steps(g: &Graph, steps: &[StepVars]) -> Self {
        let states = steps
            .iter()
            .enumerate()
            .map(|(m, s)| {
                let scores = g.value(s.scores).data().to_vec();
                TraversalState {
                    step: m + 1,
                    bitmap: scores.iter().map(|&p| p > 0.5).collect(),
                    scores,
                    history: g.value(s.history).data().to_vec(),
                }
            })
            .collect();
        Self {
            states,
            instructions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Runs all steps. `objects` is `N x D`, `edges` is `N (N - 1) x D` in
/// pair order, `instructions` holds one `1 x D` vector per step.
pub fn execute(g: &mut Graph, engine: &ExecEngine, objects: Var, edges: Var, instructions: &[Var]) -> Result<Vec<StepVars>> {
    let d = engine.dim;
    check_row(g, objects, d, "objects")?;
    let n = g.value(objects).rows();
    if n == 0 {
        return Err(Error::Nn(NnError::Dimension("execute on an empty graph".into())));
    }
    if n > 1 {
        check_row(g, edges, d, "edges")?;
        if g.value(edges).rows() != n * (n - 1) {
            return Err(Error::Nn(NnError::Dimension(format!(
                "{} edge rows for {n} nodes",
                g.value(edges).rows()
            ))));
        }
    }
    for &i in instructions {
        check_row(g, i, d, "instruction")?;
    }
    let (nb1, nb2) = (&engine.neighbor.hidden, &engine.neighbor.out);
    let (cl1, cl2) = (&engine.classifier.hidden, &engine.classifier.out);
    // static per question
    let pair_pre = if n > 1 {
        let a = nb1.weight_block(g, objects, 0, d)?;
        let b = nb1.weight_block(g, edges, d, d)?;
        let mut ks = Vec::with_capacity(n * (n - 1));
        let mut eidx = Vec::with_capacity(n * (n - 1));
        for c in 0..n {
            for k in (0..n).filter(|&k| k != c) {
                ks.push(k);
                eidx.push(pair_index(n, k, c));
            }
        }
        let a = g.gather_rows(a, &ks)?;
        let b = g.gather_rows(b, &eidx)?;
        Some(g.add(a, b)?)
    } else {
        None
    };
    let cls_obj = cl1.weight_block(g, objects, 0, d)?;
    let mut h = g.constant(Tensor::zeros(&[1, d]));
    let mut steps = Vec::with_capacity(instructions.len());
    for &i in instructions {
        let context = match pair_pre {
            Some(pre) => {
                let hp = nb1.weight_block(g, h, 2 * d, d)?;
                let ip = nb1.weight_block(g, i, 3 * d, d)?;
                let row = g.add(hp, ip)?;
                let b1 = g.param(nb1.bias);
                let row = g.add_row(row, b1)?;
                let x = g.add_row(pre, row)?;
                let x = g.relu(x);
                let x = engine.neighbor.forward_mid(g, x)?;
                let mean = g.group_mean(x, n - 1)?;
                nb2.forward(g, mean)?
            }
            None => g.constant(Tensor::zeros(&[1, d])),
        };
        let cp = cl1.weight_block(g, context, d, d)?;
        let ip = cl1.weight_block(g, i, 2 * d, d)?;
        let b1 = g.param(cl1.bias);
        let ip = g.add_row(ip, b1)?;
        let x = g.add(cls_obj, cp)?;
        let x = g.add_row(x, ip)?;
        let x = match cl1.activation {
            Activation::Relu => g.relu(x),
            Activation::Identity => x,
        };
        let x = engine.classifier.forward_mid(g, x)?;
        let logits = cl2.forward(g, x)?;
        let scores = traverse_scores(g, logits)?;
        h = history_vector(g, scores, objects)?;
        steps.push(StepVars {
            logits,
            scores,
            history: h,
        });
    }
    Ok(steps)
}

/// Reference implementation built from the per-node operations.
pub fn execute_naive(g: &mut Graph, engine: &ExecEngine, objects: Var, edges: Var, instructions: &[Var]) -> Result<Vec<StepVars>> {
    let d = engine.dim;
    let n = g.value(objects).rows();
    let rows: Vec<Var> = (0..n).map(|r| g.gather_rows(objects, &[r])).collect::<Result<_, _>>()?;
    let mut h = g.constant(Tensor::zeros(&[1, d]));
    let mut steps = Vec::new();
    for &i in instructions {
        let mut logits = Vec::with_capacity(n);
        for c in 0..n {
            let mut feats = Vec::new();
            for k in (0..n).filter(|&k| k != c) {
                let e = g.gather_rows(edges, &[pair_index(n, k, c)])?;
                feats.push(neighbor_feature(g, engine, rows[k], e, h, i)?);
            }
            let ctx = context_vector(g, &feats, d)?;
            logits.push(classify_node(g, engine, rows[c], ctx, i)?);
        }
        let logits = g.concat_rows(&logits)?;
        let scores = traverse_scores(g, logits)?;
        h = history_vector(g, scores, objects)?;
        steps.push(StepVars {
            logits,
            scores,
            history: h,
        });
    }
    Ok(steps)
}

/// Summed two-way cross-entropy of every node at every step against the
/// gold bits (`gold[m][node]` in `{0, 1}`).
pub fn traversal_loss(g: &mut Graph, steps: &[StepVars], gold: &[Vec<usize>]) -> Result<Var> {
    if steps.len() != gold.len() {
        return Err(Error::Nn(NnError::Dimension(format!(
            "{} steps but {} gold bitmaps",
            steps.len(),
            gold.len()
        ))));
    }
    let mut total: Option<Var> = None;
    for (s, bits) in steps.iter().zip(gold) {
        let ce = g.cross_entropy(s.logits, bits)?;
        total = Some(match total {
            Some(t) => g.add(t, ce)?,
            None => ce,
        });
    }
    total.ok_or_else(|| Error::Nn(NnError::Contract("traversal loss over zero steps".into())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(dim: usize) -> (ParamStore, ExecEngine) {
        setup_deep(dim, 1)
    }

    fn setup_deep(dim: usize, layers: usize) -> (ParamStore, ExecEngine) {
        let mut store = ParamStore::new();
        let e = ExecEngine::with_depth(&mut store, "think", dim, 2 * dim, layers, &mut RngState::new(7));
        (store, e)
    }

    fn random(g: &mut Graph, rng: &mut RngState, r: usize, c: usize) -> Var {
        if r == 0 {
            return g.constant(Tensor::zeros(&[0, c]));
        }
        g.constant(Tensor::matrix(r, c, (0..r * c).map(|_| rng.normal()).collect()).unwrap())
    }

    #[test]
    fn neighbor_layer_input_width() {
        let (_, e) = setup(64);
        assert_eq!(e.neighbor.hidden.in_dim, 256);
        assert_eq!(e.classifier.hidden.in_dim, 192);
    }

    #[test]
    fn zero_weights_give_zero_feature() {
        let (mut store, e) = setup(3);
        for p in store.iter_mut() {
            p.value.fill(0.0);
        }
        let mut g = Graph::new(&store);
        let mut rng = RngState::new(1);
        let v: Vec<Var> = (0..4).map(|_| random(&mut g, &mut rng, 1, 3)).collect();
        let f = neighbor_feature(&mut g, &e, v[0], v[1], v[2], v[3]).unwrap();
        assert!(g.value(f).data().iter().all(|&x| x == 0.0));
        let bad = random(&mut g, &mut rng, 1, 2);
        assert!(neighbor_feature(&mut g, &e, v[0], bad, v[2], v[3]).is_err());
    }

    #[test]
    fn context_mean_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        let b = g.constant(Tensor::matrix(1, 2, vec![3.0, 3.0]).unwrap());
        let c = context_vector(&mut g, &[a, b], 2).unwrap();
        assert_eq!(g.value(c).data(), &[2.0, 2.0]);
        let c = context_vector(&mut g, &[b, a], 2).unwrap();
        assert_eq!(g.value(c).data(), &[2.0, 2.0]);
        let c = context_vector(&mut g, &[a], 2).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 1.0]);
        let c = context_vector(&mut g, &[], 2).unwrap();
        assert_eq!(g.value(c).data(), &[0.0, 0.0]);
    }

    #[test]
    fn score_tie_and_saturation() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let l = g.constant(Tensor::matrix(2, 2, vec![0.3, 0.3, 0.0, 10.0]).unwrap());
        let s = traverse_scores(&mut g, l).unwrap();
        assert_eq!(g.value(s).data()[0], 0.5);
        assert!(g.value(s).data()[1] > 0.9999);
        let steps = [StepVars {
            logits: l,
            scores: s,
            history: s,
        }];
        let t = ExecTrace::from_steps(&g, &steps);
        assert_eq!(t.states[0].bitmap, vec![false, true]);
    }

    #[test]
    fn history_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let o = g.constant(Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 2.0]).unwrap());
        let s = g.constant(Tensor::matrix(2, 1, vec![0.5, 0.5]).unwrap());
        let h = history_vector(&mut g, s, o).unwrap();
        assert_eq!(g.value(h).data(), &[1.0, 1.0]);
        let s = g.constant(Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap());
        let h = history_vector(&mut g, s, o).unwrap();
        assert_eq!(g.value(h).data(), &[0.0, 2.0]);
        let s = g.constant(Tensor::matrix(2, 1, vec![0.0, 0.0]).unwrap());
        let h = history_vector(&mut g, s, o).unwrap();
        assert_eq!(g.value(h).data(), &[0.0, 0.0]);
    }

    #[test]
    fn batched_matches_naive() {
        for layers in [1, 2, 3] {
            batched_matches_naive_at(layers);
        }
    }

    fn batched_matches_naive_at(layers: usize) {
        let (store, e) = setup_deep(5, layers);
        assert_eq!(e.neighbor.mid.len(), layers - 1);
        let mut rng = RngState::new(3);
        for n in 1..6 {
            let mut g = Graph::new(&store);
            let o = random(&mut g, &mut rng, n, 5);
            let ed = random(&mut g, &mut rng, n * (n - 1), 5);
            let ivs: Vec<Var> = (0..3).map(|_| random(&mut g, &mut rng, 1, 5)).collect();
            let a = execute(&mut g, &e, o, ed, &ivs).unwrap();
            let b = execute_naive(&mut g, &e, o, ed, &ivs).unwrap();
            for (x, y) in a.iter().zip(&b) {
                for (p, q) in g.value(x.logits).data().iter().zip(g.value(y.logits).data()) {
                    assert!((p - q).abs() < 1e-10, "n={n}: {p} vs {q}");
                }
            }
        }
    }

    #[test]
    fn trace_shape_determinism_and_uniform_loss() {
        let (mut store, e) = setup(4);
        let mut rng = RngState::new(2);
        let run = |store: &ParamStore, rng: &mut RngState| {
            let mut g = Graph::new(store);
            let o = random(&mut g, rng, 3, 4);
            let ed = random(&mut g, rng, 6, 4);
            let i = random(&mut g, rng, 1, 4);
            let s = execute(&mut g, &e, o, ed, &[i]).unwrap();
            ExecTrace::from_steps(&g, &s)
        };
        let t1 = run(&store, &mut rng.clone());
        let t2 = run(&store, &mut rng);
        assert_eq!(t1.len(), 1);
        assert_eq!(t1, t2);
        // zero classifier output layer -> uniform scores
        for p in store.iter_mut() {
            if p.name.starts_with("think.classifier.1") {
                p.value.fill(0.0);
            }
        }
        let mut g = Graph::new(&store);
        let mut rng = RngState::new(5);
        let o = random(&mut g, &mut rng, 4, 4);
        let ed = random(&mut g, &mut rng, 12, 4);
        let iv: Vec<Var> = (0..2).map(|_| random(&mut g, &mut rng, 1, 4)).collect();
        let s = execute(&mut g, &e, o, ed, &iv).unwrap();
        let loss = traversal_loss(&mut g, &s, &[vec![1, 0, 0, 1], vec![0, 0, 0, 0]]).unwrap();
        assert!((g.value(loss).data()[0] - 8.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn singleton_graph_uses_zero_context() {
        let (store, e) = setup(3);
        let mut g = Graph::new(&store);
        let mut rng = RngState::new(1);
        let o = random(&mut g, &mut rng, 1, 3);
        let ed = g.constant(Tensor::zeros(&[0, 3]));
        let i = random(&mut g, &mut rng, 1, 3);
        let a = execute(&mut g, &e, o, ed, &[i]).unwrap();
        let zero = g.constant(Tensor::zeros(&[1, 3]));
        let want = classify_node(&mut g, &e, o, zero, i).unwrap();
        assert_eq!(g.value(a[0].logits), g.value(want));
    }
}
