//! Trainable parameters and the two feature-extraction paths: explicit
//! interaction features (modality transform, behavior purification, item
//! graph propagation, user aggregation) and extended interest features
//! (multi-layer propagation over the enhanced user-item graph).

use std::sync::Arc;

use ndarray::Array2;

use crate::dataio::Modality;
use crate::error::{GumeError, Result};
use crate::graphs::SparseGraph;
use crate::tape::{Tape, Var};

/// Feature-space transform, Eq form `sigmoid(W2 (W1 x + b1) + b2)`, stored
/// row-major: `w1` is d_m x d so transformed rows are `x . w1`.
#[derive(Debug, Clone)]
pub struct TransformParams {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

/// Modality-specific behavior gate `sigmoid(x . w5 + b5)`.
#[derive(Debug, Clone)]
pub struct GateParams {
    pub w5: Array2<f64>,
    pub b5: Array2<f64>,
}

/// Attention MLP shared across modalities: scores are `tanh(x . w3 + b3) . w4`.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w3: Array2<f64>,
    pub b3: Array2<f64>,
    pub w4: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ModalityParams {
    pub modality: Modality,
    /// Learnable user modality embeddings, n_users x d.
    pub user_embed: Array2<f64>,
    pub transform: TransformParams,
    pub gate: GateParams,
}

/// All trainable tensors. Tensor iteration order is fixed and shared by the
/// initializer, the optimizer, checkpoints, and the gradient audit.
#[derive(Debug, Clone)]
pub struct ParameterSet {
    pub n_users: usize,
    pub n_items: usize,
    pub d: usize,
    /// Stacked user and item ID embeddings, (n_users + n_items) x d.
    pub id_embed: Array2<f64>,
    pub modalities: Vec<ModalityParams>,
    pub attention: AttentionParams,
}

impl ParameterSet {
    /// Zero-valued parameters with consistent shapes.
    pub fn zeros(n_users: usize, n_items: usize, d: usize, modality_dims: &[(Modality, usize)]) -> ParameterSet {
        ParameterSet {
            n_users,
            n_items,
            d,
            id_embed: Array2::zeros((n_users + n_items, d)),
            modalities: modality_dims
                .iter()
                .map(|&(modality, d_m)| ModalityParams {
                    modality,
                    user_embed: Array2::zeros((n_users, d)),
                    transform: TransformParams {
                        w1: Array2::zeros((d_m, d)),
                        b1: Array2::zeros((1, d)),
                        w2: Array2::zeros((d, d)),
                        b2: Array2::zeros((1, d)),
                    },
                    gate: GateParams {
                        w5: Array2::zeros((d, d)),
                        b5: Array2::zeros((1, d)),
                    },
                })
                .collect(),
            attention: AttentionParams {
                w3: Array2::zeros((d, d)),
                b3: Array2::zeros((1, d)),
                w4: Array2::zeros((d, 1)),
            },
        }
    }

    /// (name, tensor) pairs in canonical order.
    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out: Vec<(String, &Array2<f64>)> = vec![("id_embed".into(), &self.id_embed)];
        for m in &self.modalities {
            let p = m.modality.as_str();
            out.push((format!("{p}.user_embed"), &m.user_embed));
            out.push((format!("{p}.w1"), &m.transform.w1));
            out.push((format!("{p}.b1"), &m.transform.b1));
            out.push((format!("{p}.w2"), &m.transform.w2));
            out.push((format!("{p}.b2"), &m.transform.b2));
            out.push((format!("{p}.w5"), &m.gate.w5));
            out.push((format!("{p}.b5"), &m.gate.b5));
        }
        out.push(("attention.w3".into(), &self.attention.w3));
        out.push(("attention.b3".into(), &self.attention.b3));
        out.push(("attention.w4".into(), &self.attention.w4));
        out
    }

    /// Mutable tensors in the same canonical order as `tensors`.
    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = vec![&mut self.id_embed];
        for m in &mut self.modalities {
            out.push(&mut m.user_embed);
            out.push(&mut m.transform.w1);
            out.push(&mut m.transform.b1);
            out.push(&mut m.transform.w2);
            out.push(&mut m.transform.b2);
            out.push(&mut m.gate.w5);
            out.push(&mut m.gate.b5);
        }
        out.push(&mut self.attention.w3);
        out.push(&mut self.attention.b3);
        out.push(&mut self.attention.w4);
        out
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in self.tensors() {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(GumeError::Validation(format!("tensor {name} contains NaN/Inf")));
            }
        }
        if self.id_embed.dim() != (self.n_users + self.n_items, self.d) {
            return Err(GumeError::Shape("id_embed dimensions inconsistent".into()));
        }
        Ok(())
    }
}

/// Tape handles for one modality's parameters.
#[derive(Debug, Clone, Copy)]
pub struct ModalityVars {
    pub user_embed: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w5: Var,
    pub b5: Var,
}

/// Tape handles for every parameter, registered in canonical order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub id_embed: Var,
    pub modalities: Vec<ModalityVars>,
    pub w3: Var,
    pub b3: Var,
    pub w4: Var,
    /// All leaves in the canonical tensor order.
    pub all: Vec<Var>,
}

/// Register every parameter tensor as a tape leaf.
pub fn register_params(tape: &mut Tape, params: &ParameterSet) -> ParamVars {
    let id_embed = tape.leaf(params.id_embed.clone());
    let mut all = vec![id_embed];
    let mut modalities = Vec::new();
    for m in &params.modalities {
        let vars = ModalityVars {
            user_embed: tape.leaf(m.user_embed.clone()),
            w1: tape.leaf(m.transform.w1.clone()),
            b1: tape.leaf(m.transform.b1.clone()),
            w2: tape.leaf(m.transform.w2.clone()),
            b2: tape.leaf(m.transform.b2.clone()),
            w5: tape.leaf(m.gate.w5.clone()),
            b5: tape.leaf(m.gate.b5.clone()),
        };
        all.extend([vars.user_embed, vars.w1, vars.b1, vars.w2, vars.b2, vars.w5, vars.b5]);
        modalities.push(vars);
    }
    let w3 = tape.leaf(params.attention.w3.clone());
    let b3 = tape.leaf(params.attention.b3.clone());
    let w4 = tape.leaf(params.attention.w4.clone());
    all.extend([w3, b3, w4]);
    ParamVars {
        id_embed,
        modalities,
        w3,
        b3,
        w4,
        all,
    }
}

/// Map raw modality features into the ID space: `sigmoid(W2 (W1 x + b1) + b2)`
/// applied row-wise. Output entries are strictly in (0, 1).
pub fn transform_modality(tape: &mut Tape, raw: Var, m: &ModalityVars) -> Var {
    let h = tape.matmul(raw, m.w1);
    let h = tape.add_row_broadcast(h, m.b1);
    let h = tape.matmul(h, m.w2);
    let h = tape.add_row_broadcast(h, m.b2);
    tape.sigmoid(h)
}

/// Behavior purification: element-wise product with the item ID embeddings.
pub fn purify(tape: &mut Tape, item_id_embed: Var, transformed: Var) -> Var {
    tape.mul(item_id_embed, transformed)
}

/// Propagate item features over the frozen modality item graph, `layers`
/// times.
pub fn propagate_item_graph(
    tape: &mut Tape,
    features: Var,
    graph: &Arc<SparseGraph>,
    layers: usize,
) -> Var {
    let mut cur = features;
    for _ in 0..layers {
        cur = tape.spmm(graph, cur);
    }
    cur
}

/// User explicit modality features by aggregating interacted items' rows.
/// `r_train` is the binary train matrix, or its row-normalized variant for
/// mean aggregation.
pub fn aggregate_user_modality(tape: &mut Tape, r_train: &Arc<SparseGraph>, item_features: Var) -> Var {
    tape.spmm(r_train, item_features)
}

/// Stack users over items (matching the ID embedding partition).
pub fn explicit_features(tape: &mut Tape, user_rows: Var, item_rows: Var) -> Var {
    tape.concat_rows(user_rows, item_rows)
}

/// Mean over propagation layers 0..=L of the enhanced-graph convolution.
pub fn extended_interest(
    tape: &mut Tape,
    initial: Var,
    adjacency: &Arc<SparseGraph>,
    layers: usize,
) -> Var {
    let mut acc = initial;
    let mut cur = initial;
    for _ in 0..layers {
        cur = tape.spmm(adjacency, cur);
        acc = tape.add(acc, cur);
    }
    tape.scale(acc, 1.0 / (layers as f64 + 1.0))
}

/// Element-wise sum of the per-modality extended features.
pub fn fuse_extended(tape: &mut Tape, extended: &[Var]) -> Var {
    let mut it = extended.iter();
    let first = *it.next().expect("at least one modality");
    it.fold(first, |acc, &v| tape.add(acc, v))
}

/// All intermediate matrices of one forward pass, as tape handles.
#[derive(Debug, Clone)]
pub struct ModalityForward {
    pub modality: Modality,
    /// Transformed raw features in (0, 1), |I| x d.
    pub transformed: Var,
    /// Purified item features (ID-gated), |I| x d.
    pub purified_items: Var,
    /// Item-graph propagated item features, |I| x d.
    pub propagated_items: Var,
    /// Aggregated user explicit features, |U| x d.
    pub user_explicit: Var,
    /// Explicit interaction features, (|U| + |I|) x d.
    pub explicit: Var,
    /// Extended interest features, (|U| + |I|) x d.
    pub extended: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardState {
    pub n_users: usize,
    pub n_items: usize,
    pub per_modality: Vec<ModalityForward>,
    /// Fused extended interest features.
    pub extended_fused: Var,
    /// Propagated ID embeddings.
    pub extended_id: Var,
    /// Coarse-grained attributes.
    pub coarse: Var,
    /// Fine-grained attributes.
    pub fine: Var,
    /// Enhanced explicit interaction features (coarse + fine).
    pub enhanced: Var,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn rand_mat(rng: &mut ChaCha20Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    fn modality_vars(tape: &mut Tape, rng: &mut ChaCha20Rng, d_m: usize, d: usize) -> ModalityVars {
        ModalityVars {
            user_embed: tape.leaf(rand_mat(rng, 1, d)),
            w1: tape.leaf(rand_mat(rng, d_m, d)),
            b1: tape.leaf(rand_mat(rng, 1, d)),
            w2: tape.leaf(rand_mat(rng, d, d)),
            b2: tape.leaf(rand_mat(rng, 1, d)),
            w5: tape.leaf(rand_mat(rng, d, d)),
            b5: tape.leaf(rand_mat(rng, 1, d)),
        }
    }

    #[test]
    fn transform_with_zero_params_is_half_everywhere() {
        let mut tape = Tape::new();
        let raw = tape.constant(array![[1.0, -2.0, 3.0], [0.5, 0.0, -1.0]]);
        let m = ModalityVars {
            user_embed: tape.leaf(Array2::zeros((1, 2))),
            w1: tape.leaf(Array2::zeros((3, 2))),
            b1: tape.leaf(Array2::zeros((1, 2))),
            w2: tape.leaf(Array2::zeros((2, 2))),
            b2: tape.leaf(Array2::zeros((1, 2))),
            w5: tape.leaf(Array2::zeros((2, 2))),
            b5: tape.leaf(Array2::zeros((1, 2))),
        };
        let t = transform_modality(&mut tape, raw, &m);
        assert!(tape.value(t).iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn transform_approaches_one_with_growing_positive_bias() {
        let eval = |bias: f64| {
            let mut tape = Tape::new();
            let raw = tape.constant(array![[1.0, 2.0]]);
            let m = ModalityVars {
                user_embed: tape.leaf(Array2::zeros((1, 2))),
                w1: tape.leaf(Array2::zeros((2, 2))),
                b1: tape.leaf(array![[5.0, -3.0]]),
                w2: tape.leaf(Array2::zeros((2, 2))),
                b2: tape.leaf(Array2::from_elem((1, 2), bias)),
                w5: tape.leaf(Array2::zeros((2, 2))),
                b5: tape.leaf(Array2::zeros((1, 2))),
            };
            let t = transform_modality(&mut tape, raw, &m);
            tape.value(t)[[0, 0]]
        };
        let mut prev = 0.0;
        for bias in [2.0, 4.0, 8.0, 16.0] {
            let v = eval(bias);
            assert!(v > prev && v < 1.0, "bias {bias} gave {v}");
            prev = v;
        }
        assert!(prev > 1.0 - 1e-6);
    }

    #[test]
    fn transform_matches_straight_line_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let raw = rand_mat(&mut rng, 3, 4);
        let mut tape = Tape::new();
        let raw_var = tape.constant(raw.clone());
        let m = modality_vars(&mut tape, &mut rng, 4, 2);
        let t = transform_modality(&mut tape, raw_var, &m);

        let (w1, b1) = (tape.value(m.w1).clone(), tape.value(m.b1).clone());
        let (w2, b2) = (tape.value(m.w2).clone(), tape.value(m.b2).clone());
        for r in 0..3 {
            for c in 0..2 {
                let mut h = vec![0.0; 2];
                for j in 0..2 {
                    h[j] = (0..4).map(|i| raw[[r, i]] * w1[[i, j]]).sum::<f64>() + b1[[0, j]];
                }
                let z: f64 = (0..2).map(|j| h[j] * w2[[j, c]]).sum::<f64>() + b2[[0, c]];
                let expected = 1.0 / (1.0 + (-z).exp());
                assert!(
                    (tape.value(t)[[r, c]] - expected).abs() < 1e-12,
                    "mismatch at ({r}, {c})"
                );
            }
        }
        // Boundedness invariant.
        assert!(tape.value(t).iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn purify_identities() {
        let mut tape = Tape::new();
        let id = tape.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let zeros = tape.constant(Array2::zeros((2, 2)));
        let ones = tape.constant(Array2::ones((2, 2)));
        let gate = tape.constant(array![[0.5, 0.5], [1.0, 0.0]]);

        let p = purify(&mut tape, zeros, gate);
        assert!(tape.value(p).iter().all(|&v| v == 0.0));
        let p = purify(&mut tape, id, ones);
        assert_eq!(tape.value(p), &array![[1.0, 2.0], [3.0, 4.0]]);
        let p = purify(&mut tape, id, gate);
        assert_eq!(tape.value(p), &array![[0.5, 1.0], [3.0, 0.0]]);
    }

    #[test]
    fn propagate_identity_and_swap() {
        let mut tape = Tape::new();
        let x = tape.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let ident = Arc::new(
            SparseGraph::from_entries(2, 2, vec![(0, 0, 1.0), (1, 1, 1.0)]).unwrap(),
        );
        let p = propagate_item_graph(&mut tape, x, &ident, 3);
        assert_eq!(tape.value(p), &array![[1.0, 2.0], [3.0, 4.0]]);

        let swap =
            Arc::new(SparseGraph::from_entries(2, 2, vec![(0, 1, 1.0), (1, 0, 1.0)]).unwrap());
        let p = propagate_item_graph(&mut tape, x, &swap, 1);
        assert_eq!(tape.value(p), &array![[3.0, 4.0], [1.0, 2.0]]);
    }

    #[test]
    fn propagate_two_layers_matches_dense_power() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let entries = vec![
            (0, 1, 0.4),
            (1, 0, 0.4),
            (1, 2, 0.3),
            (2, 1, 0.3),
            (3, 4, 0.9),
            (4, 3, 0.9),
            (2, 4, 0.1),
            (4, 2, 0.1),
        ];
        let g = Arc::new(SparseGraph::from_entries(5, 5, entries).unwrap());
        let x = rand_mat(&mut rng, 5, 3);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let p = propagate_item_graph(&mut tape, xv, &g, 2);
        let dense = g.to_dense();
        let expected = dense.dot(&dense).dot(&x);
        for (a, b) in tape.value(p).iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn user_aggregation_cases() {
        // user 0 -> item 1; user 1 -> nothing; user 2 -> items 0 and 2.
        let r = Arc::new(
            SparseGraph::from_entries(3, 3, vec![(0, 1, 1.0), (2, 0, 1.0), (2, 2, 1.0)]).unwrap(),
        );
        let mut tape = Tape::new();
        let items = tape.constant(array![[1.0, 0.0], [2.0, 5.0], [0.5, 0.5]]);
        let u = aggregate_user_modality(&mut tape, &r, items);
        assert_eq!(tape.value(u).row(0).to_vec(), vec![2.0, 5.0]);
        assert_eq!(tape.value(u).row(1).to_vec(), vec![0.0, 0.0]);
        assert_eq!(tape.value(u).row(2).to_vec(), vec![1.5, 0.5]);
    }

    #[test]
    fn extended_interest_layer_zero_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let g = Arc::new(SparseGraph::from_entries(2, 2, vec![(0, 1, 1.0), (1, 0, 1.0)]).unwrap());
        let e = extended_interest(&mut tape, x, &g, 0);
        assert_eq!(tape.value(e), &array![[1.0, 2.0], [3.0, 4.0]]);
    }

    #[test]
    fn extended_interest_single_edge_averages_endpoints() {
        let mut tape = Tape::new();
        let e0 = tape.constant(array![[2.0, 0.0], [0.0, 4.0]]);
        let g = Arc::new(SparseGraph::from_entries(2, 2, vec![(0, 1, 1.0), (1, 0, 1.0)]).unwrap());
        let e = extended_interest(&mut tape, e0, &g, 1);
        // (e_u + e_i) / 2 on both rows.
        assert_eq!(tape.value(e), &array![[1.0, 2.0], [1.0, 2.0]]);
    }

    #[test]
    fn extended_interest_matches_dense_layer_sum() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let mut entries = Vec::new();
        for r in 0..10u32 {
            for c in 0..10u32 {
                if r != c && (rng.gen::<f64>() < 0.3) {
                    entries.push((r, c, rng.gen::<f64>()));
                }
            }
        }
        let g = Arc::new(SparseGraph::from_entries(10, 10, entries).unwrap());
        let x = rand_mat(&mut rng, 10, 4);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let e = extended_interest(&mut tape, xv, &g, 3);

        let dense = g.to_dense();
        let mut acc = x.clone();
        let mut cur = x.clone();
        for _ in 0..3 {
            cur = dense.dot(&cur);
            acc += &cur;
        }
        acc /= 4.0;
        for (a, b) in tape.value(e).iter().zip(acc.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn extended_interest_is_linear() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let g = Arc::new(
            SparseGraph::from_entries(4, 4, vec![(0, 1, 0.5), (1, 0, 0.5), (2, 3, 0.2), (3, 2, 0.2)])
                .unwrap(),
        );
        let x = rand_mat(&mut rng, 4, 3);
        let y = rand_mat(&mut rng, 4, 3);
        let (alpha, beta) = (0.37, -1.25);

        let mut tape = Tape::new();
        let combo = tape.constant(alpha * &x + beta * &y);
        let xv = tape.constant(x);
        let yv = tape.constant(y);
        let lhs = extended_interest(&mut tape, combo, &g, 3);
        let ex = extended_interest(&mut tape, xv, &g, 3);
        let ey = extended_interest(&mut tape, yv, &g, 3);
        for i in 0..4 {
            for j in 0..3 {
                let rhs = alpha * tape.value(ex)[[i, j]] + beta * tape.value(ey)[[i, j]];
                assert!((tape.value(lhs)[[i, j]] - rhs).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn fuse_extended_sums_modalities() {
        let mut tape = Tape::new();
        let a = tape.constant(array![[1.0, 2.0]]);
        let zero = tape.constant(Array2::zeros((1, 2)));
        let f = fuse_extended(&mut tape, &[a, zero]);
        assert_eq!(tape.value(f), &array![[1.0, 2.0]]);
        let f = fuse_extended(&mut tape, &[a, a]);
        assert_eq!(tape.value(f), &array![[2.0, 4.0]]);
    }

    #[test]
    fn explicit_features_orders_users_before_items() {
        let mut tape = Tape::new();
        let u = tape.constant(array![[1.0, 1.0]]);
        let i = tape.constant(array![[2.0, 2.0]]);
        let e = explicit_features(&mut tape, u, i);
        assert_eq!(tape.value(e), &array![[1.0, 1.0], [2.0, 2.0]]);
    }

    #[test]
    fn tensor_order_is_stable_between_accessors() {
        let p = ParameterSet::zeros(3, 4, 8, &[(Modality::Visual, 6), (Modality::Textual, 5)]);
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 1 + 2 * 7 + 3);
        assert_eq!(names[0], "id_embed");
        assert_eq!(names[1], "visual.user_embed");
        assert_eq!(names[8], "textual.user_embed");
        assert_eq!(names.last().unwrap(), "attention.w4");
        let mut p2 = p.clone();
        assert_eq!(p2.tensors_mut().len(), names.len());
    }
}
