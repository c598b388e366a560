//! Attribute separation and re-integration: attention-pooled coarse-grained
//! attributes across modalities, behavior-gated fine-grained residuals, and
//! their sum.

use crate::tape::{Tape, Var};

/// Per-row attention score `tanh(x . w3 + b3) . w4`, shared across
/// modalities. Returns an n x 1 column.
pub fn attention_score(tape: &mut Tape, x: Var, w3: Var, b3: Var, w4: Var) -> Var {
    let h = tape.matmul(x, w3);
    let h = tape.add_row_broadcast(h, b3);
    let h = tape.tanh(h);
    tape.matmul(h, w4)
}

/// Coarse-grained attributes: per-row softmax over the modality scores,
/// weights applied to the explicit features and summed.
pub fn coarse_attributes(tape: &mut Tape, explicit: &[Var], scores: &[Var]) -> Var {
    assert_eq!(explicit.len(), scores.len());
    assert!(!explicit.is_empty());
    let stacked = tape.concat_cols(scores);
    let weights = tape.softmax_rows(stacked);
    let mut acc = None;
    for (m, &feat) in explicit.iter().enumerate() {
        let w = tape.slice_col(weights, m);
        let term = tape.mul_col_broadcast(feat, w);
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(prev, term),
        });
    }
    acc.expect("at least one modality")
}

/// Fine-grained attributes: mean over modalities of the coarse residual,
/// gated by the propagated ID embeddings through the modality-specific gate.
pub fn fine_attributes(
    tape: &mut Tape,
    explicit: &[Var],
    coarse: Var,
    extended_id: Var,
    gates: &[(Var, Var)],
) -> Var {
    assert_eq!(explicit.len(), gates.len());
    let mut acc = None;
    for (&feat, &(w5, b5)) in explicit.iter().zip(gates) {
        let residual = tape.sub(feat, coarse);
        let gate_in = tape.matmul(extended_id, w5);
        let gate_in = tape.add_row_broadcast(gate_in, b5);
        let gate = tape.sigmoid(gate_in);
        let term = tape.mul(residual, gate);
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(prev, term),
        });
    }
    let sum = acc.expect("at least one modality");
    tape.scale(sum, 1.0 / explicit.len() as f64)
}

/// Enhanced explicit interaction features: coarse + fine.
pub fn integrate(tape: &mut Tape, coarse: Var, fine: Var) -> Var {
    tape.add(coarse, fine)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn rand_mat(rng: &mut ChaCha20Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn attention_score_zero_params_gives_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(array![[1.0, -4.0], [2.0, 3.0]]);
        let w3 = tape.constant(Array2::zeros((2, 2)));
        let b3 = tape.constant(Array2::zeros((1, 2)));
        let w4_zero = tape.constant(Array2::zeros((2, 1)));
        let s = attention_score(&mut tape, x, w3, b3, w4_zero);
        assert!(tape.value(s).iter().all(|&v| v == 0.0));

        // w3 = 0, b3 = 0 -> tanh(0) = 0 regardless of w4.
        let w4 = tape.constant(array![[2.0], [-1.0]]);
        let s = attention_score(&mut tape, x, w3, b3, w4);
        assert!(tape.value(s).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_score_matches_direct_recomputation() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let x = rand_mat(&mut rng, 4, 3);
        let w3m = rand_mat(&mut rng, 3, 3);
        let b3m = rand_mat(&mut rng, 1, 3);
        let w4m = rand_mat(&mut rng, 3, 1);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w3 = tape.constant(w3m.clone());
        let b3 = tape.constant(b3m.clone());
        let w4 = tape.constant(w4m.clone());
        let s = attention_score(&mut tape, xv, w3, b3, w4);
        for r in 0..4 {
            let mut expected = 0.0;
            for j in 0..3 {
                let h: f64 = (0..3).map(|i| x[[r, i]] * w3m[[i, j]]).sum::<f64>() + b3m[[0, j]];
                expected += h.tanh() * w4m[[j, 0]];
            }
            assert!((tape.value(s)[[r, 0]] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_scores_average_the_modalities() {
        let mut tape = Tape::new();
        let ev = tape.constant(array![[2.0, 0.0], [4.0, 4.0]]);
        let et = tape.constant(array![[0.0, 2.0], [0.0, 0.0]]);
        let s = tape.constant(array![[0.3], [(-1.2)]]);
        let c = coarse_attributes(&mut tape, &[ev, et], &[s, s]);
        assert_eq!(tape.value(c), &array![[1.0, 1.0], [2.0, 2.0]]);
    }

    #[test]
    fn saturated_scores_pick_one_modality() {
        let mut tape = Tape::new();
        let ev = tape.constant(array![[2.0, 0.0]]);
        let et = tape.constant(array![[0.0, 2.0]]);
        let hi = tape.constant(array![[60.0]]);
        let lo = tape.constant(array![[0.0]]);
        let c = coarse_attributes(&mut tape, &[ev, et], &[hi, lo]);
        for (got, want) in tape.value(c).iter().zip([2.0, 0.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_weights_match_scalar_oracle() {
        // Scores (1.0, 0.0) -> weights (e/(e+1), 1/(e+1)).
        let mut tape = Tape::new();
        let ev = tape.constant(array![[1.0, 0.0], [1.0, 0.0]]);
        let et = tape.constant(array![[0.0, 1.0], [0.0, 1.0]]);
        let sv = tape.constant(array![[1.0], [1.0]]);
        let st = tape.constant(array![[0.0], [0.0]]);
        let c = coarse_attributes(&mut tape, &[ev, et], &[sv, st]);
        let e = std::f64::consts::E;
        let (wv, wt) = (e / (e + 1.0), 1.0 / (e + 1.0));
        assert!((wv - 0.7311).abs() < 1e-4 && (wt - 0.2689).abs() < 1e-4);
        for r in 0..2 {
            assert!((tape.value(c)[[r, 0]] - wv).abs() < 1e-12);
            assert!((tape.value(c)[[r, 1]] - wt).abs() < 1e-12);
        }
    }

    #[test]
    fn single_modality_coarse_is_identity_and_fine_is_zero() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let x = rand_mat(&mut rng, 3, 4);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let score = tape.constant(rand_mat(&mut rng, 3, 1));
        let c = coarse_attributes(&mut tape, &[xv], &[score]);
        assert_eq!(tape.value(c), &x);

        let id = tape.constant(rand_mat(&mut rng, 3, 4));
        let w5 = tape.constant(rand_mat(&mut rng, 4, 4));
        let b5 = tape.constant(rand_mat(&mut rng, 1, 4));
        let f = fine_attributes(&mut tape, &[xv], c, id, &[(w5, b5)]);
        assert!(tape.value(f).iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn fine_attributes_with_zero_gate_params_halves_mean_residual() {
        let mut tape = Tape::new();
        let ev = tape.constant(array![[4.0, 0.0]]);
        let et = tape.constant(array![[0.0, 2.0]]);
        let coarse = tape.constant(array![[1.0, 1.0]]);
        let id = tape.constant(array![[0.7, -0.3]]);
        let w5 = tape.constant(Array2::zeros((2, 2)));
        let b5 = tape.constant(Array2::zeros((1, 2)));
        let f = fine_attributes(&mut tape, &[ev, et], coarse, id, &[(w5, b5), (w5, b5)]);
        // 0.5 * mean((ev - c) + (et - c)) = 0.5 * ((3, -1) + (-1, 1)) / 2.
        assert_eq!(tape.value(f), &array![[0.5, 0.0]]);
    }

    #[test]
    fn fine_attributes_matches_composition_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let ev = rand_mat(&mut rng, 3, 2);
        let et = rand_mat(&mut rng, 3, 2);
        let coarse = rand_mat(&mut rng, 3, 2);
        let id = rand_mat(&mut rng, 3, 2);
        let w5v = rand_mat(&mut rng, 2, 2);
        let b5v = rand_mat(&mut rng, 1, 2);
        let w5t = rand_mat(&mut rng, 2, 2);
        let b5t = rand_mat(&mut rng, 1, 2);

        let mut tape = Tape::new();
        let evv = tape.constant(ev.clone());
        let etv = tape.constant(et.clone());
        let cv = tape.constant(coarse.clone());
        let idv = tape.constant(id.clone());
        let vars = [
            (tape.constant(w5v.clone()), tape.constant(b5v.clone())),
            (tape.constant(w5t.clone()), tape.constant(b5t.clone())),
        ];
        let f = fine_attributes(&mut tape, &[evv, etv], cv, idv, &vars);

        let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
        for r in 0..3 {
            for c in 0..2 {
                let gate = |w5: &Array2<f64>, b5: &Array2<f64>| {
                    sigmoid((0..2).map(|i| id[[r, i]] * w5[[i, c]]).sum::<f64>() + b5[[0, c]])
                };
                let expected = 0.5
                    * ((ev[[r, c]] - coarse[[r, c]]) * gate(&w5v, &b5v)
                        + (et[[r, c]] - coarse[[r, c]]) * gate(&w5t, &b5t));
                assert!((tape.value(f)[[r, c]] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn integrate_is_elementwise_sum() {
        let mut tape = Tape::new();
        let c = tape.constant(array![[1.0, 2.0]]);
        let zero = tape.constant(Array2::zeros((1, 2)));
        let out = integrate(&mut tape, c, zero);
        assert_eq!(tape.value(out), &array![[1.0, 2.0]]);
    }

    #[test]
    fn modality_swap_leaves_coarse_plus_fine_invariant() {
        let mut rng = ChaCha20Rng::seed_from_u64(33);
        let ev = rand_mat(&mut rng, 4, 3);
        let et = rand_mat(&mut rng, 4, 3);
        let id = rand_mat(&mut rng, 4, 3);
        let w3m = rand_mat(&mut rng, 3, 3);
        let b3m = rand_mat(&mut rng, 1, 3);
        let w4m = rand_mat(&mut rng, 3, 1);
        let w5v = rand_mat(&mut rng, 3, 3);
        let b5v = rand_mat(&mut rng, 1, 3);
        let w5t = rand_mat(&mut rng, 3, 3);
        let b5t = rand_mat(&mut rng, 1, 3);

        let run = |first: &Array2<f64>,
                   second: &Array2<f64>,
                   g1: (&Array2<f64>, &Array2<f64>),
                   g2: (&Array2<f64>, &Array2<f64>)| {
            let mut tape = Tape::new();
            let a = tape.constant(first.clone());
            let b = tape.constant(second.clone());
            let idv = tape.constant(id.clone());
            let w3 = tape.constant(w3m.clone());
            let b3 = tape.constant(b3m.clone());
            let w4 = tape.constant(w4m.clone());
            let sa = attention_score(&mut tape, a, w3, b3, w4);
            let sb = attention_score(&mut tape, b, w3, b3, w4);
            let coarse = coarse_attributes(&mut tape, &[a, b], &[sa, sb]);
            let gates = [
                (tape.constant(g1.0.clone()), tape.constant(g1.1.clone())),
                (tape.constant(g2.0.clone()), tape.constant(g2.1.clone())),
            ];
            let fine = fine_attributes(&mut tape, &[a, b], coarse, idv, &gates);
            let total = integrate(&mut tape, coarse, fine);
            tape.value(total).clone()
        };

        let forward = run(&ev, &et, (&w5v, &b5v), (&w5t, &b5t));
        let swapped = run(&et, &ev, (&w5t, &b5t), (&w5v, &b5v));
        assert_eq!(forward, swapped);
    }
}
