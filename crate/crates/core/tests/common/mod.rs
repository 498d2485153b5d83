//! Helpers shared by the integration tests.
#![allow(dead_code)]

use mst_core::attention::AttentionPattern;
use mst_core::model::{ModelConfig, ModelState};
use mst_core::rng::Rng;
use mst_core::tensor::{Tape, Tensor, Var};
use mst_core::topology::LayerMask;

pub fn random_tensor(rows: usize, cols: usize, rng: &mut Rng) -> Tensor<f64> {
    Tensor::new([rows, cols], (0..rows * cols).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap()
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Largest relative error between the tape gradient and a central
/// difference, over every element of every input. `build` maps input leaves
/// to an output; the scalar checked is `Σ out ⊙ R` for a fixed random `R`.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    gradcheck_except(inputs, |_, _| false, build)
}

/// [`gradcheck`] skipping elements where `skip(input, index)` holds, e.g.
/// masked weights whose gradient is defined but does not move the output.
pub fn gradcheck_except<S, F>(inputs: &[Tensor<f64>], skip: S, build: F) -> f64
where
    S: Fn(usize, usize) -> bool,
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let probe = |vals: &[Tensor<f64>], with_grad: bool| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), with_grad)).collect();
        let out = build(&mut tape, &leaves);
        let shape = tape.value(out).shape().to_vec();
        let mut rng = Rng::new(77);
        let r: Vec<f64> = (0..tape.value(out).len()).map(|_| rng.normal(0.0, 1.0)).collect();
        let weights = tape.leaf(Tensor::new(shape, r).unwrap(), false);
        let prod = tape.mul(out, weights).unwrap();
        let loss = tape.sum(prod);
        let value = tape.value(loss).data()[0];
        if !with_grad {
            return (value, Vec::new());
        }
        tape.backward(loss).unwrap();
        let grads = leaves
            .iter()
            .zip(vals)
            .map(|(&l, t)| tape.grad(l).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        (value, grads)
    };
    let (_, analytic) = probe(inputs, true);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for j in (0..input.len()).filter(|&j| !skip(i, j)) {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (probe(&plus, false).0 - probe(&minus, false).0) / (2.0 * h);
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
    }
    worst
}

/// Causal strided connectivity as a `seq×seq` row-major mask.
pub fn strided_allowed(seq: usize, stride: usize) -> Vec<bool> {
    AttentionPattern::strided(seq, stride).unwrap().to_mask(seq)
}

/// Deterministic pseudo-English text of about `bytes` bytes.
pub fn small_corpus(bytes: usize) -> String {
    let words = ["the", "cat", "sat", "on", "a", "mat", "and", "dog", "ran", "to", "house", "of", "king"];
    let mut rng = Rng::new(5);
    let mut s = String::new();
    while s.len() < bytes {
        let n = 3 + rng.below(6);
        for i in 0..n {
            if i > 0 {
                s.push(' ');
            }
            s.push_str(words[rng.below(words.len())]);
        }
        s.push_str(".\n");
    }
    s
}

pub const GRAD_TOL: f64 = 1e-4;

fn every_third_off(rows: usize, cols: usize) -> LayerMask {
    LayerMask::from_active(0, rows, cols, (0..rows * cols).filter(|i| i % 3 != 1))
}

/// Worst finite-difference error of every differentiable op, by name.
/// Masked weight entries are skipped: their gradient is defined but moving
/// them does not change the output.
pub fn op_suite() -> Vec<(&'static str, f64)> {
    let mut rng = Rng::new(1);
    let mut out = Vec::new();
    let a = random_tensor(3, 4, &mut rng);
    let b = random_tensor(4, 5, &mut rng);
    let c = random_tensor(3, 5, &mut rng);
    let d = random_tensor(3, 5, &mut rng);
    out.push(("matmul", gradcheck(&[a.clone(), b.clone()], |t, v| t.matmul(v[0], v[1]).unwrap())));
    out.push(("add", gradcheck(&[c.clone(), d.clone()], |t, v| t.add(v[0], v[1]).unwrap())));
    out.push(("mul", gradcheck(&[c.clone(), d], |t, v| t.mul(v[0], v[1]).unwrap())));
    out.push(("gelu", gradcheck(&[c], |t, v| t.gelu(v[0]))));

    let mask = every_third_off(4, 5);
    out.push((
        "masked_matmul",
        gradcheck_except(
            &[a.clone(), b],
            |i, j| i == 1 && !mask.is_active(j),
            |t, v| t.masked_matmul(v[0], v[1], &mask).unwrap(),
        ),
    ));
    let wt = random_tensor(5, 4, &mut rng);
    let mask_t = every_third_off(5, 4);
    out.push((
        "masked_matmul_t",
        gradcheck_except(
            &[a.clone(), wt.clone()],
            |i, j| i == 1 && !mask_t.is_active(j),
            |t, v| t.masked_matmul_t(v[0], v[1], Some(&mask_t)).unwrap(),
        ),
    ));
    out.push(("matmul_t", gradcheck(&[a, wt], |t, v| t.masked_matmul_t(v[0], v[1], None).unwrap())));

    let x = random_tensor(4, 4, &mut rng);
    let allowed = strided_allowed(4, 2);
    out.push(("softmax_masked", gradcheck(std::slice::from_ref(&x), |t, v| t.softmax_masked(v[0], &allowed).unwrap())));
    let gain = random_tensor(1, 4, &mut rng);
    out.push(("layernorm", gradcheck(&[x.clone(), gain], |t, v| t.layernorm(v[0], v[1]).unwrap())));
    let table = random_tensor(5, 3, &mut rng);
    out.push(("gather", gradcheck(std::slice::from_ref(&table), |t, v| t.gather(v[0], &[0, 3, 3, 1], None).unwrap())));
    let tmask = every_third_off(5, 3);
    out.push((
        "gather_masked",
        gradcheck_except(
            &[table],
            |_, j| !tmask.is_active(j),
            |t, v| t.gather(v[0], &[4, 2, 0], Some(&tmask)).unwrap(),
        ),
    ));
    out.push((
        "cross_entropy",
        gradcheck(std::slice::from_ref(&x), |t, v| t.cross_entropy(v[0], &[0, 3, 2, 2]).unwrap()),
    ));
    out.push(("sum", gradcheck(&[x], |t, v| t.sum(v[0]))));

    let (batch, seq, width, heads) = (2, 5, 6, 2);
    let q = random_tensor(batch * seq, width, &mut rng);
    let k = random_tensor(batch * seq, width, &mut rng);
    let v = random_tensor(batch * seq, width, &mut rng);
    let patterns = [
        ("attention_strided", strided_allowed(seq, 2)),
        ("attention_fixed", AttentionPattern::fixed(seq, 3, 1).unwrap().to_mask(seq)),
        ("attention_dense", AttentionPattern::dense(seq).unwrap().to_mask(seq)),
    ];
    for (name, allowed) in patterns {
        let err = gradcheck(&[q.clone(), k.clone(), v.clone()], |t, x| {
            t.attention(x[0], x[1], x[2], batch, heads, &allowed).unwrap()
        });
        out.push((name, err));
    }
    out
}

/// Outcome of checking the full tiny-model loss against central differences.
pub struct ModelGradCheck {
    pub worst: f64,
    /// Live parameters compared.
    pub checked: usize,
    /// Masked parameters whose perturbation moved the loss.
    pub masked_moved: usize,
}

pub fn model_gradcheck(samples: usize, seed: u64) -> ModelGradCheck {
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        n_embd: 8,
        block_size: 4,
        vocab_size: 7,
        tie_embeddings: true,
        mask_lm_head: true,
    };
    let mut rng = Rng::new(seed);
    let state: ModelState<f64> = ModelState::new(cfg, 0.5, &mut rng).unwrap();
    let x = [1, 4, 2, 6, 0, 0, 3, 5];
    let y = [4, 2, 6, 1, 0, 3, 5, 5];
    let pattern = AttentionPattern::strided(4, 2).unwrap();
    let (_, grads) = state.loss_and_grad(&x, &y, 2, &pattern).unwrap();
    let h = 1e-5;
    let mut out = ModelGradCheck { worst: 0.0, checked: 0, masked_moved: 0 };
    for _ in 0..samples {
        let p = rng.below(state.params.len());
        let i = rng.below(state.params[p].data.len());
        let mut plus = state.clone();
        plus.params[p].data[i] += h;
        let mut minus = state.clone();
        minus.params[p].data[i] -= h;
        let numeric = (plus.loss(&x, &y, 2, &pattern).unwrap() - minus.loss(&x, &y, 2, &pattern).unwrap()) / (2.0 * h);
        if state.mask_for(p).is_some_and(|m| !m.is_active(i)) {
            if numeric != 0.0 {
                out.masked_moved += 1;
            }
            continue;
        }
        out.worst = out.worst.max(rel_err(grads[p][i], numeric));
        out.checked += 1;
    }
    out
}
