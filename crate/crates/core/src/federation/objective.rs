//! Local training objectives shared by every client update: adapted task
//! loss, the divergence term toward a reference model, the proximal term,
//! and the two-classifier discrepancy.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::Episode;
use crate::diffcore::{
    self, adapted_grad_with, backward, forward_trace, logit_kl_grad, pair_kl_grad, task_value_grad,
    Adaptation, Matrix, ModelSpec,
};

/// An episode with its support ∪ query inputs stacked once.
pub(crate) struct Prepared<'a> {
    pub episode: &'a Episode,
    pub inputs: Matrix,
    /// Reference-model logits on `inputs`, when the divergence term is
    /// active.
    pub reference: Option<Vec<f64>>,
}

pub(crate) fn prepare<'a>(spec: &ModelSpec, episodes: &'a [Episode], reference: Option<&[f64]>) -> Vec<Prepared<'a>> {
    episodes
        .iter()
        .map(|episode| {
            let inputs = episode.all_inputs();
            let reference = reference.map(|r| diffcore::logits_of(spec, r, &inputs));
            Prepared {
                episode,
                inputs,
                reference,
            }
        })
        .collect()
}

/// `KL(p_ref ‖ p_params)` averaged over the rows of `inputs`, with its
/// gradient w.r.t. `params` only. `reference` holds the reference logits.
pub(crate) fn divergence_grad(spec: &ModelSpec, params: &[f64], inputs: &Matrix, reference: &[f64]) -> (f64, Vec<f64>) {
    let trace = forward_trace(spec, params, inputs);
    let (v, d) = logit_kl_grad(reference, trace.logits(), spec.n_way);
    (v, backward(spec, params, &trace, d))
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Divergence {
    pub gamma: f64,
    pub at_adapted: bool,
}

/// Per-model local loss `L_k`: adapted query loss plus `γ·KL(p_ref ‖ p_w)`.
pub(crate) fn model_loss(
    spec: &ModelSpec,
    params: &[f64],
    p: &Prepared<'_>,
    a: &Adaptation,
    div: Option<Divergence>,
) -> (f64, Vec<f64>) {
    let ep = p.episode;
    let task = |w: &[f64]| task_value_grad(spec, w, &ep.query);
    let Some(div) = div else {
        return adapted_grad_with(spec, params, &ep.support, a, task);
    };
    let reference = p.reference.as_deref().expect("reference outputs prepared");
    let add = |(mut v, mut g): (f64, Vec<f64>), (dv, dg): (f64, Vec<f64>)| {
        v += div.gamma * dv;
        for (gi, d) in g.iter_mut().zip(&dg) {
            *gi += div.gamma * d;
        }
        (v, g)
    };
    if div.at_adapted {
        adapted_grad_with(spec, params, &ep.support, a, |w| {
            add(task(w), divergence_grad(spec, w, &p.inputs, reference))
        })
    } else {
        let t = adapted_grad_with(spec, params, &ep.support, a, task);
        add(t, divergence_grad(spec, params, &p.inputs, reference))
    }
}

/// Mean of [`model_loss`] over a chunk, reduced in episode order.
pub(crate) fn mean_model_loss(
    spec: &ModelSpec,
    params: &[f64],
    chunk: &[Prepared<'_>],
    a: &Adaptation,
    div: Option<Divergence>,
) -> (f64, Vec<f64>) {
    let mut value = 0.0;
    let mut grad = vec![0.0; params.len()];
    for p in chunk {
        let (v, g) = model_loss(spec, params, p, a, div);
        value += v;
        for (acc, gi) in grad.iter_mut().zip(&g) {
            *acc += gi;
        }
    }
    let inv = 1.0 / chunk.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    (value * inv, grad)
}

/// Mean over the chunk of `KL(p(Θ,θ_a) ‖ p(Θ,θ_b))` on support ∪ query,
/// with gradients `(d generator, d θ_a, d θ_b)`.
pub(crate) fn discrepancy_grad(
    spec: &ModelSpec,
    generator: &[f64],
    cls_a: &[f64],
    cls_b: &[f64],
    chunk: &[Prepared<'_>],
) -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
    let join = |c: &[f64]| -> Vec<f64> { generator.iter().chain(c).copied().collect() };
    let (wa, wb) = (join(cls_a), join(cls_b));
    let split = generator.len();
    let mut value = 0.0;
    let mut dg = vec![0.0; split];
    let mut da = vec![0.0; cls_a.len()];
    let mut db = vec![0.0; cls_b.len()];
    for p in chunk {
        let ta = forward_trace(spec, &wa, &p.inputs);
        let tb = forward_trace(spec, &wb, &p.inputs);
        let (v, za, zb) = pair_kl_grad(ta.logits(), tb.logits(), spec.n_way);
        value += v;
        let ga = backward(spec, &wa, &ta, za);
        let gb = backward(spec, &wb, &tb, zb);
        for i in 0..split {
            dg[i] += ga[i] + gb[i];
        }
        for (acc, g) in da.iter_mut().zip(&ga[split..]) {
            *acc += g;
        }
        for (acc, g) in db.iter_mut().zip(&gb[split..]) {
            *acc += g;
        }
    }
    let inv = 1.0 / chunk.len() as f64;
    for v in dg.iter_mut().chain(da.iter_mut()).chain(db.iter_mut()) {
        *v *= inv;
    }
    (value * inv, dg, da, db)
}
