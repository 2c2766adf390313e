//! Dense `f64` numerics: tensors, a reverse-mode tape, layers and AdamW.

mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use graph::{gelu, Graph, Var};
pub use layers::{
    dense_forward, perceiver_resample, Activation, CausalTransformer, LayerNorm, Linear, Mlp,
    PerceiverResampler, TransformerConfig,
};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Gradients, ParamEntry, ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;

/// Central finite difference of `loss` with respect to one coordinate.
///
/// `loss` is re-evaluated on a perturbed copy of `store`; the original is
/// untouched.
pub fn central_difference(
    store: &ParamStore,
    id: ParamId,
    coord: usize,
    step: f64,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> f64 {
    let mut s = store.clone();
    let x0 = s.get(id).data()[coord];
    s.get_mut(id).data_mut()[coord] = x0 + step;
    let up = loss(&s);
    s.get_mut(id).data_mut()[coord] = x0 - step;
    let down = loss(&s);
    (up - down) / (2.0 * step)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
