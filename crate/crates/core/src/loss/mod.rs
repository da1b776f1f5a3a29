//! Training objective and evaluation metrics.

mod metrics;
mod weight_map;

pub use metrics::{ClassIou, SegMetrics};
pub use weight_map::{
    boundary_distances, boundary_weight_map, ClassBalance, WeightMap, WeightMapParams,
};

use crate::error::Result;
use crate::tensor::{CrossEntropyTarget, Graph, Scalar, Var};

/// Class names in id order for the default 4-class setup.
pub const DEFAULT_CLASS_NAMES: [&str; 4] = ["background", "car", "pedestrian", "cyclist"];

/// Per-pixel class distribution `p_k(x)` of `N×K×H×W` logits.
pub fn softmax_probs<T: Scalar>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    g.softmax_channels(logits)
}

/// Scalar loss together with the number of pixels that contributed.
#[derive(Clone, Copy, Debug)]
pub struct LossValue {
    pub value: Var,
    pub valid_pixel_count: usize,
}

/// `−(1/Σw)·Σ_{m(x)>0} w(x)·log p_{l(x)}(x)` over a batch.
///
/// `labels`, `mask` and `weights` are `N×H×W` row-major. Pixels with
/// `mask = 0` contribute neither to the value nor to the gradient.
pub fn masked_weighted_cross_entropy<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[u8],
    mask: &[u8],
    weights: &[T],
) -> Result<LossValue> {
    let value = g.masked_cross_entropy(
        logits,
        CrossEntropyTarget {
            labels,
            mask,
            weights,
        },
    )?;
    Ok(LossValue {
        value,
        valid_pixel_count: mask.iter().filter(|&&m| m != 0).count(),
    })
}

/// Per-pixel argmax over the channel axis of `N×K×H×W` logits.
pub fn argmax_channels<T: Scalar>(logits: &crate::tensor::Tensor<T>) -> Result<Vec<u8>> {
    let (n, k, h, w) = logits.dims4("argmax_channels")?;
    let p = h * w;
    let data = logits.data();
    let mut out = vec![0u8; n * p];
    for b in 0..n {
        for i in 0..p {
            let mut best = 0;
            for c in 1..k {
                if data[(b * k + c) * p + i] > data[(b * k + best) * p + i] {
                    best = c;
                }
            }
            out[b * p + i] = best as u8;
        }
    }
    Ok(out)
}
