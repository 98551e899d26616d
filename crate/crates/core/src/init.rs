//! Deterministic starting point for the unknown vector.

use crate::model::{free_unknowns, BoundData, Model};

/// Parameters start at 1 when they scale a latent in a measurement equation
/// and at 0 otherwise. A latent's scores start at the centered values of its
/// scale indicator divided by the indicator's slope; without such an
/// indicator, at the centered values of the first manifest sharing an
/// equation with it. Columns with a hard `normalize` are rescaled to unit
/// variance.
pub(crate) fn initial_point(model: &Model, data: &BoundData) -> Vec<f64> {
    let n = data.n_cases();
    let lay = free_unknowns(model, n);
    let mut u = vec![0.0; lay.len()];
    for (slot, &s) in model.free_params().iter().enumerate() {
        u[lay.param(slot)] = if model.is_loading_like(s) { 1.0 } else { 0.0 };
    }
    for q in 0..model.n_latent() {
        let source = match model.scale_indicator(q) {
            Some(ind) => Some((ind.manifest, ind.slope)),
            None => model
                .equations()
                .iter()
                .find(|eq| eq.latents.contains(&q) && !eq.manifests.is_empty())
                .map(|eq| (*eq.manifests.iter().next().expect("non-empty"), 1.0)),
        };
        let mut col = match source {
            Some((j, slope)) => {
                let x = data.column(j);
                let mean = crate::stats::mean(&x);
                x.iter().map(|v| (v - mean) / slope).collect()
            }
            None => vec![0.0; n],
        };
        if model.hard_normalize(q) {
            let ss: f64 = col.iter().map(|v| v * v).sum();
            if ss > 0.0 {
                let s = (n as f64 / ss).sqrt();
                col.iter_mut().for_each(|v| *v *= s);
            } else {
                // any non-constant column works; the projection fixes its scale
                col = (0..n).map(|i| (i as f64 + 0.5) / n as f64 - 0.5).collect();
                let ss: f64 = col.iter().map(|v| v * v).sum();
                let s = if ss > 0.0 {
                    (n as f64 / ss).sqrt()
                } else {
                    1.0
                };
                col.iter_mut().for_each(|v| *v *= s);
            }
        }
        for (i, v) in col.into_iter().enumerate() {
            u[lay.latent(i, q)] = v;
        }
    }
    u
}
