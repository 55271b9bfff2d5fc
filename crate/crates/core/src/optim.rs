//! SGD with classical momentum: `v <- momentum * v + g`, `p <- p - lr * v`.

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::model::{Layer, Model};
use crate::tensor::Tensor;

/// Velocity buffers mirroring the model's parameter tensors, zero at start.
#[derive(Debug, Clone)]
pub struct MomentumState {
    v: Vec<Option<(Tensor, Tensor)>>,
}

impl MomentumState {
    pub fn new(model: &Model) -> Self {
        let v = model
            .layers()
            .iter()
            .map(|layer| match layer {
                Layer::Conv2d { weight, bias, .. } | Layer::Dense { weight, bias, .. } => Some((
                    Tensor::zeros(weight.shape()).expect("valid shape"),
                    Tensor::zeros(bias.shape()).expect("valid shape"),
                )),
                _ => None,
            })
            .collect();
        MomentumState { v }
    }
}

/// One optimizer step in place. Every parameterized layer must have a
/// gradient of matching shape.
pub fn sgd_step(
    model: &mut Model,
    grads: &Gradients,
    lr: f64,
    momentum: f64,
    state: &mut MomentumState,
) -> Result<()> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::invalid_param("lr", format!("{lr} (need finite >= 0)")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::invalid_param(
            "momentum",
            format!("{momentum} (need 0 <= momentum < 1)"),
        ));
    }
    let n = model.layers().len();
    if grads.layers.len() != n || state.v.len() != n {
        return Err(Error::shape(
            "sgd_step",
            format!("{n} layer gradients"),
            format!("{} grads, {} velocities", grads.layers.len(), state.v.len()),
        ));
    }
    for (i, layer) in model.layers_mut().iter_mut().enumerate() {
        let (weight, bias) = match layer {
            Layer::Conv2d { weight, bias, .. } | Layer::Dense { weight, bias, .. } => (weight, bias),
            _ => {
                if grads.layers[i].is_some() {
                    return Err(Error::shape(
                        format!("sgd_step layer {i}"),
                        "no gradient for a parameterless layer",
                        "gradient present",
                    ));
                }
                continue;
            }
        };
        let Some((gw, gb)) = &grads.layers[i] else {
            return Err(Error::shape(
                format!("sgd_step layer {i}"),
                "weight and bias gradients",
                "none",
            ));
        };
        let (vw, vb) = state.v[i].as_mut().expect("state mirrors the model");
        for (p, g, v) in [(weight, gw, vw), (bias, gb, vb)] {
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    format!("sgd_step layer {i}"),
                    format!("{:?}", p.shape()),
                    format!("{:?}", g.shape()),
                ));
            }
            let vd = v.data_mut();
            let pd = p.data_mut();
            for ((pv, vv), gv) in pd.iter_mut().zip(vd.iter_mut()).zip(g.data()) {
                *vv = momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
    }
    Ok(())
}
