use super::{AdamSlot, GradMap, ParameterSet, Tensor};
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

fn check_grads(params: &ParameterSet, grads: &GradMap) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params
            .get(name)
            .ok_or_else(|| Error::input(format!("gradient for unknown parameter {name}")))?;
        if !p.value.same_shape(g) {
            return Err(Error::input(format!(
                "gradient for {name} has shape {:?}, parameter has {:?}",
                g.shape(),
                p.value.shape()
            )));
        }
    }
    Ok(())
}

/// `p ← p − alpha·g` for every parameter with a gradient entry.
pub fn sgd_step(params: &mut ParameterSet, grads: &GradMap, alpha: f64) -> Result<()> {
    if !(alpha >= 0.0) {
        return Err(Error::input(format!("learning rate must be >= 0, got {alpha}")));
    }
    check_grads(params, grads)?;
    for (name, g) in grads.iter() {
        params.value_mut(name).add_scaled(g, -alpha);
    }
    Ok(())
}

/// One bias-corrected Adam update with learning rate `beta`.
///
/// Moments and step counts are per parameter and only advance for
/// parameters present in `grads`. Nothing is modified if any gradient is
/// non-finite.
pub fn adam_step(params: &mut ParameterSet, grads: &GradMap, beta: f64) -> Result<()> {
    if !(beta >= 0.0) {
        return Err(Error::input(format!("learning rate must be >= 0, got {beta}")));
    }
    check_grads(params, grads)?;
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::numerical(
            "adam_step",
            format!("non-finite gradient for {name}"),
        ));
    }
    for (name, g) in grads.iter() {
        let p = params.get_mut(name).expect("checked above");
        let slot = p.adam.get_or_insert_with(|| AdamSlot {
            m: Tensor::zeros(g.shape()),
            v: Tensor::zeros(g.shape()),
            step: 0,
        });
        slot.step += 1;
        let t = slot.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        let values = p.value.data_mut();
        let (m, v) = (slot.m.data_mut(), slot.v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            values[i] -= beta * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}
