use crate::error::{Error, Result};

/// Risk by the horizon under proportional hazards: `1 - S0^exp(lp + b)`.
pub fn predict_risk(lp: f64, b: f64, s0: f64) -> f64 {
    -(s0.ln() * (lp + b).exp()).exp_m1()
}

/// Frailty-adjusted risk `1 - (1 - base)^z`.
pub fn adjust_risk(base: f64, frailty: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&base) {
        return Err(Error::Contract(format!("base risk must be in [0, 1), got {base}")));
    }
    if !(frailty > 0.0 && frailty.is_finite()) {
        return Err(Error::Contract(format!("frailty must be positive, got {frailty}")));
    }
    Ok(-((-base).ln_1p() * frailty).exp_m1())
}
