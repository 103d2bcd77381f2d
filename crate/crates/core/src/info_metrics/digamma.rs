use super::MetricsError;

/// Arguments below this are shifted up with `psi(x) = psi(x + 1) - 1/x`
/// before the asymptotic expansion is used.
const ASYMPTOTIC_FROM: f64 = 10.0;

/// Digamma function `psi(x) = d/dx ln Gamma(x)` for `x > 0`.
pub fn digamma(x: f64) -> Result<f64, MetricsError> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(MetricsError::NonPositiveArgument(x));
    }
    Ok(psi(x))
}

/// Unchecked digamma for positive finite arguments.
pub(crate) fn psi(mut x: f64) -> f64 {
    let mut shift = 0.0;
    while x < ASYMPTOTIC_FROM {
        shift -= 1.0 / x;
        x += 1.0;
    }
    // ln x - 1/(2x) - sum_k B_2k / (2k x^2k), through k = 7.
    let inv2 = 1.0 / (x * x);
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    shift + x.ln() - 0.5 / x - series
}
