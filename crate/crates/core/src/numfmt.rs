//! Lossless text formatting of floating-point output.

/// Formats `x` with 17 significant digits, which round-trips every `f64`.
pub fn format_f64(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() {
            "NaN".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    format!("{x:.16e}")
}
