//! State-dependent densities on a grid, weighted by marginal stationary probabilities.

use chmm::emissions::{log_density, ChainEmissions};
use chmm::numfmt::format_f64;
use chmm::Model;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct DensityRow {
    /// 1-based.
    pub chain: usize,
    /// 1-based.
    pub state: usize,
    pub x: f64,
    pub density: f64,
    pub weight: f64,
    pub weighted_density: f64,
}

impl DensityRow {
    pub const HEADER: [&'static str; 6] = ["chain", "state", "x", "density", "weight", "weighted_density"];

    pub fn cells(&self) -> Vec<String> {
        vec![
            self.chain.to_string(),
            self.state.to_string(),
            format_f64(self.x),
            format_f64(self.density),
            format_f64(self.weight),
            format_f64(self.weighted_density),
        ]
    }
}

/// Default plotting range of one stream.
pub fn default_range(stream: &ChainEmissions) -> (f64, f64) {
    match stream {
        ChainEmissions::Beta { .. } => (1e-3, 1.0 - 1e-3),
        ChainEmissions::Normal { states } => spread(states.iter().map(|p| (p.mean, p.sd))),
        ChainEmissions::NormalRegression { states, .. } => {
            spread(states.iter().map(|p| (p.coefs[0], p.sd)))
        }
    }
}

fn spread(it: impl Iterator<Item = (f64, f64)>) -> (f64, f64) {
    it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (mu, sd)| {
        (lo.min(mu - 4.0 * sd), hi.max(mu + 4.0 * sd))
    })
}

/// `points` equally spaced values per (chain, state). Regression densities are
/// evaluated at the covariate center, where the mean equals the intercept.
pub fn density_grid(model: &Model, points: usize, range: Option<(f64, f64)>) -> CliResult<Vec<DensityRow>> {
    if points < 2 {
        return Err(CliError::usage("density grid needs at least 2 points"));
    }
    if let Some((lo, hi)) = range {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(CliError::usage(format!("invalid density range [{lo}, {hi}]")));
        }
    }
    let weights = model.chain_marginal_stationary()?;
    let mut rows = Vec::new();
    for (m, stream) in model.emissions().streams().iter().enumerate() {
        let (lo, hi) = range.unwrap_or_else(|| default_range(stream));
        if matches!(stream, ChainEmissions::Beta { .. }) && !(lo > 0.0 && hi < 1.0) {
            return Err(CliError::usage(format!(
                "chain {} is beta-distributed; the grid must lie inside (0, 1), got [{lo}, {hi}]",
                m + 1
            )));
        }
        let center: Option<Vec<f64>> = match stream {
            ChainEmissions::NormalRegression { scaling, states } => Some(if scaling.center.is_empty() {
                vec![0.0; states[0].coefs.len() - 1]
            } else {
                scaling.center.clone()
            }),
            _ => None,
        };
        for s in 0..stream.num_states() {
            let w = weights[m][s];
            for i in 0..points {
                let x = lo + (hi - lo) * i as f64 / (points - 1) as f64;
                let density = log_density(stream.state(s), x, center.as_deref()).exp();
                rows.push(DensityRow { chain: m + 1, state: s + 1, x, density, weight: w, weighted_density: w * density });
            }
        }
    }
    Ok(rows)
}
