//! Accuracy metrics against ground truth.

use serde::{Deserialize, Serialize};

use crate::association::{min_cost_matching, CostMatrix};
use crate::error::Result;
use crate::geometry::{Target, Vec2};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub location_rmse: f64,
    /// Per-component velocity RMSE, when velocities were estimated.
    pub velocity_rmse: Option<Vec2>,
    /// Velocities attached to the wrong targets.
    pub swap: Option<bool>,
    /// Estimate index matched to each truth.
    pub matching: Vec<usize>,
    /// Truths left without an estimate of their own; they are scored
    /// against the nearest estimate.
    pub missed: usize,
}

/// Matches truths to estimates by minimum total distance.
///
/// Unmatched truths (fewer estimates than targets) fall back to the nearest
/// estimate so that missed detections are penalized.
pub fn match_truth(truth: &[Vec2], estimates: &[Vec2]) -> Result<(Vec<usize>, usize)> {
    let costs = CostMatrix::new(
        truth.len(),
        estimates.len(),
        truth
            .iter()
            .flat_map(|t| estimates.iter().map(move |e| t.distance(*e)))
            .collect(),
    )?;
    let mut matching = vec![usize::MAX; truth.len()];
    for (t, e) in min_cost_matching(&costs)? {
        matching[t] = e;
    }
    let mut missed = 0;
    for (t, m) in matching.iter_mut().enumerate() {
        if *m == usize::MAX {
            missed += 1;
            *m = (0..estimates.len())
                .min_by(|&a, &b| costs.get(t, a).total_cmp(&costs.get(t, b)))
                .unwrap_or(0);
        }
    }
    Ok((matching, missed))
}

pub fn evaluate(
    truth: &[Target],
    locations: &[Vec2],
    velocities: Option<&[Vec2]>,
    resolutions: Option<&[Vec2]>,
) -> Result<Option<Metrics>> {
    if truth.is_empty() || locations.is_empty() {
        return Ok(None);
    }
    let positions: Vec<Vec2> = truth.iter().map(|t| t.position).collect();
    let (matching, missed) = match_truth(&positions, locations)?;
    let n = truth.len() as f64;
    let location_rmse = (truth
        .iter()
        .zip(&matching)
        .map(|(t, &e)| (locations[e] - t.position).norm().powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let velocity_rmse = velocities.map(|v| {
        let (mut sx, mut sy) = (0.0, 0.0);
        for (t, &e) in truth.iter().zip(&matching) {
            let d = v[e] - t.velocity;
            sx += d.x * d.x;
            sy += d.y * d.y;
        }
        Vec2::new((sx / n).sqrt(), (sy / n).sqrt())
    });
    let swap = match (velocities, resolutions) {
        (Some(v), Some(r)) if truth.len() >= 2 && missed == 0 => Some(is_swapped(truth, &matching, v, r)?),
        _ => None,
    };
    Ok(Some(Metrics {
        location_rmse,
        velocity_rmse,
        swap,
        matching,
        missed,
    }))
}

/// The velocity-optimal pairing of estimates to truths differs from the
/// location-optimal one, and under the location pairing some velocity
/// component misses its truth by more than the velocity resolution.
fn is_swapped(truth: &[Target], matching: &[usize], velocities: &[Vec2], resolutions: &[Vec2]) -> Result<bool> {
    let scaled = |t: &Target, e: usize| {
        let d = velocities[e] - t.velocity;
        let r = resolutions[e];
        (d.x / r.x.max(1e-12)).powi(2) + (d.y / r.y.max(1e-12)).powi(2)
    };
    let costs = CostMatrix::new(
        truth.len(),
        velocities.len(),
        truth
            .iter()
            .flat_map(|t| (0..velocities.len()).map(move |e| scaled(t, e)))
            .collect(),
    )?;
    let by_velocity = min_cost_matching(&costs)?;
    let differs = by_velocity.iter().any(|&(t, e)| matching[t] != e);
    let exceeds = truth.iter().zip(matching).any(|(t, &e)| {
        let d = velocities[e] - t.velocity;
        d.x.abs() > resolutions[e].x || d.y.abs() > resolutions[e].y
    });
    Ok(differs && exceeds)
}
