//! Piecewise-monotone intensity curves with smoothstep easing between extrema.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::annotation::{detect_keyframes, MAX_INTENSITY};
use crate::error::{validation, Result};

fn smoothstep(x: f64) -> f64 {
    x * x * (3.0 - 2.0 * x)
}

/// Curve of `frame_count` values that is constant before the first and after
/// the last extremum and eases monotonically between consecutive extrema.
pub fn make_trajectory(extrema: &[(usize, f64)], frame_count: usize) -> Result<Vec<f64>> {
    if extrema.is_empty() {
        return Err(validation("trajectory needs at least one extremum"));
    }
    for &(f, v) in extrema {
        if f >= frame_count {
            return Err(validation(format!("extremum frame {f} beyond {frame_count} frames")));
        }
        if !(0.0..=1.0).contains(&v) {
            return Err(validation(format!("extremum value {v} outside [0,1]")));
        }
    }
    for w in extrema.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(validation("extremum frames must be strictly increasing"));
        }
        if w[1].1 == w[0].1 {
            return Err(validation("consecutive extrema must differ in value"));
        }
    }
    for w in extrema.windows(3) {
        if (w[1].1 > w[0].1) == (w[2].1 > w[1].1) {
            return Err(validation("extrema must alternate between highs and lows"));
        }
    }

    let mut curve = vec![extrema[0].1; frame_count];
    for w in extrema.windows(2) {
        let ((f0, v0), (f1, v1)) = (w[0], w[1]);
        for (i, slot) in curve.iter_mut().enumerate().take(f1 + 1).skip(f0) {
            let x = (i - f0) as f64 / (f1 - f0) as f64;
            *slot = v0 + (v1 - v0) * smoothstep(x);
        }
    }
    let (last_f, last_v) = extrema[extrema.len() - 1];
    for slot in &mut curve[last_f..] {
        *slot = last_v;
    }
    Ok(curve)
}

/// Integer labels `round(5 * v)`.
pub fn quantize(curve: &[f64]) -> Vec<u8> {
    let scale = f64::from(MAX_INTENSITY);
    curve.iter().map(|v| (v * scale).round() as u8).collect()
}

/// Shape of one planted curve before it is turned into values.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePlan {
    /// Frames of all extrema, including the two sequence endpoints.
    pub frames: Vec<usize>,
    /// Integer level reached at each extremum.
    pub levels: Vec<u8>,
}

impl CurvePlan {
    /// Interior extremum frames.
    pub fn interior(&self) -> &[usize] {
        &self.frames[1..self.frames.len() - 1]
    }

    /// Whether the first interior extremum is a peak.
    pub fn rises_first(&self) -> bool {
        self.levels[1] > self.levels[0]
    }
}

/// Random extremum timing: `interior` extrema spread over the sequence with
/// jitter, keeping every span at least `min_span` frames long.
pub fn plan_timing<R: Rng + ?Sized>(frame_count: usize, interior: usize, min_span: usize, rng: &mut R) -> Result<Vec<usize>> {
    let spans = interior + 1;
    if frame_count < spans * min_span + 1 {
        return Err(validation(format!(
            "{frame_count} frames cannot hold {interior} extrema {min_span} frames apart"
        )));
    }
    let last = frame_count - 1;
    let slack = last - spans * min_span;
    // Distribute the slack over the spans with random cut points.
    let mut cuts: Vec<usize> = (0..interior).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut frames = vec![0];
    for (k, cut) in cuts.iter().enumerate() {
        frames.push((k + 1) * min_span + cut);
    }
    frames.push(last);
    Ok(frames)
}

/// Alternating levels for `count` extrema. Lows are 0 or 1 and highs come
/// from `peak_level` clamped to at least two above the neighbouring lows.
pub fn plan_levels<R: Rng + ?Sized>(
    count: usize,
    rises_first: bool,
    peak_level: &mut dyn FnMut(&mut R) -> u8,
    rng: &mut R,
) -> Vec<u8> {
    let mut levels: Vec<u8> = Vec::with_capacity(count);
    for k in 0..count {
        let high = (k % 2 == 1) == rises_first;
        let level = if high {
            let floor = levels.last().map_or(2, |&low| low + 2);
            peak_level(rng).clamp(floor, MAX_INTENSITY)
        } else {
            let cap = levels.last().map_or(1, |&peak| (peak - 2).min(1));
            rng.random_range(0..=cap)
        };
        levels.push(level);
    }
    levels
}

/// Values that land on each planted level with only the extremum frame on the
/// extreme plateau: peaks sit just above the lower rounding edge of their
/// level and valleys just below the upper one.
pub fn plan_values(plan: &CurvePlan) -> Vec<f64> {
    let scale = f64::from(MAX_INTENSITY);
    let n = plan.frames.len();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let level = f64::from(plan.levels[k]);
        if k == 0 || k == n - 1 {
            out.push(level / scale);
            continue;
        }
        // Smallest per-frame change next to the extremum, in level units,
        // using a lower bound on the level distance.
        let mut step = f64::INFINITY;
        for j in [k - 1, k + 1] {
            let len = plan.frames[k].abs_diff(plan.frames[j]) as f64;
            let dist = (f64::from(plan.levels[k]) - f64::from(plan.levels[j])).abs() - 1.0;
            step = step.min(dist * (1.0 - smoothstep(1.0 - 1.0 / len)));
        }
        let margin = (0.25 * step).min(0.25);
        let peak = plan.levels[k] > plan.levels[k - 1];
        let v = if peak { level - 0.5 + margin } else { level + 0.5 - margin };
        out.push((v / scale).clamp(0.0, 1.0));
    }
    out
}

/// Builds the curve for a plan and checks that detection on its labels
/// returns exactly the planted frames.
pub fn realize(plan: &CurvePlan, frame_count: usize) -> Result<Option<Vec<f64>>> {
    let values = plan_values(plan);
    let extrema: Vec<(usize, f64)> = plan.frames.iter().copied().zip(values).collect();
    let curve = make_trajectory(&extrema, frame_count)?;
    let detected = detect_keyframes(0, &quantize(&curve))?;
    Ok((detected.frame_indices == plan.frames).then_some(curve))
}

/// Draws an interior extremum count in `1..=3`.
pub fn draw_interior_count<R: Rng + ?Sized>(rng: &mut R) -> usize {
    *[1usize, 2, 3].choose(rng).expect("non-empty")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn endpoint_interpolation() {
        let c = make_trajectory(&[(0, 0.0), (10, 1.0)], 11).unwrap();
        assert_eq!(c[0], 0.0);
        assert_eq!(c[10], 1.0);
        assert!(c.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn single_extremum_is_constant() {
        assert_eq!(make_trajectory(&[(0, 0.5)], 5).unwrap(), vec![0.5; 5]);
        assert_eq!(make_trajectory(&[(2, 0.5)], 5).unwrap(), vec![0.5; 5]);
    }

    #[test]
    fn rejects_bad_extrema() {
        assert!(make_trajectory(&[(0, 0.0), (5, 1.0), (9, 1.0)], 10).is_err());
        assert!(make_trajectory(&[(0, 0.0), (5, 0.5), (9, 1.0)], 10).is_err());
        assert!(make_trajectory(&[(3, 0.0), (3, 1.0)], 10).is_err());
        assert!(make_trajectory(&[(0, 1.5)], 10).is_err());
        assert!(make_trajectory(&[], 10).is_err());
    }

    #[test]
    fn hits_each_extremum_and_stays_monotone() {
        let ext = [(0, 0.2), (7, 0.9), (15, 0.1), (30, 0.6)];
        let c = make_trajectory(&ext, 40).unwrap();
        for &(f, v) in &ext {
            assert!((c[f] - v).abs() < 1e-12);
        }
        assert!(c[0..=7].windows(2).all(|w| w[1] > w[0]));
        assert!(c[7..=15].windows(2).all(|w| w[1] < w[0]));
        assert!(c[30..].iter().all(|&v| v == 0.6));
    }

    #[test]
    fn planned_curves_round_trip_through_detection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let interior = draw_interior_count(&mut rng);
            let frames = plan_timing(120, interior, 20, &mut rng).unwrap();
            let rises = rng.random_bool(0.5);
            let levels = plan_levels(frames.len(), rises, &mut |r: &mut ChaCha8Rng| r.random_range(2..=5), &mut rng);
            let plan = CurvePlan { frames, levels };
            let curve = realize(&plan, 120).unwrap().expect("planted extrema recovered");
            let labels = quantize(&curve);
            for (f, l) in plan.frames.iter().zip(&plan.levels) {
                assert_eq!(labels[*f], *l);
            }
        }
    }
}
