//! Average-return learning curves.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Gradient updates performed so far.
    pub update: usize,
    /// Mean raw return of the episodes behind this point.
    pub avg_return: f64,
}

/// `update,avg_return` rows.
pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("update,avg_return\n");
    for p in curve {
        out.push_str(&format!("{},{}\n", p.update, p.avg_return));
    }
    out
}

/// First update whose trailing-window mean reaches `frac` of the plateau,
/// the mean of the final `tail` share of the curve.
pub fn updates_to_fraction(curve: &[CurvePoint], frac: f64, window: usize, tail: f64) -> Option<usize> {
    if curve.is_empty() {
        return None;
    }
    let vals: Vec<f64> = curve.iter().map(|p| p.avg_return).collect();
    let tail_n = ((vals.len() as f64 * tail).ceil() as usize).clamp(1, vals.len());
    let plateau = mean(&vals[vals.len() - tail_n..]);
    let w = window.max(1);
    (0..vals.len()).find_map(|i| {
        let lo = (i + 1).saturating_sub(w);
        (mean(&vals[lo..=i]) >= frac * plateau).then_some(curve[i].update)
    })
}

/// Groups points into consecutive blocks spanning `every` updates and
/// averages each block, labelled by the last update it covers.
pub fn block_mean(curve: &[CurvePoint], every: usize) -> Vec<CurvePoint> {
    let every = every.max(1);
    let mut out: Vec<CurvePoint> = Vec::new();
    let mut acc: Vec<f64> = Vec::new();
    for p in curve {
        acc.push(p.avg_return);
        if p.update % every == 0 {
            out.push(CurvePoint {
                update: p.update,
                avg_return: mean(&acc),
            });
            acc.clear();
        }
    }
    if let (false, Some(last)) = (acc.is_empty(), curve.last()) {
        out.push(CurvePoint {
            update: last.update,
            avg_return: mean(&acc),
        });
    }
    out
}

/// Pointwise mean of curves sampled at the same updates.
pub fn mean_curve(curves: &[Vec<CurvePoint>]) -> Vec<CurvePoint> {
    let Some(first) = curves.first() else {
        return Vec::new();
    };
    first
        .iter()
        .enumerate()
        .map(|(i, p)| {
            assert!(
                curves.iter().all(|c| c[i].update == p.update),
                "curves are sampled at different updates"
            );
            let vals: Vec<f64> = curves.iter().map(|c| c[i].avg_return).collect();
            CurvePoint {
                update: p.update,
                avg_return: mean(&vals),
            }
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0, |acc, x| acc + x) / xs.len() as f64
}
