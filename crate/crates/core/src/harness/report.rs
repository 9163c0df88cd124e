//! Resource-accuracy curves and knee detection.

use serde::{Deserialize, Serialize};

use super::run::MetricsRow;
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: u64,
    pub f: Real,
    pub accuracy: Real,
}

/// Points of a run ordered by decreasing `F`.
pub fn curve(rows: &[MetricsRow]) -> Result<Vec<CurvePoint>> {
    if rows.is_empty() {
        return Err(Error::Metrics("no metrics rows".into()));
    }
    let mut pts: Vec<CurvePoint> = rows
        .iter()
        .map(|r| CurvePoint {
            iteration: r.iteration,
            f: r.f,
            accuracy: r.eval_accuracy,
        })
        .collect();
    pts.sort_by(|a, b| b.f.total_cmp(&a.f).then(a.iteration.cmp(&b.iteration)));
    Ok(pts)
}

/// Mean accuracy of rows with `F` within `target * (1 +- window)`.
///
/// When no row falls inside the window the row closest to the target is
/// used; the second value reports whether that fallback happened.
pub fn window_accuracy(rows: &[MetricsRow], target: Real, window: Real) -> Option<(Real, bool)> {
    let inside: Vec<Real> = rows
        .iter()
        .filter(|r| (r.f - target).abs() <= window * target)
        .map(|r| r.eval_accuracy)
        .collect();
    if !inside.is_empty() {
        return Some((inside.iter().sum::<Real>() / inside.len() as Real, false));
    }
    rows.iter()
        .min_by(|a, b| (a.f - target).abs().total_cmp(&(b.f - target).abs()))
        .map(|r| (r.eval_accuracy, true))
}

/// Continuous two-segment linear fit `acc = a + b F + c max(0, F_k - F)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Knee {
    pub f: Real,
    /// Slope of accuracy vs `F` above the knee.
    pub slope_above: Real,
    /// Slope below the knee.
    pub slope_below: Real,
    pub sse: Real,
}

fn solve3(mut a: [[f64; 4]; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        for row in 0..3 {
            if row != col {
                let k = a[row][col] / a[col][col];
                for c in col..4 {
                    a[row][c] -= k * a[col][c];
                }
            }
        }
    }
    Some([a[0][3] / a[0][0], a[1][3] / a[1][1], a[2][3] / a[2][2]])
}

/// Least-squares hinge fit over every interior breakpoint with at least
/// `min_side` points on each side. `F` is rescaled internally for conditioning.
pub fn knee(points: &[CurvePoint], min_side: usize) -> Option<Knee> {
    let min_side = min_side.max(2);
    if points.len() < 2 * min_side {
        return None;
    }
    let scale = points.iter().map(|p| p.f.abs()).fold(0.0, Real::max).max(1e-300) as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.f as f64 / scale).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.accuracy as f64).collect();
    let mut sorted = xs.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut best: Option<Knee> = None;
    for &k in &sorted[min_side - 1..sorted.len() - min_side + 1] {
        let above = xs.iter().filter(|&&x| x >= k).count();
        if above < min_side || xs.len() - above + 1 < min_side {
            continue;
        }
        let basis = |x: f64| [1.0, x, (k - x).max(0.0)];
        let mut m = [[0.0f64; 4]; 3];
        for (&x, &y) in xs.iter().zip(&ys) {
            let b = basis(x);
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] += b[i] * b[j];
                }
                m[i][3] += b[i] * y;
            }
        }
        let Some(c) = solve3(m) else { continue };
        let sse: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(&x, &y)| {
                let b = basis(x);
                let e = c[0] + c[1] * b[1] + c[2] * b[2] - y;
                e * e
            })
            .sum();
        if best.map_or(true, |b| (sse as Real) < b.sse) {
            best = Some(Knee {
                f: (k * scale) as Real,
                slope_above: (c[1] / scale) as Real,
                slope_below: ((c[1] - c[2]) / scale) as Real,
                sse: sse as Real,
            });
        }
    }
    best
}

/// Human-readable curve table with the knee, if one is found.
pub fn format_report(points: &[CurvePoint], f_initial: Real) -> String {
    let mut out = String::from("iteration      F (GMAC)   F/F(0)   accuracy\n");
    for p in points {
        out.push_str(&format!(
            "{:>9} {:>13.6} {:>8.4} {:>10.4}\n",
            p.iteration,
            p.f / 1e9,
            p.f / f_initial,
            p.accuracy
        ));
    }
    match knee(points, 3) {
        Some(k) => out.push_str(&format!(
            "knee at F = {:.6} GMAC ({:.4} of initial); slope above {:.4e}, below {:.4e} per MAC\n",
            k.f / 1e9,
            k.f / f_initial,
            k.slope_above,
            k.slope_below
        )),
        None => out.push_str("too few points for a knee fit\n"),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(f: Real, accuracy: Real) -> CurvePoint {
        CurvePoint {
            iteration: 0,
            f,
            accuracy,
        }
    }

    #[test]
    fn recovers_exact_hinge() {
        // Flat at 0.9 above F = 40, then dropping 0.01 per unit.
        let pts: Vec<CurvePoint> = (0..=100)
            .rev()
            .map(|f| {
                let f = f as Real;
                pt(f, 0.9 - 0.01 * (40.0 - f).max(0.0))
            })
            .collect();
        let k = knee(&pts, 3).unwrap();
        assert!((k.f - 40.0).abs() < 1e-9, "{k:?}");
        assert!(k.slope_above.abs() < 1e-12);
        assert!((k.slope_below - 0.01).abs() < 1e-12);
        assert!(k.sse < 1e-20);
    }

    #[test]
    fn curve_sorted_and_single_point() {
        let row = |i: u64, f: Real| MetricsRow {
            iteration: i,
            phase: 0,
            f,
            f_sched: f,
            lambda_f: 0.0,
            f_mask: f,
            train_loss: None,
            eval_loss: 0.0,
            eval_accuracy: 0.5,
        };
        let c = curve(&[row(0, 10.0), row(1, 30.0), row(2, 20.0)]).unwrap();
        assert_eq!(c.iter().map(|p| p.f).collect::<Vec<_>>(), vec![30.0, 20.0, 10.0]);
        assert_eq!(curve(&[row(0, 1.0)]).unwrap().len(), 1);
        assert!(curve(&[]).is_err());
        assert!(knee(&c, 3).is_none());
    }

    #[test]
    fn window_average_and_fallback() {
        let row = |f: Real, a: Real| MetricsRow {
            iteration: 0,
            phase: 0,
            f,
            f_sched: f,
            lambda_f: 0.0,
            f_mask: f,
            train_loss: None,
            eval_loss: 0.0,
            eval_accuracy: a,
        };
        let rows = [row(110.0, 0.9), row(103.0, 0.8), row(97.0, 0.6), row(80.0, 0.1)];
        assert_eq!(window_accuracy(&rows, 100.0, 0.04), Some((0.7, false)));
        assert_eq!(window_accuracy(&rows, 85.0, 0.04), Some((0.1, true)));
        assert_eq!(window_accuracy(&[], 85.0, 0.04), None);
    }
}
