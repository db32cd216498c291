//! Training loss and evaluation metrics.
//!
//! Conventions (fixed here so reports are self-consistent):
//!
//! * training loss: mean squared nearest distance `S → T` plus the same for
//!   `T → S`;
//! * CD: average of the two directed mean Euclidean nearest distances;
//! * HD: the larger of the two directed maximum nearest distances;
//! * P2F: mean exact distance from predicted points to the reference surface.
//!
//! Reports carry values scaled by 10³ (`*_e-3` keys).

mod surface;

use std::collections::BTreeMap;
use std::fmt;

pub use surface::{closest_point_on_triangle, SurfaceRef, TriangleMesh, MIN_TRIANGLE_AREA};

use crate::error::{Error, Result};
use crate::geometry::{dist2, Point};
use crate::tensor::{Real, Tape, Var};

/// Differentiable symmetric squared Chamfer loss on the tape; see
/// [`Tape::chamfer_loss`].
pub fn chamfer_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    tape.chamfer_loss(pred, target)
}

/// Squared nearest distance from every point of `a` to `b`, and from every
/// point of `b` to `a`.
fn nearest_sq(a: &[Point], b: &[Point]) -> (Vec<f64>, Vec<f64>) {
    let mut ab = vec![f64::INFINITY; a.len()];
    let mut ba = vec![f64::INFINITY; b.len()];
    for (i, p) in a.iter().enumerate() {
        let mut best = f64::INFINITY;
        for (j, q) in b.iter().enumerate() {
            let d = dist2(p, q);
            if d < best {
                best = d;
            }
            if d < ba[j] {
                ba[j] = d;
            }
        }
        ab[i] = best;
    }
    (ab, ba)
}

fn non_empty(a: &[Point], b: &[Point], op: &'static str) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet(op));
    }
    Ok(())
}

/// Plain `f64` value of the training loss.
pub fn chamfer_loss_value(s: &[Point], t: &[Point]) -> Result<f64> {
    non_empty(s, t, "chamfer_loss")?;
    let (st, ts) = nearest_sq(s, t);
    Ok(st.iter().sum::<f64>() / s.len() as f64 + ts.iter().sum::<f64>() / t.len() as f64)
}

/// Evaluation Chamfer distance: `½·(mean_s min_t ‖s−t‖ + mean_t min_s ‖s−t‖)`.
pub fn chamfer_distance(s: &[Point], t: &[Point]) -> Result<f64> {
    non_empty(s, t, "chamfer_distance")?;
    let (st, ts) = nearest_sq(s, t);
    let a = st.iter().map(|d| d.sqrt()).sum::<f64>() / s.len() as f64;
    let b = ts.iter().map(|d| d.sqrt()).sum::<f64>() / t.len() as f64;
    Ok(0.5 * (a + b))
}

/// Symmetric Hausdorff distance.
pub fn hausdorff_distance(s: &[Point], t: &[Point]) -> Result<f64> {
    non_empty(s, t, "hausdorff_distance")?;
    let (st, ts) = nearest_sq(s, t);
    let a = st.iter().copied().fold(0.0, f64::max);
    let b = ts.iter().copied().fold(0.0, f64::max);
    Ok(a.max(b).sqrt())
}

/// Mean exact distance from `s` to the surface.
pub fn p2f_distance(s: &[Point], surface: &SurfaceRef) -> Result<f64> {
    if s.is_empty() {
        return Err(Error::EmptySet("p2f_distance"));
    }
    surface.validate()?;
    Ok(s.iter().map(|p| surface.distance(p)).sum::<f64>() / s.len() as f64)
}

/// CD / HD / P2F in units of 10⁻³.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub cd: f64,
    pub hd: f64,
    pub p2f: f64,
    pub n_pred: usize,
    pub n_gt: usize,
}

impl MetricReport {
    pub fn compute(pred: &[Point], gt: &[Point], surface: &SurfaceRef) -> Result<Self> {
        Ok(MetricReport {
            cd: chamfer_distance(pred, gt)? * 1e3,
            hd: hausdorff_distance(pred, gt)? * 1e3,
            p2f: p2f_distance(pred, surface)? * 1e3,
            n_pred: pred.len(),
            n_gt: gt.len(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.cd.is_finite() && self.hd.is_finite() && self.p2f.is_finite()
    }

    /// Key-value lines, one per field.
    pub fn to_kv_block(&self) -> String {
        format!(
            "cd_e-3={}\nhd_e-3={}\np2f_e-3={}\nn_pred={}\nn_gt={}\n",
            self.cd, self.hd, self.p2f, self.n_pred, self.n_gt
        )
    }

    /// Parses a single-line record or a key-value block.
    pub fn parse(text: &str) -> Result<Self> {
        let mut fields = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            for tok in line.split_whitespace() {
                let (k, v) = tok.split_once('=').ok_or_else(|| Error::Parse {
                    line: n + 1,
                    msg: format!("expected key=value, got {tok:?}"),
                })?;
                fields.insert(k.to_string(), (n + 1, v.to_string()));
            }
        }
        fn take<T: std::str::FromStr>(f: &BTreeMap<String, (usize, String)>, key: &str) -> Result<T> {
            let (line, v) = f.get(key).ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!("missing {key}"),
            })?;
            v.parse().map_err(|_| Error::Parse {
                line: *line,
                msg: format!("bad value for {key}: {v:?}"),
            })
        }
        let report = MetricReport {
            cd: take(&fields, "cd_e-3")?,
            hd: take(&fields, "hd_e-3")?,
            p2f: take(&fields, "p2f_e-3")?,
            n_pred: take(&fields, "n_pred")?,
            n_gt: take(&fields, "n_gt")?,
        };
        Ok(report)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "cd_e-3={} hd_e-3={} p2f_e-3={} n_pred={} n_gt={}",
            self.cd, self.hd, self.p2f, self.n_pred, self.n_gt
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(n: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
        (0..n)
            .map(|_| [rng.random(), rng.random(), rng.random()])
            .collect()
    }

    #[test]
    fn identical_sets_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_set(20, &mut rng);
        assert_eq!(chamfer_distance(&s, &s).unwrap(), 0.0);
        assert_eq!(hausdorff_distance(&s, &s).unwrap(), 0.0);
        assert_eq!(chamfer_loss_value(&s, &s).unwrap(), 0.0);
    }

    #[test]
    fn single_pair_values() {
        let s = [[0.0, 0.0, 0.0]];
        let t = [[1.0, 0.0, 0.0]];
        assert_eq!(chamfer_loss_value(&s, &t).unwrap(), 2.0);
        assert_eq!(chamfer_distance(&s, &t).unwrap(), 1.0);
    }

    #[test]
    fn hausdorff_directed_from_t_dominates() {
        let s = [[0.0; 3]];
        let t = [[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        assert_eq!(hausdorff_distance(&s, &t).unwrap(), 2.0);
    }

    #[test]
    fn empty_sets_error() {
        let s = [[0.0; 3]];
        assert!(matches!(chamfer_distance(&s, &[]), Err(Error::EmptySet(_))));
        assert!(matches!(hausdorff_distance(&[], &s), Err(Error::EmptySet(_))));
        assert!(chamfer_loss_value(&[], &s).is_err());
        assert!(p2f_distance(&[], &SurfaceRef::unit_sphere()).is_err());
    }

    #[test]
    fn hd_at_least_cd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let s = random_set(15, &mut rng);
            let t = random_set(9, &mut rng);
            assert!(hausdorff_distance(&s, &t).unwrap() >= chamfer_distance(&s, &t).unwrap());
        }
    }

    #[test]
    fn p2f_sphere() {
        let s = SurfaceRef::Sphere {
            center: [0.0; 3],
            radius: 0.7,
        };
        assert!((p2f_distance(&[[1.4, 0.0, 0.0]], &s).unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn report_line_round_trip() {
        let r = MetricReport {
            cd: 0.1 + 0.2,
            hd: 3.843,
            p2f: 1.0 / 3.0,
            n_pred: 8192,
            n_gt: 8192,
        };
        let line = r.to_string();
        assert!(line.starts_with("cd_e-3=0.30000000000000004 hd_e-3=3.843 p2f_e-3="));
        assert_eq!(MetricReport::parse(&line).unwrap(), r);
        assert_eq!(MetricReport::parse(&r.to_kv_block()).unwrap(), r);
        assert!(MetricReport::parse("cd_e-3=1").is_err());
    }
}
