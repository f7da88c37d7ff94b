//! Axis-aligned boxes used as working domains, sampling regions and grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::Dimension(format!(
                "box bounds have lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (lo, hi) in lower.iter().zip(&upper) {
            if !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Domain("box bounds must be finite".into()));
            }
            if lo > hi {
                return Err(Error::Domain(format!("lower bound {lo} exceeds upper bound {hi}")));
            }
        }
        Ok(Self { lower, upper })
    }

    /// Symmetric box `[-h_i, h_i]`.
    pub fn symmetric(half_widths: &[f64]) -> Result<Self> {
        Self::new(half_widths.iter().map(|h| -h).collect(), half_widths.to_vec())
    }

    /// Smallest box containing every point.
    pub fn bounding<'a, I>(points: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut iter = points.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::Empty("no points to bound".into()))?;
        let mut lower = first.to_vec();
        let mut upper = first.to_vec();
        for p in iter {
            if p.len() != lower.len() {
                return Err(Error::Dimension("points of different dimension".into()));
            }
            for (i, &v) in p.iter().enumerate() {
                lower[i] = lower[i].min(v);
                upper[i] = upper[i].max(v);
            }
        }
        Self::new(lower, upper)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| 0.5 * (lo + hi))
            .collect()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(lo, hi)| hi - lo).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Box scaled about its center by `factor` (1.1 grows every side by 5%).
    pub fn scaled(&self, factor: f64) -> Self {
        let c = self.center();
        let w = self.widths();
        Self {
            lower: c.iter().zip(&w).map(|(c, w)| c - 0.5 * factor * w).collect(),
            upper: c.iter().zip(&w).map(|(c, w)| c + 0.5 * factor * w).collect(),
        }
    }

    /// Uniform grid with `resolution` nodes per axis, row-major (last axis fastest).
    pub fn grid(&self, resolution: usize) -> Vec<Vec<f64>> {
        self.grid_shape(&vec![resolution; self.dim()])
    }

    pub fn grid_shape(&self, shape: &[usize]) -> Vec<Vec<f64>> {
        let axes: Vec<Vec<f64>> = shape
            .iter()
            .enumerate()
            .map(|(i, &n)| linspace(self.lower[i], self.upper[i], n))
            .collect();
        let total: usize = shape.iter().product();
        let mut out = Vec::with_capacity(total);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..total {
            out.push(idx.iter().enumerate().map(|(a, &k)| axes[a][k]).collect());
            for a in (0..shape.len()).rev() {
                idx[a] += 1;
                if idx[a] < shape[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        out
    }

    /// Length of the diagonal of one cell of a grid with `resolution` nodes per axis.
    pub fn cell_diagonal(&self, resolution: usize) -> f64 {
        let steps = resolution.saturating_sub(1).max(1) as f64;
        self.widths()
            .iter()
            .map(|w| (w / steps).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n)
            .map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_row_major() {
        let b = BoxDomain::new(vec![0.0, 0.0], vec![1.0, 2.0]).unwrap();
        let g = b.grid_shape(&[2, 3]);
        assert_eq!(g.len(), 6);
        assert_eq!(g[0], vec![0.0, 0.0]);
        assert_eq!(g[1], vec![0.0, 1.0]);
        assert_eq!(g[3], vec![1.0, 0.0]);
    }

    #[test]
    fn scaled_box_keeps_center() {
        let b = BoxDomain::new(vec![-1.0, 0.0], vec![1.0, 4.0]).unwrap();
        let s = b.scaled(1.1);
        assert_eq!(s.center(), b.center());
        assert!((s.widths()[1] - 4.4).abs() < 1e-12);
    }

    #[test]
    fn rejects_inverted_bounds() {
        assert!(BoxDomain::new(vec![1.0], vec![0.0]).is_err());
        assert!(BoxDomain::new(vec![0.0], vec![f64::INFINITY]).is_err());
    }
}
