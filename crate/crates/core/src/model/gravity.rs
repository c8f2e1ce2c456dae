//! Singly constrained log-linear gravity baseline.

use serde::{Deserialize, Serialize};

use super::features::MIN_DISTANCE_KM;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GravityModel {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Only used by the log-flow fit; it cancels in the allocation.
    pub intercept: f64,
}

/// One observed pair: origin and destination mass, distance, flow.
#[derive(Clone, Copy, Debug)]
pub struct GravitySample {
    pub p_origin: f64,
    pub p_dest: f64,
    pub distance_km: f64,
    pub flow: f64,
}

fn ln_mass(p: f64) -> f64 {
    p.max(1.0).ln()
}

impl GravityModel {
    /// Least squares of `ln w = c + α ln p_i + β ln p_j − γ ln d` over pairs
    /// with positive flow.
    pub fn fit(samples: &[GravitySample]) -> Result<Self> {
        let mut xtx = [[0.0; 4]; 4];
        let mut xty = [0.0; 4];
        let mut n = 0;
        for s in samples.iter().filter(|s| s.flow > 0.0) {
            let x = [
                1.0,
                ln_mass(s.p_origin),
                ln_mass(s.p_dest),
                -s.distance_km.max(MIN_DISTANCE_KM).ln(),
            ];
            let y = s.flow.ln();
            for r in 0..4 {
                for c in 0..4 {
                    xtx[r][c] += x[r] * x[c];
                }
                xty[r] += x[r] * y;
            }
            n += 1;
        }
        if n < 4 {
            return Err(Error::InsufficientData(format!("{n} positive flows for the gravity fit")));
        }
        let b = solve4(xtx, xty).ok_or_else(|| Error::InsufficientData("singular gravity design".into()))?;
        Ok(Self {
            intercept: b[0],
            alpha: b[1],
            beta: b[2],
            gamma: b[3],
        })
    }

    pub fn score(&self, p_origin: f64, p_dest: f64, distance_km: f64) -> f64 {
        self.alpha * ln_mass(p_origin) + self.beta * ln_mass(p_dest)
            - self.gamma * distance_km.max(MIN_DISTANCE_KM).ln()
    }
}

/// Gaussian elimination with partial pivoting.
fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let piv = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 * (1.0 + a[0][0].abs()) {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..4 {
            let f = a[r][col] / a[col][col];
            for c in col..4 {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for r in (0..4).rev() {
        let s: f64 = (r + 1..4).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}
