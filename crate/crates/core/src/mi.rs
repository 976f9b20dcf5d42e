//! Exact information measures on discrete joint distributions (natural log).

use crate::error::{PrismError, Result};

const NORMALIZATION_TOL: f64 = 1e-12;

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(PrismError::InvalidInput("distribution is empty".into()));
    }
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(PrismError::InvalidInput(
            "distribution has negative or non-finite entries".into(),
        ));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(PrismError::InvalidInput(format!("distribution sums to {total}, not 1")));
    }
    Ok(())
}

fn plogp_sum(p: impl Iterator<Item = f64>) -> f64 {
    -p.filter(|&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> Result<f64> {
    check_distribution(p)?;
    Ok(plogp_sum(p.iter().copied()))
}

/// Row-major joint distribution `p(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    rows: usize,
    cols: usize,
    table: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(rows: usize, cols: usize, table: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || table.len() != rows * cols {
            return Err(PrismError::Shape(format!(
                "joint table has {} entries for {rows}x{cols}",
                table.len()
            )));
        }
        check_distribution(&table)?;
        Ok(Self { rows, cols, table })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(PrismError::Shape("ragged joint table".into()));
        }
        Self::new(r, c, rows.concat())
    }

    /// Outer product of two marginals.
    pub fn independent(px: &[f64], py: &[f64]) -> Result<Self> {
        let table = px.iter().flat_map(|&a| py.iter().map(move |&b| a * b)).collect();
        Self::new(px.len(), py.len(), table)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.table[x * self.cols + y]
    }

    pub fn marginal_x(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|x| (0..self.cols).map(|y| self.get(x, y)).sum())
            .collect()
    }

    pub fn marginal_y(&self) -> Vec<f64> {
        (0..self.cols)
            .map(|y| (0..self.rows).map(|x| self.get(x, y)).sum())
            .collect()
    }

    pub fn transpose(&self) -> Self {
        let table = (0..self.cols)
            .flat_map(|y| (0..self.rows).map(move |x| (x, y)))
            .map(|(x, y)| self.get(x, y))
            .collect();
        Self {
            rows: self.cols,
            cols: self.rows,
            table,
        }
    }

    /// Reorders outcomes: new row `k` is old row `row_perm[k]`, likewise columns.
    pub fn permuted(&self, row_perm: &[usize], col_perm: &[usize]) -> Result<Self> {
        if row_perm.len() != self.rows || col_perm.len() != self.cols {
            return Err(PrismError::Shape("permutation length mismatch".into()));
        }
        let table = row_perm
            .iter()
            .flat_map(|&x| col_perm.iter().map(move |&y| (x, y)))
            .map(|(x, y)| self.get(x, y))
            .collect();
        Self::new(self.rows, self.cols, table)
    }
}

/// `I(X; Y) = sum p(x,y) ln(p(x,y) / (p(x) p(y)))`, skipping zero cells.
pub fn mutual_information(joint: &DiscreteJoint) -> f64 {
    let px = joint.marginal_x();
    let py = joint.marginal_y();
    let mut mi = 0.0;
    for x in 0..joint.rows {
        for y in 0..joint.cols {
            let p = joint.get(x, y);
            if p > 0.0 {
                mi += p * (p / (px[x] * py[y])).ln();
            }
        }
    }
    mi.max(0.0)
}

/// `2 I / (H(X) + H(Y))`, clamped into `[0, 1]`; 0 when both marginals are degenerate.
pub fn normalized_mi(joint: &DiscreteJoint) -> f64 {
    let hx = plogp_sum(joint.marginal_x().into_iter());
    let hy = plogp_sum(joint.marginal_y().into_iter());
    let denom = hx + hy;
    if denom <= 0.0 {
        return 0.0;
    }
    (2.0 * mutual_information(joint) / denom).clamp(0.0, 1.0)
}

/// Max-relevance approximation of set dependency: the mean per-feature MI.
pub fn max_relevance(per_feature_mi: &[f64]) -> Result<f64> {
    if per_feature_mi.is_empty() {
        return Err(PrismError::InvalidInput(
            "max relevance needs at least one value".into(),
        ));
    }
    Ok(per_feature_mi.iter().sum::<f64>() / per_feature_mi.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn entropy_cases() {
        assert!((entropy(&[0.5, 0.5]).unwrap() - LN_2).abs() < 1e-15);
        assert_eq!(entropy(&[1.0, 0.0]).unwrap(), 0.0);
        let h = entropy(&[0.4, 0.6]).unwrap();
        assert!((h - 0.673012).abs() < 1e-6);
        assert!(entropy(&[0.4, 0.4]).is_err());
        assert!(entropy(&[1.2, -0.2]).is_err());
    }

    #[test]
    fn mi_cases() {
        let ind = DiscreteJoint::independent(&[0.3, 0.7], &[0.2, 0.5, 0.3]).unwrap();
        assert!(mutual_information(&ind).abs() < 1e-15);
        assert!(normalized_mi(&ind).abs() < 1e-12);
        let same = DiscreteJoint::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.5]]).unwrap();
        assert!((mutual_information(&same) - LN_2).abs() < 1e-15);
        assert!((normalized_mi(&same) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_marginals_give_zero_nmi() {
        let j = DiscreteJoint::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(normalized_mi(&j), 0.0);
    }

    #[test]
    fn max_relevance_cases() {
        assert_eq!(max_relevance(&[0.7]).unwrap(), 0.7);
        assert_eq!(max_relevance(&[1.0, 3.0]).unwrap(), 2.0);
        assert!(max_relevance(&[]).is_err());
    }
}
