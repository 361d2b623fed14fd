//! Pearson (PLCC) and Spearman (SROCC) correlation between predicted
//! scores and MOS.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("predictions ({0}) and targets ({1}) differ in length")]
    Length(usize, usize),
    #[error("need at least 2 score pairs, got {0}")]
    TooShort(usize),
    #[error("score pair {0} is not finite")]
    NonFinite(usize),
    #[error("correlation is undefined: {0} has zero variance")]
    UndefinedCorrelation(&'static str),
}

/// Validated predictions and targets of equal length ≥ 2.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorePairs {
    predictions: Vec<f64>,
    targets: Vec<f64>,
}

impl ScorePairs {
    pub fn new(predictions: Vec<f64>, targets: Vec<f64>) -> Result<Self, MetricsError> {
        if predictions.len() != targets.len() {
            return Err(MetricsError::Length(predictions.len(), targets.len()));
        }
        if predictions.len() < 2 {
            return Err(MetricsError::TooShort(predictions.len()));
        }
        if let Some(i) = predictions
            .iter()
            .zip(&targets)
            .position(|(p, t)| !p.is_finite() || !t.is_finite())
        {
            return Err(MetricsError::NonFinite(i));
        }
        Ok(Self {
            predictions,
            targets,
        })
    }

    pub fn predictions(&self) -> &[f64] {
        &self.predictions
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(MetricsError::UndefinedCorrelation("predictions"));
    }
    if syy == 0.0 {
        return Err(MetricsError::UndefinedCorrelation("targets"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing the average of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

/// Sample Pearson linear correlation coefficient.
pub fn plcc(pairs: &ScorePairs) -> Result<f64, MetricsError> {
    pearson(&pairs.predictions, &pairs.targets)
}

/// Spearman rank-order correlation: Pearson correlation of average ranks.
pub fn srocc(pairs: &ScorePairs) -> Result<f64, MetricsError> {
    pearson(
        &average_ranks(&pairs.predictions),
        &average_ranks(&pairs.targets),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(p: &[f64], t: &[f64]) -> ScorePairs {
        ScorePairs::new(p.to_vec(), t.to_vec()).unwrap()
    }

    #[test]
    fn plcc_examples() {
        assert_eq!(plcc(&pairs(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0])).unwrap(), 1.0);
        assert_eq!(plcc(&pairs(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0])).unwrap(), -1.0);
        // deviations (-4,-1,5)/3 and (-5,1,4)/3: sxy = 39/9, sxx = syy = 42/9
        let r = plcc(&pairs(&[1.0, 2.0, 4.0], &[1.0, 3.0, 4.0])).unwrap();
        assert!((r - 39.0 / 42.0).abs() < 1e-15, "{r}");
        assert!((r - 0.9286).abs() < 5e-5);
    }

    #[test]
    fn srocc_examples() {
        assert_eq!(
            srocc(&pairs(&[0.1, 0.5, 9.0, 12.0], &[1.0, 2.0, 3.0, 40.0])).unwrap(),
            1.0
        );
        let r = srocc(&pairs(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0])).unwrap();
        assert!((r - 0.8660).abs() < 1e-4, "{r}");
        assert_eq!(average_ranks(&[1.0, 1.0, 2.0]), vec![1.5, 1.5, 3.0]);
    }

    #[test]
    fn reversal_negates_srocc() {
        let p = [0.3, 2.0, 1.0, 1.0, -4.0];
        let t = [1.0, 5.0, 2.0, 3.0, 3.0];
        let neg: Vec<f64> = p.iter().map(|x| -x).collect();
        let a = srocc(&pairs(&p, &t)).unwrap();
        let b = srocc(&pairs(&neg, &t)).unwrap();
        assert_eq!(a, -b);
    }

    #[test]
    fn zero_variance_is_undefined() {
        assert_eq!(
            plcc(&pairs(&[1.0, 1.0], &[1.0, 2.0])),
            Err(MetricsError::UndefinedCorrelation("predictions"))
        );
        assert_eq!(
            srocc(&pairs(&[1.0, 2.0], &[3.0, 3.0])),
            Err(MetricsError::UndefinedCorrelation("targets"))
        );
    }

    #[test]
    fn invalid_pairs() {
        assert_eq!(
            ScorePairs::new(vec![1.0], vec![1.0]),
            Err(MetricsError::TooShort(1))
        );
        assert_eq!(
            ScorePairs::new(vec![1.0, 2.0], vec![1.0]),
            Err(MetricsError::Length(2, 1))
        );
        assert_eq!(
            ScorePairs::new(vec![1.0, f64::NAN], vec![1.0, 2.0]),
            Err(MetricsError::NonFinite(1))
        );
    }
}
