use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use super::EvalError;

/// Outcome of a paired t-test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TTest {
    Test { t: f64, df: usize, p: f64 },
    /// All differences equal, so the statistic is undefined.
    Degenerate { mean_diff: f64 },
}

/// Two-sided tail probability of Student's t with `df` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    beta_reg(df / 2.0, 0.5, df / (df + t * t))
}

/// Paired two-sided t-test of `a - b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest, EvalError> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(EvalError::BadScores);
    }
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    if d.iter().all(|&x| x == d[0]) {
        return Ok(TTest::Degenerate { mean_diff: mean });
    }
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let t = mean / (var / n).sqrt();
    let df = a.len() - 1;
    Ok(TTest::Test {
        t,
        df,
        p: student_t_two_sided_p(t, df as f64),
    })
}

pub fn bonferroni(p: f64, comparisons: usize) -> f64 {
    (p * comparisons as f64).min(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairComparison {
    pub a: String,
    pub b: String,
    pub test: TTest,
    pub p_adjusted: Option<f64>,
    pub significant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceReport {
    pub metric: String,
    pub alpha: f64,
    pub comparisons: usize,
    pub pairs: Vec<PairComparison>,
}

/// All pairwise paired t-tests with Bonferroni correction.
pub fn significance(
    metric: &str,
    names: &[String],
    scores: &[Vec<f64>],
    alpha: f64,
) -> Result<SignificanceReport, EvalError> {
    if names.len() != scores.len() {
        return Err(EvalError::BadScores);
    }
    let m = names.len() * names.len().saturating_sub(1) / 2;
    let mut pairs = Vec::with_capacity(m);
    for i in 0..names.len() {
        for j in i + 1..names.len() {
            let test = paired_ttest(&scores[i], &scores[j])?;
            let p_adjusted = match test {
                TTest::Test { p, .. } => Some(bonferroni(p, m)),
                TTest::Degenerate { .. } => None,
            };
            pairs.push(PairComparison {
                a: names[i].clone(),
                b: names[j].clone(),
                test,
                p_adjusted,
                significant: p_adjusted.is_some_and(|p| p < alpha),
            });
        }
    }
    Ok(SignificanceReport {
        metric: metric.to_string(),
        alpha,
        comparisons: m,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_diffs() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [0.0; 5];
        match paired_ttest(&a, &b).unwrap() {
            TTest::Test { t, df, p } => {
                // t = 3 / sqrt(2.5 / 5)
                assert!((t - 18f64.sqrt()).abs() < 1e-12);
                assert_eq!(df, 4);
                assert!((p - 0.013_2).abs() < 1e-4, "{p}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn t_cdf_known_values() {
        // df = 1 is Cauchy: P(|T| > 1) = 1/2
        assert!((student_t_two_sided_p(1.0, 1.0) - 0.5).abs() < 1e-12);
        // df = 2 has closed form 1 - t / sqrt(2 + t^2)
        let t: f64 = 1.7;
        let want = 1.0 - t / (2.0 + t * t).sqrt();
        assert!((student_t_two_sided_p(t, 2.0) - want).abs() < 1e-12);
        assert_eq!(student_t_two_sided_p(0.0, 4.0), 1.0);
    }

    #[test]
    fn identical_lists_degenerate() {
        let a = [0.8, 0.9, 0.7];
        assert_eq!(paired_ttest(&a, &a).unwrap(), TTest::Degenerate { mean_diff: 0.0 });
    }

    #[test]
    fn fifteen_comparisons_for_six_setups() {
        let names: Vec<String> = (0..6).map(|i| format!("s{i}")).collect();
        let scores: Vec<Vec<f64>> = (0..6)
            .map(|i| (0..5).map(|f| (i * 7 + f * f * (i + 1)) as f64 / 100.0).collect())
            .collect();
        let r = significance("accuracy", &names, &scores, 0.01).unwrap();
        assert_eq!(r.comparisons, 15);
        assert_eq!(r.pairs.len(), 15);
        for p in &r.pairs {
            if let (TTest::Test { p: raw, .. }, Some(adj)) = (p.test, p.p_adjusted) {
                assert_eq!(adj, (raw * 15.0).min(1.0));
                assert!(adj >= raw);
            }
        }
        assert_eq!(bonferroni(0.2, 15), 1.0);
    }
}
