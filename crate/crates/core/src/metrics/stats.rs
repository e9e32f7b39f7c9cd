use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::features::Source;
use super::report::nonfinite;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    #[serde(with = "nonfinite")]
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch's unequal-variance t-test with Welch–Satterthwaite degrees of freedom
/// and a two-sided p-value. Positive `t` means `a` has the larger mean.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<WelchTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::validation("scores", "each group needs at least two values"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::validation("scores", "non-finite value"));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (qa, qb) = (va / na, vb / nb);
    let se2 = qa + qb;
    if se2 == 0.0 {
        let df = na + nb - 2.0;
        return Ok(if ma == mb {
            WelchTest { t: 0.0, df, p: 1.0 }
        } else {
            WelchTest {
                t: (ma - mb).signum() * f64::INFINITY,
                df,
                p: 0.0,
            }
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::validation("df", e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(WelchTest { t, df, p })
}

/// One score with its hidden group, as consumed by [`score_summary`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatedScore {
    pub group: Source,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub group: Source,
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator).
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub median: f64,
    pub n: usize,
}

pub fn summarize(group: Source, scores: &[f64]) -> Result<ScoreSummary> {
    if scores.len() < 2 {
        return Err(Error::validation(
            "scores",
            format!("{group:?} group has fewer than two ratings"),
        ));
    }
    let (mean, var) = mean_var(scores);
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    Ok(ScoreSummary {
        group,
        mean,
        std: var.max(0.0).sqrt(),
        min: sorted[0],
        max: sorted[n - 1],
        median,
        n,
    })
}

/// Per-group summaries plus the real-versus-generated Welch test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub real: ScoreSummary,
    pub generated: ScoreSummary,
    pub t_test: WelchTest,
}

pub fn score_summary(ratings: &[RatedScore]) -> Result<ScoreTable> {
    let pick = |g: Source| -> Vec<f64> { ratings.iter().filter(|r| r.group == g).map(|r| r.score).collect() };
    let (real, generated) = (pick(Source::Real), pick(Source::Generated));
    Ok(ScoreTable {
        real: summarize(Source::Real, &real)?,
        generated: summarize(Source::Generated, &generated)?,
        t_test: welch_t(&real, &generated)?,
    })
}

impl ScoreTable {
    /// Plain-text table: group, mean ± std, min, max, median, t-test.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("| Group     | mean ± std    | Min  | Max  | Median | t-test |\n");
        out.push_str("|-----------|---------------|------|------|--------|--------|\n");
        for (i, s) in [self.real, self.generated].iter().enumerate() {
            let name = match s.group {
                Source::Real => "Real",
                Source::Generated => "Generated",
            };
            let t = if i == 0 {
                format!("t = {:.3}, p = {:.3}", self.t_test.t, self.t_test.p)
            } else {
                String::new()
            };
            out.push_str(&format!(
                "| {name:<9} | {:>5.2} ± {:<5.2} | {:>4} | {:>4} | {:>6} | {t} |\n",
                s.mean, s.std, s.min, s.max, s.median
            ));
        }
        out
    }
}
