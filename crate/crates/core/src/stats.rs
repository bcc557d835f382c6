//! Two-sample t-tests and one-way ANOVA.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{f_upper_tail, student_t_two_sided};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
    /// Set when both groups have zero variance and the p-value is fixed by convention.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anova {
    pub f: f64,
    pub df_between: usize,
    pub df_within: usize,
    pub p: f64,
    pub degenerate: bool,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

fn check_groups(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid(format!(
            "t-test needs at least 2 samples per group (got {} and {})",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::invalid("t-test samples must be finite"));
    }
    Ok(())
}

/// Fixed answer when both groups are constant.
fn degenerate_t(diff: f64, df: f64) -> TTest {
    if diff == 0.0 {
        TTest {
            t: 0.0,
            df,
            p: 1.0,
            degenerate: true,
        }
    } else {
        TTest {
            t: diff.signum() * f64::INFINITY,
            df,
            p: 0.0,
            degenerate: true,
        }
    }
}

/// Welch's unequal-variance t-test, `t = (mean(a) - mean(b)) / SE`, two-sided.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    check_groups(a, b)?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (variance(a), variance(b));
    let diff = mean(a) - mean(b);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if se2 == 0.0 {
        return Ok(degenerate_t(diff, na + nb - 2.0));
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    Ok(TTest {
        t,
        df,
        p: student_t_two_sided(t, df),
        degenerate: false,
    })
}

/// Student's equal-variance (pooled) t-test.
pub fn pooled_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    check_groups(a, b)?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let df = na + nb - 2.0;
    let pooled = ((na - 1.0) * variance(a) + (nb - 1.0) * variance(b)) / df;
    let diff = mean(a) - mean(b);
    let se2 = pooled * (1.0 / na + 1.0 / nb);
    if se2 == 0.0 {
        return Ok(degenerate_t(diff, df));
    }
    let t = diff / se2.sqrt();
    Ok(TTest {
        t,
        df,
        p: student_t_two_sided(t, df),
        degenerate: false,
    })
}

/// Classic one-way ANOVA, `F = MS_between / MS_within`.
pub fn one_way_anova<G: AsRef<[f64]>>(groups: &[G]) -> Result<Anova> {
    if groups.len() < 2 {
        return Err(Error::invalid("ANOVA needs at least 2 groups"));
    }
    if let Some(g) = groups.iter().find(|g| g.as_ref().len() < 2) {
        return Err(Error::invalid(format!(
            "ANOVA needs at least 2 samples per group (got {})",
            g.as_ref().len()
        )));
    }
    if groups.iter().flat_map(|g| g.as_ref()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("ANOVA samples must be finite"));
    }
    let n: usize = groups.iter().map(|g| g.as_ref().len()).sum();
    let k = groups.len();
    let grand = groups.iter().flat_map(|g| g.as_ref()).sum::<f64>() / n as f64;
    let mut ss_between = 0.0;
    let mut ss_within = 0.0;
    for g in groups {
        let g = g.as_ref();
        let m = mean(g);
        ss_between += g.len() as f64 * (m - grand).powi(2);
        ss_within += g.iter().map(|x| (x - m).powi(2)).sum::<f64>();
    }
    let (df1, df2) = (k - 1, n - k);
    let ms_between = ss_between / df1 as f64;
    let ms_within = ss_within / df2 as f64;
    if ms_within == 0.0 {
        let (f, p) = if ms_between == 0.0 { (0.0, 1.0) } else { (f64::INFINITY, 0.0) };
        return Ok(Anova {
            f,
            df_between: df1,
            df_within: df2,
            p,
            degenerate: true,
        });
    }
    let f = ms_between / ms_within;
    Ok(Anova {
        f,
        df_between: df1,
        df_within: df2,
        p: f_upper_tail(f, df1 as f64, df2 as f64),
        degenerate: false,
    })
}
