//! Posterior summarization (inclusion probabilities, HPD intervals, rendered
//! equations) and the pre-run subsample-size calculus.

use thiserror::Error;

use crate::basis::OperatorSpec;
use crate::sampler::ChainSamples;
use crate::tensor::Matrix;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("chain has no retained samples")]
    EmptyChain,
    #[error("HPD interval needs at least 2 draws, got {0}")]
    TooFewDraws(usize),
    #[error("HPD level must lie in (0, 1), got {0}")]
    BadLevel(f64),
    #[error("beta must lie in (0, 1), got {0}")]
    BadBeta(f64),
    #[error("g must be positive, got {0}")]
    BadG(f64),
}

/// Mean of the inclusion indicators over the retained iterations.
pub fn inclusion_probabilities(samples: &ChainSamples) -> Result<Matrix, DiagnosticsError> {
    let records = samples.post_burn_in();
    if records.is_empty() {
        return Err(DiagnosticsError::EmptyChain);
    }
    let (n, d) = (samples.n_components, samples.n_terms);
    let mut probs = Matrix::zeros(n, d);
    for rec in records {
        for i in 0..n * d {
            if rec.gamma[i] {
                probs.values_mut()[i] += 1.0;
            }
        }
    }
    probs.scale(1.0 / records.len() as f64);
    Ok(probs)
}

/// Shortest contiguous interval containing `ceil(level * n)` sorted draws.
pub fn hpd_interval(draws: &[f64], level: f64) -> Result<(f64, f64), DiagnosticsError> {
    if draws.len() < 2 {
        return Err(DiagnosticsError::TooFewDraws(draws.len()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(DiagnosticsError::BadLevel(level));
    }
    let mut sorted = draws.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite draws"));
    let n = sorted.len();
    let k = ((level * n as f64).ceil() as usize).clamp(1, n);
    let mut best = (sorted[0], sorted[k - 1]);
    let mut best_width = best.1 - best.0;
    for i in 1..=n - k {
        let width = sorted[i + k - 1] - sorted[i];
        if width < best_width {
            best_width = width;
            best = (sorted[i], sorted[i + k - 1]);
        }
    }
    Ok(best)
}

/// Per-term posterior summary. Coefficient statistics are conditional on
/// inclusion: they average the iterations where the indicator was on.
#[derive(Debug, Clone)]
pub struct TermSummary {
    pub component: usize,
    pub term: usize,
    pub component_name: String,
    pub term_name: String,
    pub inclusion: f64,
    pub mean: Option<f64>,
    pub hpd_lower: Option<f64>,
    pub hpd_upper: Option<f64>,
    pub included: bool,
}

/// Posterior summary of a chain: per-term statistics, rendered equations, and
/// any warnings (for example an empty equation).
#[derive(Debug, Clone)]
pub struct DiscoverySummary {
    pub terms: Vec<TermSummary>,
    pub equations: Vec<String>,
    pub warnings: Vec<String>,
    pub threshold: f64,
    pub retained_iterations: usize,
}

/// Round to three significant digits for equation rendering.
fn format_sig3(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let exponent = x.abs().log10().floor() as i32;
    let decimals = (2 - exponent).clamp(0, 15) as usize;
    format!("{x:.decimals$}")
}

/// Render the left-hand side of one component's equation.
fn render_lhs(name: &str, g: &OperatorSpec, j_order: usize) -> String {
    let t_suffix = "t".repeat(j_order.max(1));
    if g.is_identity() {
        return format!("{name}_{t_suffix}");
    }
    let mut pieces = Vec::new();
    for (c, d) in &g.terms {
        let base = if d.is_value() {
            name.to_string()
        } else {
            format!("{name}_{}{}", "x".repeat(d.dx), "y".repeat(d.dy))
        };
        if *c == 1.0 {
            pieces.push(base);
        } else {
            pieces.push(format!("{} {base}", format_sig3(*c)));
        }
    }
    format!("({})_{t_suffix}", pieces.join(" + "))
}

/// Summarize a chain: inclusion probabilities, conditional coefficient means
/// and 95% HPD intervals, and equation strings with terms above `threshold`.
pub fn equation_summary(
    samples: &ChainSamples,
    g: &OperatorSpec,
    j_order: usize,
    threshold: f64,
) -> Result<DiscoverySummary, DiagnosticsError> {
    let records = samples.post_burn_in();
    if records.is_empty() {
        return Err(DiagnosticsError::EmptyChain);
    }
    let probs = inclusion_probabilities(samples)?;
    let (n_count, d_count) = (samples.n_components, samples.n_terms);
    let mut terms = Vec::with_capacity(n_count * d_count);
    let mut equations = Vec::with_capacity(n_count);
    let mut warnings = Vec::new();

    for n in 0..n_count {
        let mut rhs_pieces: Vec<String> = Vec::new();
        for d in 0..d_count {
            let inclusion = probs.get(n, d);
            let draws: Vec<f64> = records
                .iter()
                .filter(|r| r.gamma[n * d_count + d])
                .map(|r| r.m[n * d_count + d])
                .collect();
            let mean = if draws.is_empty() {
                None
            } else {
                Some(draws.iter().sum::<f64>() / draws.len() as f64)
            };
            let (lo, hi) = if draws.len() >= 2 {
                let (l, h) = hpd_interval(&draws, 0.95)?;
                (Some(l), Some(h))
            } else {
                (None, None)
            };
            let included = inclusion > threshold;
            if included {
                let m = mean.unwrap_or(0.0);
                let piece = format!("{} {}", format_sig3(m.abs()), samples.term_names[d]);
                if rhs_pieces.is_empty() {
                    rhs_pieces.push(if m < 0.0 { format!("-{piece}") } else { piece });
                } else {
                    rhs_pieces.push(format!("{} {piece}", if m < 0.0 { "-" } else { "+" }));
                }
            }
            terms.push(TermSummary {
                component: n,
                term: d,
                component_name: samples.component_names[n].clone(),
                term_name: samples.term_names[d].clone(),
                inclusion,
                mean,
                hpd_lower: lo,
                hpd_upper: hi,
                included,
            });
        }
        let lhs = render_lhs(&samples.component_names[n], g, j_order);
        if rhs_pieces.is_empty() {
            warnings.push(format!(
                "no term exceeded the {threshold} inclusion threshold for component {}",
                samples.component_names[n]
            ));
            equations.push(format!("{lhs} = 0"));
        } else {
            equations.push(format!("{lhs} = {}", rhs_pieces.join(" ")));
        }
    }
    Ok(DiscoverySummary {
        terms,
        equations,
        warnings,
        threshold,
        retained_iterations: records.len(),
    })
}

/// Subsample size for the inclusion update:
/// `ceil(2 (log(R / sqrt(g+1)) / log(beta) + 1))`, floored at `min_size`.
pub fn subsample_size(
    g: f64,
    beta: f64,
    r_target: f64,
    min_size: usize,
) -> Result<usize, DiagnosticsError> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(DiagnosticsError::BadBeta(beta));
    }
    if !(g > 0.0) {
        return Err(DiagnosticsError::BadG(g));
    }
    let n_obs = 2.0 * ((r_target.ln() - 0.5 * (g + 1.0).ln()) / beta.ln() + 1.0);
    Ok((n_obs.ceil().max(0.0) as usize).max(min_size))
}

/// Map a library condition number to the subsampling decay parameter.
pub fn choose_beta(condition_number: f64) -> f64 {
    if condition_number > 1e4 {
        0.9
    } else if condition_number > 1e3 {
        0.95
    } else {
        0.99
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::SweepRecord;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::Distribution;

    fn tiny_chain(gammas: &[Vec<bool>], ms: &[Vec<f64>], burn_in: usize) -> ChainSamples {
        ChainSamples {
            n_components: 1,
            n_terms: gammas[0].len(),
            burn_in,
            component_names: vec!["u".into()],
            term_names: (0..gammas[0].len()).map(|d| format!("f{d}")).collect(),
            records: gammas
                .iter()
                .zip(ms)
                .map(|(g, m)| SweepRecord {
                    m: m.clone(),
                    gamma: g.clone(),
                    pi: vec![0.5],
                    sigma2_u: vec![1.0],
                    sigma2_v: vec![1.0],
                })
                .collect(),
            a_draws: Vec::new(),
        }
    }

    #[test]
    fn inclusion_probability_cases() {
        let chain = tiny_chain(
            &[vec![true, false], vec![true, true], vec![true, false], vec![true, true]],
            &vec![vec![1.0, 0.0]; 4],
            0,
        );
        let p = inclusion_probabilities(&chain).unwrap();
        assert_eq!(p.get(0, 0), 1.0);
        assert_eq!(p.get(0, 1), 0.5);

        let empty = tiny_chain(&[vec![true]], &[vec![1.0]], 1);
        assert!(matches!(
            inclusion_probabilities(&empty),
            Err(DiagnosticsError::EmptyChain)
        ));
    }

    #[test]
    fn hpd_matches_equal_tailed_on_normal_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = rand_distr::Normal::new(2.0, 0.5).unwrap();
        let draws: Vec<f64> = (0..20000).map(|_| normal.sample(&mut rng)).collect();
        let (lo, hi) = hpd_interval(&draws, 0.95).unwrap();
        // Large-sample normal: HPD approaches mean +- 1.96 sd.
        assert!((lo - (2.0 - 1.96 * 0.5)).abs() < 0.05, "lo = {lo}");
        assert!((hi - (2.0 + 1.96 * 0.5)).abs() < 0.05, "hi = {hi}");

        // HPD is never wider than the equal-tailed interval.
        let mut sorted = draws.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len();
        let eq_lo = sorted[(0.025 * n as f64) as usize];
        let eq_hi = sorted[(0.975 * n as f64) as usize];
        assert!(hi - lo <= eq_hi - eq_lo + 1e-12);
    }

    #[test]
    fn hpd_degenerate_and_errors() {
        let (lo, hi) = hpd_interval(&[3.25, 3.25, 3.25], 0.95).unwrap();
        assert_eq!((lo, hi), (3.25, 3.25));
        assert!(hpd_interval(&[1.0], 0.95).is_err());
        assert!(hpd_interval(&[1.0, 2.0], 1.5).is_err());
    }

    #[test]
    fn hpd_is_shortest_on_skewed_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gamma = rand_distr::Gamma::new(2.0, 1.0).unwrap();
        let draws: Vec<f64> = (0..5000).map(|_| gamma.sample(&mut rng)).collect();
        let (lo, hi) = hpd_interval(&draws, 0.9).unwrap();
        let mut sorted = draws.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len();
        let eq_lo = sorted[(0.05 * n as f64) as usize];
        let eq_hi = sorted[(0.95 * n as f64) as usize];
        assert!(hi - lo < eq_hi - eq_lo);
    }

    #[test]
    fn equation_summary_renders_and_warns() {
        // Term 0 in for 80% of sweeps with coefficient near -0.994; term 1 never.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let records: Vec<(Vec<bool>, Vec<f64>)> = (0..200)
            .map(|i| {
                let c = -0.994 + 0.01 * (rng.random::<f64>() - 0.5);
                let on = i % 5 != 0;
                (vec![on, false], vec![if on { c } else { 0.0 }, 0.0])
            })
            .collect();
        let g: Vec<Vec<bool>> = records.iter().map(|r| r.0.clone()).collect();
        let m: Vec<Vec<f64>> = records.iter().map(|r| r.1.clone()).collect();
        let chain = tiny_chain(&g, &m, 10);
        let summary =
            equation_summary(&chain, &OperatorSpec::identity(), 1, 0.5).unwrap();
        assert!(summary.equations[0].starts_with("u_t = -0.99"));
        assert!(summary.warnings.is_empty());
        let t0 = &summary.terms[0];
        assert!(t0.included && (t0.inclusion - 0.8).abs() < 0.05);
        assert!(t0.hpd_lower.unwrap() <= t0.mean.unwrap());
        assert!(t0.mean.unwrap() <= t0.hpd_upper.unwrap());
        assert!(!summary.terms[1].included);

        // Extreme threshold empties the equation and warns.
        let summary2 = equation_summary(&chain, &OperatorSpec::identity(), 1, 0.99).unwrap();
        assert_eq!(summary2.equations[0], "u_t = 0");
        assert_eq!(summary2.warnings.len(), 1);
    }

    #[test]
    fn subsample_size_formula() {
        // Burgers-sized grid with beta = 0.9.
        let n = subsample_size(25855.0, 0.9, 1.0, 2).unwrap();
        assert_eq!(n, 99);
        // R equal to sqrt(g+1) collapses the log term.
        let n2 = subsample_size(3.0, 0.5, 2.0, 0).unwrap();
        assert_eq!(n2, 2);
        // Monotone increasing in beta and g.
        let a = subsample_size(1000.0, 0.9, 1.0, 0).unwrap();
        let b = subsample_size(1000.0, 0.99, 1.0, 0).unwrap();
        let c = subsample_size(2000.0, 0.9, 1.0, 0).unwrap();
        assert!(b > a && c >= a);
        assert!(subsample_size(1000.0, 1.1, 1.0, 0).is_err());
        assert!(subsample_size(-1.0, 0.9, 1.0, 0).is_err());
    }

    #[test]
    fn choose_beta_bands() {
        assert_eq!(choose_beta(28940.0), 0.9);
        assert_eq!(choose_beta(6510.0), 0.95);
        assert_eq!(choose_beta(480.0), 0.99);
        assert_eq!(choose_beta(1.0), 0.99);
    }

    #[test]
    fn format_sig3_examples() {
        assert_eq!(format_sig3(-0.9944), "-0.994");
        assert_eq!(format_sig3(0.0984), "0.0984");
        assert_eq!(format_sig3(1.0006), "1.00");
        assert_eq!(format_sig3(12.34), "12.3");
    }
}
