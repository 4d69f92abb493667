//! Matching watermark strength across schemes.
//!
//! For each green fraction the logit boost is bisected until detection at a
//! fixed FPR reaches a target TPR; among the calibrated tuples the one with
//! the lowest watermarked perplexity on held-out text wins.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::detect::{z_scores, Detector, Roc, ScoredText};
use crate::error::{Error, Result};
use crate::hashing::keyed_hash;
use crate::lm::{negative_log_likelihood, LogitSource};
use crate::watermark::{watermarked_generate, GenerateOptions, Scheme, WatermarkSpec, Watermarker};

/// Green fractions searched for KGW and EWD.
pub const GAMMA_GRID: [f64; 4] = [0.1, 0.25, 0.5, 0.75];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intensity {
    Light,
    Moderate,
    Heavy,
}

impl Intensity {
    pub const ALL: [Intensity; 3] = [Intensity::Light, Intensity::Moderate, Intensity::Heavy];

    pub fn target_tpr(self) -> f64 {
        match self {
            Intensity::Light => 0.5,
            Intensity::Moderate => 0.75,
            Intensity::Heavy => 0.95,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Intensity::Light => "light",
            Intensity::Moderate => "moderate",
            Intensity::Heavy => "heavy",
        }
    }
}

impl fmt::Display for Intensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Intensity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "light" => Ok(Intensity::Light),
            "moderate" => Ok(Intensity::Moderate),
            "heavy" => Ok(Intensity::Heavy),
            _ => Err(Error::InvalidParameter(format!("unknown intensity {s:?}"))),
        }
    }
}

/// Detection strength to calibrate for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityTarget {
    pub name: Intensity,
    pub target_tpr: f64,
    pub fpr: f64,
    pub gen_length: usize,
}

impl From<Intensity> for IntensityTarget {
    fn from(name: Intensity) -> Self {
        Self {
            name,
            target_tpr: name.target_tpr(),
            fpr: 0.01,
            gen_length: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BisectionConfig {
    pub delta_max: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for BisectionConfig {
    fn default() -> Self {
        Self {
            delta_max: 15.0,
            tolerance: 0.05,
            max_iterations: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSearch {
    pub delta: f64,
    pub achieved_tpr: f64,
    /// Every `(delta, tpr)` evaluated, in order.
    pub trace: Vec<(f64, f64)>,
}

/// Bisects `delta` in `[0, delta_max]` against a TPR oracle assumed
/// non-decreasing in `delta`.
///
/// Stops at the first probe within `tolerance` of the target; otherwise
/// returns the smallest probed `delta` whose TPR exceeded the target.
pub fn bisect_delta<F>(mut tpr_of: F, target_tpr: f64, config: &BisectionConfig) -> Result<DeltaSearch>
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut trace = Vec::new();
    let mut probe = |d: f64, trace: &mut Vec<(f64, f64)>| -> Result<f64> {
        let t = tpr_of(d)?;
        trace.push((d, t));
        Ok(t)
    };
    let at_zero = probe(0.0, &mut trace)?;
    if at_zero >= target_tpr - config.tolerance {
        return Ok(DeltaSearch {
            delta: 0.0,
            achieved_tpr: at_zero,
            trace,
        });
    }
    let at_max = probe(config.delta_max, &mut trace)?;
    if at_max < target_tpr - config.tolerance {
        return Err(Error::UnachievableTarget {
            target: target_tpr,
            achieved: at_max,
            delta_max: config.delta_max,
        });
    }
    let (mut lo, mut hi) = (0.0, config.delta_max);
    let mut best = (config.delta_max, at_max);
    for _ in 0..config.max_iterations {
        let mid = 0.5 * (lo + hi);
        let t = probe(mid, &mut trace)?;
        if (t - target_tpr).abs() <= config.tolerance {
            best = (mid, t);
            break;
        }
        if t < target_tpr {
            lo = mid;
        } else {
            hi = mid;
            best = (mid, t);
        }
    }
    Ok(DeltaSearch {
        delta: best.0,
        achieved_tpr: best.1,
        trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOptions {
    pub seed: u64,
    pub bisection: BisectionConfig,
    /// Minimum number of prompts a calibration run accepts.
    pub min_prefixes: usize,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            bisection: BisectionConfig::default(),
            min_prefixes: 50,
        }
    }
}

/// Fixed-length sampled continuations of every prompt, scored from the
/// first generated token.
pub fn sample_continuations(
    model: &dyn LogitSource,
    watermark: Option<&Watermarker>,
    prompts: &[TokenSequence],
    gen_length: usize,
    seed: u64,
) -> Result<Vec<ScoredText>> {
    prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let opts = GenerateOptions::sampled(gen_length, keyed_hash(seed, i as u64)).fixed_length();
            let g = watermarked_generate(model, watermark, p, &opts)?;
            Ok(ScoredText::new(g.tokens.into_inner(), g.prompt_len))
        })
        .collect()
}

/// Unwatermarked negatives for [`calibrate_delta`].
pub fn unwatermarked_negatives(
    model: &dyn LogitSource,
    prompts: &[TokenSequence],
    gen_length: usize,
    seed: u64,
) -> Result<Vec<ScoredText>> {
    sample_continuations(model, None, prompts, gen_length, keyed_hash(seed, 0x004E_4547))
}

/// TPR at the target FPR for one boost value.
pub fn tpr_for_delta(
    model: &dyn LogitSource,
    template: &WatermarkSpec,
    delta: f64,
    target: &IntensityTarget,
    prompts: &[TokenSequence],
    negative_scores: &[f64],
    seed: u64,
) -> Result<f64> {
    let w = Watermarker::new(template.with_delta(delta), model.vocab_size())?;
    let detector = Detector::for_scheme(template.scheme);
    let positives = sample_continuations(model, Some(&w), prompts, target.gen_length, seed)?;
    let pos = z_scores(&positives, &w, detector, Some(model))?;
    Ok(Roc::from_scores(&pos, negative_scores)?.tpr_at_fpr(target.fpr))
}

/// Finds the boost reaching `target` for the green fraction fixed in
/// `template`.
pub fn calibrate_delta(
    model: &dyn LogitSource,
    template: &WatermarkSpec,
    target: &IntensityTarget,
    prompts: &[TokenSequence],
    negatives: &[ScoredText],
    options: &CalibrationOptions,
) -> Result<DeltaSearch> {
    if prompts.len() < options.min_prefixes {
        return Err(Error::InvalidParameter(format!(
            "calibration needs at least {} prompts, got {}",
            options.min_prefixes,
            prompts.len()
        )));
    }
    let w = Watermarker::new(*template, model.vocab_size())?;
    let neg = z_scores(negatives, &w, Detector::for_scheme(template.scheme), Some(model))?;
    bisect_delta(
        |d| tpr_for_delta(model, template, d, target, prompts, &neg, options.seed),
        target.target_tpr,
        &options.bisection,
    )
}

/// Outcome for one green fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaOutcome {
    pub gamma: f64,
    pub delta: Option<f64>,
    pub achieved_tpr: Option<f64>,
    pub perplexity: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChosenSetting {
    pub gamma: f64,
    pub delta: f64,
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub scheme: Scheme,
    pub key: u64,
    pub target: IntensityTarget,
    pub per_gamma: Vec<GammaOutcome>,
    pub chosen: ChosenSetting,
}

impl CalibrationResult {
    pub fn chosen_spec(&self) -> WatermarkSpec {
        WatermarkSpec {
            scheme: self.scheme,
            gamma: self.chosen.gamma,
            delta: self.chosen.delta,
            key: self.key,
        }
    }
}

/// Corpus-level perplexity `exp(sum NLL / sum tokens)` of `snippets` under
/// the given watermark.
pub fn corpus_perplexity(
    model: &dyn LogitSource,
    watermark: Option<&Watermarker>,
    snippets: &[TokenSequence],
) -> Result<f64> {
    let parts: Vec<(f64, usize)> = snippets
        .par_iter()
        .map(|s| negative_log_likelihood(model, s, watermark.map(|w| w as _)))
        .collect::<Result<_>>()?;
    let (nll, n) = parts.iter().fold((0.0, 0usize), |(a, b), (x, y)| (a + x, b + y));
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    Ok((nll / n as f64).exp())
}

/// Picks the lowest-perplexity calibrated tuple; ties go to the smaller
/// delta, then the smaller gamma.
pub fn pareto_select(
    model: &dyn LogitSource,
    scheme: Scheme,
    key: u64,
    target: IntensityTarget,
    mut per_gamma: Vec<GammaOutcome>,
    snippets: &[TokenSequence],
) -> Result<CalibrationResult> {
    for o in per_gamma.iter_mut() {
        if let (Some(delta), None) = (o.delta, o.perplexity) {
            let spec = WatermarkSpec::new(scheme, o.gamma, delta, key)?;
            let w = Watermarker::new(spec, model.vocab_size())?;
            o.perplexity = Some(corpus_perplexity(model, Some(&w), snippets)?);
        }
    }
    let chosen = per_gamma
        .iter()
        .filter_map(|o| match (o.delta, o.perplexity) {
            (Some(delta), Some(perplexity)) => Some(ChosenSetting {
                gamma: o.gamma,
                delta,
                perplexity,
            }),
            _ => None,
        })
        .min_by(|a, b| {
            a.perplexity
                .total_cmp(&b.perplexity)
                .then(a.delta.total_cmp(&b.delta))
                .then(a.gamma.total_cmp(&b.gamma))
        })
        .ok_or(Error::NoFeasibleGamma)?;
    Ok(CalibrationResult {
        scheme,
        key,
        target,
        per_gamma,
        chosen,
    })
}

/// Full per-scheme calibration: every gamma in `gamma_grid` (SIR ignores the
/// grid) is calibrated, then [`pareto_select`] picks the winner.
#[allow(clippy::too_many_arguments)]
pub fn calibrate(
    model: &dyn LogitSource,
    scheme: Scheme,
    key: u64,
    intensity: Intensity,
    gamma_grid: &[f64],
    prompts: &[TokenSequence],
    snippets: &[TokenSequence],
    options: &CalibrationOptions,
) -> Result<CalibrationResult> {
    let target = IntensityTarget::from(intensity);
    let grid: Vec<f64> = if scheme == Scheme::Sir {
        vec![0.5]
    } else {
        gamma_grid.to_vec()
    };
    let negatives = unwatermarked_negatives(model, prompts, target.gen_length, options.seed)?;
    let per_gamma: Vec<GammaOutcome> = grid
        .par_iter()
        .map(|&gamma| {
            let outcome = WatermarkSpec::new(scheme, gamma, 0.0, key).and_then(|template| {
                calibrate_delta(model, &template, &target, prompts, &negatives, options)
            });
            match outcome {
                Ok(s) => GammaOutcome {
                    gamma,
                    delta: Some(s.delta),
                    achieved_tpr: Some(s.achieved_tpr),
                    perplexity: None,
                    error: None,
                },
                Err(e) => {
                    log::warn!("{scheme} gamma={gamma}: {e}");
                    GammaOutcome {
                        gamma,
                        delta: None,
                        achieved_tpr: None,
                        perplexity: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    pareto_select(model, scheme, key, target, per_gamma, snippets)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intensity_targets() {
        let t: Vec<f64> = Intensity::ALL.iter().map(|i| i.target_tpr()).collect();
        assert_eq!(t, [0.5, 0.75, 0.95]);
        let m = IntensityTarget::from(Intensity::Moderate);
        assert_eq!((m.fpr, m.gen_length), (0.01, 50));
    }

    #[test]
    fn bisection_on_linear_oracle() {
        let s = bisect_delta(|d| Ok((d / 10.0).min(1.0)), 0.75, &BisectionConfig::default()).unwrap();
        assert!((s.achieved_tpr - 0.75).abs() <= 0.05);
        assert!((s.delta - 7.5).abs() <= 0.5);
    }

    #[test]
    fn bisection_returns_zero_when_already_met() {
        let s = bisect_delta(|_| Ok(0.9), 0.75, &BisectionConfig::default()).unwrap();
        assert_eq!(s.delta, 0.0);
        assert_eq!(s.trace.len(), 1);
    }

    #[test]
    fn bisection_reports_unachievable() {
        let r = bisect_delta(|_| Ok(0.2), 0.95, &BisectionConfig::default());
        assert!(matches!(r, Err(Error::UnachievableTarget { .. })));
    }

    #[test]
    fn bisection_with_step_oracle_returns_smallest_meeting_delta() {
        // TPR jumps from 0 to 1 at delta = 3.3; never within tolerance of 0.75
        let cfg = BisectionConfig::default();
        let s = bisect_delta(|d| Ok(if d >= 3.3 { 1.0 } else { 0.0 }), 0.75, &cfg).unwrap();
        assert!(s.delta >= 3.3 && s.delta - 3.3 < cfg.delta_max / 2f64.powi(19));
        assert_eq!(s.trace.len(), 2 + cfg.max_iterations);
    }

    fn outcome(gamma: f64, delta: f64, ppl: f64) -> GammaOutcome {
        GammaOutcome {
            gamma,
            delta: Some(delta),
            achieved_tpr: Some(0.75),
            perplexity: Some(ppl),
            error: None,
        }
    }

    fn dummy() -> impl LogitSource {
        crate::lm::FnSource::new(4, |_| vec![0.0; 4])
    }

    #[test]
    fn pareto_tie_breaks() {
        let target = IntensityTarget::from(Intensity::Moderate);
        let r = pareto_select(
            &dummy(),
            Scheme::Kgw,
            0,
            target,
            vec![
                outcome(0.1, 2.0, 5.0),
                outcome(0.25, 1.0, 5.0),
                outcome(0.5, 1.0, 5.0),
            ],
            &[],
        )
        .unwrap();
        assert_eq!((r.chosen.gamma, r.chosen.delta), (0.25, 1.0));
        let single = pareto_select(
            &dummy(),
            Scheme::Kgw,
            0,
            target,
            vec![outcome(0.75, 3.0, 9.0)],
            &[],
        )
        .unwrap();
        assert_eq!(single.chosen.gamma, 0.75);
    }

    #[test]
    fn pareto_without_feasible_gamma() {
        let failed = GammaOutcome {
            gamma: 0.1,
            delta: None,
            achieved_tpr: None,
            perplexity: None,
            error: Some("unachievable".into()),
        };
        assert!(matches!(
            pareto_select(
                &dummy(),
                Scheme::Kgw,
                0,
                Intensity::Heavy.into(),
                vec![failed],
                &[]
            ),
            Err(Error::NoFeasibleGamma)
        ));
    }
}
