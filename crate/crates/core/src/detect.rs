//! Watermark detection: green counting, the one-proportion z statistic, its
//! entropy-weighted variant, and empirical ROC curves.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::lm::{entropy_at, LogitSource};
use crate::watermark::{Scheme, WatermarkSpec, Watermarker};

/// Conventional decision threshold for the z statistic.
pub const DEFAULT_THRESHOLD: f64 = 4.0;
/// Lower clip applied to entropy weights.
pub const WEIGHT_FLOOR: f64 = 1e-3;

/// Result of recomputing the green lists over a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct GreenCount {
    pub green_count: usize,
    pub scored_length: usize,
    /// Per scored position, whether the token was green.
    pub flags: Vec<bool>,
    /// Mean green fraction of the recomputed partitions.
    pub mean_gamma: f64,
}

impl GreenCount {
    /// The gamma detection should test against: the configured one for
    /// KGW/EWD, the measured mean fraction for SIR.
    pub fn effective_gamma(&self, spec: &WatermarkSpec) -> f64 {
        match spec.scheme {
            Scheme::Sir => self.mean_gamma,
            _ => spec.gamma,
        }
    }
}

/// Counts green tokens at positions `1..len`.
pub fn count_green(seq: &[TokenId], spec: &WatermarkSpec, vocab_size: usize) -> Result<GreenCount> {
    count_green_from(seq, 1, &Watermarker::new(*spec, vocab_size)?)
}

/// Counts green tokens at positions `start..len`, each against the partition
/// implied by everything before it.
pub fn count_green_from(seq: &[TokenId], start: usize, watermarker: &Watermarker) -> Result<GreenCount> {
    let start = start.max(1);
    if seq.len() < 2 || start >= seq.len() {
        return Err(Error::SequenceTooShort {
            len: seq.len(),
            min: start.max(1) + 1,
        });
    }
    let mut flags = Vec::with_capacity(seq.len() - start);
    let mut fraction_sum = 0.0;
    for i in start..seq.len() {
        let p = watermarker.partition(&seq[..i])?;
        fraction_sum += p.green_fraction();
        flags.push(p.is_green(seq[i]));
    }
    let scored_length = flags.len();
    Ok(GreenCount {
        green_count: flags.iter().filter(|g| **g).count(),
        scored_length,
        flags,
        mean_gamma: fraction_sum / scored_length as f64,
    })
}

/// `(green - gamma T) / sqrt(T gamma (1 - gamma))`.
pub fn z_score(green_count: f64, scored_length: usize, gamma: f64) -> f64 {
    let t = scored_length as f64;
    (green_count - gamma * t) / (t * gamma * (1.0 - gamma)).sqrt()
}

/// Entropy-weighted statistic
/// `(sum W_i g_i - gamma sum W_i) / sqrt(gamma (1 - gamma) sum W_i^2)`.
///
/// Constant weights reduce it to [`z_score`].
pub fn weighted_z_score(weights: &[f64], flags: &[bool], gamma: f64) -> Result<f64> {
    if weights.len() != flags.len() {
        return Err(Error::LengthMismatch {
            expected: flags.len(),
            actual: weights.len(),
        });
    }
    let green: f64 = weights
        .iter()
        .zip(flags)
        .filter(|(_, g)| **g)
        .map(|(w, _)| w)
        .sum();
    let total: f64 = weights.iter().sum();
    let squares: f64 = weights.iter().map(|w| w * w).sum();
    if squares <= 0.0 {
        return Err(Error::UndefinedStatistic("all entropy weights are zero"));
    }
    Ok((green - gamma * total) / (gamma * (1.0 - gamma) * squares).sqrt())
}

/// Entropy of the model's next-token distribution at each position in
/// `start..len`, optionally clipped from below.
pub fn entropy_weights(
    model: &dyn LogitSource,
    seq: &[TokenId],
    start: usize,
    floor: Option<f64>,
) -> Result<Vec<f64>> {
    (start.max(1)..seq.len())
        .map(|i| {
            let h = entropy_at(model, &seq[..i])?;
            Ok(floor.map_or(h, |f| h.max(f)))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Detector {
    Plain,
    Ewd,
}

impl Detector {
    /// The detector each scheme is evaluated with.
    pub fn for_scheme(scheme: Scheme) -> Self {
        match scheme {
            Scheme::Ewd => Detector::Ewd,
            _ => Detector::Plain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub green_count: usize,
    pub scored_length: usize,
    /// `sum W_i g_i` for the weighted detector.
    pub weighted_green: Option<f64>,
    pub weights: Vec<f64>,
    pub gamma: f64,
    pub z: f64,
    pub threshold: f64,
    pub decision: bool,
}

/// Scores positions `start..len` of `seq`.
pub fn detect(
    seq: &[TokenId],
    start: usize,
    watermarker: &Watermarker,
    detector: Detector,
    model: Option<&dyn LogitSource>,
    threshold: f64,
) -> Result<DetectionReport> {
    let counts = count_green_from(seq, start, watermarker)?;
    let gamma = counts.effective_gamma(watermarker.spec());
    let (z, weighted_green, weights) = match detector {
        Detector::Plain => (
            z_score(counts.green_count as f64, counts.scored_length, gamma),
            None,
            Vec::new(),
        ),
        Detector::Ewd => {
            let model = model
                .ok_or_else(|| Error::InvalidParameter("entropy-weighted detection needs a model".into()))?;
            let weights = entropy_weights(model, seq, start, Some(WEIGHT_FLOOR))?;
            let z = weighted_z_score(&weights, &counts.flags, gamma)?;
            let wg = weights
                .iter()
                .zip(&counts.flags)
                .filter(|(_, g)| **g)
                .map(|(w, _)| w)
                .sum();
            (z, Some(wg), weights)
        }
    };
    Ok(DetectionReport {
        green_count: counts.green_count,
        scored_length: counts.scored_length,
        weighted_green,
        weights,
        gamma,
        z,
        threshold,
        decision: z > threshold,
    })
}

/// EWD detection of a whole sequence from position 1.
pub fn ewd_z_score(
    seq: &[TokenId],
    spec: &WatermarkSpec,
    model: &dyn LogitSource,
) -> Result<DetectionReport> {
    let w = Watermarker::new(*spec, model.vocab_size())?;
    detect(seq, 1, &w, Detector::Ewd, Some(model), DEFAULT_THRESHOLD)
}

/// A token sequence and the first position that should be scored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredText {
    pub tokens: Vec<TokenId>,
    pub start: usize,
}

impl ScoredText {
    pub fn new(tokens: Vec<TokenId>, start: usize) -> Self {
        Self { tokens, start }
    }

    pub fn whole(tokens: Vec<TokenId>) -> Self {
        Self { tokens, start: 1 }
    }
}

/// Detection statistics of many texts, in input order.
pub fn z_scores(
    texts: &[ScoredText],
    watermarker: &Watermarker,
    detector: Detector,
    model: Option<&dyn LogitSource>,
) -> Result<Vec<f64>> {
    texts
        .par_iter()
        .map(|t| {
            detect(
                &t.tokens,
                t.start,
                watermarker,
                detector,
                model,
                DEFAULT_THRESHOLD,
            )
            .map(|r| r.z)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// Empirical ROC over detector scores; a text is flagged when its score is
/// strictly above the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Roc {
    positives: Vec<f64>,
    negatives: Vec<f64>,
}

impl Roc {
    pub fn from_scores(positives: &[f64], negatives: &[f64]) -> Result<Self> {
        if positives.is_empty() {
            return Err(Error::EmptySample("positives"));
        }
        if negatives.is_empty() {
            return Err(Error::EmptySample("negatives"));
        }
        let sorted = |v: &[f64]| {
            let mut v = v.to_vec();
            v.sort_by(f64::total_cmp);
            v
        };
        Ok(Self {
            positives: sorted(positives),
            negatives: sorted(negatives),
        })
    }

    fn rate_above(sorted: &[f64], threshold: f64) -> f64 {
        let at_or_below = sorted.partition_point(|&x| x <= threshold);
        (sorted.len() - at_or_below) as f64 / sorted.len() as f64
    }

    pub fn tpr(&self, threshold: f64) -> f64 {
        Self::rate_above(&self.positives, threshold)
    }

    pub fn fpr(&self, threshold: f64) -> f64 {
        Self::rate_above(&self.negatives, threshold)
    }

    /// One point per distinct observed score, ascending threshold.
    pub fn points(&self) -> Vec<RocPoint> {
        let mut thresholds: Vec<f64> = self.positives.iter().chain(&self.negatives).copied().collect();
        thresholds.sort_by(f64::total_cmp);
        thresholds.dedup();
        thresholds
            .into_iter()
            .map(|t| RocPoint {
                threshold: t,
                tpr: self.tpr(t),
                fpr: self.fpr(t),
            })
            .collect()
    }

    /// The operating point with the highest TPR whose FPR does not exceed
    /// `target`: the threshold is the lowest one keeping at most
    /// `floor(target * N)` negatives above it.
    pub fn at_fpr(&self, target: f64) -> RocPoint {
        let n = self.negatives.len();
        let allowed = ((target * n as f64) + 1e-9).floor() as usize;
        let threshold = if allowed >= n {
            f64::NEG_INFINITY
        } else {
            self.negatives[n - allowed - 1]
        };
        RocPoint {
            threshold,
            tpr: self.tpr(threshold),
            fpr: self.fpr(threshold),
        }
    }

    pub fn tpr_at_fpr(&self, target: f64) -> f64 {
        self.at_fpr(target).tpr
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "threshold,tpr,fpr")?;
        for p in self.points() {
            writeln!(out, "{},{},{}", p.threshold, p.tpr, p.fpr)?;
        }
        Ok(())
    }
}

/// Scores both samples with the same detector and builds their ROC.
pub fn empirical_roc(
    positives: &[ScoredText],
    negatives: &[ScoredText],
    watermarker: &Watermarker,
    detector: Detector,
    model: Option<&dyn LogitSource>,
) -> Result<Roc> {
    if positives.is_empty() {
        return Err(Error::EmptySample("positives"));
    }
    if negatives.is_empty() {
        return Err(Error::EmptySample("negatives"));
    }
    let pos = z_scores(positives, watermarker, detector, model)?;
    let neg = z_scores(negatives, watermarker, detector, model)?;
    Roc::from_scores(&pos, &neg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn z_score_examples() {
        assert_eq!(z_score(25.0, 100, 0.25), 0.0);
        assert!((z_score(40.0, 100, 0.25) - 15.0 / 18.75f64.sqrt()).abs() < 1e-12);
        assert!((z_score(40.0, 100, 0.25) - 3.464_101_615_137_754).abs() < 1e-12);
        assert!((z_score(16.0, 16, 0.5) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn too_short_sequences() {
        let spec = WatermarkSpec::kgw(0.25, 1.0, 1).unwrap();
        assert!(matches!(
            count_green(&[3], &spec, 10),
            Err(Error::SequenceTooShort { .. })
        ));
        assert!(count_green(&[3, 4], &spec, 10).unwrap().scored_length == 1);
    }

    #[test]
    fn constant_weights_reduce_to_plain() {
        let flags = [true, false, true, true, false, false, true, false];
        let plain = z_score(4.0, 8, 0.25);
        for w in [0.3, 1.0, 7.5] {
            let z = weighted_z_score(&[w; 8], &flags, 0.25).unwrap();
            assert!((z - plain).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_are_undefined() {
        assert!(matches!(
            weighted_z_score(&[0.0; 4], &[true; 4], 0.5),
            Err(Error::UndefinedStatistic(_))
        ));
        let clipped = [0.0f64; 4].map(|w| w.max(WEIGHT_FLOOR));
        assert!(weighted_z_score(&clipped, &[true; 4], 0.5).unwrap().is_finite());
    }

    #[test]
    fn green_mass_on_high_entropy_positions_raises_z() {
        // 4 of 8 green in both cases; weighting concentrates on green positions
        let flags = [true, true, true, true, false, false, false, false];
        let weights = [2.0, 2.0, 2.0, 2.0, 0.1, 0.1, 0.1, 0.1];
        let plain = z_score(4.0, 8, 0.25);
        let weighted = weighted_z_score(&weights, &flags, 0.25).unwrap();
        // direct evaluation: (8 - 0.25*8.4)/sqrt(0.1875*16.04)
        let expected = (8.0 - 0.25 * 8.4) / (0.1875f64 * 16.04).sqrt();
        assert!((weighted - expected).abs() < 1e-12);
        assert!(weighted > plain);
    }

    #[test]
    fn roc_identical_samples() {
        let s = [0.1, 0.5, 0.5, 2.0, 3.0];
        let roc = Roc::from_scores(&s, &s).unwrap();
        for p in roc.points() {
            assert_eq!(p.tpr, p.fpr);
        }
    }

    #[test]
    fn roc_is_monotone_and_conservative() {
        let pos: Vec<f64> = (0..100).map(|i| i as f64 / 10.0 + 2.0).collect();
        let neg: Vec<f64> = (0..100).map(|i| i as f64 / 25.0).collect();
        let roc = Roc::from_scores(&pos, &neg).unwrap();
        let pts = roc.points();
        for w in pts.windows(2) {
            assert!(w[1].tpr <= w[0].tpr && w[1].fpr <= w[0].fpr);
        }
        let op = roc.at_fpr(0.01);
        assert!(op.fpr <= 0.01);
        // one step lower would exceed the budget
        assert!(roc.fpr(neg[98] - 1e-9) > 0.01);
        assert_eq!(op.threshold, neg[98]);
    }

    #[test]
    fn roc_needs_both_samples() {
        assert!(matches!(
            Roc::from_scores(&[], &[1.0]),
            Err(Error::EmptySample(_))
        ));
        assert!(matches!(
            Roc::from_scores(&[1.0], &[]),
            Err(Error::EmptySample(_))
        ));
    }
}
