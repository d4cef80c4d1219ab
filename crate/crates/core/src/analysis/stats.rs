use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::diffcore::centered_moments;
use crate::earlystop::TrainRecord;
use crate::stabilize::FlatnessReport;

const MIN_EPOCHS: usize = 10;
const SHUFFLES: usize = 100;
const SHUFFLE_SEED: u64 = 0x5eed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pearson {
    pub r: f64,
    /// Two-sided, from the t statistic with `n - 2` degrees of freedom.
    pub p_value: f64,
    pub n: usize,
}

/// `None` when either series has no spread.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<Pearson> {
    assert_eq!(x.len(), y.len(), "pearson: series lengths differ");
    let n = x.len();
    if n < 3 {
        return None;
    }
    let (sxy, sx, sy) = centered_moments(x, y);
    let scale = x.iter().chain(y).fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    if sx <= 1e-12 * scale || sy <= 1e-12 * scale {
        return None;
    }
    let r = (sxy / (sx * sy)).clamp(-1.0, 1.0);
    Some(Pearson { r, p_value: pearson_p_value(r, n), n })
}

/// Two-sided p-value of `r` under the null of no correlation. Floored at the
/// smallest positive double, so a perfectly linear series reports a tiny
/// positive value rather than 0.
pub fn pearson_p_value(r: f64, n: usize) -> f64 {
    assert!(n >= 3, "p-value needs at least 3 points");
    let df = (n - 2) as f64;
    let r2 = r * r;
    if r2 >= 1.0 {
        return f64::MIN_POSITIVE;
    }
    // P(|T| > t) = I_{df/(df+t²)}(df/2, 1/2) and df/(df+t²) = 1 - r²
    let p = regularized_incomplete_beta(0.5 * df, 0.5, 1.0 - r2);
    p.clamp(f64::MIN_POSITIVE, 1.0)
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos, g = 7
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    // the continued fraction converges fast on this side of the mean
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_fraction(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_fraction(b, a, 1.0 - x) / b
    }
}

/// Modified Lentz evaluation of the incomplete beta continued fraction.
fn beta_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut f = d;
    for m in 1..=500 {
        let m = m as f64;
        for num in [
            m * (b - m) * x / ((a + 2.0 * m - 1.0) * (a + 2.0 * m)),
            -(a + m) * (a + b + m) * x / ((a + 2.0 * m) * (a + 2.0 * m + 1.0)),
        ] {
            d = 1.0 + num * d;
            if d.abs() < TINY {
                d = TINY;
            }
            c = 1.0 + num / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            f *= c * d;
        }
        if (c * d - 1.0).abs() < 1e-15 {
            break;
        }
    }
    f
}

/// `⌈√n⌉`
pub fn bin_count(n: usize) -> usize {
    ((n as f64).sqrt().ceil() as usize).max(1)
}

/// Equal-width bin index over `[lo, hi]`; a constant series falls in bin 0.
fn bin_indices(x: &[f64], bins: usize) -> Vec<usize> {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = hi - lo;
    x.iter()
        .map(|&v| {
            if width <= 0.0 {
                0
            } else {
                (((v - lo) / width * bins as f64) as usize).min(bins - 1)
            }
        })
        .collect()
}

/// Plug-in entropy (nats) of `x` under `bins` equal-width bins.
pub fn binned_entropy(x: &[f64], bins: usize) -> f64 {
    let mut counts = vec![0usize; bins];
    for i in bin_indices(x, bins) {
        counts[i] += 1;
    }
    entropy_of(counts.into_iter(), x.len())
}

fn entropy_of(counts: impl Iterator<Item = usize>, n: usize) -> f64 {
    let n = n as f64;
    -counts.filter(|&c| c > 0).map(|c| c as f64 / n).map(|p| p * p.ln()).sum::<f64>()
}

fn mi_from_indices(ix: &[usize], iy: &[usize], bins: usize) -> f64 {
    let n = ix.len();
    let mut joint = vec![0usize; bins * bins];
    let mut cx = vec![0usize; bins];
    let mut cy = vec![0usize; bins];
    for (&a, &b) in ix.iter().zip(iy) {
        joint[a * bins + b] += 1;
        cx[a] += 1;
        cy[b] += 1;
    }
    // H(X) + H(Y) - H(X,Y) keeps the estimate exactly symmetric
    let hx = entropy_of(cx.into_iter(), n);
    let hy = entropy_of(cy.into_iter(), n);
    let hxy = entropy_of(joint.into_iter(), n);
    (hx + hy - hxy).max(0.0)
}

/// Plug-in mutual information (nats) with the given number of equal-width
/// bins per axis.
pub fn mutual_information_binned(x: &[f64], y: &[f64], bins: usize) -> f64 {
    assert_eq!(x.len(), y.len(), "mutual information: series lengths differ");
    assert!(bins > 0 && !x.is_empty());
    mi_from_indices(&bin_indices(x, bins), &bin_indices(y, bins), bins)
}

/// Plug-in mutual information with `⌈√n⌉` bins per axis.
pub fn mutual_information(x: &[f64], y: &[f64]) -> f64 {
    mutual_information_binned(x, y, bin_count(x.len()))
}

/// Mean plug-in MI over fixed-seed shuffles of `y`: the value the estimator
/// reports for these marginals when there is no dependence at all.
pub fn shuffled_mi_baseline(x: &[f64], y: &[f64]) -> f64 {
    let bins = bin_count(x.len());
    let ix = bin_indices(x, bins);
    let mut iy = bin_indices(y, bins);
    let mut rng = ChaCha8Rng::seed_from_u64(SHUFFLE_SEED);
    let mut total = 0.0;
    for _ in 0..SHUFFLES {
        iy.shuffle(&mut rng);
        total += mi_from_indices(&ix, &iy, bins);
    }
    total / SHUFFLES as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossCorrelationReport {
    pub pearson_r: f64,
    pub p_value: f64,
    /// Plug-in estimate, directly comparable with published binned MI values.
    pub mutual_information_nats: f64,
    pub mi_shuffle_baseline: f64,
    /// MI above the shuffle baseline, clamped at 0.
    pub mi_excess_nats: f64,
    pub n_epochs: usize,
}

/// Pearson correlation and binned mutual information between two aligned
/// loss series (typically reconstruction MSE and the correlation loss).
pub fn loss_correlation(mse: &[f64], corr: &[f64]) -> Result<LossCorrelationReport, AnalysisError> {
    if mse.len() != corr.len() {
        return Err(AnalysisError::Misaligned(format!("{} vs {} epochs", mse.len(), corr.len())));
    }
    if mse.len() < MIN_EPOCHS {
        return Err(AnalysisError::TooShort { needed: MIN_EPOCHS, got: mse.len() });
    }
    if mse.iter().chain(corr).any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite("loss series".into()));
    }
    let p = pearson(mse, corr).ok_or(AnalysisError::UndefinedCorrelation)?;
    let mi = mutual_information(mse, corr);
    let baseline = shuffled_mi_baseline(mse, corr);
    Ok(LossCorrelationReport {
        pearson_r: p.r,
        p_value: p.p_value,
        mutual_information_nats: mi,
        mi_shuffle_baseline: baseline,
        mi_excess_nats: (mi - baseline).max(0.0),
        n_epochs: mse.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainValCorrelation {
    /// `None` when a series is constant.
    pub r_all: Option<f64>,
    /// `None` when the plateau is shorter than 3 epochs or constant.
    pub r_plateau: Option<f64>,
    pub plateau_start: usize,
    pub plateau_length: usize,
}

/// Pearson correlation between training and validation loss, over every
/// epoch and over the plateau epochs only.
pub fn train_val_correlation(
    record: &TrainRecord,
    plateau: &FlatnessReport,
) -> Result<TrainValCorrelation, AnalysisError> {
    let total = record.totals();
    let val = record.vals();
    let range = plateau.epochs();
    if range.end > total.len() {
        return Err(AnalysisError::Misaligned(format!(
            "plateau ends at epoch {} but the record has {} epochs",
            range.end,
            total.len()
        )));
    }
    let r_all = pearson(&total, &val).map(|p| p.r);
    let r_plateau = if plateau.plateau_length >= 3 {
        pearson(&total[range.clone()], &val[range]).map(|p| p.r)
    } else {
        None
    };
    Ok(TrainValCorrelation {
        r_all,
        r_plateau,
        plateau_start: plateau.plateau_start,
        plateau_length: plateau.plateau_length,
    })
}
