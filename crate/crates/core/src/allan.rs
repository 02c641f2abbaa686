//! Overlapping Allan deviation and noise-density extraction from its log-log
//! slopes: −1/2 for white noise, 0 for bias instability, +1/2 for random walk.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imu::ImuSample;

const DEFAULT_TAU_COUNT: usize = 200;
const SLOPE_WINDOW_DECADES: f64 = 0.5;
const SLOPE_TOLERANCE: f64 = 0.15;
const MIN_DECADES: f64 = 3.0;
/// Ratio of the Allan deviation minimum to the bias instability for flicker noise.
pub const FLICKER_FLOOR_RATIO: f64 = 0.664;

#[derive(Debug, Clone, PartialEq)]
pub struct AllanCurve {
    pub taus: Vec<f64>,
    pub adev: Vec<f64>,
}

/// Up to 200 log-spaced cluster times from `2/rate` to `duration/9`, rounded
/// to whole samples.
pub fn default_taus(rate_hz: f64, num_samples: usize) -> Vec<f64> {
    let duration = num_samples as f64 / rate_hz;
    let lo = 2.0 / rate_hz;
    let hi = duration / 9.0;
    if !(hi > lo) {
        return Vec::new();
    }
    let ratio = (hi / lo).ln();
    let mut out: Vec<f64> = Vec::with_capacity(DEFAULT_TAU_COUNT);
    for i in 0..DEFAULT_TAU_COUNT {
        let tau = lo * (ratio * i as f64 / (DEFAULT_TAU_COUNT - 1) as f64).exp();
        let m = (tau * rate_hz).round().max(1.0);
        let tau = m / rate_hz;
        if tau <= hi * (1.0 + 1e-12) && out.last().is_none_or(|&last| tau > last) {
            out.push(tau);
        }
    }
    out
}

/// Overlapping Allan deviation of a uniformly sampled signal at each `tau`.
pub fn allan_deviation(samples: &[f64], rate_hz: f64, taus: &[f64]) -> Result<AllanCurve> {
    if !(rate_hz > 0.0) {
        return Err(Error::Argument(format!("sample rate must be positive, got {rate_hz}")));
    }
    if taus.is_empty() {
        return Err(Error::InsufficientData("no cluster times".into()));
    }
    if taus.windows(2).any(|w| !(w[1] > w[0])) || !(taus[0] > 0.0) {
        return Err(Error::Argument("cluster times must be positive and increasing".into()));
    }
    let max_tau = taus[taus.len() - 1];
    let needed = (9.0 * max_tau * rate_hz).ceil() as usize;
    if samples.len() < needed {
        return Err(Error::InsufficientData(format!(
            "{} samples; tau = {max_tau} s needs at least {needed}",
            samples.len()
        )));
    }
    if samples.iter().all(|&x| x == samples[0]) {
        return Ok(AllanCurve {
            taus: taus.to_vec(),
            adev: vec![0.0; taus.len()],
        });
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let dt = 1.0 / rate_hz;
    let mut theta = Vec::with_capacity(samples.len() + 1);
    let mut acc = 0.0;
    theta.push(0.0);
    for x in samples {
        acc += (x - mean) * dt;
        theta.push(acc);
    }
    let adev = taus
        .par_iter()
        .map(|&tau| {
            let m = ((tau * rate_hz).round() as usize).max(1);
            let tau_m = m as f64 * dt;
            let count = theta.len() - 2 * m;
            let sum: f64 = (0..count)
                .map(|i| {
                    let d = theta[i + 2 * m] - 2.0 * theta[i + m] + theta[i];
                    d * d
                })
                .sum();
            (sum / (2.0 * tau_m * tau_m * count as f64)).sqrt()
        })
        .collect();
    Ok(AllanCurve {
        taus: taus.to_vec(),
        adev,
    })
}

/// Cluster-time ranges that replace automatic region detection.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionOverrides {
    pub white: Option<(f64, f64)>,
    pub flat: Option<(f64, f64)>,
    pub random_walk: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ExtractOptions {
    /// Divide the curve minimum by 0.664 for the bias instability.
    pub flicker_normalization: bool,
    pub overrides: RegionOverrides,
}

/// Noise parameters read from one curve; `None` marks a region that was not found.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseParameters {
    /// Value of the −1/2 line at τ = 1 s.
    pub white_density: Option<f64>,
    pub bias_stability: Option<f64>,
    /// Value of the +1/2 line at τ = 3 s.
    pub random_walk_density: Option<f64>,
}

/// Log-log slope at each point from a least-squares line over a half-decade window.
pub fn local_slopes(curve: &AllanCurve) -> Vec<f64> {
    let lt: Vec<f64> = curve.taus.iter().map(|t| t.log10()).collect();
    let la: Vec<f64> = curve.adev.iter().map(|a| a.max(f64::MIN_POSITIVE).log10()).collect();
    let half = SLOPE_WINDOW_DECADES / 2.0;
    (0..lt.len())
        .map(|i| {
            let idx: Vec<usize> = (0..lt.len()).filter(|&j| (lt[j] - lt[i]).abs() <= half).collect();
            let n = idx.len() as f64;
            let mx = idx.iter().map(|&j| lt[j]).sum::<f64>() / n;
            let my = idx.iter().map(|&j| la[j]).sum::<f64>() / n;
            let sxy: f64 = idx.iter().map(|&j| (lt[j] - mx) * (la[j] - my)).sum();
            let sxx: f64 = idx.iter().map(|&j| (lt[j] - mx).powi(2)).sum();
            if sxx > 0.0 {
                sxy / sxx
            } else {
                0.0
            }
        })
        .collect()
}

fn runs(mask: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &m) in mask.iter().chain(std::iter::once(&false)).enumerate() {
        match (m, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    out
}

fn indices_in(curve: &AllanCurve, range: (f64, f64)) -> Vec<usize> {
    (0..curve.taus.len())
        .filter(|&i| curve.taus[i] >= range.0 && curve.taus[i] <= range.1)
        .collect()
}

/// `exp(mean(ln adev − slope·ln τ))`, the fixed-slope line's value at τ = 1.
fn fixed_slope_intercept(curve: &AllanCurve, idx: &[usize], slope: f64) -> Option<f64> {
    let valid: Vec<f64> = idx
        .iter()
        .filter(|&&i| curve.adev[i] > 0.0)
        .map(|&i| curve.adev[i].ln() - slope * curve.taus[i].ln())
        .collect();
    (!valid.is_empty()).then(|| (valid.iter().sum::<f64>() / valid.len() as f64).exp())
}

fn weighted_fixed_slope_intercept(
    curve: &AllanCurve,
    idx: &[usize],
    slope: f64,
    weight: impl Fn(usize) -> f64,
) -> Option<f64> {
    let (mut sum, mut total) = (0.0, 0.0);
    for &i in idx.iter().filter(|&&i| curve.adev[i] > 0.0) {
        let w = weight(i);
        sum += w * (curve.adev[i].ln() - slope * curve.taus[i].ln());
        total += w;
    }
    (total > 0.0).then(|| (sum / total).exp())
}

/// White density, bias stability and random-walk density of one curve.
pub fn extract_noise_params(curve: &AllanCurve, options: &ExtractOptions) -> Result<NoiseParameters> {
    if curve.taus.len() < 3 || curve.taus.len() != curve.adev.len() {
        return Err(Error::InsufficientData("curve needs at least 3 points".into()));
    }
    let decades = (curve.taus[curve.taus.len() - 1] / curve.taus[0]).log10();
    if decades < MIN_DECADES {
        return Err(Error::InsufficientData(format!(
            "curve spans {decades:.2} decades of tau, need {MIN_DECADES}"
        )));
    }
    let slopes = local_slopes(curve);
    let region = |target: f64| -> Vec<(usize, usize)> {
        runs(&slopes.iter().map(|s| (s - target).abs() <= SLOPE_TOLERANCE).collect::<Vec<_>>())
            .into_iter()
            .filter(|(a, b)| b - a >= 2)
            .collect()
    };

    let white_idx = match options.overrides.white {
        Some(r) => indices_in(curve, r),
        None => region(-0.5).first().map(|&(a, b)| (a..b).collect()).unwrap_or_default(),
    };
    let flat_idx: Vec<usize> = match options.overrides.flat {
        Some(r) => indices_in(curve, r),
        None => region(0.0).into_iter().flat_map(|(a, b)| a..b).collect(),
    };

    let white_density = fixed_slope_intercept(curve, &white_idx, -0.5);
    // Read after removing the white-noise share of the Allan variance.
    let walk_curve = match white_density {
        Some(w) => AllanCurve {
            taus: curve.taus.clone(),
            adev: curve
                .taus
                .iter()
                .zip(&curve.adev)
                .map(|(t, a)| (a * a - w * w / t).max(0.0).sqrt())
                .collect(),
        },
        None => curve.clone(),
    };
    let walk_idx: Vec<usize> = match options.overrides.random_walk {
        Some(r) => indices_in(&walk_curve, r),
        None => {
            let walk_slopes = local_slopes(&walk_curve);
            runs(&walk_slopes.iter().map(|s| (s - 0.5).abs() <= SLOPE_TOLERANCE).collect::<Vec<_>>())
                .into_iter()
                .filter(|(a, b)| b - a >= 2)
                .max_by_key(|(a, b)| b - a)
                .map(|(a, b)| (a..b).collect())
                .unwrap_or_default()
        }
    };
    // Inverse-variance weights: the relative scatter of an overlapping estimate
    // grows like √τ and is amplified where the white share dominated.
    let walk_weight = |i: usize| {
        let share = (walk_curve.adev[i] / curve.adev[i]).powi(2);
        share * share / curve.taus[i]
    };
    let random_walk_density =
        weighted_fixed_slope_intercept(&walk_curve, &walk_idx, 0.5, walk_weight).map(|c| c * 3f64.sqrt());
    let bias_stability = flat_idx
        .iter()
        .map(|&i| curve.adev[i])
        .min_by(f64::total_cmp)
        .map(|m| if options.flicker_normalization { m / FLICKER_FLOOR_RATIO } else { m });
    Ok(NoiseParameters {
        white_density,
        bias_stability,
        random_walk_density,
    })
}

pub const CHANNEL_NAMES: [&str; 6] = ["gx", "gy", "gz", "ax", "ay", "az"];

#[derive(Debug, Clone, PartialEq)]
pub struct ImuAllanAnalysis {
    pub rate_hz: f64,
    pub duration: f64,
    /// Gyroscope x, y, z then accelerometer x, y, z.
    pub curves: Vec<AllanCurve>,
    pub parameters: Vec<NoiseParameters>,
}

/// Mean sample rate of a time-ordered stream.
pub fn sample_rate(samples: &[ImuSample]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::InsufficientData("need at least two samples".into()));
    }
    let span = samples[samples.len() - 1].timestamp - samples[0].timestamp;
    if !(span > 0.0) {
        return Err(Error::Argument("timestamps must increase".into()));
    }
    Ok((samples.len() - 1) as f64 / span)
}

/// Curves and noise parameters of all six channels of a static recording.
pub fn analyze_imu(samples: &[ImuSample], taus: Option<&[f64]>, options: &ExtractOptions) -> Result<ImuAllanAnalysis> {
    let rate = sample_rate(samples)?;
    let default;
    let taus = match taus {
        Some(t) => t,
        None => {
            default = default_taus(rate, samples.len());
            &default
        }
    };
    let mut curves = Vec::with_capacity(6);
    let mut parameters = Vec::with_capacity(6);
    for ch in 0..6 {
        let signal: Vec<f64> = samples
            .iter()
            .map(|s| if ch < 3 { s.gyro[ch] } else { s.accel[ch - 3] })
            .collect();
        let curve = allan_deviation(&signal, rate, taus)?;
        parameters.push(extract_noise_params(&curve, options)?);
        curves.push(curve);
    }
    Ok(ImuAllanAnalysis {
        rate_hz: rate,
        duration: samples.len() as f64 / rate,
        curves,
        parameters,
    })
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<Option<f64>> = values.collect();
    if v.iter().any(Option::is_none) {
        return None;
    }
    Some(v.iter().flatten().sum::<f64>() / v.len() as f64)
}

impl ImuAllanAnalysis {
    /// Accelerometer and gyroscope rows with a mean row for each sensor;
    /// absent values print as `X`.
    pub fn noise_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "X".to_string(), |x| format!("{x:.3e}"));
        let mut out = String::from("sensor,axis,white_density,bias_stability,random_walk_density\n");
        for (sensor, first) in [("accelerometer", 3), ("gyroscope", 0)] {
            let rows = &self.parameters[first..first + 3];
            for (axis, p) in ["x", "y", "z"].iter().zip(rows) {
                out.push_str(&format!(
                    "{sensor},{axis},{},{},{}\n",
                    fmt(p.white_density),
                    fmt(p.bias_stability),
                    fmt(p.random_walk_density)
                ));
            }
            out.push_str(&format!(
                "{sensor},mean,{},{},{}\n",
                fmt(mean_of(rows.iter().map(|p| p.white_density))),
                fmt(mean_of(rows.iter().map(|p| p.bias_stability))),
                fmt(mean_of(rows.iter().map(|p| p.random_walk_density)))
            ));
        }
        out
    }

    /// `tau` followed by one Allan-deviation column per channel.
    pub fn curves_csv(&self) -> String {
        let mut out = format!("tau_s,{}\n", CHANNEL_NAMES.join(","));
        for (i, tau) in self.curves[0].taus.iter().enumerate() {
            out.push_str(&tau.to_string());
            for c in &self.curves {
                out.push(',');
                out.push_str(&c.adev[i].to_string());
            }
            out.push('\n');
        }
        out
    }
}
