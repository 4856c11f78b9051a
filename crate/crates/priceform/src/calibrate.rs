//! Calibration of the model to hourly market data.
//!
//! The pipeline: load hourly demand/price records, flip demand into a supply
//! rate and normalize both series, fit a truncated Fourier series to the
//! mean daily supply profile, fit an Ornstein-Uhlenbeck model to the
//! residuals by exact maximum likelihood, and recover the cost parameters by
//! regressing the mean daily price profile on the terms of the deterministic
//! price formula.
//!
//! ```
//! use priceform::calibrate::{calibrate_dataset, MarketDataset};
//!
//! let dataset = MarketDataset::from_csv_path("../../data/synthetic.csv")?;
//! let report = calibrate_dataset(&dataset, 4, 0.0)?;
//! assert!(report.ou.theta > 0.0);
//! // Normalized prices have unit variance; the fit must explain most of it.
//! assert!(report.cost.residual_rms < 1.0);
//! # Ok::<(), priceform::Error>(())
//! ```

use std::io::Read as IoRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{lstsq, Matrix};
use crate::market::MarketParams;
use crate::supply::{FourierSeries, FourierTerm};

/// One hourly observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourRecord {
    /// Calendar date label (used only for grouping into days).
    pub date: String,
    /// Hour of the day, `0..hours_per_day`.
    pub hour: u32,
    /// Observed demand (flipped into supply as `-demand`).
    pub demand: f64,
    /// Observed price.
    pub price: f64,
}

/// Affine normalizations applied to the raw series (z-scores).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    /// Mean of the raw supply series (`-demand`).
    pub supply_mean: f64,
    /// Standard deviation of the raw supply series.
    pub supply_sd: f64,
    /// Mean of the raw price series.
    pub price_mean: f64,
    /// Standard deviation of the raw price series.
    pub price_sd: f64,
}

/// A validated panel of hourly records covering whole days.
#[derive(Debug, Clone)]
pub struct MarketDataset {
    /// Records sorted by day then hour.
    pub records: Vec<HourRecord>,
    /// Day labels in order of first appearance.
    pub days: Vec<String>,
    /// Number of hourly observations per day (identical across days).
    pub hours_per_day: usize,
}

impl MarketDataset {
    /// Loads a dataset from CSV with columns `date,hour,demand,price`.
    pub fn from_csv_path<P: AsRef<Path>>(path: P) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_reader(file)
    }

    /// Loads a dataset from any CSV reader (header row required).
    pub fn from_reader<R: IoRead>(reader: R) -> Result<Self> {
        let mut csv_reader = csv::Reader::from_reader(reader);
        let mut records = Vec::new();
        for row in csv_reader.deserialize::<HourRecord>() {
            records.push(row?);
        }
        Self::from_records(records)
    }

    /// Validates raw records: whole days on a common hourly grid.
    pub fn from_records(mut records: Vec<HourRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidData("dataset is empty".into()));
        }
        for r in &records {
            if !r.demand.is_finite() || !r.price.is_finite() {
                return Err(Error::InvalidData(format!(
                    "non-finite observation on {} hour {}",
                    r.date, r.hour
                )));
            }
        }
        // Stable grouping: preserve day order of first appearance.
        let mut days: Vec<String> = Vec::new();
        for r in &records {
            if !days.contains(&r.date) {
                days.push(r.date.clone());
            }
        }
        let day_index = |d: &str| days.iter().position(|x| x == d).unwrap();
        records.sort_by_key(|r| (day_index(&r.date), r.hour));
        let hours_per_day = records.iter().filter(|r| r.date == days[0]).count();
        if hours_per_day < 2 {
            return Err(Error::InvalidData(
                "each day needs at least two hourly observations".into(),
            ));
        }
        for (d_idx, day) in days.iter().enumerate() {
            let day_records: Vec<&HourRecord> =
                records.iter().filter(|r| &r.date == day).collect();
            if day_records.len() != hours_per_day {
                return Err(Error::InvalidData(format!(
                    "day {day} has {} records, expected {hours_per_day}",
                    day_records.len()
                )));
            }
            for (h, r) in day_records.iter().enumerate() {
                if r.hour as usize != h {
                    return Err(Error::InvalidData(format!(
                        "day {day} is missing hour {h} (found {})",
                        r.hour
                    )));
                }
            }
            let _ = d_idx;
        }
        Ok(MarketDataset {
            records,
            days,
            hours_per_day,
        })
    }

    /// Number of days in the panel.
    pub fn n_days(&self) -> usize {
        self.days.len()
    }

    /// Normalized-time grid of one day: hour `h` maps to `h / (H - 1)`, so a
    /// day spans `[0, 1]` with step `1 / (H - 1)`.
    pub fn day_grid(&self) -> Vec<f64> {
        let h = self.hours_per_day;
        (0..h).map(|i| i as f64 / (h - 1) as f64).collect()
    }

    /// Normalized per-day supply (`-demand`, z-scored) and price (z-scored)
    /// matrices indexed `[day][hour]`, plus the normalization metadata.
    pub fn normalized(&self) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Normalization)> {
        let n = self.records.len() as f64;
        let supply_raw: Vec<f64> = self.records.iter().map(|r| -r.demand).collect();
        let price_raw: Vec<f64> = self.records.iter().map(|r| r.price).collect();
        let stats = |xs: &[f64]| {
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            (mean, var.sqrt())
        };
        let (supply_mean, supply_sd) = stats(&supply_raw);
        let (price_mean, price_sd) = stats(&price_raw);
        if supply_sd < 1e-12 || price_sd < 1e-12 {
            return Err(Error::Estimation(
                "constant series cannot be normalized".into(),
            ));
        }
        let h = self.hours_per_day;
        let to_matrix = |xs: &[f64], mean: f64, sd: f64| -> Vec<Vec<f64>> {
            xs.chunks(h)
                .map(|day| day.iter().map(|x| (x - mean) / sd).collect())
                .collect()
        };
        Ok((
            to_matrix(&supply_raw, supply_mean, supply_sd),
            to_matrix(&price_raw, price_mean, price_sd),
            Normalization {
                supply_mean,
                supply_sd,
                price_mean,
                price_sd,
            },
        ))
    }
}

/// Least-squares fit of a truncated Fourier series with `n_harmonics`
/// harmonics of period `period` to samples `(times, values)`.
pub fn fit_fourier_mean(
    times: &[f64],
    values: &[f64],
    n_harmonics: usize,
    period: f64,
) -> Result<FourierSeries> {
    if times.len() != values.len() || times.is_empty() {
        return Err(Error::ShapeMismatch(
            "times and values must be non-empty and of equal length".into(),
        ));
    }
    if !(period > 0.0) {
        return Err(Error::InvalidParameter("period must be > 0".into()));
    }
    let n_cols = 1 + 2 * n_harmonics;
    if times.len() < n_cols {
        return Err(Error::RankDeficient(format!(
            "{} samples for {n_cols} Fourier coefficients",
            times.len()
        )));
    }
    let omega = 2.0 * std::f64::consts::PI / period;
    let mut design = Matrix::zeros(times.len(), n_cols);
    for (r, &t) in times.iter().enumerate() {
        design.set(r, 0, 1.0);
        for k in 1..=n_harmonics {
            let phase = omega * k as f64 * t;
            design.set(r, 2 * k - 1, phase.sin());
            design.set(r, 2 * k, phase.cos());
        }
    }
    let coeffs = lstsq(&design, values)?;
    Ok(FourierSeries {
        constant: coeffs[0],
        terms: (1..=n_harmonics)
            .map(|k| FourierTerm {
                k: k as u32,
                sin: coeffs[2 * k - 1],
                cos: coeffs[2 * k],
            })
            .collect(),
        period,
    })
}

/// Ornstein-Uhlenbeck parameters estimated from discretely observed paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuFit {
    /// Mean-reversion speed `theta`.
    pub theta: f64,
    /// Long-run mean.
    pub mean: f64,
    /// Diffusion coefficient `sigma`.
    pub sigma: f64,
    /// Fitted one-step autoregression coefficient `rho = e^{-theta h}`.
    pub rho: f64,
}

/// Exact maximum-likelihood fit of `dY = theta (mean - Y) dt + sigma dW`
/// observed at step `h`, pooling transitions from several path segments
/// (transitions never straddle a segment boundary).
///
/// Uses the exact AR(1) transition: the discrete regression
/// `y_{k+1} = a + rho y_k + eps` gives `theta = -ln(rho) / h`,
/// `mean = a / (1 - rho)`, and `sigma^2 = var(eps) 2 theta / (1 - rho^2)`.
pub fn fit_ou_mle(segments: &[Vec<f64>], h: f64) -> Result<OuFit> {
    if !(h > 0.0) {
        return Err(Error::InvalidParameter("h must be > 0".into()));
    }
    let n_trans: usize = segments
        .iter()
        .map(|s| s.len().saturating_sub(1))
        .sum();
    if n_trans < 3 {
        return Err(Error::Estimation(
            "at least three transitions are required".into(),
        ));
    }
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for seg in segments {
        for w in seg.windows(2) {
            sx += w[0];
            sy += w[1];
            sxx += w[0] * w[0];
            sxy += w[0] * w[1];
        }
    }
    let n = n_trans as f64;
    let var_x = sxx - sx * sx / n;
    if var_x <= 1e-12 * n {
        return Err(Error::Estimation(
            "degenerate path: no variation in the observations".into(),
        ));
    }
    let rho = (sxy - sx * sy / n) / var_x;
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Estimation(format!(
            "autoregression coefficient {rho:.4} outside (0, 1); the path is not mean-reverting at this sampling rate"
        )));
    }
    let a = (sy - rho * sx) / n;
    let mut rss = 0.0;
    for seg in segments {
        for w in seg.windows(2) {
            let e = w[1] - a - rho * w[0];
            rss += e * e;
        }
    }
    let v = rss / n;
    if v <= 0.0 {
        return Err(Error::Estimation("zero innovation variance".into()));
    }
    let theta = -rho.ln() / h;
    let sigma2 = v * 2.0 * theta / (1.0 - rho * rho);
    Ok(OuFit {
        theta,
        mean: a / (1.0 - rho),
        sigma: sigma2.sqrt(),
        rho,
    })
}

/// Composite Simpson quadrature with `n` (even, >= 2) subintervals.
fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let n = if n % 2 == 0 { n.max(2) } else { n + 1 };
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Number of Simpson subintervals for a horizon-length integral
/// (step about `1e-3` of the horizon).
fn quad_intervals() -> usize {
    1000
}

/// The four identifiable regressors of the deterministic price formula at
/// time `t`: `[T - t, 1, -II(t), -Q(t)]` where
/// `II(t) = int_t^T int_0^s Q(r) dr ds` (evaluated as
/// `int_0^T Q(r) (T - max(r, t)) dr`). The term `-gamma int_0^T Q` of the
/// price formula is constant in `t` and therefore folds into the intercept;
/// keeping it as a separate column would make the design singular. The same
/// quadrature is shared by [`deterministic_price`] and [`fit_price_params`],
/// making the round trip exact.
pub fn price_regressors<F: Fn(f64) -> f64>(q: &F, t_horizon: f64, t: f64) -> [f64; 4] {
    let n = quad_intervals();
    let double = simpson(q, 0.0, t, n) * (t_horizon - t)
        + simpson(|r| q(r) * (t_horizon - r), t, t_horizon, n);
    [t_horizon - t, 1.0, -double, -q(t)]
}

/// The deterministic market-clearing price for noiseless supply `Q`:
/// `price(t) = eta (kappa - mu0)(T - t) + gamma (zeta - mu0)
///  - eta II(t) - gamma int_0^T Q - c Q(t)`
/// with `II(t) = int_t^T int_0^s Q(r) dr ds` and `mu0` the mean initial
/// reserves.
pub fn deterministic_price<F: Fn(f64) -> f64>(
    params: &MarketParams,
    mu0: f64,
    q: &F,
    t: f64,
) -> f64 {
    let reg = price_regressors(q, params.t_horizon, t);
    let int_q = simpson(q, 0.0, params.t_horizon, quad_intervals());
    let theta = [
        params.eta * (params.kappa - mu0),
        params.gamma * (params.zeta - mu0) - params.gamma * int_q,
        params.eta,
        params.c,
    ];
    theta.iter().zip(&reg).map(|(a, b)| a * b).sum()
}

/// Cost parameters recovered from a mean daily price profile.
///
/// The deterministic price identifies four coefficients: `eta`, `c`,
/// `eta (kappa - mu0)`, and the intercept
/// `gamma (zeta - mu0) - gamma int_0^T Q`. The terminal weight `gamma` and
/// the target `zeta` appear only through the intercept and cannot be
/// separated by prices alone; [`PriceParamsFit::zeta_given_gamma`] completes
/// the back-solve once `gamma` is pinned by other means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceParamsFit {
    /// Raw regression coefficients on `[T - t, 1, -II(t), -Q(t)]`:
    /// `[eta (kappa - mu0), gamma (zeta - mu0 - int Q), eta, c]`.
    pub coefficients: [f64; 4],
    /// Recovered reserves-penalty weight.
    pub eta: f64,
    /// Recovered extraction-rate cost weight.
    pub c: f64,
    /// Recovered running-cost target (depends on the supplied `mu0`; `NaN`
    /// when `eta` vanishes).
    pub kappa: f64,
    /// Recovered intercept `gamma (zeta - mu0) - gamma int_0^T Q`.
    pub intercept: f64,
    /// Mean initial reserves supplied to the fit.
    pub mu0: f64,
    /// `int_0^T Q` of the supply used in the fit.
    pub int_q: f64,
    /// Root-mean-square regression residual.
    pub residual_rms: f64,
}

impl PriceParamsFit {
    /// Back-solves the terminal target from the intercept for a given
    /// terminal weight: `zeta = intercept / gamma + mu0 + int_0^T Q`.
    pub fn zeta_given_gamma(&self, gamma: f64) -> f64 {
        if gamma.abs() > 1e-12 {
            self.intercept / gamma + self.mu0 + self.int_q
        } else {
            f64::NAN
        }
    }

    /// The fitted price at time `t` for the supply `q` used in the fit.
    pub fn fitted_price<F: Fn(f64) -> f64>(&self, q: &F, t_horizon: f64, t: f64) -> f64 {
        let reg = price_regressors(q, t_horizon, t);
        self.coefficients.iter().zip(&reg).map(|(a, b)| a * b).sum()
    }
}

/// Fits the cost parameters by least squares on the deterministic price
/// formula, given the (deterministic) supply `q` and the mean initial
/// reserves `mu0`.
///
/// Only `kappa - mu0` and `zeta - mu0` are identified by prices, so `mu0`
/// must be supplied to pin the targets; `gamma` and `zeta` remain entangled
/// in the intercept (see [`PriceParamsFit`]).
pub fn fit_price_params<F: Fn(f64) -> f64>(
    times: &[f64],
    prices: &[f64],
    q: &F,
    t_horizon: f64,
    mu0: f64,
) -> Result<PriceParamsFit> {
    if times.len() != prices.len() || times.len() < 5 {
        return Err(Error::ShapeMismatch(
            "need at least five matching (time, price) samples".into(),
        ));
    }
    let mut design = Matrix::zeros(times.len(), 4);
    for (r, &t) in times.iter().enumerate() {
        let reg = price_regressors(q, t_horizon, t);
        for (cidx, v) in reg.iter().enumerate() {
            design.set(r, cidx, *v);
        }
    }
    let coeffs = lstsq(&design, prices)?;
    let mut rss = 0.0;
    for (r, &p) in prices.iter().enumerate() {
        let mut fitted = 0.0;
        for cidx in 0..4 {
            fitted += design.get(r, cidx) * coeffs[cidx];
        }
        rss += (p - fitted) * (p - fitted);
    }
    let (eta, c) = (coeffs[2], coeffs[3]);
    let kappa = if eta.abs() > 1e-12 {
        coeffs[0] / eta + mu0
    } else {
        f64::NAN
    };
    Ok(PriceParamsFit {
        coefficients: [coeffs[0], coeffs[1], coeffs[2], coeffs[3]],
        eta,
        c,
        kappa,
        intercept: coeffs[1],
        mu0,
        int_q: simpson(q, 0.0, t_horizon, quad_intervals()),
        residual_rms: (rss / times.len() as f64).sqrt(),
    })
}

/// Full calibration output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationReport {
    /// Seasonal component of the normalized supply.
    pub q_osc: FourierSeries,
    /// Ornstein-Uhlenbeck fit of the supply residuals.
    pub ou: OuFit,
    /// Cost parameters from the mean price profile.
    pub cost: PriceParamsFit,
    /// Normalization applied to the raw series.
    pub normalization: Normalization,
}

/// Runs the complete calibration pipeline on a dataset: normalize, fit the
/// seasonal supply profile (`n_harmonics` harmonics over the unit day), fit
/// the residual OU model (transitions pooled within days), and fit the cost
/// parameters to the mean daily price profile given `mu0`.
pub fn calibrate_dataset(
    dataset: &MarketDataset,
    n_harmonics: usize,
    mu0: f64,
) -> Result<CalibrationReport> {
    let (supply, price, normalization) = dataset.normalized()?;
    let grid = dataset.day_grid();
    let h = 1.0 / (dataset.hours_per_day - 1) as f64;
    let n_days = dataset.n_days() as f64;

    let mean_profile: Vec<f64> = (0..dataset.hours_per_day)
        .map(|hh| supply.iter().map(|day| day[hh]).sum::<f64>() / n_days)
        .collect();
    let q_osc = fit_fourier_mean(&grid, &mean_profile, n_harmonics, 1.0)?;

    let residual_segments: Vec<Vec<f64>> = supply
        .iter()
        .map(|day| {
            day.iter()
                .zip(&grid)
                .map(|(&s, &t)| s - q_osc.eval(t))
                .collect()
        })
        .collect();
    let ou = fit_ou_mle(&residual_segments, h)?;

    let mean_price: Vec<f64> = (0..dataset.hours_per_day)
        .map(|hh| price.iter().map(|day| day[hh]).sum::<f64>() / n_days)
        .collect();
    let q_fn = |t: f64| q_osc.eval(t);
    let cost = fit_price_params(&grid, &mean_price, &q_fn, 1.0, mu0)?;

    Ok(CalibrationReport {
        q_osc,
        ou,
        cost,
        normalization,
    })
}
