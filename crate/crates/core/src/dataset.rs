//! Feature tensors, normalization, chronological splits and sliding windows.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SensorGraph;
use crate::scalar::Scalar;
use crate::tensor::{Matrix, Tensor3};

pub const SPEED_CHANNEL: usize = 0;
pub const DEFAULT_TIMESTEP_MINUTES: f64 = 5.0;
pub const STD_FLOOR: f64 = 1e-8;
const STEPS_PER_DAY: f64 = 288.0;

/// `T×N×C` traffic states. Channel 0 is always speed.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor<S> {
    pub values: Tensor3<S>,
    pub timestep_minutes: f64,
    pub channel_names: Vec<String>,
    pub timestamps: Option<Vec<NaiveDateTime>>,
}

impl<S: Scalar> FeatureTensor<S> {
    /// Single-channel tensor from a `T×N` speed matrix.
    pub fn from_speeds(speeds: &Matrix<S>, timestamps: Option<Vec<NaiveDateTime>>) -> Result<Self> {
        if speeds.is_empty() {
            return Err(Error::Data("speed table is empty".into()));
        }
        if !speeds.is_finite() {
            return Err(Error::Data("speed table contains non-finite values".into()));
        }
        if let Some(ts) = &timestamps {
            if ts.len() != speeds.rows() {
                return Err(Error::Data(format!(
                    "{} timestamps for {} timesteps",
                    ts.len(),
                    speeds.rows()
                )));
            }
        }
        let values = Tensor3::from_fn(speeds.rows(), speeds.cols(), 1, |t, n, _| speeds[(t, n)]);
        Ok(FeatureTensor {
            values,
            timestep_minutes: DEFAULT_TIMESTEP_MINUTES,
            channel_names: vec!["speed".into()],
            timestamps,
        })
    }

    pub fn steps(&self) -> usize {
        self.values.steps()
    }

    pub fn nodes(&self) -> usize {
        self.values.nodes()
    }

    pub fn channels(&self) -> usize {
        self.values.channels()
    }

    pub fn speeds(&self) -> Matrix<S> {
        self.values.channel_matrix(SPEED_CHANNEL)
    }

    pub fn slice_steps(&self, start: usize, end: usize) -> Self {
        FeatureTensor {
            values: self.values.slice_steps(start, end),
            timestep_minutes: self.timestep_minutes,
            channel_names: self.channel_names.clone(),
            timestamps: self.timestamps.as_ref().map(|ts| ts[start..end].to_vec()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation of the speed channel.
pub fn zscore_fit<S: Scalar>(tensor: &FeatureTensor<S>) -> Result<NormalizationStats> {
    let speeds = tensor.speeds();
    if speeds.is_empty() {
        return Err(Error::Data(
            "cannot fit normalization on an empty tensor".into(),
        ));
    }
    let count = speeds.len() as f64;
    let mean = speeds.as_slice().iter().map(|v| v.as_f64()).sum::<f64>() / count;
    let var = speeds
        .as_slice()
        .iter()
        .map(|v| (v.as_f64() - mean).powi(2))
        .sum::<f64>()
        / count;
    Ok(NormalizationStats {
        mean,
        std: var.sqrt().max(STD_FLOOR),
    })
}

pub fn zscore_apply<S: Scalar>(
    tensor: &FeatureTensor<S>,
    stats: &NormalizationStats,
) -> FeatureTensor<S> {
    let (mean, std) = (S::of(stats.mean), S::of(stats.std));
    let v = &tensor.values;
    let values = Tensor3::from_fn(v.steps(), v.nodes(), v.channels(), |t, n, c| {
        let x = v.get(t, n, c);
        if c == SPEED_CHANNEL {
            (x - mean) / std
        } else {
            x
        }
    });
    FeatureTensor {
        values,
        ..tensor.clone()
    }
}

/// Maps normalized speeds back to physical units.
pub fn zscore_invert<S: Scalar>(matrix: &Matrix<S>, stats: &NormalizationStats) -> Matrix<S> {
    let (mean, std) = (S::of(stats.mean), S::of(stats.std));
    matrix.map(|x| x * std + mean)
}

pub fn zscore_forward_matrix<S: Scalar>(
    matrix: &Matrix<S>,
    stats: &NormalizationStats,
) -> Matrix<S> {
    let (mean, std) = (S::of(stats.mean), S::of(stats.std));
    matrix.map(|x| (x - mean) / std)
}

/// One training example: `m` input steps followed directly by `n` target steps.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample<S> {
    /// First timestep of the input, relative to the tensor it was cut from.
    pub start: usize,
    pub input: Tensor3<S>,
    /// `n×N` speed-channel targets.
    pub target: Matrix<S>,
}

pub fn make_windows<S: Scalar>(
    tensor: &FeatureTensor<S>,
    m: usize,
    n: usize,
) -> Result<Vec<WindowSample<S>>> {
    if m == 0 || n == 0 {
        return Err(Error::InvalidParameter(
            "window and horizon must be positive".into(),
        ));
    }
    let steps = tensor.steps();
    if steps < m + n {
        return Err(Error::InsufficientData {
            needed: m + n,
            available: steps,
        });
    }
    Ok((0..=steps - m - n)
        .map(|k| WindowSample {
            start: k,
            input: tensor.values.slice_steps(k, k + m),
            target: tensor
                .values
                .slice_steps(k + m, k + m + n)
                .channel_matrix(SPEED_CHANNEL),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.7,
            validation: 0.1,
            test: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self> {
        let spec = SplitSpec {
            train,
            validation,
            test,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(Error::Config(format!(
                "split fractions must be positive: {parts:?}"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions sum to {sum}, not 1"
            )));
        }
        Ok(())
    }

    /// Partition lengths for `steps` timesteps: floor, floor, remainder.
    pub fn lengths(&self, steps: usize) -> (usize, usize, usize) {
        let floor = |f: f64| (f * steps as f64 + 1e-9).floor() as usize;
        let train = floor(self.train).min(steps);
        let validation = floor(self.validation).min(steps - train);
        (train, validation, steps - train - validation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits<S> {
    pub train: FeatureTensor<S>,
    pub validation: FeatureTensor<S>,
    pub test: FeatureTensor<S>,
}

/// Contiguous train / validation / test partitions in time order.
pub fn chronological_split<S: Scalar>(
    tensor: &FeatureTensor<S>,
    spec: &SplitSpec,
) -> Result<Splits<S>> {
    spec.validate()?;
    let steps = tensor.steps();
    if steps < 3 {
        return Err(Error::InsufficientData {
            needed: 3,
            available: steps,
        });
    }
    let (train, validation, _) = spec.lengths(steps);
    Ok(Splits {
        train: tensor.slice_steps(0, train),
        validation: tensor.slice_steps(train, train + validation),
        test: tensor.slice_steps(train + validation, steps),
    })
}

pub fn time_of_day(ts: &NaiveDateTime) -> f64 {
    f64::from(ts.hour() * 60 + ts.minute()) / 1440.0 + f64::from(ts.second()) / 86_400.0
}

/// Monday = 0.
pub fn day_of_week(ts: &NaiveDateTime) -> f64 {
    f64::from(ts.weekday().num_days_from_monday()) / 7.0
}

/// Appends time-of-day and day-of-week channels as fractions in `[0, 1)`.
pub fn add_calendar_channels<S: Scalar>(
    tensor: &FeatureTensor<S>,
    timestamps: &[NaiveDateTime],
) -> Result<FeatureTensor<S>> {
    if timestamps.len() != tensor.steps() {
        return Err(Error::Data(format!(
            "{} timestamps for {} timesteps",
            timestamps.len(),
            tensor.steps()
        )));
    }
    let v = &tensor.values;
    let c0 = v.channels();
    let values = Tensor3::from_fn(v.steps(), v.nodes(), c0 + 2, |t, n, c| {
        if c < c0 {
            v.get(t, n, c)
        } else if c == c0 {
            S::of(time_of_day(&timestamps[t]))
        } else {
            S::of(day_of_week(&timestamps[t]))
        }
    });
    let mut channel_names = tensor.channel_names.clone();
    channel_names.extend(["time_of_day".to_string(), "day_of_week".to_string()]);
    Ok(FeatureTensor {
        values,
        timestep_minutes: tensor.timestep_minutes,
        channel_names,
        timestamps: Some(timestamps.to_vec()),
    })
}

/// `driver → follower` copy with a lag, written `driver:follower:lag`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedLink {
    pub driver: usize,
    pub follower: usize,
    pub lag: usize,
}

impl FromStr for PlantedLink {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let parse = |p: &str| {
            p.trim().parse::<usize>().map_err(|_| {
                Error::InvalidParameter(format!(
                    "bad planted link {s:?}, expected driver:follower:lag"
                ))
            })
        };
        match parts.as_slice() {
            [d, f, l] => Ok(PlantedLink {
                driver: parse(d)?,
                follower: parse(f)?,
                lag: parse(l)?,
            }),
            _ => Err(Error::InvalidParameter(format!(
                "bad planted link {s:?}, expected driver:follower:lag"
            ))),
        }
    }
}

impl fmt::Display for PlantedLink {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.driver, self.follower, self.lag)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub nodes: usize,
    pub steps: usize,
    pub planted: Vec<PlantedLink>,
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nodes < 2 {
            return Err(Error::InvalidParameter(
                "synthetic data needs at least 2 nodes".into(),
            ));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::InvalidParameter(
                "noise std must be finite and non-negative".into(),
            ));
        }
        for link in &self.planted {
            if link.lag < 1 {
                return Err(Error::InvalidParameter(format!(
                    "planted link {link} needs lag >= 1"
                )));
            }
            if link.driver >= self.nodes
                || link.follower >= self.nodes
                || link.driver == link.follower
            {
                return Err(Error::InvalidParameter(format!(
                    "planted link {link} must join two distinct nodes below {}",
                    self.nodes
                )));
            }
            if self.steps <= link.lag {
                return Err(Error::InvalidParameter(format!(
                    "{} steps do not exceed lag {} of planted link {link}",
                    self.steps, link.lag
                )));
            }
        }
        if self.steps == 0 {
            return Err(Error::InvalidParameter(
                "synthetic data needs at least one step".into(),
            ));
        }
        Ok(())
    }
}

/// Midnight of Monday 2024-01-01; synthetic series start here.
pub fn synthetic_epoch() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2024, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date")
}

/// Daily-periodic speed series on a path graph, with planted lagged copies.
///
/// Each node is `base + a₁·sin(2πt/288 + φ₁) + a₂·sin(4πt/288 + φ₂) + r(t) + ε(t)`
/// where `r` is a slow AR(1) disturbance (ρ = 0.9, innovation std 0.3) and
/// `ε ~ N(0, noise_std)`. Planted links are applied in order and overwrite
/// the follower: `x_j(t) = x_i(t − τ) + ε(t)` for `t ≥ τ`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(FeatureTensor<f64>, SensorGraph)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise =
        Normal::new(0.0, spec.noise_std).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let innovation = Normal::new(0.0, 0.3).expect("valid normal");
    let tau = std::f64::consts::TAU;
    let (nodes, steps) = (spec.nodes, spec.steps);

    let mut series: Vec<Vec<f64>> = Vec::with_capacity(nodes);
    for _ in 0..nodes {
        let base = rng.gen_range(45.0..65.0);
        let a1 = rng.gen_range(6.0..12.0);
        let p1 = rng.gen_range(0.0..tau);
        let a2 = rng.gen_range(1.0..4.0);
        let p2 = rng.gen_range(0.0..tau);
        let mut drift = 0.0;
        let mut xs = Vec::with_capacity(steps);
        for t in 0..steps {
            drift = 0.9 * drift + innovation.sample(&mut rng);
            let phase = tau * t as f64 / STEPS_PER_DAY;
            let e = noise.sample(&mut rng);
            xs.push(base + a1 * (phase + p1).sin() + a2 * (2.0 * phase + p2).sin() + drift + e);
        }
        series.push(xs);
    }
    for link in &spec.planted {
        for t in link.lag..steps {
            let e = noise.sample(&mut rng);
            series[link.follower][t] = series[link.driver][t - link.lag] + e;
        }
    }

    let speeds = Matrix::from_fn(steps, nodes, |t, n| series[n][t]);
    let epoch = synthetic_epoch();
    let timestamps = (0..steps)
        .map(|t| epoch + Duration::minutes(5 * t as i64))
        .collect();
    let tensor = FeatureTensor::from_speeds(&speeds, Some(timestamps))?;
    let graph = SensorGraph::path(synthetic_node_ids(nodes))?;
    Ok((tensor, graph))
}

pub fn synthetic_node_ids(nodes: usize) -> Vec<String> {
    (0..nodes).map(|i| format!("n{i}")).collect()
}

/// Speeds file contents: optional node-id header, optional timestamp column.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedTable {
    pub node_ids: Option<Vec<String>>,
    pub timestamps: Option<Vec<NaiveDateTime>>,
    /// `T×N`
    pub speeds: Matrix<f64>,
}

const TIMESTAMP_FORMATS: [&str; 4] = [
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M",
];

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    TIMESTAMP_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s.trim(), f).ok())
}

pub fn format_timestamp(ts: &NaiveDateTime) -> String {
    ts.format("%Y-%m-%dT%H:%M:%S").to_string()
}

impl SpeedTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .peekable();
        let first = lines
            .peek()
            .ok_or_else(|| Error::Format("speeds table is empty".into()))?;
        let fields: Vec<&str> = first.split(',').map(str::trim).collect();
        let is_data_row = fields
            .iter()
            .enumerate()
            .all(|(i, f)| f.parse::<f64>().is_ok() || (i == 0 && parse_timestamp(f).is_some()));
        let header: Option<Vec<String>> = if is_data_row {
            None
        } else {
            let h = fields.iter().map(|s| s.to_string()).collect();
            lines.next();
            Some(h)
        };

        let mut timestamps = Vec::new();
        let mut values = Vec::new();
        let mut width = None;
        let mut has_ts = None;
        for (r, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let row_has_ts = parse_timestamp(fields[0]).is_some();
            if *has_ts.get_or_insert(row_has_ts) != row_has_ts {
                return Err(Error::Format(format!(
                    "row {r}: timestamp column is inconsistent"
                )));
            }
            let numeric = if row_has_ts {
                timestamps.push(parse_timestamp(fields[0]).expect("checked"));
                &fields[1..]
            } else {
                &fields[..]
            };
            if *width.get_or_insert(numeric.len()) != numeric.len() {
                return Err(Error::Format(format!(
                    "row {r} has {} speed columns",
                    numeric.len()
                )));
            }
            for f in numeric {
                let v: f64 = f
                    .parse()
                    .map_err(|_| Error::Format(format!("row {r}: {f:?} is not a number")))?;
                if !v.is_finite() {
                    return Err(Error::Data(format!("row {r}: non-finite speed {f:?}")));
                }
                values.push(v);
            }
        }
        let width = width.ok_or_else(|| Error::Format("speeds table has no data rows".into()))?;
        let has_ts = has_ts.unwrap_or(false);
        let node_ids = header.map(|h| {
            if has_ts && h.len() == width + 1 {
                h[1..].to_vec()
            } else {
                h
            }
        });
        if let Some(ids) = &node_ids {
            if ids.len() != width {
                return Err(Error::Format(format!(
                    "header names {} nodes but rows have {width} speeds",
                    ids.len()
                )));
            }
        }
        let steps = values.len() / width;
        Ok(SpeedTable {
            node_ids,
            timestamps: has_ts.then_some(timestamps),
            speeds: Matrix::from_vec(steps, width, values)?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if let Some(ids) = &self.node_ids {
            if self.timestamps.is_some() {
                out.push_str("timestamp,");
            }
            out.push_str(&ids.join(","));
            out.push('\n');
        }
        for t in 0..self.speeds.rows() {
            let mut fields: Vec<String> = Vec::with_capacity(self.speeds.cols() + 1);
            if let Some(ts) = &self.timestamps {
                fields.push(format_timestamp(&ts[t]));
            }
            fields.extend(self.speeds.row(t).iter().map(|v| v.to_string()));
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    /// Feature tensor with calendar channels when `calendar` is set.
    pub fn to_tensor<S: Scalar>(&self, calendar: bool) -> Result<FeatureTensor<S>> {
        let base = FeatureTensor::from_speeds(&self.speeds.cast(), self.timestamps.clone())?;
        if !calendar {
            return Ok(base);
        }
        let ts = self
            .timestamps
            .as_ref()
            .ok_or_else(|| Error::Data("calendar channels need a timestamp column".into()))?;
        add_calendar_channels(&base, ts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor_of(speeds: &[f64]) -> FeatureTensor<f64> {
        let m = Matrix::from_vec(speeds.len(), 1, speeds.to_vec()).unwrap();
        FeatureTensor::from_speeds(&m, None).unwrap()
    }

    #[test]
    fn zscore_fit_population_std() {
        let s = zscore_fit(&tensor_of(&[1.0, 2.0, 3.0])).unwrap();
        assert!((s.mean - 2.0).abs() < 1e-15);
        // two-pass oracle
        let oracle = ((1.0f64 + 0.0 + 1.0) / 3.0).sqrt();
        assert!((s.std - oracle).abs() < 1e-15);
        assert!((s.std - 0.816_496_580_927_726).abs() < 1e-12);
    }

    #[test]
    fn zscore_fit_degenerate() {
        let s = zscore_fit(&tensor_of(&[5.0, 5.0, 5.0])).unwrap();
        assert_eq!((s.mean, s.std), (5.0, STD_FLOOR));
        let s = zscore_fit(&tensor_of(&[7.0])).unwrap();
        assert_eq!((s.mean, s.std), (7.0, STD_FLOOR));
    }

    #[test]
    fn zscore_apply_touches_speed_only() {
        let t = tensor_of(&[10.0, 2.0]);
        let ts = vec![synthetic_epoch(), synthetic_epoch() + Duration::hours(12)];
        let t = add_calendar_channels(&t, &ts).unwrap();
        let stats = NormalizationStats {
            mean: 4.0,
            std: 3.0,
        };
        let z = zscore_apply(&t, &stats);
        assert_eq!(z.values.get(0, 0, 0), 2.0);
        assert_eq!(z.values.get(1, 0, 1), 0.5);
        let stats = NormalizationStats {
            mean: 2.0,
            std: 1.0,
        };
        assert_eq!(zscore_apply(&t, &stats).values.get(1, 0, 0), 0.0);
    }

    #[test]
    fn window_counts() {
        let m = Matrix::<f64>::zeros(24, 2);
        let t = FeatureTensor::from_speeds(&m, None).unwrap();
        assert_eq!(make_windows(&t, 12, 12).unwrap().len(), 1);
        let t = FeatureTensor::from_speeds(&Matrix::<f64>::zeros(25, 2), None).unwrap();
        assert_eq!(make_windows(&t, 12, 12).unwrap().len(), 2);
        let t = FeatureTensor::from_speeds(&Matrix::<f64>::zeros(23, 2), None).unwrap();
        assert!(matches!(
            make_windows(&t, 12, 12),
            Err(Error::InsufficientData {
                needed: 24,
                available: 23
            })
        ));
    }

    #[test]
    fn windows_are_consecutive() {
        let t = tensor_of(&(0..10).map(f64::from).collect::<Vec<_>>());
        let w = make_windows(&t, 3, 2).unwrap();
        assert_eq!(w.len(), 6);
        assert_eq!(w[2].input.channel_matrix(0).into_vec(), vec![2.0, 3.0, 4.0]);
        assert_eq!(w[2].target.clone().into_vec(), vec![5.0, 6.0]);
    }

    #[test]
    fn split_lengths() {
        let spec = SplitSpec::default();
        assert_eq!(spec.lengths(100), (70, 10, 20));
        assert_eq!(spec.lengths(10), (7, 1, 2));
        assert!(SplitSpec::new(0.5, 0.5, 0.2).is_err());
        assert!(SplitSpec::new(1.2, -0.4, 0.2).is_err());
        let t = tensor_of(&(0..10).map(f64::from).collect::<Vec<_>>());
        let s = chronological_split(&t, &spec).unwrap();
        assert_eq!(s.validation.values.get(0, 0, 0), 7.0);
        assert_eq!(s.test.steps(), 2);
    }

    #[test]
    fn calendar_channels() {
        let monday = synthetic_epoch();
        let thursday_six = monday + Duration::days(3) + Duration::hours(6);
        let t = tensor_of(&[1.0, 2.0, 3.0]);
        let c = add_calendar_channels(&t, &[monday, monday + Duration::hours(12), thursday_six])
            .unwrap();
        assert_eq!(c.channel_names, vec!["speed", "time_of_day", "day_of_week"]);
        assert_eq!((c.values.get(0, 0, 1), c.values.get(0, 0, 2)), (0.0, 0.0));
        assert_eq!(c.values.get(1, 0, 1), 0.5);
        assert_eq!(c.values.get(2, 0, 1), 0.25);
        assert!((c.values.get(2, 0, 2) - 3.0 / 7.0).abs() < 1e-15);
        assert!(matches!(
            add_calendar_channels(&t, &[monday]),
            Err(Error::Data(_))
        ));
    }

    fn spec(planted: Vec<PlantedLink>, noise_std: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            nodes: 6,
            steps: 400,
            planted,
            noise_std,
            seed,
        }
    }

    #[test]
    fn synthetic_noiseless_copy() {
        let link = PlantedLink {
            driver: 0,
            follower: 1,
            lag: 1,
        };
        let (t, g) = generate_synthetic(&spec(vec![link], 0.0, 3)).unwrap();
        for step in 1..t.steps() {
            assert_eq!(t.values.get(step, 1, 0), t.values.get(step - 1, 0, 0));
        }
        assert_eq!(g.node_count(), 6);
        assert_eq!(g.adjacency()[(2, 3)], 1.0);
        assert_eq!(g.adjacency()[(0, 2)], 0.0);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let s = spec(vec!["2:5:3".parse().unwrap()], 0.1, 9);
        assert_eq!(
            generate_synthetic(&s).unwrap(),
            generate_synthetic(&s).unwrap()
        );
        let other = SyntheticSpec {
            seed: 10,
            ..s.clone()
        };
        assert_ne!(
            generate_synthetic(&s).unwrap().0,
            generate_synthetic(&other).unwrap().0
        );
    }

    #[test]
    fn synthetic_lagged_correlation() {
        let (t, _) = generate_synthetic(&spec(vec!["2:5:3".parse().unwrap()], 0.1, 4)).unwrap();
        let x: Vec<f64> = (0..t.steps() - 3).map(|s| t.values.get(s, 2, 0)).collect();
        let y: Vec<f64> = (3..t.steps()).map(|s| t.values.get(s, 5, 0)).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (mx, my) = (mean(&x), mean(&y));
        let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        assert!(cov / (vx * vy).sqrt() > 0.9);
    }

    #[test]
    fn synthetic_rejects_long_lag() {
        let s = SyntheticSpec {
            steps: 512,
            ..spec(vec!["0:1:600".parse().unwrap()], 0.05, 1)
        };
        assert!(matches!(
            generate_synthetic(&s),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn speed_table_round_trip_with_timestamps() {
        let (t, g) = generate_synthetic(&spec(vec![], 0.05, 2)).unwrap();
        let table = SpeedTable {
            node_ids: Some(g.node_ids().to_vec()),
            timestamps: t.timestamps.clone(),
            speeds: t.speeds(),
        };
        let parsed = SpeedTable::parse(&table.to_csv()).unwrap();
        assert_eq!(parsed, table);
        let tensor: FeatureTensor<f64> = parsed.to_tensor(true).unwrap();
        assert_eq!(tensor.channels(), 3);
    }

    #[test]
    fn speed_table_plain() {
        let table = SpeedTable::parse("1,2\n3,4\n5,6\n").unwrap();
        assert_eq!(table.speeds.shape(), (3, 2));
        assert!(table.node_ids.is_none() && table.timestamps.is_none());
        assert!(table.to_tensor::<f64>(true).is_err());
        assert!(matches!(
            SpeedTable::parse("1,2\n3\n"),
            Err(Error::Format(_))
        ));
        assert!(matches!(SpeedTable::parse("1,inf\n"), Err(Error::Data(_))));
    }

    #[test]
    fn planted_link_parse() {
        let p: PlantedLink = "0:1:1".parse().unwrap();
        assert_eq!(
            p,
            PlantedLink {
                driver: 0,
                follower: 1,
                lag: 1
            }
        );
        assert_eq!(p.to_string(), "0:1:1");
        assert!("0:1".parse::<PlantedLink>().is_err());
    }
}
