//! Speed series I/O, windowing, and a synthetic freeway corridor.
//!
//! Series are stored time-major (`T × N`, mph) with NaN marking missing
//! readings. Windows are node-major (`N × L`) as the models consume them.

use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autoencoder::SignalWindow;
use crate::graph::{build_adjacency, csv_err, DistanceRecord, NodePartition, Sigma, WeightedDigraph};
use crate::{Error, Result, SLOTS_PER_DAY, STEP_SECONDS};

const SECONDS_PER_DAY: i64 = 86_400;
const MPH_TO_MPS: f64 = 0.44704;
const MAX_PLAUSIBLE_MPH: f64 = 120.0;

/// Sensor readings on a uniform 5-minute grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedSeries {
    pub node_ids: Vec<String>,
    /// Unix seconds, strictly increasing by [`STEP_SECONDS`].
    pub timestamps: Vec<i64>,
    /// `T × N` speeds in mph, NaN where missing.
    pub values: Array2<f64>,
    /// `T × N`, true where a reading exists.
    pub mask: Array2<bool>,
}

impl SpeedSeries {
    pub fn new(node_ids: Vec<String>, timestamps: Vec<i64>, values: Array2<f64>) -> Result<Self> {
        if values.dim() != (timestamps.len(), node_ids.len()) {
            return Err(Error::shape(format!(
                "values are {:?}, expected {} steps × {} nodes",
                values.dim(),
                timestamps.len(),
                node_ids.len()
            )));
        }
        if let Some(k) = timestamps.windows(2).position(|w| w[1] - w[0] != STEP_SECONDS) {
            return Err(Error::invalid(format!(
                "step between rows {} and {} is {} s, expected {STEP_SECONDS}",
                k,
                k + 1,
                timestamps[k + 1] - timestamps[k]
            )));
        }
        if values.iter().any(|v| v.is_infinite()) {
            return Err(Error::NonFinite("speed series contains an infinite value".into()));
        }
        let implausible = values
            .iter()
            .filter(|v| v.is_finite() && !(0.0..=MAX_PLAUSIBLE_MPH).contains(*v))
            .count();
        if implausible > 0 {
            log::warn!("{implausible} readings lie outside [0, {MAX_PLAUSIBLE_MPH}] mph");
        }
        let mask = values.mapv(f64::is_finite);
        Ok(SpeedSeries {
            node_ids,
            timestamps,
            values,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn missing_rate(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|m| !**m).count() as f64 / self.mask.len() as f64
    }

    /// Rows `start..end` as a new series.
    pub fn slice_time(&self, start: usize, end: usize) -> SpeedSeries {
        SpeedSeries {
            node_ids: self.node_ids.clone(),
            timestamps: self.timestamps[start..end].to_vec(),
            values: self.values.slice(s![start..end, ..]).to_owned(),
            mask: self.mask.slice(s![start..end, ..]).to_owned(),
        }
    }

    /// Columns reordered and restricted to `ids`.
    pub fn select_nodes(&self, ids: &[String]) -> Result<SpeedSeries> {
        let cols = ids
            .iter()
            .map(|id| {
                self.node_ids
                    .iter()
                    .position(|x| x == id)
                    .ok_or_else(|| Error::invalid(format!("node `{id}` is not in the series")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SpeedSeries {
            node_ids: ids.to_vec(),
            timestamps: self.timestamps.clone(),
            values: self.values.select(Axis(1), &cols),
            mask: self.mask.select(Axis(1), &cols),
        })
    }

    /// Finite readings only.
    pub fn measured_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().copied().filter(|v| v.is_finite())
    }
}

/// 5-minute slot of day of a Unix timestamp.
pub fn slot_of_day(ts: i64) -> usize {
    (ts.rem_euclid(SECONDS_PER_DAY) / STEP_SECONDS) as usize % SLOTS_PER_DAY
}

/// Epoch seconds, RFC 3339, or naive ISO-8601 (read as UTC).
pub fn parse_timestamp(s: &str) -> Option<i64> {
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .map(|dt| dt.and_utc().timestamp())
}

pub fn format_timestamp(ts: i64) -> String {
    DateTime::from_timestamp(ts, 0)
        .map(|dt| dt.format("%Y-%m-%dT%H:%M:%S").to_string())
        .unwrap_or_else(|| ts.to_string())
}

/// Reads a wide CSV: `timestamp,<id1>,<id2>,...`, empty cell or `NaN` for a
/// missing reading.
pub fn load_speed_csv(path: &Path) -> Result<SpeedSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.get(0) != Some("timestamp") {
        return Err(Error::parse(path, 1, "first column must be `timestamp`"));
    }
    let node_ids: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    if node_ids.is_empty() {
        return Err(Error::parse(path, 1, "no sensor columns"));
    }
    let width = headers.len();
    let mut timestamps = Vec::new();
    let mut flat = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != width {
            return Err(Error::parse(path, line, format!("expected {width} fields, found {}", rec.len())));
        }
        let ts = parse_timestamp(&rec[0])
            .ok_or_else(|| Error::parse(path, line, format!("unreadable timestamp `{}`", &rec[0])))?;
        if let Some(&prev) = timestamps.last() {
            if ts <= prev {
                return Err(Error::parse(path, line, "timestamps are not strictly increasing"));
            }
            if ts - prev != STEP_SECONDS {
                return Err(Error::parse(
                    path,
                    line,
                    format!("step of {} s, expected {STEP_SECONDS} s", ts - prev),
                ));
            }
        }
        timestamps.push(ts);
        for cell in rec.iter().skip(1) {
            let v = if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                f64::NAN
            } else {
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::parse(path, line, format!("bad speed `{cell}`")))?
            };
            flat.push(v);
        }
    }
    let values = Array2::from_shape_vec((timestamps.len(), node_ids.len()), flat).expect("row widths checked");
    SpeedSeries::new(node_ids, timestamps, values)
}

/// Serialises a series in the [`load_speed_csv`] layout; missing readings
/// become empty cells.
pub fn speed_csv_bytes(series: &SpeedSeries) -> Vec<u8> {
    let mut out = String::from("timestamp");
    for id in &series.node_ids {
        out.push(',');
        out.push_str(id);
    }
    out.push('\n');
    for (t, row) in series.values.axis_iter(Axis(0)).enumerate() {
        out.push_str(&format_timestamp(series.timestamps[t]));
        for v in row {
            out.push(',');
            if v.is_finite() {
                out.push_str(&v.to_string());
            }
        }
        out.push('\n');
    }
    out.into_bytes()
}

pub fn write_speed_csv(path: &Path, series: &SpeedSeries) -> Result<()> {
    std::fs::write(path, speed_csv_bytes(series)).map_err(|e| Error::io(path, e))
}

/// Consecutive length-`len` windows starting every `stride` steps; a short
/// tail is dropped.
pub fn window_iter<'a>(
    series: &'a SpeedSeries,
    len: usize,
    stride: usize,
    partition: &'a NodePartition,
) -> impl Iterator<Item = SignalWindow> + 'a {
    let count = if len == 0 || stride == 0 || series.len() < len {
        0
    } else {
        (series.len() - len) / stride + 1
    };
    (0..count).map(move |k| window_at(series, k * stride, len, partition.clone()))
}

/// The window covering rows `start..start + len`.
pub fn window_at(series: &SpeedSeries, start: usize, len: usize, partition: NodePartition) -> SignalWindow {
    let rows = s![start..start + len, ..];
    SignalWindow {
        values: series.values.slice(rows).t().to_owned(),
        mask: series.mask.slice(rows).t().to_owned(),
        slot_of_day: slot_of_day(series.timestamps[start + len - 1]),
        partition,
        start,
    }
}

/// Parameters of the synthetic corridor generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_nodes: usize,
    /// Spacing between consecutive sensors.
    pub segment_len_m: f64,
    pub days: usize,
    pub free_flow_mph: f64,
    /// Speed of the congestion onset front; negative means upstream.
    pub congestion_wave_mph: f64,
    /// Speed of the recovery front; positive means downstream.
    pub recovery_wave_mph: f64,
    pub n_waves_per_day: usize,
    pub noise_std_mph: f64,
    /// Depth of the recurring morning/evening slowdown as a fraction of free flow.
    pub daily_dip_frac: f64,
    /// Fraction of readings dropped from the observed series.
    pub missing_rate: f64,
    /// Longest route (in segments) listed in the distance table.
    pub route_hops: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_nodes: 60,
            segment_len_m: 800.0,
            days: 20,
            free_flow_mph: 65.0,
            congestion_wave_mph: -12.0,
            recovery_wave_mph: 30.0,
            n_waves_per_day: 3,
            noise_std_mph: 2.0,
            daily_dip_frac: 0.15,
            missing_rate: 0.05,
            route_hops: 5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("synthetic config: {m}")));
        if self.n_nodes < 2 {
            return bad("n_nodes must be at least 2");
        }
        if self.days == 0 {
            return bad("days must be positive");
        }
        if !(self.segment_len_m > 0.0 && self.segment_len_m.is_finite()) {
            return bad("segment_len_m must be positive");
        }
        if !(self.free_flow_mph > 0.0 && self.free_flow_mph.is_finite()) {
            return bad("free_flow_mph must be positive");
        }
        if !(self.congestion_wave_mph < 0.0 && self.congestion_wave_mph.is_finite()) {
            return bad("congestion_wave_mph must be negative (fronts travel upstream)");
        }
        if !(self.recovery_wave_mph > 0.0 && self.recovery_wave_mph.is_finite()) {
            return bad("recovery_wave_mph must be positive (fronts travel downstream)");
        }
        if !(self.noise_std_mph >= 0.0 && self.noise_std_mph.is_finite()) {
            return bad("noise_std_mph must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.daily_dip_frac) {
            return bad("daily_dip_frac must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad("missing_rate must lie in [0, 1)");
        }
        if self.route_hops == 0 {
            return bad("route_hops must be positive");
        }
        Ok(())
    }
}

/// One triangular congestion region in the (space, time) plane.
///
/// The queue grows upstream from the bottleneck at `head_m` starting at
/// `onset_s`; the bottleneck clears after `duration_s`, and a recovery front
/// then sweeps downstream from the queue tail back to the bottleneck.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CongestionEvent {
    pub head_m: f64,
    pub onset_s: f64,
    pub duration_s: f64,
    /// Fractional speed reduction at full intensity.
    pub depth: f64,
}

/// Observed readings, the noiseless field they were drawn from, and the
/// corridor geometry.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub config: SynthConfig,
    pub observed: SpeedSeries,
    pub truth: SpeedSeries,
    pub distances: Vec<DistanceRecord>,
    pub events: Vec<CongestionEvent>,
}

impl SyntheticDataset {
    /// Gaussian-kernel graph over the distance table, `σ` automatic.
    pub fn graph(&self) -> Result<WeightedDigraph> {
        build_adjacency(&self.observed.node_ids, &self.distances, Sigma::Auto, None)
    }
}

/// Monday 2024-01-01T00:00:00Z.
pub const SYNTH_START: i64 = 1_704_067_200;

const RAMP_S: f64 = 600.0;

fn smoothstep(x: f64) -> f64 {
    let t = x.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Noise-free speed without congestion events at a point that free-flow
/// traffic reaches `t_s` seconds into the day after leaving the corridor
/// entrance.
pub fn base_profile(cfg: &SynthConfig, t_s: f64) -> f64 {
    let day = SECONDS_PER_DAY as f64;
    let tod = t_s.rem_euclid(day);
    let dip = |centre_h: f64, width_h: f64, weight: f64| {
        let mut d = (tod - centre_h * 3600.0).abs();
        d = d.min(day - d);
        weight * (-0.5 * (d / (width_h * 3600.0)).powi(2)).exp()
    };
    let shape = dip(8.0, 1.0, 0.8) + dip(17.5, 1.25, 1.0);
    cfg.free_flow_mph * (1.0 - cfg.daily_dip_frac * shape)
}

/// Congestion intensity in `[0, 1]` of `ev` at position `x_m`, time `t_s`.
fn intensity(cfg: &SynthConfig, ev: &CongestionEvent, x_m: f64, t_s: f64) -> f64 {
    if x_m > ev.head_m {
        return 0.0;
    }
    let w = cfg.congestion_wave_mph.abs() * MPH_TO_MPS;
    let r = cfg.recovery_wave_mph * MPH_TO_MPS;
    let tail_x = ev.head_m - w * ev.duration_s;
    if x_m < tail_x {
        return 0.0;
    }
    let arrive = ev.onset_s + (ev.head_m - x_m) / w;
    let clear = ev.onset_s + ev.duration_s + (x_m - tail_x) / r;
    let inside = (t_s - arrive).min(clear - t_s);
    smoothstep(inside / RAMP_S)
}

/// Noise-free speed field `T × N` for the given events.
pub fn speed_field(cfg: &SynthConfig, events: &[CongestionEvent]) -> Array2<f64> {
    let steps = cfg.days * SLOTS_PER_DAY;
    let v_ms = cfg.free_flow_mph * MPH_TO_MPS;
    Array2::from_shape_fn((steps, cfg.n_nodes), |(t, i)| {
        let x = i as f64 * cfg.segment_len_m;
        let time = (t as i64 * STEP_SECONDS) as f64;
        let base = base_profile(cfg, time - x / v_ms);
        let slow = events
            .iter()
            .map(|ev| ev.depth * intensity(cfg, ev, x, time))
            .fold(0.0f64, f64::max);
        base * (1.0 - slow)
    })
}

/// A directed corridor `0 → 1 → … → N−1` with recurring daily slowdowns,
/// upstream-moving congestion waves, sensor noise, and dropped readings.
/// Deterministic in `cfg.seed`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let length = (cfg.n_nodes - 1) as f64 * cfg.segment_len_m;
    let mut events = Vec::new();
    for day in 0..cfg.days {
        for _ in 0..cfg.n_waves_per_day {
            let hour = rng.random_range(6.0..20.0);
            events.push(CongestionEvent {
                head_m: rng.random_range(0.2..1.0) * length,
                onset_s: (day as f64 * 24.0 + hour) * 3600.0,
                duration_s: rng.random_range(30.0..90.0) * 60.0,
                depth: rng.random_range(0.35..0.65),
            });
        }
    }
    let truth_values = speed_field(cfg, &events);

    let noise = Normal::new(0.0, cfg.noise_std_mph).map_err(|e| Error::invalid(e.to_string()))?;
    let mut observed_values = truth_values.clone();
    for v in observed_values.iter_mut() {
        let noisy = (*v + noise.sample(&mut rng)).max(0.0);
        *v = if rng.random::<f64>() < cfg.missing_rate { f64::NAN } else { noisy };
    }

    let node_ids: Vec<String> = (0..cfg.n_nodes).map(|i| format!("s{i:03}")).collect();
    let timestamps: Vec<i64> = (0..truth_values.nrows())
        .map(|t| SYNTH_START + t as i64 * STEP_SECONDS)
        .collect();
    let mut distances = Vec::new();
    for i in 0..cfg.n_nodes {
        for h in 1..=cfg.route_hops {
            if i + h < cfg.n_nodes {
                distances.push(DistanceRecord {
                    from: node_ids[i].clone(),
                    to: node_ids[i + h].clone(),
                    dist: h as f64 * cfg.segment_len_m,
                });
            }
        }
    }
    Ok(SyntheticDataset {
        config: cfg.clone(),
        observed: SpeedSeries::new(node_ids.clone(), timestamps.clone(), observed_values)?,
        truth: SpeedSeries::new(node_ids, timestamps, truth_values)?,
        distances,
        events,
    })
}

/// Time indices of the first minimum of each column.
pub fn argmin_per_node(field: ArrayView2<f64>) -> Vec<usize> {
    field
        .axis_iter(Axis(1))
        .map(|col| {
            col.iter()
                .enumerate()
                .fold((0, f64::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::io::Write;

    fn write_tmp(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_marks_single_missing_cell() {
        let f = write_tmp("timestamp,a,b\n2024-01-01T00:00:00,50,60\n2024-01-01T00:05:00,,61.5\n1704067800,52,NaN\n");
        let s = load_speed_csv(f.path()).unwrap();
        assert_eq!(s.values.dim(), (3, 2));
        assert_eq!(s.mask.iter().filter(|m| !**m).count(), 2);
        assert!(!s.mask[[1, 0]] && !s.mask[[2, 1]]);
        assert_eq!(s.values[[1, 1]], 61.5);

        let f = write_tmp("timestamp,a,b\n0,50,60\n300,,61\n600,1,2\n");
        let s = load_speed_csv(f.path()).unwrap();
        assert_eq!(s.mask.iter().filter(|m| !**m).count(), 1);
    }

    #[test]
    fn load_rejects_bad_grids() {
        let irregular = write_tmp("timestamp,a\n0,1\n300,1\n540,1\n");
        match load_speed_csv(irregular.path()) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 4);
                assert!(msg.contains("240"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let backwards = write_tmp("timestamp,a\n300,1\n0,1\n");
        assert!(matches!(load_speed_csv(backwards.path()), Err(Error::Parse { line: 3, .. })));
        let ragged = write_tmp("timestamp,a,b\n0,1,2\n300,1\n");
        assert!(matches!(load_speed_csv(ragged.path()), Err(Error::Parse { line: 3, .. })));
        let garbage = write_tmp("timestamp,a\nyesterday,1\n");
        assert!(load_speed_csv(garbage.path()).is_err());
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let cfg = SynthConfig {
            n_nodes: 5,
            days: 1,
            missing_rate: 0.2,
            ..SynthConfig::default()
        };
        let data = generate_synthetic(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_speed_csv(&p, &data.observed).unwrap();
        let back = load_speed_csv(&p).unwrap();
        assert_eq!(back.mask, data.observed.mask);
        assert_eq!(back.timestamps, data.observed.timestamps);
        for (a, b) in back.values.iter().zip(data.observed.values.iter()) {
            assert!(a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()));
        }
        assert_eq!(speed_csv_bytes(&back), speed_csv_bytes(&data.observed));
    }

    #[test]
    fn window_counts_and_slots() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let ts: Vec<i64> = (0..36).map(|t| SYNTH_START + 300 * t).collect();
        let values = Array2::from_shape_fn((36, 2), |(t, i)| (t * 2 + i) as f64);
        let s = SpeedSeries::new(ids, ts, values).unwrap();
        let part = NodePartition::new(2, &[0]).unwrap();
        let ws: Vec<_> = window_iter(&s, 12, 12, &part).collect();
        assert_eq!(ws.len(), 3);
        assert_eq!(ws[2].slot_of_day, 35);
        assert_eq!(ws[1].values[[1, 0]], (12 * 2 + 1) as f64);
        assert_eq!(ws[1].values.dim(), (2, 12));
        assert_eq!(window_iter(&s, 12, 1, &part).count(), 36 - 12 + 1);
        let short = s.slice_time(0, 11);
        assert_eq!(window_iter(&short, 12, 12, &part).count(), 0);
    }

    #[test]
    fn noiseless_corridor_is_shifted_base_profile() {
        let cfg = SynthConfig {
            n_nodes: 8,
            days: 2,
            n_waves_per_day: 0,
            noise_std_mph: 0.0,
            missing_rate: 0.0,
            ..SynthConfig::default()
        };
        let d = generate_synthetic(&cfg).unwrap();
        let v_ms = cfg.free_flow_mph * MPH_TO_MPS;
        for ((t, i), &v) in d.observed.values.indexed_iter() {
            let offset = i as f64 * cfg.segment_len_m / v_ms;
            assert_abs_diff_eq!(v, base_profile(&cfg, t as f64 * 300.0 - offset), epsilon = 1e-12);
        }
        assert_eq!(d.observed.values, d.truth.values);
    }

    #[test]
    fn congestion_minimum_moves_upstream() {
        let cfg = SynthConfig {
            n_nodes: 12,
            segment_len_m: 2000.0,
            days: 1,
            n_waves_per_day: 1,
            noise_std_mph: 0.0,
            daily_dip_frac: 0.0,
            missing_rate: 0.0,
            ..SynthConfig::default()
        };
        let d = generate_synthetic(&cfg).unwrap();
        let ev = d.events[0];
        let argmin = argmin_per_node(d.truth.values.view());
        let lag_steps = cfg.segment_len_m / (cfg.congestion_wave_mph.abs() * MPH_TO_MPS) / 300.0;
        let w = cfg.congestion_wave_mph.abs() * MPH_TO_MPS;
        let congested: Vec<usize> = (0..cfg.n_nodes)
            .filter(|&i| {
                let x = i as f64 * cfg.segment_len_m;
                x <= ev.head_m && x >= ev.head_m - w * ev.duration_s + 2.0 * cfg.segment_len_m
            })
            .collect();
        assert!(congested.len() >= 3, "event too short for the test: {ev:?}");
        for pair in congested.windows(2) {
            let (up, down) = (pair[0], pair[1]);
            assert!(argmin[up] > argmin[down]);
            let lag = (argmin[up] - argmin[down]) as f64;
            assert!((lag - lag_steps).abs() <= 1.0, "lag {lag} vs {lag_steps}");
        }
    }

    #[test]
    fn fronts_have_opposite_slopes() {
        let cfg = SynthConfig {
            n_nodes: 30,
            days: 1,
            n_waves_per_day: 1,
            noise_std_mph: 0.0,
            daily_dip_frac: 0.0,
            missing_rate: 0.0,
            seed: 3,
            ..SynthConfig::default()
        };
        let d = generate_synthetic(&cfg).unwrap();
        let base = cfg.free_flow_mph;
        let slow = d.truth.values.mapv(|v| v < 0.8 * base);
        let mut onsets = Vec::new();
        let mut ends = Vec::new();
        for i in 0..cfg.n_nodes {
            let col = slow.column(i);
            if let (Some(a), Some(b)) = (col.iter().position(|&x| x), col.iter().rposition(|&x| x)) {
                onsets.push((i, a));
                ends.push((i, b));
            }
        }
        assert!(onsets.len() >= 3);
        // onset later upstream, recovery earlier upstream
        for w in onsets.windows(2) {
            assert!(w[0].1 >= w[1].1);
        }
        for w in ends.windows(2) {
            assert!(w[0].1 <= w[1].1);
        }
        assert!(onsets.first().unwrap().1 > onsets.last().unwrap().1);
        assert!(ends.first().unwrap().1 < ends.last().unwrap().1);
    }

    #[test]
    fn generator_is_deterministic_and_validates() {
        let cfg = SynthConfig {
            n_nodes: 6,
            days: 1,
            seed: 11,
            ..SynthConfig::default()
        };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(speed_csv_bytes(&a.observed), speed_csv_bytes(&b.observed));
        assert_eq!(speed_csv_bytes(&a.truth), speed_csv_bytes(&b.truth));
        let c = generate_synthetic(&SynthConfig { seed: 12, ..cfg.clone() }).unwrap();
        assert_ne!(speed_csv_bytes(&a.observed), speed_csv_bytes(&c.observed));
        assert!(a.truth.mask.iter().all(|&m| m));
        assert!(a.graph().unwrap().sigma().unwrap() > 0.0);

        for bad in [
            SynthConfig { congestion_wave_mph: 5.0, ..cfg.clone() },
            SynthConfig { free_flow_mph: 0.0, ..cfg.clone() },
            SynthConfig { noise_std_mph: -1.0, ..cfg.clone() },
            SynthConfig { n_nodes: 1, ..cfg.clone() },
        ] {
            assert!(generate_synthetic(&bad).is_err());
        }
    }
}
