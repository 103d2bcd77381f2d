//! Haptic traces: the sample/trace types, CSV interchange, synthetic movement
//! generators, the perceptual deadband filter and temporal splitting.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One full feature vector: position (3), velocity (3), force (3).
pub type Features = [f64; 9];

pub const FEATURE_COUNT: usize = 9;

/// Column names in feature order, matching the CSV header after `t`.
pub const FEATURE_NAMES: [&str; FEATURE_COUNT] =
    ["px", "py", "pz", "vx", "vy", "vz", "fx", "fy", "fz"];

pub const CSV_HEADER: [&str; FEATURE_COUNT + 1] =
    ["t", "px", "py", "pz", "vx", "vy", "vz", "fx", "fy", "fz"];

/// Tolerance on sample spacing against the declared rate, in seconds.
pub const SPACING_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("unexpected column `{0}`")]
    UnexpectedColumn(String),
    #[error("row {row}: cannot parse `{value}` as a number")]
    BadNumber { row: usize, value: String },
    #[error("row {row}: non-finite value")]
    NonFiniteValue { row: usize },
    #[error("row {row}: negative timestamp")]
    NegativeTime { row: usize },
    #[error("row {row}: timestamp does not strictly increase")]
    NonMonotoneTime { row: usize },
    #[error("trace has {0} samples, at least 2 are required")]
    TooShort(usize),
    #[error("sample rate must be positive and finite, got {0}")]
    InvalidRate(f64),
    #[error("sample {row}: spacing deviates from 1/sample_rate_hz")]
    IrregularSpacing { row: usize },
    #[error("synthetic trace needs n >= 2, got {0}")]
    InvalidCount(usize),
    #[error(
        "split of {len} samples at fraction {fraction} leaves a part with fewer than 2 samples"
    )]
    TooShortForSplit { len: usize, fraction: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HapticSample {
    pub t: f64,
    pub pos: [f64; 3],
    pub vel: [f64; 3],
    pub force: [f64; 3],
}

impl HapticSample {
    pub fn from_features(t: f64, f: &Features) -> Self {
        Self {
            t,
            pos: [f[0], f[1], f[2]],
            vel: [f[3], f[4], f[5]],
            force: [f[6], f[7], f[8]],
        }
    }

    pub fn features(&self) -> Features {
        let (p, v, f) = (self.pos, self.vel, self.force);
        [p[0], p[1], p[2], v[0], v[1], v[2], f[0], f[1], f[2]]
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite() && self.features().iter().all(|x| x.is_finite())
    }
}

/// An ordered, validated sequence of haptic samples.
///
/// Fields are private so every `Trace` in circulation satisfies the
/// invariants checked by [`Trace::new`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    samples: Vec<HapticSample>,
    name: String,
    sample_rate_hz: Option<f64>,
    seed: Option<u64>,
}

impl Trace {
    pub fn new(
        name: impl Into<String>,
        samples: Vec<HapticSample>,
        sample_rate_hz: Option<f64>,
        seed: Option<u64>,
    ) -> Result<Self, TraceError> {
        if samples.len() < 2 {
            return Err(TraceError::TooShort(samples.len()));
        }
        for (row, s) in samples.iter().enumerate() {
            if !s.is_finite() {
                return Err(TraceError::NonFiniteValue { row });
            }
            if s.t < 0.0 {
                return Err(TraceError::NegativeTime { row });
            }
            if row > 0 && s.t <= samples[row - 1].t {
                return Err(TraceError::NonMonotoneTime { row });
            }
        }
        if let Some(rate) = sample_rate_hz {
            if !(rate.is_finite() && rate > 0.0) {
                return Err(TraceError::InvalidRate(rate));
            }
            let dt = 1.0 / rate;
            for row in 1..samples.len() {
                let spacing = samples[row].t - samples[row - 1].t;
                if (spacing - dt).abs() > SPACING_TOLERANCE {
                    return Err(TraceError::IrregularSpacing { row });
                }
            }
        }
        Ok(Self {
            samples,
            name: name.into(),
            sample_rate_hz,
            seed,
        })
    }

    pub fn samples(&self) -> &[HapticSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn sample_rate_hz(&self) -> Option<f64> {
        self.sample_rate_hz
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn features(&self) -> Vec<Features> {
        self.samples.iter().map(HapticSample::features).collect()
    }

    /// Values of one feature axis across the trace.
    pub fn axis(&self, axis: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s.features()[axis]).collect()
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

/// Rate implied by uniformly spaced timestamps, if they are uniform.
fn infer_rate(samples: &[HapticSample]) -> Option<f64> {
    let n = samples.len();
    let span = samples[n - 1].t - samples[0].t;
    let dt = span / (n - 1) as f64;
    if !(dt > 0.0) {
        return None;
    }
    let uniform = samples
        .windows(2)
        .all(|w| ((w[1].t - w[0].t) - dt).abs() <= SPACING_TOLERANCE);
    if !uniform {
        return None;
    }
    let rate = 1.0 / dt;
    // Snap to an integer rate when that still satisfies the spacing check.
    let snapped = rate.round();
    if snapped > 0.0
        && samples
            .windows(2)
            .all(|w| ((w[1].t - w[0].t) - 1.0 / snapped).abs() <= SPACING_TOLERANCE)
    {
        Some(snapped)
    } else {
        Some(rate)
    }
}

/// Reads a trace from the 10-column CSV format.
///
/// Data rows are indexed from 0 in error reports (row 0 is the first line
/// after the header). The sample rate is inferred when the timestamps are
/// uniformly spaced.
pub fn parse_trace(path: impl AsRef<Path>) -> Result<Trace, TraceError> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_trace(file, name)
}

pub fn read_trace<R: std::io::Read>(
    reader: R,
    name: impl Into<String>,
) -> Result<Trace, TraceError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::None)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    for h in headers.iter() {
        if !CSV_HEADER.contains(&h) {
            return Err(TraceError::UnexpectedColumn(h.to_string()));
        }
    }
    let mut columns = [0usize; FEATURE_COUNT + 1];
    for (slot, col) in columns.iter_mut().zip(CSV_HEADER) {
        *slot = headers
            .iter()
            .position(|h| h == col)
            .ok_or_else(|| TraceError::MissingColumn(col.to_string()))?;
    }

    let mut samples = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let mut values = [0.0; FEATURE_COUNT + 1];
        for (v, &c) in values.iter_mut().zip(&columns) {
            let field = record.get(c).unwrap_or("");
            *v = field.parse::<f64>().map_err(|_| TraceError::BadNumber {
                row,
                value: field.to_string(),
            })?;
            if !v.is_finite() {
                return Err(TraceError::NonFiniteValue { row });
            }
        }
        let mut features = [0.0; FEATURE_COUNT];
        features.copy_from_slice(&values[1..]);
        samples.push(HapticSample::from_features(values[0], &features));
    }
    if samples.len() < 2 {
        return Err(TraceError::TooShort(samples.len()));
    }
    let rate = infer_rate(&samples);
    Trace::new(name, samples, rate, None)
}

/// Writes a trace as CSV.
///
/// Numbers use the shortest decimal representation that parses back to the
/// identical `f64`, so `parse_trace(write_trace(t))` is bit-exact.
pub fn write_trace(trace: &Trace, path: impl AsRef<Path>) -> Result<(), TraceError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_trace_to(trace, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_trace_to<W: Write>(trace: &Trace, out: &mut W) -> Result<(), TraceError> {
    writeln!(out, "{}", CSV_HEADER.join(","))?;
    for s in trace.samples() {
        write!(out, "{}", s.t)?;
        for v in s.features() {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeadbandConfig {
    pub vel_threshold_fraction: f64,
    pub force_threshold_fraction: f64,
}

impl Default for DeadbandConfig {
    fn default() -> Self {
        Self {
            vel_threshold_fraction: 0.10,
            force_threshold_fraction: 0.10,
        }
    }
}

impl DeadbandConfig {
    pub fn disabled() -> Self {
        Self {
            vel_threshold_fraction: 0.0,
            force_threshold_fraction: 0.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.vel_threshold_fraction)
            && (0.0..=1.0).contains(&self.force_threshold_fraction)
    }
}

fn max_abs(v: &[f64; 3]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn chebyshev3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).fold(0.0, |m, i| m.max((a[i] - b[i]).abs()))
}

/// Hold-last-emitted filter for one 3-vector feature.
struct Deadband {
    fraction: f64,
    last: Option<[f64; 3]>,
    peak: f64,
}

impl Deadband {
    fn new(fraction: f64) -> Self {
        Self {
            fraction,
            last: None,
            peak: 0.0,
        }
    }

    fn filter(&mut self, value: [f64; 3]) -> [f64; 3] {
        self.peak = self.peak.max(max_abs(&value));
        match self.last {
            Some(last) if chebyshev3(&value, &last) < self.fraction * self.peak => last,
            _ => {
                self.last = Some(value);
                value
            }
        }
    }
}

/// Perceptual deadband on velocity and force.
///
/// A vector is replaced by the last emitted one while its Chebyshev change
/// stays below `fraction * running_peak`, where the running peak is the
/// largest max-abs magnitude of that feature seen so far in the input.
/// Positions and timestamps pass through untouched.
pub fn apply_deadband(trace: &Trace, cfg: &DeadbandConfig) -> Trace {
    let mut vel = Deadband::new(cfg.vel_threshold_fraction);
    let mut force = Deadband::new(cfg.force_threshold_fraction);
    let samples = trace
        .samples()
        .iter()
        .map(|s| HapticSample {
            t: s.t,
            pos: s.pos,
            vel: vel.filter(s.vel),
            force: force.filter(s.force),
        })
        .collect();
    Trace {
        samples,
        name: trace.name.clone(),
        sample_rate_hz: trace.sample_rate_hz,
        seed: trace.seed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MovementKind {
    Tapping,
    TapAndHold,
    HorizontalFast,
    HorizontalSlow,
    Drag,
}

impl MovementKind {
    pub const ALL: [MovementKind; 5] = [
        MovementKind::Tapping,
        MovementKind::TapAndHold,
        MovementKind::HorizontalFast,
        MovementKind::HorizontalSlow,
        MovementKind::Drag,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MovementKind::Tapping => "tapping",
            MovementKind::TapAndHold => "tap_and_hold",
            MovementKind::HorizontalFast => "horizontal_fast",
            MovementKind::HorizontalSlow => "horizontal_slow",
            MovementKind::Drag => "drag",
        }
    }

    pub fn is_tapping(&self) -> bool {
        matches!(self, MovementKind::Tapping | MovementKind::TapAndHold)
    }

    pub fn is_horizontal(&self) -> bool {
        matches!(
            self,
            MovementKind::HorizontalFast | MovementKind::HorizontalSlow
        )
    }
}

impl std::str::FromStr for MovementKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MovementKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown movement kind `{s}`"))
    }
}

impl std::fmt::Display for MovementKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Smooth seeded disturbance: a handful of low-frequency sinusoids.
struct SmoothNoise {
    terms: Vec<(f64, f64, f64)>,
}

impl SmoothNoise {
    fn new(rng: &mut ChaCha8Rng, amplitude: f64, max_freq_hz: f64) -> Self {
        let terms = (0..4)
            .map(|_| {
                (
                    amplitude * rng.random_range(0.2..1.0) / 4.0,
                    rng.random_range(0.05..1.0) * max_freq_hz,
                    rng.random_range(0.0..2.0 * PI),
                )
            })
            .collect();
        Self { terms }
    }

    fn at(&self, t: f64) -> f64 {
        self.terms
            .iter()
            .map(|&(a, f, phi)| a * (2.0 * PI * f * t + phi).sin())
            .sum()
    }
}

/// Per-kind waveform parameters, jittered by the seed.
struct Waveform {
    kind: MovementKind,
    freq: f64,
    amp: f64,
    phase: f64,
    decay: f64,
    stiffness: f64,
    noise: [SmoothNoise; 3],
    force_noise: SmoothNoise,
}

impl Waveform {
    fn new(kind: MovementKind, rng: &mut ChaCha8Rng) -> Self {
        let (freq, amp) = match kind {
            MovementKind::Tapping => (2.0, 0.02),
            MovementKind::TapAndHold => (0.8, 0.02),
            MovementKind::HorizontalFast => (1.2, 0.05),
            MovementKind::HorizontalSlow => (0.3, 0.05),
            MovementKind::Drag => (0.5, 0.04),
        };
        let freq = freq * rng.random_range(0.85..1.15);
        let amp = amp * rng.random_range(0.85..1.15);
        let phase = rng.random_range(0.0..2.0 * PI);
        let decay = rng.random_range(0.02..0.1);
        // Newtons per metre of penetration.
        let stiffness = 400.0 * rng.random_range(0.9..1.1);
        let noise = [
            SmoothNoise::new(rng, 0.05 * amp, freq),
            SmoothNoise::new(rng, 0.05 * amp, freq),
            SmoothNoise::new(rng, 0.02 * amp, freq),
        ];
        let force_noise = SmoothNoise::new(rng, 0.05, 2.0 * freq);
        Self {
            kind,
            freq,
            amp,
            phase,
            decay,
            stiffness,
            noise,
            force_noise,
        }
    }

    fn envelope(&self, t: f64) -> f64 {
        (-self.decay * t).exp()
    }

    fn position(&self, t: f64) -> [f64; 3] {
        let w = 2.0 * PI * self.freq;
        let env = self.envelope(t);
        let n = [
            self.noise[0].at(t),
            self.noise[1].at(t),
            self.noise[2].at(t),
        ];
        match self.kind {
            MovementKind::Tapping => {
                // Contact surface at z = 0, touched for about a third of each period.
                let z = self.amp * (env * (w * t + self.phase).cos() + 0.5);
                [0.01 + n[0], 0.005 + n[1], z + n[2]]
            }
            MovementKind::TapAndHold => {
                // Smoothed square wave: long press, short lift.
                let s = (w * t + self.phase).sin();
                let square = (4.0 * s).tanh();
                let z = self.amp * (0.6 * square + 0.3);
                [0.01 + n[0], 0.005 + n[1], z + n[2]]
            }
            MovementKind::HorizontalFast | MovementKind::HorizontalSlow => [
                self.amp * env * (w * t + self.phase).sin() + n[0],
                0.3 * self.amp * env * (0.5 * w * t + self.phase).sin() + n[1],
                0.05,
            ],
            MovementKind::Drag => [
                self.amp * env * (w * t + self.phase).sin() + n[0],
                // Pressed into a surface at y = 0.
                -0.002 * (1.0 + 0.5 * (0.7 * w * t).sin()) + 0.1 * n[1],
                0.02 + n[2],
            ],
        }
    }

    fn force(&self, t: f64, pos: &[f64; 3], vel: &[f64; 3]) -> [f64; 3] {
        match self.kind {
            MovementKind::Tapping | MovementKind::TapAndHold => {
                let depth = -pos[2];
                if depth > 0.0 {
                    let fz = self.stiffness * depth;
                    // Tangential friction proportional to the normal load.
                    [
                        -0.3 * fz * (vel[0] / 0.05).tanh(),
                        -0.3 * fz * (vel[1] / 0.05).tanh(),
                        fz,
                    ]
                } else {
                    [0.0, 0.0, 0.0]
                }
            }
            MovementKind::HorizontalFast | MovementKind::HorizontalSlow => [
                -2.0 * vel[0] + self.force_noise.at(t),
                -2.0 * vel[1] + 0.5 * self.force_noise.at(t + 1.0),
                0.0,
            ],
            MovementKind::Drag => {
                let depth = (-pos[1]).max(0.0);
                let fy = self.stiffness * depth;
                [
                    -0.7 * fy * (vel[0] / 0.02).tanh(),
                    fy,
                    self.force_noise.at(t) * 0.1,
                ]
            }
        }
    }
}

/// Deterministic synthetic haptic trace for one of the five movement classes.
///
/// Positions are smooth waveforms with seeded low-frequency disturbance;
/// velocity is the backward difference of position (forward difference at
/// the first sample); force follows a contact or drag model per kind.
pub fn generate_synthetic_trace(
    kind: MovementKind,
    n: usize,
    sample_rate_hz: f64,
    seed: u64,
) -> Result<Trace, TraceError> {
    if n < 2 {
        return Err(TraceError::InvalidCount(n));
    }
    if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
        return Err(TraceError::InvalidRate(sample_rate_hz));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(kind as u64);
    let wave = Waveform::new(kind, &mut rng);

    let times: Vec<f64> = (0..n).map(|i| i as f64 / sample_rate_hz).collect();
    let positions: Vec<[f64; 3]> = times.iter().map(|&t| wave.position(t)).collect();
    let samples = (0..n)
        .map(|i| {
            let (a, b) = if i == 0 { (0, 1) } else { (i - 1, i) };
            let vel: [f64; 3] =
                std::array::from_fn(|k| (positions[b][k] - positions[a][k]) * sample_rate_hz);
            HapticSample {
                t: times[i],
                pos: positions[i],
                vel,
                force: wave.force(times[i], &positions[i], &vel),
            }
        })
        .collect();
    Trace::new(
        format!("{kind}-{seed}"),
        samples,
        Some(sample_rate_hz),
        Some(seed),
    )
}

/// Contiguous temporal split; the first `floor(len * train_fraction)` samples
/// form the training part.
pub fn train_test_split(trace: &Trace, train_fraction: f64) -> Result<(Trace, Trace), TraceError> {
    let len = trace.len();
    let err = TraceError::TooShortForSplit {
        len,
        fraction: train_fraction,
    };
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(err);
    }
    let cut = (len as f64 * train_fraction).floor() as usize;
    if cut < 2 || len - cut < 2 {
        return Err(err);
    }
    let part = |range: std::ops::Range<usize>, suffix: &str| Trace {
        samples: trace.samples[range].to_vec(),
        name: format!("{}-{suffix}", trace.name),
        sample_rate_hz: trace.sample_rate_hz,
        seed: trace.seed,
    };
    Ok((part(0..cut, "train"), part(cut..len, "test")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(t: f64, v: f64) -> HapticSample {
        HapticSample {
            t,
            pos: [t, 0.0, 0.0],
            vel: [v, 0.0, 0.0],
            force: [0.0; 3],
        }
    }

    fn ramp_trace(start: f64, step: f64, n: usize) -> Trace {
        let samples = (0..n)
            .map(|i| sample(i as f64 * 0.001, start + step * i as f64))
            .collect();
        Trace::new("ramp", samples, Some(1000.0), None).unwrap()
    }

    #[test]
    fn rejects_short_and_non_monotone() {
        assert!(matches!(
            Trace::new("x", vec![sample(0.0, 0.0)], None, None),
            Err(TraceError::TooShort(1))
        ));
        assert!(matches!(
            Trace::new("x", vec![sample(0.1, 0.0), sample(0.1, 0.0)], None, None),
            Err(TraceError::NonMonotoneTime { row: 1 })
        ));
        assert!(matches!(
            Trace::new(
                "x",
                vec![sample(0.0, 0.0), sample(0.3, 0.0)],
                Some(1000.0),
                None
            ),
            Err(TraceError::IrregularSpacing { row: 1 })
        ));
    }

    #[test]
    fn two_row_file_parses() {
        let csv = "t,px,py,pz,vx,vy,vz,fx,fy,fz\n0,1,2,3,4,5,6,7,8,9\n0.001,1,2,3,4,5,6,7,8,9.5\n";
        let trace = read_trace(csv.as_bytes(), "two").unwrap();
        assert_eq!(trace.len(), 2);
        assert_eq!(trace.samples()[1].force[2], 9.5);
        assert_eq!(trace.sample_rate_hz(), Some(1000.0));
    }

    #[test]
    fn nan_in_force_reports_row() {
        let mut csv = String::from("t,px,py,pz,vx,vy,vz,fx,fy,fz\n");
        for i in 0..8 {
            let fz = if i == 5 {
                "nan".to_string()
            } else {
                "0.5".to_string()
            };
            csv.push_str(&format!("{},0,0,0,0,0,0,0,0,{fz}\n", i as f64 * 0.01));
        }
        assert!(matches!(
            read_trace(csv.as_bytes(), "bad"),
            Err(TraceError::NonFiniteValue { row: 5 })
        ));
    }

    #[test]
    fn missing_column_is_named() {
        let csv = "t,px,py,pz,vx,vy,vz,fx,fy\n0,1,2,3,4,5,6,7,8\n1,1,2,3,4,5,6,7,8\n";
        match read_trace(csv.as_bytes(), "m") {
            Err(TraceError::MissingColumn(c)) => assert_eq!(c, "fz"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn backwards_time_in_file() {
        let csv = "t,px,py,pz,vx,vy,vz,fx,fy,fz\n0.2,0,0,0,0,0,0,0,0,0\n0.1,0,0,0,0,0,0,0,0,0\n";
        assert!(matches!(
            read_trace(csv.as_bytes(), "b"),
            Err(TraceError::NonMonotoneTime { row: 1 })
        ));
    }

    #[test]
    fn single_row_file_is_too_short() {
        let csv = "t,px,py,pz,vx,vy,vz,fx,fy,fz\n0,0,0,0,0,0,0,0,0,0\n";
        assert!(matches!(
            read_trace(csv.as_bytes(), "s"),
            Err(TraceError::TooShort(1))
        ));
    }

    #[test]
    fn zero_deadband_is_identity() {
        let trace = generate_synthetic_trace(MovementKind::Tapping, 500, 1000.0, 3).unwrap();
        assert_eq!(apply_deadband(&trace, &DeadbandConfig::disabled()), trace);
    }

    #[test]
    fn constant_velocity_passes_deadband() {
        let trace = ramp_trace(0.7, 0.0, 20);
        let cfg = DeadbandConfig {
            vel_threshold_fraction: 0.1,
            force_threshold_fraction: 0.0,
        };
        assert_eq!(apply_deadband(&trace, &cfg), trace);
    }

    #[test]
    fn ramp_deadband_hand_trace() {
        // v = 1.0 + 0.05 i; threshold 10% of the running peak (= current v).
        // Hand trace of the hold rule against the last emitted value:
        //   i=1: |0.05| < 0.105 hold   i=2: 0.10 < 0.110 hold
        //   i=3: 0.15 >= 0.115 emit    i=4,5 hold, i=6 emit (1.30)
        //   i=7,8 hold, i=9: 0.15 >= 0.145 emit (1.45)
        let trace = ramp_trace(1.0, 0.05, 10);
        let cfg = DeadbandConfig {
            vel_threshold_fraction: 0.1,
            force_threshold_fraction: 0.0,
        };
        let out = apply_deadband(&trace, &cfg);
        let vx: Vec<f64> = out.samples().iter().map(|s| s.vel[0]).collect();
        let raw: Vec<f64> = trace.samples().iter().map(|s| s.vel[0]).collect();
        let expected = [
            raw[0], raw[0], raw[0], raw[3], raw[3], raw[3], raw[6], raw[6], raw[6], raw[9],
        ];
        assert_eq!(vx, expected);
        // positions and time untouched
        for (a, b) in out.samples().iter().zip(trace.samples()) {
            assert_eq!(a.pos, b.pos);
            assert_eq!(a.t, b.t);
        }
    }

    #[test]
    fn slow_ramp_held_at_first_value() {
        // 1% per step stays inside 10% of the peak for all ten samples.
        let trace = ramp_trace(1.0, 0.01, 10);
        let cfg = DeadbandConfig {
            vel_threshold_fraction: 0.1,
            force_threshold_fraction: 0.1,
        };
        let out = apply_deadband(&trace, &cfg);
        assert!(out.samples().iter().all(|s| s.vel[0] == 1.0));
    }

    #[test]
    fn deadband_idempotent_on_synthetic() {
        let cfg = DeadbandConfig::default();
        for kind in MovementKind::ALL {
            let trace = generate_synthetic_trace(kind, 800, 1000.0, 11).unwrap();
            let once = apply_deadband(&trace, &cfg);
            assert_eq!(apply_deadband(&once, &cfg), once, "{kind}");
        }
    }

    #[test]
    fn two_sample_trace_timestamps() {
        let trace = generate_synthetic_trace(MovementKind::Tapping, 2, 1000.0, 42).unwrap();
        let t: Vec<f64> = trace.samples().iter().map(|s| s.t).collect();
        assert_eq!(t, vec![0.0, 0.001]);
    }

    #[test]
    fn generator_is_deterministic() {
        let a = generate_synthetic_trace(MovementKind::Drag, 300, 500.0, 9).unwrap();
        let b = generate_synthetic_trace(MovementKind::Drag, 300, 500.0, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_trace(MovementKind::Drag, 300, 500.0, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generator_rejects_bad_count() {
        assert!(matches!(
            generate_synthetic_trace(MovementKind::Drag, 1, 1000.0, 0),
            Err(TraceError::InvalidCount(1))
        ));
    }

    #[test]
    fn horizontal_has_no_vertical_force() {
        let trace =
            generate_synthetic_trace(MovementKind::HorizontalFast, 1000, 1000.0, 7).unwrap();
        let max_fz = trace.axis(8).iter().fold(0.0f64, |m, f| m.max(f.abs()));
        assert!(max_fz < 1e-3);
    }

    #[test]
    fn tapping_force_is_impulsive() {
        for kind in [MovementKind::Tapping, MovementKind::TapAndHold] {
            let trace = generate_synthetic_trace(kind, 3000, 1000.0, 5).unwrap();
            let fz = trace.axis(8);
            let contact = fz.iter().filter(|&&f| f > 0.0).count();
            assert!(contact > 0 && contact < fz.len(), "{kind}: {contact}");
            // zero force (all axes) between contacts
            for s in trace.samples() {
                if s.force[2] == 0.0 {
                    assert_eq!(s.force, [0.0; 3]);
                }
            }
            // several separate contact episodes
            let onsets = fz.windows(2).filter(|w| w[0] == 0.0 && w[1] > 0.0).count();
            assert!(onsets >= 2, "{kind}: {onsets} onsets");
        }
    }

    #[test]
    fn velocity_is_discrete_derivative() {
        for kind in MovementKind::ALL {
            let trace = generate_synthetic_trace(kind, 400, 1000.0, 1).unwrap();
            let s = trace.samples();
            for i in 1..s.len() {
                for k in 0..3 {
                    let d = (s[i].pos[k] - s[i - 1].pos[k]) * 1000.0;
                    let tol = 1e-6 * d.abs().max(1e-12);
                    assert!((s[i].vel[k] - d).abs() <= tol, "{kind} {i} {k}");
                }
            }
        }
    }

    #[test]
    fn split_lengths_and_boundary() {
        let trace = ramp_trace(0.0, 1.0, 10);
        let (a, b) = train_test_split(&trace, 0.8).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        assert!(matches!(
            train_test_split(&trace, 0.95),
            Err(TraceError::TooShortForSplit { .. })
        ));
    }
}
