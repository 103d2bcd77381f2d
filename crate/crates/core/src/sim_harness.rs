//! Teleoperation replay over a lossy channel.
//!
//! The human side sends its samples to the robot and the robot sends its
//! samples back. A dropped sample is replaced at the receiver by a one-step
//! prediction from the last received (or previously substituted) window:
//! the follower recovers human samples, the leader recovers robot samples.
//! A zero-order hold on the same drop pattern serves as baseline.
//!
//! Synthetic traces carry one 9-feature stream, which plays both the human
//! and the robot signal.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lefo_game::{accuracy_from_predictions, AccuracyReport, GameError, PredictionSide};
use crate::predictor::{MlpParams, Predictor, PredictorError};
use crate::trace_io::{Features, Trace, FEATURE_COUNT, FEATURE_NAMES};

/// Fewest timed trials [`measure_inference_time`] accepts.
pub const MIN_TRIALS: usize = 30;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid channel configuration: {0}")]
    InvalidConfig(String),
    #[error("need at least {MIN_TRIALS} trials, got {0}")]
    TooFewTrials(usize),
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Which links of the channel lose samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HumanToRobot,
    RobotToHuman,
    Both,
}

/// One link of the bidirectional channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    HumanToRobot,
    RobotToHuman,
}

impl Link {
    pub const ALL: [Link; 2] = [Link::HumanToRobot, Link::RobotToHuman];

    pub fn as_str(&self) -> &'static str {
        match self {
            Link::HumanToRobot => "human_to_robot",
            Link::RobotToHuman => "robot_to_human",
        }
    }

    /// The network that recovers samples lost on this link.
    pub fn side(&self) -> PredictionSide {
        match self {
            Link::HumanToRobot => PredictionSide::FollowerPredictingHuman,
            Link::RobotToHuman => PredictionSide::LeaderPredictingRobot,
        }
    }

    fn stream(&self) -> u64 {
        match self {
            Link::HumanToRobot => 0,
            Link::RobotToHuman => 1,
        }
    }
}

impl Direction {
    pub fn includes(&self, link: Link) -> bool {
        matches!(
            (self, link),
            (Direction::Both, _)
                | (Direction::HumanToRobot, Link::HumanToRobot)
                | (Direction::RobotToHuman, Link::RobotToHuman)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    /// Long-run fraction of dropped samples.
    pub loss_probability: f64,
    /// Mean length of a loss burst in samples; 1 gives independent drops.
    pub burst_length_mean: f64,
    pub seed: u64,
    pub direction: Direction,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            loss_probability: 0.1,
            burst_length_mean: 1.0,
            seed: 0,
            direction: Direction::Both,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&self.loss_probability) {
            return Err(SimError::InvalidConfig(format!(
                "loss_probability must be in [0, 1], got {}",
                self.loss_probability
            )));
        }
        if !(self.burst_length_mean >= 1.0 && self.burst_length_mean.is_finite()) {
            return Err(SimError::InvalidConfig(format!(
                "burst_length_mean must be >= 1, got {}",
                self.burst_length_mean
            )));
        }
        Ok(())
    }
}

/// Per-sample drop flags for each link.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropMask {
    pub human_to_robot: Vec<bool>,
    pub robot_to_human: Vec<bool>,
}

impl DropMask {
    pub fn link(&self, link: Link) -> &[bool] {
        match link {
            Link::HumanToRobot => &self.human_to_robot,
            Link::RobotToHuman => &self.robot_to_human,
        }
    }
}

/// Draws the drop pattern for `trace`.
///
/// With unit mean burst length each sample is dropped independently.
/// Otherwise a two-state Gilbert chain is used whose bad state lasts
/// `burst_length_mean` samples on average and whose stationary loss rate is
/// `loss_probability`. Each link draws from its own stream of the seed.
pub fn simulate_lossy_channel(trace: &Trace, cfg: &ChannelConfig) -> Result<DropMask, SimError> {
    cfg.validate()?;
    let n = trace.len();
    let draw = |link: Link| -> Vec<bool> {
        if !cfg.direction.includes(link) {
            return vec![false; n];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(link.stream());
        let p = cfg.loss_probability;
        if cfg.burst_length_mean == 1.0 || p == 0.0 || p == 1.0 {
            return (0..n).map(|_| rng.random_bool(p)).collect();
        }
        let leave_bad = 1.0 / cfg.burst_length_mean;
        let enter_bad = (p * leave_bad / (1.0 - p)).min(1.0);
        let mut bad = rng.random_bool(p);
        (0..n)
            .map(|_| {
                let dropped = bad;
                bad = if bad {
                    !rng.random_bool(leave_bad)
                } else {
                    rng.random_bool(enter_bad)
                };
                dropped
            })
            .collect()
    };
    Ok(DropMask {
        human_to_robot: draw(Link::HumanToRobot),
        robot_to_human: draw(Link::RobotToHuman),
    })
}

/// Wall-clock latency summary in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    /// Summary of `samples_ms`; `None` when empty. Percentiles use the
    /// nearest-rank rule.
    pub fn from_samples(samples_ms: &[f64]) -> Option<Self> {
        if samples_ms.is_empty() {
            return None;
        }
        let mut s = samples_ms.to_vec();
        s.sort_by(f64::total_cmp);
        let rank = |q: f64| s[((q * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
        Some(Self {
            count: s.len(),
            mean_ms: s.iter().sum::<f64>() / s.len() as f64,
            median_ms: rank(0.5),
            p95_ms: rank(0.95),
            max_ms: s[s.len() - 1],
        })
    }
}

/// Outcome of one link of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkReport {
    pub link: Link,
    pub samples: usize,
    /// Samples replaced by a prediction.
    pub drop_count: usize,
    pub drop_rate: f64,
    /// Predicted values scored on the dropped samples only; `None` without drops.
    pub recovered: Option<AccuracyReport>,
    /// Zero-order hold scored on the same samples.
    pub baseline: Option<AccuracyReport>,
    /// Time of each prediction. One forward pass yields all nine features,
    /// so the figure applies to every feature alike.
    pub latency: Option<LatencyStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub trace: String,
    pub channel: ChannelConfig,
    pub links: Vec<LinkReport>,
}

impl SessionReport {
    pub fn link(&self, link: Link) -> Option<&LinkReport> {
        self.links.iter().find(|l| l.link == link)
    }

    /// Copy with every wall-clock field removed; equal across reruns with
    /// the same seeds.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        r.links.iter_mut().for_each(|l| l.latency = None);
        r
    }

    /// Mean over links with drops of the recovered and baseline mean NRMSE.
    pub fn mean_nrmse(&self) -> Option<(f64, f64)> {
        let pairs: Vec<(f64, f64)> = self
            .links
            .iter()
            .filter_map(|l| {
                Some((
                    l.recovered.as_ref()?.mean_nrmse()?,
                    l.baseline.as_ref()?.mean_nrmse()?,
                ))
            })
            .collect();
        if pairs.is_empty() {
            return None;
        }
        let n = pairs.len() as f64;
        Some((
            pairs.iter().map(|p| p.0).sum::<f64>() / n,
            pairs.iter().map(|p| p.1).sum::<f64>() / n,
        ))
    }
}

/// Replays `trace` over the channel.
///
/// The first `window` samples of each link are always delivered so the
/// receiver can start predicting. Substituted values enter later windows,
/// so errors may compound over bursts.
pub fn run_session(
    trace: &Trace,
    leader: &Predictor,
    follower: &Predictor,
    channel: &ChannelConfig,
) -> Result<SessionReport, SimError> {
    let mask = simulate_lossy_channel(trace, channel)?;
    let truth = trace.features();
    let links = Link::ALL
        .iter()
        .map(|&link| {
            let predictor = match link {
                Link::HumanToRobot => follower,
                Link::RobotToHuman => leader,
            };
            replay_link(&truth, mask.link(link), predictor, link)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SessionReport {
        trace: trace.name().to_string(),
        channel: *channel,
        links,
    })
}

fn replay_link(
    truth: &[Features],
    dropped: &[bool],
    predictor: &Predictor,
    link: Link,
) -> Result<LinkReport, SimError> {
    let w = predictor.window();
    let n = truth.len();
    if n <= w {
        return Err(PredictorError::InsufficientHistory {
            needed: w + 1,
            got: n,
        }
        .into());
    }
    let mut received: Vec<Features> = Vec::with_capacity(n);
    let mut held = truth[0];
    let (mut actual, mut predicted, mut hold) = (Vec::new(), Vec::new(), Vec::new());
    let mut timings = Vec::new();
    for i in 0..n {
        if i < w || !dropped[i] {
            received.push(truth[i]);
            held = truth[i];
            continue;
        }
        let start = Instant::now();
        let p = predictor.predict_features(&received[i - w..i])?;
        timings.push(start.elapsed().as_secs_f64() * 1e3);
        received.push(p);
        actual.push(truth[i]);
        predicted.push(p);
        hold.push(held);
    }
    let score = |values: &[Features]| -> Result<Option<AccuracyReport>, SimError> {
        if actual.is_empty() {
            Ok(None)
        } else {
            Ok(Some(accuracy_from_predictions(
                &actual,
                values,
                link.side(),
            )?))
        }
    };
    Ok(LinkReport {
        link,
        samples: n,
        drop_count: actual.len(),
        drop_rate: actual.len() as f64 / n as f64,
        recovered: score(&predicted)?,
        baseline: score(&hold)?,
        latency: LatencyStats::from_samples(&timings),
    })
}

/// Times single forward passes of `params` on a fixed seeded input after
/// `warmup` untimed passes.
pub fn measure_inference_time(
    params: &MlpParams,
    trials: usize,
    warmup: usize,
) -> Result<LatencyStats, SimError> {
    if trials < MIN_TRIALS {
        return Err(SimError::TooFewTrials(trials));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let input: Vec<f64> = (0..params.in_dim())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    for _ in 0..warmup {
        std::hint::black_box(params.infer(std::hint::black_box(&input))?);
    }
    let mut samples = Vec::with_capacity(trials);
    for _ in 0..trials {
        let start = Instant::now();
        std::hint::black_box(params.infer(std::hint::black_box(&input))?);
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(LatencyStats::from_samples(&samples).expect("trials > 0"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Writes `report` as pretty JSON or as a CSV with one row per link and axis.
pub fn emit_report(
    report: &SessionReport,
    path: impl AsRef<Path>,
    format: ReportFormat,
) -> Result<(), SimError> {
    let mut file = std::fs::File::create(path)?;
    match format {
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut file, report)?;
            file.write_all(b"\n")?;
        }
        ReportFormat::Csv => write_report_csv(report, &mut file)?,
    }
    file.flush()?;
    Ok(())
}

pub fn read_report_json(path: impl AsRef<Path>) -> Result<SessionReport, SimError> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

pub fn write_report_csv<W: Write>(report: &SessionReport, out: W) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "link",
        "axis",
        "drop_count",
        "drop_rate",
        "recovered_accuracy",
        "recovered_rmse",
        "baseline_accuracy",
        "baseline_rmse",
        "latency_mean_ms",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for l in &report.links {
        for (k, name) in FEATURE_NAMES.iter().enumerate().take(FEATURE_COUNT) {
            let acc = |r: &Option<AccuracyReport>| r.as_ref().and_then(|r| r.accuracy[k]);
            let rmse = |r: &Option<AccuracyReport>| r.as_ref().map(|r| r.rmse[k]);
            w.write_record([
                l.link.as_str().to_string(),
                name.to_string(),
                l.drop_count.to_string(),
                l.drop_rate.to_string(),
                opt(acc(&l.recovered)),
                opt(rmse(&l.recovered)),
                opt(acc(&l.baseline)),
                opt(rmse(&l.baseline)),
                opt(l.latency.map(|s| s.mean_ms)),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One row per labelled latency summary, columns
/// `label,count,mean_ms,median_ms,p95_ms,max_ms`.
pub fn write_latency_csv<W: Write>(rows: &[(&str, LatencyStats)], out: W) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["label", "count", "mean_ms", "median_ms", "p95_ms", "max_ms"])?;
    for (label, s) in rows {
        w.write_record([
            label.to_string(),
            s.count.to_string(),
            s.mean_ms.to_string(),
            s.median_ms.to_string(),
            s.p95_ms.to_string(),
            s.max_ms.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{mlp_init, Predictor};
    use crate::trace_io::{generate_synthetic_trace, HapticSample, MovementKind};

    fn trace(n: usize) -> Trace {
        generate_synthetic_trace(MovementKind::Drag, n, 250.0, 3).unwrap()
    }

    fn channel(p: f64, burst: f64) -> ChannelConfig {
        ChannelConfig {
            loss_probability: p,
            burst_length_mean: burst,
            seed: 11,
            direction: Direction::Both,
        }
    }

    #[test]
    fn extreme_loss_rates() {
        let t = trace(500);
        for burst in [1.0, 4.0] {
            let none = simulate_lossy_channel(&t, &channel(0.0, burst)).unwrap();
            assert!(none
                .human_to_robot
                .iter()
                .chain(&none.robot_to_human)
                .all(|d| !d));
            let all = simulate_lossy_channel(&t, &channel(1.0, burst)).unwrap();
            assert!(all
                .human_to_robot
                .iter()
                .chain(&all.robot_to_human)
                .all(|d| *d));
        }
    }

    #[test]
    fn bernoulli_drop_count() {
        let t = trace(10_000);
        let m = simulate_lossy_channel(&t, &channel(0.1, 1.0)).unwrap();
        for link in Link::ALL {
            let count = m.link(link).iter().filter(|d| **d).count() as f64;
            assert!((count - 1000.0).abs() <= 90.0, "{count}");
        }
        assert_ne!(m.human_to_robot, m.robot_to_human);
    }

    #[test]
    fn bursts_have_requested_mean_length() {
        let t = trace(50_000);
        let m = simulate_lossy_channel(&t, &channel(0.2, 5.0)).unwrap();
        let d = &m.human_to_robot;
        let rate = d.iter().filter(|x| **x).count() as f64 / d.len() as f64;
        let bursts = d.windows(2).filter(|w| w[1] && !w[0]).count() + usize::from(d[0]);
        let mean_burst = d.iter().filter(|x| **x).count() as f64 / bursts as f64;
        assert!((rate - 0.2).abs() < 0.02, "{rate}");
        assert!((mean_burst - 5.0).abs() < 0.5, "{mean_burst}");
    }

    #[test]
    fn direction_selects_links_and_masks_repeat() {
        let t = trace(300);
        let cfg = ChannelConfig {
            direction: Direction::RobotToHuman,
            ..channel(0.5, 1.0)
        };
        let m = simulate_lossy_channel(&t, &cfg).unwrap();
        assert!(m.human_to_robot.iter().all(|d| !d));
        assert!(m.robot_to_human.iter().any(|d| *d));
        assert_eq!(m, simulate_lossy_channel(&t, &cfg).unwrap());
        assert!(simulate_lossy_channel(&t, &channel(1.5, 1.0)).is_err());
        assert!(simulate_lossy_channel(&t, &channel(0.1, 0.5)).is_err());
    }

    fn predictors(t: &Trace) -> (Predictor, Predictor) {
        let leader = Predictor::fitted(mlp_init(3, 16, 36, 9, 1).unwrap(), 4, t).unwrap();
        let follower = Predictor::fitted(mlp_init(2, 16, 36, 9, 2).unwrap(), 4, t).unwrap();
        (leader, follower)
    }

    #[test]
    fn lossless_session_has_no_recovery_section() {
        let t = trace(200);
        let (l, f) = predictors(&t);
        let r = run_session(&t, &l, &f, &channel(0.0, 1.0)).unwrap();
        for link in &r.links {
            assert_eq!(link.drop_count, 0);
            assert!(link.recovered.is_none() && link.baseline.is_none());
            assert!(link.latency.is_none());
        }
    }

    #[test]
    fn session_accounting_and_repeatability() {
        let t = trace(400);
        let (l, f) = predictors(&t);
        let cfg = channel(0.3, 2.0);
        let r = run_session(&t, &l, &f, &cfg).unwrap();
        let mask = simulate_lossy_channel(&t, &cfg).unwrap();
        for link in &r.links {
            let expected = mask.link(link.link)[4..].iter().filter(|d| **d).count();
            assert_eq!(link.drop_count, expected);
            assert!((link.drop_rate - expected as f64 / 400.0).abs() < 1e-12);
            assert_eq!(link.recovered.as_ref().unwrap().samples, expected);
            assert_eq!(link.recovered.as_ref().unwrap().side, link.link.side());
            let lat = link.latency.unwrap();
            assert_eq!(lat.count, expected);
            assert!(lat.mean_ms >= 0.0 && lat.p95_ms >= lat.median_ms);
        }
        let again = run_session(&t, &l, &f, &cfg).unwrap();
        assert_eq!(r.without_timings(), again.without_timings());
    }

    #[test]
    fn all_loss_on_constant_trace_recovers_constant() {
        let samples: Vec<HapticSample> = (0..50)
            .map(|i| HapticSample {
                t: i as f64 * 0.004,
                pos: [0.1, 0.2, 0.3],
                vel: [0.0; 3],
                force: [1.0, 0.0, -2.0],
            })
            .collect();
        let t = Trace::new("const", samples, Some(250.0), None).unwrap();
        let (l, f) = predictors(&t);
        let r = run_session(&t, &l, &f, &channel(1.0, 1.0)).unwrap();
        for link in &r.links {
            let rec = link.recovered.as_ref().unwrap();
            assert_eq!(link.drop_count, 46);
            assert!(rec.accuracy.iter().all(|a| a.is_none()));
            assert!(rec.rmse.iter().all(|e| *e == 0.0));
        }
    }

    #[test]
    fn latency_measurement() {
        let net = mlp_init(3, 16, 36, 9, 0).unwrap();
        assert!(matches!(
            measure_inference_time(&net, 10, 0),
            Err(SimError::TooFewTrials(10))
        ));
        let s = measure_inference_time(&net, 50, 5).unwrap();
        assert_eq!(s.count, 50);
        assert!(s.p95_ms >= s.median_ms && s.max_ms >= s.p95_ms && s.mean_ms >= 0.0);
    }

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        let s = LatencyStats::from_samples(&v).unwrap();
        assert_eq!((s.median_ms, s.p95_ms, s.max_ms), (10.0, 19.0, 20.0));
        assert_eq!(s.mean_ms, 10.5);
        assert!(LatencyStats::from_samples(&[]).is_none());
    }

    #[test]
    fn report_files() {
        let t = trace(300);
        let (l, f) = predictors(&t);
        let r = run_session(&t, &l, &f, &channel(0.2, 1.0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let json = dir.path().join("r.json");
        emit_report(&r, &json, ReportFormat::Json).unwrap();
        assert_eq!(read_report_json(&json).unwrap(), r);

        let csv_path = dir.path().join("r.csv");
        emit_report(&r, &csv_path, ReportFormat::Csv).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * FEATURE_COUNT);

        let bad = dir.path().join("missing").join("r.json");
        assert!(matches!(
            emit_report(&r, &bad, ReportFormat::Json),
            Err(SimError::IoFailure(_))
        ));
    }
}
