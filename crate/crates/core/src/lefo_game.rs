//! Alternating leader/follower training.
//!
//! Each outer iteration gives the follower (robot side, predicting the human
//! stream) a few SGD steps, then the leader (human side, predicting the robot
//! stream). Both sides minimise mean squared prediction error; the game
//! utilities are evaluated on held-out windows after every iteration:
//!
//! * `U_R`, the follower's cost: histogram KL between actual and predicted
//!   human samples, summed over the nine feature axes.
//! * `U_H`, the leader's payoff: k-NN mutual information between actual and
//!   predicted robot samples.
//!
//! The objective is `U_H - U_R`. Training stops when it changes by less
//! than the tolerance between consecutive iterations.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::info_metrics::{histogram_kl, ksg_pair_mi, HistogramKlConfig, KsgConfig, MetricsError};
use crate::predictor::{
    mse_gradient, mse_loss, sgd_step, DropoutMask, MlpParams, MomentumState, NetworkConfig,
    Predictor, PredictorError, SgdConfig, WindowDataset,
};
use crate::trace_io::{Features, Trace, FEATURE_COUNT, FEATURE_NAMES};

/// Tag stamped into every [`AccuracyReport`].
pub const ACCURACY_METRIC: &str = "nrmse-complement-v1";

#[derive(Debug, Error)]
pub enum GameError {
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid game configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite training loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("{0}")]
    InvalidInput(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GameConfig {
    pub max_iterations: usize,
    /// Stop once the objective changes by less than this between iterations.
    pub tolerance: f64,
    pub inner_steps_leader: usize,
    pub inner_steps_follower: usize,
    /// Held-out windows used for the utilities.
    pub utility_batch: usize,
    /// Seeds minibatch sampling.
    pub seed: u64,
}

impl Default for GameConfig {
    fn default() -> Self {
        Self {
            max_iterations: 30,
            tolerance: 1e-3,
            inner_steps_leader: 10,
            inner_steps_follower: 10,
            utility_batch: 256,
            seed: 0,
        }
    }
}

impl GameConfig {
    pub fn validate(&self) -> Result<(), GameError> {
        if self.max_iterations == 0 {
            return Err(GameError::InvalidConfig(
                "max_iterations must be at least 1".into(),
            ));
        }
        if !(self.tolerance > 0.0) || !self.tolerance.is_finite() {
            return Err(GameError::InvalidConfig(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        if self.utility_batch < 2 {
            return Err(GameError::InvalidConfig(
                "utility_batch must be at least 2".into(),
            ));
        }
        Ok(())
    }
}

/// Settings of the two utility estimators.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UtilityConfig {
    pub ksg: KsgConfig,
    pub kl: HistogramKlConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based outer iteration.
    pub iteration: usize,
    pub utility_robot: f64,
    pub utility_human: f64,
    pub objective: f64,
    pub leader_loss: f64,
    pub follower_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameReport {
    pub records: Vec<IterationRecord>,
    pub converged: bool,
    pub iterations_used: usize,
}

/// Parameters of both networks after an outer iteration (0 = initial).
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub iteration: usize,
    pub leader: MlpParams,
    pub follower: MlpParams,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub leader: Predictor,
    pub follower: Predictor,
    pub report: GameReport,
    /// `iterations_used + 1` entries.
    pub snapshots: Vec<Snapshot>,
}

/// Sum over feature axes of the histogram KL from actual to predicted.
pub fn utility_robot(
    actual: &[Features],
    predicted: &[Features],
    cfg: &HistogramKlConfig,
) -> Result<f64, GameError> {
    check_batches(actual, predicted)?;
    let mut total = 0.0;
    for k in 0..FEATURE_COUNT {
        let a: Vec<f64> = actual.iter().map(|f| f[k]).collect();
        let p: Vec<f64> = predicted.iter().map(|f| f[k]).collect();
        total += histogram_kl(&a, &p, cfg)?;
    }
    Ok(total)
}

/// Relative size of the dither used to break exact ties before the k-NN
/// estimate; far below any physical resolution.
const TIE_DITHER: f64 = 1e-9;

/// Mutual information between actual and predicted samples, summed over
/// feature axes.
///
/// An axis on which either side is constant carries no information and
/// contributes zero. Axes with repeated values (for example deadband holds)
/// are re-estimated after a fixed, seeded dither of `1e-9` times the axis
/// range, since exact ties make neighbour distances vanish.
pub fn utility_human(
    actual: &[Features],
    predicted: &[Features],
    cfg: &KsgConfig,
) -> Result<f64, GameError> {
    check_batches(actual, predicted)?;
    if actual.len() <= cfg.k {
        return Err(MetricsError::TooFewSamples {
            n: actual.len(),
            k: cfg.k,
        }
        .into());
    }
    let mut total = 0.0;
    for k in 0..FEATURE_COUNT {
        let mut a: Vec<f64> = actual.iter().map(|f| f[k]).collect();
        let mut p: Vec<f64> = predicted.iter().map(|f| f[k]).collect();
        let (ra, rp) = (range(&a), range(&p));
        if ra == 0.0 || rp == 0.0 {
            continue;
        }
        total += match ksg_pair_mi(&a, &p, 1, cfg) {
            Err(MetricsError::DegenerateData { .. }) => {
                let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
                for v in a.iter_mut() {
                    *v += TIE_DITHER * ra * (rng.random::<f64>() - 0.5);
                }
                for v in p.iter_mut() {
                    *v += TIE_DITHER * rp * (rng.random::<f64>() - 0.5);
                }
                ksg_pair_mi(&a, &p, 1, cfg)?
            }
            other => other?,
        };
    }
    Ok(total)
}

fn check_batches(actual: &[Features], predicted: &[Features]) -> Result<(), GameError> {
    if actual.len() != predicted.len() {
        return Err(MetricsError::LengthMismatch(actual.len(), predicted.len()).into());
    }
    if actual.len() < 2 {
        return Err(GameError::InvalidInput(format!(
            "utility batches need at least 2 samples, got {}",
            actual.len()
        )));
    }
    Ok(())
}

fn range(v: &[f64]) -> f64 {
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    hi - lo
}

/// `U_H - U_R`.
pub fn minimax_objective(utility_human: f64, utility_robot: f64) -> f64 {
    utility_human - utility_robot
}

/// `count` row indices spread evenly over `0..len`.
pub fn even_rows(len: usize, count: usize) -> Vec<usize> {
    let m = count.min(len);
    (0..m).map(|i| i * len / m).collect()
}

struct Side {
    predictor: Predictor,
    net: MlpParams,
    momentum: MomentumState,
    data: WindowDataset,
    dropout: f64,
}

impl Side {
    fn new(predictor: Predictor, train: &Trace, dropout: f64) -> Result<Self, GameError> {
        let data = predictor.dataset(train)?;
        let net = predictor.net().clone();
        Ok(Self {
            momentum: MomentumState::new(&net),
            predictor,
            net,
            data,
            dropout,
        })
    }

    fn steps(
        &mut self,
        n: usize,
        sgd: &SgdConfig,
        batch_rng: &mut ChaCha8Rng,
        dropout_rng: &mut ChaCha8Rng,
        iteration: usize,
    ) -> Result<(), GameError> {
        for _ in 0..n {
            let rows: Vec<usize> = (0..sgd.batch_size)
                .map(|_| batch_rng.random_range(0..self.data.len()))
                .collect();
            let masks = if self.dropout > 0.0 {
                Some(
                    rows.iter()
                        .map(|_| DropoutMask::sample(&self.net, self.dropout, dropout_rng))
                        .collect::<Result<Vec<_>, _>>()?,
                )
            } else {
                None
            };
            let (loss, grads) = mse_gradient(&self.net, &self.data, &rows, masks.as_deref())?;
            if !loss.is_finite() {
                return Err(GameError::NonFiniteLoss { iteration });
            }
            sgd_step(&mut self.net, &grads, &mut self.momentum, sgd)?;
            if !self.net.is_finite() {
                return Err(GameError::NonFiniteLoss { iteration });
            }
        }
        Ok(())
    }

    fn finish(self) -> Result<Predictor, GameError> {
        Ok(self.predictor.with_net(self.net)?)
    }
}

/// One-step predictions of `predictor` for every window of `features`
/// starting at the given rows, with the matching ground truth.
fn predictions_at(
    predictor: &Predictor,
    features: &[Features],
    rows: &[usize],
) -> Result<(Vec<Features>, Vec<Features>), GameError> {
    let w = predictor.window();
    let mut actual = Vec::with_capacity(rows.len());
    let mut predicted = Vec::with_capacity(rows.len());
    for &r in rows {
        predicted.push(predictor.predict_features(&features[r..r + w])?);
        actual.push(features[r + w]);
    }
    Ok((actual, predicted))
}

/// Freshly initialised leader and follower predictors normalised on
/// `train`. The networks draw their weights from seeds `2 * seed + 1` and
/// `2 * seed + 2`.
pub fn init_predictors(
    network: &NetworkConfig,
    train: &Trace,
    seed: u64,
) -> Result<(Predictor, Predictor), GameError> {
    let base = seed.wrapping_mul(2);
    let leader = network.leader_net(base.wrapping_add(1))?;
    let follower = network.follower_net(base.wrapping_add(2))?;
    Ok((
        Predictor::fitted(leader, network.window, train)?,
        Predictor::fitted(follower, network.window, train)?,
    ))
}

/// Runs the alternating training loop.
///
/// The follower trains with dropout at `sgd.dropout_rate`; the leader
/// without. Minibatches are drawn from `game.seed`, dropout masks from
/// `sgd.seed`, so a run is reproducible bit for bit.
pub fn lefo_train(
    leader: Predictor,
    follower: Predictor,
    train: &Trace,
    holdout: &Trace,
    game: &GameConfig,
    sgd: &SgdConfig,
    utility: &UtilityConfig,
) -> Result<TrainOutcome, GameError> {
    game.validate()?;
    sgd.validate()?;
    utility.kl.validate()?;
    let mut leader = Side::new(leader, train, 0.0)?;
    let mut follower = Side::new(follower, train, sgd.dropout_rate)?;

    let holdout_feats = holdout.features();
    let w = leader.predictor.window().max(follower.predictor.window());
    if holdout_feats.len() <= w + 1 {
        return Err(GameError::InvalidInput(format!(
            "holdout has {} samples, needs more than {}",
            holdout_feats.len(),
            w + 1
        )));
    }
    let holdout_rows =
        |p: &Predictor| even_rows(holdout_feats.len() - p.window(), game.utility_batch);
    let leader_rows = holdout_rows(&leader.predictor);
    let follower_rows = holdout_rows(&follower.predictor);
    let leader_eval = even_rows(leader.data.len(), game.utility_batch);
    let follower_eval = even_rows(follower.data.len(), game.utility_batch);

    let mut batch_rng = ChaCha8Rng::seed_from_u64(game.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(sgd.seed);
    let mut snapshots = vec![Snapshot {
        iteration: 0,
        leader: leader.net.clone(),
        follower: follower.net.clone(),
    }];
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut converged = false;

    for iteration in 1..=game.max_iterations {
        follower.steps(
            game.inner_steps_follower,
            sgd,
            &mut batch_rng,
            &mut dropout_rng,
            iteration,
        )?;
        leader.steps(
            game.inner_steps_leader,
            sgd,
            &mut batch_rng,
            &mut dropout_rng,
            iteration,
        )?;

        let follower_loss = mse_loss(&follower.net, &follower.data, &follower_eval)?;
        let leader_loss = mse_loss(&leader.net, &leader.data, &leader_eval)?;
        if !follower_loss.is_finite() || !leader_loss.is_finite() {
            return Err(GameError::NonFiniteLoss { iteration });
        }

        let follower_now = follower.predictor.with_net(follower.net.clone())?;
        let leader_now = leader.predictor.with_net(leader.net.clone())?;
        let (human, human_hat) = predictions_at(&follower_now, &holdout_feats, &follower_rows)?;
        let (robot, robot_hat) = predictions_at(&leader_now, &holdout_feats, &leader_rows)?;
        let utility_robot = utility_robot(&human, &human_hat, &utility.kl)?;
        let utility_human = utility_human(&robot, &robot_hat, &utility.ksg)?;
        let objective = minimax_objective(utility_human, utility_robot);

        let previous = records.last().map(|r| r.objective);
        records.push(IterationRecord {
            iteration,
            utility_robot,
            utility_human,
            objective,
            leader_loss,
            follower_loss,
        });
        snapshots.push(Snapshot {
            iteration,
            leader: leader.net.clone(),
            follower: follower.net.clone(),
        });
        if let Some(prev) = previous {
            if (objective - prev).abs() < game.tolerance {
                converged = true;
                break;
            }
        }
    }

    let iterations_used = records.len();
    Ok(TrainOutcome {
        leader: leader.finish()?,
        follower: follower.finish()?,
        report: GameReport {
            records,
            converged,
            iterations_used,
        },
        snapshots,
    })
}

/// Which side's predictions an [`AccuracyReport`] scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionSide {
    LeaderPredictingRobot,
    FollowerPredictingHuman,
}

impl PredictionSide {
    pub fn as_str(&self) -> &'static str {
        match self {
            PredictionSide::LeaderPredictingRobot => "leader_predicting_robot",
            PredictionSide::FollowerPredictingHuman => "follower_predicting_human",
        }
    }
}

/// Per-axis accuracy `100 * max(0, 1 - RMSE / range)`, where `range` is the
/// peak-to-peak span of the ground truth. Axes with zero range are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub side: PredictionSide,
    pub metric: String,
    pub accuracy: [Option<f64>; FEATURE_COUNT],
    /// Root-mean-square error per axis, in the axis' physical unit.
    pub rmse: Features,
    /// Peak-to-peak ground-truth range per axis.
    pub range: Features,
    pub samples: usize,
}

impl AccuracyReport {
    /// Mean accuracy over the applicable axes.
    pub fn mean_accuracy(&self) -> Option<f64> {
        mean(self.accuracy.iter().flatten().copied())
    }

    /// Mean of `RMSE / range` over the applicable axes.
    pub fn mean_nrmse(&self) -> Option<f64> {
        mean(
            self.rmse
                .iter()
                .zip(&self.range)
                .filter(|(_, r)| **r > 0.0)
                .map(|(e, r)| e / r),
        )
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Scores predictions against ground truth sample by sample.
pub fn accuracy_from_predictions(
    actual: &[Features],
    predicted: &[Features],
    side: PredictionSide,
) -> Result<AccuracyReport, GameError> {
    if actual.len() != predicted.len() {
        return Err(MetricsError::LengthMismatch(actual.len(), predicted.len()).into());
    }
    if actual.is_empty() {
        return Err(GameError::InvalidInput("no samples to score".into()));
    }
    let n = actual.len() as f64;
    let mut accuracy = [None; FEATURE_COUNT];
    let mut rmse = [0.0; FEATURE_COUNT];
    let mut ranges = [0.0; FEATURE_COUNT];
    for k in 0..FEATURE_COUNT {
        let truth: Vec<f64> = actual.iter().map(|f| f[k]).collect();
        let sq: f64 = actual
            .iter()
            .zip(predicted)
            .map(|(a, p)| (a[k] - p[k]).powi(2))
            .sum();
        rmse[k] = (sq / n).sqrt();
        ranges[k] = range(&truth);
        if ranges[k] > 0.0 {
            accuracy[k] = Some(100.0 * (1.0 - rmse[k] / ranges[k]).max(0.0));
        }
    }
    Ok(AccuracyReport {
        side,
        metric: ACCURACY_METRIC.to_string(),
        accuracy,
        rmse,
        range: ranges,
        samples: actual.len(),
    })
}

/// One-step-ahead accuracy of `predictor` over every window of `test`.
pub fn evaluate_accuracy(
    predictor: &Predictor,
    test: &Trace,
    side: PredictionSide,
) -> Result<AccuracyReport, GameError> {
    let feats = test.features();
    let w = predictor.window();
    if feats.len() <= w {
        return Err(PredictorError::InsufficientHistory {
            needed: w + 1,
            got: feats.len(),
        }
        .into());
    }
    let rows: Vec<usize> = (0..feats.len() - w).collect();
    let (actual, predicted) = predictions_at(predictor, &feats, &rows)?;
    accuracy_from_predictions(&actual, &predicted, side)
}

pub fn write_game_report_json(
    report: &GameReport,
    path: impl AsRef<Path>,
) -> Result<(), GameError> {
    std::fs::write(path, serde_json::to_vec_pretty(report)?)?;
    Ok(())
}

pub fn read_game_report_json(path: impl AsRef<Path>) -> Result<GameReport, GameError> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

/// One row per iteration.
pub fn write_game_report_csv<W: Write>(report: &GameReport, out: W) -> Result<(), GameError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "iteration",
        "utility_robot",
        "utility_human",
        "objective",
        "leader_loss",
        "follower_loss",
    ])?;
    for r in &report.records {
        w.write_record([
            r.iteration.to_string(),
            r.utility_robot.to_string(),
            r.utility_human.to_string(),
            r.objective.to_string(),
            r.leader_loss.to_string(),
            r.follower_loss.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per feature axis; not-applicable accuracies are left empty.
pub fn write_accuracy_csv<W: Write>(reports: &[AccuracyReport], out: W) -> Result<(), GameError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "side", "metric", "axis", "accuracy", "rmse", "range", "samples",
    ])?;
    for rep in reports {
        for k in 0..FEATURE_COUNT {
            w.write_record([
                rep.side.as_str().to_string(),
                rep.metric.clone(),
                FEATURE_NAMES[k].to_string(),
                rep.accuracy[k].map(|a| a.to_string()).unwrap_or_default(),
                rep.rmse[k].to_string(),
                rep.range[k].to_string(),
                rep.samples.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
