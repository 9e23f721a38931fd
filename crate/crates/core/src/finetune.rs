//! Supervised fine-tuning: minibatch SGD over partitions, frame-error
//! evaluation, and the validation-driven learning-rate schedule parsed from
//! strings like "D:0.08:0.5:0.05,0.05:15".

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::data::DataSource;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::network::{one_hot, Network};
use crate::rng::SeededRng;

/// Learning-rate schedule.
///
/// Decay mode ("D:start:scale:decay,stop:max") holds the rate constant
/// until the per-epoch validation improvement falls below
/// `decay_threshold`, then multiplies it by `scale_by` every epoch and
/// stops once improvement falls below `stop_threshold` (or at the epoch
/// cap). Constant mode ("C:lr:epochs") runs a fixed rate for a fixed
/// number of epochs. Improvements are absolute frame-error percentage
/// points.
#[derive(Clone, Debug, PartialEq)]
pub enum LrSchedule {
    Decay {
        start_lr: f64,
        scale_by: f64,
        decay_threshold: f64,
        stop_threshold: f64,
        max_epochs: usize,
    },
    Constant {
        lr: f64,
        epochs: usize,
    },
}

impl LrSchedule {
    pub fn start_lr(&self) -> f64 {
        match self {
            LrSchedule::Decay { start_lr, .. } => *start_lr,
            LrSchedule::Constant { lr, .. } => *lr,
        }
    }

    pub fn max_epochs(&self) -> usize {
        match self {
            LrSchedule::Decay { max_epochs, .. } => *max_epochs,
            LrSchedule::Constant { epochs, .. } => *epochs,
        }
    }
}

fn parse_field<T: core::str::FromStr>(
    token: &str,
    position: usize,
    what: &'static str,
) -> Result<T> {
    token.trim().parse().map_err(|_| Error::Parse {
        what,
        position,
        message: format!("'{token}' is not a number"),
    })
}

/// Parses a learning-rate schedule string.
///
/// "D:0.08:0.5:0.05,0.05:15" reads: start at 0.08; once validation
/// improvement drops below 0.05 points, halve each epoch; stop when it
/// drops below 0.05 during decay, or after 15 epochs. "C:0.01:5" is a
/// constant 0.01 for exactly 5 epochs.
pub fn parse_lrate_spec(text: &str) -> Result<LrSchedule> {
    const WHAT: &str = "learning-rate spec";
    let fields: Vec<&str> = text.split(':').collect();
    match fields.first().map(|s| s.trim()) {
        Some("D") => {
            if fields.len() != 5 {
                return Err(Error::Parse {
                    what: WHAT,
                    position: fields.len().saturating_sub(1),
                    message: format!(
                        "decay schedule needs 5 ':'-separated fields, got {}",
                        fields.len()
                    ),
                });
            }
            let start_lr: f64 = parse_field(fields[1], 1, WHAT)?;
            let scale_by: f64 = parse_field(fields[2], 2, WHAT)?;
            let thresholds: Vec<&str> = fields[3].split(',').collect();
            if thresholds.len() != 2 {
                return Err(Error::Parse {
                    what: WHAT,
                    position: 3,
                    message: format!(
                        "expected 'decay,stop' threshold pair, got '{}'",
                        fields[3]
                    ),
                });
            }
            let decay_threshold: f64 = parse_field(thresholds[0], 3, WHAT)?;
            let stop_threshold: f64 = parse_field(thresholds[1], 3, WHAT)?;
            let max_epochs: usize = parse_field(fields[4], 4, WHAT)?;
            if start_lr <= 0.0 {
                return Err(Error::Domain(format!("start lr {start_lr} must be > 0")));
            }
            if !(0.0..1.0).contains(&scale_by) || scale_by == 0.0 {
                return Err(Error::Domain(format!(
                    "scale factor {scale_by} must lie in (0, 1)"
                )));
            }
            if decay_threshold < 0.0 || stop_threshold < 0.0 {
                return Err(Error::Domain(String::from("thresholds must be >= 0")));
            }
            if max_epochs == 0 {
                return Err(Error::Domain(String::from("max epochs must be >= 1")));
            }
            Ok(LrSchedule::Decay {
                start_lr,
                scale_by,
                decay_threshold,
                stop_threshold,
                max_epochs,
            })
        }
        Some("C") => {
            if fields.len() != 3 {
                return Err(Error::Parse {
                    what: WHAT,
                    position: fields.len().saturating_sub(1),
                    message: format!(
                        "constant schedule needs 3 ':'-separated fields, got {}",
                        fields.len()
                    ),
                });
            }
            let lr: f64 = parse_field(fields[1], 1, WHAT)?;
            let epochs: usize = parse_field(fields[2], 2, WHAT)?;
            if lr <= 0.0 {
                return Err(Error::Domain(format!("lr {lr} must be > 0")));
            }
            if epochs == 0 {
                return Err(Error::Domain(String::from("epochs must be >= 1")));
            }
            Ok(LrSchedule::Constant { lr, epochs })
        }
        other => Err(Error::Parse {
            what: WHAT,
            position: 0,
            message: format!("unknown schedule mode '{}'", other.unwrap_or("")),
        }),
    }
}

/// Phase of the schedule automaton. Transitions are one-way:
/// initial -> decaying -> stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Initial,
    Decaying,
    Stopped,
}

/// Mutable training progress the schedule drives.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub current_lr: f64,
    pub phase: Phase,
    /// Validation frame-error percentages, one entry per finished epoch.
    pub error_history: Vec<f64>,
}

impl TrainState {
    pub fn new(schedule: &LrSchedule) -> Self {
        TrainState {
            epoch: 0,
            current_lr: schedule.start_lr(),
            phase: Phase::Initial,
            error_history: Vec::new(),
        }
    }
}

/// Outcome of consulting the schedule after an epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrDecision {
    /// Train another epoch at this rate.
    Continue(f64),
    Stop,
}

/// Advances the automaton after an epoch whose validation error has been
/// pushed onto `state.error_history`, and decides whether to continue.
pub fn next_lr(schedule: &LrSchedule, state: &mut TrainState) -> LrDecision {
    if state.phase == Phase::Stopped {
        return LrDecision::Stop;
    }
    if state.epoch >= schedule.max_epochs() {
        state.phase = Phase::Stopped;
        return LrDecision::Stop;
    }
    match schedule {
        LrSchedule::Constant { lr, .. } => LrDecision::Continue(*lr),
        LrSchedule::Decay {
            scale_by,
            decay_threshold,
            stop_threshold,
            ..
        } => {
            let improvement = match state.error_history.len() {
                0 | 1 => f64::INFINITY,
                n => state.error_history[n - 2] - state.error_history[n - 1],
            };
            match state.phase {
                Phase::Initial => {
                    if improvement < *decay_threshold {
                        state.phase = Phase::Decaying;
                        state.current_lr *= scale_by;
                    }
                    LrDecision::Continue(state.current_lr)
                }
                Phase::Decaying => {
                    if improvement < *stop_threshold {
                        state.phase = Phase::Stopped;
                        LrDecision::Stop
                    } else {
                        state.current_lr *= scale_by;
                        LrDecision::Continue(state.current_lr)
                    }
                }
                Phase::Stopped => LrDecision::Stop,
            }
        }
    }
}

/// Aggregates of one epoch, as reported in the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub mean_train_xent: f64,
    pub train_fer: f64,
    pub valid_fer: f64,
    pub wall_secs: f64,
}

impl EpochStats {
    /// Stable per-epoch log line:
    /// `epoch <n> lr <lr> train-xent <x> train-fer <f>% valid-fer <v>%`.
    pub fn log_line(&self, epoch: usize, lr: f64) -> String {
        format!(
            "epoch {epoch} lr {lr} train-xent {:.6} train-fer {:.2}% valid-fer {:.2}%",
            self.mean_train_xent, self.train_fer, self.valid_fer
        )
    }
}

/// Totals of one SGD pass over the training data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdPassStats {
    pub mean_xent: f64,
    pub train_fer: f64,
    pub frames: usize,
}

/// Mean cross-entropy of posterior rows against integer labels.
pub fn cross_entropy_mean(posteriors: &Matrix, labels: &[u32]) -> Result<f64> {
    if labels.len() != posteriors.rows() {
        return Err(Error::Data(format!(
            "{} labels for {} rows",
            labels.len(),
            posteriors.rows()
        )));
    }
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let p = posteriors.get(i, label as usize).max(1e-300);
        total -= libm::log(p);
    }
    Ok(total / labels.len() as f64)
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn row_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Number of rows whose argmax disagrees with the label.
pub fn frame_error_count(posteriors: &Matrix, labels: &[u32]) -> Result<usize> {
    if labels.len() != posteriors.rows() {
        return Err(Error::Data(format!(
            "{} labels for {} rows",
            labels.len(),
            posteriors.rows()
        )));
    }
    let mut errors = 0;
    for (i, &label) in labels.iter().enumerate() {
        if row_argmax(posteriors.row(i)) != label as usize {
            errors += 1;
        }
    }
    Ok(errors)
}

/// Frame error rate in percent.
pub fn frame_error_rate(posteriors: &Matrix, labels: &[u32]) -> Result<f64> {
    if posteriors.rows() == 0 {
        return Err(Error::Domain(String::from(
            "frame error rate of empty data",
        )));
    }
    Ok(100.0 * frame_error_count(posteriors, labels)? as f64 / posteriors.rows() as f64)
}

fn check_labels(net: &Network, chunk: &crate::data::LabeledFrames) -> Result<()> {
    let classes = net.num_classes() as u32;
    for (&label, &(utt, frame)) in chunk.labels.iter().zip(&chunk.ids) {
        if label >= classes {
            return Err(Error::Data(format!(
                "label {label} out of range (targets: {classes}) at utterance {utt} frame {frame}"
            )));
        }
    }
    Ok(())
}

/// One SGD pass over all partitions of `source`.
///
/// Per minibatch: train-mode forward, backward, then
/// `params -= lr * grad`. A final short batch is processed like any other.
/// Statistics are aggregated over the whole pass.
pub fn sgd_epoch(
    net: &mut Network,
    source: &mut dyn DataSource,
    lr: f64,
    batch_size: usize,
    rng: &mut SeededRng,
) -> Result<SgdPassStats> {
    if batch_size == 0 {
        return Err(Error::Domain(String::from("batch size must be positive")));
    }
    let mut total_xent = 0.0;
    let mut total_errors = 0usize;
    let mut frames = 0usize;
    source.start_pass()?;
    while let Some(chunk) = source.next_partition()? {
        check_labels(net, &chunk)?;
        let rows = chunk.features.rows();
        let mut start = 0;
        while start < rows {
            let end = (start + batch_size).min(rows);
            let batch = chunk.features.slice_rows(start, end);
            let labels = &chunk.labels[start..end];
            let cache = net.forward_train(&batch, rng)?;
            total_xent += cross_entropy_mean(cache.posteriors(), labels)? * labels.len() as f64;
            total_errors += frame_error_count(cache.posteriors(), labels)?;
            frames += labels.len();
            let targets = one_hot(labels, net.num_classes(), labels.len())?;
            let grads = net.backward(&cache, &targets)?;
            net.apply_gradients(&grads, lr)?;
            start = end;
        }
    }
    if frames == 0 {
        return Err(Error::Domain(String::from("training data is empty")));
    }
    Ok(SgdPassStats {
        mean_xent: total_xent / frames as f64,
        train_fer: 100.0 * total_errors as f64 / frames as f64,
        frames,
    })
}

/// Validation frame-error percentage in inference mode (dropout-scaled).
pub fn evaluate(net: &Network, source: &mut dyn DataSource) -> Result<f64> {
    let mut errors = 0usize;
    let mut frames = 0usize;
    source.start_pass()?;
    while let Some(chunk) = source.next_partition()? {
        check_labels(net, &chunk)?;
        let cache = net.forward_infer(&chunk.features)?;
        errors += frame_error_count(cache.posteriors(), &chunk.labels)?;
        frames += chunk.labels.len();
    }
    if frames == 0 {
        return Err(Error::Domain(String::from("evaluation data is empty")));
    }
    Ok(100.0 * errors as f64 / frames as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LabeledFrames, MemorySource};
    use crate::network::{init_network, parse_nnet_spec, NetOptions};

    #[test]
    fn parse_paper_schedule() {
        let s = parse_lrate_spec("D:0.08:0.5:0.05,0.05:15").unwrap();
        assert_eq!(
            s,
            LrSchedule::Decay {
                start_lr: 0.08,
                scale_by: 0.5,
                decay_threshold: 0.05,
                stop_threshold: 0.05,
                max_epochs: 15,
            }
        );
    }

    #[test]
    fn parse_constant_schedule() {
        let s = parse_lrate_spec("C:0.01:5").unwrap();
        assert_eq!(
            s,
            LrSchedule::Constant {
                lr: 0.01,
                epochs: 5
            }
        );
    }

    #[test]
    fn parse_rejects_missing_threshold_pair() {
        match parse_lrate_spec("D:0.08:0.5:0.05:15") {
            Err(Error::Parse { position, .. }) => assert_eq!(position, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(parse_lrate_spec("X:1:2").is_err());
        assert!(parse_lrate_spec("C:0.01").is_err());
        assert!(parse_lrate_spec("D:0.08:0.5:0.05,q:15").is_err());
    }

    fn drive(schedule: &LrSchedule, errors: &[f64]) -> (Vec<f64>, TrainState) {
        let mut state = TrainState::new(schedule);
        let mut lrs = Vec::new();
        for &err in errors {
            lrs.push(state.current_lr);
            state.epoch += 1;
            state.error_history.push(err);
            match next_lr(schedule, &mut state) {
                LrDecision::Continue(lr) => state.current_lr = lr,
                LrDecision::Stop => break,
            }
        }
        (lrs, state)
    }

    #[test]
    fn big_improvement_keeps_initial_rate() {
        let s = parse_lrate_spec("D:0.08:0.5:0.05,0.05:15").unwrap();
        let (lrs, state) = drive(&s, &[50.0, 45.0]);
        assert_eq!(lrs, vec![0.08, 0.08]);
        assert_eq!(state.phase, Phase::Initial);
        assert_eq!(state.current_lr, 0.08);
    }

    #[test]
    fn small_improvement_enters_decay() {
        let s = parse_lrate_spec("D:0.08:0.5:0.05,0.05:15").unwrap();
        let (_, state) = drive(&s, &[50.0, 45.0, 44.96]);
        assert_eq!(state.phase, Phase::Decaying);
        assert!((state.current_lr - 0.04).abs() < 1e-15);
    }

    #[test]
    fn epoch_cap_stops_regardless_of_improvement() {
        let s = parse_lrate_spec("D:0.08:0.5:0.05,0.05:15").unwrap();
        let errors: Vec<f64> = (0..20).map(|i| 50.0 - 5.0 * i as f64).collect();
        let (lrs, state) = drive(&s, &errors);
        assert_eq!(lrs.len(), 15);
        assert_eq!(state.phase, Phase::Stopped);
    }

    #[test]
    fn stop_threshold_ends_decay() {
        let s = parse_lrate_spec("D:0.08:0.5:0.05,0.05:15").unwrap();
        // epoch 3 improvement 0.04 -> decay; epoch 4 improvement 0.01 -> stop
        let (lrs, state) = drive(&s, &[50.0, 45.0, 44.96, 44.95, 44.94]);
        assert_eq!(lrs, vec![0.08, 0.08, 0.08, 0.04]);
        assert_eq!(state.phase, Phase::Stopped);
    }

    #[test]
    fn constant_runs_exactly_n_epochs() {
        let s = parse_lrate_spec("C:0.01:3").unwrap();
        let (lrs, _) = drive(&s, &[50.0, 49.0, 48.0, 47.0, 46.0]);
        assert_eq!(lrs, vec![0.01, 0.01, 0.01]);
    }

    fn toy_source() -> MemorySource {
        // Two linearly separable blobs in 2-D.
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let (cx, label) = if i % 2 == 0 { (-2.0, 0u32) } else { (2.0, 1u32) };
            let off = (i as f64 * 0.13).sin() * 0.5;
            rows.push(vec![cx + off, off]);
            labels.push(label);
        }
        let ids = (0..40).map(|i| (0u32, i as u32)).collect();
        let frames =
            LabeledFrames::new(Matrix::from_rows(&rows).unwrap(), labels, ids).unwrap();
        MemorySource::new(frames)
    }

    #[test]
    fn sgd_with_zero_lr_changes_nothing_but_reports_stats() {
        let spec = parse_nnet_spec("2:4:2", &NetOptions::default()).unwrap();
        let mut net = init_network(&spec, &mut SeededRng::new(3)).unwrap();
        let before = net.clone();
        let mut rng = SeededRng::new(4);
        let stats = sgd_epoch(&mut net, &mut toy_source(), 0.0, 8, &mut rng).unwrap();
        assert_eq!(stats.frames, 40);
        assert!(stats.mean_xent > 0.0);
        assert_eq!(net.output_weights(), before.output_weights());
        match (&net.layers()[0], &before.layers()[0]) {
            (crate::network::Layer::Dense(a), crate::network::Layer::Dense(b)) => {
                assert_eq!(a.weights, b.weights)
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn sgd_single_step_matches_manual_update() {
        let spec = parse_nnet_spec("2:3:2", &NetOptions::default()).unwrap();
        let mut net = init_network(&spec, &mut SeededRng::new(5)).unwrap();
        let mut manual = net.clone();

        let features = Matrix::from_rows(&[vec![0.3, -0.7], vec![1.1, 0.2]]).unwrap();
        let labels = vec![0u32, 1u32];
        let frames = LabeledFrames::new(features.clone(), labels.clone(), vec![(0, 0); 2]).unwrap();
        let mut source = MemorySource::new(frames);

        let mut rng = SeededRng::new(6);
        sgd_epoch(&mut net, &mut source, 0.2, 8, &mut rng).unwrap();

        let mut rng2 = SeededRng::new(6);
        let cache = manual.forward_train(&features, &mut rng2).unwrap();
        let grads = manual.backward_labels(&cache, &labels).unwrap();
        manual.apply_gradients(&grads, 0.2).unwrap();

        assert_eq!(net.output_weights(), manual.output_weights());
        assert_eq!(net.output_bias(), manual.output_bias());
    }

    #[test]
    fn sgd_determinism_two_runs_bit_identical() {
        let spec = parse_nnet_spec("2:5:2", &NetOptions::default()).unwrap();
        let run = || {
            let mut net = init_network(&spec, &mut SeededRng::new(8)).unwrap();
            let mut rng = SeededRng::new(9);
            for _ in 0..3 {
                sgd_epoch(&mut net, &mut toy_source(), 0.1, 8, &mut rng).unwrap();
            }
            net
        };
        let a = run();
        let b = run();
        assert_eq!(a.output_weights(), b.output_weights());
        assert_eq!(a.output_bias(), b.output_bias());
    }

    #[test]
    fn out_of_range_label_names_the_record() {
        let spec = parse_nnet_spec("2:3:2", &NetOptions::default()).unwrap();
        let mut net = init_network(&spec, &mut SeededRng::new(5)).unwrap();
        let frames = LabeledFrames::new(
            Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap(),
            vec![7],
            vec![(3, 11)],
        )
        .unwrap();
        let mut source = MemorySource::new(frames);
        let mut rng = SeededRng::new(1);
        let err = sgd_epoch(&mut net, &mut source, 0.1, 4, &mut rng).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("label 7"), "{msg}");
        assert!(msg.contains("utterance 3"), "{msg}");
        assert!(msg.contains("frame 11"), "{msg}");
    }

    #[test]
    fn evaluate_constant_predictor() {
        // Output bias forces class 0 regardless of input.
        let spec = parse_nnet_spec("2:2:2", &NetOptions::default()).unwrap();
        let mut net = init_network(&spec, &mut SeededRng::new(1)).unwrap();
        let mut grads_like = net.clone();
        let _ = &mut grads_like;
        // Setting an extreme bias through the gradient interface keeps the
        // version counter honest.
        let cache_batch = Matrix::zeros(1, 2);
        let mut rng = SeededRng::new(2);
        let cache = net.forward_train(&cache_batch, &mut rng).unwrap();
        let mut grads = net.backward_labels(&cache, &[0]).unwrap();
        for g in grads.output.bias.iter_mut() {
            *g = 0.0;
        }
        grads.output.bias[0] = -1000.0; // params -= lr * grad
        for layer in grads.layers.iter_mut() {
            layer.weights = layer.weights.scale(0.0);
            for b in layer.bias.iter_mut() {
                *b = 0.0;
            }
        }
        grads.output.weights = grads.output.weights.scale(0.0);
        net.apply_gradients(&grads, 1.0).unwrap();

        let frames = LabeledFrames::new(
            Matrix::from_rows(&[vec![0.5, 0.1], vec![-0.3, 0.9], vec![2.0, -2.0]]).unwrap(),
            vec![0, 0, 0],
            vec![(0, 0), (0, 1), (0, 2)],
        )
        .unwrap();
        let fer = evaluate(&net, &mut MemorySource::new(frames)).unwrap();
        assert_eq!(fer, 0.0);
    }

    #[test]
    fn evaluate_empty_data_is_domain_error() {
        let spec = parse_nnet_spec("2:2:2", &NetOptions::default()).unwrap();
        let net = init_network(&spec, &mut SeededRng::new(1)).unwrap();
        let frames = LabeledFrames::new(Matrix::zeros(0, 2), Vec::new(), Vec::new()).unwrap();
        assert!(matches!(
            evaluate(&net, &mut MemorySource::new(frames)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn uniform_random_net_near_chance_error() {
        // A freshly initialized net on many random 10-class frames sits
        // near 90% error.
        let spec = parse_nnet_spec("4:10", &NetOptions::default()).unwrap();
        let net = init_network(&spec, &mut SeededRng::new(33)).unwrap();
        let mut rng = SeededRng::new(34);
        let n = 100_000;
        let mut rows = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            rows.push(vec![
                rng.next_normal(),
                rng.next_normal(),
                rng.next_normal(),
                rng.next_normal(),
            ]);
            labels.push((rng.next_u64() % 10) as u32);
            let _ = i;
        }
        let frames = LabeledFrames::new(
            Matrix::from_rows(&rows).unwrap(),
            labels,
            alloc::vec![(0, 0); n],
        )
        .unwrap();
        let fer = evaluate(&net, &mut MemorySource::new(frames)).unwrap();
        assert!((fer - 90.0).abs() < 0.5, "fer {fer}");
    }
}
