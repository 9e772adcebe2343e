//! Synthetic skin conductance with known responses.
//!
//! `sc = tonic + Σ aₖ·h(t − onsetₖ) + noise`, with `h` the unit-peak
//! biexponential kernel, so each injected amplitude equals the phasic rise
//! of an isolated response.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use super::session::SessionRun;
use super::{rng_stream, SimEventKind};
use crate::annotation::{LabelTaxonomy, Mark, IMMERSION, UNKNOWN};
use crate::decomposition::ImpulseResponse;
use crate::error::Result;
use crate::scr::{GroundTruthRow, ScrEvent};
use crate::segmentation::{attach_segments, CrossingGeometry, Segment, Trajectory};
use crate::signal::{EdaTrace, RAW_RATE_HZ};

/// Response tail rendered after each onset, seconds.
const RESPONSE_SPAN_S: f64 = 40.0;

/// Physiology and reactivity of one synthetic participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParticipantProfile {
    pub participant_id: String,
    /// Tonic level at the start of each session, µS.
    pub baseline_us: f64,
    pub tonic_knot_s: f64,
    /// Random-walk step of the tonic per knot, µS.
    pub tonic_step_sd: f64,
    /// Additive white noise at 100 Hz, µS.
    pub noise_sd: f64,
    /// Multiplier on every response amplitude.
    pub reactivity: f64,
    /// Stimulus-to-onset delay and its uniform jitter, seconds.
    pub latency_s: f64,
    pub latency_jitter_s: f64,
    /// Log-scale spread of amplitudes around the label median.
    pub amplitude_log_sd: f64,
    /// Median amplitude (µS) per label id; unlisted labels use `Unknown`.
    pub label_amplitudes: BTreeMap<String, f64>,
    /// Amplitude multiplier for onsets inside the roadway.
    pub crossing_gain: f64,
    /// Stimuli whose onset falls this close to the previous onset are dropped.
    pub refractory_s: f64,
    /// Chance that a passing vehicle elicits a response.
    pub pass_response_prob: f64,
    pub immersion_prob: f64,
    pub spontaneous_per_min: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub age_group: Option<String>,
    pub gender: Option<String>,
}

impl Default for ParticipantProfile {
    fn default() -> Self {
        let label_amplitudes = [
            (IMMERSION, 0.35),
            ("AvatarsAction", 0.30),
            ("TrafficSpeed", 0.28),
            ("CheckingFarSideTraffic", 0.25),
            ("HesitationToCross", 0.28),
            ("DecisionToCross", 0.30),
            ("Crossing", 0.40),
            ("FearOfAccident", 0.85),
            ("Accident", 1.10),
            (UNKNOWN, 0.25),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Self {
            participant_id: "P01".into(),
            baseline_us: 4.0,
            tonic_knot_s: 10.0,
            tonic_step_sd: 0.03,
            noise_sd: 0.02,
            reactivity: 1.0,
            latency_s: 1.5,
            latency_jitter_s: 0.3,
            amplitude_log_sd: 0.2,
            label_amplitudes,
            crossing_gain: 1.8,
            refractory_s: 3.0,
            pass_response_prob: 0.15,
            immersion_prob: 0.6,
            spontaneous_per_min: 0.0,
            tau1: crate::decomposition::DEFAULT_TAU1,
            tau2: crate::decomposition::DEFAULT_TAU2,
            age_group: None,
            gender: None,
        }
    }
}

impl ParticipantProfile {
    pub fn label_amplitude(&self, label: &str) -> f64 {
        self.label_amplitudes
            .get(label)
            .or_else(|| self.label_amplitudes.get(UNKNOWN))
            .copied()
            .unwrap_or(0.25)
    }

    pub fn impulse(&self) -> Result<ImpulseResponse> {
        ImpulseResponse::new(self.tau1, self.tau2)
    }
}

/// Something the participant reacts to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stimulus {
    pub unix: f64,
    pub label: String,
    /// Context multiplier on the label's amplitude.
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectedScr {
    pub stimulus_unix: f64,
    pub onset_unix: f64,
    pub peak_unix: f64,
    pub amplitude: f64,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEda {
    pub trace: EdaTrace,
    pub injected: Vec<InjectedScr>,
}

/// Labelled stimuli of a session, in time order. Vehicle passes respond at
/// random; the label of a pass depends on where the agent stands.
pub fn stimuli_for_session(run: &SessionRun, profile: &ParticipantProfile, rng: &mut ChaCha8Rng) -> Vec<Stimulus> {
    let track = run.trajectory.participant_track();
    let geom = &run.geometry;
    let segment_at = |unix: f64| -> Option<Segment> {
        let i = track.partition_point(|p| p.0 < unix).min(track.len().saturating_sub(1));
        let j = i.saturating_sub(1);
        let k = if (track.get(j)?.0 - unix).abs() <= (track.get(i)?.0 - unix).abs() { j } else { i };
        geom.segment_of(track[k].1, track[k].2)
    };
    let mut raw: Vec<(f64, String)> = Vec::new();
    if rng.random::<f64>() < profile.immersion_prob {
        raw.push((run.start_unix + rng.random_range(0.5..2.0), IMMERSION.into()));
    }
    if profile.spontaneous_per_min > 0.0 {
        let gaps = Exp::new(profile.spontaneous_per_min / 60.0).expect("positive rate");
        let mut t = run.start_unix + gaps.sample(rng);
        while t < run.task_end_unix {
            raw.push((t, UNKNOWN.into()));
            t += gaps.sample(rng);
        }
    }
    for e in &run.events {
        let stim = match e.kind {
            SimEventKind::VehiclePass => {
                if rng.random::<f64>() >= profile.pass_response_prob {
                    continue;
                }
                let label = match (segment_at(e.unix), e.field("lane")) {
                    (Some(Segment::WaitingToCross | Segment::Median), Some("2")) => "CheckingFarSideTraffic",
                    (Some(Segment::WaitingToCross | Segment::Median), _) => "HesitationToCross",
                    _ => "TrafficSpeed",
                };
                (e.unix, label)
            }
            SimEventKind::AvatarStartCross => (e.unix, "AvatarsAction"),
            SimEventKind::PedestrianEnterLane1 => (e.unix - 0.5, "DecisionToCross"),
            SimEventKind::PedestrianEnterLane2 => (e.unix, "Crossing"),
            SimEventKind::NearMiss => (e.unix, "FearOfAccident"),
            SimEventKind::Accident => (e.unix, "Accident"),
            SimEventKind::AvatarFinishCross | SimEventKind::ScreenBlackout => continue,
        };
        raw.push((stim.0, stim.1.to_string()));
    }
    raw.sort_by(|a, b| a.0.total_cmp(&b.0));
    raw.into_iter()
        .map(|(unix, label)| {
            let in_road = segment_at(unix + profile.latency_s).is_some_and(Segment::is_crossing);
            Stimulus { unix, label, gain: if in_road { profile.crossing_gain } else { 1.0 } }
        })
        .collect()
}

/// Draws one response per stimulus (subject to the refractory window and
/// the trace span) and renders the 100 Hz trace over `span`.
pub fn synthesize_eda(
    participant_id: &str,
    session_id: &str,
    span: (f64, f64),
    stimuli: &[Stimulus],
    profile: &ParticipantProfile,
    seed: u64,
) -> Result<SyntheticEda> {
    let mut rng = rng_stream(seed, 4);
    let ir = profile.impulse()?;
    let spread = Normal::new(0.0, profile.amplitude_log_sd.max(0.0)).expect("finite sd");
    let mut injected: Vec<InjectedScr> = Vec::new();
    for s in stimuli {
        let jitter = if profile.latency_jitter_s > 0.0 {
            rng.random_range(-profile.latency_jitter_s..profile.latency_jitter_s)
        } else {
            0.0
        };
        let amplitude =
            profile.label_amplitude(&s.label) * profile.reactivity * s.gain * spread.sample(&mut rng).exp();
        let onset = s.unix + profile.latency_s + jitter;
        if onset < span.0 || onset > span.1 - ir.peak_time() {
            continue;
        }
        // Within the refractory window the label with the larger median wins.
        if let Some(prev) = injected.last() {
            if onset - prev.onset_unix < profile.refractory_s {
                if profile.label_amplitude(&s.label) <= profile.label_amplitude(&prev.label) {
                    continue;
                }
                injected.pop();
            }
        }
        injected.push(InjectedScr {
            stimulus_unix: s.unix,
            onset_unix: onset,
            peak_unix: onset + ir.peak_time(),
            amplitude,
            label: s.label.clone(),
        });
    }
    let trace = render_eda(participant_id, session_id, span, &injected, profile, &mut rng)?;
    Ok(SyntheticEda { trace, injected })
}

/// Tonic random walk plus the given responses plus white noise, at 100 Hz.
pub fn render_eda(
    participant_id: &str,
    session_id: &str,
    span: (f64, f64),
    injected: &[InjectedScr],
    profile: &ParticipantProfile,
    rng: &mut ChaCha8Rng,
) -> Result<EdaTrace> {
    let ir = profile.impulse()?;
    let dt = 1.0 / RAW_RATE_HZ;
    let n = ((span.1 - span.0) * RAW_RATE_HZ + 1e-6).floor() as usize + 1;
    let t: Vec<f64> = (0..n).map(|i| span.0 + i as f64 * dt).collect();

    let knot = profile.tonic_knot_s.max(dt);
    let n_knots = ((span.1 - span.0) / knot).ceil() as usize + 2;
    let step = Normal::new(0.0, profile.tonic_step_sd.max(0.0)).expect("finite sd");
    let mut knots = Vec::with_capacity(n_knots);
    let mut level = profile.baseline_us;
    for _ in 0..n_knots {
        knots.push(level);
        level = (level + step.sample(rng)).abs().max(0.5);
    }
    let mut sc: Vec<f64> = t
        .iter()
        .map(|&ti| {
            let u = (ti - span.0) / knot;
            let k = (u.floor() as usize).min(n_knots - 2);
            let w = (1.0 - (PI * (u - k as f64)).cos()) / 2.0;
            knots[k] * (1.0 - w) + knots[k + 1] * w
        })
        .collect();

    for inj in injected {
        let first = ((inj.onset_unix - span.0) / dt).ceil().max(0.0) as usize;
        let last = (first + (RESPONSE_SPAN_S / dt) as usize).min(n);
        for i in first..last {
            sc[i] += inj.amplitude * ir.value(t[i] - inj.onset_unix);
        }
    }
    let noise = Normal::new(0.0, profile.noise_sd.max(0.0)).expect("finite sd");
    for v in sc.iter_mut() {
        *v = (*v + noise.sample(rng)).max(0.0);
    }
    EdaTrace::new(participant_id, session_id, t, sc, RAW_RATE_HZ)
}

/// Ground-truth rows in the SCR table schema, located on the trajectory.
pub fn ground_truth_rows(
    injected: &[InjectedScr],
    participant_id: &str,
    session_id: &str,
    session_start_unix: f64,
    trajectory: &Trajectory,
    geometry: &CrossingGeometry,
    taxonomy: &LabelTaxonomy,
) -> Vec<GroundTruthRow> {
    let mut events: Vec<ScrEvent> = injected
        .iter()
        .enumerate()
        .map(|(k, inj)| {
            let mut ev =
                ScrEvent::new(participant_id, session_id, k as u32 + 1, inj.onset_unix, inj.peak_unix, inj.amplitude);
            ev.session_start_unix = session_start_unix;
            ev.annotation = Some(Mark::Label(inj.label.clone()));
            ev
        })
        .collect();
    attach_segments(&mut events, trajectory, geometry);
    events
        .iter()
        .zip(injected)
        .map(|(ev, inj)| GroundTruthRow { row: ev.to_row(taxonomy), true_amplitude: inj.amplitude })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::session::{run_pedestrian_agent, PedestrianPolicy};
    use super::super::{ScenarioConfig, SimEvent};
    use super::*;
    use crate::decomposition::decompose;
    use crate::scr::{detect_scrs, DetectionParams};
    use crate::signal::{downsample, gaussian_smooth, DEFAULT_SMOOTH_WINDOW};

    fn detections(trace: &EdaTrace) -> usize {
        let processed = gaussian_smooth(&downsample(trace).unwrap(), DEFAULT_SMOOTH_WINDOW).unwrap();
        let d = decompose(&processed, &ImpulseResponse::default()).unwrap();
        detect_scrs(&d, &DetectionParams::default()).len()
    }

    #[test]
    fn no_stimuli_gives_empty_truth_and_quiet_trace() {
        let profile = ParticipantProfile::default();
        let mut spurious = 0;
        for seed in 0..10 {
            let eda = synthesize_eda("p", "s", (0.0, 60.0), &[], &profile, seed).unwrap();
            assert!(eda.injected.is_empty());
            assert_eq!(eda.trace.len(), 6001);
            spurious += detections(&eda.trace);
        }
        assert!(spurious <= 10, "{spurious} spurious detections in 10 sessions");
    }

    #[test]
    fn five_separated_stimuli_give_five_labelled_responses() {
        let labels = ["Immersion", "AvatarsAction", "DecisionToCross", "Crossing", "FearOfAccident"];
        let stimuli: Vec<Stimulus> = labels
            .iter()
            .enumerate()
            .map(|(k, l)| Stimulus { unix: 100.0 + 8.0 * k as f64, label: l.to_string(), gain: 1.0 })
            .collect();
        let eda = synthesize_eda("p", "s", (95.0, 155.0), &stimuli, &ParticipantProfile::default(), 1).unwrap();
        assert_eq!(eda.injected.iter().map(|i| i.label.as_str()).collect::<Vec<_>>(), labels);
        for (inj, s) in eda.injected.iter().zip(&stimuli) {
            assert!((inj.onset_unix - s.unix - 1.5).abs() <= 0.3 + 1e-12);
        }
    }

    #[test]
    fn accident_gets_the_largest_label_amplitude() {
        let profile = ParticipantProfile { immersion_prob: 0.0, pass_response_prob: 0.0, ..Default::default() };
        let largest = profile.label_amplitudes.iter().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        assert_eq!(largest.0, "Accident");
        let mut run = run_pedestrian_agent(&PedestrianPolicy::default(), &ScenarioConfig::default(), "s", 0.0).unwrap();
        run.events = vec![SimEvent { unix: 20.0, kind: SimEventKind::Accident, payload: String::new() }];
        let stimuli = stimuli_for_session(&run, &profile, &mut rng_stream(1, 3));
        assert_eq!(stimuli.len(), 1);
        let eda = synthesize_eda("p", "s", (0.0, 60.0), &stimuli, &profile, 2).unwrap();
        assert_eq!(eda.injected.len(), 1);
        assert_eq!(eda.injected[0].label, "Accident");
        // Draw stays within three log-sd of the label median.
        let ratio = eda.injected[0].amplitude / (largest.1 * stimuli[0].gain);
        assert!(ratio.ln().abs() < 3.0 * profile.amplitude_log_sd);
    }

    #[test]
    fn injected_amplitude_equals_phasic_rise() {
        let profile = ParticipantProfile { noise_sd: 0.0, tonic_step_sd: 0.0, ..Default::default() };
        let inj = InjectedScr { stimulus_unix: 9.0, onset_unix: 10.0, peak_unix: 0.0, amplitude: 0.7, label: UNKNOWN.into() };
        let trace = render_eda("p", "s", (0.0, 30.0), &[inj], &profile, &mut rng_stream(0, 0)).unwrap();
        let peak = trace.sc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        // Oracle: flat tonic plus a unit-peak kernel sampled at 100 Hz.
        assert!((peak - 4.0 - 0.7).abs() < 1e-4);
    }

    #[test]
    fn refractory_window_drops_crowded_stimuli() {
        let stimuli: Vec<Stimulus> =
            [10.0, 11.0, 20.0].iter().map(|&u| Stimulus { unix: u, label: UNKNOWN.into(), gain: 1.0 }).collect();
        let profile = ParticipantProfile { latency_jitter_s: 0.0, ..Default::default() };
        let eda = synthesize_eda("p", "s", (0.0, 40.0), &stimuli, &profile, 0).unwrap();
        assert_eq!(eda.injected.len(), 2);
    }

    #[test]
    fn ground_truth_rows_carry_labels_and_segments() {
        let run = run_pedestrian_agent(&PedestrianPolicy::default(), &ScenarioConfig::default(), "s1", 1000.0).unwrap();
        let profile = ParticipantProfile::default();
        let inj = vec![InjectedScr {
            stimulus_unix: 1000.5,
            onset_unix: 1001.0,
            peak_unix: 1002.0,
            amplitude: 0.5,
            label: "Immersion".into(),
        }];
        let rows = ground_truth_rows(&inj, &profile.participant_id, "s1", 1000.0, &run.trajectory, &run.geometry, &LabelTaxonomy::default());
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].row.position, Some(Segment::Sidewalk));
        assert_eq!(rows[0].row.annotation, "Immersion");
        assert_eq!(rows[0].row.amp_class, "0.4 ≤ SCR < 0.7");
        assert!((rows[0].row.elapsed_time - 1.0).abs() < 0.051);
    }
}
