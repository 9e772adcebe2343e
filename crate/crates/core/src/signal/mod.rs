//! Electrodermal trace handling: block-mean downsampling, Gaussian smoothing,
//! artifact masking and epoch-time synchronization with trajectories.
//!
//! Raw sensor traces arrive at 100 Hz and are reduced to 10 Hz before any
//! smoothing or decomposition happens.

mod io;

pub use io::{read_artifact_mask, read_eda_csv, write_artifact_mask, write_eda_csv};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmentation::Trajectory;

pub const RAW_RATE_HZ: f64 = 100.0;
pub const PROCESSED_RATE_HZ: f64 = 10.0;
/// Default Gaussian window, in processed (10 Hz) samples.
pub const DEFAULT_SMOOTH_WINDOW: usize = 30;
/// Minimum shared span, in seconds, for synchronizing EDA with a trajectory.
pub const MIN_SYNC_OVERLAP_S: f64 = 5.0;

/// A timestamped skin-conductance series for one participant session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdaTrace {
    pub participant_id: String,
    pub session_id: String,
    /// Epoch seconds.
    pub t: Vec<f64>,
    /// Skin conductance in microsiemens.
    pub sc: Vec<f64>,
    pub rate_hz: f64,
}

impl EdaTrace {
    pub fn new(
        participant_id: impl Into<String>,
        session_id: impl Into<String>,
        t: Vec<f64>,
        sc: Vec<f64>,
        rate_hz: f64,
    ) -> Result<Self> {
        let trace = Self {
            participant_id: participant_id.into(),
            session_id: session_id.into(),
            t,
            sc,
            rate_hz,
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn len(&self) -> usize {
        self.sc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sc.is_empty()
    }

    pub fn start(&self) -> f64 {
        self.t.first().copied().unwrap_or(f64::NAN)
    }

    pub fn end(&self) -> f64 {
        self.t.last().copied().unwrap_or(f64::NAN)
    }

    pub fn duration(&self) -> f64 {
        self.end() - self.start()
    }

    pub fn validate(&self) -> Result<()> {
        if self.t.len() != self.sc.len() {
            return Err(Error::InvalidTrace(format!(
                "{} timestamps but {} samples",
                self.t.len(),
                self.sc.len()
            )));
        }
        if !(self.rate_hz.is_finite() && self.rate_hz > 0.0) {
            return Err(Error::InvalidTrace(format!("bad rate {}", self.rate_hz)));
        }
        if let Some(i) = self.sc.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidTrace(format!(
                "sample {i} is not a finite non-negative conductance ({})",
                self.sc[i]
            )));
        }
        if let Some(i) = self.t.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidTrace(format!("timestamp {i} is not finite")));
        }
        if let Some(i) = self.t.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::InvalidTrace(format!(
                "timestamps decrease at sample {}",
                i + 1
            )));
        }
        Ok(())
    }

    fn with_samples(&self, t: Vec<f64>, sc: Vec<f64>, rate_hz: f64) -> Self {
        Self {
            participant_id: self.participant_id.clone(),
            session_id: self.session_id.clone(),
            t,
            sc,
            rate_hz,
        }
    }

    /// Sample-and-hold upsampling by an integer factor, timestamps spread
    /// evenly around each block center.
    pub fn upsample_hold(&self, factor: usize) -> Self {
        let dt = 1.0 / (self.rate_hz * factor as f64);
        let mut t = Vec::with_capacity(self.len() * factor);
        let mut sc = Vec::with_capacity(self.len() * factor);
        for (&tc, &v) in self.t.iter().zip(&self.sc) {
            for k in 0..factor {
                t.push(tc + (k as f64 - (factor as f64 - 1.0) / 2.0) * dt);
                sc.push(v);
            }
        }
        self.with_samples(t, sc, self.rate_hz * factor as f64)
    }
}

/// Reduces a 100 Hz trace to 10 Hz by averaging consecutive 10-sample blocks.
///
/// Output timestamps are block centers. A trailing partial block is dropped.
pub fn downsample(trace: &EdaTrace) -> Result<EdaTrace> {
    if (trace.rate_hz - RAW_RATE_HZ).abs() > 1e-9 {
        return Err(Error::SampleRate {
            got: trace.rate_hz,
            expected: RAW_RATE_HZ,
        });
    }
    downsample_by(trace, (RAW_RATE_HZ / PROCESSED_RATE_HZ) as usize)
}

pub fn downsample_by(trace: &EdaTrace, factor: usize) -> Result<EdaTrace> {
    assert!(factor > 0, "downsampling factor must be positive");
    if trace.len() < factor {
        return Err(Error::EmptyTrace {
            len: trace.len(),
            needed: factor,
        });
    }
    let block_mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let t: Vec<f64> = trace.t.chunks_exact(factor).map(block_mean).collect();
    let sc: Vec<f64> = trace.sc.chunks_exact(factor).map(block_mean).collect();
    if let Some(i) = t.windows(2).position(|w| w[1] <= w[0]) {
        return Err(Error::InvalidTrace(format!(
            "block timestamps not strictly increasing at block {}",
            i + 1
        )));
    }
    Ok(trace.with_samples(t, sc, trace.rate_hz / factor as f64))
}

/// Normalized, truncated Gaussian kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    weights: Vec<f64>,
    sigma: f64,
}

impl GaussianKernel {
    /// `window` is the nominal support in samples; it is extended to the next
    /// odd length so the kernel is centered. `sigma = window * sigma_fraction`.
    pub fn new(window: usize, sigma_fraction: f64) -> Self {
        let half = window / 2;
        let sigma = (window as f64 * sigma_fraction).max(f64::MIN_POSITIVE);
        let mut weights: Vec<f64> = (0..=2 * half)
            .map(|i| {
                let x = i as f64 - half as f64;
                (-0.5 * (x / sigma).powi(2)).exp()
            })
            .collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Self { weights, sigma }
    }

    /// Default kernel: `sigma = window / 6`, i.e. the window spans +-3 sigma.
    pub fn with_window(window: usize) -> Self {
        Self::new(window, 1.0 / 6.0)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn half_width(&self) -> usize {
        self.weights.len() / 2
    }

    /// Convolves `xs` with the kernel, reflecting the signal about its edges
    /// (`x[-1] = x[0]`, `x[-2] = x[1]`, ...).
    pub fn apply(&self, xs: &[f64]) -> Vec<f64> {
        let n = xs.len() as isize;
        let half = self.half_width() as isize;
        let reflect = |i: isize| -> usize {
            let mut i = i;
            // Repeated reflection handles kernels longer than the signal.
            loop {
                if i < 0 {
                    i = -i - 1;
                } else if i >= n {
                    i = 2 * n - i - 1;
                } else {
                    return i as usize;
                }
            }
        };
        (0..n)
            .map(|i| {
                self.weights
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * xs[reflect(i + k as isize - half)])
                    .sum()
            })
            .collect()
    }
}

/// Gaussian low-pass over a processed trace.
pub fn gaussian_smooth(trace: &EdaTrace, window: usize) -> Result<EdaTrace> {
    gaussian_smooth_with(trace, &GaussianKernel::with_window(window))
}

pub fn gaussian_smooth_with(trace: &EdaTrace, kernel: &GaussianKernel) -> Result<EdaTrace> {
    let window = kernel.weights().len() - 1;
    if trace.len() <= window {
        return Err(Error::EmptyTrace {
            len: trace.len(),
            needed: window + 1,
        });
    }
    let sc = kernel.apply(&trace.sc);
    Ok(trace.with_samples(trace.t.clone(), sc, trace.rate_hz))
}

/// Motion-artifact intervals, in epoch seconds, ordered and non-overlapping.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMask {
    intervals: Vec<(f64, f64)>,
}

impl ArtifactMask {
    pub fn new(intervals: Vec<(f64, f64)>) -> Result<Self> {
        for (i, &(a, b)) in intervals.iter().enumerate() {
            if !(a.is_finite() && b.is_finite()) || a > b {
                return Err(Error::InvalidMask(format!(
                    "interval {i} [{a}, {b}] is not a finite ordered pair"
                )));
            }
        }
        if let Some(i) = intervals.windows(2).position(|w| w[1].0 <= w[0].1) {
            return Err(Error::InvalidMask(format!(
                "intervals {} and {} overlap or are out of order",
                i,
                i + 1
            )));
        }
        Ok(Self { intervals })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn contains(&self, t: f64) -> bool {
        self.intervals.iter().any(|&(a, b)| t >= a && t <= b)
    }
}

/// Result of [`mask_artifacts`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedTrace {
    pub trace: EdaTrace,
    pub masked_samples: usize,
    pub masked_fraction: f64,
}

/// Replaces masked samples by linear interpolation between the nearest
/// unmasked samples. Masked runs touching either end are held at the nearest
/// unmasked value.
pub fn mask_artifacts(trace: &EdaTrace, mask: &ArtifactMask) -> Result<MaskedTrace> {
    if trace.is_empty() {
        return Err(Error::EmptyTrace { len: 0, needed: 1 });
    }
    let (start, end) = (trace.start(), trace.end());
    if let Some(&(a, b)) = mask.intervals().iter().find(|&&(a, b)| b < start || a > end) {
        return Err(Error::InvalidMask(format!(
            "interval [{a}, {b}] lies outside the trace [{start}, {end}]"
        )));
    }
    let masked: Vec<bool> = trace.t.iter().map(|&t| mask.contains(t)).collect();
    let n_masked = masked.iter().filter(|&&m| m).count();
    if n_masked == trace.len() {
        return Err(Error::InvalidMask("mask covers the entire trace".into()));
    }

    let mut sc = trace.sc.clone();
    let mut i = 0;
    while i < sc.len() {
        if !masked[i] {
            i += 1;
            continue;
        }
        let run_start = i;
        while i < sc.len() && masked[i] {
            i += 1;
        }
        let before = run_start.checked_sub(1);
        let after = (i < sc.len()).then_some(i);
        match (before, after) {
            (Some(l), Some(r)) => {
                let (tl, tr) = (trace.t[l], trace.t[r]);
                for (v, &t) in sc[run_start..i].iter_mut().zip(&trace.t[run_start..i]) {
                    let w = if tr > tl { (t - tl) / (tr - tl) } else { 0.0 };
                    *v = trace.sc[l] + w * (trace.sc[r] - trace.sc[l]);
                }
            }
            (Some(l), None) => sc[run_start..i].fill(trace.sc[l]),
            (None, Some(r)) => sc[run_start..i].fill(trace.sc[r]),
            (None, None) => unreachable!("fully masked traces are rejected above"),
        }
    }
    Ok(MaskedTrace {
        trace: trace.with_samples(trace.t.clone(), sc, trace.rate_hz),
        masked_samples: n_masked,
        masked_fraction: n_masked as f64 / trace.len() as f64,
    })
}

/// Flags jumps between adjacent samples larger than `max_jump` µS.
///
/// Each jump yields an interval padded by `pad_s` on both sides; overlapping
/// intervals are merged and clipped to the trace span.
pub fn auto_flag_artifacts(trace: &EdaTrace, max_jump: f64, pad_s: f64) -> ArtifactMask {
    let (start, end) = (trace.start(), trace.end());
    let mut intervals: Vec<(f64, f64)> = Vec::new();
    for i in 1..trace.len() {
        if (trace.sc[i] - trace.sc[i - 1]).abs() > max_jump {
            let a = (trace.t[i - 1] - pad_s).max(start);
            let b = (trace.t[i] + pad_s).min(end);
            match intervals.last_mut() {
                Some(last) if a <= last.1 => last.1 = last.1.max(b),
                _ => intervals.push((a, b)),
            }
        }
    }
    ArtifactMask { intervals }
}

/// EDA and trajectory cropped to their common time window.
#[derive(Debug, Clone)]
pub struct SyncedPair {
    pub eda: EdaTrace,
    pub trajectory: Trajectory,
    pub window: (f64, f64),
    /// Largest distance from a trajectory frame to its nearest EDA sample.
    pub max_skew_s: f64,
}

pub fn sync_epoch(eda: &EdaTrace, traj: &Trajectory) -> Result<SyncedPair> {
    let (traj_start, traj_end) = traj.time_span().unwrap_or((f64::NAN, f64::NAN));
    let start = eda.start().max(traj_start);
    let end = eda.end().min(traj_end);
    if eda.is_empty() || traj.samples.is_empty() || !(end - start >= MIN_SYNC_OVERLAP_S) {
        return Err(Error::Sync {
            eda_start: eda.start(),
            eda_end: eda.end(),
            traj_start,
            traj_end,
            min_overlap: MIN_SYNC_OVERLAP_S,
        });
    }
    let (t, sc): (Vec<f64>, Vec<f64>) = eda
        .t
        .iter()
        .zip(&eda.sc)
        .filter(|(&t, _)| t >= start && t <= end)
        .map(|(&t, &v)| (t, v))
        .unzip();
    let cropped_eda = eda.with_samples(t, sc, eda.rate_hz);
    let cropped_traj = traj.crop(start, end);

    let mut max_skew: f64 = 0.0;
    for frame_t in cropped_traj.frame_times() {
        let idx = cropped_eda.t.partition_point(|&x| x < frame_t);
        let mut best = f64::INFINITY;
        if idx < cropped_eda.len() {
            best = best.min((cropped_eda.t[idx] - frame_t).abs());
        }
        if idx > 0 {
            best = best.min((frame_t - cropped_eda.t[idx - 1]).abs());
        }
        max_skew = max_skew.max(best);
    }
    Ok(SyncedPair {
        eda: cropped_eda,
        trajectory: cropped_traj,
        window: (start, end),
        max_skew_s: max_skew,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::{EntityKind, TrajectorySample};
    use proptest::prelude::*;

    fn trace(sc: Vec<f64>, rate: f64) -> EdaTrace {
        let t = (0..sc.len()).map(|i| 1000.0 + i as f64 / rate).collect();
        EdaTrace::new("p", "s", t, sc, rate).unwrap()
    }

    #[test]
    fn downsample_constant_trace() {
        let out = downsample(&trace(vec![5.0; 100], 100.0)).unwrap();
        assert_eq!(out.len(), 10);
        assert_eq!(out.rate_hz, 10.0);
        assert!(out.sc.iter().all(|&v| (v - 5.0).abs() < 1e-12));
    }

    #[test]
    fn downsample_length_arithmetic() {
        let out = downsample(&trace(vec![1.0; 1000], 100.0)).unwrap();
        assert_eq!(out.len(), 100);
    }

    #[test]
    fn downsample_ramp_block_means() {
        // sc(t) = t over one second, sampled at the centers of 10 ms bins.
        let t: Vec<f64> = (0..100).map(|k| (k as f64 + 0.5) / 100.0).collect();
        let raw = EdaTrace::new("p", "s", t.clone(), t.clone(), 100.0).unwrap();
        let out = downsample(&raw).unwrap();
        // Oracle: direct block means.
        let expected: Vec<f64> = t
            .chunks(10)
            .map(|c| c.iter().sum::<f64>() / 10.0)
            .collect();
        for (k, (&got, &want)) in out.sc.iter().zip(&expected).enumerate() {
            assert!((got - want).abs() < 1e-12);
            assert!((got - (0.05 + 0.1 * k as f64)).abs() < 1e-12);
        }
        // Timestamps at block centers.
        assert!((out.t[0] - 0.05).abs() < 1e-12);
    }

    #[test]
    fn downsample_rejects_short_and_wrong_rate() {
        assert!(matches!(
            downsample(&trace(vec![1.0; 9], 100.0)),
            Err(Error::EmptyTrace { .. })
        ));
        assert!(matches!(
            downsample(&trace(vec![1.0; 100], 10.0)),
            Err(Error::SampleRate { .. })
        ));
    }

    #[test]
    fn smoothing_constant_is_identity() {
        let x = trace(vec![3.3; 200], 10.0);
        let y = gaussian_smooth(&x, 30).unwrap();
        for v in &y.sc {
            assert!((v - 3.3).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothing_impulse_gives_kernel() {
        let mut sc = vec![0.0; 101];
        sc[50] = 1.0;
        let y = gaussian_smooth(&trace(sc, 10.0), 30).unwrap();
        let kernel = GaussianKernel::with_window(30);
        assert_eq!(kernel.weights().len(), 31);
        assert!((kernel.sigma() - 5.0).abs() < 1e-12);
        assert!((y.sc.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (k, w) in kernel.weights().iter().enumerate() {
            assert!((y.sc[35 + k] - w).abs() < 1e-15);
        }
    }

    #[test]
    fn smoothing_reduces_white_noise_variance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let sc: Vec<f64> = (0..600).map(|_| 5.0 + rng.random_range(-0.5..0.5)).collect();
        let x = trace(sc.clone(), 10.0);
        let y = gaussian_smooth(&x, 30).unwrap();
        // Oracle: direct convolution with explicit reflection at interior points.
        let w = GaussianKernel::with_window(30);
        for i in 15..585 {
            let direct: f64 = (0..31).map(|k| w.weights()[k] * sc[i + k - 15]).sum();
            assert!((direct - y.sc[i]).abs() < 1e-12);
        }
        let var = |v: &[f64]| crate::util::std_dev(v, 0).powi(2);
        assert!(var(&y.sc) < var(&x.sc));
    }

    #[test]
    fn smoothing_needs_longer_trace() {
        assert!(gaussian_smooth(&trace(vec![1.0; 30], 10.0), 30).is_err());
        assert!(gaussian_smooth(&trace(vec![1.0; 31], 10.0), 30).is_ok());
    }

    #[test]
    fn mask_empty_is_identity() {
        let x = trace((0..50).map(|i| i as f64 * 0.1).collect(), 10.0);
        let m = mask_artifacts(&x, &ArtifactMask::empty()).unwrap();
        assert_eq!(m.trace, x);
        assert_eq!(m.masked_fraction, 0.0);
    }

    #[test]
    fn mask_flat_region_unchanged() {
        let x = trace(vec![2.0; 50], 10.0);
        let mask = ArtifactMask::new(vec![(1001.0, 1002.0)]).unwrap();
        let m = mask_artifacts(&x, &mask).unwrap();
        assert_eq!(m.trace.sc, x.sc);
        assert!(m.masked_fraction > 0.0);
    }

    #[test]
    fn mask_removes_spike_on_linear_baseline() {
        let mut sc: Vec<f64> = (0..100).map(|i| 4.0 + 0.01 * i as f64).collect();
        let line = sc.clone();
        for v in &mut sc[40..45] {
            *v += 2.0;
        }
        let x = trace(sc, 10.0);
        let mask = ArtifactMask::new(vec![(1003.85, 1004.55)]).unwrap();
        let m = mask_artifacts(&x, &mask).unwrap();
        for (a, b) in m.trace.sc.iter().zip(&line) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn mask_endpoints_hold_nearest_value() {
        let x = trace((0..20).map(|i| i as f64).collect(), 10.0);
        let mask = ArtifactMask::new(vec![(999.0, 1000.25), (1001.75, 1003.0)]).unwrap();
        let m = mask_artifacts(&x, &mask).unwrap();
        assert_eq!(&m.trace.sc[..3], &[3.0, 3.0, 3.0]);
        assert_eq!(&m.trace.sc[18..], &[17.0, 17.0]);
    }

    #[test]
    fn mask_validation() {
        assert!(ArtifactMask::new(vec![(2.0, 1.0)]).is_err());
        assert!(ArtifactMask::new(vec![(1.0, 3.0), (2.0, 4.0)]).is_err());
        let x = trace(vec![1.0; 10], 10.0);
        let outside = ArtifactMask::new(vec![(0.0, 1.0)]).unwrap();
        assert!(mask_artifacts(&x, &outside).is_err());
        let all = ArtifactMask::new(vec![(900.0, 2000.0)]).unwrap();
        assert!(mask_artifacts(&x, &all).is_err());
    }

    #[test]
    fn auto_flag_finds_jumps() {
        let mut sc = vec![5.0; 300];
        sc[150] = 6.0;
        let x = trace(sc, 100.0);
        let mask = auto_flag_artifacts(&x, 0.5, 0.05);
        assert_eq!(mask.intervals().len(), 1);
        let cleaned = mask_artifacts(&x, &mask).unwrap();
        assert!(cleaned.trace.sc.iter().all(|&v| (v - 5.0).abs() < 1e-12));
        assert!(auto_flag_artifacts(&trace(vec![5.0; 300], 100.0), 0.5, 0.05).is_empty());
    }

    fn traj(start: f64, secs: f64) -> Trajectory {
        let n = (secs * 10.0) as usize;
        Trajectory {
            session_id: "s".into(),
            samples: (0..n)
                .map(|i| TrajectorySample {
                    unix: start + i as f64 / 10.0,
                    entity_id: "participant".into(),
                    kind: EntityKind::Participant,
                    x: 0.0,
                    y: 0.0,
                    heading: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn sync_crops_to_common_window() {
        let eda = trace(vec![1.0; 3000], 100.0); // 1000 .. 1029.99
        let pair = sync_epoch(&eda, &traj(1010.0, 60.0)).unwrap();
        assert!((pair.window.0 - 1010.0).abs() < 1e-9);
        assert!((pair.window.1 - 1029.99).abs() < 1e-9);
        assert!(pair.eda.start() >= 1010.0 - 1e-9);
        assert!(pair.trajectory.time_span().unwrap().1 <= pair.window.1);
        assert!(pair.max_skew_s <= 0.005 + 1e-9);
    }

    #[test]
    fn sync_without_overlap_names_ranges() {
        let eda = trace(vec![1.0; 300], 100.0);
        let err = sync_epoch(&eda, &traj(2000.0, 20.0)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("1000.000") && msg.contains("2000.000"), "{msg}");
    }

    proptest! {
        #[test]
        fn smoothing_is_linear(
            xs in proptest::collection::vec(-5.0f64..5.0, 64),
            ys in proptest::collection::vec(-5.0f64..5.0, 64),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let k = GaussianKernel::with_window(30);
            let combo: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| a * x + b * y).collect();
            let lhs = k.apply(&combo);
            let sx = k.apply(&xs);
            let sy = k.apply(&ys);
            for i in 0..64 {
                prop_assert!((lhs[i] - (a * sx[i] + b * sy[i])).abs() < 1e-9);
            }
        }

        #[test]
        fn downsample_then_hold_preserves_block_means(
            xs in proptest::collection::vec(0.0f64..20.0, 10..400),
        ) {
            let raw = trace(xs, 100.0);
            let down = downsample(&raw).unwrap();
            let held = down.upsample_hold(10);
            let again = downsample_by(&held, 10).unwrap();
            for (a, b) in again.sc.iter().zip(&down.sc) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn smoothing_integral_bounded(
            xs in proptest::collection::vec(0.0f64..10.0, 40..200),
        ) {
            let k = GaussianKernel::with_window(30);
            let ys = k.apply(&xs);
            let max = xs.iter().cloned().fold(0.0, f64::max);
            let diff = (ys.iter().sum::<f64>() - xs.iter().sum::<f64>()).abs();
            prop_assert!(diff <= 30.0 * max + 1e-9);
        }

        #[test]
        fn masking_is_idempotent(
            xs in proptest::collection::vec(0.0f64..10.0, 20..100),
            a in 0.0f64..1.0,
            w in 0.0f64..0.5,
        ) {
            let x = trace(xs, 10.0);
            let start = x.start() + a * x.duration();
            let mask = ArtifactMask::new(vec![(start, start + w * x.duration())]).unwrap();
            if let Ok(once) = mask_artifacts(&x, &mask) {
                let twice = mask_artifacts(&once.trace, &mask).unwrap();
                prop_assert_eq!(once.trace.sc, twice.trace.sc);
            }
        }
    }
}
