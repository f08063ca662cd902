//! Integrate-and-fire spike generation from intensity frames.
//!
//! Each pixel accumulates charge proportional to incident intensity; when the
//! accumulator reaches the threshold Θ the pixel fires and the accumulator
//! wraps modulo Θ. The synchronous read-out polls all pixels once per
//! interval τ, so a polling step integrates `gain · intensity · τ` under a
//! zero-order hold and emits at most one spike per pixel no matter how many
//! threshold crossings the step contains. For per-step charge up to Θ the
//! emitted spike count over T steps from a zero residual is exactly
//! `floor(T · gain · intensity · τ / Θ)`.
//!
//! Only the product `gain · τ` enters the update, so it is computed once at
//! configuration time; scaling gain up and intensity down by the same factor
//! produces a bit-identical stream.

use crate::error::{Result, SpikeError};
use crate::imageio::GrayImage;
use crate::par;
use crate::stream::{SpikeStream, StreamGeometry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Physical and sampling parameters of the simulated sensor.
#[derive(Debug, Clone, Copy)]
pub struct SensorConfig {
    threshold: f64,
    gain: f64,
    polling_interval_us: f64,
    charge_per_intensity: f64,
    height: usize,
    width: usize,
}

impl SensorConfig {
    /// Builds a config from the gain in accumulator units per
    /// (intensity × second).
    pub fn new(
        height: usize,
        width: usize,
        threshold: f64,
        gain: f64,
        polling_interval_us: f64,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(SpikeError::BadGeometry { height, width });
        }
        if !(threshold > 0.0) || !(gain > 0.0) || !(polling_interval_us > 0.0) {
            return Err(SpikeError::domain(format!(
                "threshold, gain and polling interval must be positive \
                 (got {threshold}, {gain}, {polling_interval_us})"
            )));
        }
        let tau_seconds = polling_interval_us * 1e-6;
        Ok(Self {
            threshold,
            gain,
            polling_interval_us,
            charge_per_intensity: gain * tau_seconds,
            height,
            width,
        })
    }

    /// Builds a config directly from the per-step charge factor `gain · τ`,
    /// the quantity the accumulation law actually uses. The stored gain is
    /// derived from it and the polling interval.
    pub fn with_gain_tau(
        height: usize,
        width: usize,
        threshold: f64,
        gain_tau: f64,
        polling_interval_us: f64,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(SpikeError::BadGeometry { height, width });
        }
        if !(threshold > 0.0) || !(gain_tau > 0.0) || !(polling_interval_us > 0.0) {
            return Err(SpikeError::domain(format!(
                "threshold, gain·τ and polling interval must be positive \
                 (got {threshold}, {gain_tau}, {polling_interval_us})"
            )));
        }
        let tau_seconds = polling_interval_us * 1e-6;
        Ok(Self {
            threshold,
            gain: gain_tau / tau_seconds,
            polling_interval_us,
            charge_per_intensity: gain_tau,
            height,
            width,
        })
    }

    /// Canonical calibration: Θ = 255, gain·τ = 1, τ = 25 µs. An 8-bit pixel
    /// value then equals its spike count over 255 steps.
    pub fn canonical(height: usize, width: usize) -> Self {
        Self::with_gain_tau(height, width, 255.0, 1.0, 25.0).expect("canonical config is valid")
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn polling_interval_us(&self) -> f64 {
        self.polling_interval_us
    }

    /// Accumulator charge contributed by one intensity unit in one step.
    pub fn charge_per_intensity(&self) -> f64 {
        self.charge_per_intensity
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn bytes_per_frame(&self) -> usize {
        self.pixels().div_ceil(8)
    }

    fn geometry(&self, num_steps: usize) -> StreamGeometry {
        StreamGeometry::new(self.height, self.width, num_steps).expect("validated at construction")
    }
}

/// How pixel accumulators start out.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum InitialState {
    /// All residuals zero. Deterministic; the default.
    #[default]
    Zeros,
    /// Residuals uniform in [0, Θ), mimicking the random phase of a real
    /// sensor, reproducible from the seed.
    UniformRandom { seed: u64 },
}

/// Optional additive per-step accumulator noise: zero-mean uniform in
/// [-amplitude, amplitude), derived from (seed, step, pixel) so results do
/// not depend on thread scheduling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub amplitude: f64,
    pub seed: u64,
}

/// Per-pixel accumulator residuals carried between polling steps. Each value
/// stays in [0, Θ) at every step boundary.
#[derive(Debug, Clone)]
pub struct PixelState {
    residual: Vec<f64>,
}

impl PixelState {
    pub fn new(config: &SensorConfig, initial: InitialState) -> Self {
        let pixels = config.pixels();
        let residual = match initial {
            InitialState::Zeros => vec![0.0; pixels],
            InitialState::UniformRandom { seed } => {
                let mut rng = ChaCha12Rng::seed_from_u64(seed);
                (0..pixels)
                    .map(|_| rng.random::<f64>() * config.threshold())
                    .collect()
            }
        };
        Self { residual }
    }

    pub fn residuals(&self) -> &[f64] {
        &self.residual
    }
}

/// Stepped integrate-and-fire sensor over a fixed geometry.
pub struct Simulator {
    config: SensorConfig,
    state: PixelState,
    noise: Option<NoiseConfig>,
    step_index: u64,
}

impl Simulator {
    pub fn new(config: SensorConfig) -> Self {
        Self::with_initial(config, InitialState::Zeros)
    }

    pub fn with_initial(config: SensorConfig, initial: InitialState) -> Self {
        Self {
            state: PixelState::new(&config, initial),
            config,
            noise: None,
            step_index: 0,
        }
    }

    pub fn noise(mut self, noise: Option<NoiseConfig>) -> Self {
        self.noise = noise;
        self
    }

    pub fn config(&self) -> &SensorConfig {
        &self.config
    }

    pub fn state(&self) -> &PixelState {
        &self.state
    }

    /// Advances one polling step under `intensity` (held constant for the
    /// step) and returns the packed binary spike frame.
    pub fn step(&mut self, intensity: &[f64]) -> Result<Vec<u8>> {
        validate_frame(intensity, self.config.pixels())?;
        let mut out = vec![0u8; self.config.bytes_per_frame()];
        self.step_unchecked(intensity, &mut out);
        Ok(out)
    }

    /// Runs the frame sequence with each frame held for `repeats_per_frame`
    /// polling steps, producing `frames.len() * repeats_per_frame` steps.
    pub fn simulate(
        &mut self,
        frames: &[Vec<f64>],
        repeats_per_frame: usize,
    ) -> Result<SpikeStream> {
        if frames.is_empty() {
            return Err(SpikeError::domain("frame sequence is empty"));
        }
        if repeats_per_frame == 0 {
            return Err(SpikeError::domain("repeats_per_frame must be at least 1"));
        }
        let bpf = self.config.bytes_per_frame();
        let num_steps = frames.len() * repeats_per_frame;
        let mut data = vec![0u8; num_steps * bpf];
        let mut chunks = data.chunks_mut(bpf);
        for frame in frames {
            validate_frame(frame, self.config.pixels())?;
            self.warn_if_out_of_band(frame);
            for _ in 0..repeats_per_frame {
                let out = chunks.next().expect("sized above");
                self.step_unchecked(frame, out);
            }
        }
        SpikeStream::from_packed(data, self.config.geometry(num_steps))
    }

    /// `simulate` over 8-bit grayscale frames mapped to intensities 0..=255.
    pub fn simulate_images(
        &mut self,
        frames: &[GrayImage],
        repeats_per_frame: usize,
    ) -> Result<SpikeStream> {
        let as_real: Vec<Vec<f64>> = frames
            .iter()
            .map(|img| img.pixels().iter().map(|&v| f64::from(v)).collect())
            .collect();
        self.simulate(&as_real, repeats_per_frame)
    }

    fn step_unchecked(&mut self, intensity: &[f64], out: &mut [u8]) {
        let threshold = self.config.threshold;
        let charge = self.config.charge_per_intensity;
        let noise = self.noise;
        let step = self.step_index;
        par::for_each_chunk_zip_mut(
            &mut self.state.residual,
            8,
            out,
            |chunk_idx, residuals, byte| {
                let base = chunk_idx * 8;
                let mut bits = 0u8;
                for (bit, r) in residuals.iter_mut().enumerate() {
                    let mut accum = *r + charge * intensity[base + bit];
                    if let Some(n) = noise {
                        accum += n.amplitude * noise_sample(n.seed, step, (base + bit) as u64);
                        if accum < 0.0 {
                            accum = 0.0;
                        }
                    }
                    if accum >= threshold {
                        bits |= 1 << bit;
                        *r = accum % threshold;
                    } else {
                        *r = accum;
                    }
                }
                *byte = bits;
            },
        );
        self.step_index += 1;
    }

    fn warn_if_out_of_band(&self, intensity: &[f64]) {
        let max = intensity.iter().copied().fold(0.0_f64, f64::max);
        if max * self.config.charge_per_intensity >= 2.0 * self.config.threshold {
            log::warn!(
                "per-step charge {:.3} crosses the threshold {} more than once per poll; \
                 extra crossings collapse into a single spike",
                max * self.config.charge_per_intensity,
                self.config.threshold
            );
        }
    }
}

/// Per-pixel firing rate over the trailing `window` steps, in [0, 1].
pub fn firing_rate(stream: &SpikeStream, window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(SpikeError::domain("firing-rate window must be at least 1"));
    }
    let t = stream.num_steps();
    let counts = stream.spike_count_map(t.checked_sub(window).ok_or(
        SpikeError::WindowOutOfRange {
            start: 0,
            length: window,
            num_steps: t,
        },
    )?, window)?;
    Ok(counts
        .into_iter()
        .map(|c| f64::from(c) / window as f64)
        .collect())
}

fn validate_frame(intensity: &[f64], pixels: usize) -> Result<()> {
    if intensity.len() != pixels {
        return Err(SpikeError::FrameSizeMismatch {
            expected: pixels,
            actual: intensity.len(),
        });
    }
    if let Some(bad) = intensity.iter().find(|v| !(**v >= 0.0)) {
        return Err(SpikeError::domain(format!(
            "intensity must be nonnegative and finite, got {bad}"
        )));
    }
    Ok(())
}

/// SplitMix64 hash of (seed, step, pixel) mapped to [-1, 1).
fn noise_sample(seed: u64, step: u64, pixel: u64) -> f64 {
    let mut z = seed
        ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ pixel.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 52) as f64 - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_frame(pixels: usize, value: f64) -> Vec<f64> {
        vec![value; pixels]
    }

    /// Independent oracle for the count law: spikes of a constant-intensity
    /// pixel over T steps from residual 0 equal floor(T·charge/Θ).
    fn closed_form_count(steps: usize, charge: f64, threshold: f64) -> u64 {
        ((steps as f64) * charge / threshold).floor() as u64
    }

    #[test]
    fn dark_pixel_never_fires() {
        let cfg = SensorConfig::canonical(2, 2);
        let mut sim = Simulator::new(cfg);
        for _ in 0..50 {
            let frame = sim.step(&constant_frame(4, 0.0)).unwrap();
            assert!(frame.iter().all(|&b| b == 0));
        }
        assert!(sim.state().residuals().iter().all(|&r| r == 0.0));
    }

    #[test]
    fn half_scale_fires_every_other_step() {
        // Θ=255, gain·τ=1, L=128: accumulates 128, 256, 129, 257, ...
        // so spikes land on steps 1, 3, 5, ... (0-indexed) with residual 1, 2, ...
        let cfg = SensorConfig::with_gain_tau(1, 1, 255.0, 1.0, 25.0).unwrap();
        let mut sim = Simulator::new(cfg);
        let mut fired = Vec::new();
        for k in 0..6 {
            let frame = sim.step(&[128.0]).unwrap();
            if frame[0] & 1 == 1 {
                fired.push(k);
            }
        }
        assert_eq!(fired, vec![1, 3, 5]);
        assert_eq!(sim.state().residuals()[0], 3.0);
    }

    #[test]
    fn count_law_matches_closed_form_exactly() {
        let cfg = SensorConfig::with_gain_tau(1, 1, 255.0, 1.0, 25.0).unwrap();
        for &level in &[1.0, 64.0, 128.0, 192.0, 255.0] {
            let mut sim = Simulator::new(cfg);
            let stream = sim.simulate(&[constant_frame(1, level)], 510).unwrap();
            let got = stream.count_spikes();
            assert_eq!(got, closed_form_count(510, level, 255.0), "L={level}");
        }
        // The spec'd midpoint case: 510 steps at L=128 gives exactly 256.
        let mut sim = Simulator::new(cfg);
        let stream = sim.simulate(&[constant_frame(1, 128.0)], 510).unwrap();
        assert_eq!(stream.count_spikes(), 256);
    }

    #[test]
    fn full_scale_fires_every_step() {
        let cfg = SensorConfig::canonical(2, 3);
        let mut sim = Simulator::new(cfg);
        let stream = sim.simulate(&[constant_frame(6, 255.0)], 10).unwrap();
        let counts = stream.spike_count_map(0, 10).unwrap();
        assert!(counts.iter().all(|&c| c == 10));
    }

    #[test]
    fn zero_order_hold_carries_residual_between_frames() {
        // [64, 192] held 255 steps each: window counts 64 and 192 (oracle:
        // per-window floor counts with carried residual; exact here).
        let cfg = SensorConfig::canonical(1, 1);
        let mut sim = Simulator::new(cfg);
        let stream = sim
            .simulate(&[constant_frame(1, 64.0), constant_frame(1, 192.0)], 255)
            .unwrap();
        let first = stream.spike_count_map(0, 255).unwrap()[0];
        let second = stream.spike_count_map(255, 255).unwrap()[0];
        assert!((i64::from(first) - 64).abs() <= 1, "first window {first}");
        assert!((i64::from(second) - 192).abs() <= 1, "second window {second}");
    }

    #[test]
    fn residuals_stay_in_band() {
        let cfg = SensorConfig::with_gain_tau(2, 2, 7.3, 1.0, 25.0).unwrap();
        let mut sim = Simulator::with_initial(cfg, InitialState::UniformRandom { seed: 9 });
        for k in 0..100 {
            sim.step(&constant_frame(4, 2.9 + (k % 5) as f64)).unwrap();
            for &r in sim.state().residuals() {
                assert!((0.0..7.3).contains(&r), "residual {r} out of band");
            }
        }
    }

    #[test]
    fn rejects_bad_frames() {
        let cfg = SensorConfig::canonical(2, 2);
        let mut sim = Simulator::new(cfg);
        assert!(matches!(
            sim.step(&[0.0; 3]),
            Err(SpikeError::FrameSizeMismatch { .. })
        ));
        assert!(matches!(
            sim.step(&[0.0, 1.0, -0.5, 2.0]),
            Err(SpikeError::Domain(_))
        ));
        assert!(sim.simulate(&[], 1).is_err());
        assert!(sim.simulate(&[constant_frame(4, 1.0)], 0).is_err());
    }

    #[test]
    fn deterministic_and_scale_invariant() {
        let frames = vec![vec![10.0, 20.0, 30.0, 40.0], vec![5.0, 0.0, 255.0, 1.0]];
        let cfg = SensorConfig::new(2, 2, 255.0, 40_000.0, 25.0).unwrap();
        let a = Simulator::new(cfg).simulate(&frames, 7).unwrap();
        let b = Simulator::new(cfg).simulate(&frames, 7).unwrap();
        assert_eq!(a, b);

        let doubled = SensorConfig::new(2, 2, 255.0, 80_000.0, 25.0).unwrap();
        let halved: Vec<Vec<f64>> = frames
            .iter()
            .map(|f| f.iter().map(|v| v / 2.0).collect())
            .collect();
        let c = Simulator::new(doubled).simulate(&halved, 7).unwrap();
        assert_eq!(a.as_bytes(), c.as_bytes());
    }

    #[test]
    fn seeded_initial_state_reproducible() {
        let cfg = SensorConfig::canonical(4, 4);
        let init = InitialState::UniformRandom { seed: 42 };
        let a = PixelState::new(&cfg, init);
        let b = PixelState::new(&cfg, init);
        assert_eq!(a.residuals(), b.residuals());
        assert!(a
            .residuals()
            .iter()
            .all(|&r| (0.0..cfg.threshold()).contains(&r)));
        assert_ne!(
            a.residuals(),
            PixelState::new(&cfg, InitialState::UniformRandom { seed: 43 }).residuals()
        );
    }

    #[test]
    fn noise_is_seeded_and_optional() {
        let cfg = SensorConfig::canonical(4, 4);
        let frames = vec![constant_frame(16, 100.0)];
        let noisy = |seed| {
            Simulator::new(cfg)
                .noise(Some(NoiseConfig {
                    amplitude: 30.0,
                    seed,
                }))
                .simulate(&frames, 100)
                .unwrap()
        };
        assert_eq!(noisy(1), noisy(1));
        assert_ne!(noisy(1).as_bytes(), noisy(2).as_bytes());

        let clean = Simulator::new(cfg).simulate(&frames, 100).unwrap();
        assert_ne!(clean.as_bytes(), noisy(1).as_bytes());
    }

    #[test]
    fn firing_rate_trailing_window() {
        let cfg = SensorConfig::canonical(1, 1);
        let mut sim = Simulator::new(cfg);
        let stream = sim.simulate(&[constant_frame(1, 255.0)], 20).unwrap();
        let rate = firing_rate(&stream, 20).unwrap();
        assert_eq!(rate, vec![1.0]);
        assert!(firing_rate(&stream, 0).is_err());
        assert!(firing_rate(&stream, 21).is_err());

        let mut sim = Simulator::new(cfg);
        let stream = sim.simulate(&[constant_frame(1, 128.0)], 255).unwrap();
        let rate = firing_rate(&stream, 255).unwrap()[0];
        assert!((rate - 128.0 / 255.0).abs() <= 1.0 / 255.0);
    }
}
