//! Statistics-based image reconstruction.
//!
//! Spike emission frequency tracks light intensity, so a gray value can be
//! recovered either from the spike count in a window (TFP) or from the
//! inter-spike interval around an anchor step (TFI). Under the canonical
//! calibration (Θ = 255, gain·τ = 1) a pixel of intensity L fires L times per
//! 255 steps with interval 255/L, so both estimators land on the same 8-bit
//! scale. Rounding is half-away-from-zero throughout. Pixels with no spikes
//! to measure render as 0; reconstruction does not invent texture.

use crate::error::{Result, SpikeError};
use crate::imageio::GrayImage;
use crate::par;
use crate::stream::SpikeStream;

/// How a reconstructed image was produced, with its window provenance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconMethod {
    /// Firing-rate image over `[window_start, window_start + window_len)`,
    /// with `full_scale` spikes mapping to gray 255.
    Tfp {
        window_start: usize,
        window_len: usize,
        full_scale: usize,
    },
    /// Inter-spike-interval image around `anchor`, intervals searched up to
    /// `max_search` steps on each side.
    Tfi { anchor: usize, max_search: usize },
}

/// An 8-bit reconstruction result and how it was obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconImage {
    image: GrayImage,
    method: ReconMethod,
}

impl ReconImage {
    pub fn image(&self) -> &GrayImage {
        &self.image
    }

    pub fn into_image(self) -> GrayImage {
        self.image
    }

    pub fn method(&self) -> ReconMethod {
        self.method
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn pixels(&self) -> &[u8] {
        self.image.pixels()
    }
}

fn to_gray(value: f64) -> u8 {
    value.round().min(255.0) as u8
}

/// Firing-rate (spike frequency) reconstruction over one window.
///
/// `pixels[i][j] = clamp_255(round(255 · count / full_scale))` where `count`
/// is the pixel's spike count in `[start, start + window)`. `full_scale` is
/// the count that maps to gray 255; pass `window` for a plain rate image.
pub fn tfp(
    stream: &SpikeStream,
    start: usize,
    window: usize,
    full_scale: usize,
) -> Result<ReconImage> {
    if window == 0 {
        return Err(SpikeError::domain("tfp window must be at least 1"));
    }
    if full_scale == 0 {
        return Err(SpikeError::domain("tfp full_scale must be at least 1"));
    }
    let counts = stream.spike_count_map(start, window)?;
    let scale = 255.0 / full_scale as f64;
    let pixels = counts
        .into_iter()
        .map(|c| to_gray(f64::from(c) * scale))
        .collect();
    Ok(ReconImage {
        image: GrayImage::from_pixels(stream.width(), stream.height(), pixels)?,
        method: ReconMethod::Tfp {
            window_start: start,
            window_len: window,
            full_scale,
        },
    })
}

/// Inter-spike-interval reconstruction around `anchor`.
///
/// For each pixel the bracketing pair is the last spike at or before the
/// anchor and the first spike after it, each searched at most `max_search`
/// steps away. The gray value is `clamp_255(round(255 / Δt))` with Δt the
/// pair's distance in steps; pixels without a bracketing pair in range get 0.
pub fn tfi(stream: &SpikeStream, anchor: usize, max_search: usize) -> Result<ReconImage> {
    if anchor >= stream.num_steps() {
        return Err(SpikeError::StepOutOfRange {
            step: anchor,
            num_steps: stream.num_steps(),
        });
    }
    if max_search == 0 {
        return Err(SpikeError::domain("tfi max_search must be at least 1"));
    }
    let (h, w, t) = (stream.height(), stream.width(), stream.num_steps());
    let back_limit = anchor.saturating_sub(max_search - 1);
    let fwd_limit = (anchor + max_search).min(t - 1);
    let mut pixels = vec![0u8; h * w];
    par::for_each_chunk_mut(&mut pixels, w, |i, row| {
        for (j, px) in row.iter_mut().enumerate() {
            let prev = (back_limit..=anchor).rev().find(|&k| stream.get(i, j, k));
            let next = (anchor + 1..=fwd_limit).find(|&k| stream.get(i, j, k));
            if let (Some(p), Some(n)) = (prev, next) {
                *px = to_gray(255.0 / (n - p) as f64);
            }
        }
    });
    Ok(ReconImage {
        image: GrayImage::from_pixels(w, h, pixels)?,
        method: ReconMethod::Tfi { anchor, max_search },
    })
}

/// Gamma brightening for display: `clamp_255(round(255 · (v/255)^(1/gamma)))`.
/// Monotone, fixes 0 and 255, identity at gamma = 1.
pub fn brighten(img: &ReconImage, gamma: f64) -> Result<ReconImage> {
    if !(gamma > 0.0) {
        return Err(SpikeError::domain(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    let exponent = 1.0 / gamma;
    let table: Vec<u8> = (0..256)
        .map(|v| to_gray(255.0 * (v as f64 / 255.0).powf(exponent)))
        .collect();
    let pixels = img.pixels().iter().map(|&v| table[v as usize]).collect();
    Ok(ReconImage {
        image: GrayImage::from_pixels(img.width(), img.height(), pixels)?,
        method: img.method,
    })
}

/// TFP at window starts 0, stride, 2·stride, … while the window stays fully
/// in bounds. Each output equals an independent `tfp` call at that start.
pub fn sliding_tfp(
    stream: &SpikeStream,
    window: usize,
    stride: usize,
    full_scale: usize,
) -> Result<Vec<ReconImage>> {
    if stride == 0 {
        return Err(SpikeError::domain("stride must be at least 1"));
    }
    let mut images = Vec::new();
    let mut start = 0usize;
    while window <= stream.num_steps() && start + window <= stream.num_steps() {
        images.push(tfp(stream, start, window, full_scale)?);
        match start.checked_add(stride) {
            Some(next) => start = next,
            None => break,
        }
    }
    // Surface bad windows even when the loop body never ran.
    if images.is_empty() {
        tfp(stream, 0, window, full_scale)?;
    }
    Ok(images)
}

/// Optional despike pre-filter: a 3-step temporal median (bitwise majority of
/// each step and its neighbors). End frames are copied unchanged, so streams
/// shorter than 3 steps pass through as-is.
pub fn median_despike(stream: &SpikeStream) -> SpikeStream {
    let t = stream.num_steps();
    if t < 3 {
        return stream.clone();
    }
    let bpf = stream.geometry().bytes_per_frame();
    let mut out = vec![0u8; stream.as_bytes().len()];
    par::for_each_chunk_mut(&mut out, bpf, |k, frame| {
        if k == 0 || k == t - 1 {
            frame.copy_from_slice(stream.frame_bytes(k));
            return;
        }
        let (a, b, c) = (
            stream.frame_bytes(k - 1),
            stream.frame_bytes(k),
            stream.frame_bytes(k + 1),
        );
        for (idx, out_byte) in frame.iter_mut().enumerate() {
            *out_byte = (a[idx] & b[idx]) | (a[idx] & c[idx]) | (b[idx] & c[idx]);
        }
    });
    SpikeStream::from_packed(out, stream.geometry()).expect("same geometry as source")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{SensorConfig, Simulator};
    use crate::stream::StreamGeometry;

    fn geom(h: usize, w: usize, t: usize) -> StreamGeometry {
        StreamGeometry::new(h, w, t).unwrap()
    }

    /// Stream with every pixel firing at steps `phase, phase+period, ...`.
    fn periodic_stream(h: usize, w: usize, t: usize, period: usize, phase: usize) -> SpikeStream {
        let mut s = SpikeStream::zeros(geom(h, w, t));
        let mut k = phase;
        while k < t {
            for i in 0..h {
                for j in 0..w {
                    s.set(i, j, k, true);
                }
            }
            k += period;
        }
        s
    }

    #[test]
    fn tfp_all_zero_stream_is_black() {
        let s = SpikeStream::zeros(geom(3, 4, 10));
        let img = tfp(&s, 0, 10, 10).unwrap();
        assert!(img.pixels().iter().all(|&v| v == 0));
    }

    #[test]
    fn tfp_identity_calibration_maps_count_to_gray() {
        // window = full_scale = 255: gray value equals the raw count.
        let mut s = SpikeStream::zeros(geom(1, 3, 255));
        for (j, count) in [0usize, 100, 255].into_iter().enumerate() {
            for k in 0..count {
                s.set(0, j, k, true);
            }
        }
        let img = tfp(&s, 0, 255, 255).unwrap();
        assert_eq!(img.pixels(), &[0, 100, 255]);
    }

    #[test]
    fn tfp_of_simulated_constant_scene() {
        let cfg = SensorConfig::canonical(4, 4);
        let stream = Simulator::new(cfg)
            .simulate(&[vec![128.0; 16]], 255)
            .unwrap();
        let img = tfp(&stream, 0, 255, 255).unwrap();
        for &v in img.pixels() {
            assert!((127..=129).contains(&v), "gray {v}");
        }
    }

    #[test]
    fn tfp_monotone_in_count() {
        let mut s = SpikeStream::zeros(geom(1, 1, 40));
        let mut last = 0u8;
        for count in 0..=40usize {
            if count > 0 {
                s.set(0, 0, count - 1, true);
            }
            let v = tfp(&s, 0, 40, 40).unwrap().pixels()[0];
            assert!(v >= last, "count {count}: {v} < {last}");
            last = v;
        }
        assert_eq!(last, 255);
    }

    #[test]
    fn tfp_window_additivity_mirror() {
        let s = periodic_stream(2, 2, 64, 3, 1);
        let w = 16usize;
        let full = tfp(&s, 0, 2 * w, 2 * w).unwrap().pixels()[0];
        let c1 = s.spike_count_map(0, w).unwrap()[0];
        let c2 = s.spike_count_map(w, w).unwrap()[0];
        let half_mean = (f64::from(tfp(&s, 0, w, w).unwrap().pixels()[0])
            + f64::from(tfp(&s, w, w, w).unwrap().pixels()[0]))
            / 2.0;
        let expected = (255.0 * f64::from(c1 + c2) / (2 * w) as f64).round();
        assert_eq!(f64::from(full), expected);
        assert!((f64::from(full) - half_mean).abs() <= 1.0);
    }

    #[test]
    fn tfp_rejects_bad_windows() {
        let s = SpikeStream::zeros(geom(2, 2, 10));
        assert!(matches!(
            tfp(&s, 5, 6, 6),
            Err(SpikeError::WindowOutOfRange { .. })
        ));
        assert!(tfp(&s, 0, 0, 1).is_err());
        assert!(tfp(&s, 0, 5, 0).is_err());
    }

    #[test]
    fn tfi_every_step_pixel_is_full_scale() {
        let s = periodic_stream(2, 2, 20, 1, 0);
        let img = tfi(&s, 10, 5).unwrap();
        assert!(img.pixels().iter().all(|&v| v == 255));
    }

    #[test]
    fn tfi_interval_two_rounds_half_up() {
        // Independent oracle: spikes at even steps bracket anchor 4 (spike at
        // 4, next at 6), interval 2 → round(127.5) = 128 half-away-from-zero.
        let s = periodic_stream(1, 1, 12, 2, 0);
        let img = tfi(&s, 4, 12).unwrap();
        assert_eq!(img.pixels()[0], 128);
        // Odd anchor: prev at 4, next at 6, same interval.
        assert_eq!(tfi(&s, 5, 12).unwrap().pixels()[0], 128);
    }

    #[test]
    fn tfi_silent_pixel_and_out_of_reach_spikes_render_zero() {
        let mut s = SpikeStream::zeros(geom(1, 2, 40));
        // Pixel 1 fires only at steps 0 and 39, far from anchor 20.
        s.set(0, 1, 0, true);
        s.set(0, 1, 39, true);
        let img = tfi(&s, 20, 5).unwrap();
        assert_eq!(img.pixels(), &[0, 0]);
        // With a wide enough search the bracketing pair is found: Δt = 39.
        let wide = tfi(&s, 20, 39).unwrap();
        assert_eq!(wide.pixels()[1], (255.0_f64 / 39.0).round() as u8);
    }

    #[test]
    fn tfi_anchor_out_of_range() {
        let s = SpikeStream::zeros(geom(1, 1, 5));
        assert!(matches!(
            tfi(&s, 5, 1),
            Err(SpikeError::StepOutOfRange { .. })
        ));
        assert!(tfi(&s, 0, 0).is_err());
    }

    #[test]
    fn tfp_and_tfi_agree_on_periodic_streams() {
        // Both estimate the same rate; quantization bounds their gap.
        for period in [1usize, 2, 5, 17] {
            let s = periodic_stream(1, 1, 510, period, 0);
            let rate_img = tfp(&s, 0, 255, 255).unwrap();
            let interval_img = tfi(&s, 255, 255).unwrap();
            let diff =
                (i32::from(rate_img.pixels()[0]) - i32::from(interval_img.pixels()[0])).abs();
            let bound = (255.0 / (period * period) as f64).ceil() as i32 + 1;
            assert!(diff <= bound, "period {period}: diff {diff} > {bound}");
        }
    }

    #[test]
    fn brighten_identity_endpoints_and_known_value() {
        let mut s = SpikeStream::zeros(geom(1, 3, 255));
        for k in 0..64 {
            s.set(0, 1, k, true);
        }
        for k in 0..255 {
            s.set(0, 2, k, true);
        }
        let img = tfp(&s, 0, 255, 255).unwrap();
        assert_eq!(img.pixels(), &[0, 64, 255]);

        let same = brighten(&img, 1.0).unwrap();
        assert_eq!(same.pixels(), img.pixels());

        let bright = brighten(&img, 2.0).unwrap();
        // round(255 · (64/255)^0.5) = 128, endpoints pinned.
        assert_eq!(bright.pixels(), &[0, 128, 255]);

        assert!(brighten(&img, 0.0).is_err());
        assert!(brighten(&img, -1.0).is_err());
    }

    #[test]
    fn brighten_is_monotone() {
        let mut s = SpikeStream::zeros(geom(1, 256, 255));
        for j in 0..256 {
            for k in 0..j.min(255) {
                s.set(0, j, k, true);
            }
        }
        let ramp = tfp(&s, 0, 255, 255).unwrap();
        for gamma in [0.3, 0.7, 1.0, 1.8, 4.2] {
            let table = brighten(&ramp, gamma).unwrap();
            assert!(
                table.pixels().windows(2).all(|w| w[0] <= w[1]),
                "gamma {gamma}"
            );
        }
    }

    #[test]
    fn sliding_tfp_counts_and_matches_pointwise() {
        let s = periodic_stream(2, 3, 100, 4, 2);
        let images = sliding_tfp(&s, 50, 25, 50).unwrap();
        assert_eq!(images.len(), 3);
        for (n, img) in images.iter().enumerate() {
            let independent = tfp(&s, n * 25, 50, 50).unwrap();
            assert_eq!(img.pixels(), independent.pixels());
        }
        // stride = num_steps: single image.
        assert_eq!(sliding_tfp(&s, 100, 100, 100).unwrap().len(), 1);
        assert!(sliding_tfp(&s, 101, 10, 101).is_err());
        assert!(sliding_tfp(&s, 10, 0, 10).is_err());
    }

    #[test]
    fn median_despike_drops_isolated_spikes() {
        let mut s = SpikeStream::zeros(geom(1, 1, 7));
        s.set(0, 0, 3, true); // lone blip
        let filtered = median_despike(&s);
        assert_eq!(filtered.count_spikes(), 0);

        // A sustained burst survives (interior frames keep majority support).
        let mut burst = SpikeStream::zeros(geom(1, 1, 7));
        for k in 2..=4 {
            burst.set(0, 0, k, true);
        }
        let kept = median_despike(&burst);
        assert!(kept.get(0, 0, 3));
        assert_eq!(kept.count_spikes(), 3);

        // End frames are copied, short streams pass through.
        let mut ends = SpikeStream::zeros(geom(1, 1, 2));
        ends.set(0, 0, 0, true);
        assert_eq!(median_despike(&ends), ends);
    }
}
