//! Bit-packed spike stream cube.
//!
//! A stream is H×W×T binary samples packed one bit per pixel: frame-major,
//! row-major within a frame, LSB-first within each byte. Bit `(i, j)` of
//! frame `k` therefore lives at byte `k * bytes_per_frame + (i*W + j) / 8`,
//! bit `(i*W + j) % 8`. When `H*W` is not a multiple of 8 the trailing bits
//! of each frame's last byte are padding: writers emit them as zero, readers
//! never look at them. Frame index 0 is the earliest polling step.

use crate::error::{Result, SpikeError};
use crate::par;
use std::fmt;

/// Spatial and temporal extent of a spike stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamGeometry {
    height: usize,
    width: usize,
    num_steps: usize,
}

impl StreamGeometry {
    /// Height and width must be nonzero; zero polling steps are allowed.
    pub fn new(height: usize, width: usize, num_steps: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(SpikeError::BadGeometry { height, width });
        }
        Ok(Self {
            height,
            width,
            num_steps,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Packed bytes per polling frame: `ceil(H*W / 8)`.
    pub fn bytes_per_frame(&self) -> usize {
        self.pixels().div_ceil(8)
    }

    pub fn total_bytes(&self) -> usize {
        self.num_steps * self.bytes_per_frame()
    }

    /// Same spatial extent with a different step count.
    pub fn with_steps(&self, num_steps: usize) -> Self {
        Self {
            num_steps,
            ..*self
        }
    }
}

impl fmt::Display for StreamGeometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.num_steps)
    }
}

/// An immutable bit-packed H×W×T spike cube.
///
/// Values are constructed once and then only read, so they are safe to share
/// across threads. The raw byte buffer is preserved exactly as given (padding
/// bits included), which keeps file round-trips byte-identical.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpikeStream {
    geometry: StreamGeometry,
    data: Vec<u8>,
}

impl SpikeStream {
    /// Wraps packed bytes laid out per the module layout.
    ///
    /// The buffer length must be exactly `num_steps * bytes_per_frame`.
    pub fn from_packed(data: Vec<u8>, geometry: StreamGeometry) -> Result<Self> {
        let expected = geometry.total_bytes();
        if data.len() != expected {
            return Err(SpikeError::SizeMismatch {
                expected,
                actual: data.len(),
                num_steps: geometry.num_steps(),
                bytes_per_frame: geometry.bytes_per_frame(),
            });
        }
        Ok(Self { geometry, data })
    }

    /// All-zero stream of the given geometry.
    pub fn zeros(geometry: StreamGeometry) -> Self {
        Self {
            data: vec![0u8; geometry.total_bytes()],
            geometry,
        }
    }

    /// Packs a dense (T, H, W) array; any nonzero sample becomes a spike.
    /// Padding bits are written as zero.
    pub fn from_dense(dense: &[u8], geometry: StreamGeometry) -> Result<Self> {
        let pixels = geometry.pixels();
        if dense.len() != pixels * geometry.num_steps() {
            return Err(SpikeError::FrameSizeMismatch {
                expected: pixels * geometry.num_steps(),
                actual: dense.len(),
            });
        }
        let bpf = geometry.bytes_per_frame();
        let mut data = vec![0u8; geometry.total_bytes()];
        par::for_each_chunk_mut(&mut data, bpf, |k, frame| {
            let src = &dense[k * pixels..(k + 1) * pixels];
            for (p, &v) in src.iter().enumerate() {
                if v != 0 {
                    frame[p >> 3] |= 1 << (p & 7);
                }
            }
        });
        Ok(Self { geometry, data })
    }

    pub fn geometry(&self) -> StreamGeometry {
        self.geometry
    }

    pub fn height(&self) -> usize {
        self.geometry.height()
    }

    pub fn width(&self) -> usize {
        self.geometry.width()
    }

    pub fn num_steps(&self) -> usize {
        self.geometry.num_steps()
    }

    /// The packed buffer, frame-major.
    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.data
    }

    /// Packed bytes of one polling frame. Panics if `step` is out of range.
    pub fn frame_bytes(&self, step: usize) -> &[u8] {
        let bpf = self.geometry.bytes_per_frame();
        &self.data[step * bpf..(step + 1) * bpf]
    }

    /// Spike bit at `(row, col)` of polling step `step`.
    /// Panics if any index is out of range.
    pub fn get(&self, row: usize, col: usize, step: usize) -> bool {
        assert!(
            row < self.height() && col < self.width() && step < self.num_steps(),
            "index ({row}, {col}, {step}) out of range for {}",
            self.geometry
        );
        let p = row * self.width() + col;
        let byte = step * self.geometry.bytes_per_frame() + (p >> 3);
        self.data[byte] & (1 << (p & 7)) != 0
    }

    /// Sets the spike bit at `(row, col)` of step `step`.
    /// Panics if any index is out of range.
    pub fn set(&mut self, row: usize, col: usize, step: usize, value: bool) {
        assert!(
            row < self.height() && col < self.width() && step < self.num_steps(),
            "index ({row}, {col}, {step}) out of range for {}",
            self.geometry
        );
        let p = row * self.width() + col;
        let byte = step * self.geometry.bytes_per_frame() + (p >> 3);
        if value {
            self.data[byte] |= 1 << (p & 7);
        } else {
            self.data[byte] &= !(1 << (p & 7));
        }
    }

    /// Copies a temporal window of `length` frames starting at `start` into a
    /// new stream. Frame m of the result is bit-identical to frame start+m.
    pub fn get_block(&self, start: usize, length: usize) -> Result<SpikeStream> {
        self.check_window(start, length)?;
        let bpf = self.geometry.bytes_per_frame();
        let data = self.data[start * bpf..(start + length) * bpf].to_vec();
        Ok(SpikeStream {
            geometry: self.geometry.with_steps(length),
            data,
        })
    }

    /// Expands to a dense (T, H, W) array of 0/1 bytes.
    pub fn to_dense(&self) -> Vec<u8> {
        let pixels = self.geometry.pixels();
        let bpf = self.geometry.bytes_per_frame();
        let mut dense = vec![0u8; pixels * self.num_steps()];
        par::for_each_chunk_mut(&mut dense, pixels.max(1), |k, out| {
            let frame = &self.data[k * bpf..(k + 1) * bpf];
            for (p, v) in out.iter_mut().enumerate() {
                *v = (frame[p >> 3] >> (p & 7)) & 1;
            }
        });
        dense
    }

    /// Per-pixel spike counts over the window `[start, start+length)`.
    /// Returns a row-major H×W map; every entry is at most `length`.
    pub fn spike_count_map(&self, start: usize, length: usize) -> Result<Vec<u32>> {
        self.check_window(start, length)?;
        let bpf = self.geometry.bytes_per_frame();
        let mut counts = vec![0u32; self.geometry.pixels()];
        // One chunk of 8 counters per packed byte; the tail chunk is shorter
        // when H*W % 8 != 0, which keeps padding bits out of the counts.
        par::for_each_chunk_mut(&mut counts, 8, |byte_idx, chunk| {
            for k in start..start + length {
                let b = self.data[k * bpf + byte_idx];
                for (bit, c) in chunk.iter_mut().enumerate() {
                    *c += u32::from((b >> bit) & 1);
                }
            }
        });
        Ok(counts)
    }

    /// Total spikes in the stream.
    pub fn count_spikes(&self) -> u64 {
        let bpf = self.geometry.bytes_per_frame();
        let full_bytes = self.geometry.pixels() / 8;
        let tail_bits = self.geometry.pixels() % 8;
        let tail_mask = (1u8 << tail_bits).wrapping_sub(1);
        par::map_chunks(&self.data, bpf, |_, frame| {
            let mut n = 0u64;
            for &b in &frame[..full_bytes] {
                n += u64::from(b.count_ones());
            }
            if tail_bits != 0 {
                n += u64::from((frame[full_bytes] & tail_mask).count_ones());
            }
            n
        })
        .into_iter()
        .sum()
    }

    /// Mirrors rows within every frame (some sensors read out bottom-up).
    pub fn flip_vertical(&self) -> SpikeStream {
        let (h, w) = (self.height(), self.width());
        let bpf = self.geometry.bytes_per_frame();
        let mut out = SpikeStream::zeros(self.geometry);
        par::for_each_chunk_mut(&mut out.data, bpf, |k, frame| {
            let src = &self.data[k * bpf..(k + 1) * bpf];
            for i in 0..h {
                let si = h - 1 - i;
                for j in 0..w {
                    let sp = si * w + j;
                    if src[sp >> 3] & (1 << (sp & 7)) != 0 {
                        let dp = i * w + j;
                        frame[dp >> 3] |= 1 << (dp & 7);
                    }
                }
            }
        });
        out
    }

    fn check_window(&self, start: usize, length: usize) -> Result<()> {
        let end = start.checked_add(length);
        if end.is_none() || end.unwrap() > self.num_steps() {
            return Err(SpikeError::WindowOutOfRange {
                start,
                length,
                num_steps: self.num_steps(),
            });
        }
        Ok(())
    }
}
