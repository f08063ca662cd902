//! Real-time acquisition pipeline.
//!
//! Three stages run as independent workers connected by bounded queues,
//! mirroring how spike-camera capture hardware is read out:
//!
//! 1. **Source** — reads raw frames (file, memory, or a framed block stream
//!    from a socket), packs them into sequence-numbered blocks and emits them
//!    at the configured polling rate.
//! 2. **Assembler** — parses blocks, concatenates their payloads in spatial
//!    and temporal order, and fills pooled slots of `t_cusum` frames each.
//! 3. **Transfer** — moves ready slots to the bounded app queue by handle.
//!    When the app side is full the slot is released straight back and
//!    counted dropped; the acquisition side never waits on consumers.
//!
//! Consumption is either a blocking pull ([`Session::next_piece`]) or
//! idle-gated multi-task dispatch ([`Session::dispatch_blocking`]): a piece
//! is handed to *all* tasks simultaneously only when every task worker is
//! idle, otherwise it is dropped, so every task processes exactly the same
//! piece indices. Losses can occur only at the app queue and the dispatch
//! gate, where the design prescribes them; block and lib-pool handoffs block
//! instead of dropping.
//!
//! At quiescence `produced = delivered + dropped` holds exactly, in both
//! piece and frame units.

mod block;
mod pool;

pub use block::{
    BlockHeader, BlockReader, BlockWriter, RawBlock, BLOCK_HEADER_LEN, FLAG_END_OF_STREAM,
    MAX_PAYLOAD_LEN,
};
pub use pool::{FramePool, FrameSlot, SlotState};

use crate::codec::StreamMeta;
use crate::error::{Result, SpikeError};
use crate::stream::{SpikeStream, StreamGeometry};
use crossbeam_channel::{bounded, select, Receiver, RecvTimeoutError, Sender, TrySendError};
use std::io::Read;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

/// Knobs of the acquisition pipeline. The defaults batch 10 ms of stream at
/// the nominal 40 kHz polling rate into each block and piece and keep
/// steady-state memory well under 100 MB at 250×400.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    /// Polling frames per assembled piece (T_cusum).
    pub t_cusum: usize,
    /// Polling frames per source block.
    pub block_frames: usize,
    /// Replay pacing in polling frames per second; `None` replays unpaced.
    pub rate_fps: Option<f64>,
    /// Slots in the acquisition-side pool.
    pub lib_pool_capacity: usize,
    /// Bounded app-side queue length; 0 degenerates to hand-to-hand transfer.
    pub app_queue_capacity: usize,
    /// Bounded block queue length between source and assembler.
    pub block_queue_capacity: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            t_cusum: 400,
            block_frames: 400,
            rate_fps: None,
            lib_pool_capacity: 8,
            app_queue_capacity: 2,
            block_queue_capacity: 8,
        }
    }
}

impl PipelineConfig {
    fn validate(&self) -> Result<()> {
        if self.t_cusum == 0 || self.block_frames == 0 || self.lib_pool_capacity == 0 {
            return Err(SpikeError::domain(
                "t_cusum, block_frames and lib_pool_capacity must be at least 1",
            ));
        }
        if let Some(rate) = self.rate_fps {
            if !(rate > 0.0) {
                return Err(SpikeError::domain(format!(
                    "replay rate must be positive, got {rate}"
                )));
            }
        }
        Ok(())
    }
}

/// Where the pipeline's blocks come from.
pub enum BlockSource {
    /// Rate-controlled replay of a raw `.dat` file.
    DatFile(PathBuf),
    /// Rate-controlled replay of in-memory raw frames.
    DatBytes(Arc<Vec<u8>>),
    /// Already-framed block stream (socket remote mode, `.blk` captures);
    /// pacing is the sender's business.
    BlockStream(Box<dyn Read + Send>),
}

// ---------------------------------------------------------------------------
// Stats

#[derive(Debug, Default)]
struct SharedCounters {
    blocks_emitted: AtomicU64,
    blocks_received: AtomicU64,
    gap_events: AtomicU64,
    pieces_produced: AtomicU64,
    pieces_delivered: AtomicU64,
    pieces_dropped: AtomicU64,
    frames_produced: AtomicU64,
    frames_delivered: AtomicU64,
    frames_dropped: AtomicU64,
    tasks: Mutex<Vec<TaskStats>>,
}

/// Per-task completion counters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TaskStats {
    pub name: String,
    pub processed: u64,
    pub failed: u64,
}

/// Quiescent snapshot of the pipeline counters.
///
/// `produced` counts what the assembler turned into ready pieces,
/// `delivered` what a consumer actually took, `dropped` what was released
/// back unprocessed. Frame counts weigh each piece by its frame count (the
/// final piece of a stream may be short).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineStats {
    pub blocks_emitted: u64,
    pub blocks_received: u64,
    pub gap_events: u64,
    pub pieces_produced: u64,
    pub pieces_delivered: u64,
    pub pieces_dropped: u64,
    pub frames_produced: u64,
    pub frames_delivered: u64,
    pub frames_dropped: u64,
    pub tasks: Vec<TaskStats>,
}

impl PipelineStats {
    /// Line-oriented `key=value` rendering, one counter per line.
    pub fn kv_lines(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("blocks_emitted={}\n", self.blocks_emitted));
        out.push_str(&format!("blocks_received={}\n", self.blocks_received));
        out.push_str(&format!("gap_events={}\n", self.gap_events));
        out.push_str(&format!("pieces_produced={}\n", self.pieces_produced));
        out.push_str(&format!("pieces_delivered={}\n", self.pieces_delivered));
        out.push_str(&format!("pieces_dropped={}\n", self.pieces_dropped));
        out.push_str(&format!("frames_produced={}\n", self.frames_produced));
        out.push_str(&format!("frames_delivered={}\n", self.frames_delivered));
        out.push_str(&format!("frames_dropped={}\n", self.frames_dropped));
        for task in &self.tasks {
            out.push_str(&format!("task.{}.processed={}\n", task.name, task.processed));
            out.push_str(&format!("task.{}.failed={}\n", task.name, task.failed));
        }
        out
    }

    /// Whether produced = delivered + dropped holds in both units.
    pub fn is_conserved(&self) -> bool {
        self.pieces_produced == self.pieces_delivered + self.pieces_dropped
            && self.frames_produced == self.frames_delivered + self.frames_dropped
    }
}

/// Cloneable live view of the pipeline counters.
#[derive(Clone)]
pub struct StatsHandle(Arc<SharedCounters>);

impl StatsHandle {
    pub fn snapshot(&self) -> PipelineStats {
        let c = &self.0;
        PipelineStats {
            blocks_emitted: c.blocks_emitted.load(Ordering::Relaxed),
            blocks_received: c.blocks_received.load(Ordering::Relaxed),
            gap_events: c.gap_events.load(Ordering::Relaxed),
            pieces_produced: c.pieces_produced.load(Ordering::Relaxed),
            pieces_delivered: c.pieces_delivered.load(Ordering::Relaxed),
            pieces_dropped: c.pieces_dropped.load(Ordering::Relaxed),
            frames_produced: c.frames_produced.load(Ordering::Relaxed),
            frames_delivered: c.frames_delivered.load(Ordering::Relaxed),
            frames_dropped: c.frames_dropped.load(Ordering::Relaxed),
            tasks: c.tasks.lock().unwrap().clone(),
        }
    }
}

impl SharedCounters {
    fn add(&self, counter: &AtomicU64, n: u64) {
        counter.fetch_add(n, Ordering::Relaxed);
    }

    fn drop_piece(&self, frames: usize) {
        self.add(&self.pieces_dropped, 1);
        self.add(&self.frames_dropped, frames as u64);
    }

    fn deliver_piece(&self, frames: usize) {
        self.add(&self.pieces_delivered, 1);
        self.add(&self.frames_delivered, frames as u64);
    }
}

// ---------------------------------------------------------------------------
// Tasks

/// Outcome of one task on one piece, delivered on the results channel. The
/// pipeline itself never interprets the payload strings.
#[derive(Debug, Clone)]
pub struct TaskRecord {
    pub task: String,
    pub piece_index: u64,
    pub frames: usize,
    pub outcome: std::result::Result<String, String>,
}

/// A named per-piece computation run on its own worker thread.
pub struct Task {
    name: String,
    run: Box<dyn FnMut(u64, &SpikeStream) -> std::result::Result<String, String> + Send>,
}

impl Task {
    pub fn new(
        name: impl Into<String>,
        run: impl FnMut(u64, &SpikeStream) -> std::result::Result<String, String> + Send + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            run: Box::new(run),
        }
    }

    /// Trivial ingestion task: popcounts the piece and reports the total.
    pub fn counting() -> Self {
        Self::new("count", |_, stream: &SpikeStream| {
            Ok(format!("spikes={}", stream.count_spikes()))
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

// ---------------------------------------------------------------------------
// Stage plumbing

enum PieceMsg {
    Piece(FrameSlot),
    Eos,
}

struct Shared {
    pool: Arc<FramePool>,
    stats: Arc<SharedCounters>,
    cancel: Arc<AtomicBool>,
    fatal: Arc<Mutex<Option<SpikeError>>>,
}

impl Shared {
    fn record_fatal(&self, err: SpikeError) {
        log::error!("pipeline stage failed: {err}");
        let mut slot = self.fatal.lock().unwrap();
        if slot.is_none() {
            *slot = Some(err);
        }
        self.cancel.store(true, Ordering::Relaxed);
    }

    fn cancelled(&self) -> bool {
        self.cancel.load(Ordering::Relaxed)
    }
}

const POLL: Duration = Duration::from_millis(25);

/// Sleeps until `emitted` frames' worth of wall time has passed since
/// `start`, in cancellable slices.
fn pace(start: Instant, rate: f64, emitted: u64, cancel: &AtomicBool) {
    let due = start + Duration::from_secs_f64(emitted as f64 / rate);
    loop {
        if cancel.load(Ordering::Relaxed) {
            return;
        }
        let now = Instant::now();
        if now >= due {
            return;
        }
        std::thread::sleep((due - now).min(Duration::from_millis(50)));
    }
}

/// Reads whole frames from `reader` and emits paced, sequence-numbered
/// blocks (final partial block short, then an EOS block). The emit closure
/// returns false to stop early (downstream gone).
fn pump_raw_blocks<F>(
    reader: &mut dyn Read,
    total_frames: u64,
    bytes_per_frame: usize,
    block_frames: usize,
    rate_fps: Option<f64>,
    cancel: &AtomicBool,
    mut emit: F,
) -> Result<u64>
where
    F: FnMut(RawBlock) -> bool,
{
    let start = Instant::now();
    let mut sequence = 0u64;
    let mut frames_sent = 0u64;
    while frames_sent < total_frames {
        if cancel.load(Ordering::Relaxed) {
            return Ok(sequence);
        }
        let frames = (total_frames - frames_sent).min(block_frames as u64) as usize;
        let mut payload = vec![0u8; frames * bytes_per_frame];
        reader
            .read_exact(&mut payload)
            .map_err(|e| SpikeError::io("reading replay frames", e))?;
        frames_sent += frames as u64;
        if let Some(rate) = rate_fps {
            // A real sensor finishes capturing a block only after its last
            // polling interval has elapsed.
            pace(start, rate, frames_sent, cancel);
            if cancel.load(Ordering::Relaxed) {
                return Ok(sequence);
            }
        }
        if !emit(RawBlock::data(sequence, payload)) {
            return Ok(sequence);
        }
        sequence += 1;
    }
    emit(RawBlock::end_of_stream(sequence));
    Ok(sequence + 1)
}

/// Replays a raw spike file as a framed block stream into any writer (file
/// capture or socket). Returns the number of blocks written including EOS.
pub fn replay_to_writer<W: std::io::Write>(
    source: BlockSource,
    meta: &StreamMeta,
    config: &PipelineConfig,
    writer: W,
) -> Result<u64> {
    config.validate()?;
    let bpf = meta.bytes_per_frame();
    let (mut reader, total_frames) = open_raw_source(source, meta)?;
    let cancel = AtomicBool::new(false);
    let mut writer = BlockWriter::new(writer);
    let mut write_error = None;
    let blocks = pump_raw_blocks(
        reader.as_mut(),
        total_frames,
        bpf,
        config.block_frames,
        config.rate_fps,
        &cancel,
        |block| match writer.write_block(&block) {
            Ok(()) => true,
            Err(e) => {
                write_error = Some(e);
                false
            }
        },
    )?;
    if let Some(e) = write_error {
        return Err(e);
    }
    writer.flush()?;
    Ok(blocks)
}

fn open_raw_source(
    source: BlockSource,
    meta: &StreamMeta,
) -> Result<(Box<dyn Read + Send>, u64)> {
    match source {
        BlockSource::DatFile(path) => {
            let file = std::fs::File::open(&path)
                .map_err(|e| SpikeError::io(format!("opening {}", path.display()), e))?;
            let size = file
                .metadata()
                .map_err(|e| SpikeError::io(format!("stat {}", path.display()), e))?
                .len();
            let frames = crate::codec::frames_in_len(&path, size, meta)?;
            Ok((Box::new(file), frames))
        }
        BlockSource::DatBytes(bytes) => {
            let frames =
                crate::codec::frames_in_len(std::path::Path::new("<memory>"), bytes.len() as u64, meta)?;
            Ok((Box::new(MemReader { bytes, pos: 0 }), frames))
        }
        BlockSource::BlockStream(_) => unreachable!("framed sources bypass the raw pump"),
    }
}

/// Read adapter over shared bytes (avoids cloning large synthetic streams).
struct MemReader {
    bytes: Arc<Vec<u8>>,
    pos: usize,
}

impl Read for MemReader {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = buf.len().min(self.bytes.len() - self.pos);
        buf[..n].copy_from_slice(&self.bytes[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}

fn source_thread(
    source: BlockSource,
    meta: StreamMeta,
    config: PipelineConfig,
    shared: Arc<Shared>,
    tx: Sender<RawBlock>,
) -> Result<()> {
    match source {
        BlockSource::BlockStream(reader) => forward_block_stream(reader, &shared, &tx),
        raw => {
            let bpf = meta.bytes_per_frame();
            let (mut reader, total_frames) = open_raw_source(raw, &meta)?;
            pump_raw_blocks(
                reader.as_mut(),
                total_frames,
                bpf,
                config.block_frames,
                config.rate_fps,
                &shared.cancel,
                |block| {
                    shared.stats.add(&shared.stats.blocks_emitted, 1);
                    tx.send(block).is_ok()
                },
            )?;
            Ok(())
        }
    }
}

/// Forwards an already-framed block stream, synthesizing an EOS block if the
/// input ends without one.
fn forward_block_stream(
    reader: Box<dyn Read + Send>,
    shared: &Shared,
    tx: &Sender<RawBlock>,
) -> Result<()> {
    let mut reader = BlockReader::new(reader);
    let mut last_sequence = 0u64;
    loop {
        if shared.cancelled() {
            return Ok(());
        }
        match reader.read_block()? {
            Some(block) => {
                shared.stats.add(&shared.stats.blocks_emitted, 1);
                let eos = block.is_end_of_stream();
                last_sequence = block.header.sequence;
                if tx.send(block).is_err() || eos {
                    return Ok(());
                }
            }
            None => {
                log::warn!("block stream ended without an end-of-stream block");
                shared.stats.add(&shared.stats.blocks_emitted, 1);
                let _ = tx.send(RawBlock::end_of_stream(last_sequence + 1));
                return Ok(());
            }
        }
    }
}

fn assembler_thread(
    rx: Receiver<RawBlock>,
    geometry: (usize, usize),
    t_cusum: usize,
    shared: Arc<Shared>,
    out: Sender<PieceMsg>,
) -> Result<()> {
    let bpf = (geometry.0 * geometry.1).div_ceil(8);
    let slot_bytes = t_cusum * bpf;
    let mut current: Option<FrameSlot> = None;
    let mut next_piece_index = 0u64;
    let mut expected_sequence = 0u64;

    let mut finish_piece = |slot: &mut Option<FrameSlot>,
                            next_index: &mut u64|
     -> std::result::Result<(), PieceMsg> {
        let mut slot = slot.take().expect("piece to finish");
        slot.index = *next_index;
        slot.frames = slot.data().len() / bpf;
        *next_index += 1;
        shared
            .pool
            .mark_ready(&slot)
            .expect("assembler owns the filling slot");
        shared.stats.add(&shared.stats.pieces_produced, 1);
        shared
            .stats
            .add(&shared.stats.frames_produced, slot.frames as u64);
        out.send(PieceMsg::Piece(slot)).map_err(|e| e.0)
    };

    loop {
        let block = match rx.recv_timeout(POLL) {
            Ok(block) => block,
            Err(RecvTimeoutError::Timeout) => {
                if shared.cancelled() {
                    break;
                }
                continue;
            }
            Err(RecvTimeoutError::Disconnected) => break,
        };
        shared.stats.add(&shared.stats.blocks_received, 1);
        if block.header.sequence != expected_sequence {
            shared.stats.add(&shared.stats.gap_events, 1);
            log::warn!(
                "block sequence gap: expected {expected_sequence}, got {}",
                block.header.sequence
            );
        }
        expected_sequence = block.header.sequence + 1;

        if block.is_end_of_stream() {
            // Flush a short final piece, then propagate EOS.
            if current.as_ref().is_some_and(|s| !s.data().is_empty()) {
                let _ = finish_piece(&mut current, &mut next_piece_index);
            }
            break;
        }
        if block.payload.len() != block.header.payload_len as usize {
            return Err(SpikeError::MalformedHeader(format!(
                "payload length {} does not match header {}",
                block.payload.len(),
                block.header.payload_len
            )));
        }
        if block.payload.len() % bpf != 0 {
            return Err(SpikeError::MalformedHeader(format!(
                "block {} payload of {} bytes is not whole frames of {bpf} bytes",
                block.header.sequence,
                block.payload.len()
            )));
        }

        let mut offset = 0usize;
        while offset < block.payload.len() {
            if current.is_none() {
                match shared.pool.acquire() {
                    Ok(mut slot) => {
                        slot.data_mut().clear();
                        current = Some(slot);
                    }
                    Err(_) => return Ok(()), // pool closed: shutting down
                }
            }
            let slot = current.as_mut().expect("just acquired");
            let space = slot_bytes - slot.data().len();
            let take = space.min(block.payload.len() - offset);
            slot.data_mut()
                .extend_from_slice(&block.payload[offset..offset + take]);
            offset += take;
            if slot.data().len() == slot_bytes
                && finish_piece(&mut current, &mut next_piece_index).is_err()
            {
                return Ok(()); // downstream gone
            }
        }
    }

    // Cancelled or disconnected with a partial slot: hand it back untracked
    // as produced work.
    if let Some(slot) = current.take() {
        let _ = shared.pool.release(slot);
    }
    let _ = out.send(PieceMsg::Eos);
    Ok(())
}

fn transfer_thread(rx: Receiver<PieceMsg>, tx: Sender<PieceMsg>, shared: Arc<Shared>) {
    loop {
        match rx.recv_timeout(POLL) {
            Ok(PieceMsg::Piece(slot)) => match tx.try_send(PieceMsg::Piece(slot)) {
                Ok(()) => {}
                Err(TrySendError::Full(PieceMsg::Piece(slot)))
                | Err(TrySendError::Disconnected(PieceMsg::Piece(slot))) => {
                    // App side full (or gone): release right back, never stall
                    // the acquisition side.
                    shared.stats.drop_piece(slot.frames);
                    let _ = shared.pool.release(slot);
                }
                Err(_) => unreachable!("we only send pieces here"),
            },
            Ok(PieceMsg::Eos) => {
                let _ = tx.send(PieceMsg::Eos);
                return;
            }
            Err(RecvTimeoutError::Timeout) => {
                if shared.cancelled() {
                    let _ = tx.send(PieceMsg::Eos);
                    return;
                }
            }
            Err(RecvTimeoutError::Disconnected) => {
                let _ = tx.send(PieceMsg::Eos);
                return;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Session

/// A running acquisition pipeline over a replay source.
///
/// Consume it either by pulling assembled pieces with [`next_piece`]
/// (blocking, timeout-bounded) or by handing it a task set with
/// [`dispatch_blocking`]. Dropping the session cancels the stages, drains
/// in-flight work and joins every thread.
///
/// [`next_piece`]: Session::next_piece
/// [`dispatch_blocking`]: Session::dispatch_blocking
pub struct Session {
    geometry: (usize, usize),
    pool: Arc<FramePool>,
    app_rx: Option<Receiver<PieceMsg>>,
    threads: Vec<std::thread::JoinHandle<()>>,
    shared: Arc<Shared>,
    finished: bool,
}

impl Session {
    /// Validates the source against `meta`, spawns the source, assembler and
    /// transfer stages and starts streaming immediately.
    pub fn start(source: BlockSource, meta: &StreamMeta, config: &PipelineConfig) -> Result<Self> {
        config.validate()?;
        let bpf = meta.bytes_per_frame();
        // Fail fast on size problems before spawning anything.
        if let BlockSource::DatFile(path) = &source {
            let size = std::fs::metadata(path)
                .map_err(|e| SpikeError::io(format!("stat {}", path.display()), e))?
                .len();
            crate::codec::frames_in_len(path, size, meta)?;
        }
        if let BlockSource::DatBytes(bytes) = &source {
            crate::codec::frames_in_len(
                std::path::Path::new("<memory>"),
                bytes.len() as u64,
                meta,
            )?;
        }

        let pool = FramePool::new(config.lib_pool_capacity, config.t_cusum * bpf);
        let shared = Arc::new(Shared {
            pool: Arc::clone(&pool),
            stats: Arc::new(SharedCounters::default()),
            cancel: Arc::new(AtomicBool::new(false)),
            fatal: Arc::new(Mutex::new(None)),
        });

        let (block_tx, block_rx) = bounded::<RawBlock>(config.block_queue_capacity.max(1));
        let (ready_tx, ready_rx) = bounded::<PieceMsg>(config.lib_pool_capacity);
        let (app_tx, app_rx) = bounded::<PieceMsg>(config.app_queue_capacity);

        let mut threads = Vec::with_capacity(3);
        {
            let shared = Arc::clone(&shared);
            let meta = meta.clone();
            let config = config.clone();
            threads.push(
                std::thread::Builder::new()
                    .name("spike-source".into())
                    .spawn(move || {
                        if let Err(e) =
                            source_thread(source, meta, config, Arc::clone(&shared), block_tx)
                        {
                            shared.record_fatal(e);
                        }
                    })
                    .map_err(|e| SpikeError::io("spawning source thread", e))?,
            );
        }
        {
            let shared = Arc::clone(&shared);
            let geometry = (meta.height, meta.width);
            let t_cusum = config.t_cusum;
            threads.push(
                std::thread::Builder::new()
                    .name("spike-assembler".into())
                    .spawn(move || {
                        let out = ready_tx;
                        if let Err(e) =
                            assembler_thread(block_rx, geometry, t_cusum, Arc::clone(&shared), out.clone())
                        {
                            let _ = out.send(PieceMsg::Eos);
                            shared.record_fatal(e);
                        }
                    })
                    .map_err(|e| SpikeError::io("spawning assembler thread", e))?,
            );
        }
        {
            let shared = Arc::clone(&shared);
            threads.push(
                std::thread::Builder::new()
                    .name("spike-transfer".into())
                    .spawn(move || transfer_thread(ready_rx, app_tx, shared))
                    .map_err(|e| SpikeError::io("spawning transfer thread", e))?,
            );
        }

        Ok(Self {
            geometry: (meta.height, meta.width),
            pool,
            app_rx: Some(app_rx),
            threads,
            shared,
            finished: false,
        })
    }

    /// Live counter view, safe to poll from another thread.
    pub fn stats_handle(&self) -> StatsHandle {
        StatsHandle(Arc::clone(&self.shared.stats))
    }

    pub fn stats(&self) -> PipelineStats {
        self.stats_handle().snapshot()
    }

    /// Blocking pull of the next assembled piece as an owned stream of
    /// `t_cusum` frames (the final piece may be shorter). Returns `Ok(None)`
    /// once the source is exhausted and drained.
    pub fn next_piece(&mut self, timeout: Duration) -> Result<Option<SpikeStream>> {
        if self.finished {
            return Ok(None);
        }
        let rx = self.app_rx.as_ref().ok_or(SpikeError::Closed)?;
        match rx.recv_timeout(timeout) {
            Ok(PieceMsg::Piece(mut slot)) => {
                self.shared
                    .pool
                    .mark_processing(&slot)
                    .expect("pulled piece is ready");
                let geometry =
                    StreamGeometry::new(self.geometry.0, self.geometry.1, slot.frames)?;
                let stream = SpikeStream::from_packed(slot.data().to_vec(), geometry)?;
                self.shared.stats.deliver_piece(slot.frames);
                slot.data_mut().clear();
                self.shared
                    .pool
                    .release(slot)
                    .expect("pulled piece is processing");
                Ok(Some(stream))
            }
            Ok(PieceMsg::Eos) => {
                self.finished = true;
                Ok(None)
            }
            Err(RecvTimeoutError::Timeout) => {
                if let Some(fatal) = self.shared.fatal.lock().unwrap().take() {
                    return Err(fatal);
                }
                Err(SpikeError::Timeout)
            }
            Err(RecvTimeoutError::Disconnected) => {
                if let Some(fatal) = self.shared.fatal.lock().unwrap().take() {
                    return Err(fatal);
                }
                Err(SpikeError::Closed)
            }
        }
    }

    /// Runs the idle-gated dispatcher over `tasks` until the stream drains,
    /// then shuts the pipeline down and returns the final stats.
    ///
    /// A piece is handed to every task at once iff no task is still busy;
    /// otherwise it is released back and counted dropped, so all tasks see
    /// exactly the same piece indices. Per-piece outcomes go to `results`
    /// when given. A task error (or panic) marks that task failed for the
    /// piece; the slot is recycled once every task finishes either way.
    pub fn dispatch_blocking(
        mut self,
        tasks: Vec<Task>,
        results: Option<Sender<TaskRecord>>,
    ) -> Result<PipelineStats> {
        let app_rx = self.app_rx.take().ok_or(SpikeError::Closed)?;
        let outcome = self.run_dispatcher(app_rx, tasks, results);
        let stats = self.finish();
        outcome?;
        if let Some(fatal) = self.shared.fatal.lock().unwrap().take() {
            return Err(fatal);
        }
        Ok(stats)
    }

    fn run_dispatcher(
        &self,
        app_rx: Receiver<PieceMsg>,
        tasks: Vec<Task>,
        results: Option<Sender<TaskRecord>>,
    ) -> Result<()> {
        struct Worker {
            tx: Sender<(u64, usize, Arc<SpikeStream>)>,
            handle: std::thread::JoinHandle<()>,
        }
        struct InFlight {
            slot: FrameSlot,
            piece: Arc<SpikeStream>,
            remaining: usize,
        }

        {
            let mut task_stats = self.shared.stats.tasks.lock().unwrap();
            *task_stats = tasks
                .iter()
                .map(|t| TaskStats {
                    name: t.name.clone(),
                    ..TaskStats::default()
                })
                .collect();
        }

        let (done_tx, done_rx) = bounded::<(usize, bool)>(tasks.len().max(1));
        let mut workers = Vec::with_capacity(tasks.len());
        for (task_id, task) in tasks.into_iter().enumerate() {
            let (piece_tx, piece_rx) = bounded::<(u64, usize, Arc<SpikeStream>)>(1);
            let done_tx = done_tx.clone();
            let results = results.clone();
            let Task { name, mut run } = task;
            let handle = std::thread::Builder::new()
                .name(format!("spike-task-{name}"))
                .spawn(move || {
                    while let Ok((piece_index, frames, piece)) = piece_rx.recv() {
                        let outcome = catch_unwind(AssertUnwindSafe(|| run(piece_index, &piece)))
                            .unwrap_or_else(|_| Err("task panicked".to_string()));
                        let ok = outcome.is_ok();
                        drop(piece); // release the shared payload before reporting
                        if let Some(results) = &results {
                            let _ = results.send(TaskRecord {
                                task: name.clone(),
                                piece_index,
                                frames,
                                outcome,
                            });
                        }
                        if done_tx.send((task_id, ok)).is_err() {
                            return;
                        }
                    }
                })
                .map_err(|e| SpikeError::io("spawning task worker", e))?;
            workers.push(Worker {
                tx: piece_tx,
                handle,
            });
        }
        drop(done_tx);

        let stats = &self.shared.stats;
        let mut in_flight: Option<InFlight> = None;
        let mut eos = false;
        while !(eos && in_flight.is_none()) {
            select! {
                recv(app_rx) -> msg => match msg {
                    Ok(PieceMsg::Piece(mut slot)) => {
                        if workers.is_empty() || in_flight.is_some() {
                            // Gate: some task is busy (or there is nothing to
                            // run); release the piece right back.
                            stats.drop_piece(slot.frames);
                            let _ = self.shared.pool.release(slot);
                            continue;
                        }
                        self.shared
                            .pool
                            .mark_processing(&slot)
                            .expect("dispatched piece is ready");
                        let geometry = StreamGeometry::new(
                            self.geometry.0,
                            self.geometry.1,
                            slot.frames,
                        )?;
                        let piece = Arc::new(SpikeStream::from_packed(slot.take_data(), geometry)?);
                        stats.deliver_piece(slot.frames);
                        for worker in &workers {
                            worker
                                .tx
                                .send((slot.index, slot.frames, Arc::clone(&piece)))
                                .expect("idle worker accepts a piece");
                        }
                        in_flight = Some(InFlight {
                            remaining: workers.len(),
                            slot,
                            piece,
                        });
                    }
                    Ok(PieceMsg::Eos) | Err(_) => eos = true,
                },
                recv(done_rx) -> msg => match msg {
                    Ok((task_id, ok)) => {
                        {
                            let mut task_stats = stats.tasks.lock().unwrap();
                            if ok {
                                task_stats[task_id].processed += 1;
                            } else {
                                task_stats[task_id].failed += 1;
                            }
                        }
                        let flight = in_flight.as_mut().expect("completion implies a piece in flight");
                        flight.remaining -= 1;
                        if flight.remaining == 0 {
                            let InFlight { mut slot, piece, .. } =
                                in_flight.take().expect("checked above");
                            match Arc::try_unwrap(piece) {
                                Ok(stream) => slot.restore_data(stream.into_bytes()),
                                Err(_) => log::warn!("a task retained a piece; slot buffer reallocated"),
                            }
                            let _ = self.shared.pool.release(slot);
                        }
                    }
                    Err(_) => {
                        // All workers gone (only happens when empty task sets
                        // never spawned any); nothing will complete.
                        if in_flight.is_none() && eos {
                            break;
                        }
                        if workers.is_empty() {
                            std::thread::sleep(POLL);
                        }
                    }
                },
            }
        }

        for worker in &workers {
            drop(worker.tx.clone());
        }
        let handles: Vec<_> = workers
            .into_iter()
            .map(|w| {
                drop(w.tx);
                w.handle
            })
            .collect();
        for handle in handles {
            let _ = handle.join();
        }
        Ok(())
    }

    /// Cancels the stages, drains whatever is still queued (counting it
    /// dropped), joins all threads and returns the quiescent stats.
    pub fn shutdown(mut self) -> PipelineStats {
        self.finish()
    }

    fn finish(&mut self) -> PipelineStats {
        self.shared.cancel.store(true, Ordering::Relaxed);
        self.pool.close();
        if let Some(rx) = self.app_rx.take() {
            loop {
                match rx.recv_timeout(POLL) {
                    Ok(PieceMsg::Piece(slot)) => {
                        self.shared.stats.drop_piece(slot.frames);
                        let _ = self.shared.pool.release(slot);
                    }
                    Ok(PieceMsg::Eos) => {}
                    Err(RecvTimeoutError::Timeout) => {
                        if self.threads.iter().all(|t| t.is_finished()) {
                            break;
                        }
                    }
                    Err(RecvTimeoutError::Disconnected) => break,
                }
            }
        }
        for thread in self.threads.drain(..) {
            let _ = thread.join();
        }
        self.stats()
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        if !self.threads.is_empty() {
            self.finish();
        }
    }
}

/// Convenience wrapper: start a session over `source`, dispatch `tasks`
/// until the stream drains, and return the final stats with the wall time.
pub fn run_with_tasks(
    source: BlockSource,
    meta: &StreamMeta,
    config: &PipelineConfig,
    tasks: Vec<Task>,
    results: Option<Sender<TaskRecord>>,
) -> Result<(PipelineStats, Duration)> {
    let started = Instant::now();
    let session = Session::start(source, meta, config)?;
    let stats = session.dispatch_blocking(tasks, results)?;
    Ok((stats, started.elapsed()))
}
