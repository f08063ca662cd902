//! Replay block stream wire format.
//!
//! Blocks carry whole polling frames plus a 16-byte little-endian header:
//!
//! ```text
//! offset  size  field
//!      0     8  sequence number (u64)
//!      8     4  payload length in bytes (u32)
//!     12     2  flags (u16); bit 0 = end of stream
//!     14     2  reserved, written as zero
//! ```
//!
//! The same framing is used on disk (`.blk` captures) and over a local
//! socket for remote replay. End of stream is a zero-payload block with the
//! EOS flag set, so every stage can drain deterministically.

use crate::error::{Result, SpikeError};
use std::io::{ErrorKind, Read, Write};

pub const BLOCK_HEADER_LEN: usize = 16;
pub const FLAG_END_OF_STREAM: u16 = 0x0001;

/// Upper bound on a single block payload; headers asking for more are
/// treated as corrupt rather than honored as allocations.
pub const MAX_PAYLOAD_LEN: u32 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockHeader {
    pub sequence: u64,
    pub payload_len: u32,
    pub flags: u16,
}

impl BlockHeader {
    pub fn encode(&self) -> [u8; BLOCK_HEADER_LEN] {
        let mut out = [0u8; BLOCK_HEADER_LEN];
        out[0..8].copy_from_slice(&self.sequence.to_le_bytes());
        out[8..12].copy_from_slice(&self.payload_len.to_le_bytes());
        out[12..14].copy_from_slice(&self.flags.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8; BLOCK_HEADER_LEN]) -> Self {
        Self {
            sequence: u64::from_le_bytes(bytes[0..8].try_into().unwrap()),
            payload_len: u32::from_le_bytes(bytes[8..12].try_into().unwrap()),
            flags: u16::from_le_bytes(bytes[12..14].try_into().unwrap()),
        }
    }

    pub fn is_end_of_stream(&self) -> bool {
        self.flags & FLAG_END_OF_STREAM != 0
    }
}

/// One transport unit: a header and the packed frames it describes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawBlock {
    pub header: BlockHeader,
    pub payload: Vec<u8>,
}

impl RawBlock {
    pub fn data(sequence: u64, payload: Vec<u8>) -> Self {
        Self {
            header: BlockHeader {
                sequence,
                payload_len: payload.len() as u32,
                flags: 0,
            },
            payload,
        }
    }

    pub fn end_of_stream(sequence: u64) -> Self {
        Self {
            header: BlockHeader {
                sequence,
                payload_len: 0,
                flags: FLAG_END_OF_STREAM,
            },
            payload: Vec::new(),
        }
    }

    pub fn is_end_of_stream(&self) -> bool {
        self.header.is_end_of_stream()
    }
}

/// Writes framed blocks to any byte sink (file, socket).
pub struct BlockWriter<W: Write> {
    inner: W,
}

impl<W: Write> BlockWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn write_block(&mut self, block: &RawBlock) -> Result<()> {
        debug_assert_eq!(block.header.payload_len as usize, block.payload.len());
        self.inner
            .write_all(&block.header.encode())
            .and_then(|_| self.inner.write_all(&block.payload))
            .map_err(|e| SpikeError::io("writing block stream", e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner
            .flush()
            .map_err(|e| SpikeError::io("flushing block stream", e))
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

/// Reads framed blocks from any byte source.
pub struct BlockReader<R: Read> {
    inner: R,
}

impl<R: Read> BlockReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner }
    }

    /// Next block, or `None` on a clean end of input between blocks.
    /// Truncation inside a block is an error.
    pub fn read_block(&mut self) -> Result<Option<RawBlock>> {
        let mut header_bytes = [0u8; BLOCK_HEADER_LEN];
        match read_exact_or_eof(&mut self.inner, &mut header_bytes) {
            Ok(false) => return Ok(None),
            Ok(true) => {}
            Err(e) => return Err(SpikeError::io("reading block header", e)),
        }
        let header = BlockHeader::decode(&header_bytes);
        if header.payload_len > MAX_PAYLOAD_LEN {
            return Err(SpikeError::MalformedHeader(format!(
                "payload length {} exceeds the {} byte limit",
                header.payload_len, MAX_PAYLOAD_LEN
            )));
        }
        let mut payload = vec![0u8; header.payload_len as usize];
        self.inner
            .read_exact(&mut payload)
            .map_err(|e| SpikeError::io("reading block payload", e))?;
        Ok(Some(RawBlock { header, payload }))
    }
}

/// Fills `buf` completely, or returns Ok(false) if the input ended before
/// the first byte.
fn read_exact_or_eof<R: Read>(reader: &mut R, buf: &mut [u8]) -> std::io::Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => {
                return Err(std::io::Error::new(
                    ErrorKind::UnexpectedEof,
                    format!("block truncated after {filled} bytes"),
                ))
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_16_byte_little_endian() {
        let header = BlockHeader {
            sequence: 0x0102_0304_0506_0708,
            payload_len: 0x0A0B_0C0D,
            flags: 0x00FF,
        };
        let bytes = header.encode();
        assert_eq!(bytes.len(), 16);
        assert_eq!(&bytes[0..8], &[8, 7, 6, 5, 4, 3, 2, 1]);
        assert_eq!(&bytes[8..12], &[0x0D, 0x0C, 0x0B, 0x0A]);
        assert_eq!(&bytes[12..14], &[0xFF, 0x00]);
        assert_eq!(&bytes[14..16], &[0, 0]);
        assert_eq!(BlockHeader::decode(&bytes), header);
    }

    #[test]
    fn block_stream_round_trip() {
        let blocks = vec![
            RawBlock::data(0, vec![1, 2, 3]),
            RawBlock::data(1, vec![]),
            RawBlock::data(2, (0..255).collect()),
            RawBlock::end_of_stream(3),
        ];
        let mut writer = BlockWriter::new(Vec::new());
        for b in &blocks {
            writer.write_block(b).unwrap();
        }
        let bytes = writer.into_inner();

        let mut reader = BlockReader::new(bytes.as_slice());
        for expected in &blocks {
            assert_eq!(&reader.read_block().unwrap().unwrap(), expected);
        }
        assert!(reader.read_block().unwrap().is_none());
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let mut writer = BlockWriter::new(Vec::new());
        writer.write_block(&RawBlock::data(0, vec![9; 64])).unwrap();
        let mut bytes = writer.into_inner();
        bytes.truncate(bytes.len() - 10);
        let mut reader = BlockReader::new(bytes.as_slice());
        assert!(reader.read_block().is_err());
    }

    #[test]
    fn absurd_payload_length_is_malformed() {
        let header = BlockHeader {
            sequence: 0,
            payload_len: u32::MAX,
            flags: 0,
        };
        let mut reader = BlockReader::new(&header.encode()[..]);
        assert!(matches!(
            reader.read_block(),
            Err(SpikeError::MalformedHeader(_))
        ));
    }

    #[test]
    fn eos_flag_round_trips() {
        let block = RawBlock::end_of_stream(42);
        assert!(block.is_end_of_stream());
        assert_eq!(block.header.payload_len, 0);
    }
}
