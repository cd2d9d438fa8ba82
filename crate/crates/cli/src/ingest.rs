//! Reading and writing sequences in the four supported stream formats.

use std::fmt;
use std::str::FromStr;

use jointstat::model::SampleSpace;
use jointstat::statistics::Sequence;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IngestError {
    #[error("malformed input at byte {offset}: {reason}")]
    MalformedInput { offset: usize, reason: String },
    #[error("value {value} at byte {offset} is outside [0, 1]")]
    OutOfRangeFloat { offset: usize, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamFormat {
    /// Bytes, most significant bit first within each byte.
    BitsPacked,
    /// `0`/`1` characters; whitespace ignored.
    BitsAscii,
    /// One decimal number per line.
    FloatsText,
    /// 8-byte little-endian IEEE-754 doubles.
    FloatsLe64,
}

impl StreamFormat {
    pub fn space(self) -> SampleSpace {
        match self {
            StreamFormat::BitsPacked | StreamFormat::BitsAscii => {
                SampleSpace::Finite { alphabet: 2 }
            }
            StreamFormat::FloatsText | StreamFormat::FloatsLe64 => SampleSpace::UnitInterval,
        }
    }
}

impl FromStr for StreamFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bits_packed" => Ok(StreamFormat::BitsPacked),
            "bits_ascii" => Ok(StreamFormat::BitsAscii),
            "floats_text" => Ok(StreamFormat::FloatsText),
            "floats_le64" => Ok(StreamFormat::FloatsLe64),
            other => Err(format!("unknown stream format {other}")),
        }
    }
}

impl fmt::Display for StreamFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StreamFormat::BitsPacked => "bits_packed",
            StreamFormat::BitsAscii => "bits_ascii",
            StreamFormat::FloatsText => "floats_text",
            StreamFormat::FloatsLe64 => "floats_le64",
        })
    }
}

fn malformed(offset: usize, reason: impl Into<String>) -> IngestError {
    IngestError::MalformedInput {
        offset,
        reason: reason.into(),
    }
}

fn unit(value: f64, offset: usize) -> Result<f64, IngestError> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(IngestError::OutOfRangeFloat { offset, value })
    }
}

/// Parses `bytes`; `length` limits packed bits (tail bits are ignored).
pub fn ingest(
    bytes: &[u8],
    format: StreamFormat,
    length: Option<usize>,
) -> Result<Sequence, IngestError> {
    let data: Vec<f64> = match format {
        StreamFormat::BitsPacked => {
            let available = bytes.len() * 8;
            let n = length.unwrap_or(available);
            if n > available {
                return Err(malformed(
                    bytes.len(),
                    format!("declared length {n} exceeds the {available} bits present"),
                ));
            }
            (0..n)
                .map(|i| ((bytes[i / 8] >> (7 - i % 8)) & 1) as f64)
                .collect()
        }
        StreamFormat::BitsAscii => {
            let mut out = Vec::with_capacity(bytes.len());
            for (offset, &b) in bytes.iter().enumerate() {
                match b {
                    b'0' => out.push(0.0),
                    b'1' => out.push(1.0),
                    b if b.is_ascii_whitespace() => {}
                    other => {
                        return Err(malformed(offset, format!("unexpected byte 0x{other:02x}")))
                    }
                }
            }
            out
        }
        StreamFormat::FloatsText => {
            let text = std::str::from_utf8(bytes)
                .map_err(|e| malformed(e.valid_up_to(), "invalid UTF-8"))?;
            let mut out = Vec::new();
            let mut offset = 0;
            for line in text.split_inclusive('\n') {
                let trimmed = line.trim();
                if !trimmed.is_empty() {
                    let value: f64 = trimmed.parse().map_err(|_| {
                        malformed(offset, format!("cannot parse {trimmed:?} as a number"))
                    })?;
                    out.push(unit(value, offset)?);
                }
                offset += line.len();
            }
            out
        }
        StreamFormat::FloatsLe64 => {
            if !bytes.len().is_multiple_of(8) {
                return Err(malformed(
                    bytes.len() - bytes.len() % 8,
                    "trailing partial 8-byte value",
                ));
            }
            bytes
                .chunks_exact(8)
                .enumerate()
                .map(|(i, c)| unit(f64::from_le_bytes(c.try_into().expect("8 bytes")), 8 * i))
                .collect::<Result<_, _>>()?
        }
    };
    if data.is_empty() {
        return Err(malformed(0, "no elements"));
    }
    Sequence::new(format.space(), data).map_err(|e| malformed(0, e.to_string()))
}

/// Serialises a sequence so that [`ingest`] reads it back unchanged.
pub fn render(seq: &Sequence, format: StreamFormat) -> Vec<u8> {
    let data = seq.data();
    match format {
        StreamFormat::BitsPacked => {
            let mut out = vec![0u8; data.len().div_ceil(8)];
            for (i, &b) in data.iter().enumerate() {
                if b == 1.0 {
                    out[i / 8] |= 0x80 >> (i % 8);
                }
            }
            out
        }
        StreamFormat::BitsAscii => data
            .iter()
            .map(|&b| if b == 1.0 { b'1' } else { b'0' })
            .collect(),
        StreamFormat::FloatsText => data
            .iter()
            .flat_map(|x| format!("{x:?}\n").into_bytes())
            .collect(),
        StreamFormat::FloatsLe64 => data.iter().flat_map(|x| x.to_le_bytes()).collect(),
    }
}
