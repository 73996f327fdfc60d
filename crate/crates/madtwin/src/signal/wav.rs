//! Minimal RIFF/WAVE I/O: 16-bit PCM and 32-bit IEEE float, mono or stereo.
//!
//! Reading always yields mono `f64` samples in [-1, 1]; stereo files are
//! downmixed by averaging the two channels. Writing emits mono files in
//! either sample format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Sample encoding for written files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    /// 16-bit signed PCM (format tag 1).
    Pcm16,
    /// 32-bit IEEE float (format tag 3).
    Float32,
}

/// Decoded mono audio.
#[derive(Debug, Clone)]
pub struct WavAudio {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

fn bad(path: &Path, what: &str) -> Error {
    Error::DatasetLayout(format!("{}: {}", path.display(), what))
}

fn read_u16(buf: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([buf[at], buf[at + 1]])
}

fn read_u32(buf: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([buf[at], buf[at + 1], buf[at + 2], buf[at + 3]])
}

/// Reads a WAV file, downmixing stereo to mono by channel averaging.
pub fn read_wav(path: &Path) -> Result<WavAudio> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad(path, "not a RIFF/WAVE file"));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // tag, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    let mut at = 12;
    while at + 8 <= bytes.len() {
        let id = &bytes[at..at + 4];
        let size = read_u32(&bytes, at + 4) as usize;
        let body = at + 8;
        if body + size > bytes.len() {
            return Err(bad(path, "truncated chunk"));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(bad(path, "fmt chunk too short"));
                }
                fmt = Some((
                    read_u16(&bytes, body),
                    read_u16(&bytes, body + 2),
                    read_u32(&bytes, body + 4),
                    read_u16(&bytes, body + 14),
                ));
            }
            b"data" => data = Some(&bytes[body..body + size]),
            _ => {}
        }
        // Chunks are word-aligned.
        at = body + size + (size & 1);
    }

    let (tag, channels, rate, bits) = fmt.ok_or_else(|| bad(path, "missing fmt chunk"))?;
    let data = data.ok_or_else(|| bad(path, "missing data chunk"))?;
    if channels != 1 && channels != 2 {
        return Err(bad(path, &format!("unsupported channel count {channels}")));
    }

    let decode: fn(&[u8]) -> f64 = match (tag, bits) {
        (1, 16) => |b: &[u8]| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0,
        (3, 32) => |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
        _ => {
            return Err(bad(
                path,
                &format!("unsupported format: tag {tag}, {bits} bits"),
            ))
        }
    };
    let bytes_per = bits as usize / 8;
    let stride = bytes_per * channels as usize;
    let frames = data.len() / stride;
    let mut samples = Vec::with_capacity(frames);
    for f in 0..frames {
        let at = f * stride;
        let mut acc = 0.0;
        for c in 0..channels as usize {
            acc += decode(&data[at + c * bytes_per..at + (c + 1) * bytes_per]);
        }
        samples.push(acc / channels as f64);
    }
    Ok(WavAudio {
        samples,
        sample_rate: rate,
    })
}

/// Writes mono audio in the requested sample format.
pub fn write_wav(
    path: &Path,
    samples: &[f64],
    sample_rate: u32,
    format: SampleFormat,
) -> Result<()> {
    let (tag, bits): (u16, u16) = match format {
        SampleFormat::Pcm16 => (1, 16),
        SampleFormat::Float32 => (3, 32),
    };
    let bytes_per = bits as u32 / 8;
    let data_len = samples.len() as u32 * bytes_per;
    // Non-PCM formats carry a fact chunk with the frame count.
    let fact_len = if tag == 3 { 12 } else { 0 };
    let riff_len = 4 + (8 + 16) + fact_len + (8 + data_len);

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(b"RIFF")?;
    w.write_all(&riff_len.to_le_bytes())?;
    w.write_all(b"WAVE")?;
    w.write_all(b"fmt ")?;
    w.write_all(&16u32.to_le_bytes())?;
    w.write_all(&tag.to_le_bytes())?;
    w.write_all(&1u16.to_le_bytes())?;
    w.write_all(&sample_rate.to_le_bytes())?;
    w.write_all(&(sample_rate * bytes_per).to_le_bytes())?;
    w.write_all(&(bytes_per as u16).to_le_bytes())?;
    w.write_all(&bits.to_le_bytes())?;
    if tag == 3 {
        w.write_all(b"fact")?;
        w.write_all(&4u32.to_le_bytes())?;
        w.write_all(&(samples.len() as u32).to_le_bytes())?;
    }
    w.write_all(b"data")?;
    w.write_all(&data_len.to_le_bytes())?;
    match format {
        SampleFormat::Pcm16 => {
            for &s in samples {
                let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                w.write_all(&v.to_le_bytes())?;
            }
        }
        SampleFormat::Float32 => {
            for &s in samples {
                w.write_all(&(s as f32).to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
