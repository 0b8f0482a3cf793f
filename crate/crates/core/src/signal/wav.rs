//! Minimal RIFF/WAVE reader and PCM-16 writer.
//!
//! Reads PCM-16 and IEEE float-32, mono or first channel, any source rate
//! (linearly resampled to 16 kHz). Parse errors carry the byte offset.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Waveform, MODEL_SAMPLE_RATE};
use crate::error::{Error, Result};

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse { offset: offset as u64, message: message.into() }
}

fn take<'a>(buf: &'a [u8], off: usize, n: usize) -> Result<&'a [u8]> {
    buf.get(off..off + n)
        .ok_or_else(|| parse_err(off, format!("truncated: wanted {n} bytes")))
}

fn rd_u16(buf: &[u8], off: usize) -> Result<u16> {
    let b = take(buf, off, 2)?;
    Ok(u16::from_le_bytes([b[0], b[1]]))
}

fn rd_u32(buf: &[u8], off: usize) -> Result<u32> {
    let b = take(buf, off, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

struct Fmt {
    format: u16,
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

/// Read a WAV file, take the first channel, and resample to 16 kHz.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let buf = fs::read(path.as_ref())?;
    if buf.len() < 12 || &buf[0..4] != b"RIFF" {
        return Err(parse_err(0, "missing RIFF header"));
    }
    if &buf[8..12] != b"WAVE" {
        return Err(parse_err(8, "missing WAVE tag"));
    }
    let mut off = 12usize;
    let mut fmt: Option<Fmt> = None;
    let mut data: Option<(usize, usize)> = None; // (offset, len)
    while off + 8 <= buf.len() {
        let id = take(&buf, off, 4)?;
        let size = rd_u32(&buf, off + 4)? as usize;
        let body = off + 8;
        if body + size > buf.len() {
            return Err(parse_err(off + 4, format!("chunk '{}' overruns file", String::from_utf8_lossy(id))));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(parse_err(body, "fmt chunk too short"));
                }
                fmt = Some(Fmt {
                    format: rd_u16(&buf, body)?,
                    channels: rd_u16(&buf, body + 2)?,
                    sample_rate: rd_u32(&buf, body + 4)?,
                    bits: rd_u16(&buf, body + 14)?,
                });
            }
            b"data" => data = Some((body, size)),
            _ => {}
        }
        off = body + size + (size & 1);
    }
    let fmt = fmt.ok_or_else(|| parse_err(12, "no fmt chunk"))?;
    let (dod, dlen) = data.ok_or_else(|| parse_err(12, "no data chunk"))?;
    if fmt.channels == 0 {
        return Err(parse_err(dod, "zero channels"));
    }
    let ch = fmt.channels as usize;
    let samples: Vec<f32> = match (fmt.format, fmt.bits) {
        (1, 16) => {
            let frame = 2 * ch;
            (0..dlen / frame)
                .map(|i| {
                    let o = dod + i * frame;
                    i16::from_le_bytes([buf[o], buf[o + 1]]) as f32 / 32768.0
                })
                .collect()
        }
        (3, 32) => {
            let frame = 4 * ch;
            (0..dlen / frame)
                .map(|i| {
                    let o = dod + i * frame;
                    f32::from_le_bytes([buf[o], buf[o + 1], buf[o + 2], buf[o + 3]])
                })
                .collect()
        }
        (f, b) => {
            return Err(Error::Unsupported(format!(
                "WAV encoding (format tag {f}, {b}-bit); only PCM-16 and float-32 are handled"
            )))
        }
    };
    Ok(resample_to_16k(Waveform::new(samples, fmt.sample_rate)))
}

/// Linear-interpolation resampler; identity at 16 kHz.
pub fn resample_to_16k(w: Waveform) -> Waveform {
    if w.sample_rate == MODEL_SAMPLE_RATE || w.is_empty() {
        return Waveform::new(w.samples, MODEL_SAMPLE_RATE);
    }
    let ratio = MODEL_SAMPLE_RATE as f64 / w.sample_rate as f64;
    let out_len = (w.len() as f64 * ratio).round() as usize;
    let step = w.sample_rate as f64 / MODEL_SAMPLE_RATE as f64;
    let src = &w.samples;
    let out = (0..out_len)
        .map(|n| {
            let pos = n as f64 * step;
            let i = pos.floor() as usize;
            let frac = (pos - i as f64) as f32;
            let a = src[i.min(src.len() - 1)];
            let b = src[(i + 1).min(src.len() - 1)];
            a + (b - a) * frac
        })
        .collect();
    Waveform::new(out, MODEL_SAMPLE_RATE)
}

/// Write mono PCM-16 little-endian.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let n = w.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        // Same 1/32768 step the reader uses, so a round trip stays within
        // one quantization level.
        let v = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path.as_ref())?;
    f.write_all(&out)?;
    Ok(())
}
