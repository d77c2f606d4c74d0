//! RIFF WAV reader and writer: PCM 8/16-bit little-endian, any channel
//! count on read (averaged to mono), mono 16-bit on write. No resampling —
//! a rate mismatch is an error.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::audio::WaveformClip;
use crate::error::{Error, Result};

fn parse_err(msg: impl Into<String>) -> Error {
    Error::WavParse(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(parse_err(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

struct Fmt {
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

/// Decode a PCM WAV file to mono floats in [−1, 1], checking the sample rate.
pub fn load_wav(path: &Path, expected_rate: u32) -> Result<WaveformClip> {
    let bytes = fs::read(path)?;
    decode_wav(&bytes, expected_rate)
}

/// Decode WAV bytes (see [`load_wav`]).
pub fn decode_wav(bytes: &[u8], expected_rate: u32) -> Result<WaveformClip> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != b"RIFF" {
        return Err(parse_err("missing RIFF tag"));
    }
    let _riff_size = r.u32()?;
    if r.take(4)? != b"WAVE" {
        return Err(parse_err("missing WAVE tag"));
    }

    let mut fmt: Option<Fmt> = None;
    let mut data: Option<&[u8]> = None;
    while r.pos < bytes.len() {
        let id: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        let size = r.u32()? as usize;
        let body = r.take(size)?;
        // chunks are word-aligned
        if size % 2 == 1 && r.pos < bytes.len() {
            r.pos += 1;
        }
        match &id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(parse_err("fmt chunk shorter than 16 bytes"));
                }
                let mut fr = Reader { bytes: body, pos: 0 };
                let audio_format = fr.u16()?;
                let channels = fr.u16()?;
                let sample_rate = fr.u32()?;
                let _byte_rate = fr.u32()?;
                let _block_align = fr.u16()?;
                let bits = fr.u16()?;
                match audio_format {
                    1 => {}
                    3 => return Err(Error::UnsupportedWav("IEEE float PCM (format 3)".into())),
                    other => return Err(Error::UnsupportedWav(format!("compressed audio format {other}"))),
                }
                if bits != 8 && bits != 16 {
                    return Err(Error::UnsupportedWav(format!("{bits}-bit PCM (want 8 or 16)")));
                }
                if channels == 0 {
                    return Err(parse_err("zero channels"));
                }
                fmt = Some(Fmt { channels, sample_rate, bits });
            }
            b"data" => data = Some(body),
            _ => {} // skip LIST, fact, cue, ...
        }
    }

    let fmt = fmt.ok_or_else(|| parse_err("no fmt chunk"))?;
    let data = data.ok_or_else(|| parse_err("no data chunk"))?;
    if fmt.sample_rate != expected_rate {
        return Err(Error::RateMismatch { found: fmt.sample_rate, expected: expected_rate });
    }

    let ch = fmt.channels as usize;
    let samples = match fmt.bits {
        8 => {
            let frames = data.len() / ch;
            (0..frames)
                .map(|f| {
                    let sum: f32 = (0..ch).map(|c| (f32::from(data[f * ch + c]) - 128.0) / 128.0).sum();
                    sum / ch as f32
                })
                .collect()
        }
        16 => {
            let frame_bytes = 2 * ch;
            let frames = data.len() / frame_bytes;
            (0..frames)
                .map(|f| {
                    let sum: f32 = (0..ch)
                        .map(|c| {
                            let o = f * frame_bytes + 2 * c;
                            f32::from(i16::from_le_bytes([data[o], data[o + 1]])) / 32768.0
                        })
                        .sum();
                    sum / ch as f32
                })
                .collect()
        }
        _ => unreachable!("validated above"),
    };
    Ok(WaveformClip { samples, sample_rate: fmt.sample_rate })
}

/// Write a mono 16-bit PCM WAV file.
pub fn write_wav(path: &Path, clip: &WaveformClip) -> Result<()> {
    let bytes = encode_wav(clip);
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Encode a mono 16-bit PCM WAV byte stream.
pub fn encode_wav(clip: &WaveformClip) -> Vec<u8> {
    let n = clip.samples.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &clip.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}
