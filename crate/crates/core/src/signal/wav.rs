//! RIFF/WAVE reader and writer for 16-bit PCM and 32-bit IEEE float.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::AudioClip;
use crate::error::{Error, Result};

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WavError {
    #[error("malformed WAV header: {0}")]
    MalformedHeader(String),
    #[error("unsupported WAV codec: {0}")]
    UnsupportedCodec(String),
    #[error("truncated WAV payload: chunk declares {declared} bytes, {available} present")]
    TruncatedPayload { declared: usize, available: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum WavCodec {
    Pcm16,
    #[default]
    Float32,
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_wav(&bytes)?)
}

pub fn save_wav(clip: &AudioClip, path: impl AsRef<Path>, codec: WavCodec) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_wav(clip, codec)).map_err(|e| Error::io(path, e))
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

struct Format {
    codec: WavCodec,
    channels: usize,
    sample_rate: u32,
}

fn parse_fmt(body: &[u8]) -> Result<Format, WavError> {
    if body.len() < 16 {
        return Err(WavError::MalformedHeader(format!(
            "fmt chunk is {} bytes, need 16",
            body.len()
        )));
    }
    let mut tag = u16_at(body, 0);
    let channels = u16_at(body, 2) as usize;
    let sample_rate = u32_at(body, 4);
    let bits = u16_at(body, 14);
    if tag == FORMAT_EXTENSIBLE {
        if body.len() < 26 {
            return Err(WavError::MalformedHeader("short WAVE_FORMAT_EXTENSIBLE chunk".into()));
        }
        tag = u16_at(body, 24);
    }
    let codec = match (tag, bits) {
        (FORMAT_PCM, 16) => WavCodec::Pcm16,
        (FORMAT_FLOAT, 32) => WavCodec::Float32,
        (t, b) => {
            return Err(WavError::UnsupportedCodec(format!(
                "format tag {t} with {b} bits per sample"
            )))
        }
    };
    if !(1..=2).contains(&channels) {
        return Err(WavError::UnsupportedCodec(format!("{channels} channels")));
    }
    if sample_rate == 0 {
        return Err(WavError::MalformedHeader("sample rate 0".into()));
    }
    Ok(Format {
        codec,
        channels,
        sample_rate,
    })
}

pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip, WavError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(WavError::MalformedHeader("missing RIFF/WAVE signature".into()));
    }
    let mut pos = 12;
    let mut format = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let available = bytes.len() - body_start;
        if id == b"data" {
            let fmt = format
                .take()
                .ok_or_else(|| WavError::MalformedHeader("data chunk before fmt chunk".into()))?;
            if size > available {
                return Err(WavError::TruncatedPayload {
                    declared: size,
                    available,
                });
            }
            return decode_samples(&bytes[body_start..body_start + size], fmt);
        }
        if size > available {
            return Err(WavError::TruncatedPayload {
                declared: size,
                available,
            });
        }
        if id == b"fmt " {
            format = Some(parse_fmt(&bytes[body_start..body_start + size])?);
        }
        pos = body_start + size + (size & 1);
    }
    let declared = u32_at(bytes, 4) as usize + 8;
    if declared > bytes.len() {
        Err(WavError::TruncatedPayload {
            declared,
            available: bytes.len(),
        })
    } else {
        Err(WavError::MalformedHeader("no data chunk".into()))
    }
}

fn decode_samples(data: &[u8], fmt: Format) -> Result<AudioClip, WavError> {
    let width = match fmt.codec {
        WavCodec::Pcm16 => 2,
        WavCodec::Float32 => 4,
    };
    let frame = width * fmt.channels;
    if !data.len().is_multiple_of(frame) {
        return Err(WavError::MalformedHeader(format!(
            "data size {} is not a multiple of the {frame}-byte frame",
            data.len()
        )));
    }
    let frames = data.len() / frame;
    let mut channels = vec![Vec::with_capacity(frames); fmt.channels];
    for (i, chunk) in data.chunks_exact(width).enumerate() {
        let v = match fmt.codec {
            WavCodec::Pcm16 => i16::from_le_bytes([chunk[0], chunk[1]]) as f32 / 32768.0,
            WavCodec::Float32 => f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]),
        };
        channels[i % fmt.channels].push(v);
    }
    AudioClip::new(channels, fmt.sample_rate).map_err(|e| WavError::MalformedHeader(e.to_string()))
}

pub fn encode_wav(clip: &AudioClip, codec: WavCodec) -> Vec<u8> {
    let (tag, width) = match codec {
        WavCodec::Pcm16 => (FORMAT_PCM, 2u16),
        WavCodec::Float32 => (FORMAT_FLOAT, 4u16),
    };
    let ch = clip.channels() as u16;
    let data_len = clip.len() * ch as usize * width as usize;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&ch.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate().to_le_bytes());
    let block_align = ch * width;
    out.extend_from_slice(&(clip.sample_rate() * block_align as u32).to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&(width * 8).to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for i in 0..clip.len() {
        for c in 0..clip.channels() {
            let v = clip.channel(c)[i];
            match codec {
                WavCodec::Pcm16 => {
                    let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    out.extend_from_slice(&q.to_le_bytes());
                }
                WavCodec::Float32 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_clip(channels: usize, len: usize) -> AudioClip {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = (0..channels)
            .map(|_| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        AudioClip::new(data, 44_100).unwrap()
    }

    #[test]
    fn float_round_trip_is_bit_exact() {
        let clip = random_clip(2, 1000);
        let back = decode_wav(&encode_wav(&clip, WavCodec::Float32)).unwrap();
        assert_eq!(back, clip);
    }

    #[test]
    fn pcm16_round_trip_within_quantization() {
        let clip = random_clip(1, 1000);
        let back = decode_wav(&encode_wav(&clip, WavCodec::Pcm16)).unwrap();
        assert_eq!(back.sample_rate(), 44_100);
        let err = clip
            .channel(0)
            .iter()
            .zip(back.channel(0))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err <= 1.0 / 32768.0, "{err}");
    }

    #[test]
    fn declared_but_missing_data_is_truncated() {
        let clip = random_clip(2, 10);
        let mut bytes = encode_wav(&clip, WavCodec::Pcm16);
        bytes.truncate(44); // keep the data chunk header, drop its payload
        assert_eq!(
            decode_wav(&bytes),
            Err(WavError::TruncatedPayload {
                declared: 40,
                available: 0
            })
        );
        bytes.truncate(36); // fmt only, RIFF size still promises more
        assert!(matches!(decode_wav(&bytes), Err(WavError::TruncatedPayload { .. })));
    }

    #[test]
    fn bad_signature_and_codec_are_distinct() {
        assert!(matches!(decode_wav(b"RIFX0000WAVE"), Err(WavError::MalformedHeader(_))));
        let clip = random_clip(1, 4);
        let mut bytes = encode_wav(&clip, WavCodec::Pcm16);
        bytes[20] = 2; // ADPCM
        assert!(matches!(decode_wav(&bytes), Err(WavError::UnsupportedCodec(_))));
    }
}
