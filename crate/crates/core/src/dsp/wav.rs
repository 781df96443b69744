use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

/// Deinterleaved audio with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Audio {
    pub sample_rate: u32,
    pub channels: Vec<Vec<f64>>,
}

impl Audio {
    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, |c| c.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn wav_err(path: &Path) -> impl FnOnce(hound::Error) -> Error + '_ {
    move |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads integer PCM (8–32 bit) or float32 WAV into `[-1, 1]` floats.
pub fn read_wav(path: &Path) -> Result<Audio> {
    let mut reader = hound::WavReader::open(path).map_err(wav_err(path))?;
    let spec = reader.spec();
    let n_ch = spec.channels as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err(path))?,
        SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err(path))?
        }
    };
    let mut channels = vec![Vec::with_capacity(interleaved.len() / n_ch.max(1)); n_ch];
    for frame in interleaved.chunks(n_ch) {
        for (c, &v) in frame.iter().enumerate() {
            channels[c].push(v);
        }
    }
    Ok(Audio {
        sample_rate: spec.sample_rate,
        channels,
    })
}

pub fn write_wav(path: &Path, audio: &Audio, encoding: WavEncoding) -> Result<()> {
    let n_ch = audio.channels.len();
    if n_ch == 0 || n_ch > u16::MAX as usize {
        return Err(Error::Format(format!("cannot write {n_ch} channels")));
    }
    let len = audio.len();
    if audio.channels.iter().any(|c| c.len() != len) {
        return Err(Error::Format("channels differ in length".into()));
    }
    let spec = match encoding {
        WavEncoding::Pcm16 => WavSpec {
            channels: n_ch as u16,
            sample_rate: audio.sample_rate,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        },
        WavEncoding::Float32 => WavSpec {
            channels: n_ch as u16,
            sample_rate: audio.sample_rate,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        },
    };
    let mut writer = WavWriter::create(path, spec).map_err(wav_err(path))?;
    for i in 0..len {
        for ch in &audio.channels {
            match encoding {
                WavEncoding::Pcm16 => {
                    let v = (ch[i].clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
                    writer.write_sample(v).map_err(wav_err(path))?;
                }
                WavEncoding::Float32 => {
                    writer.write_sample(ch[i] as f32).map_err(wav_err(path))?;
                }
            }
        }
    }
    writer.finalize().map_err(wav_err(path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let audio = Audio {
            sample_rate: 24000,
            channels: vec![vec![0.5, -0.25, 0.125], vec![0.0, 1.0, -1.0]],
        };
        write_wav(&p, &audio, WavEncoding::Float32).unwrap();
        assert_eq!(read_wav(&p).unwrap(), audio);
    }

    #[test]
    fn pcm16_round_trip_within_lsb() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.wav");
        let audio = Audio {
            sample_rate: 44100,
            channels: vec![vec![0.3, -0.7, 0.01]],
        };
        write_wav(&p, &audio, WavEncoding::Pcm16).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.sample_rate, 44100);
        for (a, b) in audio.channels[0].iter().zip(&back.channels[0]) {
            assert!((a - b).abs() < 1.0 / 32767.0);
        }
    }
}
