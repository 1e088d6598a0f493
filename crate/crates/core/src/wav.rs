//! Multichannel WAV reading and writing.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WavFormat {
    #[default]
    Float32,
    Pcm16,
}

/// Deinterleaved audio: one `Vec` per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Audio {
    pub sample_rate: u32,
    pub channels: Vec<Vec<f64>>,
}

impl Audio {
    pub fn new(sample_rate: u32, channels: Vec<Vec<f64>>) -> Result<Self> {
        let audio = Self { sample_rate, channels };
        audio.validate()?;
        Ok(audio)
    }

    pub fn mono(sample_rate: u32, samples: Vec<f64>) -> Self {
        Self { sample_rate, channels: vec![samples] }
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::invalid("audio needs at least one channel"));
        }
        if self.channels.iter().any(|c| c.len() != self.channels[0].len()) {
            return Err(Error::invalid("audio channels differ in length"));
        }
        if self.sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        Ok(())
    }
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Audio> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    let n_ch = usize::from(spec.channels);
    if n_ch == 0 {
        return Err(Error::Wav(format!("{}: no channels", path.display())));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
        (SampleFormat::Int, bits @ 8..=32) => {
            let scale = 1.0 / f64::from(1u32 << (bits - 1));
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| f64::from(v) * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| wav_error(path, e))?
        }
        (fmt, bits) => {
            return Err(Error::Wav(format!("{}: unsupported sample format {fmt:?}/{bits}", path.display())));
        }
    };
    let mut channels = vec![Vec::with_capacity(interleaved.len() / n_ch); n_ch];
    for frame in interleaved.chunks_exact(n_ch) {
        for (c, &v) in frame.iter().enumerate() {
            channels[c].push(v);
        }
    }
    Ok(Audio { sample_rate: spec.sample_rate, channels })
}

pub fn write_wav(path: impl AsRef<Path>, audio: &Audio, format: WavFormat) -> Result<()> {
    let path = path.as_ref();
    audio.validate()?;
    let n_ch = u16::try_from(audio.n_channels()).map_err(|_| Error::invalid("too many channels for WAV"))?;
    let spec = match format {
        WavFormat::Float32 => WavSpec { channels: n_ch, sample_rate: audio.sample_rate, bits_per_sample: 32, sample_format: SampleFormat::Float },
        WavFormat::Pcm16 => WavSpec { channels: n_ch, sample_rate: audio.sample_rate, bits_per_sample: 16, sample_format: SampleFormat::Int },
    };
    let mut writer = WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for i in 0..audio.len() {
        for ch in &audio.channels {
            let v = ch[i];
            match format {
                WavFormat::Float32 => writer.write_sample(v as f32),
                WavFormat::Pcm16 => writer.write_sample((v * 32768.0).round().clamp(-32768.0, 32767.0) as i16),
            }
            .map_err(|e| wav_error(path, e))?;
        }
    }
    writer.finalize().map_err(|e| wav_error(path, e))
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => Error::Wav(format!("{}: {other}", path.display())),
    }
}
