use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

fn decode<R: Read>(reader: WavReader<R>, path: &Path) -> Result<(Vec<f32>, u32)> {
    let err = |msg: String| Error::Wav {
        path: path.to_path_buf(),
        msg,
    };
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(err(format!("expected mono audio, found {} channels", spec.channels)));
    }
    if spec.sample_rate == 0 {
        return Err(err("sample rate of 0 Hz".into()));
    }
    let samples: std::result::Result<Vec<f32>, _> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader.into_samples::<f32>().collect(),
        (SampleFormat::Int, bits @ 8..=32) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f32;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect()
        }
        (fmt, bits) => return Err(err(format!("unsupported sample format {fmt:?}/{bits}"))),
    };
    let samples = samples.map_err(|e| err(e.to_string()))?;
    if let Some(bad) = samples.iter().position(|v| !v.is_finite()) {
        return Err(err(format!("non-finite sample at index {bad}")));
    }
    Ok((samples, spec.sample_rate))
}

/// Reads a mono WAV file. 32-bit float is the native format; integer PCM is
/// accepted and scaled to [-1, 1).
pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let reader = WavReader::open(path).map_err(|e| Error::Wav {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    decode(reader, path)
}

/// In-memory variant of [`read_wav`].
pub fn decode_wav(bytes: &[u8]) -> Result<(Vec<f32>, u32)> {
    let path = PathBuf::from("<memory>");
    let reader = WavReader::new(Cursor::new(bytes)).map_err(|e| Error::Wav {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    decode(reader, &path)
}

/// Writes mono 32-bit float little-endian PCM.
pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let werr = |e: hound::Error| Error::Wav {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut w = WavWriter::create(path, spec).map_err(werr)?;
    for &s in samples {
        w.write_sample(s).map_err(werr)?;
    }
    w.finalize().map_err(werr)
}
