//! Minimal WAV reader/writer: PCM16 and float32, 16 kHz, 1-8 channels.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use crate::error::{FlexioError, Result};
use crate::stft::{Waveform, SAMPLE_RATE};

const MAX_CHANNELS: usize = 8;

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut r = BufReader::new(File::open(path)?);
    let mut riff = [0u8; 4];
    r.read_exact(&mut riff)?;
    if &riff != b"RIFF" {
        return Err(FlexioError::InvalidInput(format!("{}: not a RIFF file", path.display())));
    }
    let _size = r.read_u32::<LittleEndian>()?;
    let mut wave = [0u8; 4];
    r.read_exact(&mut wave)?;
    if &wave != b"WAVE" {
        return Err(FlexioError::InvalidInput(format!("{}: not a WAVE file", path.display())));
    }

    let mut format_tag = 0u16;
    let mut channels = 0usize;
    let mut sample_rate = 0u32;
    let mut bits = 0u16;
    let mut data: Option<Vec<u8>> = None;
    loop {
        let mut id = [0u8; 4];
        match r.read_exact(&mut id) {
            Ok(()) => {}
            Err(_) => break,
        }
        let size = r.read_u32::<LittleEndian>()? as usize;
        match &id {
            b"fmt " => {
                let mut buf = vec![0u8; size];
                r.read_exact(&mut buf)?;
                let mut c = &buf[..];
                format_tag = c.read_u16::<LittleEndian>()?;
                channels = c.read_u16::<LittleEndian>()? as usize;
                sample_rate = c.read_u32::<LittleEndian>()?;
                let _byte_rate = c.read_u32::<LittleEndian>()?;
                let _block_align = c.read_u16::<LittleEndian>()?;
                bits = c.read_u16::<LittleEndian>()?;
            }
            b"data" => {
                let mut buf = vec![0u8; size];
                r.read_exact(&mut buf)?;
                data = Some(buf);
            }
            _ => {
                let mut skip = vec![0u8; size];
                r.read_exact(&mut skip)?;
            }
        }
        if size & 1 == 1 {
            let mut pad = [0u8; 1];
            let _ = r.read_exact(&mut pad);
        }
    }
    let data = data
        .ok_or_else(|| FlexioError::InvalidInput(format!("{}: missing data chunk", path.display())))?;
    if sample_rate != SAMPLE_RATE {
        return Err(FlexioError::InvalidInput(format!(
            "{}: sample rate {sample_rate} Hz, expected {SAMPLE_RATE} (resampling is out of scope)",
            path.display()
        )));
    }
    if channels == 0 || channels > MAX_CHANNELS {
        return Err(FlexioError::InvalidInput(format!(
            "{}: {channels} channels unsupported (1-{MAX_CHANNELS})",
            path.display()
        )));
    }
    let samples: Vec<f64> = match (format_tag, bits) {
        (1, 16) => data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
            .collect(),
        (3, 32) => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        _ => {
            return Err(FlexioError::InvalidInput(format!(
                "{}: unsupported format (tag {format_tag}, {bits} bits); expected PCM16 or float32",
                path.display()
            )))
        }
    };
    let frames = samples.len() / channels;
    if frames == 0 {
        return Err(FlexioError::InvalidInput(format!("{}: empty audio", path.display())));
    }
    let mut out = Array2::<f64>::zeros((channels, frames));
    for (i, v) in samples.iter().enumerate() {
        out[[i % channels, i / channels]] = *v;
    }
    Waveform::new(out, sample_rate)
}

/// Writes IEEE float32 WAV.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    if w.channels() > MAX_CHANNELS {
        return Err(FlexioError::InvalidInput(format!(
            "{} channels unsupported (max {MAX_CHANNELS})",
            w.channels()
        )));
    }
    let channels = w.channels() as u16;
    let frames = w.len();
    let data_bytes = (frames * w.channels() * 4) as u32;
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(b"RIFF")?;
    f.write_u32::<LittleEndian>(36 + data_bytes)?;
    f.write_all(b"WAVE")?;
    f.write_all(b"fmt ")?;
    f.write_u32::<LittleEndian>(16)?;
    f.write_u16::<LittleEndian>(3)?; // IEEE float
    f.write_u16::<LittleEndian>(channels)?;
    f.write_u32::<LittleEndian>(w.sample_rate)?;
    f.write_u32::<LittleEndian>(w.sample_rate * channels as u32 * 4)?;
    f.write_u16::<LittleEndian>(channels * 4)?;
    f.write_u16::<LittleEndian>(32)?;
    f.write_all(b"data")?;
    f.write_u32::<LittleEndian>(data_bytes)?;
    for i in 0..frames {
        for c in 0..w.channels() {
            f.write_f32::<LittleEndian>(w.samples[[c, i]] as f32)?;
        }
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn float32_round_trip_is_exact_at_f32() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let data = Array2::from_shape_fn((3, 500), |(c, i)| {
            ((i as f64 * 0.13 + c as f64).sin() * 0.8) as f32 as f64
        });
        let w = Waveform::new(data.clone(), SAMPLE_RATE).unwrap();
        write_wav(&p, &w).unwrap();
        let r = read_wav(&p).unwrap();
        assert_eq!(r.samples, data);
        assert_eq!(r.sample_rate, SAMPLE_RATE);
    }

    #[test]
    fn pcm16_files_are_readable() {
        use byteorder::{LittleEndian, WriteBytesExt};
        let dir = tempdir().unwrap();
        let p = dir.path().join("p.wav");
        let samples: Vec<i16> = vec![0, 16384, -16384, 32767, -32768, 100];
        let mut f = File::create(&p).unwrap();
        let data_bytes = (samples.len() * 2) as u32;
        f.write_all(b"RIFF").unwrap();
        f.write_u32::<LittleEndian>(36 + data_bytes).unwrap();
        f.write_all(b"WAVEfmt ").unwrap();
        f.write_u32::<LittleEndian>(16).unwrap();
        f.write_u16::<LittleEndian>(1).unwrap(); // PCM
        f.write_u16::<LittleEndian>(2).unwrap(); // stereo
        f.write_u32::<LittleEndian>(SAMPLE_RATE).unwrap();
        f.write_u32::<LittleEndian>(SAMPLE_RATE * 4).unwrap();
        f.write_u16::<LittleEndian>(4).unwrap();
        f.write_u16::<LittleEndian>(16).unwrap();
        f.write_all(b"data").unwrap();
        f.write_u32::<LittleEndian>(data_bytes).unwrap();
        for s in &samples {
            f.write_i16::<LittleEndian>(*s).unwrap();
        }
        drop(f);
        let w = read_wav(&p).unwrap();
        assert_eq!(w.channels(), 2);
        assert_eq!(w.len(), 3);
        assert!((w.samples[[0, 0]] - 0.0).abs() < 1e-12);
        assert!((w.samples[[1, 0]] - 0.5).abs() < 1e-12);
        assert!((w.samples[[0, 1]] + 0.5).abs() < 1e-12);
        assert!((w.samples[[1, 1]] - 32767.0 / 32768.0).abs() < 1e-12);
        assert!((w.samples[[0, 2]] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn wrong_sample_rate_and_channel_counts_are_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.wav");
        let w = Waveform::new(Array2::zeros((1, 10)), 44_100).unwrap();
        write_wav(&p, &w).unwrap();
        let err = read_wav(&p).unwrap_err();
        assert!(err.to_string().contains("resampling is out of scope"), "{err}");

        let nine = Waveform::new(Array2::zeros((9, 10)), SAMPLE_RATE).unwrap();
        assert!(write_wav(&dir.path().join("n.wav"), &nine).is_err());
    }

    #[test]
    fn non_wav_files_are_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("x.wav");
        std::fs::write(&p, b"not audio at all").unwrap();
        assert!(read_wav(&p).is_err());
    }
}
