//! Stimulus playback buffers, WAV files, and onset classification of
//! microphone audio.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{self, BufReader, Read, Seek, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
const FULL_SCALE: f64 = 32767.0;
const FADE_MS: u64 = 10;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("stimulus duration must be positive")]
    ZeroDuration,
    #[error("tone {tone_hz} Hz aliases at sample rate {sample_rate} Hz")]
    Aliasing { tone_hz: f64, sample_rate: u32 },
    #[error("sample rate must be positive")]
    ZeroSampleRate,
    #[error("malformed WAV header: {0}")]
    MalformedHeader(String),
    #[error("not 16-bit mono PCM: {0}")]
    NotPcm(String),
    #[error("WAV data truncated after {0} samples")]
    Truncated(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AudioBuffer {
    pub sample_rate: u32,
    pub samples: Vec<i16>,
    pub t_start_ms: u64,
}

impl AudioBuffer {
    pub fn silence(sample_rate: u32, duration_ms: u64, t_start_ms: u64) -> Self {
        Self {
            sample_rate,
            samples: vec![0; (duration_ms * sample_rate as u64 / 1000) as usize],
            t_start_ms,
        }
    }

    pub fn duration_ms(&self) -> u64 {
        self.samples.len() as u64 * 1000 / self.sample_rate as u64
    }

    /// Adds `other` into this buffer at its relative start time, saturating.
    pub fn mix_in(&mut self, other: &AudioBuffer) {
        let offset_ms = other.t_start_ms.saturating_sub(self.t_start_ms);
        let offset = (offset_ms * self.sample_rate as u64 / 1000) as usize;
        for (dst, src) in self.samples.iter_mut().skip(offset).zip(&other.samples) {
            *dst = dst.saturating_add(*src);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StimulusSpec {
    pub stimulus_id: u8,
    pub tone_hz: f64,
    pub duration_ms: u64,
}

/// The three playback tones: 440, 660 and 880 Hz, 500 ms each.
pub fn default_stimuli() -> [StimulusSpec; 3] {
    [(0, 440.0), (1, 660.0), (2, 880.0)].map(|(stimulus_id, tone_hz)| StimulusSpec {
        stimulus_id,
        tone_hz,
        duration_ms: 500,
    })
}

pub fn validate_stimuli(specs: &[StimulusSpec]) -> Vec<String> {
    let mut errs = Vec::new();
    if specs.len() != 3 {
        errs.push(format!("audio.stimuli must list 3 stimuli, got {}", specs.len()));
    }
    for (i, a) in specs.iter().enumerate() {
        if a.stimulus_id > 2 {
            errs.push(format!("stimulus_id {} out of range 0..=2", a.stimulus_id));
        }
        if a.duration_ms == 0 {
            errs.push(format!("stimulus {} has zero duration", a.stimulus_id));
        }
        for b in &specs[i + 1..] {
            if a.stimulus_id == b.stimulus_id {
                errs.push(format!("stimulus_id {} listed twice", a.stimulus_id));
            }
            if a.tone_hz == b.tone_hz {
                errs.push(format!("tone {} Hz used by two stimuli", a.tone_hz));
            }
        }
    }
    errs
}

/// Half-scale sine with 10 ms linear fades at both ends.
pub fn synth_stimulus(spec: &StimulusSpec, sample_rate: u32) -> Result<AudioBuffer, AudioError> {
    if sample_rate == 0 {
        return Err(AudioError::ZeroSampleRate);
    }
    if spec.duration_ms == 0 {
        return Err(AudioError::ZeroDuration);
    }
    if spec.tone_hz <= 0.0 || spec.tone_hz >= sample_rate as f64 / 2.0 {
        return Err(AudioError::Aliasing {
            tone_hz: spec.tone_hz,
            sample_rate,
        });
    }
    let n = (spec.duration_ms * sample_rate as u64 / 1000) as usize;
    let fade = (FADE_MS * sample_rate as u64 / 1000).max(1) as f64;
    let w = 2.0 * PI * spec.tone_hz / sample_rate as f64;
    let samples = (0..n)
        .map(|i| {
            let env = (i as f64 / fade).min((n - 1 - i) as f64 / fade).min(1.0);
            (0.5 * FULL_SCALE * env * (w * i as f64).sin()).round() as i16
        })
        .collect();
    Ok(AudioBuffer {
        sample_rate,
        samples,
        t_start_ms: 0,
    })
}

// --- WAV -------------------------------------------------------------------

fn wav_spec(sample_rate: u32) -> hound::WavSpec {
    hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    }
}

pub fn wav_write_to<W: Write + Seek>(buf: &AudioBuffer, out: W) -> Result<(), AudioError> {
    if buf.sample_rate == 0 {
        return Err(AudioError::ZeroSampleRate);
    }
    let mut w = hound::WavWriter::new(out, wav_spec(buf.sample_rate)).map_err(map_write)?;
    {
        let mut i16w = w.get_i16_writer(buf.samples.len() as u32);
        for &s in &buf.samples {
            i16w.write_sample(s);
        }
        i16w.flush().map_err(map_write)?;
    }
    w.finalize().map_err(map_write)
}

fn map_write(e: hound::Error) -> AudioError {
    match e {
        hound::Error::IoError(io) => AudioError::Io(io),
        other => AudioError::Io(io::Error::other(other.to_string())),
    }
}

pub fn wav_to_bytes(buf: &AudioBuffer) -> Result<Vec<u8>, AudioError> {
    let mut cursor = io::Cursor::new(Vec::new());
    wav_write_to(buf, &mut cursor)?;
    Ok(cursor.into_inner())
}

pub fn wav_write(buf: &AudioBuffer, path: &Path) -> Result<(), AudioError> {
    let file = io::BufWriter::new(File::create(path)?);
    wav_write_to(buf, file)
}

pub fn wav_read_from<R: Read>(input: R, t_start_ms: u64) -> Result<AudioBuffer, AudioError> {
    let mut reader = hound::WavReader::new(input).map_err(|e| match e {
        hound::Error::Unsupported => AudioError::NotPcm("unsupported format tag".into()),
        hound::Error::FormatError(m) => AudioError::MalformedHeader(m.into()),
        hound::Error::IoError(io) if io.kind() == io::ErrorKind::UnexpectedEof => {
            AudioError::MalformedHeader("file ends inside the header".into())
        }
        hound::Error::IoError(io) => AudioError::Io(io),
        other => AudioError::MalformedHeader(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int
        || spec.bits_per_sample != 16
        || spec.channels != 1
    {
        return Err(AudioError::NotPcm(format!(
            "{} channel(s), {} bits, {:?}",
            spec.channels, spec.bits_per_sample, spec.sample_format
        )));
    }
    let mut samples = Vec::with_capacity(reader.len() as usize);
    for s in reader.samples::<i16>() {
        match s {
            Ok(v) => samples.push(v),
            // hound reports a short data chunk as a generic read failure
            Err(hound::Error::IoError(io))
                if matches!(io.kind(), io::ErrorKind::UnexpectedEof | io::ErrorKind::Other) =>
            {
                return Err(AudioError::Truncated(samples.len()))
            }
            Err(hound::Error::IoError(io)) => return Err(AudioError::Io(io)),
            Err(other) => return Err(AudioError::MalformedHeader(other.to_string())),
        }
    }
    Ok(AudioBuffer {
        sample_rate: spec.sample_rate,
        samples,
        t_start_ms,
    })
}

/// Reads a WAV file; the start time is taken from a trailing `_<t_ms>` in
/// the file stem when present.
pub fn wav_read(path: &Path) -> Result<AudioBuffer, AudioError> {
    let t = path
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.rsplit('_').next())
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    wav_read_from(BufReader::new(File::open(path)?), t)
}

pub fn stimulus_file_name(stimulus_id: u8, t_ms: u64) -> String {
    format!("stim{stimulus_id}_{t_ms}.wav")
}

pub fn mic_file_name(t_ms: u64) -> String {
    format!("mic_{t_ms}.wav")
}

// --- onset classification --------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnsetParams {
    pub window_ms: u64,
    pub rms_threshold_dbfs: f64,
    pub analysis_ms: u64,
}

impl Default for OnsetParams {
    fn default() -> Self {
        Self {
            window_ms: 10,
            rms_threshold_dbfs: -30.0,
            analysis_ms: 300,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnsetEvent {
    pub stimulus_id: u8,
    pub t_onset_ms: u64,
    pub confidence: f64,
}

/// Single-bin DFT power at `freq_hz` via the Goertzel recurrence.
pub fn goertzel_power(samples: &[i16], freq_hz: f64, sample_rate: u32) -> f64 {
    let w = 2.0 * PI * freq_hz / sample_rate as f64;
    let coeff = 2.0 * w.cos();
    let (mut s1, mut s2) = (0.0f64, 0.0f64);
    for &x in samples {
        let s = x as f64 + coeff * s1 - s2;
        s2 = s1;
        s1 = s;
    }
    s1 * s1 + s2 * s2 - coeff * s1 * s2
}

pub fn rms(samples: &[i16]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let sum: f64 = samples.iter().map(|&s| (s as f64) * (s as f64)).sum();
    (sum / samples.len() as f64).sqrt()
}

/// Finds the first window whose RMS exceeds the threshold and classifies the
/// following analysis span by the strongest template tone. Ties go to the
/// lowest stimulus id.
pub fn classify_onset(
    buf: &AudioBuffer,
    templates: &[StimulusSpec],
    params: &OnsetParams,
) -> Option<OnsetEvent> {
    if templates.is_empty() || buf.sample_rate == 0 {
        return None;
    }
    let sr = buf.sample_rate as u64;
    let win = (params.window_ms * sr / 1000).max(1) as usize;
    let threshold = FULL_SCALE * 10f64.powf(params.rms_threshold_dbfs / 20.0);
    let onset_win = buf
        .samples
        .chunks(win)
        .position(|w| rms(w) > threshold)?;
    let start = onset_win * win;
    let span = (params.analysis_ms * sr / 1000) as usize;
    let segment = &buf.samples[start..(start + span).min(buf.samples.len())];

    let mut ordered: Vec<&StimulusSpec> = templates.iter().collect();
    ordered.sort_by_key(|s| s.stimulus_id);
    let energies: Vec<f64> = ordered
        .iter()
        .map(|s| goertzel_power(segment, s.tone_hz, buf.sample_rate))
        .collect();
    let total: f64 = energies.iter().sum();
    let (best, top) = energies
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |acc, (i, &e)| if e > acc.1 { (i, e) } else { acc });
    Some(OnsetEvent {
        stimulus_id: ordered[best].stimulus_id,
        t_onset_ms: buf.t_start_ms + (start as u64 * 1000 / sr),
        confidence: if total > 0.0 { top / total } else { 0.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stim(id: u8) -> StimulusSpec {
        default_stimuli()[id as usize]
    }

    #[test]
    fn default_tones() {
        let s = default_stimuli();
        assert_eq!(
            s.map(|x| (x.stimulus_id, x.tone_hz as u32, x.duration_ms)),
            [(0, 440, 500), (1, 660, 500), (2, 880, 500)]
        );
        assert!(validate_stimuli(&s).is_empty());
        let mut dup = s;
        dup[2].tone_hz = 440.0;
        assert_eq!(validate_stimuli(&dup).len(), 1);
    }

    #[test]
    fn one_second_tone() {
        let spec = StimulusSpec {
            stimulus_id: 0,
            tone_hz: 440.0,
            duration_ms: 1000,
        };
        let buf = synth_stimulus(&spec, 16_000).unwrap();
        assert_eq!(buf.samples.len(), 16_000);
        let peak = buf.samples.iter().map(|s| s.unsigned_abs()).max().unwrap();
        assert!((16_370..=16_384).contains(&peak), "peak {peak}");
        assert_eq!(buf.samples[0], 0);
        assert_eq!(*buf.samples.last().unwrap(), 0);
    }

    #[test]
    fn synth_errors() {
        let mut s = stim(0);
        s.duration_ms = 0;
        assert!(matches!(synth_stimulus(&s, 16_000), Err(AudioError::ZeroDuration)));
        s.duration_ms = 100;
        s.tone_hz = 8000.0;
        assert!(matches!(synth_stimulus(&s, 16_000), Err(AudioError::Aliasing { .. })));
    }

    #[test]
    fn synth_is_deterministic() {
        assert_eq!(
            synth_stimulus(&stim(1), 16_000).unwrap(),
            synth_stimulus(&stim(1), 16_000).unwrap()
        );
    }

    #[test]
    fn silence_has_no_onset() {
        let buf = AudioBuffer::silence(16_000, 3000, 0);
        assert!(classify_onset(&buf, &default_stimuli(), &OnsetParams::default()).is_none());
    }

    #[test]
    fn injected_stimulus_is_found() {
        let mut buf = AudioBuffer::silence(16_000, 4000, 0);
        let mut s = synth_stimulus(&stim(2), 16_000).unwrap();
        s.t_start_ms = 2000;
        buf.mix_in(&s);
        let ev = classify_onset(&buf, &default_stimuli(), &OnsetParams::default()).unwrap();
        assert_eq!(ev.stimulus_id, 2);
        assert!(ev.t_onset_ms.abs_diff(2000) <= 10);
        assert!(ev.confidence > 0.9);
    }

    #[test]
    fn mixture_is_ambiguous() {
        let mut buf = AudioBuffer::silence(16_000, 2000, 0);
        for id in 0..3 {
            let mut s = synth_stimulus(&stim(id), 16_000).unwrap();
            s.samples.iter_mut().for_each(|x| *x /= 3);
            s.t_start_ms = 500;
            buf.mix_in(&s);
        }
        let ev = classify_onset(&buf, &default_stimuli(), &OnsetParams::default()).unwrap();
        assert!(ev.confidence <= 0.34 + 1e-3, "confidence {}", ev.confidence);
    }

    #[test]
    fn exact_tie_goes_to_lowest_id() {
        // templates at the same bin produce identical energies
        let mut t = default_stimuli();
        t[0].tone_hz = 660.0;
        t[0].stimulus_id = 2;
        t[2].tone_hz = 880.0;
        t[2].stimulus_id = 0;
        t[1].tone_hz = 660.0;
        let mut buf = synth_stimulus(&stim(1), 16_000).unwrap();
        buf.t_start_ms = 0;
        let ev = classify_onset(&buf, &t, &OnsetParams::default()).unwrap();
        assert_eq!(ev.stimulus_id, 1);
    }

    #[test]
    fn empty_wav_is_44_bytes() {
        let bytes = wav_to_bytes(&AudioBuffer {
            sample_rate: 16_000,
            samples: vec![],
            t_start_ms: 0,
        })
        .unwrap();
        assert_eq!(bytes.len(), 44);
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = wav_to_bytes(&synth_stimulus(&stim(0), 16_000).unwrap()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            wav_read_from(&bytes[..], 0),
            Err(AudioError::MalformedHeader(_))
        ));
    }

    #[test]
    fn truncated_data() {
        let bytes = wav_to_bytes(&synth_stimulus(&stim(0), 16_000).unwrap()).unwrap();
        let cut = &bytes[..bytes.len() - 101];
        assert!(matches!(wav_read_from(cut, 0), Err(AudioError::Truncated(_))));
    }

    #[test]
    fn non_pcm_rejected() {
        let mut bytes = wav_to_bytes(&synth_stimulus(&stim(0), 16_000).unwrap()).unwrap();
        // format tag 3 = IEEE float, with 16 bits per sample
        bytes[20] = 3;
        assert!(matches!(
            wav_read_from(&bytes[..], 0),
            Err(AudioError::NotPcm(_)) | Err(AudioError::MalformedHeader(_))
        ));
        let mut stereo = wav_to_bytes(&synth_stimulus(&stim(0), 16_000).unwrap()).unwrap();
        // a consistent two-channel header: channels, byte rate, block align
        stereo[22] = 2;
        stereo[28..32].copy_from_slice(&64_000u32.to_le_bytes());
        stereo[32] = 4;
        assert!(matches!(wav_read_from(&stereo[..], 0), Err(AudioError::NotPcm(_))));
    }

    #[test]
    fn file_name_carries_start_time() {
        let dir = tempfile::tempdir().unwrap();
        let buf = synth_stimulus(&stim(0), 16_000).unwrap();
        let path = dir.path().join(stimulus_file_name(0, 41_000));
        wav_write(&buf, &path).unwrap();
        let back = wav_read(&path).unwrap();
        assert_eq!(back.t_start_ms, 41_000);
        assert_eq!(back.samples, buf.samples);
    }
}
