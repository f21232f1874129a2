//! Log mel-band energies: framing, power spectra, mel projection.
//!
//! Defaults: 44.1 kHz input, 2048-sample periodic Hamming window, hop 1024
//! (50% overlap), 64 Slaney-style area-normalized mel bands, natural log with
//! a 1e-10 energy floor. Frames are not centered: a clip of `len` samples
//! yields `1 + floor((len − 2048) / 1024)` frames.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("clip of {len} samples is shorter than the {window}-sample window")]
    TooShort { len: usize, window: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MelScale {
    Slaney,
    Htk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    /// Periodic Hamming, `0.54 − 0.46·cos(2πn/N)`.
    Hamming,
    Rectangular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    /// Defaults to the Nyquist frequency.
    pub f_max: Option<f64>,
    pub floor: f64,
    pub mel_scale: MelScale,
    pub window: WindowKind,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: 44_100,
            n_fft: 2048,
            hop: 1024,
            n_mels: 64,
            f_min: 0.0,
            f_max: None,
            floor: 1e-10,
            mel_scale: MelScale::Slaney,
            window: WindowKind::Hamming,
        }
    }
}

impl FeatureConfig {
    pub fn f_max(&self) -> f64 {
        self.f_max.unwrap_or(self.sample_rate as f64 / 2.0)
    }

    pub fn frames_for(&self, len: usize) -> Option<usize> {
        frame_count(len, self.n_fft, self.hop)
    }
}

/// Mono PCM samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        AudioClip {
            samples,
            sample_rate,
        }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// `1 + floor((len − window) / hop)`, or `None` when `len < window`.
pub fn frame_count(len: usize, window: usize, hop: usize) -> Option<usize> {
    (len >= window && hop > 0).then(|| 1 + (len - window) / hop)
}

pub fn window_fn(kind: WindowKind, n: usize) -> Vec<f64> {
    match kind {
        WindowKind::Hamming => (0..n)
            .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / n as f64).cos())
            .collect(),
        WindowKind::Rectangular => vec![1.0; n],
    }
}

/// Windowed frames, row-major `n_frames × frame_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frames {
    pub frame_len: usize,
    pub n_frames: usize,
    pub data: Vec<f64>,
}

impl Frames {
    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * self.frame_len..(i + 1) * self.frame_len]
    }
}

pub fn frame_signal(clip: &AudioClip, cfg: &FeatureConfig) -> Result<Frames, FeatureError> {
    let n_frames = cfg
        .frames_for(clip.samples.len())
        .ok_or(FeatureError::TooShort {
            len: clip.samples.len(),
            window: cfg.n_fft,
        })?;
    let window = window_fn(cfg.window, cfg.n_fft);
    let mut data = Vec::with_capacity(n_frames * cfg.n_fft);
    for f in 0..n_frames {
        let start = f * cfg.hop;
        data.extend(
            clip.samples[start..start + cfg.n_fft]
                .iter()
                .zip(&window)
                .map(|(s, w)| s * w),
        );
    }
    Ok(Frames {
        frame_len: cfg.n_fft,
        n_frames,
        data,
    })
}

/// Row-major `n_rows × n_cols` matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

struct Spectrum {
    fft: Arc<dyn Fft<f64>>,
}

impl Spectrum {
    fn new(n: usize) -> Self {
        Spectrum {
            fft: FftPlanner::new().plan_fft_forward(n),
        }
    }

    /// `|X_k|²` for `k = 0..=n/2` of one real frame.
    fn power(&self, frame: &[f64], out: &mut [f64], buf: &mut Vec<Complex<f64>>) {
        buf.clear();
        buf.extend(frame.iter().map(|&x| Complex::new(x, 0.0)));
        self.fft.process(buf);
        for (o, c) in out.iter_mut().zip(buf.iter()) {
            *o = c.norm_sqr();
        }
    }
}

/// Squared DFT magnitudes, `(frame_len/2 + 1) × n_frames`.
pub fn power_spectrum(frames: &Frames) -> Matrix {
    let bins = frames.frame_len / 2 + 1;
    let spectrum = Spectrum::new(frames.frame_len);
    let mut out = Matrix::zeros(bins, frames.n_frames);
    let mut column = vec![0.0; bins];
    let mut buf = Vec::with_capacity(frames.frame_len);
    for f in 0..frames.n_frames {
        spectrum.power(frames.frame(f), &mut column, &mut buf);
        for (k, &p) in column.iter().enumerate() {
            out.data[k * frames.n_frames + f] = p;
        }
    }
    out
}

pub fn hz_to_mel(hz: f64, scale: MelScale) -> f64 {
    match scale {
        MelScale::Htk => 2595.0 * (1.0 + hz / 700.0).log10(),
        MelScale::Slaney => {
            const F_SP: f64 = 200.0 / 3.0;
            const MIN_LOG_HZ: f64 = 1000.0;
            if hz < MIN_LOG_HZ {
                hz / F_SP
            } else {
                MIN_LOG_HZ / F_SP + (hz / MIN_LOG_HZ).ln() / log_step()
            }
        }
    }
}

pub fn mel_to_hz(mel: f64, scale: MelScale) -> f64 {
    match scale {
        MelScale::Htk => 700.0 * (10f64.powf(mel / 2595.0) - 1.0),
        MelScale::Slaney => {
            const F_SP: f64 = 200.0 / 3.0;
            let min_log_mel = 1000.0 / F_SP;
            if mel < min_log_mel {
                mel * F_SP
            } else {
                1000.0 * ((mel - min_log_mel) * log_step()).exp()
            }
        }
    }
}

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

/// Triangular mel filters over the one-sided DFT bins.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    /// `n_mels × (n_fft/2 + 1)`.
    pub weights: Matrix,
    /// `n_mels + 2` band edges in Hz; filter `i` spans `edges[i]..edges[i+2]`
    /// and peaks at `edges[i+1]`.
    pub edges_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn n_mels(&self) -> usize {
        self.weights.rows
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.edges_hz[1..self.edges_hz.len() - 1]
    }

    /// `weights · power`, `n_mels × n_frames`.
    pub fn apply(&self, power: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.weights.rows, power.cols);
        for m in 0..self.weights.rows {
            let w = self.weights.row(m);
            let dst = &mut out.data[m * power.cols..(m + 1) * power.cols];
            for (k, &wk) in w.iter().enumerate() {
                if wk == 0.0 {
                    continue;
                }
                for (d, &p) in dst.iter_mut().zip(power.row(k)) {
                    *d += wk * p;
                }
            }
        }
        out
    }
}

/// Area-normalized triangles on `n_mels + 2` mel-equispaced points.
pub fn mel_filterbank(
    n_mels: usize,
    sample_rate: u32,
    n_fft: usize,
    f_min: f64,
    f_max: f64,
    scale: MelScale,
) -> Result<MelFilterbank, FeatureError> {
    let nyquist = sample_rate as f64 / 2.0;
    if n_mels == 0 || n_fft < 2 || sample_rate == 0 {
        return Err(FeatureError::Contract(
            "n_mels, n_fft and sample rate must be positive".into(),
        ));
    }
    if !(f_min >= 0.0 && f_min < f_max && f_max <= nyquist) {
        return Err(FeatureError::Contract(format!(
            "invalid frequency range [{f_min}, {f_max}] for Nyquist {nyquist}"
        )));
    }
    let bins = n_fft / 2 + 1;
    let freqs: Vec<f64> = (0..bins)
        .map(|k| k as f64 * sample_rate as f64 / n_fft as f64)
        .collect();
    let (lo, hi) = (hz_to_mel(f_min, scale), hz_to_mel(f_max, scale));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64, scale))
        .collect();
    let mut weights = Matrix::zeros(n_mels, bins);
    for m in 0..n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let norm = 2.0 / (right - left);
        for (k, &f) in freqs.iter().enumerate() {
            let rising = (f - left) / (center - left);
            let falling = (right - f) / (right - center);
            let w = rising.min(falling).max(0.0);
            weights.data[m * bins + k] = w * norm;
        }
    }
    Ok(MelFilterbank {
        weights,
        edges_hz: edges,
    })
}

/// `n_mels × n_frames` natural-log mel energies, with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Matrix,
    pub clip_id: String,
    pub device: String,
}

impl FeatureMatrix {
    pub fn n_mels(&self) -> usize {
        self.values.rows
    }

    pub fn n_frames(&self) -> usize {
        self.values.cols
    }
}

/// Reusable extractor holding the filterbank and FFT plan.
pub struct LogMel {
    cfg: FeatureConfig,
    bank: MelFilterbank,
}

impl LogMel {
    pub fn new(cfg: FeatureConfig) -> Result<Self, FeatureError> {
        let bank = mel_filterbank(
            cfg.n_mels,
            cfg.sample_rate,
            cfg.n_fft,
            cfg.f_min,
            cfg.f_max(),
            cfg.mel_scale,
        )?;
        Ok(LogMel { cfg, bank })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    pub fn extract(&self, clip: &AudioClip) -> Result<Matrix, FeatureError> {
        if clip.sample_rate != self.cfg.sample_rate {
            return Err(FeatureError::Contract(format!(
                "clip sampled at {} Hz, extractor configured for {} Hz",
                clip.sample_rate, self.cfg.sample_rate
            )));
        }
        let frames = frame_signal(clip, &self.cfg)?;
        let mut mel = self.bank.apply(&power_spectrum(&frames));
        for v in mel.data.iter_mut() {
            *v = (*v + self.cfg.floor).ln();
        }
        Ok(mel)
    }
}

/// Log mel energies of `clip` with the default configuration at the clip's
/// sample rate.
pub fn log_mel(clip: &AudioClip) -> Result<FeatureMatrix, FeatureError> {
    let cfg = FeatureConfig {
        sample_rate: clip.sample_rate,
        ..FeatureConfig::default()
    };
    let values = LogMel::new(cfg)?.extract(clip)?;
    Ok(FeatureMatrix {
        values,
        clip_id: String::new(),
        device: String::new(),
    })
}

/// Reads a PCM WAV (integer or float samples), averaging channels to mono.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip, FeatureError> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<Result<_, _>>()?
        }
    };
    let samples = interleaved
        .chunks(channels)
        .map(|c| c.iter().sum::<f64>() / channels as f64)
        .collect();
    Ok(AudioClip {
        samples,
        sample_rate: spec.sample_rate,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn noise(len: usize, seed: u64) -> AudioClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioClip::new(
            (0..len).map(|_| rng.random_range(-0.5..0.5)).collect(),
            44_100,
        )
    }

    #[test]
    fn ten_seconds_give_429_frames() {
        assert_eq!(frame_count(441_000, 2048, 1024), Some(429));
        assert_eq!(frame_count(2048, 2048, 1024), Some(1));
        assert_eq!(frame_count(2047, 2048, 1024), None);
    }

    #[test]
    fn short_clip_is_an_error() {
        let err = frame_signal(
            &AudioClip::new(vec![0.0; 100], 44_100),
            &FeatureConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            FeatureError::TooShort {
                len: 100,
                window: 2048
            }
        ));
    }

    #[test]
    fn zero_clip_frames_and_spectrum_are_zero() {
        let frames = frame_signal(
            &AudioClip::new(vec![0.0; 5000], 44_100),
            &FeatureConfig::default(),
        )
        .unwrap();
        assert_eq!(frames.n_frames, 3);
        assert!(frames.data.iter().all(|&x| x == 0.0));
        let p = power_spectrum(&frames);
        assert_eq!((p.rows, p.cols), (1025, 3));
        assert!(p.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn hamming_is_periodic() {
        let w = window_fn(WindowKind::Hamming, 2048);
        assert!((w[0] - 0.08).abs() < 1e-12);
        assert!((w[1024] - 1.0).abs() < 1e-12);
        // Periodic: w[n] == w[N − n] for 0 < n < N.
        assert!((w[1] - w[2047]).abs() < 1e-12);
    }

    #[test]
    fn cosine_on_a_bin_concentrates_there() {
        let cfg = FeatureConfig {
            window: WindowKind::Rectangular,
            ..FeatureConfig::default()
        };
        let k = 37;
        let samples = (0..2048)
            .map(|n| (2.0 * PI * k as f64 * n as f64 / 2048.0).cos())
            .collect();
        let frames = frame_signal(&AudioClip::new(samples, 44_100), &cfg).unwrap();
        let p = power_spectrum(&frames);
        let total: f64 = p.data.iter().sum();
        assert!(p.get(k, 0) / total > 1.0 - 1e-9);
        assert!((p.get(k, 0) - (2048.0f64 / 2.0).powi(2)).abs() < 1e-6);
    }

    #[test]
    fn parseval_relation_holds() {
        let clip = noise(2048, 4);
        let frames = frame_signal(&clip, &FeatureConfig::default()).unwrap();
        let p = power_spectrum(&frames);
        let n = 2048.0;
        let time: f64 = frames.frame(0).iter().map(|x| x * x).sum();
        // One-sided bins: DC and Nyquist once, the rest twice.
        let freq: f64 =
            p.get(0, 0) + p.get(1024, 0) + 2.0 * (1..1024).map(|k| p.get(k, 0)).sum::<f64>();
        assert!(((freq / n) - time).abs() / time <= 1e-6);
    }

    #[test]
    fn filterbank_shape_and_triangles() {
        let bank = mel_filterbank(64, 44_100, 2048, 0.0, 22_050.0, MelScale::Slaney).unwrap();
        assert_eq!((bank.weights.rows, bank.weights.cols), (64, 1025));
        assert!(bank.weights.data.iter().all(|&w| w >= 0.0));
        for m in 0..64 {
            let row = bank.weights.row(m);
            let peak = row
                .iter()
                .enumerate()
                .fold(0, |best, (k, &w)| if w > row[best] { k } else { best });
            assert!(row[peak] > 0.0, "filter {m} empty");
            assert!(
                row[..=peak].windows(2).all(|w| w[0] <= w[1]),
                "filter {m} not rising"
            );
            assert!(
                row[peak..].windows(2).all(|w| w[0] >= w[1]),
                "filter {m} not falling"
            );
        }
        assert!(bank.centers_hz().windows(2).all(|c| c[0] < c[1]));
    }

    #[test]
    fn linear_region_centers_are_equally_spaced() {
        let bank = mel_filterbank(64, 44_100, 2048, 0.0, 22_050.0, MelScale::Slaney).unwrap();
        // Independent evaluation: below 1 kHz the Slaney mel is f / (200/3),
        // so the mel grid spacing maps to a constant Hz step.
        let mel_max = 15.0 + (22_050.0f64 / 1000.0).ln() / (6.4f64.ln() / 27.0);
        let step_hz = mel_max / 65.0 * 200.0 / 3.0;
        let low: Vec<f64> = bank
            .centers_hz()
            .iter()
            .copied()
            .filter(|&c| c < 1000.0)
            .collect();
        assert!(low.len() > 5);
        for (i, c) in low.iter().enumerate() {
            let want = (i + 1) as f64 * step_hz;
            assert!((c - want).abs() / want <= 1e-6, "{c} vs {want}");
        }
    }

    #[test]
    fn filters_cover_the_band_without_gaps() {
        let bank = mel_filterbank(64, 44_100, 2048, 0.0, 22_050.0, MelScale::Slaney).unwrap();
        for k in 1..1024 {
            let covered = (0..64).any(|m| bank.weights.get(m, k) > 0.0);
            assert!(covered, "bin {k} uncovered");
        }
    }

    #[test]
    fn htk_scale_round_trips() {
        for f in [0.0, 440.0, 1000.0, 8000.0] {
            for scale in [MelScale::Htk, MelScale::Slaney] {
                assert!((mel_to_hz(hz_to_mel(f, scale), scale) - f).abs() < 1e-9);
            }
        }
        assert!(mel_filterbank(40, 16_000, 512, 0.0, 8000.0, MelScale::Htk).is_ok());
    }

    #[test]
    fn invalid_range_rejected() {
        assert!(mel_filterbank(64, 44_100, 2048, 500.0, 100.0, MelScale::Slaney).is_err());
        assert!(mel_filterbank(64, 44_100, 2048, 0.0, 30_000.0, MelScale::Slaney).is_err());
    }

    #[test]
    fn zero_clip_hits_the_floor() {
        let fm = log_mel(&AudioClip::new(vec![0.0; 441_000], 44_100)).unwrap();
        assert_eq!((fm.n_mels(), fm.n_frames()), (64, 429));
        let floor = 1e-10f64.ln();
        assert!(fm.values.data.iter().all(|&v| v == floor));
        assert!((floor + 23.026).abs() < 1e-3);
    }

    #[test]
    fn white_noise_shape_and_scale_covariance() {
        let clip = noise(441_000, 9);
        let base = log_mel(&clip).unwrap();
        assert_eq!((base.n_mels(), base.n_frames()), (64, 429));
        let louder = AudioClip::new(clip.samples.iter().map(|s| s * 10.0).collect(), 44_100);
        let scaled = log_mel(&louder).unwrap();
        let shift = 2.0 * 10f64.ln();
        for (a, b) in base.values.data.iter().zip(&scaled.values.data) {
            assert!((b - a - shift).abs() <= 1e-6, "{a} -> {b}");
        }
    }

    #[test]
    fn hop_shift_moves_columns() {
        let clip = noise(2048 + 6 * 1024, 10);
        let shifted = AudioClip::new(clip.samples[1024..].to_vec(), 44_100);
        let a = log_mel(&clip).unwrap().values;
        let b = log_mel(&shifted).unwrap().values;
        assert_eq!(a.cols, b.cols + 1);
        for m in 0..64 {
            for f in 0..b.cols {
                assert_eq!(a.get(m, f + 1).to_bits(), b.get(m, f).to_bits());
            }
        }
    }

    #[test]
    fn wav_round_trip_int_and_float() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 44_100,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for (l, r) in [(16384i16, 0i16), (-32768, -32768)] {
            w.write_sample(l).unwrap();
            w.write_sample(r).unwrap();
        }
        w.finalize().unwrap();
        let clip = read_wav(&path).unwrap();
        assert_eq!(clip.samples, vec![0.25, -1.0]);

        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 22_050,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(0.5f32).unwrap();
        w.finalize().unwrap();
        let clip = read_wav(&path).unwrap();
        assert_eq!(
            (clip.samples.as_slice(), clip.sample_rate),
            (&[0.5][..], 22_050)
        );
    }

    proptest! {
        #[test]
        fn frame_count_formula(len in 2048usize..200_000) {
            prop_assert_eq!(frame_count(len, 2048, 1024), Some(1 + (len - 2048) / 1024));
        }
    }
}
