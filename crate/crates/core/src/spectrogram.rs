//! Mel-spectrogram images of a state time series.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrogramConfig {
    pub sample_rate: f64,
    pub window_len: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        Self {
            sample_rate: 1000.0,
            window_len: 256,
            hop: 64,
            n_fft: 256,
            n_mels: 32,
            f_min: 0.0,
            f_max: 500.0,
            log_floor: 1e-10,
        }
    }
}

impl SpectrogramConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if self.hop < 1 {
            return bad("hop must be >= 1".into());
        }
        if self.window_len < 1 || self.window_len > self.n_fft {
            return bad(format!(
                "window_len {} must be in 1..=n_fft ({})",
                self.window_len, self.n_fft
            ));
        }
        if !(self.sample_rate > 0.0) {
            return bad("sample_rate must be positive".into());
        }
        if !(0.0 <= self.f_min && self.f_min < self.f_max && self.f_max <= self.sample_rate / 2.0) {
            return bad(format!(
                "need 0 <= f_min < f_max <= sample_rate/2, got {}..{}",
                self.f_min, self.f_max
            ));
        }
        if self.n_mels < 1 {
            return bad("n_mels must be >= 1".into());
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive".into());
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.window_len {
            0
        } else {
            (len - self.window_len) / self.hop + 1
        }
    }

    pub fn floor_db(&self) -> f64 {
        10.0 * self.log_floor.log10()
    }

    pub fn bin_hz(&self, k: usize) -> f64 {
        k as f64 * self.sample_rate / self.n_fft as f64
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / len as f64).cos())
        .collect()
}

/// One-sided power spectra, `(n_fft/2 + 1) x n_frames`.
///
/// Power is `|X_k|^2 / n_fft`, so summing a column with the interior bins
/// doubled gives the energy of the windowed frame.
pub fn stft_power(signal: &[f64], config: &SpectrogramConfig) -> Result<DMatrix<f64>> {
    config.validate()?;
    if signal.len() < config.window_len {
        return Err(Error::InsufficientData {
            needed: config.window_len,
            got: signal.len(),
        });
    }
    let n_frames = config.n_frames(signal.len());
    let n_bins = config.n_bins();
    let window = hann_window(config.window_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(config.n_fft);
    let mut power = DMatrix::zeros(n_bins, n_frames);
    let mut buf = vec![Complex::new(0.0, 0.0); config.n_fft];
    let norm = 1.0 / config.n_fft as f64;
    for f in 0..n_frames {
        let start = f * config.hop;
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (i, w) in window.iter().enumerate() {
            buf[i].re = w * signal[start + i];
        }
        fft.process(&mut buf);
        for k in 0..n_bins {
            power[(k, f)] = buf[k].norm_sqr() * norm;
        }
    }
    Ok(power)
}

/// Center frequencies (Hz) of the mel filters, plus the two outer edges.
pub fn mel_edges_hz(config: &SpectrogramConfig) -> Vec<f64> {
    let lo = hz_to_mel(config.f_min);
    let hi = hz_to_mel(config.f_max);
    let n = config.n_mels + 1;
    (0..=n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / n as f64))
        .collect()
}

/// Triangular mel filters, one row per filter, each scaled so its largest
/// weight is 1.
pub fn mel_filterbank(config: &SpectrogramConfig) -> Result<DMatrix<f64>> {
    config.validate()?;
    let edges = mel_edges_hz(config);
    let n_bins = config.n_bins();
    let mut bank = DMatrix::zeros(config.n_mels, n_bins);
    for m in 0..config.n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = config.bin_hz(k);
            let rising = (f - lo) / (center - lo);
            let falling = (hi - f) / (hi - center);
            bank[(m, k)] = rising.min(falling).max(0.0);
        }
        let peak = bank.row(m).max();
        if peak <= 0.0 {
            return Err(Error::DegenerateFilter { index: m });
        }
        bank.row_mut(m).scale_mut(1.0 / peak);
    }
    Ok(bank)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelSpectrogram {
    /// `n_mels x n_frames`, in dB.
    pub values: DMatrix<f64>,
    /// Sample index of each frame's window midpoint.
    pub frame_centers: Vec<usize>,
    pub config: SpectrogramConfig,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.values.ncols()
    }

    /// Writes the matrix as CSV (rows = mel bins) and a JSON sidecar with
    /// the config and frame centers.
    pub fn export(&self, csv_path: &Path, sidecar_path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in 0..self.values.nrows() {
            let row: Vec<String> = self.values.row(r).iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        fs::write(csv_path, out).map_err(|e| Error::io(csv_path, e))?;
        let sidecar = serde_json::json!({
            "config": self.config,
            "frame_centers": self.frame_centers,
            "n_mels": self.values.nrows(),
            "n_frames": self.values.ncols(),
        });
        let text = serde_json::to_string_pretty(&sidecar)?;
        fs::write(sidecar_path, text).map_err(|e| Error::io(sidecar_path, e))
    }
}

pub fn mel_spectrogram(signal: &[f64], config: &SpectrogramConfig) -> Result<MelSpectrogram> {
    let power = stft_power(signal, config)?;
    let bank = mel_filterbank(config)?;
    let mut values = &bank * &power;
    values.apply(|v| *v = 10.0 * v.max(config.log_floor).log10());
    let frame_centers = (0..power.ncols())
        .map(|f| f * config.hop + config.window_len / 2)
        .collect();
    Ok(MelSpectrogram {
        values,
        frame_centers,
        config: config.clone(),
    })
}

/// Grayscale image with pixels in `[0, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl PixelImage {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// Plain-text 8-bit PGM.
    pub fn to_pgm(&self) -> String {
        let mut out = format!("P2\n{} {}\n255\n", self.width, self.height);
        for r in 0..self.height {
            let row: Vec<String> = (0..self.width)
                .map(|c| ((self.get(r, c) * 255.0).round() as u8).to_string())
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ImageScaling {
    GlobalMinMax,
    FixedRange { lo: f64, hi: f64 },
}

fn scale_pixels(values: impl Iterator<Item = f64>, lo: f64, hi: f64) -> Vec<f64> {
    let span = hi - lo;
    values
        .map(|v| if span > 0.0 { ((v - lo) / span).clamp(0.0, 1.0) } else { 0.0 })
        .collect()
}

/// Affine rescale of the whole spectrogram into `[0, 1]`.
pub fn to_image(spec: &MelSpectrogram, mode: ImageScaling) -> Result<PixelImage> {
    if spec.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("spectrogram contains non-finite values".into()));
    }
    let (lo, hi) = match mode {
        ImageScaling::GlobalMinMax => (spec.values.min(), spec.values.max()),
        ImageScaling::FixedRange { lo, hi } => {
            if !(lo < hi) {
                return Err(Error::InvalidRange { lo, hi });
            }
            (lo, hi)
        }
    };
    let (h, w) = spec.values.shape();
    let row_major = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).map(|rc| spec.values[rc]);
    Ok(PixelImage {
        height: h,
        width: w,
        pixels: scale_pixels(row_major, lo, hi),
    })
}

/// One image per frame: the `width` most recent frames ending at that frame,
/// padded on the left by repeating frame 0. Scaled with a fixed dB range.
pub fn frame_images(spec: &MelSpectrogram, width: usize, lo: f64, hi: f64) -> Result<Vec<PixelImage>> {
    if !(lo < hi) {
        return Err(Error::InvalidRange { lo, hi });
    }
    if width == 0 {
        return Err(Error::InvalidInput("image width must be positive".into()));
    }
    let n_mels = spec.values.nrows();
    let images = (0..spec.n_frames())
        .map(|f| {
            let vals = (0..n_mels).flat_map(|r| {
                (0..width).map(move |c| {
                    let src = (f + c + 1).saturating_sub(width);
                    spec.values[(r, src)]
                })
            });
            PixelImage {
                height: n_mels,
                width,
                pixels: scale_pixels(vals, lo, hi),
            }
        })
        .collect();
    Ok(images)
}

/// Zero-order-hold alignment: timestep `t` uses the last frame whose center
/// is `<= t`, or frame 0 before the first center.
pub fn align_latents(frame_centers: &[usize], n_steps: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n_steps);
    let mut f = 0;
    for t in 0..n_steps {
        while f + 1 < frame_centers.len() && frame_centers[f + 1] <= t {
            f += 1;
        }
        out.push(f);
    }
    out
}

/// Which state channel feeds the spectrogram.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalChannel {
    Theta,
    ThetaDot,
    /// Both channels, stacked vertically into one image.
    Both,
}

/// Settings that turn a trajectory into per-frame CAE input images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageConfig {
    pub spectrogram: SpectrogramConfig,
    pub channel: SignalChannel,
    /// Frames per image.
    pub width: usize,
    pub db_lo: f64,
    pub db_hi: f64,
}

impl Default for ImageConfig {
    fn default() -> Self {
        Self {
            spectrogram: SpectrogramConfig::default(),
            channel: SignalChannel::Theta,
            width: 16,
            db_lo: -100.0,
            db_hi: 60.0,
        }
    }
}

impl ImageConfig {
    pub fn image_height(&self) -> usize {
        match self.channel {
            SignalChannel::Both => 2 * self.spectrogram.n_mels,
            _ => self.spectrogram.n_mels,
        }
    }
}

/// Frame images of one trajectory and the frame each state index maps to.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryImages {
    pub images: Vec<PixelImage>,
    pub step_frame: Vec<usize>,
}

impl TrajectoryImages {
    pub fn image_for_step(&self, t: usize) -> &PixelImage {
        &self.images[self.step_frame[t]]
    }
}

/// Spectrogram images for a state history given as angle and rate series.
pub fn trajectory_images(theta: &[f64], theta_dot: &[f64], cfg: &ImageConfig) -> Result<TrajectoryImages> {
    if theta.len() != theta_dot.len() {
        return Err(Error::dim("theta and theta_dot series differ in length"));
    }
    let one = |sig: &[f64]| -> Result<(Vec<PixelImage>, Vec<usize>)> {
        let spec = mel_spectrogram(sig, &cfg.spectrogram)?;
        let imgs = frame_images(&spec, cfg.width, cfg.db_lo, cfg.db_hi)?;
        Ok((imgs, spec.frame_centers))
    };
    let (images, centers) = match cfg.channel {
        SignalChannel::Theta => one(theta)?,
        SignalChannel::ThetaDot => one(theta_dot)?,
        SignalChannel::Both => {
            let (a, centers) = one(theta)?;
            let (b, _) = one(theta_dot)?;
            let stacked = a
                .into_iter()
                .zip(b)
                .map(|(top, bottom)| PixelImage {
                    height: top.height + bottom.height,
                    width: top.width,
                    pixels: [top.pixels, bottom.pixels].concat(),
                })
                .collect();
            (stacked, centers)
        }
    };
    Ok(TrajectoryImages {
        images,
        step_frame: align_latents(&centers, theta.len()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tone(freq: f64, amp: f64, len: usize, sr: f64) -> Vec<f64> {
        (0..len).map(|i| amp * (2.0 * PI * freq * i as f64 / sr).sin()).collect()
    }

    /// Textbook O(n^2) DFT of one windowed frame.
    fn direct_dft_power(frame: &[f64], n_fft: usize) -> Vec<f64> {
        (0..=n_fft / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, x) in frame.iter().enumerate() {
                    let a = -2.0 * PI * (k * n) as f64 / n_fft as f64;
                    re += x * a.cos();
                    im += x * a.sin();
                }
                (re * re + im * im) / n_fft as f64
            })
            .collect()
    }

    #[test]
    fn zero_signal_has_zero_power() {
        let cfg = SpectrogramConfig::default();
        let p = stft_power(&vec![0.0; 1000], &cfg).unwrap();
        assert!(p.iter().all(|v| *v == 0.0));
        assert_eq!(p.shape(), (129, (1000 - 256) / 64 + 1));
    }

    #[test]
    fn short_signal_errors() {
        let cfg = SpectrogramConfig::default();
        assert!(matches!(
            stft_power(&[0.0; 100], &cfg),
            Err(Error::InsufficientData { needed: 256, got: 100 })
        ));
    }

    #[test]
    fn bin_centered_tone_peaks_at_its_bin() {
        let cfg = SpectrogramConfig::default();
        let k = 20;
        let sig = tone(cfg.bin_hz(k), 1.0, 2000, cfg.sample_rate);
        let p = stft_power(&sig, &cfg).unwrap();
        for f in 0..p.ncols() {
            assert_eq!(p.column(f).imax(), k);
        }
        let window = hann_window(cfg.window_len);
        let frame: Vec<f64> = (0..256).map(|i| window[i] * sig[64 + i]).collect();
        let oracle = direct_dft_power(&frame, cfg.n_fft);
        for (a, b) in p.column(1).iter().zip(&oracle) {
            assert_relative_eq!(*a, *b, epsilon = 1e-9, max_relative = 1e-9);
        }
    }

    #[test]
    fn windowed_parseval() {
        let cfg = SpectrogramConfig::default();
        let sig: Vec<f64> = (0..600).map(|i| ((i * 7919) % 113) as f64 / 50.0 - 1.0).collect();
        let p = stft_power(&sig, &cfg).unwrap();
        let w = hann_window(cfg.window_len);
        let last = cfg.n_bins() - 1;
        for f in 0..p.ncols() {
            let energy: f64 = (0..256).map(|i| (w[i] * sig[f * 64 + i]).powi(2)).sum();
            let spec_sum: f64 = (0..=last)
                .map(|k| if k == 0 || k == last { p[(k, f)] } else { 2.0 * p[(k, f)] })
                .sum();
            assert_relative_eq!(spec_sum, energy, max_relative = 1e-9);
        }
    }

    #[test]
    fn filterbank_rows_are_valid_and_ordered() {
        let cfg = SpectrogramConfig::default();
        let bank = mel_filterbank(&cfg).unwrap();
        assert_eq!(bank.shape(), (32, 129));
        for r in 0..bank.nrows() {
            assert!(bank.row(r).iter().all(|v| *v >= 0.0));
            assert_relative_eq!(bank.row(r).max(), 1.0);
        }
        let edges = mel_edges_hz(&cfg);
        assert!(edges.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn four_filter_centers_match_hand_inversion() {
        let cfg = SpectrogramConfig {
            sample_rate: 16000.0,
            n_fft: 512,
            window_len: 512,
            n_mels: 4,
            f_min: 0.0,
            f_max: 8000.0,
            ..Default::default()
        };
        // m(8000) = 2840.0230467, centers at k/5 of that, inverted by hand
        let expected = [458.7300836725616, 1218.079152582602, 2475.0514528037643, 4555.753765102847];
        let edges = mel_edges_hz(&cfg);
        for (c, e) in edges[1..5].iter().zip(&expected) {
            assert_relative_eq!(*c, *e, max_relative = 1e-12);
        }
    }

    #[test]
    fn too_many_mels_is_degenerate() {
        let cfg = SpectrogramConfig {
            n_fft: 16,
            window_len: 16,
            n_mels: 40,
            ..Default::default()
        };
        assert!(matches!(mel_filterbank(&cfg), Err(Error::DegenerateFilter { .. })));
    }

    #[test]
    fn zero_signal_hits_floor() {
        let cfg = SpectrogramConfig::default();
        let s = mel_spectrogram(&vec![0.0; 512], &cfg).unwrap();
        assert!(s.values.iter().all(|v| (*v - -100.0).abs() < 1e-12));
        assert_eq!(s.frame_centers, vec![128, 192, 256, 320, 384]);
    }

    #[test]
    fn tone_lands_in_containing_band() {
        let cfg = SpectrogramConfig::default();
        let f0 = 173.0;
        let s = mel_spectrogram(&tone(f0, 1.0, 3000, cfg.sample_rate), &cfg).unwrap();
        let edges = mel_edges_hz(&cfg);
        for f in 0..s.n_frames() {
            let m = s.values.column(f).imax();
            assert!(edges[m] <= f0 && f0 <= edges[m + 2]);
        }
    }

    #[test]
    fn doubling_amplitude_adds_six_db() {
        let cfg = SpectrogramConfig::default();
        let a = mel_spectrogram(&tone(60.0, 1.0, 1500, 1000.0), &cfg).unwrap();
        let b = mel_spectrogram(&tone(60.0, 2.0, 1500, 1000.0), &cfg).unwrap();
        let floor = cfg.floor_db();
        let six = 20.0 * 2f64.log10();
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            if *x > floor + 7.0 {
                assert_relative_eq!(y - x, six, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn image_scaling() {
        let cfg = SpectrogramConfig::default();
        let flat = MelSpectrogram {
            values: DMatrix::from_element(3, 4, -20.0),
            frame_centers: vec![0, 1, 2, 3],
            config: cfg.clone(),
        };
        let img = to_image(&flat, ImageScaling::GlobalMinMax).unwrap();
        assert!(img.pixels.iter().all(|p| *p == 0.0));

        let ramp = MelSpectrogram {
            values: DMatrix::from_row_slice(2, 2, &[-80.0, -40.0, -10.0, 0.0]),
            ..flat.clone()
        };
        let img = to_image(&ramp, ImageScaling::GlobalMinMax).unwrap();
        assert_eq!(img.get(0, 0), 0.0);
        assert_eq!(img.get(1, 1), 1.0);
        let img = to_image(&ramp, ImageScaling::FixedRange { lo: -80.0, hi: 0.0 }).unwrap();
        assert_eq!(img.get(0, 1), 0.5);
        assert!(matches!(
            to_image(&ramp, ImageScaling::FixedRange { lo: 0.0, hi: 0.0 }),
            Err(Error::InvalidRange { .. })
        ));
        assert!(img.to_pgm().starts_with("P2\n2 2\n255\n0 128\n"));
    }

    #[test]
    fn frame_images_pad_left() {
        let cfg = SpectrogramConfig::default();
        let spec = MelSpectrogram {
            values: DMatrix::from_row_slice(1, 3, &[0.0, 50.0, 100.0]),
            frame_centers: vec![0, 1, 2],
            config: cfg,
        };
        let imgs = frame_images(&spec, 2, 0.0, 100.0).unwrap();
        assert_eq!(imgs[0].pixels, vec![0.0, 0.0]);
        assert_eq!(imgs[1].pixels, vec![0.0, 0.5]);
        assert_eq!(imgs[2].pixels, vec![0.5, 1.0]);
    }

    #[test]
    fn stacked_channels_double_height() {
        let cfg = ImageConfig {
            channel: SignalChannel::Both,
            ..Default::default()
        };
        let th = tone(5.0, 1.0, 600, 1000.0);
        let imgs = trajectory_images(&th, &th, &cfg).unwrap();
        assert_eq!(imgs.images[0].height, 64);
        assert_eq!(imgs.step_frame.len(), 600);
        assert!(imgs.images.iter().all(|i| i.pixels.iter().all(|p| (0.0..=1.0).contains(p))));
    }

    #[test]
    fn alignment_rules() {
        assert_eq!(align_latents(&[128], 5), vec![0; 5]);
        let a = align_latents(&[64, 192], 300);
        assert_eq!(a[100], 0);
        assert_eq!(a[200], 1);
        assert_eq!(a[10], 0);
        assert!(a.windows(2).all(|w| w[0] <= w[1]));
    }
}
