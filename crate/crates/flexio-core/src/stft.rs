//! STFT analysis/synthesis and complex time-frequency masking.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::autograd::{Arr, Graph, Var};
use crate::error::{FlexioError, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// M-channel time-domain audio.
#[derive(Clone, Debug)]
pub struct Waveform {
    pub samples: Array2<f64>, // [channels, length]
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Array2<f64>, sample_rate: u32) -> Result<Self> {
        if samples.nrows() == 0 || samples.ncols() == 0 {
            return Err(FlexioError::InvalidInput("empty waveform".into()));
        }
        if !samples.iter().all(|x| x.is_finite()) {
            return Err(FlexioError::InvalidInput("non-finite samples".into()));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        let n = samples.len();
        Self::new(Array2::from_shape_vec((1, n), samples).unwrap(), sample_rate)
    }

    pub fn channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.ncols() == 0
    }
}

/// Per-channel complex STFT, [M, T, F].
#[derive(Clone, Debug)]
pub struct ComplexSpec {
    pub values: Array3<Complex64>,
    pub frame_hop: usize,
    pub window_len: usize,
}

impl ComplexSpec {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }
    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }
    pub fn bins(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Analysis window identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    SqrtHann,
    Hann,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        // 16 ms window / 8 ms hop at 16 kHz; F = 129.
        StftConfig { window_len: 256, hop: 128, window: WindowKind::SqrtHann }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.window_len {
            return Err(FlexioError::ConfigError(format!(
                "hop {} must be in (0, window_len {}]",
                self.hop, self.window_len
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    pub fn frames_for(&self, len: usize) -> usize {
        1 + len / self.hop
    }

    fn pad(&self) -> usize {
        self.window_len / 2
    }

    pub fn window_values(&self) -> Array1<f64> {
        let w = self.window_len;
        let hann =
            Array1::from_iter((0..w).map(|n| {
                0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / w as f64).cos())
            }));
        match self.window {
            WindowKind::Hann => hann,
            WindowKind::SqrtHann => hann.mapv(f64::sqrt),
        }
    }
}

fn reflect_index(i: isize, n: isize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * n - 2;
    let mut m = i % period;
    if m < 0 {
        m += period;
    }
    if m < n {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Reflect-padded signal of `full_len` samples with the original starting at `pad`.
fn padded_signal(x: &[f64], pad: usize, full_len: usize) -> Vec<f64> {
    let n = x.len() as isize;
    (0..full_len)
        .map(|i| x[reflect_index(i as isize - pad as isize, n)])
        .collect()
}

/// Forward STFT of an M-channel waveform; center-padded with reflection.
pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<ComplexSpec> {
    cfg.validate()?;
    if w.is_empty() {
        return Err(FlexioError::InvalidInput("empty waveform".into()));
    }
    let (win, hop, pad) = (cfg.window_len, cfg.hop, cfg.pad());
    let window = cfg.window_values();
    let t_frames = cfg.frames_for(w.len());
    let full_len = (t_frames - 1) * hop + win;
    let f_bins = cfg.bins();

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(win);

    let mut out = Array3::<Complex64>::zeros((w.channels(), t_frames, f_bins));
    let mut frame = vec![Complex64::default(); win];
    for (m, ch) in w.samples.outer_iter().enumerate() {
        let padded = padded_signal(ch.as_slice().unwrap(), pad, full_len);
        for t in 0..t_frames {
            for n in 0..win {
                frame[n] = Complex64::new(padded[t * hop + n] * window[n], 0.0);
            }
            fft.process(&mut frame);
            for k in 0..f_bins {
                out[[m, t, k]] = frame[k];
            }
        }
    }
    Ok(ComplexSpec { values: out, frame_hop: hop, window_len: win })
}

/// Hermitian-expand one frame and inverse-transform; returns W real samples
/// scaled by 1/W (the imaginary parts of the DC and Nyquist bins are ignored).
fn frame_irfft(spec: &[Complex64], win: usize, ifft: &std::sync::Arc<dyn rustfft::Fft<f64>>) -> Vec<f64> {
    let f_bins = win / 2 + 1;
    debug_assert_eq!(spec.len(), f_bins);
    let mut full = vec![Complex64::default(); win];
    full[0] = Complex64::new(spec[0].re, 0.0);
    full[win / 2] = Complex64::new(spec[win / 2].re, 0.0);
    for k in 1..win / 2 {
        full[k] = spec[k];
        full[win - k] = spec[k].conj();
    }
    ifft.process(&mut full);
    full.iter().map(|c| c.re / win as f64).collect()
}

struct OlaResult {
    buffer: Vec<f64>,
    wss: Vec<f64>,
}

fn overlap_add(
    frames: impl Iterator<Item = Vec<f64>>,
    t_frames: usize,
    cfg: &StftConfig,
    full_len: usize,
) -> OlaResult {
    let window = cfg.window_values();
    let mut buffer = vec![0.0; full_len];
    let mut wss = vec![0.0; full_len];
    for (t, frame) in frames.enumerate() {
        debug_assert!(t < t_frames);
        let at = t * cfg.hop;
        for n in 0..cfg.window_len {
            buffer[at + n] += frame[n] * window[n];
            wss[at + n] += window[n] * window[n];
        }
    }
    OlaResult { buffer, wss }
}

fn check_istft_args(s: &ComplexSpec, cfg: &StftConfig, out_len: usize) -> Result<()> {
    cfg.validate()?;
    if s.frame_hop != cfg.hop || s.window_len != cfg.window_len {
        return Err(FlexioError::InvalidInput(
            "spectrogram was produced with a different STFT config".into(),
        ));
    }
    if s.bins() != cfg.bins() {
        return Err(FlexioError::InvalidInput("bin count does not match window length".into()));
    }
    if cfg.frames_for(out_len) != s.frames() {
        return Err(FlexioError::InvalidInput(format!(
            "out_len {} inconsistent with {} frames",
            out_len,
            s.frames()
        )));
    }
    Ok(())
}

/// Inverse STFT via overlap-add with window-sum-square normalization.
pub fn istft(s: &ComplexSpec, cfg: &StftConfig, out_len: usize) -> Result<Waveform> {
    check_istft_args(s, cfg, out_len)?;
    let (win, hop, pad) = (cfg.window_len, cfg.hop, cfg.pad());
    let t_frames = s.frames();
    let full_len = ((t_frames - 1) * hop + win).max(pad + out_len);

    let mut planner = FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(win);

    let mut out = Array2::<f64>::zeros((s.channels(), out_len));
    for (m, ch) in s.values.outer_iter().enumerate() {
        let ola = overlap_add(
            ch.outer_iter().map(|fr| frame_irfft(fr.as_slice().unwrap(), win, &ifft)),
            t_frames,
            cfg,
            full_len,
        );
        for i in 0..out_len {
            let denom = ola.wss[pad + i];
            out[[m, i]] = if denom > 1e-12 { ola.buffer[pad + i] / denom } else { 0.0 };
        }
    }
    Waveform::new(out, SAMPLE_RATE)
}

/// Elementwise complex product of a [T, F] mask with a single-channel [T, F] mixture.
pub fn apply_complex_mask(
    mask: &ArrayView2<Complex64>,
    mix: &ComplexSpec,
) -> Result<ComplexSpec> {
    if mix.channels() != 1 {
        return Err(FlexioError::InvalidInput("expected a single-channel spectrogram".into()));
    }
    if mask.dim() != (mix.frames(), mix.bins()) {
        return Err(FlexioError::InvalidInput(format!(
            "mask shape {:?} does not match spectrogram [{}, {}]",
            mask.dim(),
            mix.frames(),
            mix.bins()
        )));
    }
    let mut values = mix.values.clone();
    values
        .index_axis_mut(Axis(0), 0)
        .zip_mut_with(mask, |v, &m| *v *= m);
    Ok(ComplexSpec { values, frame_hop: mix.frame_hop, window_len: mix.window_len })
}

impl Graph {
    /// Differentiable inverse STFT of a single-channel spectrogram given as
    /// separate real/imaginary [T, F] tensors. The backward pass is the exact
    /// adjoint of the (linear) synthesis operator.
    pub fn istft(&mut self, re: Var, im: Var, cfg: StftConfig, out_len: usize) -> Var {
        let (win, hop, pad) = (cfg.window_len, cfg.hop, cfg.pad());
        let f_bins = cfg.bins();
        let t_frames = self.value(re).shape()[0];
        assert_eq!(self.value(re).shape(), self.value(im).shape());
        assert_eq!(self.value(re).shape()[1], f_bins);
        assert_eq!(cfg.frames_for(out_len), t_frames, "out_len inconsistent with frame count");
        let full_len = ((t_frames - 1) * hop + win).max(pad + out_len);

        let mut planner = FftPlanner::<f64>::new();
        let ifft = planner.plan_fft_inverse(win);

        let rev = self.value(re).clone();
        let imv = self.value(im).clone();
        let ola = overlap_add(
            (0..t_frames).map(|t| {
                let spec: Vec<Complex64> = (0..f_bins)
                    .map(|k| Complex64::new(rev[[t, k]], imv[[t, k]]))
                    .collect();
                frame_irfft(&spec, win, &ifft)
            }),
            t_frames,
            &cfg,
            full_len,
        );
        let mut y = Array1::<f64>::zeros(out_len);
        let mut inv_wss = vec![0.0; out_len];
        for i in 0..out_len {
            if ola.wss[pad + i] > 1e-12 {
                inv_wss[i] = 1.0 / ola.wss[pad + i];
                y[i] = ola.buffer[pad + i] * inv_wss[i];
            }
        }

        self.op(
            y.into_dyn(),
            vec![re, im],
            Box::new(move |_, g, _| {
                // Adjoint: embed grad into the padded frame, window, forward FFT.
                let mut planner = FftPlanner::<f64>::new();
                let fft = planner.plan_fft_forward(win);
                let window: Array1<f64> = cfg.window_values();
                let mut buf = vec![0.0; full_len];
                for i in 0..out_len {
                    buf[pad + i] = g[[i]] * inv_wss[i];
                }
                let mut dre = Arr::zeros(ndarray::IxDyn(&[t_frames, f_bins]));
                let mut dim = Arr::zeros(ndarray::IxDyn(&[t_frames, f_bins]));
                let mut frame = vec![Complex64::default(); win];
                for t in 0..t_frames {
                    let at = t * hop;
                    for n in 0..win {
                        frame[n] = Complex64::new(buf[at + n] * window[n], 0.0);
                    }
                    fft.process(&mut frame);
                    for k in 0..f_bins {
                        let c = if k == 0 || k == win / 2 { 1.0 } else { 2.0 } / win as f64;
                        dre[[t, k]] = c * frame[k].re;
                        if k != 0 && k != win / 2 {
                            dim[[t, k]] = c * frame[k].im;
                        }
                    }
                }
                vec![dre, dim]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, rel_error};
    use ndarray::IxDyn;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_wave(seed: u64, channels: usize, len: usize) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array2::from_shape_fn((channels, len), |_| rng.gen_range(-1.0..1.0));
        Waveform::new(data, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn round_trip_is_exact_for_various_lengths() {
        let cfg = StftConfig::default();
        for (seed, len) in [(1u64, 1000usize), (2, 4096), (3, 16000), (4, 129)] {
            let w = random_wave(seed, 1, len);
            let s = stft(&w, &cfg).unwrap();
            let y = istft(&s, &cfg, len).unwrap();
            let err = (&y.samples - &w.samples)
                .iter()
                .fold(0.0f64, |a, &b| a.max(b.abs()));
            assert!(err <= 1e-6, "len {len}: round-trip error {err}");
        }
    }

    #[test]
    fn round_trip_multichannel() {
        let cfg = StftConfig::default();
        let w = random_wave(9, 4, 3000);
        let s = stft(&w, &cfg).unwrap();
        assert_eq!(s.channels(), 4);
        let y = istft(&s, &cfg, 3000).unwrap();
        let err = (&y.samples - &w.samples)
            .iter()
            .fold(0.0f64, |a, &b| a.max(b.abs()));
        assert!(err <= 1e-6);
    }

    #[test]
    fn matches_naive_windowed_dft() {
        // Independent oracle: direct O(W^2) DFT of each windowed frame.
        let cfg = StftConfig { window_len: 32, hop: 16, window: WindowKind::SqrtHann };
        let w = random_wave(5, 1, 200);
        let s = stft(&w, &cfg).unwrap();
        let window = cfg.window_values();
        let pad = cfg.pad();
        let full_len = (s.frames() - 1) * cfg.hop + cfg.window_len;
        let padded = padded_signal(w.samples.row(0).as_slice().unwrap(), pad, full_len);
        for t in 0..s.frames() {
            for k in 0..cfg.bins() {
                let mut acc = Complex64::default();
                for n in 0..cfg.window_len {
                    let ang = -2.0 * std::f64::consts::PI * (k * n) as f64
                        / cfg.window_len as f64;
                    acc += Complex64::new(ang.cos(), ang.sin())
                        * padded[t * cfg.hop + n]
                        * window[n];
                }
                let got = s.values[[0, t, k]];
                assert!((got - acc).norm() < 1e-9, "frame {t} bin {k}");
            }
        }
    }

    #[test]
    fn bin_centered_cosine_peaks_at_its_bin() {
        let cfg = StftConfig::default();
        let k_target = 8usize;
        let f = k_target as f64 * SAMPLE_RATE as f64 / cfg.window_len as f64;
        let x: Vec<f64> = (0..4000)
            .map(|n| (2.0 * std::f64::consts::PI * f * n as f64 / SAMPLE_RATE as f64).cos())
            .collect();
        let w = Waveform::mono(x, SAMPLE_RATE).unwrap();
        let s = stft(&w, &cfg).unwrap();
        // Interior frame: the target bin dominates every other bin.
        let t = s.frames() / 2;
        let mags: Vec<f64> = (0..s.bins()).map(|k| s.values[[0, t, k]].norm()).collect();
        let best = mags
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(best, k_target);
        for (k, &m) in mags.iter().enumerate() {
            // Square-root Hann has a wide main lobe; check well outside it.
            if k.abs_diff(k_target) > 4 {
                assert!(m < 0.05 * mags[k_target], "leakage at bin {k}");
            }
        }
    }

    #[test]
    fn config_validation_and_shapes() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.bins(), 129);
        assert_eq!(cfg.frames_for(16000), 126);
        assert!(StftConfig { hop: 0, ..cfg }.validate().is_err());
        assert!(StftConfig { hop: 512, ..cfg }.validate().is_err());
    }

    #[test]
    fn rejects_empty_and_mismatched_inputs() {
        assert!(Waveform::mono(vec![], SAMPLE_RATE).is_err());
        assert!(Waveform::mono(vec![f64::NAN], SAMPLE_RATE).is_err());
        let cfg = StftConfig::default();
        let w = random_wave(6, 1, 1000);
        let s = stft(&w, &cfg).unwrap();
        // Wrong output length for the frame count.
        assert!(istft(&s, &cfg, 10_000).is_err());
        // Config mismatch.
        let other = StftConfig { hop: 64, ..cfg };
        assert!(istft(&s, &other, 1000).is_err());
    }

    #[test]
    fn complex_mask_multiplies_elementwise() {
        let cfg = StftConfig::default();
        let w = random_wave(7, 1, 500);
        let s = stft(&w, &cfg).unwrap();
        let mask = Array2::from_elem((s.frames(), s.bins()), Complex64::new(0.0, 1.0));
        let masked = apply_complex_mask(&mask.view(), &s).unwrap();
        for (a, b) in masked.values.iter().zip(s.values.iter()) {
            assert!((a - b * Complex64::new(0.0, 1.0)).norm() < 1e-12);
        }
        let bad = Array2::from_elem((2, 2), Complex64::default());
        assert!(apply_complex_mask(&bad.view(), &s).is_err());
    }

    #[test]
    fn graph_istft_matches_plain_istft() {
        let cfg = StftConfig::default();
        let w = random_wave(8, 1, 900);
        let s = stft(&w, &cfg).unwrap();
        let plain = istft(&s, &cfg, 900).unwrap();
        let (t, f) = (s.frames(), s.bins());
        let mut g = Graph::inference();
        let re = g.leaf(Arr::from_shape_fn(IxDyn(&[t, f]), |ix| s.values[[0, ix[0], ix[1]]].re));
        let im = g.leaf(Arr::from_shape_fn(IxDyn(&[t, f]), |ix| s.values[[0, ix[0], ix[1]]].im));
        let y = g.istft(re, im, cfg, 900);
        for i in 0..900 {
            assert!((g.value(y)[[i]] - plain.samples[[0, i]]).abs() < 1e-10);
        }
    }

    #[test]
    fn graph_istft_gradient_is_exact_adjoint() {
        let cfg = StftConfig { window_len: 16, hop: 8, window: WindowKind::SqrtHann };
        let out_len = 20;
        let t = cfg.frames_for(out_len);
        let f = cfg.bins();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let re0 = Arr::from_shape_fn(IxDyn(&[t, f]), |_| rng.gen_range(-1.0..1.0));
        let im0 = Arr::from_shape_fn(IxDyn(&[t, f]), |_| rng.gen_range(-1.0..1.0));
        let weights = Arr::from_shape_fn(IxDyn(&[out_len]), |_| rng.gen_range(-1.0..1.0));

        let mut g = Graph::new();
        let re = g.leaf(re0.clone());
        let im = g.leaf(im0.clone());
        let y = g.istft(re, im, cfg, out_len);
        let wv = g.constant(weights.clone());
        let prod = g.mul(y, wv);
        let loss = g.sum_all(prod);
        let mut grads = g.backward(loss);
        let (dre, dim) = (grads[re.0].take().unwrap(), grads[im.0].take().unwrap());

        let eval = |r: &Arr, i: &Arr| {
            let mut gg = Graph::inference();
            let rv = gg.leaf(r.clone());
            let iv = gg.leaf(i.clone());
            let yy = gg.istft(rv, iv, cfg, out_len);
            gg.value(yy)
                .iter()
                .zip(weights.iter())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let fd_re = central_diff(|x| eval(x, &im0), &re0, 1e-5);
        let fd_im = central_diff(|x| eval(&re0, x), &im0, 1e-5);
        assert!(rel_error(&dre, &fd_re) < 1e-7);
        assert!(rel_error(&dim, &fd_im) < 1e-7);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn round_trip_property(seed in 0u64..1000, len in 64usize..1500) {
            let cfg = StftConfig { window_len: 64, hop: 32, window: WindowKind::SqrtHann };
            let w = random_wave(seed, 1, len);
            let s = stft(&w, &cfg).unwrap();
            let y = istft(&s, &cfg, len).unwrap();
            let err = (&y.samples - &w.samples).iter().fold(0.0f64, |a, &b| a.max(b.abs()));
            prop_assert!(err <= 1e-8);
        }
    }
}
