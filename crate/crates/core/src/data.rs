//! Synthetic instrument corpus, mel-spectrogram features and the `MEL1` file
//! format.
//!
//! Instruments are grouped into families. Every instrument is its family's
//! prototype plus a fixed random perturbation, so instruments of one family
//! sound alike and the family partition is a real hierarchy.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::binio::{put_string, ByteReader};
use crate::error::{domain_err, Error, Result};
use crate::loss::Batch;
use crate::rng::stream;

pub const MEL_MAGIC: &[u8; 4] = b"MEL1";
pub const MEL_VERSION: u32 = 1;
/// Added to mel energies before the logarithm.
pub const COMPRESSION_OFFSET: f64 = 1e-5;

/// Everything that shapes the mel features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub sample_rate: f64,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mel: usize,
    pub n_frames: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
}

impl FeatureConfig {
    /// 16 kHz, 32 ms window, 16 ms hop, 64 mel bands by 16 frames.
    pub fn desk() -> Self {
        Self {
            sample_rate: 16_000.0,
            window_ms: 32.0,
            hop_ms: 16.0,
            n_mel: 64,
            n_frames: 16,
            fmin_hz: 60.0,
            fmax_hz: 7_600.0,
        }
    }

    /// 22.05 kHz, 92 ms window, 11 ms hop, 256 mel bands by 43 frames,
    /// centers from 27 Hz to 11 kHz.
    pub fn paper() -> Self {
        Self {
            sample_rate: 22_050.0,
            window_ms: 92.0,
            hop_ms: 11.0,
            n_mel: 256,
            n_frames: 43,
            fmin_hz: 27.0,
            fmax_hz: 11_000.0,
        }
    }

    pub fn window_len(&self) -> usize {
        (self.window_ms * self.sample_rate / 1000.0).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.hop_ms * self.sample_rate / 1000.0).round() as usize
    }

    pub fn fft_len(&self) -> usize {
        self.window_len().next_power_of_two()
    }

    /// Samples needed for exactly `n_frames` frames.
    pub fn n_samples(&self) -> usize {
        self.window_len() + (self.n_frames - 1) * self.hop_len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.sample_rate > 0.0) {
            return bad("sample rate must be positive");
        }
        if self.window_len() < 2 || self.hop_len() < 1 {
            return bad("window and hop must span at least two and one samples");
        }
        if self.n_mel < 2 || self.n_frames < 1 {
            return bad("need at least two mel bands and one frame");
        }
        if !(self.fmin_hz >= 0.0 && self.fmin_hz < self.fmax_hz && self.fmax_hz <= self.sample_rate / 2.0)
        {
            return bad("mel band edges must satisfy 0 <= fmin < fmax <= Nyquist");
        }
        if self.n_mel > u16::MAX as usize || self.n_frames > u16::MAX as usize {
            return bad("feature dimensions exceed the file format");
        }
        Ok(())
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters with unit peaks and centers uniform on the mel scale,
/// the first at `fmin` and the last at `fmax`. Each triangle reaches zero at
/// its neighbours' centers, so the responses sum to one on `[fmin, fmax]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    /// `n_mel + 2` points: one extrapolated edge on each side of the centers.
    points_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mel: usize, fmin_hz: f64, fmax_hz: f64) -> Result<Self> {
        if n_mel < 2 || !(fmin_hz >= 0.0 && fmin_hz < fmax_hz) {
            return Err(Error::Config(format!(
                "invalid filterbank: {n_mel} bands over [{fmin_hz}, {fmax_hz}] Hz"
            )));
        }
        let (lo, hi) = (hz_to_mel(fmin_hz), hz_to_mel(fmax_hz));
        let step = (hi - lo) / (n_mel - 1) as f64;
        let points_hz = (0..n_mel + 2)
            .map(|i| mel_to_hz(lo + (i as f64 - 1.0) * step))
            .collect();
        Ok(Self { points_hz })
    }

    pub fn n_mel(&self) -> usize {
        self.points_hz.len() - 2
    }

    pub fn center_hz(&self, band: usize) -> f64 {
        self.points_hz[band + 1]
    }

    /// Response of filter `band` at frequency `f`.
    pub fn response(&self, band: usize, f: f64) -> f64 {
        let (l, c, r) = (
            self.points_hz[band],
            self.points_hz[band + 1],
            self.points_hz[band + 2],
        );
        if f <= l || f >= r {
            0.0
        } else if f <= c {
            (f - l) / (c - l)
        } else {
            (r - f) / (r - c)
        }
    }

    /// The band with the largest response at `f` (lowest index on ties).
    pub fn dominant_band(&self, f: f64) -> usize {
        let mut best = 0;
        for b in 1..self.n_mel() {
            if self.response(b, f) > self.response(best, f) {
                best = b;
            }
        }
        best
    }
}

/// Log-compressed mel spectrogram, row-major `[n_mel, n_frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub n_mel: usize,
    pub n_frames: usize,
    pub data: Vec<f64>,
}

/// Magnitude STFT with a periodic Hann window, pooled through the mel
/// filterbank and compressed as `ln(mel + 1e-5)`.
pub fn stft_mel(wave: &[f64], cfg: &FeatureConfig) -> Result<MelSpectrogram> {
    cfg.validate()?;
    let (win, hop, n_fft) = (cfg.window_len(), cfg.hop_len(), cfg.fft_len());
    if wave.len() < win {
        return domain_err(format!(
            "waveform of {} samples is shorter than one {win}-sample window",
            wave.len()
        ));
    }
    let n_frames = 1 + (wave.len() - win) / hop;
    let bank = MelFilterbank::new(cfg.n_mel, cfg.fmin_hz, cfg.fmax_hz)?;
    let n_bins = n_fft / 2 + 1;
    let weights: Vec<Vec<(usize, f64)>> = (0..cfg.n_mel)
        .map(|b| {
            (0..n_bins)
                .map(|k| (k, bank.response(b, k as f64 * cfg.sample_rate / n_fft as f64)))
                .filter(|&(_, w)| w > 0.0)
                .collect()
        })
        .collect();
    let hann: Vec<f64> = (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / win as f64).cos())
        .collect();
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut mag = vec![0.0; n_bins];
    let mut data = vec![0.0; cfg.n_mel * n_frames];
    for t in 0..n_frames {
        let frame = &wave[t * hop..t * hop + win];
        for (i, c) in buf.iter_mut().enumerate() {
            *c = Complex::new(if i < win { frame[i] * hann[i] } else { 0.0 }, 0.0);
        }
        fft.process(&mut buf);
        for (m, c) in mag.iter_mut().zip(&buf) {
            *m = c.norm();
        }
        for (b, w) in weights.iter().enumerate() {
            let e: f64 = w.iter().map(|&(k, g)| g * mag[k]).sum();
            data[b * n_frames + t] = (e + COMPRESSION_OFFSET).ln();
        }
    }
    Ok(MelSpectrogram {
        n_mel: cfg.n_mel,
        n_frames,
        data,
    })
}

/// Additive-synthesis recipe for one instrument.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstrumentSpec {
    pub instrument: usize,
    pub family: usize,
    /// Gain of partial `k + 1` before tilt and formant shaping.
    pub partials: Vec<f64>,
    pub tilt_db_per_octave: f64,
    pub attack_ms: f64,
    /// Time constant of the exponential decay after the attack.
    pub decay_ms: f64,
    /// `B` in `f_k = k f0 (1 + B k^2)`.
    pub inharmonicity: f64,
    pub vibrato_hz: f64,
    /// Peak relative frequency deviation.
    pub vibrato_depth: f64,
    pub formant_hz: f64,
    pub formant_gain_db: f64,
    /// Formant bandwidth in octaves.
    pub formant_width: f64,
}

impl InstrumentSpec {
    /// Amplitude of partial `k` (1-based) at frequency `f`.
    fn partial_gain(&self, k: usize, f: f64) -> f64 {
        let tilt = 10f64.powf(self.tilt_db_per_octave * (k as f64).log2() / 20.0);
        let oct = (f / self.formant_hz).log2() / self.formant_width;
        let formant = 10f64.powf(self.formant_gain_db * (-0.5 * oct * oct).exp() / 20.0);
        self.partials[k - 1] * tilt * formant
    }
}

struct Prototype {
    n_partials: usize,
    tilt: f64,
    even_db: f64,
    attack_ms: f64,
    decay_ms: f64,
    inharmonicity: f64,
    vibrato_hz: f64,
    vibrato_depth: f64,
    formant_hz: f64,
    formant_gain_db: f64,
}

/// Woodwind, brass, strings and keyboard, in that order. Brightness (spectral
/// tilt) orders them brass > strings > woodwind.
const PROTOTYPES: [Prototype; 4] = [
    Prototype {
        n_partials: 12,
        tilt: -10.0,
        even_db: -4.0,
        attack_ms: 50.0,
        decay_ms: 2000.0,
        inharmonicity: 0.0,
        vibrato_hz: 5.0,
        vibrato_depth: 0.004,
        formant_hz: 1200.0,
        formant_gain_db: 6.0,
    },
    Prototype {
        n_partials: 20,
        tilt: -1.5,
        even_db: 0.0,
        attack_ms: 70.0,
        decay_ms: 1500.0,
        inharmonicity: 0.0,
        vibrato_hz: 4.0,
        vibrato_depth: 0.001,
        formant_hz: 2000.0,
        formant_gain_db: 9.0,
    },
    Prototype {
        n_partials: 20,
        tilt: -5.0,
        even_db: 0.0,
        attack_ms: 100.0,
        decay_ms: 3000.0,
        inharmonicity: 0.0,
        vibrato_hz: 5.5,
        vibrato_depth: 0.007,
        formant_hz: 900.0,
        formant_gain_db: 4.0,
    },
    Prototype {
        n_partials: 16,
        tilt: -7.0,
        even_db: 0.0,
        attack_ms: 4.0,
        decay_ms: 180.0,
        inharmonicity: 3e-4,
        vibrato_hz: 0.0,
        vibrato_depth: 0.0,
        formant_hz: 1500.0,
        formant_gain_db: 0.0,
    },
];

/// The unperturbed prototype of `family` (prototypes repeat every four).
pub fn family_prototype(family: usize, instrument: usize) -> InstrumentSpec {
    let p = &PROTOTYPES[family % PROTOTYPES.len()];
    let even = 10f64.powf(p.even_db / 20.0);
    InstrumentSpec {
        instrument,
        family,
        partials: (1..=p.n_partials)
            .map(|k| if k % 2 == 0 { even } else { 1.0 })
            .collect(),
        tilt_db_per_octave: p.tilt,
        attack_ms: p.attack_ms,
        decay_ms: p.decay_ms,
        inharmonicity: p.inharmonicity,
        vibrato_hz: p.vibrato_hz,
        vibrato_depth: p.vibrato_depth,
        formant_hz: p.formant_hz,
        formant_gain_db: p.formant_gain_db,
        formant_width: 0.5,
    }
}

/// Family prototype plus a fixed per-instrument perturbation drawn from `rng`.
/// Families beyond the four prototypes get an extra family-level shift
/// drawn from `family_rng`.
pub fn perturbed_instrument<R: Rng + ?Sized>(
    family: usize,
    instrument: usize,
    family_rng: &mut R,
    rng: &mut R,
) -> InstrumentSpec {
    let mut s = family_prototype(family, instrument);
    if family >= PROTOTYPES.len() {
        s.tilt_db_per_octave += family_rng.random_range(-3.0..3.0);
        s.formant_hz *= family_rng.random_range(-1.0f64..1.0).exp();
    }
    for g in &mut s.partials {
        *g *= rng.random_range(-0.6f64..0.6).exp();
    }
    s.tilt_db_per_octave += rng.random_range(-1.5..1.5);
    s.attack_ms *= rng.random_range(-0.5f64..0.5).exp();
    s.formant_hz *= rng.random_range(-0.5f64..0.5).exp();
    s.formant_gain_db += rng.random_range(-3.0..3.0);
    s.vibrato_depth *= rng.random_range(0.5..1.5);
    s
}

/// Renders one note. Each call draws random partial phases, small gain
/// jitter and a vibrato phase from `rng`. The tone is peak-normalized to 0.9
/// and then gets a noise floor about 40 dB down. Partials at or above Nyquist
/// are dropped.
pub fn synth_tone<R: Rng + ?Sized>(
    spec: &InstrumentSpec,
    pitch_hz: f64,
    duration_s: f64,
    sample_rate: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(duration_s > 0.0) {
        return domain_err(format!("duration must be positive, got {duration_s}"));
    }
    if !(sample_rate > 0.0) {
        return domain_err("sample rate must be positive");
    }
    let nyquist = sample_rate / 2.0;
    if !(pitch_hz > 0.0 && pitch_hz < nyquist) {
        return domain_err(format!("pitch {pitch_hz} Hz is outside (0, {nyquist})"));
    }
    let n = (duration_s * sample_rate).round().max(1.0) as usize;
    let vib_phase = rng.random_range(0.0..2.0 * PI);
    let mut partials = Vec::new();
    for k in 1..=spec.partials.len() {
        let f = k as f64 * pitch_hz * (1.0 + spec.inharmonicity * (k * k) as f64);
        let phase = rng.random_range(0.0..2.0 * PI);
        let jitter = (0.1 * rng.sample::<f64, _>(StandardNormal)).exp();
        if f * (1.0 + spec.vibrato_depth) < nyquist {
            partials.push((f, spec.partial_gain(k, f) * jitter, phase));
        }
    }
    let attack = (spec.attack_ms / 1000.0).max(1e-4);
    let decay = (spec.decay_ms / 1000.0).max(1e-4);
    let mut out = vec![0.0; n];
    for (i, x) in out.iter_mut().enumerate() {
        let t = i as f64 / sample_rate;
        let env = (t / attack).min(1.0) * (-(t - attack).max(0.0) / decay).exp();
        // Integrated phase of f (1 + depth sin(2 pi r t + phi)).
        let vib = if spec.vibrato_hz > 0.0 {
            spec.vibrato_depth * ((vib_phase).cos() - (2.0 * PI * spec.vibrato_hz * t + vib_phase).cos())
                / (2.0 * PI * spec.vibrato_hz)
        } else {
            0.0
        };
        let s: f64 = partials
            .iter()
            .map(|&(f, g, ph)| g * (2.0 * PI * f * (t + vib) + ph).sin())
            .sum();
        *x = env * s;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.9 / peak);
    }
    for v in &mut out {
        *v += 1e-2 * rng.sample::<f64, _>(StandardNormal);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn tag(self) -> u8 {
        match self {
            Self::Train => 0,
            Self::Val => 1,
            Self::Test => 2,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Self::Train),
            1 => Some(Self::Val),
            2 => Some(Self::Test),
            _ => None,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            _ => Err(Error::Config(format!("unknown split '{s}'"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        })
    }
}

/// One standardized log-mel spectrogram, row-major `[n_mel, n_frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelExample {
    pub mel: Vec<f32>,
    pub pitch: usize,
    pub timbre: usize,
    pub split: Split,
}

/// Partition of instruments into families.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilyPartition {
    pub family_names: Vec<String>,
    /// Family index of each instrument.
    pub family_of: Vec<usize>,
}

impl FamilyPartition {
    pub fn from_sizes(family_names: Vec<String>, sizes: &[usize]) -> Result<Self> {
        if family_names.len() != sizes.len() {
            return Err(Error::Config("one size per family is required".into()));
        }
        let family_of = sizes
            .iter()
            .enumerate()
            .flat_map(|(f, &n)| std::iter::repeat_n(f, n))
            .collect();
        Ok(Self {
            family_names,
            family_of,
        })
    }

    /// Families from `family/instrument` names, in order of first appearance.
    /// A name without a `/` is its own family.
    pub fn from_instrument_names<S: AsRef<str>>(names: &[S]) -> Self {
        let mut family_names: Vec<String> = Vec::new();
        let family_of = names
            .iter()
            .map(|n| {
                let n = n.as_ref();
                let fam = n.split_once('/').map_or(n, |(f, _)| f);
                match family_names.iter().position(|f| f == fam) {
                    Some(i) => i,
                    None => {
                        family_names.push(fam.to_string());
                        family_names.len() - 1
                    }
                }
            })
            .collect();
        Self {
            family_names,
            family_of,
        }
    }

    pub fn n_instruments(&self) -> usize {
        self.family_of.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.family_names.len()];
        for &f in &self.family_of {
            s[f] += 1;
        }
        s
    }

    /// Unordered instrument pairs `(i, j)`, `i < j`, within one family.
    pub fn same_family_pairs(&self) -> Vec<(usize, usize)> {
        self.pairs(true)
    }

    /// Unordered instrument pairs `(i, j)`, `i < j`, across families.
    pub fn cross_family_pairs(&self) -> Vec<(usize, usize)> {
        self.pairs(false)
    }

    fn pairs(&self, same: bool) -> Vec<(usize, usize)> {
        let n = self.family_of.len();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if (self.family_of[i] == self.family_of[j]) == same {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// Instrument set, pitch set and rendering options of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub family_names: Vec<String>,
    pub family_sizes: Vec<usize>,
    pub instrument_names: Vec<String>,
    /// MIDI note numbers.
    pub pitches: Vec<u8>,
    /// Independently rendered examples per (instrument, pitch).
    pub variations: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub features: FeatureConfig,
}

impl Default for CorpusConfig {
    /// Twelve instruments in families of six, three, two and one; twenty
    /// pitches spread evenly over four octaves from A2; five renderings of
    /// every note; desk features.
    fn default() -> Self {
        let fams = [
            (
                "woodwind",
                &["english_horn", "saxophone", "bassoon", "clarinet", "flute", "oboe"][..],
            ),
            ("brass", &["french_horn", "tenor_trombone", "trumpet"][..]),
            ("strings", &["violin", "violoncello"][..]),
            ("keyboard", &["piano"][..]),
        ];
        Self {
            family_names: fams.iter().map(|(f, _)| f.to_string()).collect(),
            family_sizes: fams.iter().map(|(_, i)| i.len()).collect(),
            instrument_names: fams
                .iter()
                .flat_map(|(f, is)| is.iter().map(move |i| format!("{f}/{i}")))
                .collect(),
            pitches: (0..20).map(|i| 45 + ((i * 48) as f64 / 19.0).round() as u8).collect(),
            variations: 5,
            val_fraction: 0.095,
            test_fraction: 0.095,
            features: FeatureConfig::desk(),
        }
    }
}

pub fn midi_to_hz(m: u8) -> f64 {
    440.0 * 2f64.powf((m as f64 - 69.0) / 12.0)
}

pub fn midi_name(m: u8) -> String {
    const NAMES: [&str; 12] = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"];
    format!("{}{}", NAMES[m as usize % 12], m as i32 / 12 - 1)
}

const SPLIT_STREAM: u64 = 1 << 40;
const INSTRUMENT_STREAM: u64 = 1 << 41;
const FAMILY_STREAM: u64 = 1 << 42;

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        if self.family_sizes.len() != self.family_names.len() {
            return Err(Error::Config("one size per family is required".into()));
        }
        let total: usize = self.family_sizes.iter().sum();
        if total != self.instrument_names.len() || self.family_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "family sizes {:?} do not partition {} instruments",
                self.family_sizes,
                self.instrument_names.len()
            )));
        }
        if self.pitches.is_empty() || self.variations == 0 {
            return Err(Error::Config("need at least one pitch and one variation".into()));
        }
        let per = self.pitches.len() * self.variations;
        let (v, t) = self.split_counts();
        if !(self.val_fraction > 0.0 && self.test_fraction > 0.0) || v + t >= per {
            return Err(Error::Config(format!(
                "{per} examples per instrument cannot fill train, val and test"
            )));
        }
        let nyquist = self.features.sample_rate / 2.0;
        if let Some(p) = self.pitches.iter().find(|&&p| midi_to_hz(p) >= nyquist) {
            return Err(Error::Config(format!("pitch {p} is above Nyquist")));
        }
        Ok(())
    }

    /// Validation and test examples per instrument.
    pub fn split_counts(&self) -> (usize, usize) {
        let per = (self.pitches.len() * self.variations) as f64;
        let c = |f: f64| ((f * per).round() as usize).max(1);
        (c(self.val_fraction), c(self.test_fraction))
    }

    pub fn partition(&self) -> Result<FamilyPartition> {
        FamilyPartition::from_sizes(self.family_names.clone(), &self.family_sizes)
    }

    /// Instrument recipes, a pure function of the seed.
    pub fn instruments(&self, seed: u64) -> Result<Vec<InstrumentSpec>> {
        let part = self.partition()?;
        Ok(part
            .family_of
            .iter()
            .enumerate()
            .map(|(i, &f)| {
                perturbed_instrument(
                    f,
                    i,
                    &mut stream(seed, FAMILY_STREAM + f as u64),
                    &mut stream(seed, INSTRUMENT_STREAM + i as u64),
                )
            })
            .collect())
    }
}

/// A labelled mel corpus with its splits and compression statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_mel: usize,
    pub n_frames: usize,
    pub pitch_names: Vec<String>,
    /// `family/instrument` names.
    pub timbre_names: Vec<String>,
    /// Mean and standard deviation of the training-split log-mel values.
    pub mean: f64,
    pub std: f64,
    pub examples: Vec<MelExample>,
}

/// Renders and featurizes the corpus. Example `i` uses random stream `i`, so
/// the output is a pure function of `(config, seed)`.
pub fn build_corpus(cfg: &CorpusConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let instruments = cfg.instruments(seed)?;
    let feats = &cfg.features;
    let duration = feats.n_samples() as f64 / feats.sample_rate;
    let per = cfg.pitches.len() * cfg.variations;
    let (n_val, n_test) = cfg.split_counts();
    let mut raw = Vec::with_capacity(instruments.len() * per);
    for (t, spec) in instruments.iter().enumerate() {
        let mut order: Vec<usize> = (0..per).collect();
        let mut srng = stream(seed, SPLIT_STREAM + t as u64);
        for i in (1..per).rev() {
            order.swap(i, srng.random_range(0..=i));
        }
        let mut splits = vec![Split::Train; per];
        for &j in &order[..n_val] {
            splits[j] = Split::Val;
        }
        for &j in &order[n_val..n_val + n_test] {
            splits[j] = Split::Test;
        }
        for (p, &midi) in cfg.pitches.iter().enumerate() {
            for v in 0..cfg.variations {
                let local = p * cfg.variations + v;
                let idx = (t * per + local) as u64;
                let wave = synth_tone(spec, midi_to_hz(midi), duration, feats.sample_rate, &mut stream(seed, idx))?;
                let mel = stft_mel(&wave, feats)?;
                debug_assert_eq!(mel.n_frames, feats.n_frames);
                raw.push((mel.data, p, t, splits[local]));
            }
        }
    }
    let train: Vec<f64> = raw
        .iter()
        .filter(|r| r.3 == Split::Train)
        .flat_map(|r| r.0.iter().copied())
        .collect();
    let mean = train.iter().sum::<f64>() / train.len() as f64;
    let var = train.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / train.len() as f64;
    let std = var.sqrt().max(1e-12);
    let examples = raw
        .into_iter()
        .map(|(data, pitch, timbre, split)| MelExample {
            mel: data.iter().map(|v| ((v - mean) / std) as f32).collect(),
            pitch,
            timbre,
            split,
        })
        .collect();
    Ok(Dataset {
        n_mel: feats.n_mel,
        n_frames: feats.n_frames,
        pitch_names: cfg.pitches.iter().map(|&m| midi_name(m)).collect(),
        timbre_names: cfg.instrument_names.clone(),
        mean,
        std,
        examples,
    })
}

impl Dataset {
    pub fn n_pitch(&self) -> usize {
        self.pitch_names.len()
    }

    pub fn n_timbre(&self) -> usize {
        self.timbre_names.len()
    }

    pub fn input_len(&self) -> usize {
        self.n_mel * self.n_frames
    }

    /// Standardized value of silence, the smallest value any example can hold.
    pub fn floor(&self) -> f64 {
        (COMPRESSION_OFFSET.ln() - self.mean) / self.std
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.examples.len())
            .filter(|&i| self.examples[i].split == split)
            .collect()
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        let mut x = Vec::with_capacity(idx.len() * self.input_len());
        for &i in idx {
            x.extend(self.examples[i].mel.iter().map(|&v| v as f64));
        }
        Batch {
            x,
            pitch: idx.iter().map(|&i| self.examples[i].pitch).collect(),
            timbre: idx.iter().map(|&i| self.examples[i].timbre).collect(),
        }
    }

    pub fn families(&self) -> FamilyPartition {
        FamilyPartition::from_instrument_names(&self.timbre_names)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.input_len();
        for (i, e) in self.examples.iter().enumerate() {
            if e.mel.len() != n {
                return Err(Error::Dimension(format!("example {i} has {} values, expected {n}", e.mel.len())));
            }
            if e.pitch >= self.n_pitch() || e.timbre >= self.n_timbre() {
                return domain_err(format!("example {i} has a label out of range"));
            }
            if e.mel.iter().any(|v| !v.is_finite()) {
                return domain_err(format!("example {i} has a non-finite value"));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let too_big = |what: &str| Error::Config(format!("{what} exceeds the MEL1 format"));
        let u16_of = |v: usize, what: &str| u16::try_from(v).map_err(|_| too_big(what));
        let mut out = Vec::with_capacity(64 + self.examples.len() * (5 + 4 * self.input_len()));
        out.extend_from_slice(MEL_MAGIC);
        out.extend_from_slice(&MEL_VERSION.to_le_bytes());
        let count = u32::try_from(self.examples.len()).map_err(|_| too_big("example count"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (v, what) in [
            (self.n_mel, "n_mel"),
            (self.n_frames, "n_frames"),
            (self.n_pitch(), "pitch count"),
            (self.n_timbre(), "timbre count"),
        ] {
            out.extend_from_slice(&u16_of(v, what)?.to_le_bytes());
        }
        out.extend_from_slice(&self.mean.to_le_bytes());
        out.extend_from_slice(&self.std.to_le_bytes());
        for name in self.pitch_names.iter().chain(&self.timbre_names) {
            put_string(&mut out, name)?;
        }
        for e in &self.examples {
            out.extend_from_slice(&(e.pitch as u16).to_le_bytes());
            out.extend_from_slice(&(e.timbre as u16).to_le_bytes());
            out.push(e.split.tag());
            for v in &e.mel {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(MEL_MAGIC)?;
        let at = r.offset();
        let version = r.u32("version")?;
        if version != MEL_VERSION {
            return Err(Error::Format {
                offset: at,
                msg: format!("unsupported MEL1 version {version}"),
            });
        }
        let count = r.u32("example count")? as usize;
        let n_mel = r.u16("n_mel")? as usize;
        let n_frames = r.u16("n_frames")? as usize;
        let n_pitch = r.u16("pitch count")? as usize;
        let n_timbre = r.u16("timbre count")? as usize;
        let mean = r.f64("compression mean")?;
        let std = r.f64("compression std")?;
        let pitch_names = (0..n_pitch)
            .map(|_| r.string("pitch name"))
            .collect::<Result<Vec<_>>>()?;
        let timbre_names = (0..n_timbre)
            .map(|_| r.string("timbre name"))
            .collect::<Result<Vec<_>>>()?;
        let n = n_mel * n_frames;
        let mut examples = Vec::with_capacity(count.min(bytes.len() / (5 + 4 * n.max(1))));
        for _ in 0..count {
            let at = r.offset();
            let pitch = r.u16("pitch label")? as usize;
            let timbre = r.u16("timbre label")? as usize;
            if pitch >= n_pitch || timbre >= n_timbre {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("label ({pitch}, {timbre}) out of range"),
                });
            }
            let tag_at = r.offset();
            let split = Split::from_tag(r.u8("split tag")?).ok_or(Error::Format {
                offset: tag_at,
                msg: "unknown split tag".into(),
            })?;
            let raw = r.take(4 * n, "mel values")?;
            let mel = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                .collect();
            examples.push(MelExample {
                mel,
                pitch,
                timbre,
                split,
            });
        }
        if !r.is_at_end() {
            return Err(r.error("trailing bytes after the last example"));
        }
        Ok(Self {
            n_mel,
            n_frames,
            pitch_names,
            timbre_names,
            mean,
            std,
            examples,
        })
    }
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, ds.to_bytes()?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_bytes(&std::fs::read(path)?)
}
