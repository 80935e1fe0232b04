//! Seeded synthetic federations with per-client feature shift.
//!
//! Classification clients draw Gaussian class clusters whose centres are
//! rotated and offset per client. Segmentation clients draw g×g images of an
//! elliptical foreground blob; intensity is `contrast * mask + offset + noise`
//! with client-specific offset (brightness), contrast, blob orientation and
//! noise. One client may be marked as an outlier with an amplified offset,
//! and one may be replaced by a free rider that repeats a single sample.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Label, ModelSpec, Sample};

pub const DEFAULT_SPLIT: [f64; 3] = [0.5, 0.25, 0.25];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Segmentation,
}

/// Distribution parameters of one client relative to the shared base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientShift {
    /// Added to every feature (brightness for images).
    pub mean_offset: f64,
    /// Rotation of the class-centre plane, or blob orientation, in radians.
    #[serde(default)]
    pub rotation: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    /// Foreground intensity scale (segmentation only).
    #[serde(default = "one")]
    pub contrast: f64,
}

fn one() -> f64 {
    1.0
}

impl ClientShift {
    /// Distance of the shift parameters from the shared base (no offset,
    /// no rotation, unit contrast).
    pub fn distance(&self) -> f64 {
        self.mean_offset.abs() + self.rotation.abs() + (self.contrast - 1.0).abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutlierSpec {
    pub client: usize,
    /// How far beyond the largest non-outlier shift distance the outlier is pushed.
    pub magnitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreeRiderSpec {
    pub client: usize,
    pub repeat: usize,
}

fn default_input_dim() -> usize {
    2
}

fn default_classes() -> usize {
    2
}

fn default_grid() -> usize {
    8
}

fn default_separation() -> f64 {
    2.0
}

fn default_split() -> [f64; 3] {
    DEFAULT_SPLIT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSpec {
    pub n_clients: usize,
    pub samples_per_client: Vec<usize>,
    pub task: Task,
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_grid")]
    pub grid: usize,
    /// Distance between class centres (classification).
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// One entry per client; empty means the built-in mild heterogeneity.
    #[serde(default)]
    pub client_shift: Vec<ClientShift>,
    #[serde(default)]
    pub outlier: Option<OutlierSpec>,
    #[serde(default)]
    pub free_rider: Option<FreeRiderSpec>,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    /// Draw every client from the same random stream instead of a per-client one.
    #[serde(default)]
    pub shared_stream: bool,
    #[serde(default)]
    pub seed: u64,
}

impl FederationSpec {
    pub fn new(task: Task, samples_per_client: Vec<usize>, seed: u64) -> Self {
        Self {
            n_clients: samples_per_client.len(),
            samples_per_client,
            task,
            input_dim: default_input_dim(),
            classes: default_classes(),
            grid: default_grid(),
            separation: default_separation(),
            client_shift: Vec::new(),
            outlier: None,
            free_rider: None,
            split: DEFAULT_SPLIT,
            shared_stream: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clients < 2 {
            return Err(Error::invalid(format!("a federation needs at least 2 clients, got {}", self.n_clients)));
        }
        if self.samples_per_client.len() != self.n_clients {
            return Err(Error::invalid(format!(
                "samples_per_client has {} entries for {} clients",
                self.samples_per_client.len(),
                self.n_clients
            )));
        }
        if let Some(i) = self.samples_per_client.iter().position(|&n| n < 4) {
            let is_rider = self.free_rider.is_some_and(|f| f.client == i);
            if !is_rider {
                return Err(Error::invalid(format!("client {i} has fewer than 4 samples; the split is infeasible")));
            }
        }
        if !self.client_shift.is_empty() && self.client_shift.len() != self.n_clients {
            return Err(Error::invalid("client_shift must be empty or have one entry per client"));
        }
        if self.client_shift.iter().any(|s| s.noise < 0.0) {
            return Err(Error::invalid("noise scale must be nonnegative"));
        }
        if let Some(o) = self.outlier {
            if o.client >= self.n_clients {
                return Err(Error::invalid(format!("outlier client {} out of range", o.client)));
            }
            if !(o.magnitude > 0.0) {
                return Err(Error::invalid("outlier magnitude must be positive"));
            }
        }
        if let Some(f) = self.free_rider {
            if f.client >= self.n_clients {
                return Err(Error::invalid(format!("free-rider client {} out of range", f.client)));
            }
            if f.repeat < 1 {
                return Err(Error::invalid("free-rider repeat count must be at least 1"));
            }
        }
        check_ratios(self.split)?;
        match self.task {
            Task::Classification if self.input_dim == 0 || self.classes < 2 => {
                Err(Error::invalid("classification needs input_dim >= 1 and classes >= 2"))
            }
            Task::Segmentation if self.grid < 3 => Err(Error::invalid("segmentation grid must be at least 3")),
            _ => Ok(()),
        }
    }

    /// A model family matching the task's input layout.
    pub fn default_model(&self) -> ModelSpec {
        match self.task {
            Task::Classification => ModelSpec::Logistic { input_dim: self.input_dim, classes: self.classes },
            Task::Segmentation => ModelSpec::PixelSeg { grid: self.grid },
        }
    }

    /// Per-client shift parameters after applying defaults and the outlier amplification.
    pub fn effective_shifts(&self) -> Vec<ClientShift> {
        let mut shifts: Vec<ClientShift> = if self.client_shift.is_empty() {
            (0..self.n_clients).map(|i| builtin_shift(i, self.n_clients, self.task)).collect()
        } else {
            self.client_shift.clone()
        };
        if let Some(o) = self.outlier {
            let base = shifts.iter().enumerate().filter(|&(i, _)| i != o.client).map(|(_, s)| s.distance()).fold(0.0, f64::max);
            shifts[o.client].mean_offset = base + o.magnitude;
        }
        shifts
    }

    pub fn client_seed(&self, client_id: usize) -> u64 {
        if self.shared_stream {
            self.seed
        } else {
            self.seed ^ splitmix64(client_id as u64)
        }
    }
}

/// Mild default heterogeneity: offsets and rotations spread evenly around zero.
fn builtin_shift(i: usize, n: usize, task: Task) -> ClientShift {
    let t = if n > 1 { i as f64 / (n - 1) as f64 - 0.5 } else { 0.0 };
    match task {
        Task::Classification => ClientShift { mean_offset: 0.4 * t, rotation: 0.3 * t, noise: 0.8, contrast: 1.0 },
        Task::Segmentation => ClientShift { mean_offset: 0.2 * t, rotation: 0.6 * t, noise: 0.35, contrast: 1.0 },
    }
}

/// SplitMix64 finalizer, used to derive independent per-client streams.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Share of the federation's training samples held by this client.
    pub p: f64,
}

impl ClientDataset {
    pub fn all_samples(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    /// First feature coordinate of every sample; the 1-D projection used for
    /// distribution distances.
    pub fn projection(&self) -> Vec<f64> {
        self.all_samples().map(|s| s.features[0]).collect()
    }
}

/// Recomputes `p` from training-set sizes.
pub fn assign_sample_weights(clients: &mut [ClientDataset]) {
    let total: usize = clients.iter().map(|c| c.train.len()).sum();
    for c in clients.iter_mut() {
        c.p = if total == 0 { 0.0 } else { c.train.len() as f64 / total as f64 };
    }
}

fn check_ratios(r: [f64; 3]) -> Result<()> {
    if r.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::invalid("split ratios must be nonnegative"));
    }
    let sum: f64 = r.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios sum to {sum}, expected 1")));
    }
    Ok(())
}

/// Shuffled train/val/test split. Val and test receive floor(r·n) samples,
/// train receives the remainder.
pub fn split_client(samples: Vec<Sample>, ratios: [f64; 3], seed: u64) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    check_ratios(ratios)?;
    if samples.is_empty() {
        return Err(Error::Empty("samples to split"));
    }
    let n = samples.len();
    let floor = |r: f64| ((r * n as f64) + 1e-9).floor() as usize;
    let n_val = floor(ratios[1]);
    let n_test = floor(ratios[2]);
    let mut samples = samples;
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = samples.split_off(n - n_test);
    let val = samples.split_off(n - n_test - n_val);
    Ok((samples, val, test))
}

/// A client holding `repeat` copies of one sample for training and the same
/// single sample for validation and testing.
pub fn make_free_rider(client_id: usize, base_sample: Sample, repeat: usize) -> Result<ClientDataset> {
    if repeat < 1 {
        return Err(Error::invalid("free-rider repeat count must be at least 1"));
    }
    Ok(ClientDataset {
        client_id,
        train: vec![base_sample.clone(); repeat],
        val: vec![base_sample.clone()],
        test: vec![base_sample],
        p: 0.0,
    })
}

pub fn generate_federation(spec: &FederationSpec) -> Result<Vec<ClientDataset>> {
    spec.validate()?;
    let shifts = spec.effective_shifts();
    let mut clients = Vec::with_capacity(spec.n_clients);
    for (i, shift) in shifts.iter().enumerate() {
        let seed = spec.client_seed(i);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let client = match spec.free_rider {
            Some(f) if f.client == i => {
                let base = draw_sample(spec, shift, &mut rng);
                make_free_rider(i, base, f.repeat)?
            }
            _ => {
                let samples: Vec<Sample> = (0..spec.samples_per_client[i]).map(|_| draw_sample(spec, shift, &mut rng)).collect();
                let (train, val, test) = split_client(samples, spec.split, splitmix64(seed ^ 0x5EED))?;
                ClientDataset { client_id: i, train, val, test, p: 0.0 }
            }
        };
        clients.push(client);
    }
    assign_sample_weights(&mut clients);
    Ok(clients)
}

fn draw_sample(spec: &FederationSpec, shift: &ClientShift, rng: &mut ChaCha8Rng) -> Sample {
    match spec.task {
        Task::Classification => draw_class_sample(spec, shift, rng),
        Task::Segmentation => draw_mask_sample(spec.grid, shift, rng),
    }
}

fn draw_class_sample(spec: &FederationSpec, shift: &ClientShift, rng: &mut ChaCha8Rng) -> Sample {
    let y = rng.gen_range(0..spec.classes);
    let angle = std::f64::consts::TAU * y as f64 / spec.classes as f64 + shift.rotation;
    let radius = spec.separation / 2.0;
    let mut features: Vec<f64> =
        (0..spec.input_dim).map(|_| shift.mean_offset + shift.noise * rng.sample::<f64, _>(StandardNormal)).collect();
    features[0] += radius * angle.cos();
    if spec.input_dim > 1 {
        features[1] += radius * angle.sin();
    }
    Sample { features, label: Label::Class(y) }
}

fn draw_mask_sample(grid: usize, shift: &ClientShift, rng: &mut ChaCha8Rng) -> Sample {
    let g = grid as f64;
    let cy = rng.gen_range(0.3 * g..0.7 * g);
    let cx = rng.gen_range(0.3 * g..0.7 * g);
    let major = rng.gen_range(0.18 * g..0.35 * g);
    let minor = major * rng.gen_range(0.5..1.0);
    let (s, c) = shift.rotation.sin_cos();
    let mut mask = Vec::with_capacity(grid * grid);
    let mut features = Vec::with_capacity(grid * grid);
    for r in 0..grid {
        for col in 0..grid {
            let dy = r as f64 + 0.5 - cy;
            let dx = col as f64 + 0.5 - cx;
            let u = c * dx + s * dy;
            let v = -s * dx + c * dy;
            let inside = (u / major).powi(2) + (v / minor).powi(2) <= 1.0;
            mask.push(inside);
            let noise: f64 = rng.sample(StandardNormal);
            features.push(shift.contrast * inside as u8 as f64 + shift.mean_offset + shift.noise * noise);
        }
    }
    Sample { features, label: Label::Mask(mask) }
}

const FORMAT_NAME: &str = "fedce-federation";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    n_clients: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Serialize, Deserialize)]
struct Record {
    client: usize,
    split: SplitName,
    #[serde(flatten)]
    sample: Sample,
}

/// Writes a federation as line-delimited JSON: a header line followed by one
/// record per sample.
pub fn export_federation(clients: &[ClientDataset], mut w: impl Write) -> Result<()> {
    let header = Header { format: FORMAT_NAME.into(), version: FORMAT_VERSION, n_clients: clients.len() };
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    for c in clients {
        for (split, set) in [(SplitName::Train, &c.train), (SplitName::Val, &c.val), (SplitName::Test, &c.test)] {
            for s in set {
                #[derive(Serialize)]
                struct RecordRef<'a> {
                    client: usize,
                    split: &'a SplitName,
                    #[serde(flatten)]
                    sample: &'a Sample,
                }
                serde_json::to_writer(&mut w, &RecordRef { client: c.client_id, split: &split, sample: s })?;
                writeln!(w)?;
            }
        }
    }
    Ok(())
}

pub fn import_federation(r: impl BufRead) -> Result<Vec<ClientDataset>> {
    let mut lines = r.lines();
    let header: Header = match lines.next() {
        Some(line) => serde_json::from_str(&line?)?,
        None => return Err(Error::Format("empty federation file".into())),
    };
    if header.format != FORMAT_NAME || header.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported federation file {} v{}", header.format, header.version)));
    }
    let mut clients: Vec<ClientDataset> =
        (0..header.n_clients).map(|client_id| ClientDataset { client_id, train: vec![], val: vec![], test: vec![], p: 0.0 }).collect();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)?;
        let c = clients.get_mut(rec.client).ok_or_else(|| Error::Format(format!("record for unknown client {}", rec.client)))?;
        match rec.split {
            SplitName::Train => c.train.push(rec.sample),
            SplitName::Val => c.val.push(rec.sample),
            SplitName::Test => c.test.push(rec.sample),
        }
    }
    assign_sample_weights(&mut clients);
    Ok(clients)
}
