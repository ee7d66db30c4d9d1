//! Synthetic multi-domain, partially labelled dataset.
//!
//! Each class is a localized bump with its own channel signature. A domain
//! applies a per-channel affine transform and Gaussian noise to the composed
//! image and reveals labels only for its own class subset.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::losses::PartialLabelVector;

const MAGIC: &[u8; 8] = b"PSDATA01";
const VERSION: u32 = 1;
const SIGNATURE_RETRIES: usize = 10_000;

/// SplitMix64 finalizer; derives independent stream seeds from one seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub id: u32,
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
    pub noise: f64,
    /// Classes whose labels this domain reveals.
    pub labeled: Vec<usize>,
    pub samples: usize,
    /// Fully labelled held-out samples drawn from the same domain.
    pub test_samples: usize,
    pub prevalence: Vec<f64>,
}

impl DomainSpec {
    pub fn validate(&self, classes: usize, channels: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("domain {}: {m}", self.id)));
        if self.scale.len() != channels || self.offset.len() != channels {
            return bad(format!("affine vectors must have {channels} entries"));
        }
        if self.scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return bad("scales must be positive".into());
        }
        if self.offset.iter().any(|o| !o.is_finite()) {
            return bad("offsets must be finite".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be nonnegative".into());
        }
        if self.labeled.is_empty() {
            return bad("labelled class subset is empty".into());
        }
        if self.labeled.iter().any(|&t| t >= classes) {
            return bad(format!("labelled class out of range 0..{classes}"));
        }
        if self.prevalence.len() != classes || self.prevalence.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return bad(format!("need {classes} prevalences in (0, 1)"));
        }
        Ok(())
    }

    fn is_labeled(&self, t: usize) -> bool {
        self.labeled.contains(&t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub input: [usize; 3],
    pub train_domains: Vec<DomainSpec>,
    pub unseen_domains: Vec<DomainSpec>,
    /// Peak value of a class bump.
    pub amplitude: f64,
    /// Amplitude of the shared background field.
    pub background: f64,
    pub prototype_seed: u64,
    pub seed: u64,
}

fn domain(id: u32, scale: [f64; 3], offset: [f64; 3], labeled: &[usize], samples: usize, test: usize) -> DomainSpec {
    DomainSpec {
        id,
        scale: scale.to_vec(),
        offset: offset.to_vec(),
        noise: 0.15,
        labeled: labeled.to_vec(),
        samples,
        test_samples: test,
        prevalence: vec![0.3; 5],
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            input: [3, 12, 12],
            train_domains: vec![
                domain(0, [1.0, 1.0, 1.0], [0.0, 0.0, 0.0], &[0, 1], 400, 100),
                domain(1, [1.3, 0.8, 1.0], [0.3, -0.2, 0.1], &[1, 2], 400, 100),
                domain(2, [0.8, 1.2, 1.3], [-0.2, 0.3, -0.3], &[2, 3], 400, 100),
                domain(3, [1.1, 0.9, 0.7], [0.1, 0.2, 0.4], &[3, 4, 0], 400, 100),
            ],
            unseen_domains: vec![
                domain(4, [1.5, 0.7, 1.2], [0.5, -0.4, -0.2], &[0, 1, 2, 3, 4], 200, 0),
                domain(5, [0.6, 1.4, 0.9], [-0.5, 0.4, 0.5], &[0, 1, 2, 3, 4], 200, 0),
            ],
            amplitude: 1.0,
            background: 0.3,
            prototype_seed: 7,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.input.contains(&0) {
            return Err(Error::Config("classes and input dims must be positive".into()));
        }
        if self.train_domains.is_empty() {
            return Err(Error::Config("at least one training domain required".into()));
        }
        let mut ids: Vec<u32> = self.domains().map(|d| d.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("domain ids must be distinct".into()));
        }
        for d in self.domains() {
            d.validate(self.classes, self.input[0])?;
        }
        let mut covered = vec![false; self.classes];
        for d in &self.train_domains {
            d.labeled.iter().for_each(|&t| covered[t] = true);
        }
        if let Some(t) = covered.iter().position(|c| !c) {
            return Err(Error::Config(format!("class {t} is labelled in no training domain")));
        }
        Ok(())
    }

    pub fn domains(&self) -> impl Iterator<Item = &DomainSpec> {
        self.train_domains.iter().chain(&self.unseen_domains)
    }
}

/// Rectangular region `[row, row + height) x [col, col + width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        (self.row..self.row + self.height).contains(&i) && (self.col..self.col + self.width).contains(&j)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    pub shape: [usize; 3],
    /// One `C x H x W` pattern per class, row-major.
    pub patterns: Vec<Vec<f64>>,
    pub regions: Vec<Region>,
    pub background: Vec<f64>,
}

/// Class patterns on distinct grid cells with well-separated channel signatures.
pub fn generate_prototypes(
    classes: usize,
    input: [usize; 3],
    amplitude: f64,
    background: f64,
    seed: u64,
) -> Result<Prototypes> {
    let [c, h, w] = input;
    if classes == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::Config("prototype dimensions must be positive".into()));
    }
    let grid = (1..).find(|g| g * g >= classes).expect("finite");
    let (ch, cw) = (h / grid, w / grid);
    if ch < 2 || cw < 2 {
        return Err(Error::Config(format!(
            "{classes} classes need a {grid}x{grid} grid of regions at least 2x2, \
             but the input is only {h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells: Vec<usize> = (0..grid * grid).collect();
    cells.shuffle(&mut rng);
    let regions: Vec<Region> = cells[..classes]
        .iter()
        .map(|&cell| Region {
            row: (cell / grid) * ch,
            col: (cell % grid) * cw,
            height: ch,
            width: cw,
        })
        .collect();

    let signatures = channel_signatures(classes, c, &mut rng)?;
    let spread = ch.min(cw) as f64 / 3.0;
    let patterns = regions
        .iter()
        .zip(&signatures)
        .map(|(r, sig)| {
            let ci = r.row as f64 + (r.height as f64 - 1.0) / 2.0;
            let cj = r.col as f64 + (r.width as f64 - 1.0) / 2.0;
            let mut p = vec![0.0; c * h * w];
            for k in 0..c {
                for i in r.row..r.row + r.height {
                    for j in r.col..r.col + r.width {
                        let d2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
                        p[(k * h + i) * w + j] = amplitude * sig[k] * (-d2 / (2.0 * spread * spread)).exp();
                    }
                }
            }
            p
        })
        .collect();

    let mut bg = vec![0.0; c * h * w];
    for k in 0..c {
        let fi = rng.random_range(1..=2) as f64;
        let fj = rng.random_range(1..=2) as f64;
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        for i in 0..h {
            for j in 0..w {
                let arg = std::f64::consts::TAU * (fi * i as f64 / h as f64 + fj * j as f64 / w as f64) + phase;
                bg[(k * h + i) * w + j] = background * arg.sin();
            }
        }
    }
    Ok(Prototypes {
        shape: input,
        patterns,
        regions,
        background: bg,
    })
}

/// Unit vectors scaled to norm `sqrt(C)` whose pairwise cosine stays below 0.3
/// (only for `C > 1`; a single channel admits just one direction).
fn channel_signatures(classes: usize, c: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let norm = (c as f64).sqrt();
    'retry: for _ in 0..SIGNATURE_RETRIES {
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(classes);
        for _ in 0..classes {
            let v: Vec<f64> = (0..c).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < 1e-6 {
                continue 'retry;
            }
            let v: Vec<f64> = v.iter().map(|x| x / n).collect();
            if c > 1 && out.iter().any(|u| u.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / c as f64 >= 0.3) {
                continue 'retry;
            }
            out.push(v.iter().map(|x| x * norm).collect());
        }
        return Ok(out);
    }
    Err(Error::RetryBudgetExhausted {
        attempts: SIGNATURE_RETRIES,
        reason: format!("{classes} channel signatures in {c} dims with pairwise cosine < 0.3"),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    /// Held-out samples from a training domain.
    Test,
    /// Samples from a domain never used for training.
    Unseen,
}

impl Split {
    fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
            Split::Unseen => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Split::Train),
            1 => Ok(Split::Test),
            2 => Ok(Split::Unseen),
            _ => Err(Error::Format(format!("unknown split code {c}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub domain: u32,
    pub split: Split,
    pub image: Vec<f32>,
    /// Masked labels in `{-1, 0, 1}`.
    pub labels: PartialLabelVector,
    /// Complete ground truth in `{0, 1}`.
    pub truth: Vec<u8>,
}

/// Draws `n` samples. With `reveal_all` every label is exposed.
pub fn sample_domain(
    spec: &DomainSpec,
    prototypes: &Prototypes,
    n: usize,
    seed: u64,
    split: Split,
    reveal_all: bool,
) -> Result<Vec<SyntheticSample>> {
    let [c, h, w] = prototypes.shape;
    let classes = prototypes.patterns.len();
    spec.validate(classes, c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = h * w;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let truth: Vec<u8> = spec
            .prevalence
            .iter()
            .map(|&p| u8::from(rng.random::<f64>() < p))
            .collect();
        let mut clean = prototypes.background.clone();
        for (t, _) in truth.iter().enumerate().filter(|(_, &y)| y == 1) {
            clean
                .iter_mut()
                .zip(&prototypes.patterns[t])
                .for_each(|(a, b)| *a += b);
        }
        let image = clean
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let k = i / plane;
                let eps: f64 = if spec.noise > 0.0 {
                    spec.noise * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                (spec.scale[k] * v + spec.offset[k] + eps) as f32
            })
            .collect();
        let labels = truth
            .iter()
            .enumerate()
            .map(|(t, &y)| {
                if reveal_all || spec.is_labeled(t) {
                    if y == 1 {
                        1
                    } else {
                        -1
                    }
                } else {
                    0
                }
            })
            .collect();
        out.push(SyntheticSample {
            domain: spec.id,
            split,
            image,
            labels: PartialLabelVector::new(labels)?,
            truth,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaDataset {
    pub classes: usize,
    pub input: [usize; 3],
    pub prototype_seed: u64,
    pub seed: u64,
    pub train_domains: Vec<u32>,
    pub unseen_domains: Vec<u32>,
    pub samples: Vec<SyntheticSample>,
}

/// Builds every split of every domain; each (domain, split) uses a derived seed.
pub fn generate_meta_dataset(cfg: &SynthConfig) -> Result<MetaDataset> {
    cfg.validate()?;
    let protos = generate_prototypes(cfg.classes, cfg.input, cfg.amplitude, cfg.background, cfg.prototype_seed)?;
    let mut samples = Vec::new();
    for d in &cfg.train_domains {
        let base = derive_seed(cfg.seed, u64::from(d.id));
        samples.extend(sample_domain(d, &protos, d.samples, derive_seed(base, 0), Split::Train, false)?);
        samples.extend(sample_domain(d, &protos, d.test_samples, derive_seed(base, 1), Split::Test, true)?);
    }
    for d in &cfg.unseen_domains {
        let base = derive_seed(cfg.seed, u64::from(d.id));
        samples.extend(sample_domain(d, &protos, d.samples, derive_seed(base, 2), Split::Unseen, true)?);
    }
    Ok(MetaDataset {
        classes: cfg.classes,
        input: cfg.input,
        prototype_seed: cfg.prototype_seed,
        seed: cfg.seed,
        train_domains: cfg.train_domains.iter().map(|d| d.id).collect(),
        unseen_domains: cfg.unseen_domains.iter().map(|d| d.id).collect(),
        samples,
    })
}

impl MetaDataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn domain_indices(&self, split: Split, domain: u32) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split && s.domain == domain)
            .map(|(i, _)| i)
            .collect()
    }

    /// Stacks the selected images into a `B x C x H x W` tensor.
    pub fn images(&self, idx: &[usize]) -> Result<Tensor> {
        let [c, h, w] = self.input;
        let data = idx
            .iter()
            .flat_map(|&i| self.samples[i].image.iter().map(|&v| f64::from(v)))
            .collect();
        Tensor::new(vec![idx.len(), c, h, w], data)
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<PartialLabelVector> {
        idx.iter().map(|&i| self.samples[i].labels.clone()).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.raw(MAGIC);
        w.u32(VERSION);
        w.u32(self.classes as u32);
        for d in self.input {
            w.u32(d as u32);
        }
        w.u64(self.prototype_seed);
        w.u64(self.seed);
        for ids in [&self.train_domains, &self.unseen_domains] {
            w.u32(ids.len() as u32);
            ids.iter().for_each(|&id| w.u32(id));
        }
        w.u64(self.samples.len() as u64);
        for s in &self.samples {
            w.u32(s.domain);
            w.u8(s.split.code());
            s.labels.values().iter().for_each(|&y| w.u8(y as u8));
            s.truth.iter().for_each(|&y| w.u8(y));
            s.image.iter().for_each(|&v| w.f32(v));
        }
        w.bytes
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "dataset");
        let header = read_header(&mut r)?;
        let [c, h, wd] = header.input;
        let t = header.classes;
        let mut samples = Vec::with_capacity(header.samples.min(1 << 20));
        for _ in 0..header.samples {
            let domain = r.u32()?;
            let split = Split::from_code(r.u8()?)?;
            let labels = (0..t).map(|_| r.u8().map(|b| b as i8)).collect::<Result<Vec<_>>>()?;
            let truth = (0..t).map(|_| r.u8()).collect::<Result<Vec<_>>>()?;
            if truth.iter().any(|&y| y > 1) {
                return Err(Error::Format("ground-truth byte outside {0, 1}".into()));
            }
            let image = (0..c * h * wd).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            if image.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format("non-finite pixel".into()));
            }
            samples.push(SyntheticSample {
                domain,
                split,
                image,
                labels: PartialLabelVector::new(labels).map_err(|e| Error::Format(e.to_string()))?,
                truth,
            });
        }
        r.finish()?;
        Ok(Self {
            classes: t,
            input: header.input,
            prototype_seed: header.prototype_seed,
            seed: header.seed,
            train_domains: header.train_domains,
            unseen_domains: header.unseen_domains,
            samples,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    /// Per-domain, per-split sample and positive counts.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let mut keys: Vec<(u32, u8)> = self.samples.iter().map(|s| (s.domain, s.split.code())).collect();
        keys.sort_unstable();
        keys.dedup();
        for (d, code) in keys {
            let rows: Vec<&SyntheticSample> = self
                .samples
                .iter()
                .filter(|s| s.domain == d && s.split.code() == code)
                .collect();
            let positives: Vec<String> = (0..self.classes)
                .map(|t| rows.iter().filter(|s| s.truth[t] == 1).count().to_string())
                .collect();
            let split = Split::from_code(code).expect("valid code");
            let _ = writeln!(
                out,
                "domain {d} {split:?}: {} samples, positives per class [{}]",
                rows.len(),
                positives.join(", ")
            );
        }
        out
    }
}

/// Fixed-size header of a dataset file.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub version: u32,
    pub classes: usize,
    pub input: [usize; 3],
    pub prototype_seed: u64,
    pub seed: u64,
    pub train_domains: Vec<u32>,
    pub unseen_domains: Vec<u32>,
    pub samples: usize,
}

fn read_header(r: &mut Reader) -> Result<DatasetHeader> {
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let classes = r.u32()? as usize;
    let input = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    if classes == 0 || input.contains(&0) {
        return Err(Error::Format("zero dimension in dataset header".into()));
    }
    let prototype_seed = r.u64()?;
    let seed = r.u64()?;
    let mut ids = || -> Result<Vec<u32>> {
        let n = r.u32()?;
        (0..n).map(|_| r.u32()).collect()
    };
    let train_domains = ids()?;
    let unseen_domains = ids()?;
    let samples = r.u64()? as usize;
    Ok(DatasetHeader {
        version,
        classes,
        input,
        prototype_seed,
        seed,
        train_domains,
        unseen_domains,
        samples,
    })
}

/// Reads only the header of a dataset file.
pub fn describe_dataset(bytes: &[u8]) -> Result<DatasetHeader> {
    read_header(&mut Reader::new(bytes, "dataset"))
}

impl std::fmt::Display for DatasetHeader {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "version = {}", self.version)?;
        writeln!(f, "classes = {}", self.classes)?;
        writeln!(f, "input = {}x{}x{}", self.input[0], self.input[1], self.input[2])?;
        writeln!(f, "prototype_seed = {}", self.prototype_seed)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "train_domains = {:?}", self.train_domains)?;
        writeln!(f, "unseen_domains = {:?}", self.unseen_domains)?;
        writeln!(f, "samples = {}", self.samples)
    }
}

/// Shuffled index batches; the order depends only on `(seed, epoch)` and
/// the last batch may be short.
pub fn batches(indices: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if indices.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut order = indices.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64)));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn prototypes_are_localized_and_distinct() {
        let p = generate_prototypes(5, [3, 12, 12], 1.0, 0.3, 7).unwrap();
        assert_eq!(p, generate_prototypes(5, [3, 12, 12], 1.0, 0.3, 7).unwrap());
        for a in 0..5 {
            for b in a + 1..5 {
                let r = pearson(&p.patterns[a], &p.patterns[b]);
                assert!(r < 0.3, "classes {a},{b}: {r}");
            }
            let region = p.regions[a];
            let (mut inside, mut total) = (0.0, 0.0);
            for (i, v) in p.patterns[a].iter().enumerate() {
                let (row, col) = ((i / 12) % 12, i % 12);
                total += v * v;
                if region.contains(row, col) {
                    inside += v * v;
                }
            }
            assert!(inside / total >= 0.8);
        }
    }

    #[test]
    fn too_many_classes_for_the_grid() {
        assert!(generate_prototypes(10, [3, 5, 5], 1.0, 0.3, 0).is_err());
    }

    #[test]
    fn clean_domain_reproduces_background() {
        let p = generate_prototypes(3, [2, 6, 6], 1.0, 0.3, 1).unwrap();
        let spec = DomainSpec {
            id: 0,
            scale: vec![1.0, 1.0],
            offset: vec![0.0, 0.0],
            noise: 0.0,
            labeled: vec![0],
            samples: 3,
            test_samples: 0,
            prevalence: vec![1e-12; 3],
        };
        for s in sample_domain(&spec, &p, 3, 0, Split::Train, false).unwrap() {
            let bg: Vec<f32> = p.background.iter().map(|&v| v as f32).collect();
            assert_eq!(s.image, bg);
        }
    }

    #[test]
    fn labels_outside_subset_are_masked() {
        let data = generate_meta_dataset(&SynthConfig::default()).unwrap();
        let cfg = SynthConfig::default();
        for s in data.samples.iter().filter(|s| s.split == Split::Train) {
            let spec = cfg.train_domains.iter().find(|d| d.id == s.domain).unwrap();
            for t in 0..5 {
                assert_eq!(s.labels.is_known(t), spec.labeled.contains(&t));
                if s.labels.is_known(t) {
                    assert_eq!(s.labels.values()[t] == 1, s.truth[t] == 1);
                }
            }
        }
    }

    #[test]
    fn prevalence_matches_spec() {
        let p = generate_prototypes(5, [3, 12, 12], 1.0, 0.3, 7).unwrap();
        let mut spec = SynthConfig::default().train_domains[0].clone();
        spec.prevalence = vec![0.1, 0.3, 0.5, 0.7, 0.2];
        let n = 10_000;
        let s = sample_domain(&spec, &p, n, 99, Split::Train, false).unwrap();
        for (t, &prev) in spec.prevalence.iter().enumerate() {
            let hits = s.iter().filter(|x| x.truth[t] == 1).count() as f64 / n as f64;
            let se = (prev * (1.0 - prev) / n as f64).sqrt();
            assert!((hits - prev).abs() < 3.0 * se, "class {t}: {hits} vs {prev}");
        }
    }

    #[test]
    fn domains_differ_by_their_offsets() {
        let p = generate_prototypes(5, [3, 12, 12], 1.0, 0.3, 7).unwrap();
        let a = SynthConfig::default().train_domains[0].clone();
        let mut b = a.clone();
        b.id = 9;
        b.offset = vec![0.4, -0.3, 0.2];
        let mean = |spec: &DomainSpec| {
            let s = sample_domain(spec, &p, 500, 3, Split::Train, false).unwrap();
            (0..3)
                .map(|k| {
                    s.iter()
                        .flat_map(|x| x.image[k * 144..(k + 1) * 144].iter())
                        .map(|&v| f64::from(v))
                        .sum::<f64>()
                        / (500.0 * 144.0)
                })
                .collect::<Vec<_>>()
        };
        let (ma, mb) = (mean(&a), mean(&b));
        for k in 0..3 {
            let gap = (b.offset[k] - a.offset[k]).abs();
            assert!((mb[k] - ma[k]).abs() >= 0.9 * gap, "channel {k}");
        }
    }

    #[test]
    fn unseen_domains_stay_out_of_training() {
        let data = generate_meta_dataset(&SynthConfig::default()).unwrap();
        for i in data.indices(Split::Train).into_iter().chain(data.indices(Split::Test)) {
            assert!(!data.unseen_domains.contains(&data.samples[i].domain));
        }
        assert_eq!(data.indices(Split::Unseen).len(), 400);
    }

    #[test]
    fn config_requires_class_coverage() {
        let mut cfg = SynthConfig::default();
        cfg.train_domains[3].labeled = vec![3];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn file_roundtrip_and_header() {
        let mut cfg = SynthConfig::default();
        for d in cfg.train_domains.iter_mut().chain(cfg.unseen_domains.iter_mut()) {
            d.samples = 5;
            d.test_samples = d.test_samples.min(2);
        }
        let data = generate_meta_dataset(&cfg).unwrap();
        let bytes = data.encode();
        assert_eq!(MetaDataset::decode(&bytes).unwrap(), data);
        let h = describe_dataset(&bytes).unwrap();
        assert_eq!(h.samples, data.samples.len());
        assert_eq!(h.unseen_domains, vec![4, 5]);
        assert!(MetaDataset::decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn batches_partition_deterministically() {
        let idx: Vec<usize> = (0..37).collect();
        let a = batches(&idx, 16, 5, 2).unwrap();
        assert_eq!(a, batches(&idx, 16, 5, 2).unwrap());
        assert_ne!(a, batches(&idx, 16, 5, 3).unwrap());
        assert_eq!(a.iter().map(Vec::len).collect::<Vec<_>>(), vec![16, 16, 5]);
        let mut all: Vec<usize> = a.concat();
        all.sort_unstable();
        assert_eq!(all, idx);
        assert!(batches(&[], 16, 0, 1).is_err());
        assert!(batches(&idx, 0, 0, 1).is_err());
    }
}
