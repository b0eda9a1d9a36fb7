//! Train/val/test splits for both domains, batching, and image file IO.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use atdt_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::scenegen::{
    generate_scene, make_proxy_depth_with, render, Domain, DomainStyle, GrammarConfig, ProxyConfig, Sample, D_MAX,
    D_MIN, NUM_CLASSES,
};

/// Depth is stored in 16-bit PGM as `round(depth * DEPTH_PGM_SCALE)`.
pub const DEPTH_PGM_SCALE: f64 = 655.35;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// `[height, width]`.
    pub resolution: [usize; 2],
    pub grammar: GrammarConfig,
    pub style_a: DomainStyle,
    pub style_b: DomainStyle,
    /// Render B from the same scene seeds as A.
    pub paired: bool,
    pub proxy: ProxyConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_train: 500,
            n_val: 100,
            n_test: 100,
            resolution: [64, 64],
            grammar: GrammarConfig::default(),
            style_a: DomainStyle::domain_a(),
            style_b: DomainStyle::domain_b(),
            paired: false,
            proxy: ProxyConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.grammar.validate()?;
        let [h, w] = self.resolution;
        if !(32..=128).contains(&h) || !(32..=128).contains(&w) || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Config(format!(
                "resolution {h}x{w} must lie in 32..=128 and be divisible by 8"
            )));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("train and test splits must be non-empty".into()));
        }
        if self.style_a.domain != Domain::A || self.style_b.domain != Domain::B {
            return Err(Error::Config("style_a must be domain A and style_b domain B".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::Train, SplitKind::Val, SplitKind::Test];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Scene seed of sample `index` in a split. Distinct domains, splits and
/// indices give distinct streams; `paired` maps B onto A's seeds.
pub fn scene_seed(master: u64, domain: Domain, split: SplitKind, index: usize, paired: bool) -> u64 {
    let d = match (domain, paired) {
        (Domain::A, _) | (Domain::B, true) => 1u64,
        (Domain::B, false) => 2,
    };
    let s = split as u64 + 1;
    splitmix(splitmix(splitmix(master ^ (d << 56)) ^ (s << 48)) ^ index as u64)
}

/// Derives an independent child seed from a parent and a label.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    label
        .bytes()
        .fold(splitmix(parent), |acc, b| splitmix(acc ^ u64::from(b)))
}

/// A stack of samples: `[N, C, H, W]` tensors.
#[derive(Clone, Debug)]
pub struct Split {
    pub domain: Domain,
    pub images: Tensor,
    pub depth: Tensor,
    pub labels: Tensor,
    pub valid: Tensor,
    pub seeds: Vec<u64>,
}

/// A batch gathered from a [`Split`]; same layout.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub depth: Tensor,
    pub labels: Tensor,
    pub valid: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenates two batches along the sample axis.
    pub fn concat(&self, other: &Batch) -> Result<Batch> {
        let cat = |a: &Tensor, b: &Tensor| -> Result<Tensor> {
            contract!(a.shape()[1..] == b.shape()[1..], "batch shapes differ");
            let mut shape = a.shape().to_vec();
            shape[0] += b.shape()[0];
            let mut data = a.data().to_vec();
            data.extend_from_slice(b.data());
            Ok(Tensor::new(shape, data)?)
        };
        Ok(Batch {
            images: cat(&self.images, &other.images)?,
            depth: cat(&self.depth, &other.depth)?,
            labels: cat(&self.labels, &other.labels)?,
            valid: cat(&self.valid, &other.valid)?,
        })
    }
}

impl Split {
    pub fn from_samples(domain: Domain, samples: &[Sample]) -> Result<Split> {
        contract!(!samples.is_empty(), "cannot stack an empty split");
        let stack = |f: fn(&Sample) -> &Tensor| -> Result<Tensor> {
            let items: Vec<&Tensor> = samples.iter().map(f).collect();
            Ok(Tensor::stack(&items)?)
        };
        Ok(Split {
            domain,
            images: stack(|s| &s.image)?,
            depth: stack(|s| &s.depth)?,
            labels: stack(|s| &s.labels)?,
            valid: stack(|s| &s.valid_mask)?,
            seeds: samples.iter().map(|s| s.seed).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    pub fn resolution(&self) -> (usize, usize) {
        let s = self.images.shape();
        (s[2], s[3])
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        Ok(Batch {
            images: self.images.gather_rows(indices)?,
            depth: self.depth.gather_rows(indices)?,
            labels: self.labels.gather_rows(indices)?,
            valid: self.valid.gather_rows(indices)?,
        })
    }

    /// Consecutive batches covering the split in order.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = Result<Batch>> + '_ {
        let n = self.len();
        (0..n).step_by(size.max(1)).map(move |start| {
            let idx: Vec<usize> = (start..(start + size).min(n)).collect();
            self.batch(&idx)
        })
    }

    pub fn sample(&self, i: usize) -> Result<Sample> {
        let b = self.batch(&[i])?;
        let drop = |t: Tensor| {
            let s = t.shape()[1..].to_vec();
            t.reshape(&s)
        };
        Ok(Sample {
            seed: self.seeds[i],
            domain: self.domain,
            image: drop(b.images)?,
            depth: drop(b.depth)?,
            labels: drop(b.labels)?,
            valid_mask: drop(b.valid)?,
        })
    }

    /// Replaces depth and validity with stereo-like proxy labels.
    pub fn with_proxy_depth(&self, cfg: &ProxyConfig, seed: u64) -> Result<Split> {
        let samples = (0..self.len())
            .map(|i| make_proxy_depth_with(&self.sample(i)?, cfg, seed))
            .collect::<Result<Vec<_>>>()?;
        Split::from_samples(self.domain, &samples)
    }
}

#[derive(Clone, Debug)]
pub struct DomainData {
    pub domain: Domain,
    pub train: Split,
    pub val: Option<Split>,
    pub test: Split,
}

impl DomainData {
    pub fn split(&self, kind: SplitKind) -> Option<&Split> {
        match kind {
            SplitKind::Train => Some(&self.train),
            SplitKind::Val => self.val.as_ref(),
            SplitKind::Test => Some(&self.test),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Datasets {
    pub a: DomainData,
    pub b: DomainData,
}

impl Datasets {
    pub fn domain(&self, d: Domain) -> &DomainData {
        match d {
            Domain::A => &self.a,
            Domain::B => &self.b,
        }
    }
}

fn build_split(cfg: &DatasetConfig, seed: u64, domain: Domain, kind: SplitKind, n: usize) -> Result<Split> {
    let style = match domain {
        Domain::A => &cfg.style_a,
        Domain::B => &cfg.style_b,
    };
    let [h, w] = cfg.resolution;
    let samples = (0..n)
        .map(|i| {
            let scene = generate_scene(scene_seed(seed, domain, kind, i, cfg.paired), &cfg.grammar)?;
            render(&scene, style, (h, w))
        })
        .collect::<Result<Vec<_>>>()?;
    Split::from_samples(domain, &samples)
}

fn build_domain(cfg: &DatasetConfig, seed: u64, domain: Domain) -> Result<DomainData> {
    Ok(DomainData {
        domain,
        train: build_split(cfg, seed, domain, SplitKind::Train, cfg.n_train)?,
        val: if cfg.n_val > 0 {
            Some(build_split(cfg, seed, domain, SplitKind::Val, cfg.n_val)?)
        } else {
            None
        },
        test: build_split(cfg, seed, domain, SplitKind::Test, cfg.n_test)?,
    })
}

pub fn build_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Datasets> {
    cfg.validate()?;
    Ok(Datasets {
        a: build_domain(cfg, seed, Domain::A)?,
        b: build_domain(cfg, seed, Domain::B)?,
    })
}

// ---------------------------------------------------------------- image IO

fn image_dims(t: &Tensor, channels: usize) -> Result<(usize, usize)> {
    let s = t.shape();
    contract!(
        s.len() == 3 && s[0] == channels,
        "expected [{}, H, W], got {:?}",
        channels,
        s
    );
    Ok((s[1], s[2]))
}

/// Binary PPM (P6), 8 bits per channel.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = image_dims(image, 3)?;
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{w} {h}\n255\n")?;
    let d = image.data();
    let mut bytes = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            bytes.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out.write_all(&bytes)?;
    Ok(())
}

/// Depth as 16-bit big-endian PGM (P5, maxval 65535).
pub fn write_depth_pgm(path: &Path, depth: &Tensor) -> Result<()> {
    let (h, w) = image_dims(depth, 1)?;
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n65535\n")?;
    for &d in depth.data() {
        let v = (d.clamp(0.0, D_MAX) * DEPTH_PGM_SCALE).round() as u16;
        out.write_all(&v.to_be_bytes())?;
    }
    Ok(())
}

/// Class ids as 8-bit PGM (P5, maxval 255).
pub fn write_label_pgm(path: &Path, labels: &Tensor) -> Result<()> {
    let (h, w) = image_dims(labels, 1)?;
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = labels.data().iter().map(|&l| l as u8).collect();
    out.write_all(&bytes)?;
    Ok(())
}

/// Display palette for class ids, RGB in [0, 1].
pub const LABEL_PALETTE: [[f64; 3]; NUM_CLASSES] = [
    [0.50, 0.25, 0.50],
    [0.27, 0.51, 0.71],
    [0.27, 0.27, 0.27],
    [0.00, 0.00, 0.56],
    [0.60, 0.60, 0.60],
    [0.86, 0.86, 0.00],
];

/// `[1, H, W]` class ids to a `[3, H, W]` colour image.
pub fn colorize_labels(labels: &Tensor) -> Result<Tensor> {
    let (h, w) = image_dims(labels, 1)?;
    let hw = h * w;
    let l = labels.data();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let c = (l[i % hw] as usize).min(NUM_CLASSES - 1);
        LABEL_PALETTE[c][i / hw]
    }))
}

/// `[1, H, W]` depth in metres to a grey `[3, H, W]` image, near is bright.
pub fn depth_to_rgb(depth: &Tensor) -> Result<Tensor> {
    let (h, w) = image_dims(depth, 1)?;
    let hw = h * w;
    let d = depth.data();
    let (lo, hi) = (D_MIN.ln(), D_MAX.ln());
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        1.0 - (d[i % hw].clamp(D_MIN, D_MAX).ln() - lo) / (hi - lo)
    }))
}

fn read_header(r: &mut impl BufRead) -> Result<(String, usize, usize, usize)> {
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Contract("truncated netpbm header".into()));
        }
        let line = line.split('#').next().unwrap_or("");
        tokens.extend(line.split_whitespace().map(str::to_owned));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Contract(format!("bad netpbm field {s:?}")))
    };
    Ok((tokens[0].clone(), num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let (magic, w, h, max) = read_header(&mut r)?;
    contract!(magic == "P6" && max == 255, "not an 8-bit P6 file");
    let mut bytes = vec![0u8; 3 * h * w];
    r.read_exact(&mut bytes)?;
    let mut data = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            data[c * h * w + i] = f64::from(bytes[3 * i + c]) / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data)?)
}

/// Reads an 8- or 16-bit P5 file as `[1, H, W]` raw integer values.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let (magic, w, h, max) = read_header(&mut r)?;
    contract!(magic == "P5", "not a P5 file");
    let data = if max > 255 {
        let mut bytes = vec![0u8; 2 * h * w];
        r.read_exact(&mut bytes)?;
        bytes
            .chunks_exact(2)
            .map(|b| f64::from(u16::from_be_bytes([b[0], b[1]])))
            .collect()
    } else {
        let mut bytes = vec![0u8; h * w];
        r.read_exact(&mut bytes)?;
        bytes.into_iter().map(f64::from).collect()
    };
    Ok(Tensor::new(vec![1, h, w], data)?)
}

pub fn read_depth_pgm(path: &Path) -> Result<Tensor> {
    let raw = read_pgm(path)?;
    let shape = raw.shape().to_vec();
    Ok(Tensor::new(
        shape,
        raw.data().iter().map(|v| v / DEPTH_PGM_SCALE).collect(),
    )?)
}

/// Index of an exported split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub domain: Domain,
    pub split: SplitKind,
    pub resolution: [usize; 2],
    pub seeds: Vec<u64>,
    pub files: Vec<[String; 3]>,
}

/// Writes `<dir>/<i>_{image.ppm,depth.pgm,labels.pgm}` and `manifest.json`.
pub fn export_split(dir: &Path, split: &Split, kind: SplitKind) -> Result<SplitManifest> {
    fs::create_dir_all(dir)?;
    let (h, w) = split.resolution();
    let mut files = Vec::with_capacity(split.len());
    for i in 0..split.len() {
        let s = split.sample(i)?;
        let names = [
            format!("{i:05}_image.ppm"),
            format!("{i:05}_depth.pgm"),
            format!("{i:05}_labels.pgm"),
        ];
        write_ppm(&dir.join(&names[0]), &s.image)?;
        write_depth_pgm(&dir.join(&names[1]), &s.depth)?;
        write_label_pgm(&dir.join(&names[2]), &s.labels)?;
        files.push(names);
    }
    let manifest = SplitManifest {
        domain: split.domain,
        split: kind,
        resolution: [h, w],
        seeds: split.seeds.clone(),
        files,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}
