//! Datasets, label-skewed partitioning and batching.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::seed::{self, Stream};

pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Array2<f64>,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::DimensionMismatch(format!(
                "label {bad} outside 0..{class_count}"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            class_count,
        })
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gathers the given rows into a [`Batch`].
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        Batch::new(
            self.inputs.select(Axis(0), indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// First `n` examples.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            inputs: self.inputs.slice(ndarray::s![..n, ..]).to_owned(),
            labels: self.labels[..n].to_vec(),
            class_count: self.class_count,
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }
}

// ---------------------------------------------------------------------------
// IDX files

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(path, "truncated header"))
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(
            path,
            format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = read_u32(bytes, 4, path)? as usize;
    let rows = read_u32(bytes, 8, path)? as usize;
    let cols = read_u32(bytes, 12, path)? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(format_err(
            path,
            format!(
                "truncated: {} pixel bytes, header promises {need}",
                body.len()
            ),
        ));
    }
    Ok((count, rows, cols, body[..need].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(
            path,
            format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let count = read_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(format_err(
            path,
            format!(
                "truncated: {} label bytes, header promises {count}",
                body.len()
            ),
        ));
    }
    Ok(body[..count].to_vec())
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let count = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Loads one image/label IDX pair, keeping at most `limit` examples.
pub fn load_idx_pair(images: &Path, labels: &Path, limit: Option<usize>) -> Result<Dataset> {
    let img_bytes = fs::read(images).map_err(|e| Error::io(images, e))?;
    let lbl_bytes = fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let (count, rows, cols, pixels) = parse_idx_images(&img_bytes, images)?;
    let raw_labels = parse_idx_labels(&lbl_bytes, labels)?;
    if raw_labels.len() != count {
        return Err(format_err(
            labels,
            format!(
                "{} labels but {} has {count} images",
                raw_labels.len(),
                images.display()
            ),
        ));
    }
    let n = limit.map_or(count, |l| l.min(count));
    let d = rows * cols;
    let inputs = Array2::from_shape_fn((n, d), |(i, j)| f64::from(pixels[i * d + j]) / 255.0);
    let labels: Vec<usize> = raw_labels[..n].iter().map(|&b| usize::from(b)).collect();
    let class_count = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    Dataset::new(inputs, labels, class_count)
}

#[derive(Debug, Clone)]
pub struct Mnist {
    pub train: Dataset,
    pub test: Dataset,
}

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// Loads the four standard MNIST IDX files from `dir`.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<Mnist> {
    load_mnist_subset(dir, None, None)
}

/// As [`load_mnist`], keeping only the leading examples of each split.
pub fn load_mnist_subset(
    dir: impl AsRef<Path>,
    train_limit: Option<usize>,
    test_limit: Option<usize>,
) -> Result<Mnist> {
    let dir = dir.as_ref();
    let p = |name: &str| -> PathBuf { dir.join(name) };
    Ok(Mnist {
        train: load_idx_pair(&p(MNIST_FILES[0]), &p(MNIST_FILES[1]), train_limit)?,
        test: load_idx_pair(&p(MNIST_FILES[2]), &p(MNIST_FILES[3]), test_limit)?,
    })
}

// ---------------------------------------------------------------------------
// Synthetic blobs

/// `K` isotropic Gaussian clusters in `d` dimensions.
///
/// Class `c` is centred at `(1 + c / d)·e_{c mod d}`, so every pair of means
/// is at least unit distance apart. Examples are shuffled.
pub fn synth_blobs(
    k: usize,
    per_class: usize,
    d: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if k == 0 || per_class == 0 || d == 0 || spread < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "synth_blobs needs positive sizes and spread, got k={k} per_class={per_class} d={d} spread={spread}"
        )));
    }
    let mut rng = seed::rng(seed, Stream::Data, &[]);
    let n = k * per_class;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut inputs = Array2::zeros((n, d));
    let mut labels = vec![0; n];
    for (slot, &row) in order.iter().enumerate() {
        let class = slot / per_class;
        labels[row] = class;
        let axis = class % d;
        let scale = 1.0 + (class / d) as f64;
        for j in 0..d {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let mean = if j == axis { scale } else { 0.0 };
            inputs[[row, j]] = mean + spread * noise;
        }
    }
    Dataset::new(inputs, labels, k)
}

// ---------------------------------------------------------------------------
// Partitioning

/// Per-client example indices into a [`Dataset`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub clients: Vec<Vec<usize>>,
    pub sigma: usize,
}

impl Partition {
    pub fn client_count(&self) -> usize {
        self.clients.len()
    }

    /// Writes `client,index` rows.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["client", "index"])?;
        for (c, idx) in self.clients.iter().enumerate() {
            for &i in idx {
                w.write_record([c.to_string(), i.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Balanced label-skew partition: every client holds exactly `sigma` classes.
///
/// Each class is cut into `M·σ/K` shards whose sizes differ by at most one.
/// Shards are laid out class by class (class order shuffled) and client `i`
/// takes positions `i, i+M, i+2M, …`; since a class block has at most `M`
/// shards, those positions fall in distinct classes.
pub fn partition_noniid(
    dataset: &Dataset,
    clients: usize,
    sigma: usize,
    seed: u64,
) -> Result<Partition> {
    let k = dataset.class_count();
    if clients == 0 {
        return Err(Error::InfeasiblePartition(
            "client count M must be ≥ 1".into(),
        ));
    }
    if sigma == 0 || sigma > k {
        return Err(Error::InfeasiblePartition(format!(
            "σ={sigma} must satisfy 1 ≤ σ ≤ K={k}"
        )));
    }
    if !(clients * sigma).is_multiple_of(k) {
        return Err(Error::InfeasiblePartition(format!(
            "M·σ = {clients}·{sigma} = {} class-slots is not divisible by K={k}",
            clients * sigma
        )));
    }
    let shards_per_class = clients * sigma / k;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &y) in dataset.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < shards_per_class {
            return Err(Error::InfeasiblePartition(format!(
                "class {c} has {} examples but needs at least {shards_per_class} (one per shard)",
                members.len()
            )));
        }
    }

    let mut rng = seed::rng(seed, Stream::Partition, &[]);
    let mut class_order: Vec<usize> = (0..k).collect();
    class_order.shuffle(&mut rng);

    // Valid starting layout: slot `pos` of the class-major sequence goes to
    // client `pos % M`. Because M ≥ shards_per_class, no client sees a class
    // twice. It is highly structured (σ=2 yields only K/2 distinct pairs), so
    // it is then mixed by random class swaps between clients that keep every
    // client's classes distinct.
    let mut slots: Vec<Vec<usize>> = vec![Vec::with_capacity(sigma); clients];
    for (pos, c) in class_order
        .iter()
        .flat_map(|&c| std::iter::repeat_n(c, shards_per_class))
        .enumerate()
    {
        slots[pos % clients].push(c);
    }
    let n_slots = clients * sigma;
    if clients > 1 {
        for _ in 0..20 * n_slots {
            let (a, b) = (rng.random_range(0..n_slots), rng.random_range(0..n_slots));
            let (ca, ia) = (a / sigma, a % sigma);
            let (cb, ib) = (b / sigma, b % sigma);
            let (xa, xb) = (slots[ca][ia], slots[cb][ib]);
            if ca != cb && xa != xb && !slots[ca].contains(&xb) && !slots[cb].contains(&xa) {
                slots[ca][ia] = xb;
                slots[cb][ib] = xa;
            }
        }
    }

    let mut shards: Vec<Vec<Vec<usize>>> = by_class
        .iter()
        .map(|members| {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let mut parts = vec![Vec::new(); shards_per_class];
            // round-robin keeps the sizes within one of each other
            for (j, idx) in members.into_iter().enumerate() {
                parts[j % shards_per_class].push(idx);
            }
            parts
        })
        .collect();

    let mut out = vec![Vec::new(); clients];
    for (client, classes) in slots.iter().enumerate() {
        for &c in classes {
            out[client].extend(shards[c].pop().expect("one shard per slot"));
        }
    }
    for idx in &mut out {
        idx.sort_unstable();
    }
    Ok(Partition {
        clients: out,
        sigma,
    })
}

// ---------------------------------------------------------------------------
// Batching

/// Fixed batch layout for one client's shard.
///
/// The batch count `⌈n/B⌉` never changes, so batch index `k` identifies the
/// same slot every round. With `reshuffle` off the order is also identical
/// every epoch.
#[derive(Debug, Clone)]
pub struct Batcher {
    shard: Vec<usize>,
    batch_size: usize,
    seed: u64,
    reshuffle: bool,
}

impl Batcher {
    pub fn new(shard: Vec<usize>, batch_size: usize, seed: u64, reshuffle: bool) -> Result<Self> {
        if shard.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be ≥ 1".into()));
        }
        Ok(Self {
            shard,
            batch_size,
            seed,
            reshuffle,
        })
    }

    pub fn batch_count(&self) -> usize {
        self.shard.len().div_ceil(self.batch_size)
    }

    pub fn shard(&self) -> &[usize] {
        &self.shard
    }

    pub fn shard_len(&self) -> usize {
        self.shard.len()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Index lists for the given epoch counter.
    pub fn batches(&self, epoch: u64) -> Vec<Vec<usize>> {
        let coords = if self.reshuffle { [epoch] } else { [0] };
        let mut rng = seed::rng(self.seed, Stream::Batching, &coords);
        let mut order = self.shard.clone();
        order.shuffle(&mut rng);
        order
            .chunks(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }
}

/// Writes a dataset as an IDX image/label pair (pixels quantized to bytes).
pub fn write_idx_pair(
    dataset: &Dataset,
    rows: usize,
    cols: usize,
    images: &Path,
    labels: &Path,
) -> Result<()> {
    if rows * cols != dataset.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{rows}×{cols} image does not match dimension {}",
            dataset.dim()
        )));
    }
    let pixels: Vec<u8> = dataset
        .inputs()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let lbl: Vec<u8> = dataset.labels().iter().map(|&y| y as u8).collect();
    let write = |path: &Path, bytes: &[u8]| -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(bytes).map_err(|e| Error::io(path, e))
    };
    write(images, &encode_idx_images(rows, cols, &pixels))?;
    write(labels, &encode_idx_labels(&lbl))
}
