//! Dataset acquisition, verification, caching, and batching.
//!
//! Archives are fetched into a local cache and checksum-verified. MNIST
//! checksums are pinned; for the other datasets the checksum observed on
//! first fetch is recorded next to the cache and enforced from then on.
//! Downloads go to a temporary file first, so a failed or corrupted fetch
//! never touches an existing cache entry.
//!
//! Mirror override: `BACKSCATTER_<DATASET>_MIRROR` replaces the base URL,
//! e.g. `BACKSCATTER_MNIST_MIRROR=https://host/path` makes the fetcher pull
//! `https://host/path/train-images-idx3-ubyte.gz`.

use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::InputSpec;

/// Datasets understood by the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetId {
    Mnist,
    Cifar10,
    Cifar100,
    Gtsrb,
}

impl std::fmt::Display for DatasetId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DatasetId::Mnist => "mnist",
            DatasetId::Cifar10 => "cifar10",
            DatasetId::Cifar100 => "cifar100",
            DatasetId::Gtsrb => "gtsrb",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for DatasetId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetId::Mnist),
            "cifar10" => Ok(DatasetId::Cifar10),
            "cifar100" => Ok(DatasetId::Cifar100),
            "gtsrb" => Ok(DatasetId::Gtsrb),
            other => Err(Error::Data(format!("unknown dataset '{other}'"))),
        }
    }
}

impl DatasetId {
    pub fn class_count(&self) -> usize {
        match self {
            DatasetId::Mnist => 10,
            DatasetId::Cifar10 => 10,
            DatasetId::Cifar100 => 100,
            DatasetId::Gtsrb => 43,
        }
    }

    pub fn input_spec(&self) -> InputSpec {
        match self {
            DatasetId::Mnist => InputSpec { channels: 1, height: 28, width: 28 },
            _ => InputSpec { channels: 3, height: 32, width: 32 },
        }
    }

    /// Per-channel pixel mean in `[0, 1]` space.
    pub fn norm_mean(&self) -> Vec<f32> {
        match self {
            DatasetId::Mnist => vec![0.1307],
            DatasetId::Cifar10 => vec![0.4914, 0.4822, 0.4465],
            DatasetId::Cifar100 => vec![0.5071, 0.4865, 0.4409],
            DatasetId::Gtsrb => vec![0.3403, 0.3121, 0.3214],
        }
    }

    pub fn norm_std(&self) -> Vec<f32> {
        match self {
            DatasetId::Mnist => vec![0.3081],
            DatasetId::Cifar10 => vec![0.2470, 0.2435, 0.2616],
            DatasetId::Cifar100 => vec![0.2673, 0.2564, 0.2762],
            DatasetId::Gtsrb => vec![0.2724, 0.2608, 0.2669],
        }
    }
}

struct RemoteFile {
    name: &'static str,
    url: &'static str,
    /// Pinned when the canonical checksum has been verified; otherwise
    /// recorded on first fetch.
    sha256: Option<&'static str>,
}

fn remote_files(id: DatasetId) -> &'static [RemoteFile] {
    match id {
        DatasetId::Mnist => &[
            RemoteFile {
                name: "train-images-idx3-ubyte.gz",
                url: "https://ossci-datasets.s3.amazonaws.com/mnist/train-images-idx3-ubyte.gz",
                sha256: Some("440fcabf73cc546fa21475e81ea370265605f56be210a4024d2ca8f203523609"),
            },
            RemoteFile {
                name: "train-labels-idx1-ubyte.gz",
                url: "https://ossci-datasets.s3.amazonaws.com/mnist/train-labels-idx1-ubyte.gz",
                sha256: Some("3552534a0a558bbed6aed32b30c495cca23d567ec52cac8be1a0730e8010255c"),
            },
            RemoteFile {
                name: "t10k-images-idx3-ubyte.gz",
                url: "https://ossci-datasets.s3.amazonaws.com/mnist/t10k-images-idx3-ubyte.gz",
                sha256: Some("8d422c7b0a1c1c79245a5bcf07fe86e33eeafee792b84584aec276f5a2dbc4e6"),
            },
            RemoteFile {
                name: "t10k-labels-idx1-ubyte.gz",
                url: "https://ossci-datasets.s3.amazonaws.com/mnist/t10k-labels-idx1-ubyte.gz",
                sha256: Some("f7ae60f92e00ec6debd23a6088c31dbd2371eca3ffa0defaefb259924204aec6"),
            },
        ],
        DatasetId::Cifar10 => &[RemoteFile {
            name: "cifar-10-binary.tar.gz",
            url: "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz",
            sha256: None,
        }],
        DatasetId::Cifar100 => &[RemoteFile {
            name: "cifar-100-binary.tar.gz",
            url: "https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz",
            sha256: None,
        }],
        DatasetId::Gtsrb => &[],
    }
}

/// One split of a dataset: images `[N, C, H, W]` in `[0, 1]` plus labels.
#[derive(Debug, Clone)]
pub struct DataSplit {
    pub images: Array4<f32>,
    pub labels: Vec<u8>,
}

impl DataSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copy out the samples at `indices`.
    pub fn gather(&self, indices: &[usize]) -> (Array4<f32>, Vec<usize>) {
        let (_, c, h, w) = self.images.dim();
        let mut out = Array4::<f32>::zeros((indices.len(), c, h, w));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            out.index_axis_mut(Axis(0), row).assign(&self.images.index_axis(Axis(0), i));
            labels.push(self.labels[i] as usize);
        }
        (out, labels)
    }
}

/// A fully parsed dataset with both canonical splits in memory.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub id: DatasetId,
    pub train: DataSplit,
    pub test: DataSplit,
}

impl LoadedDataset {
    pub fn class_count(&self) -> usize {
        self.id.class_count()
    }

    pub fn input_spec(&self) -> InputSpec {
        self.id.input_spec()
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

fn mirror_env(id: DatasetId) -> Option<String> {
    let var = format!("BACKSCATTER_{}_MIRROR", id.to_string().to_uppercase());
    std::env::var(var).ok()
}

fn http_get(url: &str) -> Result<Vec<u8>> {
    let cfg = ureq::Agent::config_builder()
        .tls_config(
            ureq::tls::TlsConfig::builder()
                .root_certs(ureq::tls::RootCerts::PlatformVerifier)
                .build(),
        )
        .build();
    let agent: ureq::Agent = cfg.into();
    let mut res = agent
        .get(url)
        .call()
        .map_err(|e| Error::Data(format!("fetch {url}: {e}")))?;
    let mut buf = Vec::new();
    res.body_mut()
        .as_reader()
        .read_to_end(&mut buf)
        .map_err(|e| Error::Data(format!("read {url}: {e}")))?;
    Ok(buf)
}

fn dataset_dir(cache_root: &Path, id: DatasetId) -> PathBuf {
    cache_root.join(id.to_string())
}

fn recorded_checksum_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.sha256"))
}

fn verify_or_record(dir: &Path, file: &RemoteFile, bytes: &[u8]) -> Result<()> {
    // escape hatch for hermetic tests running against synthetic fixtures
    if std::env::var("BACKSCATTER_SKIP_CHECKSUM").is_ok_and(|v| v == "1") {
        eprintln!("warning: BACKSCATTER_SKIP_CHECKSUM=1, dataset integrity not verified");
        return Ok(());
    }
    let digest = sha256_hex(bytes);
    if let Some(expect) = file.sha256 {
        if digest != expect {
            return Err(Error::Data(format!(
                "checksum mismatch for {}: got {digest}, expected {expect}",
                file.name
            )));
        }
        return Ok(());
    }
    let rec = recorded_checksum_path(dir, file.name);
    if rec.exists() {
        let expect = std::fs::read_to_string(&rec)?.trim().to_string();
        if digest != expect {
            return Err(Error::Data(format!(
                "checksum mismatch for {}: got {digest}, first-fetch record was {expect}",
                file.name
            )));
        }
    } else {
        std::fs::write(&rec, &digest)?;
    }
    Ok(())
}

/// Ensure all archives for `id` are present and verified in the cache.
/// Returns the dataset directory. Repeated calls hit the cache.
pub fn fetch_dataset(id: DatasetId, cache_root: &Path) -> Result<PathBuf> {
    let dir = dataset_dir(cache_root, id);
    std::fs::create_dir_all(&dir)?;

    if id == DatasetId::Gtsrb {
        // distribution archives for this dataset vary; ingestion reads a
        // pre-placed extracted directory instead
        let gd = gtsrb_dir(&dir);
        if !gd.join("Final_Training").is_dir() {
            return Err(Error::Data(format!(
                "gtsrb requires a pre-placed extracted directory at {} \
                 (Final_Training/Images/<class>/*.ppm and Final_Test/Images/*.ppm \
                 with GT-final_test.csv); set BACKSCATTER_GTSRB_DIR to override",
                gd.display()
            )));
        }
        return Ok(dir);
    }

    for file in remote_files(id) {
        let path = dir.join(file.name);
        if path.exists() {
            let bytes = std::fs::read(&path)?;
            verify_or_record(&dir, file, &bytes)?;
            continue;
        }
        let url = match mirror_env(id) {
            Some(base) => format!("{}/{}", base.trim_end_matches('/'), file.name),
            None => file.url.to_string(),
        };
        let bytes = http_get(&url)?;
        verify_or_record(&dir, file, &bytes)?;
        let tmp = dir.join(format!("{}.partial", file.name));
        std::fs::write(&tmp, &bytes)?;
        std::fs::rename(&tmp, &path)?;
    }
    Ok(dir)
}

fn gtsrb_dir(default: &Path) -> PathBuf {
    std::env::var("BACKSCATTER_GTSRB_DIR").map(PathBuf::from).unwrap_or_else(|_| default.to_path_buf())
}

/// Parse a cached dataset into memory; fails with a clear diagnostic if the
/// cache is missing (run [`fetch_dataset`] first or pre-place the archives).
pub fn load_dataset(id: DatasetId, cache_root: &Path) -> Result<LoadedDataset> {
    let dir = dataset_dir(cache_root, id);
    match id {
        DatasetId::Mnist => load_mnist(&dir),
        DatasetId::Cifar10 => load_cifar10(&dir),
        DatasetId::Cifar100 => load_cifar100(&dir),
        DatasetId::Gtsrb => load_gtsrb(&gtsrb_dir(&dir)),
    }
}

/// Fetch (if needed) then load.
pub fn ensure_dataset(id: DatasetId, cache_root: &Path) -> Result<LoadedDataset> {
    fetch_dataset(id, cache_root)?;
    load_dataset(id, cache_root)
}

fn gunzip(path: &Path) -> Result<Vec<u8>> {
    let file = std::fs::File::open(path).map_err(|e| {
        Error::Data(format!("missing cache file {} ({e}); run fetch-data first", path.display()))
    })?;
    let mut out = Vec::new();
    flate2::read::GzDecoder::new(file)
        .read_to_end(&mut out)
        .map_err(|e| Error::Data(format!("gunzip {}: {e}", path.display())))?;
    Ok(out)
}

fn be_u32(b: &[u8], off: usize) -> u32 {
    u32::from_be_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Parse an IDX image file (magic 0x803) into `[N, 1, H, W]` floats in [0,1].
fn parse_idx_images(bytes: &[u8]) -> Result<Array4<f32>> {
    if bytes.len() < 16 || be_u32(bytes, 0) != 0x0000_0803 {
        return Err(Error::Data("bad idx image magic".into()));
    }
    let n = be_u32(bytes, 4) as usize;
    let h = be_u32(bytes, 8) as usize;
    let w = be_u32(bytes, 12) as usize;
    if bytes.len() != 16 + n * h * w {
        return Err(Error::Data(format!(
            "idx image payload {} != expected {}",
            bytes.len() - 16,
            n * h * w
        )));
    }
    let mut out = Array4::<f32>::zeros((n, 1, h, w));
    out.as_slice_mut()
        .unwrap()
        .iter_mut()
        .zip(&bytes[16..])
        .for_each(|(dst, src)| *dst = *src as f32 / 255.0);
    Ok(out)
}

fn parse_idx_labels(bytes: &[u8], k: usize) -> Result<Vec<u8>> {
    if bytes.len() < 8 || be_u32(bytes, 0) != 0x0000_0801 {
        return Err(Error::Data("bad idx label magic".into()));
    }
    let n = be_u32(bytes, 4) as usize;
    if bytes.len() != 8 + n {
        return Err(Error::Data("idx label payload size mismatch".into()));
    }
    let labels = bytes[8..].to_vec();
    if labels.iter().any(|l| *l as usize >= k) {
        return Err(Error::Data("label out of range".into()));
    }
    Ok(labels)
}

fn load_mnist(dir: &Path) -> Result<LoadedDataset> {
    let train_images = parse_idx_images(&gunzip(&dir.join("train-images-idx3-ubyte.gz"))?)?;
    let train_labels = parse_idx_labels(&gunzip(&dir.join("train-labels-idx1-ubyte.gz"))?, 10)?;
    let test_images = parse_idx_images(&gunzip(&dir.join("t10k-images-idx3-ubyte.gz"))?)?;
    let test_labels = parse_idx_labels(&gunzip(&dir.join("t10k-labels-idx1-ubyte.gz"))?, 10)?;
    if train_images.dim().0 != train_labels.len() || test_images.dim().0 != test_labels.len() {
        return Err(Error::Data("image/label count mismatch".into()));
    }
    Ok(LoadedDataset {
        id: DatasetId::Mnist,
        train: DataSplit { images: train_images, labels: train_labels },
        test: DataSplit { images: test_images, labels: test_labels },
    })
}

/// Extract named members from a tar.gz archive.
fn tar_gz_members(path: &Path, wanted: &[&str]) -> Result<Vec<(String, Vec<u8>)>> {
    let file = std::fs::File::open(path).map_err(|e| {
        Error::Data(format!("missing cache file {} ({e}); run fetch-data first", path.display()))
    })?;
    let mut archive = tar::Archive::new(flate2::read::GzDecoder::new(file));
    let mut out = Vec::new();
    for entry in archive.entries().map_err(|e| Error::Data(format!("tar: {e}")))? {
        let mut entry = entry.map_err(|e| Error::Data(format!("tar entry: {e}")))?;
        let path = entry.path().map_err(|e| Error::Data(format!("tar path: {e}")))?;
        let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("").to_string();
        if wanted.contains(&name.as_str()) {
            let mut buf = Vec::new();
            entry.read_to_end(&mut buf).map_err(|e| Error::Data(format!("tar read: {e}")))?;
            out.push((name, buf));
        }
    }
    Ok(out)
}

/// Parse CIFAR-style records: `label_bytes` label bytes then 3072 pixels
/// (channel-major 32x32 RGB).
fn parse_cifar_records(
    bytes: &[u8],
    label_bytes: usize,
    label_index: usize,
    k: usize,
) -> Result<(Array4<f32>, Vec<u8>)> {
    let rec = label_bytes + 3072;
    if bytes.len() % rec != 0 {
        return Err(Error::Data("cifar record size mismatch".into()));
    }
    let n = bytes.len() / rec;
    let mut images = Array4::<f32>::zeros((n, 3, 32, 32));
    let mut labels = Vec::with_capacity(n);
    let im = images.as_slice_mut().unwrap();
    for i in 0..n {
        let r = &bytes[i * rec..(i + 1) * rec];
        let label = r[label_index];
        if label as usize >= k {
            return Err(Error::Data("label out of range".into()));
        }
        labels.push(label);
        for (dst, src) in im[i * 3072..(i + 1) * 3072].iter_mut().zip(&r[label_bytes..]) {
            *dst = *src as f32 / 255.0;
        }
    }
    Ok((images, labels))
}

fn load_cifar10(dir: &Path) -> Result<LoadedDataset> {
    let names = [
        "data_batch_1.bin",
        "data_batch_2.bin",
        "data_batch_3.bin",
        "data_batch_4.bin",
        "data_batch_5.bin",
        "test_batch.bin",
    ];
    let members = tar_gz_members(&dir.join("cifar-10-binary.tar.gz"), &names)?;
    if members.len() != names.len() {
        return Err(Error::Data(format!(
            "cifar-10 archive incomplete: found {} of {} members",
            members.len(),
            names.len()
        )));
    }
    let mut train_parts = Vec::new();
    let mut test_part = None;
    for (name, bytes) in members {
        let parsed = parse_cifar_records(&bytes, 1, 0, 10)?;
        if name == "test_batch.bin" {
            test_part = Some(parsed);
        } else {
            train_parts.push(parsed);
        }
    }
    train_parts.sort_by(|_, _| std::cmp::Ordering::Equal); // order set by names[] iteration
    let (test_images, test_labels) = test_part.unwrap();
    let n: usize = train_parts.iter().map(|(im, _)| im.dim().0).sum();
    let mut images = Array4::<f32>::zeros((n, 3, 32, 32));
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for (im, lb) in train_parts {
        let c = im.dim().0;
        images.slice_mut(ndarray::s![row..row + c, .., .., ..]).assign(&im);
        labels.extend(lb);
        row += c;
    }
    Ok(LoadedDataset {
        id: DatasetId::Cifar10,
        train: DataSplit { images, labels },
        test: DataSplit { images: test_images, labels: test_labels },
    })
}

fn load_cifar100(dir: &Path) -> Result<LoadedDataset> {
    let members = tar_gz_members(&dir.join("cifar-100-binary.tar.gz"), &["train.bin", "test.bin"])?;
    let mut train = None;
    let mut test = None;
    for (name, bytes) in members {
        // two label bytes per record: coarse then fine; we use fine
        let parsed = parse_cifar_records(&bytes, 2, 1, 100)?;
        if name == "train.bin" {
            train = Some(parsed);
        } else {
            test = Some(parsed);
        }
    }
    let (train_images, train_labels) =
        train.ok_or_else(|| Error::Data("cifar-100 archive missing train.bin".into()))?;
    let (test_images, test_labels) =
        test.ok_or_else(|| Error::Data("cifar-100 archive missing test.bin".into()))?;
    Ok(LoadedDataset {
        id: DatasetId::Cifar100,
        train: DataSplit { images: train_images, labels: train_labels },
        test: DataSplit { images: test_images, labels: test_labels },
    })
}

fn load_ppm_resized(path: &Path) -> Result<Vec<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("decode {}: {e}", path.display())))?
        .resize_exact(32, 32, image::imageops::FilterType::Triangle)
        .to_rgb8();
    let mut out = vec![0.0f32; 3 * 32 * 32];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[c * 1024 + (y as usize) * 32 + x as usize] = p.0[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// Ingest a pre-placed extracted GTSRB directory (training images grouped by
/// class directory, test images with a semicolon-separated ground-truth CSV).
fn load_gtsrb(root: &Path) -> Result<LoadedDataset> {
    let train_root = root.join("Final_Training").join("Images");
    let mut train_rows: Vec<(Vec<f32>, u8)> = Vec::new();
    let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(&train_root)
        .map_err(|e| Error::Data(format!("gtsrb: cannot read {}: {e}", train_root.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    for class_dir in class_dirs {
        let class: u8 = class_dir
            .file_name()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<u16>().ok())
            .filter(|c| (*c as usize) < 43)
            .ok_or_else(|| Error::Data(format!("gtsrb: bad class dir {}", class_dir.display())))?
            as u8;
        let mut files: Vec<PathBuf> = std::fs::read_dir(&class_dir)
            .map_err(|e| Error::Data(format!("gtsrb: {e}")))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().and_then(|s| s.to_str()) == Some("ppm"))
            .collect();
        files.sort();
        for f in files {
            train_rows.push((load_ppm_resized(&f)?, class));
        }
    }
    if train_rows.is_empty() {
        return Err(Error::Data("gtsrb: no training images found".into()));
    }

    let test_root = root.join("Final_Test").join("Images");
    let gt = root.join("GT-final_test.csv");
    let mut test_rows: Vec<(Vec<f32>, u8)> = Vec::new();
    let gt_text = std::fs::read_to_string(&gt)
        .map_err(|e| Error::Data(format!("gtsrb: missing {}: {e}", gt.display())))?;
    for line in gt_text.lines().skip(1) {
        let fields: Vec<&str> = line.split(';').collect();
        if fields.len() < 8 {
            continue;
        }
        let fname = fields[0];
        let class: u8 = fields[7]
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("gtsrb: bad class in line '{line}'")))?;
        test_rows.push((load_ppm_resized(&test_root.join(fname))?, class));
    }
    if test_rows.is_empty() {
        return Err(Error::Data("gtsrb: no test images found".into()));
    }

    let pack = |rows: Vec<(Vec<f32>, u8)>| {
        let n = rows.len();
        let mut images = Array4::<f32>::zeros((n, 3, 32, 32));
        let mut labels = Vec::with_capacity(n);
        let im = images.as_slice_mut().unwrap();
        for (i, (pixels, label)) in rows.into_iter().enumerate() {
            im[i * 3072..(i + 1) * 3072].copy_from_slice(&pixels);
            labels.push(label);
        }
        DataSplit { images, labels }
    };

    Ok(LoadedDataset { id: DatasetId::Gtsrb, train: pack(train_rows), test: pack(test_rows) })
}

/// Deterministic train/validation index split driven by the run seed.
pub fn split_indices(n: usize, val_size: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    // domain-separated from the other seed consumers
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x7370_6c69_745f_7631);
    idx.shuffle(&mut rng);
    let val = idx.split_off(n.saturating_sub(val_size.min(n)));
    (idx, val)
}

/// Batch index iterator with a per-epoch deterministic shuffle.
pub fn epoch_batches(indices: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx = indices.to_vec();
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9).wrapping_add(epoch as u64));
    idx.shuffle(&mut rng);
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}
