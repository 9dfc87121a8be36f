//! Synthetic datasets, the IDX reader, and the binary dataset container.

use std::f64::consts::PI;
use std::io::{Read, Write};

use byteorder::{BigEndian, LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::mlp::CountingReader;
use crate::noise::LabeledDataset;
use crate::rng::RngStream;

/// `k` isotropic unit-variance Gaussian clusters in `d` dimensions whose
/// centers are at least `cluster_sep` apart. Labels cycle `0, 1, .., k-1`
/// so class counts differ by at most one.
///
/// With `d >= k` the centers sit on distinct, randomly chosen coordinate
/// axes at distance `cluster_sep/√2` from the origin, which makes every
/// pair exactly `cluster_sep` apart. Otherwise centers are rejection
/// sampled in a cube.
pub fn make_blobs(
    k: usize,
    d: usize,
    n: usize,
    cluster_sep: f64,
    rng: &mut RngStream,
) -> Result<LabeledDataset> {
    if k < 2 || d < 2 || n < k {
        return Err(Error::Parameter(format!(
            "make_blobs needs k >= 2, d >= 2, n >= k (got k={k}, d={d}, n={n})"
        )));
    }
    if !(cluster_sep >= 0.0 && cluster_sep.is_finite()) {
        return Err(Error::Parameter(format!("invalid cluster_sep {cluster_sep}")));
    }
    let centers = if d >= k {
        let mut axes: Vec<usize> = (0..d).collect();
        rng.shuffle(&mut axes);
        let mut c = Matrix::zeros(k, d);
        for (i, &axis) in axes.iter().take(k).enumerate() {
            c[(i, axis)] = cluster_sep / 2f64.sqrt();
        }
        c
    } else {
        sample_separated_centers(k, d, cluster_sep, rng)?
    };
    let mut features = Matrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % k;
        for (v, &c) in features.row_mut(i).iter_mut().zip(centers.row(y)) {
            *v = c + rng.normal();
        }
        labels.push(y);
    }
    LabeledDataset::new(features, labels, k)
}

fn sample_separated_centers(k: usize, d: usize, sep: f64, rng: &mut RngStream) -> Result<Matrix> {
    let side = 2.0 * sep * (k as f64).powf(1.0 / d as f64);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut attempts = 0;
    while centers.len() < k {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::Generation(format!(
                "could not place {k} centers {sep} apart in {d} dimensions"
            )));
        }
        let c: Vec<f64> = (0..d).map(|_| side * rng.uniform()).collect();
        if centers
            .iter()
            .all(|o| crate::matrix::sq_dist(o, &c) >= sep * sep)
        {
            centers.push(c);
        }
    }
    Ok(Matrix::from_rows(&centers))
}

/// Two interleaved half circles in the plane, `n/2` points each. The upper
/// moon is the unit half circle around the origin (class 0); the lower one
/// is the unit half circle around `(1, 0.5)` opening upward (class 1).
pub fn make_two_moons(n: usize, noise_sd: f64, rng: &mut RngStream) -> Result<LabeledDataset> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::Parameter(format!("n must be even and positive, got {n}")));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::Parameter(format!("invalid noise_sd {noise_sd}")));
    }
    let half = n / 2;
    let mut features = Matrix::zeros(n, 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let (class, j) = (i % 2, i / 2);
        let t = if half > 1 {
            PI * j as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let (x, y) = if class == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        features[(i, 0)] = x + noise_sd * rng.normal();
        features[(i, 1)] = y + noise_sd * rng.normal();
        labels.push(class);
    }
    LabeledDataset::new(features, labels, 2)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Reads an IDX image/label pair (the MNIST layout). Pixels are scaled to
/// `[0, 1]` and flattened row-major.
pub fn load_idx<R1: Read, R2: Read>(images: R1, labels: R2) -> Result<LabeledDataset> {
    let mut img = CountingReader {
        inner: images,
        offset: 0,
    };
    let magic = img.read_u32::<BigEndian>().map_err(|e| img.format(e))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = img.read_u32::<BigEndian>().map_err(|e| img.format(e))? as usize;
    let rows = img.read_u32::<BigEndian>().map_err(|e| img.format(e))? as usize;
    let cols = img.read_u32::<BigEndian>().map_err(|e| img.format(e))? as usize;
    let d = rows * cols;
    let mut pixels = vec![0u8; n * d];
    img.read_exact(&mut pixels).map_err(|e| Error::Format {
        offset: 16,
        msg: format!("image payload truncated: {e}"),
    })?;

    let mut lab = CountingReader {
        inner: labels,
        offset: 0,
    };
    let magic = lab.read_u32::<BigEndian>().map_err(|e| lab.format(e))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n_labels = lab.read_u32::<BigEndian>().map_err(|e| lab.format(e))? as usize;
    if n_labels != n {
        return Err(Error::Format {
            offset: 4,
            msg: format!("label count {n_labels} does not match image count {n}"),
        });
    }
    let mut raw = vec![0u8; n];
    lab.read_exact(&mut raw).map_err(|e| Error::Format {
        offset: 8,
        msg: format!("label payload truncated: {e}"),
    })?;
    let features = Matrix::from_vec(n, d, pixels.iter().map(|&p| p as f64 / 255.0).collect())?;
    let labels: Vec<usize> = raw.iter().map(|&l| l as usize).collect();
    let k = labels.iter().copied().max().map_or(2, |m| (m + 1).max(2));
    LabeledDataset::new(features, labels, k)
}

const DATASET_MAGIC: &[u8; 4] = b"NRDS";
const DATASET_VERSION: u32 = 1;

/// Little-endian container: magic `NRDS`, version `u32`, then `N`, `D`, `K`
/// as `u64`, a `u8` noisy-label flag, `N·D` features as `f64` row-major,
/// `N` clean labels as `u32`, and `N` noisy labels as `u32` if flagged.
pub fn write_dataset<W: Write>(ds: &LabeledDataset, mut w: W) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_u32::<LittleEndian>(DATASET_VERSION)?;
    w.write_u64::<LittleEndian>(ds.len() as u64)?;
    w.write_u64::<LittleEndian>(ds.dim() as u64)?;
    w.write_u64::<LittleEndian>(ds.num_classes as u64)?;
    w.write_u8(ds.noisy_labels.is_some() as u8)?;
    for &v in ds.features.as_slice() {
        w.write_f64::<LittleEndian>(v)?;
    }
    for &y in &ds.clean_labels {
        w.write_u32::<LittleEndian>(y as u32)?;
    }
    if let Some(noisy) = &ds.noisy_labels {
        for &y in noisy {
            w.write_u32::<LittleEndian>(y as u32)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(r: R) -> Result<LabeledDataset> {
    let mut r = CountingReader { inner: r, offset: 0 };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| r.format(e))?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad dataset magic".into(),
        });
    }
    let version = r.read_u32::<LittleEndian>().map_err(|e| r.format(e))?;
    if version != DATASET_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported dataset version {version}"),
        });
    }
    let n = r.read_u64::<LittleEndian>().map_err(|e| r.format(e))? as usize;
    let d = r.read_u64::<LittleEndian>().map_err(|e| r.format(e))? as usize;
    let k = r.read_u64::<LittleEndian>().map_err(|e| r.format(e))? as usize;
    let flag_offset = r.offset;
    let has_noisy = match r.read_u8().map_err(|e| r.format(e))? {
        0 => false,
        1 => true,
        other => {
            return Err(Error::Format {
                offset: flag_offset,
                msg: format!("bad noisy-label flag {other}"),
            })
        }
    };
    let mut features = vec![0.0; n.checked_mul(d).ok_or_else(|| Error::Format {
        offset: 8,
        msg: "N·D overflows".into(),
    })?];
    for v in &mut features {
        *v = r.read_f64::<LittleEndian>().map_err(|e| r.format(e))?;
    }
    let read_labels = |r: &mut CountingReader<R>| -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(r.read_u32::<LittleEndian>().map_err(|e| r.format(e))? as usize);
        }
        Ok(out)
    };
    let clean = read_labels(&mut r)?;
    let noisy = if has_noisy {
        Some(read_labels(&mut r)?)
    } else {
        None
    };
    let mut ds = LabeledDataset::new(Matrix::from_vec(n, d, features)?, clean, k)?;
    if let Some(noisy) = noisy {
        if let Some((index, &label)) = noisy.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(Error::Label {
                index,
                label,
                classes: k,
            });
        }
        ds.noisy_labels = Some(noisy);
    }
    Ok(ds)
}

/// Stratified split by clean class. Returns `(train_idx, test_idx)`, each
/// sorted ascending.
pub fn stratified_split(
    clean_labels: &[usize],
    num_classes: usize,
    test_fraction: f64,
    rng: &mut RngStream,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Parameter(format!(
            "test fraction must be in [0, 1), got {test_fraction}"
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..num_classes {
        let mut idx: Vec<usize> = (0..clean_labels.len())
            .filter(|&i| clean_labels[i] == c)
            .collect();
        rng.shuffle(&mut idx);
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}
