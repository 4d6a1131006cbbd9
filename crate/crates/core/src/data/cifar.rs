use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;
const RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Raw 8-bit images `[N, 3, S, S]` with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub side: usize,
    pub num_classes: usize,
    images: Vec<u8>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        split: Split,
        side: usize,
        num_classes: usize,
        images: Vec<u8>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        let per = 3 * side * side;
        if side == 0 || images.len() != labels.len() * per {
            return Err(Error::Validation(format!(
                "{} image bytes do not match {} labels of {per} bytes",
                images.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Validation(format!("label {bad} >= {num_classes} classes")));
        }
        Ok(Dataset {
            name: name.into(),
            split,
            side,
            num_classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_bytes(&self) -> usize {
        3 * self.side * self.side
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_bytes();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.image_bytes());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            name: self.name.clone(),
            split: self.split,
            side: self.side,
            num_classes: self.num_classes,
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// The first `k` samples of every class, in file order.
    pub fn first_per_class(&self, k: usize) -> Dataset {
        let mut seen = vec![0usize; self.num_classes];
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let c = &mut seen[self.label(i)];
                *c += 1;
                *c <= k
            })
            .collect();
        let mut out = self.select(&keep);
        out.name = format!("{}-first{k}", self.name);
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut n = vec![0; self.num_classes];
        for &l in &self.labels {
            n[l as usize] += 1;
        }
        n
    }
}

/// Reads one CIFAR-10 binary batch file: records of one label byte followed
/// by 1024 red, 1024 green and 1024 blue bytes, each plane row-major.
pub fn read_batch_file(path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFile { path: path.to_path_buf() })
        }
        Err(e) => return Err(e.into()),
    };
    let n = bytes.len() / RECORD;
    if bytes.len() % RECORD != 0 {
        return Err(Error::TruncatedRecord {
            path: path.to_path_buf(),
            offset: (n * RECORD) as u64,
        });
    }
    let mut labels = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n * (RECORD - 1));
    for (i, rec) in bytes.chunks_exact(RECORD).enumerate() {
        if rec[0] as usize >= CIFAR_CLASSES {
            return Err(Error::BadLabel {
                path: path.to_path_buf(),
                offset: (i * RECORD) as u64,
                label: rec[0],
            });
        }
        labels.push(rec[0]);
        images.extend_from_slice(&rec[1..]);
    }
    Ok((images, labels))
}

fn split_files(split: Split) -> Vec<String> {
    match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".to_string()],
    }
}

/// Loads a split from `dir`, also accepting the `cifar-10-batches-bin`
/// subdirectory the official archive unpacks to.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let nested = dir.join("cifar-10-batches-bin");
    let root: PathBuf = if nested.is_dir() { nested } else { dir.to_path_buf() };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in split_files(split) {
        let (im, lb) = read_batch_file(&root.join(f))?;
        images.extend(im);
        labels.extend(lb);
    }
    Dataset::new("cifar10", split, CIFAR_SIDE, CIFAR_CLASSES, images, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..3072).map(fill));
        r
    }

    #[test]
    fn single_record_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.bin");
        fs::write(&p, record(3, |i| (i % 251) as u8)).unwrap();
        let (im, lb) = read_batch_file(&p).unwrap();
        assert_eq!(lb, vec![3]);
        assert_eq!(im.len(), 3072);
    }

    #[test]
    fn pixel_layout_matches_byte_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for i in 0..3u8 {
            // a position-unique pattern per record
            bytes.extend(record(i, |k| ((k * 7 + i as usize * 13) % 256) as u8));
        }
        let p = dir.path().join("b.bin");
        fs::write(&p, &bytes).unwrap();
        let (im, lb) = read_batch_file(&p).unwrap();
        let ds = Dataset::new("t", Split::Test, 32, 10, im, lb).unwrap();
        for i in 0..3 {
            for ch in 0..3 {
                for r in 0..32 {
                    for c in 0..32 {
                        let want = bytes[i * 3073 + 1 + ch * 1024 + r * 32 + c];
                        assert_eq!(ds.image(i)[(ch * 32 + r) * 32 + c], want);
                    }
                }
            }
        }
    }

    #[test]
    fn distinct_load_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_cifar10(dir.path(), Split::Test), Err(Error::MissingFile { .. })));

        let p = dir.path().join("test_batch.bin");
        let mut bytes = record(1, |_| 0);
        bytes.extend(record(2, |_| 0));
        bytes.truncate(3073 + 100);
        fs::write(&p, &bytes).unwrap();
        match load_cifar10(dir.path(), Split::Test) {
            Err(Error::TruncatedRecord { offset, .. }) => assert_eq!(offset, 3073),
            other => panic!("{other:?}"),
        }

        let mut bytes = record(1, |_| 0);
        bytes.extend(record(11, |_| 0));
        fs::write(&p, &bytes).unwrap();
        match load_cifar10(dir.path(), Split::Test) {
            Err(Error::BadLabel { offset, label, .. }) => assert_eq!((offset, label), (3073, 11)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn first_per_class_is_deterministic_prefix() {
        let labels: Vec<u8> = (0..40).map(|i| (i * 7 % 10) as u8).collect();
        let ds = Dataset::new("t", Split::Train, 2, 10, vec![0; 40 * 12], labels).unwrap();
        let sub = ds.first_per_class(2);
        assert_eq!(sub.class_counts(), vec![2; 10]);
        assert_eq!(sub.labels(), &ds.labels()[..20]);
    }
}
