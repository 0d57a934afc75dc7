//! Part-feature maps and the `.ocwf` binary container.
//!
//! Layout (all little-endian):
//!
//! | offset | size    | field                              |
//! |--------|---------|------------------------------------|
//! | 0      | 4       | magic `OCWF`                       |
//! | 4      | 4       | format version (u32, currently 1) |
//! | 8      | 4       | N, number of parts (u32)           |
//! | 12     | 4       | D, feature width (u32)             |
//! | 16     | 4       | flags (u32): bit 0 = labels present, bit 1 = big-endian (reserved, rejected) |
//! | 20     | 4·N·D   | features, f32 row-major            |
//! | …      | 4·N     | labels, u32 (only when bit 0 set)  |

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const FEATURE_MAGIC: &[u8; 4] = b"OCWF";
pub const FEATURE_VERSION: u32 = 1;
pub const FEATURE_EXTENSION: &str = "ocwf";
const HEADER_LEN: usize = 20;
const FLAG_LABELS: u32 = 1;
const FLAG_BIG_ENDIAN: u32 = 2;

/// N×D part features of one image, with optional per-part ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: Matrix,
    pub labels: Option<Vec<u32>>,
}

impl FeatureMap {
    pub fn new(values: Matrix, labels: Option<Vec<u32>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != values.rows() {
                return Err(Error::shape("FeatureMap", values.shape(), (l.len(), 1)));
            }
        }
        Ok(FeatureMap { values, labels })
    }

    pub fn num_parts(&self) -> usize {
        self.values.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.values.cols()
    }

    /// First eight bytes of the SHA-256 of the encoded file.
    pub fn digest(&self) -> u64 {
        let d = Sha256::digest(self.to_bytes());
        u64::from_be_bytes(d[..8].try_into().expect("8 bytes"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, d) = self.values.shape();
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * n * d + 4 * n);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        let flags = if self.labels.is_some() { FLAG_LABELS } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        for &v in self.values.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        if let Some(labels) = &self.labels {
            for &l in labels {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        if &bytes[0..4] != FEATURE_MAGIC {
            return Err(Error::format("magic", format!("expected OCWF, found {:?}", &bytes[0..4])));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != FEATURE_VERSION {
            return Err(Error::format("version", format!("unsupported version {version}")));
        }
        let (n, d, flags) = (word(8) as usize, word(12) as usize, word(16));
        if flags & FLAG_BIG_ENDIAN != 0 {
            return Err(Error::format("flags", "big-endian payloads are not supported"));
        }
        if flags & !(FLAG_LABELS | FLAG_BIG_ENDIAN) != 0 {
            return Err(Error::format("flags", format!("unknown flag bits {flags:#x}")));
        }
        if n == 0 || d == 0 {
            return Err(Error::format("shape", format!("N={n} D={d}")));
        }
        let has_labels = flags & FLAG_LABELS != 0;
        let expected = HEADER_LEN + 4 * n * d + if has_labels { 4 * n } else { 0 };
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::format(
                "length",
                format!("{} trailing bytes after payload", bytes.len() - expected),
            ));
        }
        let payload = &bytes[HEADER_LEN..HEADER_LEN + 4 * n * d];
        let values: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let values = Matrix::new(n, d, values).map_err(|_| Error::format("features", "non-finite feature value"))?;
        let labels = has_labels.then(|| {
            bytes[HEADER_LEN + 4 * n * d..]
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect()
        });
        Ok(FeatureMap { values, labels })
    }
}

pub fn write_feature_file(path: impl AsRef<Path>, map: &FeatureMap) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, map.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureMap::from_bytes(&bytes)
}

/// Every `.ocwf` file in `dir`, sorted by file name.
pub fn read_feature_dir(dir: impl AsRef<Path>) -> Result<Vec<FeatureMap>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == FEATURE_EXTENSION))
        .collect();
    paths.sort();
    paths.iter().map(read_feature_file).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, SceneConfig};
    use proptest::prelude::*;

    fn scene_map(seed: u64) -> FeatureMap {
        generate_scene(&SceneConfig::default(), seed).unwrap().into_feature_map()
    }

    #[test]
    fn second_write_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ocwf");
        let map = scene_map(1);
        write_feature_file(&path, &map).unwrap();
        let first = fs::read(&path).unwrap();
        let back = read_feature_file(&path).unwrap();
        write_feature_file(&path, &back).unwrap();
        assert_eq!(first, fs::read(&path).unwrap());
        assert_eq!(read_feature_file(&path).unwrap(), back);
        assert_eq!(back.labels, map.labels);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = scene_map(2).to_bytes();
        bytes[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(FeatureMap::from_bytes(&bytes), Err(Error::Format { field: "magic", .. })));
    }

    #[test]
    fn bad_version_is_rejected() {
        let mut bytes = scene_map(2).to_bytes();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(FeatureMap::from_bytes(&bytes), Err(Error::Format { field: "version", .. })));
    }

    #[test]
    fn short_payload_is_truncation() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(FEATURE_MAGIC);
        for w in [FEATURE_VERSION, 4, 8, 0] {
            bytes.extend_from_slice(&w.to_le_bytes());
        }
        bytes.extend(std::iter::repeat_n(0u8, 100));
        match FeatureMap::from_bytes(&bytes) {
            Err(Error::Truncated { expected, found }) => {
                assert_eq!(expected, 20 + 128);
                assert_eq!(found, 120);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn header_fields_are_little_endian() {
        let map = FeatureMap::new(Matrix::filled(2, 3, 1.5), None).unwrap();
        let bytes = map.to_bytes();
        assert_eq!(&bytes[0..4], b"OCWF");
        assert_eq!(&bytes[4..20], &[1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bytes[20..24], &1.5f32.to_le_bytes());
        assert_eq!(bytes.len(), 20 + 24);
    }

    #[test]
    fn big_endian_flag_is_rejected() {
        let mut bytes = scene_map(3).to_bytes();
        bytes[16..20].copy_from_slice(&3u32.to_le_bytes());
        assert!(matches!(FeatureMap::from_bytes(&bytes), Err(Error::Format { field: "flags", .. })));
    }

    proptest! {
        #[test]
        fn round_trip_after_f32_truncation(n in 1usize..10, d in 1usize..10, seed in 0u64..1000, labeled: bool) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let values = Matrix::random_normal(n, d, 3.0, &mut rng);
            let labels = labeled.then(|| (0..n as u32).collect());
            let map = FeatureMap::new(values, labels).unwrap();
            let once = FeatureMap::from_bytes(&map.to_bytes()).unwrap();
            let bytes = once.to_bytes();
            prop_assert_eq!(&bytes, &map.to_bytes());
            prop_assert_eq!(FeatureMap::from_bytes(&bytes).unwrap(), once);
        }
    }
}
