//! CIFAR-10 binary batches: records of 1 label byte followed by 3072 pixel
//! bytes (R, G, B planes of 32×32, row-major).

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR10_RECORD_BYTES: usize = 3073;
const SIDE: usize = 32;
const PIXELS: usize = 3 * SIDE * SIDE;

/// Decodes one in-memory batch; `base_offset` is reported in errors.
pub fn parse_cifar10_records(bytes: &[u8], base_offset: u64) -> Result<(Vec<f32>, Vec<usize>)> {
    let whole = bytes.len() / CIFAR10_RECORD_BYTES;
    if bytes.len() % CIFAR10_RECORD_BYTES != 0 {
        return Err(Error::Format {
            offset: base_offset + (whole * CIFAR10_RECORD_BYTES) as u64,
            message: format!(
                "truncated record: {} trailing bytes, records are {CIFAR10_RECORD_BYTES} bytes",
                bytes.len() % CIFAR10_RECORD_BYTES
            ),
        });
    }
    let mut pixels = Vec::with_capacity(whole * PIXELS);
    let mut labels = Vec::with_capacity(whole);
    for (r, rec) in bytes.chunks_exact(CIFAR10_RECORD_BYTES).enumerate() {
        let label = rec[0];
        if label >= 10 {
            return Err(Error::Format {
                offset: base_offset + (r * CIFAR10_RECORD_BYTES) as u64,
                message: format!("label byte {label} is not a CIFAR-10 class"),
            });
        }
        labels.push(label as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

pub fn ingest_cifar10_binary<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (p, l) = parse_cifar10_records(&bytes, 0).map_err(|e| match e {
            Error::Format { offset, message } => Error::Format {
                offset,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })?;
        pixels.extend(p);
        labels.extend(l);
    }
    let n = labels.len();
    Dataset::new(Tensor::from_vec(&[n, 3, SIDE, SIDE], pixels), labels, 10)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..PIXELS).map(fill));
        r
    }

    #[test]
    fn two_hand_built_records() {
        let mut bytes = record(3, |i| (i % 256) as u8);
        bytes.extend(record(9, |i| if i < 1024 { 255 } else { 0 }));
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(&bytes).unwrap();
        let ds = ingest_cifar10_binary(&[f.path()]).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.images().shape(), &[2, 3, 32, 32]);
        assert_eq!(ds.labels(), &[3, 9]);
        let img = ds.images().data();
        // Red plane first, row-major: pixel (row 0, col 5) of the red plane.
        assert_eq!(img[5], 5.0 / 255.0);
        // Green plane of record 0 starts at byte 1024.
        assert_eq!(img[1024], (1024 % 256) as f32 / 255.0);
        // Record 1: red plane saturated, green and blue empty.
        assert_eq!(img[PIXELS], 1.0);
        assert_eq!(img[PIXELS + 1024], 0.0);
    }

    #[test]
    fn empty_file_gives_empty_dataset() {
        let f = tempfile::NamedTempFile::new().unwrap();
        let ds = ingest_cifar10_binary(&[f.path()]).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.images().shape(), &[0, 3, 32, 32]);
    }

    #[test]
    fn truncated_and_bad_label_records() {
        match parse_cifar10_records(&vec![0u8; 3072], 0) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let mut bytes = record(1, |_| 0);
        bytes.extend(vec![0u8; 10]);
        match parse_cifar10_records(&bytes, 0) {
            Err(Error::Format { offset: 3073, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let mut bytes = record(1, |_| 0);
        bytes.extend(record(10, |_| 0));
        match parse_cifar10_records(&bytes, 0) {
            Err(Error::Format { offset: 3073, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn random_record_counts_satisfy_dataset_invariants(
            labels in proptest::collection::vec(0u8..10, 0..6),
            px in any::<u8>(),
        ) {
            let bytes: Vec<u8> = labels.iter().flat_map(|&l| record(l, |i| px.wrapping_add(i as u8))).collect();
            let (pixels, parsed) = parse_cifar10_records(&bytes, 0).unwrap();
            let ds = Dataset::new(Tensor::from_vec(&[parsed.len(), 3, 32, 32], pixels), parsed, 10).unwrap();
            prop_assert_eq!(ds.len(), labels.len());
            prop_assert!(ds.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
            let expect: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
            prop_assert_eq!(ds.labels(), expect.as_slice());
        }
    }
}
