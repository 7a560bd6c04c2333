mod common;

use std::path::{Path, PathBuf};

use common::rng;
use dcnfis::data::{self, load_idx, IdxError, Transform, IMAGE_MAGIC, LABEL_MAGIC};
use dcnfis::{Checkpoint, Dataset, Dcnfis, Split, Tensor};
use proptest::prelude::*;

fn data_root() -> PathBuf {
    std::env::var_os("DCNFIS_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend(d.to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

fn write_pair(dir: &Path, images: &[u8], labels: &[u8]) -> (PathBuf, PathBuf) {
    let (i, l) = (dir.join("images"), dir.join("labels"));
    std::fs::write(&i, images).unwrap();
    std::fs::write(&l, labels).unwrap();
    (i, l)
}

#[test]
fn real_mnist_files_parse() {
    let dir = data_root().join("mnist");
    if !dir.is_dir() {
        eprintln!("skipping: {} not present", dir.display());
        return;
    }
    let raw = std::fs::read(dir.join("train-images-idx3-ubyte")).unwrap();
    assert_eq!(u32::from_be_bytes(raw[..4].try_into().unwrap()), IMAGE_MAGIC);
    let raw = std::fs::read(dir.join("train-labels-idx1-ubyte")).unwrap();
    assert_eq!(u32::from_be_bytes(raw[..4].try_into().unwrap()), LABEL_MAGIC);

    let ds = Dataset::load_dir(&dir).unwrap();
    assert_eq!((ds.train.len(), ds.test.len()), (60000, 10000));
    assert_eq!((ds.train.rows, ds.train.cols), (28, 28));
    let hist = ds.histogram();
    assert_eq!(hist.len(), 10);
    assert_eq!(hist.iter().sum::<usize>(), 60000);
    assert!(ds.train.images.iter().all(|p| (0.0..=1.0).contains(p)));
}

#[test]
fn gzip_and_raw_files_load_identically() {
    use flate2::{write::GzEncoder, Compression};
    use std::io::Write;
    let tmp = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = (0..2 * 3 * 3).map(|v| (v * 13) as u8).collect();
    let images = idx_bytes(IMAGE_MAGIC, &[2, 3, 3], &pixels);
    let labels = idx_bytes(LABEL_MAGIC, &[2], &[4, 7]);
    let (i, l) = write_pair(tmp.path(), &images, &labels);
    let plain = load_idx(&i, &l).unwrap();
    let gz = tmp.path().join("images.gz");
    let mut enc = GzEncoder::new(Vec::new(), Compression::default());
    enc.write_all(&images).unwrap();
    std::fs::write(&gz, enc.finish().unwrap()).unwrap();
    assert_eq!(load_idx(&gz, &l).unwrap(), plain);
    assert_eq!(plain.labels, vec![4, 7]);
    assert_eq!(plain.image(1)[0], 117.0 / 255.0);
}

#[test]
fn corrupt_idx_files_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let good_images = idx_bytes(IMAGE_MAGIC, &[2, 2, 2], &[0; 8]);
    let good_labels = idx_bytes(LABEL_MAGIC, &[2], &[0, 1]);

    let (i, l) = write_pair(tmp.path(), &idx_bytes(0x0000_0804, &[2, 2, 2], &[0; 8]), &good_labels);
    assert!(matches!(load_idx(&i, &l), Err(IdxError::BadMagic { .. })));

    let (i, l) = write_pair(tmp.path(), &good_images[..good_images.len() - 1], &good_labels);
    assert!(matches!(load_idx(&i, &l), Err(IdxError::Truncated { .. })));

    let (i, l) = write_pair(tmp.path(), &good_images, &idx_bytes(LABEL_MAGIC, &[3], &[0, 1, 2]));
    assert!(matches!(load_idx(&i, &l), Err(IdxError::CountMismatch { images: 2, labels: 3 })));

    let missing = tmp.path().join("nope");
    assert!(matches!(load_idx(&missing, &l), Err(IdxError::Missing(_))));
    assert!(matches!(Dataset::load_dir(&missing), Err(IdxError::Missing(_))));
}

fn ramp_split(n: usize) -> Split {
    Split {
        images: (0..n * 16).map(|v| (v % 17) as f32 / 17.0).collect(),
        labels: (0..n).map(|i| (i % 2) as u8).collect(),
        rows: 4,
        cols: 4,
    }
}

#[test]
fn mean_subtraction_centres_training_pixels() {
    let ds = Dataset::from_splits(ramp_split(10), ramp_split(4)).unwrap();
    let centred = data::apply_mean_subtraction(ds.clone(), true).unwrap();
    let mean = centred.mean.clone().unwrap();
    assert_eq!(mean, data::mean_image(&ds.train).unwrap());
    for p in 0..16 {
        let avg: f64 = (0..10).map(|s| centred.train.image(s)[p] as f64).sum::<f64>() / 10.0;
        assert!(avg.abs() < 1e-6);
    }
    assert_eq!(data::apply_mean_subtraction(ds.clone(), false).unwrap(), ds);
}

proptest! {
    #[test]
    fn transforms_move_pixels_without_changing_values(
        dx in -2i32..=2, dy in -2i32..=2, flip in any::<bool>(),
        img in prop::collection::vec(0.1f32..1.0, 36),
    ) {
        let mut out = vec![0.0; 36];
        Transform { dx, dy, flip }.apply(&img, 6, 6, &mut out);
        for r in 0..6i32 {
            for c in 0..6i32 {
                let (sr, sc) = (r - dy, c - dx);
                let expect = if (0..6).contains(&sr) && (0..6).contains(&sc) {
                    let sc = if flip { 5 - sc } else { sc };
                    img[(sr * 6 + sc) as usize]
                } else {
                    0.0
                };
                prop_assert_eq!(out[(r * 6 + c) as usize], expect);
            }
        }
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), classes in 2usize..6, with_mean in any::<bool>(), epoch in any::<u32>()) {
        let cfg = "1x6x6: conv(3,3,1,0) > bn > relu > residual[conv(3,3,1,1)] > maxpool(2,2) > flatten".parse().unwrap();
        let model = Dcnfis::new(cfg, classes, seed).unwrap();
        let mean = with_mean.then(|| (0..36).map(|v| v as f32 / 36.0).collect());
        let ckpt = Checkpoint { model, mean, seed, epoch };
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        prop_assert_eq!(back, ckpt);
    }
}

#[test]
fn augmentation_is_seeded() {
    let split = ramp_split(8);
    let idx: Vec<usize> = (0..8).collect();
    let run = |seed| {
        let mut b: Tensor = split.batch(&idx).unwrap();
        data::augment(&mut b, &mut rng(seed)).unwrap();
        b
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}
