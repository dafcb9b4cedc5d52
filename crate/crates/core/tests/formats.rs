// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary and JSON formats: round-trips, alignment and error paths.

use std::fs;
use std::path::Path;

use featrace_core::crosscoder::{load_checkpoint, save_checkpoint};
use featrace_core::error::Error;
use featrace_core::store::{
    compute_norm_scalar, read_activation_batches, read_activation_shard, read_all, read_token_shard,
    write_activation_shard, write_token_shard, SnapshotEntry, TokenShard,
};
use featrace_core::{CrosscoderModel, SnapshotManifest};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bits(a: &Array2<f32>) -> Vec<u32> {
    a.iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn activation_shard_round_trip_is_bit_exact(
        rows in 0usize..20,
        cols in 1usize..12,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Array2::from_shape_fn((rows, cols), |_| {
            // Raw bit patterns cover subnormals and signed zeros.
            loop {
                let v = f32::from_bits(rng.random());
                if v.is_finite() {
                    break v;
                }
            }
        });
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.acts");
        write_activation_shard(&p, m.view()).unwrap();
        prop_assert_eq!(fs::metadata(&p).unwrap().len(), 24 + 4 * (rows * cols) as u64);
        let back = read_activation_shard(&p).unwrap();
        prop_assert_eq!(back.dim(), m.dim());
        prop_assert_eq!(bits(&back), bits(&m));
    }

    #[test]
    fn token_shard_round_trip(
        seqs in prop::collection::vec(prop::collection::vec(any::<u32>(), 1..30), 0..10),
    ) {
        let shard = TokenShard::from_sequences(seqs.clone());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.toks");
        write_token_shard(&p, &shard).unwrap();
        let back = read_token_shard(&p).unwrap();
        prop_assert_eq!(&back, &shard);
        let got: Vec<Vec<u32>> = back.sequences().map(<[u32]>::to_vec).collect();
        prop_assert_eq!(got, seqs);
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model = CrosscoderModel::<f32>::random_init(24, 7, vec![0, 10, 1000], 0.3, &mut rng);
    for (_, block) in model.blocks_mut() {
        block.iter_mut().for_each(|v| *v = f32::from_bits(rng.random::<u32>() & 0xbfff_ffff));
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.xcck");
    save_checkpoint(&p, &model).unwrap();
    let mut back = load_checkpoint(&p).unwrap();
    assert_eq!(back.steps, model.steps);
    for ((ka, a), (kb, b)) in back.blocks_mut().into_iter().zip(model.blocks_mut()) {
        assert_eq!(ka, kb);
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let bytes = fs::read(&p).unwrap();
    assert_eq!(&bytes[..4], b"XCCK");
    fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_checkpoint(&p).is_err());
}

/// Two snapshots, three shards each; every value encodes its own row index
/// and snapshot so alignment can be read back from the data.
fn tagged_dataset(dir: &Path, shard_rows: &[usize], d: usize) -> SnapshotManifest {
    let mut entries = Vec::new();
    for (t, step) in [3u64, 30].into_iter().enumerate() {
        let mut paths = Vec::new();
        let mut row = 0usize;
        for (s, &n) in shard_rows.iter().enumerate() {
            let m = Array2::from_shape_fn((n, d), |(r, j)| ((row + r) * 10 + t) as f32 + j as f32 / 100.0);
            let name = format!("s{t}_{s}.acts");
            write_activation_shard(dir.join(&name), m.view()).unwrap();
            paths.push(name.into());
            row += n;
        }
        entries.push(SnapshotEntry {
            step,
            activation_shard_paths: paths,
            norm_scalar: 1.0,
        });
    }
    let m = SnapshotManifest::new(d, entries);
    let p = dir.join("manifest.json");
    m.save(&p).unwrap();
    SnapshotManifest::load(&p).unwrap()
}

#[test]
fn batches_are_aligned_and_cover_every_row_once() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tagged_dataset(dir.path(), &[37, 1, 62], 3);
    let stream = read_activation_batches(&manifest, &[0, 1], 8).unwrap();
    assert_eq!(stream.total_rows(), 100);
    let mut next = 0u64;
    for b in stream {
        let b = b.unwrap();
        assert_eq!(b.start_row, next);
        for r in 0..b.n_rows() {
            let row = next as usize + r;
            assert_eq!(b.snapshots[0][[r, 0]], (row * 10) as f32);
            assert_eq!(b.snapshots[1][[r, 0]], (row * 10 + 1) as f32);
        }
        next += b.n_rows() as u64;
    }
    assert_eq!(next, 100);
}

#[test]
fn partition_sizes_and_norm_scalar() {
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = tagged_dataset(dir.path(), &[10], 2);
    let sizes: Vec<usize> = read_activation_batches(&manifest, &[0], 4)
        .unwrap()
        .map(|b| b.unwrap().n_rows())
        .collect();
    assert_eq!(sizes, vec![4, 4, 2]);
    let plain = read_all(&manifest, &[1]).unwrap();
    manifest.snapshots[1].norm_scalar = 2.0;
    let doubled = read_all(&manifest, &[1]).unwrap();
    assert_eq!(doubled.snapshots[0], &plain.snapshots[0] * 2.0);
}

#[test]
fn misaligned_shards_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tagged_dataset(dir.path(), &[5, 5], 2);
    let short = Array2::<f32>::zeros((4, 2));
    write_activation_shard(dir.path().join("s1_1.acts"), short.view()).unwrap();
    let err = read_activation_batches(&manifest, &[0, 1], 4).unwrap_err();
    assert!(matches!(err, Error::Alignment(_)), "{err:?}");
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tagged_dataset(dir.path(), &[4, 4], 2);
    let p = dir.path().join("again.json");
    manifest.save(&p).unwrap();
    let back = SnapshotManifest::load(&p).unwrap();
    assert_eq!(back, manifest);
    assert_eq!(fs::read(&p).unwrap(), fs::read(dir.path().join("manifest.json")).unwrap());
}

#[test]
fn norm_scalar_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dist = rand_distr::StandardNormal;
    let m = Array2::<f32>::from_shape_fn((1000, 64), |_| rng.sample::<f32, _>(dist));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.acts");
    write_activation_shard(&p, m.view()).unwrap();
    let mean: f64 = m
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / 1000.0;
    let s = compute_norm_scalar(&[p], 64).unwrap();
    assert!((s - 8.0 / mean).abs() < 1e-6);

    let zero = dir.path().join("z.acts");
    write_activation_shard(&zero, Array2::<f32>::zeros((3, 4)).view()).unwrap();
    assert!(compute_norm_scalar(&[zero], 4).is_err());
}
