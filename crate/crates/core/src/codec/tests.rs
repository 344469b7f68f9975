use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{render_scene, SyntheticSceneSpec};
use crate::tensor::{read_checkpoint, write_checkpoint};

fn latent(seed: u64, scale: f32) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[1, 4, 16, 16], |_| rng.random_range(-1.0f32..1.0) * scale)
}

fn scene_map(index: usize) -> MapRaster {
    let spec = SyntheticSceneSpec {
        width: 64,
        height: 64,
        ..SyntheticSceneSpec::default()
    };
    render_scene(&spec, index).unwrap().1
}

fn model(use_map: bool, seed: u64) -> LcmModel {
    let mut cfg = LcmConfig::desk();
    cfg.transform.use_map = use_map;
    LcmModel::init(&cfg, seed).unwrap()
}

#[test]
fn round_trip_is_bit_exact() {
    let m = model(true, 1);
    let map = scene_map(0);
    let z = latent(2, 3.0);
    let c = compress(&m, &z, Some(&map), 64, 64).unwrap();
    assert_eq!(c.symbols.slices.len(), 2);
    assert_eq!(c.symbols.hyper.len(), 8);
    let d = decompress_bytes(&m, &c.bytes, Some(&map)).unwrap();
    assert_eq!(d.symbols, c.symbols);
    assert_eq!(d.z_hat.shape(), &[1, 4, 16, 16]);
    assert!(d.z_hat.data().iter().zip(c.z_hat.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(d.header, c.container.header);
    assert!(d.header.map_conditioned());
}

#[test]
fn bpp_counts_the_whole_file() {
    let m = model(true, 1);
    let c = compress(&m, &latent(3, 2.0), Some(&scene_map(1)), 64, 64).unwrap();
    let r = &c.report;
    assert_eq!(r.file_bytes, c.bytes.len());
    assert_eq!(r.bpp, 8.0 * c.bytes.len() as f64 / 4096.0);
    assert_eq!(r.sections.total(), c.bytes.len());
    assert_eq!(r.header_bits() + r.actual_bits(), 8.0 * c.bytes.len() as f64);
    assert!(r.bpp > 0.0 && r.estimated_bits() > 0.0);
}

#[test]
fn compression_is_deterministic() {
    let m = model(true, 4);
    let map = scene_map(2);
    let z = latent(5, 4.0);
    let a = compress(&m, &z, Some(&map), 64, 64).unwrap();
    let b = compress(&model(true, 4), &z, Some(&map), 64, 64).unwrap();
    assert_eq!(a.bytes, b.bytes);
}

#[test]
fn refuses_other_weights() {
    let m = model(true, 1);
    let map = scene_map(0);
    let c = compress(&m, &latent(1, 1.0), Some(&map), 64, 64).unwrap();
    let err = decompress_bytes(&model(true, 2), &c.bytes, Some(&map)).unwrap_err();
    assert!(matches!(err.root(), Error::ModelMismatch(_)), "{err}");
}

#[test]
fn checksum_and_version_are_enforced() {
    let m = model(true, 1);
    let map = scene_map(0);
    let c = compress(&m, &latent(1, 1.0), Some(&map), 64, 64).unwrap();
    let mut bad = c.bytes.clone();
    let last = bad.len() - 1;
    bad[last] ^= 0x40;
    assert!(matches!(decompress_bytes(&m, &bad, Some(&map)).unwrap_err().root(), Error::Format(_)));
    let mut v2 = c.bytes.clone();
    v2[4] = 2;
    let err = decompress_bytes(&m, &v2, Some(&map)).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");
}

#[test]
fn map_is_conditioning_not_content() {
    let m = model(true, 1);
    let z = latent(6, 3.0);
    let c = compress(&m, &z, Some(&scene_map(0)), 64, 64).unwrap();
    let other = decompress_bytes(&m, &c.bytes, Some(&scene_map(7))).unwrap();
    assert!(other.z_hat.max_abs_diff(&c.z_hat) > 1e-4);
    let small = MapRaster::uniform(32, 32, 0, 4).unwrap();
    assert!(decompress_bytes(&m, &c.bytes, Some(&small)).is_err());
    assert!(decompress_bytes(&m, &c.bytes, None).is_err());
}

#[test]
fn corrupting_a_slice_leaves_earlier_sections_intact() {
    let m = model(true, 1);
    let map = scene_map(3);
    let c = compress(&m, &latent(8, 4.0), Some(&map), 64, 64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..10 {
        let mut damaged = c.container.clone();
        let s = &mut damaged.slices[1];
        let pos = rng.random_range(0..s.len());
        s[pos] ^= rng.random_range(1..=255u8);
        let (partial, _) = decode_partial(&m, &damaged, Some(&map)).unwrap();
        assert_eq!(partial.symbols.hyper, c.symbols.hyper);
        assert_eq!(partial.symbols.slices[0], c.symbols.slices[0]);
    }
}

#[test]
fn unconditioned_variant_uses_flag_and_is_not_interchangeable() {
    let plain = model(false, 1);
    assert!(!plain.store.iter().any(|(_, n, _)| n.starts_with("se.")));
    let z = latent(9, 2.0);
    let c = compress(&plain, &z, None, 64, 64).unwrap();
    assert_eq!(c.container.header.flags & FLAG_MAP, 0);
    let d = decompress_bytes(&plain, &c.bytes, None).unwrap();
    assert_eq!(d.symbols, c.symbols);
    let with_map = model(true, 1);
    let err = decompress_bytes(&with_map, &c.bytes, Some(&scene_map(0))).unwrap_err();
    assert!(matches!(err.root(), Error::ModelMismatch(_)));
}

#[test]
fn oversized_latents_fail_cleanly() {
    let m = model(true, 1);
    let err = compress(&m, &latent(10, 1e9), Some(&scene_map(0)), 64, 64).unwrap_err();
    assert!(matches!(err.root(), Error::Coding(_) | Error::NonFinite { .. }), "{err}");
}

#[test]
fn rejects_bad_latent_geometry() {
    let m = model(true, 1);
    let z = Tensor::zeros(&[1, 4, 12, 16]);
    assert!(compress(&m, &z, Some(&scene_map(0)), 48, 64).is_err());
    let z = Tensor::zeros(&[1, 3, 16, 16]);
    assert!(compress(&m, &z, Some(&scene_map(0)), 64, 64).is_err());
}

#[test]
fn checkpoint_carries_configuration_and_hash() {
    let mut m = model(true, 3);
    m.net.set_lambda(&mut m.store, 2, 1.25);
    m.rehash().unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&m.store, &mut buf).unwrap();
    let loaded = LcmModel::from_store(&read_checkpoint(&buf[..]).unwrap()).unwrap();
    assert_eq!(loaded.cfg(), m.cfg());
    assert_eq!(loaded.cfg().lambda_index, 2);
    assert_eq!(loaded.hash(), m.hash());
    let stripped = read_checkpoint(&buf[..]).unwrap().subset("ga");
    assert!(matches!(LcmModel::from_store(&stripped), Err(Error::MissingParameter(n)) if n == META_NAME));
}

#[test]
fn training_pass_produces_rates_and_gradients() {
    let m = model(true, 1);
    let mut t = Tape::new(&m.store, Mode::Train);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = t.constant(Tensor::stack_batch(&[latent(1, 1.0), latent(2, 1.0)]).unwrap()).unwrap();
    let maps = [scene_map(0), scene_map(1)];
    let oh = t
        .constant(Tensor::stack_batch(&[maps[0].one_hot(), maps[1].one_hot()]).unwrap())
        .unwrap();
    let f = m.net.forward_train(&mut t, z, Some(oh), &mut rng).unwrap();
    assert_eq!(t.shape(f.z_hat), &[2, 4, 16, 16]);
    assert!(t.value(f.rate_y).data()[0] > 0.0 && t.value(f.rate_h).data()[0] > 0.0);
    let total = t.add(f.rate_y, f.rate_h).unwrap();
    let d = t.mse(f.z_hat, z).unwrap();
    let loss = t.add(total, d).unwrap();
    let g = t.backward(loss).unwrap();
    let touched: Vec<_> = g
        .params()
        .iter()
        .filter(|(_, v)| v.iter().any(|x| *x != 0.0))
        .map(|(id, _)| m.store.name(*id).to_string())
        .collect();
    for prefix in ["se.", "ga.", "gs.", "ha.", "hs.", "cm.slice0", "cm.slice1", "fp."] {
        assert!(touched.iter().any(|n| n.starts_with(prefix)), "no gradient for {prefix}");
    }
}
