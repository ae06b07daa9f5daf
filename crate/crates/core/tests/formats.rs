mod common;

use std::path::Path;

use common::*;
use lava_core::checkpoint::Archive;
use lava_core::ltf::{self, LtfValue};
use lava_core::{Checkpoint, EncoderStack, Error, Tensor};
use proptest::collection::vec;
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        8 => any::<f64>().prop_filter("tensors hold finite values", |v| v.is_finite()),
        1 => Just(-0.0),
        1 => Just(f64::MIN_POSITIVE / 2.0),
    ]
}

fn tensor_strategy() -> impl Strategy<Value = Tensor> {
    vec(0usize..4, 0..4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        vec(finite(), n).prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
    })
}

proptest! {
    #[test]
    fn ltf_round_trip_is_bit_exact(t in tensor_strategy()) {
        let bytes = ltf::encode_f64(&t).unwrap();
        prop_assert_eq!(bytes.len(), 8 + 8 * t.rank() + 8 * t.numel());
        let (v, used) = ltf::decode(&bytes, Path::new("p.ltf")).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert!(v.into_f64(Path::new("p.ltf")).unwrap().bitwise_eq(&t));
    }

    #[test]
    fn ltf_decode_never_panics(bytes in vec(any::<u8>(), 0..64)) {
        let _ = ltf::decode(&bytes, Path::new("junk.ltf"));
    }

    #[test]
    fn archive_round_trip(entries in vec(("[a-z.]{1,12}", tensor_strategy()), 0..6)) {
        let mut a = Archive::new();
        for (name, t) in &entries {
            let _ = a.push_tensor(name, t);
        }
        let bytes = a.encode().unwrap();
        let back = Archive::decode(&bytes, Path::new("p.lavc")).unwrap();
        prop_assert_eq!(back.names().collect::<Vec<_>>(), a.names().collect::<Vec<_>>());
        for name in a.names() {
            match (a.get(name).unwrap(), back.get(name).unwrap()) {
                (LtfValue::F64(x), LtfValue::F64(y)) => prop_assert!(x.bitwise_eq(y)),
                _ => prop_assert!(false, "dtype changed"),
            }
        }
    }

    #[test]
    fn archive_truncation_is_a_format_error(cut in 0usize..200) {
        let mut a = Archive::new();
        a.push_tensor("w", &Tensor::matrix(2, 3, vec![1.0; 6]).unwrap()).unwrap();
        a.push(
            "cfg",
            LtfValue::U8 { shape: vec![3], bytes: b"abc".to_vec() },
        ).unwrap();
        let bytes = a.encode().unwrap();
        let cut = cut % bytes.len();
        let e = Archive::decode(&bytes[..cut], Path::new("t.lavc")).unwrap_err();
        prop_assert!(matches!(e, Error::Format { .. }), "{}", e);
        prop_assert_eq!(e.exit_code(), 3);
    }
}

#[test]
fn file_round_trip_and_corrupt_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.ltf");
    let t = Tensor::new(vec![2, 2, 2], (0..8).map(|i| i as f64 * 0.5).collect()).unwrap();
    ltf::write_tensor(&p, &t).unwrap();
    assert!(ltf::read_tensor(&p).unwrap().bitwise_eq(&t));

    let good = std::fs::read(&p).unwrap();
    let cases: Vec<(&str, Vec<u8>)> = vec![
        ("magic", [b"NOPE".as_slice(), &good[4..]].concat()),
        ("dtype", { let mut b = good.clone(); b[4] = 9; b }),
        ("reserved", { let mut b = good.clone(); b[7] = 1; b }),
        ("truncated", good[..good.len() - 1].to_vec()),
        ("trailing", [good.as_slice(), &[0]].concat()),
        ("overflow", {
            let mut b = good.clone();
            b[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
            b
        }),
    ];
    for (what, bytes) in cases {
        std::fs::write(&p, bytes).unwrap();
        let e = ltf::read_tensor(&p).unwrap_err();
        assert!(matches!(e, Error::Format { .. }), "{what}: {e}");
        assert!(e.to_string().contains("t.ltf"), "{what}: error names the file: {e}");
        assert_eq!(e.exit_code(), 3);
    }

    let e = ltf::read_tensor(&dir.path().join("missing.ltf")).unwrap_err();
    assert!(matches!(e, Error::Io { .. }));
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn reading_a_u8_blob_as_tensor_fails() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("b.ltf");
    std::fs::write(&p, ltf::encode_u8(&[2], &[1, 2]).unwrap()).unwrap();
    assert!(matches!(ltf::read_tensor(&p), Err(Error::Format { .. })));
}

fn fresh_checkpoint(seed: u64) -> Checkpoint {
    let cfg = small_config(16, seed);
    Checkpoint {
        stack: EncoderStack::new(&cfg.model, seed).unwrap(),
        adam: lava_core::optim::Adam::new(&cfg.optim),
        config: cfg,
        step: 7,
        epoch: 2,
    }
}

#[test]
fn checkpoint_round_trip_preserves_everything() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.lavc");
    let c = fresh_checkpoint(3);
    c.save(&p).unwrap();
    let back = Checkpoint::load(&p).unwrap();
    assert_eq!(back.config, c.config);
    assert_eq!((back.step, back.epoch, back.adam.t), (7, 2, 0));
    let a = c.stack.named_params();
    let b = back.stack.named_params();
    assert_eq!(a.len(), b.len());
    for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
        assert_eq!(na, nb);
        assert!(ta.bitwise_eq(tb), "{na}");
    }
    // saving again gives identical bytes
    let p2 = dir.path().join("d.lavc");
    back.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn checkpoint_errors_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let c = fresh_checkpoint(1);
    let full = c.to_archive().unwrap();

    let rebuild = |skip: &str, swap: Option<(&str, Tensor)>| {
        let mut a = Archive::new();
        for name in full.names() {
            if name == skip {
                continue;
            }
            let v = match &swap {
                Some((n, t)) if *n == name => LtfValue::F64(t.clone()),
                _ => full.get(name).unwrap().clone(),
            };
            a.push(name, v).unwrap();
        }
        a
    };

    let p = dir.path().join("x.lavc");
    let some_param = c.stack.named_params()[0].0.clone();
    rebuild(&some_param, None).write(&p).unwrap();
    let e = Checkpoint::load(&p).unwrap_err();
    assert!(e.to_string().contains(&some_param), "{e}");
    assert_eq!(e.exit_code(), 3);

    rebuild("", Some((&some_param, Tensor::zeros(&[1, 1])))).write(&p).unwrap();
    let e = Checkpoint::load(&p).unwrap_err();
    assert!(e.to_string().contains("shape"), "{e}");

    rebuild("config", None).write(&p).unwrap();
    assert!(Checkpoint::load(&p).unwrap_err().to_string().contains("config"));

    rebuild("train.step", Some(("train.epoch", Tensor::scalar(1.5).unwrap()))).write(&p).unwrap();
    assert!(Checkpoint::load(&p).is_err());

    std::fs::write(&p, b"LAVC").unwrap();
    assert!(matches!(Checkpoint::load(&p), Err(Error::Format { .. })));
}
