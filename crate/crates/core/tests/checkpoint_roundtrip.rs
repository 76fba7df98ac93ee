use sha2::{Digest, Sha256};
use treegrad::checkpoint::{load, save};
use treegrad::pytree::tree_equal;
use treegrad::{nn, Error};

#[test]
fn trained_model_roundtrips() {
    nn::register_all();
    let model = nn::train(0, 5, 0.1).unwrap().model;
    let text = save(&model).unwrap();
    assert!(tree_equal(&load(&text).unwrap(), &model));
    assert_eq!(save(&load(&text).unwrap()).unwrap(), text);
}

#[test]
fn every_single_byte_corruption_is_detected() {
    nn::register_all();
    let model = nn::mlp_init(nn::key_new(0)).unwrap();
    let text = save(&model).unwrap();
    let bytes = text.as_bytes();
    for pos in 0..bytes.len() - 1 {
        let mut corrupted = bytes.to_vec();
        corrupted[pos] = if bytes[pos] == b'0' { b'1' } else { b'0' };
        let Ok(s) = std::str::from_utf8(&corrupted) else {
            continue;
        };
        assert!(load(s).is_err(), "corruption at byte {pos} went unnoticed");
    }
}

#[test]
fn unregistered_function_is_reported() {
    let text = "TREEGRAD-CKPT v1\nfingerprint *\nleaves 1\nleaf 0 static fn:never_registered\n";
    let digest = hex::encode(Sha256::digest(text.as_bytes()));
    let full = format!("{text}checksum {digest}\n");
    assert_eq!(
        load(&full).unwrap_err(),
        Error::UnknownFunction("never_registered".into())
    );
}
