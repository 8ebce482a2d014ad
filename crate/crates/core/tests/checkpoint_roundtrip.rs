use moelora::checkpoint::{from_bytes, load, save, to_bytes};
use moelora::layer::InitScales;
use moelora::{ForwardMode, LayerShape, MoeLoraLayer, RngStream};
use proptest::prelude::*;

proptest! {
    #[test]
    fn bytes_round_trip(m in 1usize..6, n in 1usize..6, num in 1usize..5, seed in any::<u64>(), sqrt in any::<bool>()) {
        let shape = LayerShape::new(m, n, num, 1, 1, 3.0).unwrap();
        let mut layer = MoeLoraLayer::init(shape, &RngStream::new(seed), InitScales::default()).unwrap();
        if sqrt {
            layer.mode = ForwardMode::SqrtDetach;
        }
        let bytes = to_bytes(&layer);
        prop_assert_eq!(from_bytes(&bytes).unwrap(), layer);
        for cut in [0, 8, 12, 60, bytes.len() - 1] {
            prop_assert!(from_bytes(&bytes[..cut]).is_err());
        }
    }
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let shape = LayerShape::new(5, 4, 3, 2, 2, 8.0).unwrap();
    let layer = MoeLoraLayer::init(shape, &RngStream::new(2), InitScales::default()).unwrap();
    let path = dir.path().join("l.ckpt");
    save(&layer, &path).unwrap();
    assert_eq!(load(&path).unwrap(), layer);
    assert!(load(&dir.path().join("missing.ckpt")).is_err());
}
