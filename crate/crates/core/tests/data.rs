use triplet_core::data::{gen_synthetic, load_cifar10, parse_cifar10, Normalization, CIFAR10_RECORD};
use triplet_core::Error;

fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
    let mut r = vec![label];
    r.extend((0..CIFAR10_RECORD - 1).map(fill));
    r
}

#[test]
fn handcrafted_two_record_file() {
    let mut bytes = record(3, |i| (i % 256) as u8);
    bytes.extend(record(9, |i| 255 - (i % 7) as u8));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("data_batch_1.bin");
    std::fs::write(&p, &bytes).unwrap();
    let d = load_cifar10::<f64>(&p, Normalization::IDENTITY).unwrap();
    assert_eq!(d.len(), 2);
    assert_eq!(d.labels, [3, 9]);
    assert_eq!(d.sample_shape, [3, 32, 32]);
    for s in 0..2 {
        let raw = &bytes[s * CIFAR10_RECORD + 1..(s + 1) * CIFAR10_RECORD];
        for (v, &b) in d.image(s).iter().zip(raw) {
            assert_eq!(*v, b as f64 / 255.0);
        }
    }
    // planar order: channel 1 of sample 0 starts at pixel byte 1024
    let (x, _) = d.batch(&[0]);
    assert_eq!(x.at(0, 1, 0, 0), (1024 % 256) as f64 / 255.0);
    assert_eq!(x.at(0, 0, 1, 2), 34.0 / 255.0);

    let norm = Normalization { mean: [0.5, 0.25, 0.0], std: [0.5, 2.0, 1.0] };
    let n = parse_cifar10::<f64>(&bytes, norm).unwrap();
    let (x, _) = n.batch(&[1]);
    assert_eq!(x.at(0, 0, 0, 0), (255.0 / 255.0 - 0.5) / 0.5);
    assert_eq!(x.at(0, 1, 0, 0), ((255 - 1024 % 7) as f64 / 255.0 - 0.25) / 2.0);
}

#[test]
fn empty_truncated_and_bad_label() {
    assert!(parse_cifar10::<f64>(&[], Normalization::IDENTITY).unwrap().is_empty());
    let mut bytes = record(1, |_| 0);
    bytes.extend_from_slice(&[0; 100]);
    match parse_cifar10::<f64>(&bytes, Normalization::IDENTITY) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, CIFAR10_RECORD as u64),
        r => panic!("{r:?}"),
    }
    let mut bytes = record(1, |_| 0);
    bytes.extend(record(10, |_| 0));
    match parse_cifar10::<f64>(&bytes, Normalization::IDENTITY) {
        Err(Error::Format { offset, message }) => {
            assert_eq!(offset, CIFAR10_RECORD as u64);
            assert!(message.contains("10"));
        }
        r => panic!("{r:?}"),
    }
    let zero_std = Normalization { mean: [0.0; 3], std: [1.0, 0.0, 1.0] };
    assert!(matches!(parse_cifar10::<f64>(&[], zero_std), Err(Error::Config(_))));
    assert!(matches!(load_cifar10::<f64>("/nonexistent/x.bin".as_ref(), Normalization::IDENTITY), Err(Error::Io { .. })));
}

#[test]
fn synthetic_is_seeded_balanced_and_noise_free_when_asked() {
    let a = gen_synthetic::<f64>(4, 40, 7, 0.1).unwrap();
    assert_eq!(a, gen_synthetic::<f64>(4, 40, 7, 0.1).unwrap());
    assert_ne!(a.images, gen_synthetic::<f64>(4, 40, 8, 0.1).unwrap().images);
    for k in 0..4 {
        assert_eq!(a.labels.iter().filter(|&&l| l == k).count(), 10);
    }
    assert!(a.images.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(a.sample_shape, [3, 16, 16]);

    let clean = gen_synthetic::<f64>(3, 12, 1, 0.0).unwrap();
    for i in 0..12 {
        for j in 0..12 {
            let same = clean.labels[i] == clean.labels[j];
            assert_eq!(clean.image(i) == clean.image(j), same);
        }
    }
    assert!(gen_synthetic::<f64>(0, 4, 1, 0.0).is_err());
    assert!(gen_synthetic::<f64>(2, 4, 1, -1.0).is_err());
}

#[test]
fn split_preserves_order() {
    let mut d = gen_synthetic::<f64>(2, 10, 3, 0.2).unwrap();
    let full = d.clone();
    let tail = d.split_off(7);
    assert_eq!(d.len(), 7);
    assert_eq!(tail.len(), 3);
    assert_eq!(tail.image(0), full.image(7));
    assert_eq!(tail.labels, full.labels[7..]);
}
