use drift_harness::dtns::{decode, write_records, Record};
use drift_harness::HarnessError;
use drift_tensor::{Precision, Tensor};
use proptest::prelude::*;

fn encode(records: &[Record]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_records(&mut buf, records).unwrap();
    buf
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn special() -> impl Strategy<Value = f64> {
    prop_oneof![
        4 => -1e6f64..1e6,
        1 => Just(0.0),
        1 => Just(-0.0),
        1 => Just(f64::INFINITY),
        1 => Just(f64::NEG_INFINITY),
        1 => Just(f64::MIN_POSITIVE),
        1 => Just(f64::MAX),
    ]
}

fn tensor() -> impl Strategy<Value = Tensor> {
    (prop::collection::vec(1usize..4, 0..=5), any::<bool>()).prop_flat_map(|(shape, single)| {
        let n = shape.iter().product::<usize>();
        prop::collection::vec(special(), n).prop_map(move |data| {
            let p = if single { Precision::Single } else { Precision::Double };
            Tensor::from_vec(&shape, data).unwrap().with_precision(p)
        })
    })
}

proptest! {
    #[test]
    fn round_trip_is_bitwise(tensors in prop::collection::vec(tensor(), 0..5)) {
        let records: Vec<Record> = tensors.into_iter().enumerate().map(|(i, t)| Record::new(format!("t/{i}"), t)).collect();
        let back = decode(&encode(&records)).unwrap();
        prop_assert_eq!(back.len(), records.len());
        for (a, b) in records.iter().zip(&back) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(a.tensor.shape(), b.tensor.shape());
            prop_assert_eq!(a.tensor.precision(), b.tensor.precision());
            prop_assert_eq!(bits(&a.tensor), bits(&b.tensor));
        }
    }

    #[test]
    fn truncation_never_panics(cut in 0usize..64) {
        let t = Tensor::from_fn(&[2, 3], |i| i as f64);
        let buf = encode(&[Record::new("w", t)]);
        let cut = cut.min(buf.len() - 1);
        prop_assert!(matches!(decode(&buf[..cut]), Err(HarnessError::Format(_))));
    }
}

#[test]
fn payload_length_matches_extents_and_precision() {
    let single = Tensor::from_fn(&[2, 5], |i| i as f64).with_precision(Precision::Single);
    let double = Tensor::from_fn(&[2, 5], |i| i as f64);
    let a = encode(&[Record::new("a", single)]);
    let b = encode(&[Record::new("a", double)]);
    assert_eq!(b.len() - a.len(), 10 * 4);
    assert_eq!(a.len(), 10 + 2 + 1 + 1 + 2 * 4 + 1 + 10 * 4);
}

#[test]
fn nan_round_trips_in_double() {
    let t = Tensor::from_vec(&[1], vec![f64::from_bits(0x7ff8_0000_dead_beef)]).unwrap();
    let back = decode(&encode(&[Record::new("n", t.clone())])).unwrap();
    assert_eq!(bits(&back[0].tensor), bits(&t));
}

#[test]
fn files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.dtns");
    let records = vec![Record::new("scalar", Tensor::scalar(3.5)), Record::new("k", Tensor::from_fn(&[2, 1, 3, 3], |i| i as f64 * 0.1))];
    drift_harness::dtns::save(&path, &records).unwrap();
    assert_eq!(drift_harness::dtns::load(&path).unwrap(), records);
}
