//! Round-trip bit-identity of the volume format over random shapes, ranks
//! and payload widths.

use epl_core::labels::LabelVolume;
use epl_core::volfile::{read, write_labels, write_tensor, Dtype};
use epl_core::Tensor;

use proptest::prelude::*;

fn tmp(name: u64) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join("eplv-props");
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(format!("case-{name}.eplv"))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn float_round_trip_is_bit_identical(
        shape in proptest::collection::vec(1usize..5, 1..=5),
        seed in 0u64..10_000,
        wide in proptest::bool::ANY,
    ) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let raw = ((seed.wrapping_mul(0x9e37_79b9) as f64) + i as f64 * 0.37).sin() * 1e3;
                if wide { raw } else { raw as f32 as f64 }
            })
            .collect();
        let tensor = Tensor::from_vec(data, &shape).unwrap();
        let path = tmp(seed.wrapping_mul(2) + wide as u64);
        let dtype = if wide { Dtype::F64 } else { Dtype::F32 };
        write_tensor(&path, &tensor, dtype).unwrap();
        let back = read(&path).unwrap().into_tensor().unwrap();
        prop_assert_eq!(back.shape(), tensor.shape());
        for (a, b) in tensor.data().iter().zip(back.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn label_round_trip_is_exact(
        dims in proptest::collection::vec(1usize..6, 3),
        seed in 0u64..10_000,
    ) {
        let n = dims[0] * dims[1] * dims[2];
        let data: Vec<u8> = (0..n).map(|i| ((seed as usize + i * 7) % 5) as u8).collect();
        let labels = LabelVolume::new([dims[0], dims[1], dims[2]], data).unwrap();
        let path = tmp(seed.wrapping_mul(3) + 1_000_000);
        write_labels(&path, &labels).unwrap();
        let back = read(&path).unwrap().into_labels().unwrap();
        prop_assert_eq!(back, labels);
    }
}
