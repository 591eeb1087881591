use bisic_tensor::{bmm, ConvGeom, Tensor};
use proptest::prelude::*;

fn shape3() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 3)
}

fn tensor_of(shape: Vec<usize>) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-10.0f64..10.0, n).prop_map(move |d| Tensor::from_vec(&shape, d))
}

proptest! {
    #[test]
    fn permute_then_inverse_is_identity(t in shape3().prop_flat_map(tensor_of), perm in Just([0usize, 1, 2]).prop_shuffle()) {
        let mut inv = [0usize; 3];
        for (i, &a) in perm.iter().enumerate() {
            inv[a] = i;
        }
        prop_assert_eq!(t.permute(&perm).permute(&inv), t);
    }

    #[test]
    fn narrow_pieces_concat_back(t in shape3().prop_flat_map(tensor_of), axis in 0usize..3, cut in 0usize..5) {
        let d = t.dim(axis);
        let cut = cut.min(d);
        let parts: Vec<Tensor<f64>> = [(0, cut), (cut, d - cut)]
            .iter()
            .filter(|(_, l)| *l > 0)
            .map(|&(s, l)| t.narrow(axis, s, l))
            .collect();
        let refs: Vec<&Tensor<f64>> = parts.iter().collect();
        prop_assert_eq!(Tensor::concat(&refs, axis), t);
    }

    #[test]
    fn flip_is_an_involution(t in shape3().prop_flat_map(tensor_of), axis in 0usize..3) {
        prop_assert_eq!(t.flip(axis).flip(axis), t);
    }

    #[test]
    fn reduce_preserves_total(t in shape3().prop_flat_map(tensor_of)) {
        let target = vec![1, t.dim(1), 1];
        let r = t.reduce_to(&target);
        prop_assert!((r.sum() - t.sum()).abs() < 1e-9);
    }

    #[test]
    fn matmul_matches_definition(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in any::<u64>()) {
        let mut s = seed;
        let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); ((s >> 33) as f64) / (1u64 << 31) as f64 - 0.5 };
        let a = Tensor::from_fn(&[1, m, k], |_| next());
        let b = Tensor::from_fn(&[1, k, n], |_| next());
        let c = bmm(&a, false, &b, false);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|q| a.at(&[0, i, q]) * b.at(&[0, q, j])).sum();
                prop_assert!((c.at(&[0, i, j]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_out_dims_roundtrip_through_transpose(d in 1usize..4, h in 1usize..20, w in 1usize..20) {
        let g = ConvGeom::new([3, 5, 5], [1, 2, 2], [1, 2, 2]);
        let up = g.transposed_out_dims([d, h, w], [0, 1, 1]).unwrap();
        prop_assert_eq!(up, [d, 2 * h, 2 * w]);
        prop_assert_eq!(g.out_dims(up), Some([d, h, w]));
    }
}
