use gridvid::sat::{apply_mask, masking_ratios, segment_variances};
use gridvid::sgp::{compose_grid, decompose_grid, TokenLayout, TokenOrder};
use gridvid::video::Image;
use gridvid::vq::{self, CodeBook, TokenGrid};
use proptest::prelude::*;

fn variances() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..10.0, 1..40)
}

proptest! {
    #[test]
    fn ratios_stay_in_bounds(v in variances(), p_max in 0.0f64..0.99) {
        let r = masking_ratios(&v, p_max).unwrap();
        prop_assert!(r.iter().all(|&p| (0.0..=p_max).contains(&p)));
    }

    #[test]
    fn most_varied_segment_is_never_masked(v in variances(), p_max in 0.0f64..0.99) {
        let r = masking_ratios(&v, p_max).unwrap();
        let top = v.iter().cloned().fold(f64::MIN, f64::max);
        for (vi, ri) in v.iter().zip(&r) {
            if *vi == top {
                prop_assert_eq!(*ri, 0.0);
            }
        }
    }

    #[test]
    fn lower_variance_means_higher_ratio(v in variances(), p_max in 0.0f64..0.99) {
        let r = masking_ratios(&v, p_max).unwrap();
        for i in 0..v.len() {
            for j in 0..v.len() {
                if v[i] <= v[j] {
                    prop_assert!(r[i] >= r[j]);
                }
            }
        }
    }

    #[test]
    fn zero_p_max_is_identity(x in prop::collection::vec(-5.0f64..5.0, 64), seed in any::<u64>()) {
        let vars = segment_variances(&x, 4, 4).unwrap();
        let r = masking_ratios(&vars, 0.0).unwrap();
        let (y, keep) = apply_mask(&x, 4, &r, seed).unwrap();
        prop_assert!(keep.iter().all(|&k| k));
        prop_assert!(x.iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn positions_are_a_bijection(gr in 1usize..4, gc in 1usize..4, tr in 1usize..4, tc in 1usize..4) {
        let layout = TokenLayout::new(gr * gc, gr, gc, tr, tc).unwrap();
        let mut seen = vec![false; layout.seq_len()];
        for t in 0..layout.frames {
            for r in 0..tr {
                for c in 0..tc {
                    let p = layout.seq_pos(t, r, c).unwrap();
                    prop_assert!(!seen[p]);
                    seen[p] = true;
                    prop_assert_eq!(layout.frame_pos(p).unwrap(), (t, r, c));
                }
            }
        }
    }

    #[test]
    fn sequence_orders_round_trip(gr in 1usize..4, gc in 1usize..4, tr in 1usize..4, tc in 1usize..4, seed in any::<u64>()) {
        let layout = TokenLayout::new(gr * gc, gr, gc, tr, tc).unwrap();
        let (rows, cols) = layout.grid_tokens();
        let ids: Vec<u32> = (0..rows * cols).map(|i| (i as u64 ^ seed) as u32 % 97).collect();
        let grid = TokenGrid { rows, cols, ids };
        for order in [TokenOrder::GridRaster, TokenOrder::FrameMajor] {
            let seq = layout.to_sequence(&grid, order).unwrap();
            prop_assert_eq!(layout.from_sequence(&seq, order).unwrap(), grid.clone());
        }
    }

    #[test]
    fn compose_decompose_round_trip(
        gr in 1usize..4, gc in 1usize..4, h in 1usize..6, w in 1usize..6,
        bytes in prop::collection::vec(any::<u8>(), 16 * 36 * 3),
    ) {
        let frames: Vec<Image> = (0..gr * gc)
            .map(|t| {
                let off = t * h * w * 3;
                Image::new(h, w, 3, bytes[off..off + h * w * 3].to_vec()).unwrap()
            })
            .collect();
        let grid = compose_grid(&frames, gr, gc).unwrap();
        prop_assert_eq!(decompose_grid(&grid, gr, gc).unwrap(), frames.clone());
        prop_assert_eq!(compose_grid(&decompose_grid(&grid, gr, gc).unwrap(), gr, gc).unwrap(), grid);
    }

    #[test]
    fn lattice_codebook_encode_inverts_decode(
        levels in prop::collection::btree_set(prop::collection::vec(0u8..=255, 4), 2..12),
        picks in prop::collection::vec(any::<prop::sample::Index>(), 12),
    ) {
        // Distinct codewords on the 8-bit lattice decode exactly, so encoding
        // the decoded image must recover the ids.
        let words: Vec<Vec<u8>> = levels.into_iter().collect();
        let k = words.len();
        let values: Vec<f64> = words.iter().flatten().map(|&b| b as f64 / 255.0).collect();
        let cb = CodeBook::new(k, 2, 2, 1, values).unwrap();
        let ids: Vec<u32> = picks.iter().map(|i| i.index(k) as u32).collect();
        let tokens = TokenGrid { rows: 3, cols: 4, ids };
        let img = vq::decode(&tokens, &cb).unwrap();
        let again = vq::encode(&img, &cb).unwrap();
        prop_assert_eq!(&again, &tokens);
        prop_assert_eq!(vq::decode(&again, &cb).unwrap(), img);
    }
}
