use grf_tensor::conv::conv_forward;
use grf_tensor::{ConvConfig, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct summation over output sites, kernel taps and channels for a 3D,
/// channels-last convolution with "same" padding.
fn naive_conv3d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, k: [usize; 3], s: [usize; 3], d: [usize; 3]) -> Tensor {
    let [id, ih, iw, ci] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let co = w.shape()[4];
    let inp = [id, ih, iw];
    let mut out_ext = [0; 3];
    let mut pad = [0isize; 3];
    for a in 0..3 {
        out_ext[a] = (inp[a] + s[a] - 1) / s[a];
        let needed = (out_ext[a] - 1) * s[a] + d[a] * (k[a] - 1) + 1;
        let total = needed.saturating_sub(inp[a]);
        pad[a] = (total / 2) as isize;
    }
    let at = |z: usize, y: usize, xx: usize, c: usize| x.data()[((z * ih + y) * iw + xx) * ci + c];
    let wt = |a: usize, bb: usize, cc: usize, i: usize, o: usize| {
        w.data()[((((a * k[1]) + bb) * k[2] + cc) * ci + i) * co + o]
    };
    let mut out = Vec::new();
    for oz in 0..out_ext[0] {
        for oy in 0..out_ext[1] {
            for ox in 0..out_ext[2] {
                for o in 0..co {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for a in 0..k[0] {
                        for bb in 0..k[1] {
                            for cc in 0..k[2] {
                                let z = (oz * s[0] + a * d[0]) as isize - pad[0];
                                let y = (oy * s[1] + bb * d[1]) as isize - pad[1];
                                let xx = (ox * s[2] + cc * d[2]) as isize - pad[2];
                                if z < 0 || y < 0 || xx < 0 || z >= id as isize || y >= ih as isize || xx >= iw as isize {
                                    continue;
                                }
                                for i in 0..ci {
                                    acc += at(z as usize, y as usize, xx as usize, i) * wt(a, bb, cc, i, o);
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::new(&[out_ext[0], out_ext[1], out_ext[2], co], out).unwrap()
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn dilated_same_conv_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[4, 4, 4, 2], &mut rng);
    let w = random(&[3, 3, 3, 2, 3], &mut rng);
    let b = random(&[3], &mut rng);
    let cfg = ConvConfig::cube(3, 3).with_dilation(&[2, 2, 2]);
    let fast = conv_forward(&x, &w, Some(&b), &cfg).unwrap();
    let slow = naive_conv3d(&x, &w, Some(&b), [3; 3], [1; 3], [2; 3]);
    assert!(max_diff(&fast, &slow) < 1e-12);
}

#[test]
fn anisotropic_strided_conv_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (k, s, d) in [([1, 1, 3], [1, 1, 2], [1, 1, 3]), ([3, 1, 1], [2, 1, 1], [1, 1, 1]), ([3, 3, 3], [2, 2, 2], [1, 1, 1])] {
        let x = random(&[5, 6, 7, 3], &mut rng);
        let w = random(&[k[0], k[1], k[2], 3, 2], &mut rng);
        let cfg = ConvConfig::same(&k).with_stride(&s).with_dilation(&d).with_bias(false);
        let fast = conv_forward(&x, &w, None, &cfg).unwrap();
        let slow = naive_conv3d(&x, &w, None, k, s, d);
        assert!(max_diff(&fast, &slow) < 1e-12, "k={k:?} s={s:?} d={d:?}");
    }
}

#[test]
fn conv2d_matches_3d_oracle_with_unit_depth() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&[6, 5, 2], &mut rng);
    let w = random(&[3, 3, 2, 4], &mut rng);
    let cfg = ConvConfig::cube(2, 3).with_dilation(&[2, 1]).with_bias(false);
    let fast = conv_forward(&x, &w, None, &cfg).unwrap();
    let x3 = x.clone().reshape(&[1, 6, 5, 2]).unwrap();
    let w3 = w.clone().reshape(&[1, 3, 3, 2, 4]).unwrap();
    let slow = naive_conv3d(&x3, &w3, None, [1, 3, 3], [1; 3], [1, 2, 1]);
    assert_eq!(fast.shape(), &[6, 5, 4]);
    assert!(fast.data().iter().zip(slow.data()).all(|(a, b)| (a - b).abs() < 1e-12));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn same_padding_shape_law(
        k in 1usize..=3, s in 1usize..=2, d in prop::sample::select(vec![1usize, 2, 3, 5]),
        e0 in 4usize..=9, e1 in 4usize..=9, e2 in 4usize..=9,
    ) {
        let cfg = ConvConfig::cube(3, k).with_stride(&[s; 3]).with_dilation(&[d; 3]);
        let out = cfg.output_extents(&[e0, e1, e2]).unwrap();
        prop_assert_eq!(out, vec![e0.div_ceil(s), e1.div_ceil(s), e2.div_ceil(s)]);
    }

    #[test]
    fn conv_is_linear_without_bias(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[4, 3, 5, 2], &mut rng);
        let y = random(&[4, 3, 5, 2], &mut rng);
        let w = random(&[3, 3, 3, 2, 2], &mut rng);
        let cfg = ConvConfig::cube(3, 3).with_dilation(&[1, 2, 1]).with_bias(false);
        let mix = x.scale(a).add(&y.scale(b)).unwrap();
        let lhs = conv_forward(&mix, &w, None, &cfg).unwrap();
        let rhs = conv_forward(&x, &w, None, &cfg).unwrap().scale(a)
            .add(&conv_forward(&y, &w, None, &cfg).unwrap().scale(b)).unwrap();
        prop_assert!(max_diff(&lhs, &rhs) < 1e-10);
    }
}
