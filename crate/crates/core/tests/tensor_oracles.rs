//! Forward kernels against direct-loop reference implementations.

use usgrip_core::rng::SeededRng;
use usgrip_core::tensor::{conv2d, dense, maxpool2d, softmax, Padding, Tensor};

fn random(rng: &mut SeededRng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.uniform_range(-1.0, 1.0) as f32).collect()
}

/// Six nested loops, summing kernel row-major with the input channel
/// innermost and adding the bias last. Out-of-range taps are skipped.
fn conv_oracle(
    x: &[f32],
    (h, w, cin): (usize, usize, usize),
    k: &[f32],
    (kh, kw, cout): (usize, usize, usize),
    bias: &[f32],
    stride: usize,
    padding: Padding,
) -> (Vec<f32>, usize, usize) {
    let (oh, ow, pt, pl) = match padding {
        Padding::Valid => ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0),
        Padding::Same => {
            let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
            let ph = ((oh - 1) * stride + kh).saturating_sub(h);
            let pw = ((ow - 1) * stride + kw).saturating_sub(w);
            (oh, ow, ph / 2, pw / 2)
        }
    };
    let mut out = vec![0f32; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let mut acc = 0f32;
                for ky in 0..kh {
                    for kx in 0..kw {
                        for ci in 0..cin {
                            let iy = (oy * stride + ky) as isize - pt as isize;
                            let ix = (ox * stride + kx) as isize - pl as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let xv = x[(iy as usize * w + ix as usize) * cin + ci];
                            let kv = k[((ky * kw + kx) * cin + ci) * cout + co];
                            acc += xv * kv;
                        }
                    }
                }
                out[(oy * ow + ox) * cout + co] = acc + bias[co];
            }
        }
    }
    (out, oh, ow)
}

fn assert_bits_eq(a: &[f32], b: &[f32]) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert_eq!(x.to_bits(), y.to_bits(), "element {i}: {x} vs {y}");
    }
}

#[test]
fn conv2d_matches_oracle_on_random_instances() {
    let mut rng = SeededRng::new(1);
    for case in 0..150 {
        let h = 1 + rng.below(16) as usize;
        let w = 1 + rng.below(16) as usize;
        let cin = 1 + rng.below(4) as usize;
        let cout = 1 + rng.below(4) as usize;
        let kh = 1 + rng.below(h.min(4) as u64) as usize;
        let kw = 1 + rng.below(w.min(4) as u64) as usize;
        let stride = 1 + rng.below(3) as usize;
        let padding = if rng.below(2) == 0 { Padding::Same } else { Padding::Valid };
        let x = random(&mut rng, h * w * cin);
        let k = random(&mut rng, kh * kw * cin * cout);
        let b = random(&mut rng, cout);
        let got = conv2d(
            &Tensor::new(vec![h, w, cin], x.clone()).unwrap(),
            &Tensor::new(vec![kh, kw, cin, cout], k.clone()).unwrap(),
            &Tensor::new(vec![cout], b.clone()).unwrap(),
            padding,
            stride,
        )
        .unwrap();
        let (want, oh, ow) = conv_oracle(&x, (h, w, cin), &k, (kh, kw, cout), &b, stride, padding);
        assert_eq!(got.shape(), [oh, ow, cout], "case {case}");
        assert_bits_eq(got.data(), &want);
    }
}

#[test]
fn conv2d_examples() {
    let id = conv2d(
        &Tensor::new(vec![2, 2, 1], vec![1f32, 2., 3., 4.]).unwrap(),
        &Tensor::new(vec![1, 1, 1, 1], vec![1f32]).unwrap(),
        &Tensor::new(vec![1], vec![0f32]).unwrap(),
        Padding::Valid,
        1,
    )
    .unwrap();
    assert_eq!(id.data(), [1., 2., 3., 4.]);

    let diag = conv2d(
        &Tensor::new(vec![3, 3, 1], (1..=9).map(|v| v as f32).collect()).unwrap(),
        &Tensor::new(vec![2, 2, 1, 1], vec![1f32, 0., 0., 1.]).unwrap(),
        &Tensor::new(vec![1], vec![0f32]).unwrap(),
        Padding::Valid,
        1,
    )
    .unwrap();
    assert_eq!(diag.shape(), [2, 2, 1]);
    assert_eq!(diag.data(), [6., 8., 12., 14.]);

    let zero = conv2d(
        &Tensor::new(vec![5, 4, 2], vec![3f32; 40]).unwrap(),
        &Tensor::new(vec![3, 3, 2, 3], vec![0f32; 54]).unwrap(),
        &Tensor::new(vec![3], vec![0f32; 3]).unwrap(),
        Padding::Same,
        2,
    )
    .unwrap();
    assert_eq!(zero.shape(), [3, 2, 3]);
    assert!(zero.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let r = conv2d(
        &Tensor::new(vec![4, 4, 2], vec![0f32; 32]).unwrap(),
        &Tensor::new(vec![3, 3, 3, 1], vec![0f32; 27]).unwrap(),
        &Tensor::new(vec![1], vec![0f32]).unwrap(),
        Padding::Same,
        1,
    );
    assert!(matches!(r, Err(usgrip_core::Error::Shape(_))));
}

#[test]
fn maxpool_matches_oracle_on_random_instances() {
    let mut rng = SeededRng::new(2);
    for _ in 0..150 {
        let h = 2 + rng.below(15) as usize;
        let w = 2 + rng.below(15) as usize;
        let c = 1 + rng.below(4) as usize;
        // coarse values so that ties occur
        let x: Vec<f32> = (0..h * w * c).map(|_| rng.below(5) as f32).collect();
        let got = maxpool2d(&Tensor::new(vec![h, w, c], x.clone()).unwrap()).unwrap();
        let (oh, ow) = (h / 2, w / 2);
        assert_eq!(got.output.shape(), [oh, ow, c]);
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = f32::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            best = best.max(x[((2 * oy + dy) * w + 2 * ox + dx) * c + ch]);
                        }
                    }
                    let o = (oy * ow + ox) * c + ch;
                    assert_eq!(got.output.data()[o], best);
                    assert_eq!(x[got.argmax[o] as usize], best);
                }
            }
        }
        let in_max = x.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert!(got.output.data().iter().all(|&v| v <= in_max));
    }
}

#[test]
fn maxpool_examples() {
    let one = maxpool2d(&Tensor::new(vec![2, 2, 1], vec![1f32, 2., 3., 4.]).unwrap()).unwrap();
    assert_eq!(one.output.data(), [4.]);
    let ramp = maxpool2d(&Tensor::new(vec![4, 4, 1], (0..16).map(|v| v as f32).collect()).unwrap()).unwrap();
    assert_eq!(ramp.output.data(), [5., 7., 13., 15.]);
    let flat = maxpool2d(&Tensor::new(vec![4, 4, 1], vec![5f32; 16]).unwrap()).unwrap();
    assert_eq!(flat.output.data(), [5f32; 4]);
}

#[test]
fn dense_matches_oracle_on_random_instances() {
    let mut rng = SeededRng::new(3);
    for _ in 0..150 {
        let n = 1 + rng.below(64) as usize;
        let m = 1 + rng.below(16) as usize;
        let x = random(&mut rng, n);
        let wts = random(&mut rng, n * m);
        let b = random(&mut rng, m);
        let got = dense(
            &Tensor::new(vec![n], x.clone()).unwrap(),
            &Tensor::new(vec![n, m], wts.clone()).unwrap(),
            &Tensor::new(vec![m], b.clone()).unwrap(),
        )
        .unwrap();
        let want: Vec<f32> = (0..m)
            .map(|j| {
                let mut acc = 0f32;
                for i in 0..n {
                    acc += x[i] * wts[i * m + j];
                }
                acc + b[j]
            })
            .collect();
        assert_bits_eq(got.data(), &want);
    }
}

#[test]
fn softmax_contract() {
    let p = softmax(&Tensor::new(vec![4], vec![0f32; 4]).unwrap()).unwrap();
    assert_eq!(p.data(), [0.25; 4]);
    let p = softmax(&Tensor::new(vec![2], vec![0f32, 3f32.ln()]).unwrap()).unwrap();
    assert!((p.data()[0] - 0.25).abs() < 1e-6 && (p.data()[1] - 0.75).abs() < 1e-6);

    let mut rng = SeededRng::new(4);
    for _ in 0..200 {
        let x = random(&mut rng, 6).iter().map(|v| v * 10.0).collect::<Vec<_>>();
        let c = rng.uniform_range(-50.0, 50.0) as f32;
        let a = softmax(&Tensor::new(vec![6], x.clone()).unwrap()).unwrap();
        let b = softmax(&Tensor::new(vec![6], x.iter().map(|v| v + c).collect()).unwrap()).unwrap();
        let sum: f32 = a.data().iter().sum();
        assert!((sum - 1.0).abs() <= 1e-6);
        assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() <= 1e-6);
        }
    }
    let nan = softmax(&Tensor::new(vec![2], vec![f32::NAN, 0.0]).unwrap());
    assert!(matches!(nan, Err(usgrip_core::Error::Numeric(_))));
}
