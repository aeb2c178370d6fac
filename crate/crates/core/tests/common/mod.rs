//! Brute-force references shared by the oracle and acceptance tests.
#![allow(dead_code)]

use getup_core::ascb::{sparse_conv_layer, SPARSE_EPS};
use getup_core::geometry::{chamfer_distance, knn, Point3};
use getup_core::graph::Graph;
use getup_core::kernels::{conv2d_forward, Conv2dShape, Padding};
use getup_core::metrics::evaluate;
use getup_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

macro_rules! check {
    ($cond:expr, $($fmt:tt)*) => {
        if !$cond {
            return Err(format!($($fmt)*));
        }
    };
}

pub fn knn_oracle(rows: &[f64], dim: usize, k: usize) -> Vec<Vec<usize>> {
    let n = rows.len() / dim;
    (0..n)
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let mut s = 0.0;
                    for c in 0..dim {
                        let e = rows[i * dim + c] - rows[j * dim + c];
                        s += e * e;
                    }
                    (s.sqrt(), j)
                })
                .collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            d[..k].iter().map(|p| p.1).collect()
        })
        .collect()
}

pub fn chamfer_oracle(a: &[Point3], b: &[Point3]) -> f64 {
    let one_way = |x: &[Point3], y: &[Point3]| {
        let mut total = 0.0;
        for p in x {
            let mut best = f64::INFINITY;
            for q in y {
                let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                best = best.min(d);
            }
            total += best;
        }
        total / x.len() as f64
    };
    one_way(a, b) + one_way(b, a)
}

#[allow(clippy::too_many_arguments)]
pub fn conv_oracle(
    x: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    k: &[f64],
    size: usize,
    cout: usize,
    stride: usize,
    same: bool,
) -> (Vec<f64>, usize, usize) {
    let pad = if same { (size - 1) / 2 } else { 0 };
    let (oh, ow) = if same {
        (h.div_ceil(stride), w.div_ceil(stride))
    } else {
        ((h - size) / stride + 1, (w - size) / stride + 1)
    };
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            for o in 0..cout {
                let mut s = 0.0;
                for dy in 0..size {
                    for dx in 0..size {
                        let iy = (oy * stride + dy) as isize - pad as isize;
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for c in 0..cin {
                            s += x[(iy as usize * w + ix as usize) * cin + c]
                                * k[((dy * size + dx) * cin + c) * cout + o];
                        }
                    }
                }
                out[(oy * ow + ox) * cout + o] = s;
            }
        }
    }
    (out, oh, ow)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn check_knn(instances: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let n = rng.random_range(2..40);
        let dim = rng.random_range(1..9);
        let k = rng.random_range(1..n);
        let rows = uniform(&mut rng, n * dim);
        let got = knn(&rows, dim, k).unwrap();
        let want = knn_oracle(&rows, dim, k);
        for i in 0..n {
            check!(got[i * k..(i + 1) * k] == want[i][..], "knn row {i}: {:?} vs {:?}", &got[i * k..(i + 1) * k], want[i]);
        }
    }
    Ok(())
}

pub fn check_chamfer(instances: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Point3> {
        (0..n).map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(0.0..50.0)]).collect()
    };
    for _ in 0..instances {
        let (n, m) = (rng.random_range(1..60), rng.random_range(1..60));
        let a = cloud(&mut rng, n);
        let b = cloud(&mut rng, m);
        let got = chamfer_distance(&a, &b).unwrap();
        let want = chamfer_oracle(&a, &b);
        check!((got - want).abs() <= 1e-10 * want.max(1.0), "chamfer {got} vs {want}");
    }
    Ok(())
}

pub fn check_conv2d(instances: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..instances {
        let size = [1, 3, 5][rng.random_range(0..3)];
        let h = rng.random_range(size..12);
        let w = rng.random_range(size..12);
        let (cin, cout) = (rng.random_range(1..4), rng.random_range(1..4));
        let stride = rng.random_range(1..3);
        let same = i % 2 == 0;
        let x = uniform(&mut rng, h * w * cin);
        let k = uniform(&mut rng, size * size * cin * cout);
        let padding = if same { Padding::Same } else { Padding::Valid };
        let shape = Conv2dShape::new(&[h, w, cin], &[size, size, cin, cout], stride, padding).unwrap();
        let got = conv2d_forward(&x, &k, None, &shape);
        let (want, _, _) = conv_oracle(&x, h, w, cin, &k, size, cout, stride, same);
        check!(got.len() == want.len(), "conv2d output length {} vs {}", got.len(), want.len());
        for (a, b) in got.iter().zip(&want) {
            check!((a - b).abs() <= 1e-10, "conv2d {a} vs {b}");
        }
    }
    Ok(())
}

pub fn check_sparse_conv(instances: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let size = [1, 3, 5, 7][rng.random_range(0..4)];
        let (h, w, c) = (rng.random_range(1..12), rng.random_range(1..12), rng.random_range(1..4));
        let density = rng.random_range(0.0..0.6);
        let mask: Vec<bool> = (0..h * w).map(|_| rng.random_bool(density)).collect();
        let x = uniform(&mut rng, h * w * c);
        let k = uniform(&mut rng, size * size * c * c);
        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(&[h, w, c], x.clone()).unwrap());
        let kv = g.constant(Tensor::new(&[size, size, c, c], k.clone()).unwrap());
        let (out, dilated) = sparse_conv_layer(&mut g, xv, &mask, kv).unwrap();
        let got = g.value(out).data();
        let r = (size / 2) as isize;
        for y in 0..h {
            for xx in 0..w {
                let mut count = 0.0;
                let mut acc = vec![0.0; c];
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (iy, ix) = (y as isize + dy, xx as isize + dx);
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        let cell = iy as usize * w + ix as usize;
                        if !mask[cell] {
                            continue;
                        }
                        count += 1.0;
                        let (ky, kx) = ((dy + r) as usize, (dx + r) as usize);
                        for o in 0..c {
                            for i in 0..c {
                                acc[o] += k[((ky * size + kx) * c + i) * c + o] * x[cell * c + i];
                            }
                        }
                    }
                }
                check!(dilated[y * w + xx] == (count > 0.0), "dilated mask at ({xx}, {y})");
                for o in 0..c {
                    let want = acc[o] / (count + SPARSE_EPS);
                    let have = got[(y * w + xx) * c + o];
                    check!((have - want).abs() <= 1e-10, "sparse conv {have} vs {want}");
                }
            }
        }
    }
    Ok(())
}

pub fn check_metrics(instances: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let (h, w) = (rng.random_range(1..16), rng.random_range(1..16));
        let cap = [50.0, 70.0, 80.0][rng.random_range(0..3)];
        let mut gt: Vec<f64> = (0..h * w)
            .map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.5..100.0) })
            .collect();
        gt[0] = rng.random_range(0.5..cap);
        let pred: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.5..90.0)).collect();
        let r = evaluate(
            &Tensor::new(&[h, w], pred.clone()).unwrap(),
            &Tensor::new(&[h, w], gt.clone()).unwrap(),
            cap,
        )
        .unwrap();

        let (mut n, mut abs, mut sq, mut rel, mut l10, mut sl) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let mut d = [0.0; 3];
        for i in 0..h * w {
            let (p, t) = (pred[i], gt[i]);
            if t <= 0.0 || t > cap {
                continue;
            }
            n += 1.0;
            abs += (p - t).abs();
            sq += (p - t) * (p - t);
            rel += (p - t).abs() / t;
            l10 += (p.log10() - t.log10()).abs();
            sl += (p.ln() - t.ln()).powi(2);
            let ratio = if p > t { p / t } else { t / p };
            d[0] += f64::from(u8::from(ratio < 1.25));
            d[1] += f64::from(u8::from(ratio < 1.25 * 1.25));
            d[2] += f64::from(u8::from(ratio < 1.25 * 1.25 * 1.25));
        }
        let want = [abs / n, (sq / n).sqrt(), rel / n, l10 / n, (sl / n).sqrt(), d[0] / n, d[1] / n, d[2] / n];
        let have = [r.mae, r.rmse, r.absrel, r.log10, r.rmselog, r.delta1, r.delta2, r.delta3];
        for (a, b) in have.iter().zip(&want) {
            check!((a - b).abs() <= 1e-12, "metric {a} vs {b}");
        }
        check!(r.pixel_count as f64 == n, "pixel count {} vs {n}", r.pixel_count);
    }
    Ok(())
}
