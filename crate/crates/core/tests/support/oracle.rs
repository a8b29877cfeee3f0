//! Independent reference implementations used by the tests: a plain-loop
//! f64 forward pass and a central-difference gradient checker.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use retina_xfer::neuralnet::{Architecture, HeadActivation, LayerSpec, ParameterVector, Tensor};
use retina_xfer::{Params64, Tensor64};

const EPS: f64 = 1e-7;

#[derive(Clone, Debug)]
pub enum LossSpec {
    Bce { labels: Vec<u8>, w_neg: f64, w_pos: f64 },
    Ce { labels: Vec<usize> },
    Mse { targets: Vec<f64> },
}

/// `(c, h, w)` feature maps per sample, or flat vectors after the first
/// dense layer.
#[derive(Clone)]
enum Act {
    Maps { c: usize, h: usize, w: usize, v: Vec<f64> },
    Flat(Vec<f64>),
}

/// Output of the loop forward: per-sample outputs plus every branch
/// decision (ReLU sign, pooling argmax) taken along the way.
pub struct OracleOut {
    pub outputs: Vec<Vec<f64>>,
    pub decisions: Vec<usize>,
}

fn p(params: &Params64, name: &str) -> Vec<f64> {
    params.get(name).unwrap_or_else(|| panic!("missing {name}")).data().to_vec()
}

pub fn forward(arch: &Architecture, params: &Params64, batch: &Tensor64) -> OracleOut {
    let s = batch.shape();
    let (n, c0, h0, w0) = (s[0], s[1], s[2], s[3]);
    let per = c0 * h0 * w0;
    let mut outputs = Vec::with_capacity(n);
    let mut decisions = Vec::new();
    for sample in 0..n {
        let mut act = Act::Maps {
            c: c0,
            h: h0,
            w: w0,
            v: batch.data()[sample * per..(sample + 1) * per].to_vec(),
        };
        let (mut conv_i, mut dense_i) = (0, 0);
        for layer in &arch.layers {
            act = match (layer, act) {
                (LayerSpec::Conv { filters, kernel }, Act::Maps { c, h, w, v }) => {
                    conv_i += 1;
                    let wt = p(params, &format!("conv{conv_i}.weight"));
                    let b = p(params, &format!("conv{conv_i}.bias"));
                    let (k, f) = (*kernel, *filters);
                    let (oh, ow) = (h - k + 1, w - k + 1);
                    let mut out = vec![0.0; f * oh * ow];
                    for fi in 0..f {
                        for i in 0..oh {
                            for j in 0..ow {
                                let mut acc = b[fi];
                                for ci in 0..c {
                                    for u in 0..k {
                                        for q in 0..k {
                                            acc += wt[((fi * c + ci) * k + u) * k + q]
                                                * v[(ci * h + i + u) * w + j + q];
                                        }
                                    }
                                }
                                out[(fi * oh + i) * ow + j] = acc;
                            }
                        }
                    }
                    Act::Maps { c: f, h: oh, w: ow, v: out }
                }
                (LayerSpec::Relu, a) => {
                    let relu = |v: Vec<f64>, d: &mut Vec<usize>| {
                        v.into_iter()
                            .map(|x| {
                                d.push((x > 0.0) as usize);
                                x.max(0.0)
                            })
                            .collect::<Vec<_>>()
                    };
                    match a {
                        Act::Maps { c, h, w, v } => Act::Maps { c, h, w, v: relu(v, &mut decisions) },
                        Act::Flat(v) => Act::Flat(relu(v, &mut decisions)),
                    }
                }
                (LayerSpec::MaxPool { size }, Act::Maps { c, h, w, v }) => {
                    let sz = *size;
                    let (oh, ow) = (h / sz, w / sz);
                    let mut out = vec![0.0; c * oh * ow];
                    for ci in 0..c {
                        for i in 0..oh {
                            for j in 0..ow {
                                let mut best = f64::NEG_INFINITY;
                                let mut arg = 0;
                                for u in 0..sz {
                                    for q in 0..sz {
                                        let x = v[(ci * h + i * sz + u) * w + j * sz + q];
                                        if x > best {
                                            best = x;
                                            arg = u * sz + q;
                                        }
                                    }
                                }
                                decisions.push(arg);
                                out[(ci * oh + i) * ow + j] = best;
                            }
                        }
                    }
                    Act::Maps { c, h: oh, w: ow, v: out }
                }
                (LayerSpec::Dense { .. } | LayerSpec::Head { .. }, a) => {
                    let x = match a {
                        Act::Maps { v, .. } => v,
                        Act::Flat(v) => v,
                    };
                    let prefix = if matches!(layer, LayerSpec::Head { .. }) {
                        "head".to_string()
                    } else {
                        dense_i += 1;
                        format!("fc{dense_i}")
                    };
                    let wt = p(params, &format!("{prefix}.weight"));
                    let b = p(params, &format!("{prefix}.bias"));
                    let mut y: Vec<f64> = (0..b.len())
                        .map(|o| b[o] + (0..x.len()).map(|i| wt[o * x.len() + i] * x[i]).sum::<f64>())
                        .collect();
                    if let LayerSpec::Head { activation, .. } = layer {
                        match activation {
                            HeadActivation::Sigmoid => {
                                for v in &mut y {
                                    *v = 1.0 / (1.0 + (-*v).exp());
                                }
                            }
                            HeadActivation::Softmax => {
                                let m = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                                let z: f64 = y.iter().map(|v| (v - m).exp()).sum();
                                for v in &mut y {
                                    *v = (*v - m).exp() / z;
                                }
                            }
                        }
                    }
                    Act::Flat(y)
                }
                (l, _) => panic!("oracle cannot place {l:?}"),
            };
        }
        match act {
            Act::Flat(v) => outputs.push(v),
            Act::Maps { .. } => panic!("network has no dense output"),
        }
    }
    OracleOut { outputs, decisions }
}

pub fn loss(outputs: &[Vec<f64>], spec: &LossSpec) -> f64 {
    let n = outputs.len() as f64;
    match spec {
        LossSpec::Bce { labels, w_neg, w_pos } => {
            outputs
                .iter()
                .zip(labels)
                .map(|(o, &y)| {
                    let pc = o[0].clamp(EPS, 1.0 - EPS);
                    if y == 1 {
                        -w_pos * pc.ln()
                    } else {
                        -w_neg * (1.0 - pc).ln()
                    }
                })
                .sum::<f64>()
                / n
        }
        LossSpec::Ce { labels } => {
            outputs
                .iter()
                .zip(labels)
                .map(|(o, &y)| -o[y].clamp(EPS, 1.0).ln())
                .sum::<f64>()
                / n
        }
        LossSpec::Mse { targets } => {
            let flat: Vec<f64> = outputs.iter().flatten().copied().collect();
            flat.iter().zip(targets).map(|(a, t)| (a - t).powi(2)).sum::<f64>() / targets.len() as f64
        }
    }
}

/// A small random architecture with its input batch and loss.
pub struct TinyNet {
    pub arch: Architecture,
    pub params: Params64,
    pub batch: Tensor64,
    pub loss: LossSpec,
}

pub fn tiny_net(seed: u64) -> TinyNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let channels = rng.gen_range(1..=2);
    let image_size = rng.gen_range(5..=8);
    let mut layers = vec![LayerSpec::Conv {
        filters: rng.gen_range(1..=3),
        kernel: rng.gen_range(2..=3),
    }];
    if rng.gen_bool(0.7) {
        layers.push(LayerSpec::Relu);
    }
    if rng.gen_bool(0.6) {
        layers.push(LayerSpec::MaxPool { size: 2 });
    }
    if rng.gen_bool(0.5) {
        layers.push(LayerSpec::Dense {
            units: rng.gen_range(2..=4),
        });
        layers.push(LayerSpec::Relu);
    }
    let n = rng.gen_range(2..=3);
    let kind = seed % 3;
    let (head, loss) = match kind {
        0 => (
            LayerSpec::Head {
                outputs: 1,
                activation: HeadActivation::Sigmoid,
            },
            LossSpec::Bce {
                labels: (0..n).map(|i| (i % 2) as u8).collect(),
                w_neg: 1.0,
                w_pos: rng.gen_range(1..=4) as f64,
            },
        ),
        1 => (
            LayerSpec::Head {
                outputs: 3,
                activation: HeadActivation::Softmax,
            },
            LossSpec::Ce {
                labels: (0..n).map(|_| rng.gen_range(0..3)).collect(),
            },
        ),
        _ => (
            LayerSpec::Head {
                outputs: 2,
                activation: HeadActivation::Sigmoid,
            },
            LossSpec::Mse {
                targets: (0..2 * n).map(|_| rng.gen_range(0.0..1.0)).collect(),
            },
        ),
    };
    layers.push(head);
    let arch = Architecture {
        channels,
        image_size,
        layers,
    };
    let mut params: Params64 = arch.init_params(seed).expect("valid tiny architecture");
    // Non-zero biases so every bias gradient path is exercised.
    for t in params.iter_mut() {
        if t.name.ends_with(".bias") {
            for v in t.tensor.data_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
    }
    let len = n * channels * image_size * image_size;
    let batch = Tensor::new(
        vec![n, channels, image_size, image_size],
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    TinyNet {
        arch,
        params,
        batch,
        loss,
    }
}

/// Analytic gradients from the tape.
pub fn tape_gradients(net: &TinyNet) -> Params64 {
    let (out, mut tape) = net.arch.forward(&net.params, net.batch.clone()).unwrap();
    let l = match &net.loss {
        LossSpec::Bce { labels, w_neg, w_pos } => tape.weighted_bce(out, labels, *w_neg, *w_pos),
        LossSpec::Ce { labels } => tape.softmax_ce(out, labels),
        LossSpec::Mse { targets } => tape.mse(out, targets),
    }
    .unwrap();
    tape.backward(l).unwrap()
}

#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Relative error with a floor so that near-zero gradients compare on an
/// absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Central differences on the loop forward, skipping coordinates where a
/// ReLU or pooling branch flips inside the stencil.
pub fn check_gradients(net: &TinyNet, h: f64, report: &mut GradReport) {
    let analytic = tape_gradients(net);
    let base = forward(&net.arch, &net.params, &net.batch).decisions;
    for nt in net.params.iter() {
        let g = analytic.get(&nt.name).unwrap();
        for k in 0..nt.tensor.len() {
            let eval = |delta: f64| {
                let mut q: ParameterVector<f64> = net.params.clone();
                q.get_mut(&nt.name).unwrap().data_mut()[k] += delta;
                let o = forward(&net.arch, &q, &net.batch);
                (loss(&o.outputs, &net.loss), o.decisions)
            };
            let (lp, dp) = eval(h);
            let (lm, dm) = eval(-h);
            if dp != base || dm != base {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            let e = rel_err(g.data()[k], numeric);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = format!("{}[{k}] analytic {} numeric {numeric}", nt.name, g.data()[k]);
            }
        }
    }
}

/// AUROC by counting every (positive, negative) pair; ties count one half.
pub fn auroc_pairs(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// (tp, fp, tn, fn) via four independent filters.
pub fn confusion_tally(scores: &[f64], labels: &[u8], threshold: f64) -> [usize; 4] {
    let z = || scores.iter().zip(labels);
    [
        z().filter(|(s, y)| **s >= threshold && **y == 1).count(),
        z().filter(|(s, y)| **s >= threshold && **y == 0).count(),
        z().filter(|(s, y)| **s < threshold && **y == 0).count(),
        z().filter(|(s, y)| **s < threshold && **y == 1).count(),
    ]
}

/// Bilinear resize written as a tent-filter sum over all source pixels.
pub fn bilinear(plane: &[f64], h: usize, w: usize, size: usize) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    for i in 0..size {
        let yc = ((i as f64 + 0.5) * h as f64 / size as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        for j in 0..size {
            let xc = ((j as f64 + 0.5) * w as f64 / size as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let mut acc = 0.0;
            for p in 0..h {
                for q in 0..w {
                    let wy = (1.0 - (yc - p as f64).abs()).max(0.0);
                    let wx = (1.0 - (xc - q as f64).abs()).max(0.0);
                    acc += wy * wx * plane[p * w + q];
                }
            }
            out[i * size + j] = acc;
        }
    }
    out
}

/// Dark thin structures: black top-hat (grey closing minus image) of the
/// red channel over a `(2k+1)²` window, thresholded, restricted to pixels
/// at least `margin` pixels inside the disc's bright region.
pub fn dark_line_mask(red: &[f32], s: usize, k: usize, threshold: f32, inside: &dyn Fn(usize, usize) -> bool) -> Vec<bool> {
    let window = |img: &[f32], f: fn(f32, f32) -> f32, init: f32| -> Vec<f32> {
        let mut out = vec![init; s * s];
        for y in 0..s {
            for x in 0..s {
                let mut acc = init;
                for yy in y.saturating_sub(k)..(y + k + 1).min(s) {
                    for xx in x.saturating_sub(k)..(x + k + 1).min(s) {
                        acc = f(acc, img[yy * s + xx]);
                    }
                }
                out[y * s + x] = acc;
            }
        }
        out
    };
    let dilated = window(red, f32::max, f32::NEG_INFINITY);
    let closed = window(&dilated, f32::min, f32::INFINITY);
    (0..s * s)
        .map(|i| inside(i / s, i % s) && closed[i] - red[i] > threshold)
        .collect()
}
