//! Interpretability artifacts for robust models: input-gradient saliency maps and the
//! loss-maximizing / loss-minimizing bounded perturbations with their explanatory roles.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::lp_geometry::{lp_norm, project_ball, AttackBudget, Norm};
use crate::models::{cross_entropy_per_example, predict_from_logits, LabeledBatch, Model};

/// `|grad_x l|` summed over channels and scaled to a maximum of one per image. Rows of the
/// result have `height * width` entries (the full input for flat inputs).
pub fn saliency<T: Scalar>(model: &Model<T>, x: &Tensor<T>, y: &[usize]) -> Result<Tensor<T>> {
    let (_, g) = model.loss_and_input_grad(x, y)?;
    let shape = model.arch().input_shape();
    let channels = if shape.len() == 3 { shape[0] } else { 1 };
    let plane = g.row_len() / channels;
    let mut out = Vec::with_capacity(x.rows() * plane);
    for row in g.rows_iter() {
        let mut m: Vec<f64> = vec![0.0; plane];
        for c in 0..channels {
            for (k, v) in row[c * plane..(c + 1) * plane].iter().enumerate() {
                m[k] += v.as_f64().abs();
            }
        }
        let top = m.iter().fold(0.0f64, |a, &b| a.max(b));
        out.extend(m.iter().map(|&v| T::of(if top > 0.0 { v / top } else { 0.0 })));
    }
    Tensor::new(vec![x.rows(), plane], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    /// Features whose presence supports the prediction.
    #[serde(rename = "PP")]
    PertinentPositive,
    /// Features whose absence explains the prediction.
    #[serde(rename = "PN")]
    PertinentNegative,
}

/// Roles of `(delta_max, delta_min)`. Correct predictions: the loss-raising perturbation is
/// a pertinent negative and the loss-lowering one a pertinent positive; swapped otherwise.
pub fn roles(correct: bool) -> (Role, Role) {
    if correct {
        (Role::PertinentNegative, Role::PertinentPositive)
    } else {
        (Role::PertinentPositive, Role::PertinentNegative)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub eps: f64,
    pub steps: usize,
    /// Initial step length; halved for an example whenever its step is rejected.
    pub step_size: f64,
    pub clamp_box: Option<(f64, f64)>,
}

impl ContrastiveConfig {
    pub fn new(eps: f64, steps: usize) -> Self {
        ContrastiveConfig { eps, steps, step_size: 2.5 * eps / steps.max(1) as f64, clamp_box: Some((0.0, 1.0)) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub index: usize,
    pub label: usize,
    pub pred: usize,
    pub correct: bool,
    pub delta_max: Vec<f32>,
    pub delta_min: Vec<f32>,
    pub role_max: Role,
    pub role_min: Role,
    pub loss: f64,
    pub loss_max: f64,
    pub loss_min: f64,
    pub norm_max: f64,
    pub norm_min: f64,
    pub pred_max: usize,
    pub pred_min: usize,
}

/// Monotone-accept L2 PGD from zero: a step is kept only if it does not worsen the
/// cross-entropy in the chosen direction, so the zero start bounds the result.
fn monotone_pgd<T: Scalar>(
    model: &Model<T>,
    batch: &LabeledBatch<T>,
    cfg: &ContrastiveConfig,
    ascend: bool,
) -> Result<(Tensor<T>, Vec<f64>)> {
    let budget = AttackBudget { norm: Norm::L2, eps: cfg.eps, clamp_box: None };
    let sign = if ascend { 1.0 } else { -1.0 };
    let n = batch.len();
    let mut delta: Tensor<T> = Tensor::zeros(batch.x.shape());
    let mut alpha = vec![cfg.step_size; n];
    let (mut cur, mut g) = model.loss_and_input_grad(&batch.x, &batch.y)?;
    for _ in 0..cfg.steps {
        let mut cand = delta.clone();
        for i in 0..n {
            let gi = g.row(i);
            let gn = lp_norm(gi, Norm::L2);
            if gn == 0.0 {
                continue;
            }
            let z: Vec<T> =
                delta.row(i).iter().zip(gi).map(|(d, gv)| T::of(d.as_f64() + sign * alpha[i] * gv.as_f64() / gn)).collect();
            let mut p = project_ball(&z, &budget)?;
            if let Some((lo, hi)) = cfg.clamp_box {
                // Keep x + delta in the box; this only shrinks |delta_j|, so the ball still holds.
                for (pj, xj) in p.iter_mut().zip(batch.x.row(i)) {
                    let v = (xj.as_f64() + pj.as_f64()).clamp(lo, hi);
                    *pj = T::of(v - xj.as_f64());
                }
            }
            cand.row_mut(i).copy_from_slice(&p);
        }
        let (val, cg) = model.loss_and_input_grad(&batch.x.add(&cand)?, &batch.y)?;
        for i in 0..n {
            let better = if ascend { val[i] >= cur[i] } else { val[i] <= cur[i] };
            if better {
                delta.row_mut(i).copy_from_slice(cand.row(i));
                cur[i] = val[i];
                g.row_mut(i).copy_from_slice(cg.row(i));
            } else {
                alpha[i] *= 0.5;
            }
        }
    }
    Ok((delta, cur.into_iter().map(|v| v.as_f64()).collect()))
}

/// Loss-maximizing and loss-minimizing perturbations in the L2 ball for each example.
pub fn contrastive<T: Scalar>(model: &Model<T>, batch: &LabeledBatch<T>, cfg: &ContrastiveConfig) -> Result<Vec<Explanation>> {
    if !(cfg.eps >= 0.0 && cfg.eps.is_finite()) || !(cfg.step_size >= 0.0) {
        return Err(Error::InvalidArgument(format!("contrastive needs eps >= 0 and step size >= 0, got {}", cfg.eps)));
    }
    let logits = model.logits(&batch.x)?;
    let pred = predict_from_logits(&logits);
    let loss = cross_entropy_per_example(&logits, &batch.y)?;
    let (dmax, lmax) = monotone_pgd(model, batch, cfg, true)?;
    let (dmin, lmin) = monotone_pgd(model, batch, cfg, false)?;
    let pmax = model.predict(&batch.x.add(&dmax)?)?;
    let pmin = model.predict(&batch.x.add(&dmin)?)?;
    Ok((0..batch.len())
        .map(|i| {
            let correct = pred[i] == batch.y[i];
            let (role_max, role_min) = roles(correct);
            let f = |t: &Tensor<T>| t.row(i).iter().map(|v| v.as_f64() as f32).collect::<Vec<f32>>();
            Explanation {
                index: i,
                label: batch.y[i],
                pred: pred[i],
                correct,
                delta_max: f(&dmax),
                delta_min: f(&dmin),
                role_max,
                role_min,
                loss: loss[i].as_f64(),
                loss_max: lmax[i],
                loss_min: lmin[i],
                norm_max: lp_norm(dmax.row(i), Norm::L2),
                norm_min: lp_norm(dmin.row(i), Norm::L2),
                pred_max: pmax[i],
                pred_min: pmin[i],
            }
        })
        .collect())
}

/// Image planes: `channels` planes of `height x width`.
#[derive(Clone, Copy, Debug)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    /// Interpret a model input shape; flat inputs become a single row.
    pub fn from_input(shape: &[usize]) -> Self {
        match shape {
            [c, h, w] => ImageShape { channels: *c, height: *h, width: *w },
            [h, w] => ImageShape { channels: 1, height: *h, width: *w },
            _ => ImageShape { channels: 1, height: 1, width: shape.iter().product() },
        }
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PGM of a single plane with values in [0, 1] (channels averaged).
pub fn encode_pgm(pixels: &[f32], shape: ImageShape) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", shape.width, shape.height).into_bytes();
    let p = shape.plane();
    for k in 0..p {
        let m = (0..shape.channels).map(|c| pixels[c * p + k] as f64).sum::<f64>() / shape.channels as f64;
        out.push(to_byte(m));
    }
    out
}

fn encode_png(rgb: &[u8], width: usize, height: usize, color: png::ColorType) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::InvalidArgument(format!("png: {e}")))?;
        w.write_image_data(rgb).map_err(|e| Error::InvalidArgument(format!("png: {e}")))?;
    }
    Ok(buf)
}

/// PNG of an image with values in [0, 1]: grayscale for one channel, RGB for three.
pub fn encode_image_png(pixels: &[f32], shape: ImageShape) -> Result<Vec<u8>> {
    let p = shape.plane();
    if shape.channels == 3 {
        let data: Vec<u8> = (0..p).flat_map(|k| (0..3).map(move |c| (c, k))).map(|(c, k)| to_byte(pixels[c * p + k] as f64)).collect();
        encode_png(&data, shape.width, shape.height, png::ColorType::Rgb)
    } else {
        let gray = encode_pgm(pixels, shape);
        let header = gray.len() - p;
        encode_png(&gray[header..], shape.width, shape.height, png::ColorType::Grayscale)
    }
}

/// Signed map scaled by `max |v|`: negative values blue, positive red, zero white.
pub fn diverging_rgb(values: &[f32], shape: ImageShape) -> Vec<u8> {
    let p = shape.plane();
    let summed: Vec<f64> =
        (0..p).map(|k| (0..shape.channels).map(|c| values[c * p + k] as f64).sum::<f64>()).collect();
    let top = summed.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let mut out = Vec::with_capacity(3 * p);
    for v in summed {
        let t = if top > 0.0 { v / top } else { 0.0 };
        let fade = to_byte(1.0 - t.abs());
        if t >= 0.0 {
            out.extend([255, fade, fade]);
        } else {
            out.extend([fade, fade, 255]);
        }
    }
    out
}

/// Grayscale rendering of a signed map: 0.5 is zero, extremes are `±max |v|`.
pub fn diverging_gray(values: &[f32], shape: ImageShape) -> Vec<f32> {
    let p = shape.plane();
    let summed: Vec<f64> =
        (0..p).map(|k| (0..shape.channels).map(|c| values[c * p + k] as f64).sum::<f64>()).collect();
    let top = summed.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    summed.iter().map(|&v| (0.5 + if top > 0.0 { 0.5 * v / top } else { 0.0 }) as f32).collect()
}

/// Write one directory per explanation with original, perturbed and difference images,
/// the saliency map and a `manifest.json` covering all of them. `shape` is the image layout
/// of one input row (flat models see images as vectors).
pub fn write_bundle(
    dir: &Path,
    model: &Model<f32>,
    batch: &LabeledBatch<f32>,
    explanations: &[Explanation],
    cfg: &ContrastiveConfig,
    shape: ImageShape,
) -> Result<PathBuf> {
    if shape.channels * shape.plane() != batch.x.row_len() {
        return Err(Error::shape("write_bundle", format!("image {shape:?} vs {} inputs", batch.x.row_len())));
    }
    let gray = ImageShape { channels: 1, ..shape };
    let sal = saliency(model, &batch.x, &batch.y)?;
    let write = |p: PathBuf, bytes: &[u8]| std::fs::write(&p, bytes).map_err(|e| Error::io(format!("writing {}", p.display()), e));
    let mut entries = Vec::new();
    for e in explanations {
        let sub = dir.join(format!("{:05}", e.index));
        std::fs::create_dir_all(&sub).map_err(|err| Error::io(format!("creating {}", sub.display()), err))?;
        let x: Vec<f32> = batch.x.row(e.index).to_vec();
        let clamp = |d: &[f32]| -> Vec<f32> {
            x.iter()
                .zip(d)
                .map(|(a, b)| match cfg.clamp_box {
                    Some((lo, hi)) => (a + b).clamp(lo as f32, hi as f32),
                    None => a + b,
                })
                .collect()
        };
        let images = [("original", x.clone()), ("max", clamp(&e.delta_max)), ("min", clamp(&e.delta_min))];
        for (name, img) in &images {
            write(sub.join(format!("{name}.pgm")), &encode_pgm(img, shape))?;
            write(sub.join(format!("{name}.png")), &encode_image_png(img, shape)?)?;
        }
        for (name, d) in [("delta_max", &e.delta_max), ("delta_min", &e.delta_min)] {
            write(sub.join(format!("{name}.png")), &encode_png(&diverging_rgb(d, shape), shape.width, shape.height, png::ColorType::Rgb)?)?;
            write(sub.join(format!("{name}.pgm")), &encode_pgm(&diverging_gray(d, shape), gray))?;
        }
        let s: Vec<f32> = sal.row(e.index).to_vec();
        write(sub.join("saliency.pgm"), &encode_pgm(&s, gray))?;
        write(sub.join("saliency.png"), &encode_image_png(&s, gray)?)?;
        entries.push(serde_json::json!({
            "dir": format!("{:05}", e.index),
            "index": e.index,
            "label": e.label,
            "pred": e.pred,
            "correct": e.correct,
            "roles": { "delta_max": e.role_max, "delta_min": e.role_min },
            "losses": { "clean": e.loss, "max": e.loss_max, "min": e.loss_min },
            "norms": { "delta_max": e.norm_max, "delta_min": e.norm_min },
            "pred_max": e.pred_max,
            "pred_min": e.pred_min,
        }));
    }
    let manifest = serde_json::json!({ "eps": cfg.eps, "steps": cfg.steps, "norm": "l2", "examples": entries });
    let path = dir.join("manifest.json");
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    write(path.clone(), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(path)
}
