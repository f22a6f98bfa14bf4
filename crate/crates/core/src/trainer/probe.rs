use serde::{Deserialize, Serialize};

use super::config::{SceneSet, TrainConfig};
use super::model::scene_features;
use super::optim::Adam;
use crate::diffengine::{ParamSet, Shape, Tensor};
use crate::encoders::GridSpec;
use crate::error::{Error, Result};
use crate::geom;
use crate::synthscene::{PointCloud, PrimitiveKind, Scene, SemanticLabel};

pub const CLASSES: [&str; 3] = ["foreground", "ground", "empty"];
pub const FOREGROUND: usize = 0;
pub const GROUND: usize = 1;
pub const EMPTY: usize = 2;

/// Reach of the two 3×3×3 convolutions between the voxel inputs and `F̃`.
/// Features of cells farther than this from every LiDAR return do not
/// depend on the scene.
pub const RECEPTIVE_RADIUS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub train: SceneSet,
    pub test: SceneSet,
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
    /// Chebyshev radius around LiDAR-occupied cells that defines the probed
    /// cells; `None` probes every cell.
    pub observed_radius: Option<usize>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            train: SceneSet {
                first_seed: 50_000,
                count: 16,
                objects: 4,
            },
            test: SceneSet {
                first_seed: 60_000,
                count: 8,
                objects: 4,
            },
            iterations: 1000,
            lr: 0.05,
            l2: 1e-4,
            observed_radius: Some(RECEPTIVE_RADIUS),
        }
    }
}

/// Per-cell class from the scene geometry: foreground where an object's
/// surface or interior comes within half a cell diagonal of the centre,
/// ground for cells whose centre is less than half a cell above the plane,
/// empty otherwise.
pub fn voxel_labels(scene: &Scene, spec: &GridSpec) -> Vec<usize> {
    let vs = spec.voxel_size();
    let reach = 0.5 * geom::norm(vs);
    (0..spec.cells())
        .map(|i| {
            let c = spec.centre(i);
            let mut ground = false;
            for prim in &scene.primitives {
                let d = prim.sdf(c);
                match (prim.kind, prim.label) {
                    (PrimitiveKind::Plane, _) | (_, SemanticLabel::Ground) => ground |= d < 0.5 * vs[2],
                    _ if d < reach => return FOREGROUND,
                    _ => {}
                }
            }
            if ground {
                GROUND
            } else {
                EMPTY
            }
        })
        .collect()
}

/// Cells within `radius` (Chebyshev, in cells) of a cell holding a LiDAR return.
pub fn observed_cells(cloud: &PointCloud, spec: &GridSpec, radius: usize) -> Vec<bool> {
    let mut out = vec![false; spec.cells()];
    let d = spec.dims;
    let r = radius as isize;
    for p in &cloud.xyz {
        let Some(cell) = spec.locate(*p) else { continue };
        let c = spec.coords(cell);
        for dx in -r..=r {
            for dy in -r..=r {
                for dz in -r..=r {
                    let q = [c[0] as isize + dx, c[1] as isize + dy, c[2] as isize + dz];
                    if (0..3).all(|k| (0..d[k] as isize).contains(&q[k])) {
                        out[spec.index(q.map(|x| x as usize))] = true;
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub iou: [f64; 3],
    pub mean_iou: f64,
    pub n_train: usize,
    pub n_test: usize,
}

impl ProbeReport {
    /// Two-column CSV table with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        s += &format!("accuracy,{}\n", self.accuracy);
        for (c, v) in CLASSES.iter().zip(self.iou) {
            s += &format!("iou_{c},{v}\n");
        }
        s += &format!("mean_iou,{}\n", self.mean_iou);
        s
    }
}

fn standardize(train: &Tensor, test: &Tensor) -> (Tensor, Tensor) {
    let (n, d) = (train.rows(), train.cols());
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for r in 0..n {
        for (c, x) in train.row_slice(r).iter().enumerate() {
            mean[c] += x / n as f64;
        }
    }
    for r in 0..n {
        for (c, x) in train.row_slice(r).iter().enumerate() {
            var[c] += (x - mean[c]).powi(2) / n as f64;
        }
    }
    let sd: Vec<f64> = var.iter().map(|v| v.sqrt().max(1e-8)).collect();
    let apply = |t: &Tensor| {
        let mut o = t.clone();
        for r in 0..o.rows() {
            for (c, x) in o.row_slice_mut(r).iter_mut().enumerate() {
                *x = (*x - mean[c]) / sd[c];
            }
        }
        o
    };
    (apply(train), apply(test))
}

fn logits(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<[f64; 3]> {
    (0..x.rows())
        .map(|r| {
            let xr = x.row_slice(r);
            std::array::from_fn(|k| b.data()[k] + xr.iter().enumerate().map(|(c, v)| v * w.get(c, k)).sum::<f64>())
        })
        .collect()
}

fn softmax3(z: [f64; 3]) -> [f64; 3] {
    let m = z[0].max(z[1]).max(z[2]);
    let e = z.map(|v| (v - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

fn argmax3(z: &[f64; 3]) -> usize {
    (0..3).fold(0, |b, k| if z[k] > z[b] { k } else { b })
}

/// Multinomial logistic regression on standardized features, full batch,
/// zero initialization; deterministic for fixed inputs.
pub fn fit_probe(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    if train_x.rows() != train_y.len() || test_x.rows() != test_y.len() || train_x.cols() != test_x.cols() {
        return Err(Error::Shape("probe features and labels disagree".into()));
    }
    if train_y.is_empty() || test_y.is_empty() {
        return Err(Error::invalid("probe needs training and test cells"));
    }
    if train_y.iter().chain(test_y).any(|&y| y >= 3) {
        return Err(Error::invalid("probe labels must be 0, 1 or 2"));
    }
    let (x, xt) = standardize(train_x, test_x);
    let (n, d) = (x.rows(), x.cols());
    let mut p = ParamSet::new();
    p.insert("w", Tensor::zeros(Shape::new(d, 3)))?;
    p.insert("b", Tensor::zeros(Shape::new(1, 3)))?;
    let mut adam = Adam::new(&p, 0.9, 0.999, 1e-8)?;
    for _ in 0..cfg.iterations {
        let (w, b) = (p.get("w")?.clone(), p.get("b")?.clone());
        let z = logits(&x, &w, &b);
        let mut gw = w.map(|v| cfg.l2 * v);
        let mut gb = Tensor::zeros(Shape::new(1, 3));
        for (r, zr) in z.iter().enumerate() {
            let pr = softmax3(*zr);
            let xr = x.row_slice(r);
            for k in 0..3 {
                let g = (pr[k] - (train_y[r] == k) as u8 as f64) / n as f64;
                gb.data_mut()[k] += g;
                for c in 0..d {
                    gw.data_mut()[c * 3 + k] += g * xr[c];
                }
            }
        }
        adam.step(&mut p, &[("w".into(), gw), ("b".into(), gb)], cfg.lr)?;
    }
    let pred: Vec<usize> = logits(&xt, p.get("w")?, p.get("b")?).iter().map(argmax3).collect();
    Ok(score(&pred, test_y, n))
}

fn score(pred: &[usize], truth: &[usize], n_train: usize) -> ProbeReport {
    let correct = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    let iou: [f64; 3] = std::array::from_fn(|k| {
        let inter = pred.iter().zip(truth).filter(|(a, b)| **a == k && **b == k).count();
        let union = pred.iter().zip(truth).filter(|(a, b)| **a == k || **b == k).count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    });
    ProbeReport {
        accuracy: correct as f64 / truth.len() as f64,
        iou,
        mean_iou: iou.iter().sum::<f64>() / 3.0,
        n_train,
        n_test: truth.len(),
    }
}

fn corpus(params: &ParamSet, cfg: &TrainConfig, set: &SceneSet, radius: Option<usize>) -> Result<(Tensor, Vec<usize>)> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut cols = 0;
    for sample in set.generate(&cfg.rig)? {
        let f = scene_features(params, &sample, cfg, None)?;
        cols = f.cols();
        let keep = match radius {
            Some(r) => observed_cells(&sample.cloud, &cfg.grid, r),
            None => vec![true; f.rows()],
        };
        for (i, y) in voxel_labels(&sample.scene, &cfg.grid).into_iter().enumerate() {
            if keep[i] {
                data.extend_from_slice(f.row_slice(i));
                labels.push(y);
            }
        }
    }
    Ok((Tensor::new(Shape::new(labels.len(), cols), data)?, labels))
}

/// Frozen-feature probe of `F̃` on held-out synthetic scenes.
pub fn linear_probe(params: &ParamSet, cfg: &TrainConfig, probe: &ProbeConfig) -> Result<ProbeReport> {
    let (x, y) = corpus(params, cfg, &probe.train, probe.observed_radius)?;
    let (xt, yt) = corpus(params, cfg, &probe.test, probe.observed_radius)?;
    fit_probe(&x, &y, &xt, &yt, probe)
}
