//! Procedural stroke-shape images with known content and transformation
//! factors: shape class (content), rotation angle bin and shear bin.
//!
//! Each sample is identified by (class, angle bin, deform bin, row). The
//! per-row nuisance draws (angle jitter inside the bin, shear inside the bin,
//! scale, stroke width) depend on (seed, class, deform bin, row) only, so the
//! same row rendered in different angle bins differs purely by rotation.

use serde::{Deserialize, Serialize};

use rand::Rng as _;

use super::{LabeledImageSet, TransformLabels};
use crate::error::{ensure, Error, Result};
use crate::rng::{self, stream};
use crate::tensor::Tensor;

type Polyline = &'static [(f64, f64)];

/// Shape glyphs as polylines in `[-1, 1]²`, y pointing up. None of them is
/// invariant under a non-trivial rotation.
const GLYPHS: &[&[Polyline]] = &[
    // L
    &[&[(-0.5, 0.8), (-0.5, -0.8), (0.6, -0.8)]],
    // T
    &[&[(-0.7, 0.8), (0.7, 0.8)], &[(0.0, 0.8), (0.0, -0.8)]],
    // F
    &[&[(-0.4, -0.8), (-0.4, 0.8), (0.6, 0.8)], &[(-0.4, 0.05), (0.35, 0.05)]],
    // 7
    &[&[(-0.6, 0.8), (0.6, 0.8), (-0.2, -0.8)]],
    // P
    &[&[(-0.4, -0.8), (-0.4, 0.8), (0.4, 0.8), (0.4, 0.0), (-0.4, 0.0)]],
    // J
    &[&[(0.3, 0.8), (0.3, -0.6), (-0.1, -0.8), (-0.5, -0.5)]],
    // Y
    &[&[(-0.6, 0.8), (0.0, 0.0), (0.6, 0.8)], &[(0.0, 0.0), (0.0, -0.8)]],
    // 4
    &[&[(0.3, -0.8), (0.3, 0.8), (-0.6, -0.2), (0.6, -0.2)]],
];

pub const MAX_SHAPE_CLASSES: usize = GLYPHS.len();

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapeGenConfig {
    pub classes: usize,
    /// Samples per (class, angle bin, deform bin) cell.
    pub n_per_cell: usize,
    pub angle_bins: usize,
    pub deform_bins: usize,
    pub image_size: usize,
    /// Half stroke width range, in units of the image half-width.
    pub stroke_min: f64,
    pub stroke_max: f64,
    /// Shear range split evenly into `deform_bins`.
    pub shear_min: f64,
    pub shear_max: f64,
    /// Glyph scale range.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Fraction of a bin's width covered by the within-bin jitter.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for ShapeGenConfig {
    fn default() -> Self {
        ShapeGenConfig {
            classes: 5,
            n_per_cell: 62,
            angle_bins: 8,
            deform_bins: 4,
            image_size: 28,
            stroke_min: 0.09,
            stroke_max: 0.13,
            shear_min: -0.6,
            shear_max: 0.6,
            scale_min: 0.55,
            scale_max: 0.65,
            jitter: 0.5,
            seed: 0,
        }
    }
}

impl ShapeGenConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.classes >= 1 && self.n_per_cell >= 1 && self.angle_bins >= 1 && self.deform_bins >= 1,
            Error::config("shape generator counts must be at least 1")
        );
        ensure!(
            self.classes <= MAX_SHAPE_CLASSES,
            Error::config(format!("at most {MAX_SHAPE_CLASSES} shape classes are available"))
        );
        ensure!(self.image_size >= 16, Error::config("image_size must be at least 16"));
        ensure!(
            self.stroke_min > 0.0 && self.stroke_min <= self.stroke_max,
            Error::config("invalid stroke range")
        );
        ensure!(self.shear_min <= self.shear_max, Error::config("invalid shear range"));
        ensure!(
            self.scale_min > 0.0 && self.scale_min <= self.scale_max,
            Error::config("invalid scale range")
        );
        ensure!((0.0..=1.0).contains(&self.jitter), Error::config("jitter must lie in [0, 1]"));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.classes * self.angle_bins * self.deform_bins * self.n_per_cell
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row index of a sample in the generated set.
    pub fn index(&self, class: usize, angle_bin: usize, deform_bin: usize, row: usize) -> usize {
        ((class * self.angle_bins + angle_bin) * self.deform_bins + deform_bin) * self.n_per_cell + row
    }
}

struct Nuisance {
    angle_jitter: f64,
    shear: f64,
    scale: f64,
    stroke: f64,
}

fn draw_nuisance(cfg: &ShapeGenConfig, class: usize, deform_bin: usize, row: usize) -> Nuisance {
    let key = rng::derive(cfg.seed, stream::SHAPES, class as u64);
    let mut r = rng::rng(rng::derive(key, deform_bin as u64, row as u64));
    let mut centered = || r.random::<f64>() - 0.5;
    let angle_width = 360.0 / cfg.angle_bins as f64;
    let angle_jitter = centered() * cfg.jitter * angle_width;
    let shear_width = (cfg.shear_max - cfg.shear_min) / cfg.deform_bins as f64;
    let shear_center = cfg.shear_min + (deform_bin as f64 + 0.5) * shear_width;
    let shear = shear_center + centered() * cfg.jitter * shear_width;
    let scale = cfg.scale_min + (centered() + 0.5) * (cfg.scale_max - cfg.scale_min);
    let stroke = cfg.stroke_min + (centered() + 0.5) * (cfg.stroke_max - cfg.stroke_min);
    Nuisance {
        angle_jitter,
        shear,
        scale,
        stroke,
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Render one glyph: shear in the glyph frame, scale, then rotate
/// counter-clockwise by `angle_deg` about the image centre.
fn render(class: usize, angle_deg: f64, n: &Nuisance, size: usize, out: &mut [f32]) {
    let theta = angle_deg.to_radians();
    let (s, c) = (libm::sin(theta), libm::cos(theta));
    let place = |(x, y): (f64, f64)| {
        let (x, y) = ((x + n.shear * y) * n.scale, y * n.scale);
        (c * x - s * y, s * x + c * y)
    };
    let segments: Vec<((f64, f64), (f64, f64))> = GLYPHS[class]
        .iter()
        .flat_map(|line| line.windows(2).map(|w| (place(w[0]), place(w[1]))))
        .collect();
    let half = size as f64 / 2.0;
    let center = (size as f64 - 1.0) / 2.0;
    let pixel = 1.0 / half;
    for i in 0..size {
        for j in 0..size {
            let p = ((j as f64 - center) / half, (center - i as f64) / half);
            let d = segments
                .iter()
                .map(|&(a, b)| segment_distance(p, a, b))
                .fold(f64::INFINITY, f64::min);
            let v = (0.5 + (n.stroke - d) / pixel).clamp(0.0, 1.0);
            out[i * size + j] = v as f32;
        }
    }
}

/// Generate the full labelled grid of shapes. A pure function of `cfg`.
pub fn gen_shapes(cfg: &ShapeGenConfig) -> Result<LabeledImageSet> {
    cfg.validate()?;
    let size = cfg.image_size;
    let n = cfg.len();
    let mut images = vec![0f32; n * size * size];
    let mut content = vec![0u32; n];
    let mut factors = vec![0u32; n * 2];
    let angle_width = 360.0 / cfg.angle_bins as f64;
    for class in 0..cfg.classes {
        for deform in 0..cfg.deform_bins {
            for row in 0..cfg.n_per_cell {
                let nz = draw_nuisance(cfg, class, deform, row);
                for angle in 0..cfg.angle_bins {
                    let idx = cfg.index(class, angle, deform, row);
                    let deg = angle as f64 * angle_width + nz.angle_jitter;
                    render(class, deg, &nz, size, &mut images[idx * size * size..(idx + 1) * size * size]);
                    content[idx] = class as u32;
                    factors[2 * idx] = angle as u32;
                    factors[2 * idx + 1] = deform as u32;
                }
            }
        }
    }
    let set = LabeledImageSet {
        name: "shapes".into(),
        images: Tensor::new(vec![n, size, size, 1], images),
        content_labels: content,
        num_classes: cfg.classes,
        transform_labels: Some(TransformLabels {
            values: factors,
            bins: vec![cfg.angle_bins, cfg.deform_bins],
            names: vec!["angle".into(), "deform".into()],
        }),
    };
    set.validate()?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ShapeGenConfig {
        ShapeGenConfig {
            classes: 3,
            n_per_cell: 10,
            angle_bins: 8,
            deform_bins: 4,
            ..ShapeGenConfig::default()
        }
    }

    #[test]
    fn size_follows_the_grid() {
        let set = gen_shapes(&small()).unwrap();
        assert_eq!(set.len(), 960);
        assert_eq!(set.images.shape, vec![960, 28, 28, 1]);
        let t = set.transform_labels.as_ref().unwrap();
        assert_eq!(t.bins, vec![8, 4]);
        let idx = small().index(2, 5, 1, 7);
        assert_eq!(set.content_labels[idx], 2);
        assert_eq!(&t.values[2 * idx..2 * idx + 2], &[5, 1]);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_shapes(&small()).unwrap();
        let b = gen_shapes(&small()).unwrap();
        assert_eq!(a.images.data, b.images.data);
        let other = gen_shapes(&ShapeGenConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.images.data, other.images.data);
    }

    #[test]
    fn opposite_angle_bins_are_half_turns() {
        let cfg = small();
        let set = gen_shapes(&cfg).unwrap();
        let s = cfg.image_size;
        for class in 0..cfg.classes {
            for row in [0, 3, 9] {
                let a = set.images.row(cfg.index(class, 0, 2, row));
                let b = set.images.row(cfg.index(class, 4, 2, row));
                let mut mad = 0.0f64;
                for i in 0..s {
                    for j in 0..s {
                        let rotated = a[(s - 1 - i) * s + (s - 1 - j)];
                        mad += (rotated - b[i * s + j]).abs() as f64;
                    }
                }
                mad /= (s * s) as f64;
                assert!(mad < 0.01, "class {class} row {row}: {mad}");
            }
        }
    }

    #[test]
    fn glyphs_have_visible_ink() {
        let set = gen_shapes(&small()).unwrap();
        for i in (0..set.len()).step_by(37) {
            let ink: f32 = set.images.row(i).iter().sum();
            assert!(ink > 20.0, "row {i} has ink {ink}");
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for bad in [
            ShapeGenConfig { classes: 0, ..small() },
            ShapeGenConfig { image_size: 8, ..small() },
            ShapeGenConfig { classes: 99, ..small() },
        ] {
            assert!(matches!(gen_shapes(&bad), Err(Error::Config(_))));
        }
    }
}
