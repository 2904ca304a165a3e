//! Deterministic paired-image task: outline drawings in, filled colour
//! images out.

use rand::Rng;
use rand_pcg::Pcg64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Validation samples are drawn from indices starting here, so they never
/// coincide with training samples.
pub const VAL_INDEX_OFFSET: u64 = 1 << 32;

/// Stream selector mixed into every per-sample generator.
const STREAM_SALT: u128 = 0x5EED_CA7;

/// Value of uncovered target pixels in every channel.
pub const BACKGROUND: f32 = -1.0;

const BASE_COLOURS: [[f32; 3]; 2] = [[0.7, -0.3, -0.5], [-0.4, 0.6, 0.2]];
const JITTER: f32 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeDraw {
    pub kind: ShapeKind,
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    pub colour: [f32; 3],
}

impl ShapeDraw {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        if x < self.x0 || y < self.y0 || x >= self.x0 + self.w || y >= self.y0 + self.h {
            return false;
        }
        match self.kind {
            ShapeKind::Rectangle => true,
            ShapeKind::Ellipse => {
                let rx = self.w as f32 / 2.0;
                let ry = self.h as f32 / 2.0;
                let dx = (x - self.x0) as f32 + 0.5 - rx;
                let dy = (y - self.y0) as f32 + 0.5 - ry;
                (dx / rx).powi(2) + (dy / ry).powi(2) <= 1.0
            }
        }
    }

    /// Covered pixels with at least one 4-neighbour outside the shape.
    pub fn is_boundary(&self, x: usize, y: usize) -> bool {
        if !self.contains(x, y) {
            return false;
        }
        let out = |xx: Option<usize>, yy: Option<usize>| match (xx, yy) {
            (Some(a), Some(b)) => !self.contains(a, b),
            _ => true,
        };
        out(x.checked_sub(1), Some(y)) || out(Some(x + 1), Some(y)) || out(Some(x), y.checked_sub(1)) || out(Some(x), Some(y + 1))
    }
}

/// Draw list for one sample.
pub fn synth_shapes(seed: u64, index: u64, size: usize, count_range: (usize, usize)) -> Vec<ShapeDraw> {
    let mut rng = Pcg64::new(seed as u128 | ((index as u128) << 64), STREAM_SALT);
    let k = rng.gen_range(count_range.0..=count_range.1);
    let max_side = (size / 2).max(4);
    (0..k)
        .map(|_| {
            let kind = if rng.gen_bool(0.5) {
                ShapeKind::Rectangle
            } else {
                ShapeKind::Ellipse
            };
            let w = rng.gen_range(4..=max_side.min(size - 2));
            let h = rng.gen_range(4..=max_side.min(size - 2));
            let x0 = rng.gen_range(1..=size - 1 - w);
            let y0 = rng.gen_range(1..=size - 1 - h);
            let base = BASE_COLOURS[kind as usize];
            let colour = base.map(|c| (c + rng.gen_range(-JITTER..=JITTER)).clamp(-1.0, 1.0));
            ShapeDraw {
                kind,
                x0,
                y0,
                w,
                h,
                colour,
            }
        })
        .collect()
}

/// One `(outline, filled)` pair: a `1×1×H×W` map in {0, 1} and a
/// `1×3×H×W` image in `[-1, 1]`.
pub fn synth_pair(seed: u64, index: u64, size: usize) -> (Tensor, Tensor) {
    render(&synth_shapes(seed, index, size, (2, 5)), size)
}

pub fn render(shapes: &[ShapeDraw], size: usize) -> (Tensor, Tensor) {
    let hw = size * size;
    let mut input = vec![0.0f32; hw];
    let mut target = vec![BACKGROUND; 3 * hw];
    for s in shapes {
        for y in s.y0..s.y0 + s.h {
            for x in s.x0..s.x0 + s.w {
                if !s.contains(x, y) {
                    continue;
                }
                let p = y * size + x;
                for c in 0..3 {
                    target[c * hw + p] = s.colour[c];
                }
                if s.is_boundary(x, y) {
                    input[p] = 1.0;
                }
            }
        }
    }
    (
        Tensor::new([1, 1, size, size], input),
        Tensor::new([1, 3, size, size], target),
    )
}

/// Stacked inputs and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Tensor,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Samples at the given positions, in order.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Tensor) {
        (gather(&self.inputs, idx), gather(&self.targets, idx))
    }
}

pub fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let [_, c, h, w] = t.shape();
    let per = c * h * w;
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    Tensor::new([idx.len(), c, h, w], data)
}

fn stack(parts: &[Tensor]) -> Tensor {
    let [_, c, h, w] = parts[0].shape();
    let mut data = Vec::with_capacity(parts.len() * c * h * w);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new([parts.len(), c, h, w], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub seed: u64,
    pub image_size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub shape_count_range: (usize, usize),
}

impl Default for SyntheticTask {
    fn default() -> Self {
        SyntheticTask {
            seed: 0,
            image_size: 32,
            n_train: 256,
            n_val: 64,
            shape_count_range: (2, 5),
        }
    }
}

impl SyntheticTask {
    fn build(&self, first: u64, n: usize) -> Dataset {
        let pairs: Vec<(Tensor, Tensor)> = (0..n as u64)
            .into_par_iter()
            .map(|i| {
                let shapes = synth_shapes(self.seed, first + i, self.image_size, self.shape_count_range);
                render(&shapes, self.image_size)
            })
            .collect();
        let (inputs, targets): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        Dataset {
            inputs: stack(&inputs),
            targets: stack(&targets),
        }
    }

    pub fn train(&self) -> Dataset {
        self.build(0, self.n_train)
    }

    pub fn val(&self) -> Dataset {
        self.build(VAL_INDEX_OFFSET, self.n_val)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_are_deterministic() {
        let a = synth_pair(7, 3, 32);
        let b = synth_pair(7, 3, 32);
        assert_eq!(a, b);
        assert_ne!(a, synth_pair(7, 4, 32));
    }

    #[test]
    fn background_and_edges_agree() {
        for index in 0..20 {
            let shapes = synth_shapes(1, index, 32, (2, 5));
            assert!((2..=5).contains(&shapes.len()));
            let (input, target) = render(&shapes, 32);
            let hw = 32 * 32;
            for y in 0..32 {
                for x in 0..32 {
                    let p = y * 32 + x;
                    let covered = shapes.iter().any(|s| s.contains(x, y));
                    if !covered {
                        assert!((0..3).all(|c| target.data()[c * hw + p] == BACKGROUND));
                        assert_eq!(input.data()[p], 0.0);
                    }
                    if input.data()[p] == 1.0 {
                        assert!(shapes.iter().any(|s| s.is_boundary(x, y)));
                    }
                }
            }
        }
    }

    #[test]
    fn shapes_keep_a_margin() {
        for index in 0..50 {
            for s in synth_shapes(2, index, 32, (2, 5)) {
                assert!(s.x0 >= 1 && s.y0 >= 1 && s.x0 + s.w <= 31 && s.y0 + s.h <= 31);
            }
        }
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let task = SyntheticTask {
            n_train: 8,
            n_val: 4,
            ..SyntheticTask::default()
        };
        let (tr, va) = (task.train(), task.val());
        assert_eq!(tr.len(), 8);
        assert_eq!(va.len(), 4);
        assert_eq!(tr.targets.shape(), [8, 3, 32, 32]);
        assert_ne!(tr.gather(&[0]).0, va.gather(&[0]).0);
        assert_eq!(task.train(), tr);
    }
}
