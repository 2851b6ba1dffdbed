//! Resizing and the pixel-permutation augmentations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn chw(op: &'static str, t: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape(op, format!("expected [C,H,W], got {s:?}"))),
    }
}

/// Bilinear resize with half-pixel centres (no antialiasing), clamped to [0,1].
pub fn resize(img: &Tensor<f32>, target: (usize, usize)) -> Result<Tensor<f32>> {
    let (c, h, w) = chw("resize", img)?;
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::shape("resize", "target extents must be ≥ 1"));
    }
    if (th, tw) == (h, w) {
        return Ok(img.map(|v| v.clamp(0.0, 1.0)));
    }
    let axis = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, f32) {
        let scale = src_len as f64 / dst_len as f64;
        let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    let cols: Vec<_> = (0..tw).map(|x| axis(x, w, tw)).collect();
    let rows: Vec<_> = (0..th).map(|y| axis(y, h, th)).collect();
    let src = img.data();
    let mut out = Vec::with_capacity(c * th * tw);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(vec![c, th, tw], out)
}

/// Exact pixel permutations used to enlarge the training set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augment {
    /// Mirror left–right.
    FlipH,
    /// Mirror top–bottom.
    FlipV,
    /// Quarter turn clockwise.
    Rot90,
    Rot180,
    Rot270,
}

impl Augment {
    pub const ALL: [Augment; 5] = [
        Augment::FlipH,
        Augment::FlipV,
        Augment::Rot90,
        Augment::Rot180,
        Augment::Rot270,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Augment::FlipH => "flip_h",
            Augment::FlipV => "flip_v",
            Augment::Rot90 => "rot90",
            Augment::Rot180 => "rot180",
            Augment::Rot270 => "rot270",
        }
    }

    pub fn is_rotation(self) -> bool {
        matches!(self, Augment::Rot90 | Augment::Rot180 | Augment::Rot270)
    }
}

impl fmt::Display for Augment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Augment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Augment::ALL
            .into_iter()
            .find(|a| a.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown augmentation {s:?}")))
    }
}

/// Applies one augmentation. Rotations need a square image.
pub fn augment(img: &Tensor<f32>, op: Augment) -> Result<Tensor<f32>> {
    let (c, h, w) = chw("augment", img)?;
    if op.is_rotation() && h != w {
        return Err(Error::shape(
            "augment",
            format!("{op} needs a square image, got {h}×{w}"),
        ));
    }
    let src = img.data();
    // destination (y, x) reads source index given by `from`
    let from = |y: usize, x: usize| -> (usize, usize) {
        match op {
            Augment::FlipH => (y, w - 1 - x),
            Augment::FlipV => (h - 1 - y, x),
            Augment::Rot90 => (h - 1 - x, y),
            Augment::Rot180 => (h - 1 - y, w - 1 - x),
            Augment::Rot270 => (x, w - 1 - y),
        }
    };
    let mut out = Vec::with_capacity(src.len());
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = from(y, x);
                out.push(src[ch * h * w + sy * w + sx]);
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: &[&[f32]]) -> Tensor<f32> {
        let h = rows.len();
        let w = rows[0].len();
        Tensor::new(vec![1, h, w], rows.concat()).unwrap()
    }

    #[test]
    fn rot90_clockwise() {
        let t = grid(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let r = augment(&t, Augment::Rot90).unwrap();
        assert_eq!(r.data(), &[3.0, 1.0, 4.0, 2.0]);
        let r = augment(&t, Augment::Rot270).unwrap();
        assert_eq!(r.data(), &[2.0, 4.0, 1.0, 3.0]);
        let r = augment(&t, Augment::FlipH).unwrap();
        assert_eq!(r.data(), &[2.0, 1.0, 4.0, 3.0]);
        let r = augment(&t, Augment::FlipV).unwrap();
        assert_eq!(r.data(), &[3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn rotation_of_non_square_fails() {
        let t = grid(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        assert!(augment(&t, Augment::Rot90).is_err());
        assert!(augment(&t, Augment::FlipH).is_ok());
    }

    #[test]
    fn resize_examples() {
        let t = grid(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(resize(&t, (1, 1)).unwrap().data(), &[0.5]);
        assert_eq!(resize(&t, (2, 2)).unwrap(), t);
        // 4×4 horizontal ramp 0, 1/3, 2/3, 1 → samples at source x = 0.5 and 2.5
        let row = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        let ramp = grid(&[&row, &row, &row, &row]);
        let r = resize(&ramp, (2, 2)).unwrap();
        let expected = [1.0 / 6.0, 5.0 / 6.0];
        for (v, e) in r.data().iter().zip(expected.iter().cycle()) {
            assert!((v - e).abs() < 1e-6);
        }
    }

    #[test]
    fn augment_names_parse() {
        for a in Augment::ALL {
            assert_eq!(a.as_str().parse::<Augment>().unwrap(), a);
        }
        assert!("shear".parse::<Augment>().is_err());
    }
}
