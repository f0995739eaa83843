use crate::error::Result;
use crate::tensor::Tensor;

/// Original spatial size to crop back to after padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropSpec {
    pub height: usize,
    pub width: usize,
}

impl CropSpec {
    pub fn is_identity_for(&self, x: &Tensor) -> bool {
        let s = x.shape();
        s.h == self.height && s.w == self.width
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if self.is_identity_for(x) {
            return Ok(x.clone());
        }
        x.crop(0, 0, self.height, self.width)
    }
}

/// Mirror-pads the bottom/right edges so H and W become multiples of `m`.
pub fn pad_to_multiple(x: &Tensor, m: usize) -> (Tensor, CropSpec) {
    let s = x.shape();
    let m = m.max(1);
    let crop = CropSpec {
        height: s.h,
        width: s.w,
    };
    let (ph, pw) = ((m - s.h % m) % m, (m - s.w % m) % m);
    if ph == 0 && pw == 0 {
        return (x.clone(), crop);
    }
    (x.pad_reflect(ph, pw), crop)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Rng, Shape};

    #[test]
    fn divisible_sizes_untouched() {
        for (h, w) in [(100, 100), (720, 1280)] {
            let x = Tensor::zeros(Shape::new(1, 1, h, w).unwrap());
            let (p, crop) = pad_to_multiple(&x, 4);
            assert_eq!(p.shape(), x.shape());
            assert!(crop.is_identity_for(&p));
        }
    }

    #[test]
    fn pad_then_crop_restores() {
        let x = Tensor::random_uniform(Shape::new(1, 3, 101, 99).unwrap(), 0.0, 1.0, &mut Rng::new(5));
        let (p, crop) = pad_to_multiple(&x, 4);
        assert_eq!((p.shape().h, p.shape().w), (104, 100));
        // Mirror padding: row 101 copies row 99.
        assert_eq!(p.at(0, 0, 101, 3), x.at(0, 0, 99, 3));
        assert_eq!(crop.apply(&p).unwrap(), x);
    }
}
