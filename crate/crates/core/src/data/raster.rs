use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Planar RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    /// `3 × H × W`, channel-major.
    data: Vec<f32>,
}

impl ImageBuffer {
    /// Builds an image from planar data, clamping into `[0, 1]`.
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != 3 * width * height {
            return Err(Error::shape(
                "image",
                format!("{width}x{height} needs {} values, got {}", 3 * width * height, data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "image" });
        }
        Ok(Self {
            width,
            height,
            data: data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        Self::new(width, height, vec![value; 3 * width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let plane = self.width * self.height;
        let i = y * self.width + x;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }

    /// `1 × 3 × H × W` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[1, 3, self.height, self.width], |i| T::from_f64(self.data[i] as f64))
    }

    /// Converts the first batch item of an `N × 3 × H × W` tensor, clamping
    /// into `[0, 1]`.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let (_, c, h, w) = t.dims4()?;
        if c != 3 {
            return Err(Error::shape("image", format!("expected 3 channels, got {c}")));
        }
        let data = t.data()[..3 * h * w].iter().map(|v| v.as_f64() as f32).collect();
        Self::new(w, h, data)
    }
}

/// Integer class grid paired with an image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MapRaster {
    width: usize,
    height: usize,
    classes: Vec<u8>,
    num_classes: usize,
}

impl MapRaster {
    pub fn new(width: usize, height: usize, classes: Vec<u8>, num_classes: usize) -> Result<Self> {
        if width == 0 || height == 0 || classes.len() != width * height {
            return Err(Error::shape("map", format!("{width}x{height} vs {} cells", classes.len())));
        }
        if num_classes == 0 || num_classes > 256 {
            return Err(Error::Config(format!("num_classes {num_classes} out of range")));
        }
        if let Some(bad) = classes.iter().find(|&&c| c as usize >= num_classes) {
            return Err(Error::Format(format!("class id {bad} >= {num_classes}")));
        }
        Ok(Self {
            width,
            height,
            classes,
            num_classes,
        })
    }

    pub fn uniform(width: usize, height: usize, class: u8, num_classes: usize) -> Result<Self> {
        Self::new(width, height, vec![class; width * height], num_classes)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.classes[y * self.width + x]
    }

    /// `1 × num_classes × H × W` one-hot tensor.
    pub fn one_hot<T: Scalar>(&self) -> Tensor<T> {
        let plane = self.width * self.height;
        let mut data = vec![T::zero(); self.num_classes * plane];
        for (i, &c) in self.classes.iter().enumerate() {
            data[c as usize * plane + i] = T::one();
        }
        Tensor::from_raw(vec![1, self.num_classes, self.height, self.width], data)
    }

    /// Applies a class-id permutation (`perm[old] = new`).
    pub fn relabel(&self, perm: &[u8]) -> Result<Self> {
        Self::new(
            self.width,
            self.height,
            self.classes.iter().map(|&c| perm[c as usize]).collect(),
            self.num_classes,
        )
    }

    pub fn same_dims(&self, image: &ImageBuffer) -> bool {
        self.width == image.width() && self.height == image.height()
    }
}
