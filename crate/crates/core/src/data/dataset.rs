use std::path::Path;

use ndarray::{Array2, ArrayD, Axis};
use serde::{Deserialize, Serialize};

use super::container::Container;
use crate::error::{Error, Result};
use crate::real::Real;

const KIND: &str = "dataset";

/// Labeled image batch `[n, c, h, w]` with pixels in `[0, 1]`, optionally
/// carrying the exact latent code (`[n, c*h*w]`) of every image.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorDataset<T: Real> {
    images: ArrayD<T>,
    labels: Vec<usize>,
    num_classes: usize,
    latents: Option<Array2<T>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetMeta {
    num_classes: usize,
}

/// First out-of-range pixel as `(sample index, value)`.
fn find_out_of_range<T: Real>(images: &ArrayD<T>) -> Option<(usize, f64)> {
    for (i, sample) in images.outer_iter().enumerate() {
        if let Some(v) = sample.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Some((i, v.as_f64()));
        }
    }
    None
}

impl<T: Real> TensorDataset<T> {
    pub fn new(
        images: ArrayD<T>,
        labels: Vec<usize>,
        num_classes: usize,
        latents: Option<Array2<T>>,
    ) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::shape("[n, c, h, w]", images.shape()));
        }
        let n = images.shape()[0];
        if n == 0 {
            return Err(Error::Empty("dataset".into()));
        }
        if labels.len() != n {
            return Err(Error::shape(format!("{n} labels"), format!("{} labels", labels.len())));
        }
        if num_classes < 1 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        if let Some((index, value)) = find_out_of_range(&images) {
            return Err(Error::PixelRange { index, value });
        }
        if let Some(z) = &latents {
            let d = images.len() / n;
            if z.dim() != (n, d) {
                return Err(Error::shape([n, d], z.shape()));
            }
        }
        Ok(Self {
            images: images.as_standard_layout().into_owned(),
            labels,
            num_classes,
            latents,
        })
    }

    pub fn images(&self) -> &ArrayD<T> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn latents(&self) -> Option<&Array2<T>> {
        self.latents.as_ref()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[c, h, w]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> (ArrayD<T>, Vec<usize>) {
        (
            self.images.select(Axis(0), indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (images, labels) = self.batch(indices);
        let latents = self.latents.as_ref().map(|z| z.select(Axis(0), indices));
        Self::new(images, labels, self.num_classes, latents)
    }

    /// First `n` samples (all of them when `n` exceeds the length).
    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Splits into the first `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> Result<(Self, Self)> {
        if n == 0 || n >= self.len() {
            return Err(Error::Config(format!(
                "split point {n} must lie strictly inside 0..{}",
                self.len()
            )));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        Ok((self.subset(&head)?, self.subset(&tail)?))
    }

    pub fn cast<U: Real>(&self) -> TensorDataset<U> {
        TensorDataset {
            images: self.images.mapv(|v| U::of(v.as_f64())),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            latents: self.latents.as_ref().map(|z| z.mapv(|v| U::of(v.as_f64()))),
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = serde_json::to_value(DatasetMeta {
            num_classes: self.num_classes,
        })?;
        let mut c = Container::new(KIND, None, meta);
        c.push_real("images", &self.images);
        let labels: Vec<u32> = self.labels.iter().map(|&y| y as u32).collect();
        c.push_u32("labels", &labels);
        if let Some(z) = &self.latents {
            c.push_real("latents", &z.clone().into_dyn());
        }
        Ok(c)
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        if c.kind != KIND {
            return Err(Error::CheckpointKind {
                found: c.kind.clone(),
                expected: KIND.into(),
            });
        }
        let meta: DatasetMeta =
            serde_json::from_value(c.config.clone()).map_err(|e| Error::format(path, format!("metadata: {e}")))?;
        let images = c.real::<T>("images")?;
        let labels = c.u32s("labels")?.into_iter().map(|y| y as usize).collect();
        let latents = match c.entry("latents") {
            Some(_) => Some(
                c.real::<T>("latents")?
                    .into_dimensionality()
                    .map_err(|_| Error::format(path, "latents must be 2-D"))?,
            ),
            None => None,
        };
        Self::new(images, labels, meta.num_classes, latents)
    }

    /// Atomic write; an existing file at `path` is replaced only on success.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    /// Loads and validates shape, labels and pixel range.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::IxDyn;
    use rand::Rng;

    fn random_dataset(n: usize) -> TensorDataset<f64> {
        let mut rng = seeded(5);
        let images = ArrayD::from_shape_simple_fn(IxDyn(&[n, 1, 2, 2]), || rng.random::<f64>());
        let labels = (0..n).map(|i| i % 3).collect();
        let latents = Array2::from_shape_simple_fn((n, 4), || rng.random::<f64>() - 0.5);
        TensorDataset::new(images, labels, 3, Some(latents)).unwrap()
    }

    #[test]
    fn save_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let ds = random_dataset(17);
        ds.save(&path).unwrap();
        assert_eq!(TensorDataset::<f64>::load(&path).unwrap(), ds);
    }

    #[test]
    fn out_of_range_pixel_names_sample() {
        let mut images = ArrayD::from_elem(IxDyn(&[3, 1, 1, 2]), 0.5);
        images[[2, 0, 0, 1]] = 1.5;
        let err = TensorDataset::new(images, vec![0, 0, 0], 1, None).unwrap_err();
        assert!(matches!(err, Error::PixelRange { index: 2, value } if value == 1.5));
    }

    #[test]
    fn out_of_range_file_is_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let ds = random_dataset(4);
        let mut c = ds.to_container().unwrap();
        let mut images = ds.images().clone();
        images[[1, 0, 1, 1]] = 1.5;
        c = {
            let mut fresh = Container::new(c.kind.clone(), None, c.config.clone());
            fresh.push_real("images", &images);
            fresh.push_u32("labels", &c.u32s("labels").unwrap());
            fresh
        };
        c.save(&path).unwrap();
        assert!(matches!(
            TensorDataset::<f64>::load(&path),
            Err(Error::PixelRange { index: 1, .. })
        ));
    }

    #[test]
    fn truncated_file_returns_structured_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        random_dataset(6).save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(TensorDataset::<f64>::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn subset_and_split() {
        let ds = random_dataset(10);
        let (a, b) = ds.split_at(4).unwrap();
        assert_eq!((a.len(), b.len()), (4, 6));
        assert_eq!(b.labels()[0], ds.labels()[4]);
        assert_eq!(a.latents().unwrap().row(3), ds.latents().unwrap().row(3));
        assert!(ds.split_at(10).is_err());
    }
}
