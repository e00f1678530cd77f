use crate::tensor::Tensor;

/// A labelled batch of images `[N, C, H, W]` or clips `[N, C, T, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Self {
        debug_assert_eq!(images.batch(), labels.len());
        Self { images, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}
