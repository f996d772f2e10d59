use crate::{Error, Result};

/// A plain value tensor: row-major `f32` data plus shape metadata.
///
/// `Tensor` is the unit of storage for parameters and checkpoints. Gradients
/// live in the optional `grad` buffer, which always mirrors `data`'s shape.
/// During a forward pass values are copied onto a [`crate::Tape`]; the tape
/// writes accumulated gradients back here after `backward`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::DataLength { expected, got: data.len() });
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f32]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => {
                for (dst, src) in buf.iter_mut().zip(g) {
                    *dst += src;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::DataLength { expected: 6, got: 5 }));
    }

    #[test]
    fn grad_accumulates_across_calls() {
        let mut t = Tensor::zeros(vec![3]).with_grad();
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(t.grad.as_deref(), Some(&[2.0, 3.0, 4.0][..]));
        t.zero_grad();
        assert!(t.grad.is_none());
    }
}
