use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Relu,
    Sigmoid,
    Add,
}

/// Dispatches on `kind`; `b` is required for (and only for) `Add`.
pub fn elementwise(kind: Elementwise, a: &Tensor<f32>, b: Option<&Tensor<f32>>) -> Result<Tensor<f32>> {
    match (kind, b) {
        (Elementwise::Relu, None) => Ok(relu(a)),
        (Elementwise::Sigmoid, None) => Ok(sigmoid(a)),
        (Elementwise::Add, Some(b)) => add(a, b),
        (Elementwise::Add, None) => Err(Error::invalid("add needs a second operand")),
        (_, Some(_)) => Err(Error::invalid("unary op given a second operand")),
    }
}

pub fn relu(a: &Tensor<f32>) -> Tensor<f32> {
    a.map(|v| v.max(0.0))
}

#[inline]
pub fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(a: &Tensor<f32>) -> Tensor<f32> {
    a.map(sigmoid_scalar)
}

pub fn add(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut out = a.clone();
    add_assign(&mut out, b)?;
    Ok(out)
}

pub fn add_assign(a: &mut Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("add of {} and {}", a.shape(), b.shape())));
    }
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
    Ok(())
}

/// Zeroes `grad` wherever the ReLU output was not positive.
pub fn relu_backward_in_place(grad: &mut Tensor<f32>, relu_out: &Tensor<f32>) {
    debug_assert_eq!(grad.shape(), relu_out.shape());
    for (g, &y) in grad.data_mut().iter_mut().zip(relu_out.data()) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn scalar_cases() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![-1.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
        let z = Tensor::zeros(Shape::new(1, 1, 1, 1));
        assert_eq!(sigmoid(&z).data(), &[0.5]);
        assert_eq!(add(&x, &Tensor::zeros(x.shape())).unwrap(), x);
        assert!(sigmoid_scalar(-100.0) >= 0.0 && sigmoid_scalar(100.0) <= 1.0);
    }

    #[test]
    fn dispatch_and_errors() {
        let x = Tensor::ones(Shape::new(1, 1, 2, 2));
        let y = Tensor::ones(Shape::new(1, 1, 1, 4));
        assert!(elementwise(Elementwise::Add, &x, Some(&y)).is_err());
        assert!(elementwise(Elementwise::Add, &x, None).is_err());
        assert!(elementwise(Elementwise::Relu, &x, Some(&x)).is_err());
        assert_eq!(elementwise(Elementwise::Add, &x, Some(&x)).unwrap().data(), &[2.0; 4]);
    }
}
