use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam moments for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

impl AdamState {
    pub fn for_shape(like: &Tensor) -> Self {
        Self {
            m: Tensor::zeros_like(like),
            v: Tensor::zeros_like(like),
            step: 0,
        }
    }
}

/// A trainable tensor with its gradient buffer, optional binary prune mask
/// and optimizer state.
///
/// Invariant: wherever `mask` is 0, `value` is exactly 0 and any stored
/// gradient is 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub mask: Option<Tensor>,
    pub adam: AdamState,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let adam = AdamState::for_shape(&value);
        Self {
            value,
            grad: None,
            mask: None,
            adam,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// Number of entries not removed by the mask.
    pub fn live(&self) -> usize {
        match &self.mask {
            Some(m) => m.data().iter().filter(|&&v| v != 0.0).count(),
            None => self.value.len(),
        }
    }

    /// Number of entries whose value is not exactly zero.
    pub fn nonzero(&self) -> usize {
        self.value.data().iter().filter(|&&v| v != 0.0).count()
    }

    pub fn is_live(&self, i: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m.data()[i] != 0.0)
    }

    /// Install a mask and zero the masked entries (value, grad and moments).
    pub fn set_mask(&mut self, mask: Tensor) -> Result<()> {
        if mask.shape() != self.value.shape() {
            return Err(Error::shape(format!(
                "mask {:?} for parameter {:?}",
                mask.shape(),
                self.value.shape()
            )));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::contract("mask entries must be 0 or 1"));
        }
        self.mask = Some(mask);
        self.apply_mask();
        Ok(())
    }

    /// Mark entry `i` as pruned.
    pub fn prune_entry(&mut self, i: usize) {
        let mask = self
            .mask
            .get_or_insert_with(|| Tensor::filled(self.value.rows(), self.value.cols(), 1.0));
        mask.data_mut()[i] = 0.0;
        self.value.data_mut()[i] = 0.0;
        self.adam.m.data_mut()[i] = 0.0;
        self.adam.v.data_mut()[i] = 0.0;
        if let Some(g) = &mut self.grad {
            g.data_mut()[i] = 0.0;
        }
    }

    pub fn apply_mask(&mut self) {
        let Some(mask) = &self.mask else { return };
        let targets = [
            Some(&mut self.value),
            self.grad.as_mut(),
            Some(&mut self.adam.m),
            Some(&mut self.adam.v),
        ];
        for t in targets.into_iter().flatten() {
            for (x, &keep) in t.data_mut().iter_mut().zip(mask.data()) {
                if keep == 0.0 {
                    *x = 0.0;
                }
            }
        }
    }

    /// Add `g` into the gradient buffer, zeroing masked entries.
    pub fn accumulate_grad(&mut self, g: &Tensor) {
        match &mut self.grad {
            Some(acc) => acc.add_assign(g),
            None => self.grad = Some(g.clone()),
        }
        if let (Some(mask), Some(acc)) = (&self.mask, &mut self.grad) {
            for (x, &keep) in acc.data_mut().iter_mut().zip(mask.data()) {
                if keep == 0.0 {
                    *x = 0.0;
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Keep columns `idx` of value, mask, grad and optimizer moments.
    pub fn keep_cols(&mut self, idx: &[usize]) {
        self.map_all(|t| t.select_cols(idx));
    }

    /// Keep rows `idx` of value, mask, grad and optimizer moments.
    pub fn keep_rows(&mut self, idx: &[usize]) {
        self.map_all(|t| t.select_rows(idx));
    }

    fn map_all(&mut self, f: impl Fn(&Tensor) -> Tensor) {
        self.value = f(&self.value);
        self.mask = self.mask.as_ref().map(&f);
        self.grad = self.grad.as_ref().map(&f);
        self.adam.m = f(&self.adam.m);
        self.adam.v = f(&self.adam.v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_mask_zeroes_values() {
        let mut p = Parameter::new(Tensor::from_rows(1, 3, vec![1.0, 2.0, 3.0]));
        p.set_mask(Tensor::from_rows(1, 3, vec![1.0, 0.0, 1.0])).unwrap();
        assert_eq!(p.value.data(), &[1.0, 0.0, 3.0]);
        assert_eq!(p.live(), 2);
        assert!(p.set_mask(Tensor::from_rows(1, 3, vec![0.5, 1.0, 1.0])).is_err());
        assert!(p.set_mask(Tensor::zeros(3, 1)).is_err());
    }

    #[test]
    fn masked_grad_is_zero() {
        let mut p = Parameter::new(Tensor::filled(2, 2, 1.0));
        p.set_mask(Tensor::zeros(2, 2)).unwrap();
        p.accumulate_grad(&Tensor::filled(2, 2, 4.0));
        assert!(p.grad.unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn keep_cols_slices_everything() {
        let mut p = Parameter::new(Tensor::from_rows(2, 3, vec![1., 2., 3., 4., 5., 6.]));
        p.prune_entry(0);
        p.accumulate_grad(&Tensor::filled(2, 3, 1.0));
        p.keep_cols(&[0, 2]);
        assert_eq!(p.value.data(), &[0., 3., 4., 6.]);
        assert_eq!(p.mask.as_ref().unwrap().data(), &[0., 1., 1., 1.]);
        assert_eq!(p.grad.as_ref().unwrap().shape(), &[2, 2]);
        assert_eq!(p.adam.m.shape(), &[2, 2]);
    }
}
