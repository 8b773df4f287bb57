//! Elementwise, reduction, and shape ops with their gradient rules.

use crate::element::Element;
use crate::tensor::Tensor;
use ndarray::{ArrayD, Axis, Slice};

fn assert_same_shape<T: Element>(a: &Tensor<T>, b: &Tensor<T>, op: &str) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

impl<T: Element> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        assert_same_shape(self, other, "add");
        let data = self.data() + other.data();
        Tensor::from_op(vec![self.clone(), other.clone()], data, |_, g| {
            vec![Some(g.clone()), Some(g.clone())]
        })
    }

    pub fn sub(&self, other: &Tensor<T>) -> Tensor<T> {
        assert_same_shape(self, other, "sub");
        let data = self.data() - other.data();
        Tensor::from_op(vec![self.clone(), other.clone()], data, |_, g| {
            vec![Some(g.clone()), Some(g.mapv(|x| -x))]
        })
    }

    pub fn mul(&self, other: &Tensor<T>) -> Tensor<T> {
        assert_same_shape(self, other, "mul");
        let data = self.data() * other.data();
        Tensor::from_op(vec![self.clone(), other.clone()], data, |node, g| {
            let ga = g * node.parent_data(1);
            let gb = g * node.parent_data(0);
            vec![Some(ga), Some(gb)]
        })
    }

    /// Elementwise division. The caller is responsible for keeping the
    /// denominator away from zero.
    pub fn div(&self, other: &Tensor<T>) -> Tensor<T> {
        assert_same_shape(self, other, "div");
        let data = self.data() / other.data();
        Tensor::from_op(vec![self.clone(), other.clone()], data, |node, g| {
            let b = node.parent_data(1);
            let ga = g / b;
            let gb = g * &(&node.data().mapv(|x| -x) / b);
            vec![Some(ga), Some(gb)]
        })
    }

    pub fn neg(&self) -> Tensor<T> {
        let data = self.data().mapv(|x| -x);
        Tensor::from_op(vec![self.clone()], data, |_, g| vec![Some(g.mapv(|x| -x))])
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        let data = self.data().mapv(|x| x * s);
        Tensor::from_op(vec![self.clone()], data, move |_, g| {
            vec![Some(g.mapv(|x| x * s))]
        })
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        let data = self.data().mapv(|x| x + s);
        Tensor::from_op(vec![self.clone()], data, |_, g| vec![Some(g.clone())])
    }

    /// |x| with subgradient 0 at the origin.
    pub fn abs(&self) -> Tensor<T> {
        let data = self.data().mapv(|x| x.abs());
        Tensor::from_op(vec![self.clone()], data, |node, g| {
            let x = node.parent_data(0);
            let mut ga = g.clone();
            ga.zip_mut_with(x, |gi, &xi| {
                *gi = if xi > T::zero() {
                    *gi
                } else if xi < T::zero() {
                    -*gi
                } else {
                    T::zero()
                }
            });
            vec![Some(ga)]
        })
    }

    pub fn square(&self) -> Tensor<T> {
        let data = self.data().mapv(|x| x * x);
        Tensor::from_op(vec![self.clone()], data, |node, g| {
            let two = T::from_f64(2.0);
            let x = node.parent_data(0);
            vec![Some(g * &x.mapv(|xi| xi * two))]
        })
    }

    pub fn sqrt(&self) -> Tensor<T> {
        let data = self.data().mapv(|x| x.sqrt());
        Tensor::from_op(vec![self.clone()], data, |node, g| {
            let half = T::from_f64(0.5);
            let out = node.data();
            let mut ga = g.clone();
            ga.zip_mut_with(out, |gi, &oi| *gi = *gi * half / oi);
            vec![Some(ga)]
        })
    }

    pub fn leaky_relu(&self, alpha: T) -> Tensor<T> {
        let data = self
            .data()
            .mapv(|x| if x > T::zero() { x } else { x * alpha });
        Tensor::from_op(vec![self.clone()], data, move |node, g| {
            let x = node.parent_data(0);
            let mut ga = g.clone();
            ga.zip_mut_with(x, |gi, &xi| {
                if xi <= T::zero() {
                    *gi = *gi * alpha;
                }
            });
            vec![Some(ga)]
        })
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let s = self.data().sum();
        let data = ArrayD::from_elem(vec![1], s);
        Tensor::from_op(vec![self.clone()], data, |node, g| {
            let gv = g[[0]];
            vec![Some(ArrayD::from_elem(node.parent_data(0).shape(), gv))]
        })
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = T::from_f64(self.data().len() as f64);
        self.sum_all().scale(T::one() / n)
    }

    /// Sum over the channel axis of an NCHW tensor, keeping a size-1 axis.
    pub fn sum_channels(&self) -> Tensor<T> {
        let (n, _c, h, w) = self.dims4();
        let summed = self.data().sum_axis(Axis(1));
        let data = summed.into_shape_with_order(vec![n, 1, h, w]).unwrap();
        Tensor::from_op(vec![self.clone()], data, |node, g| {
            let src = node.parent_data(0);
            let mut ga = ArrayD::zeros(src.shape());
            for mut lane in ga.axis_iter_mut(Axis(1)) {
                lane += &g.index_axis(Axis(1), 0);
            }
            vec![Some(ga)]
        })
    }

    /// Multiply an NCHW tensor by a per-pixel mask of shape [N, 1, H, W],
    /// broadcast over channels.
    pub fn mul_mask(&self, mask: &Tensor<T>) -> Tensor<T> {
        let (n, _c, h, w) = self.dims4();
        let (mn, mc, mh, mw) = mask.dims4();
        assert_eq!(
            (mn, mc, mh, mw),
            (n, 1, h, w),
            "mul_mask: mask shape {:?} does not broadcast over {:?}",
            mask.shape(),
            self.shape()
        );
        let mut data = self.data().clone();
        for mut lane in data.axis_iter_mut(Axis(1)) {
            lane *= &mask.data().index_axis(Axis(1), 0);
        }
        Tensor::from_op(vec![self.clone(), mask.clone()], data, |node, g| {
            let x = node.parent_data(0);
            let m = node.parent_data(1);
            let mut gx = g.clone();
            for mut lane in gx.axis_iter_mut(Axis(1)) {
                lane *= &m.index_axis(Axis(1), 0);
            }
            let gm = if node.parents()[1].needs_grad() {
                let prod = g * x;
                let summed = prod.sum_axis(Axis(1));
                Some(summed.into_shape_with_order(m.shape()).unwrap())
            } else {
                None
            };
            vec![Some(gx), gm]
        })
    }

    /// Concatenate NCHW tensors along the channel axis.
    pub fn concat_channels(parts: &[Tensor<T>]) -> Tensor<T> {
        assert!(!parts.is_empty());
        let (n, _, h, w) = parts[0].dims4();
        let sizes: Vec<usize> = parts.iter().map(|t| t.shape()[1]).collect();
        let ctotal: usize = sizes.iter().sum();
        // assembled by hand: ndarray::concatenate yields non-standard layout
        let mut data = ArrayD::zeros(vec![n, ctotal, h, w]);
        let mut start = 0;
        for t in parts {
            let c = t.shape()[1];
            assert_eq!(
                &t.shape()[..1],
                &[n],
                "concat_channels: batch mismatch"
            );
            assert_eq!(&t.shape()[2..], &[h, w], "concat_channels: spatial mismatch");
            data.slice_axis_mut(Axis(1), Slice::from(start..start + c))
                .assign(t.data());
            start += c;
        }
        Tensor::from_op(parts.to_vec(), data, move |_, g| {
            let mut out = Vec::with_capacity(sizes.len());
            let mut start = 0;
            for &c in &sizes {
                let piece = g
                    .slice_axis(Axis(1), Slice::from(start..start + c))
                    .to_owned();
                out.push(Some(piece));
                start += c;
            }
            out
        })
    }

    /// Concatenate NCHW tensors along the batch axis.
    pub fn concat_batch(parts: &[Tensor<T>]) -> Tensor<T> {
        assert!(!parts.is_empty());
        let mut shape = parts[0].shape().to_vec();
        let sizes: Vec<usize> = parts.iter().map(|t| t.shape()[0]).collect();
        shape[0] = sizes.iter().sum();
        let mut data = ArrayD::zeros(shape);
        let mut start = 0;
        for t in parts {
            let n = t.shape()[0];
            data.slice_axis_mut(Axis(0), Slice::from(start..start + n))
                .assign(t.data());
            start += n;
        }
        Tensor::from_op(parts.to_vec(), data, move |_, g| {
            let mut out = Vec::with_capacity(sizes.len());
            let mut start = 0;
            for &n in &sizes {
                out.push(Some(
                    g.slice_axis(Axis(0), Slice::from(start..start + n)).to_owned(),
                ));
                start += n;
            }
            out
        })
    }

    /// Batch items `[start, start+len)`.
    pub fn slice_batch(&self, start: usize, len: usize) -> Tensor<T> {
        let n = self.shape()[0];
        assert!(start + len <= n, "slice_batch out of range");
        let data = self
            .data()
            .slice_axis(Axis(0), Slice::from(start..start + len))
            .to_owned();
        Tensor::from_op(vec![self.clone()], data, move |node, g| {
            let mut ga = ArrayD::zeros(node.parent_data(0).shape());
            ga.slice_axis_mut(Axis(0), Slice::from(start..start + len))
                .assign(g);
            vec![Some(ga)]
        })
    }

    /// Channels `[start, start+len)` of an NCHW tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Tensor<T> {
        let c = self.shape()[1];
        assert!(start + len <= c, "slice_channels out of range");
        let data = self
            .data()
            .slice_axis(Axis(1), Slice::from(start..start + len))
            .to_owned();
        Tensor::from_op(vec![self.clone()], data, move |node, g| {
            let mut ga = ArrayD::zeros(node.parent_data(0).shape());
            ga.slice_axis_mut(Axis(1), Slice::from(start..start + len))
                .assign(g);
            vec![Some(ga)]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;
    use ndarray::ArrayD;

    fn t(vals: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::leaf(ArrayD::from_shape_vec(shape.to_vec(), vals.to_vec()).unwrap())
    }

    #[test]
    fn add_mul_grads() {
        let a = t(&[1.0, 2.0], &[2]);
        let b = t(&[3.0, 4.0], &[2]);
        let y = a.add(&b).mul(&b).sum_all(); // (a+b)*b
        let g = backward(&y);
        let ga = g.wrt(&a).unwrap();
        let gb = g.wrt(&b).unwrap();
        assert_eq!(ga.as_slice().unwrap(), &[3.0, 4.0]);
        // d/db (a+b)*b = a + 2b
        assert_eq!(gb.as_slice().unwrap(), &[7.0, 10.0]);
    }

    #[test]
    fn div_grad() {
        let a = t(&[6.0], &[1]);
        let b = t(&[2.0], &[1]);
        let y = a.div(&b);
        let g = backward(&y);
        assert_eq!(g.wrt(&a).unwrap()[[0]], 0.5);
        assert_eq!(g.wrt(&b).unwrap()[[0]], -1.5);
    }

    #[test]
    fn same_tensor_used_twice_accumulates() {
        let a = t(&[3.0], &[1]);
        let y = a.mul(&a); // a^2
        let g = backward(&y);
        assert_eq!(g.wrt(&a).unwrap()[[0]], 6.0);
    }

    #[test]
    fn constant_branches_are_pruned() {
        let a = Tensor::constant(ArrayD::from_elem(vec![4], 2.0f64));
        let b = a.mul(&a).add(&a);
        assert!(!b.needs_grad());
        assert!(backward(&b).is_empty());
    }

    #[test]
    fn concat_slice_roundtrip_grad() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        let b = t(&[5.0, 6.0, 7.0, 8.0], &[1, 1, 2, 2]);
        let c = Tensor::concat_channels(&[a.clone(), b.clone()]);
        let y = c.slice_channels(1, 1).sum_all();
        let g = backward(&y);
        assert!(g.wrt(&a).unwrap().iter().all(|&x| x == 0.0));
        assert!(g.wrt(&b).unwrap().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn mask_broadcast() {
        let x = t(&[1.0, 2.0, 3.0, 4.0], &[1, 2, 1, 2]);
        let m = Tensor::constant(ArrayD::from_shape_vec(vec![1, 1, 1, 2], vec![0.0, 1.0]).unwrap());
        let y = x.mul_mask(&m).sum_all();
        assert_eq!(y.item(), 2.0 + 4.0);
        let g = backward(&y);
        assert_eq!(
            g.wrt(&x).unwrap().as_slice().unwrap(),
            &[0.0, 1.0, 0.0, 1.0]
        );
    }
}
