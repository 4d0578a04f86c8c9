use crate::scalar::{sigmoid, Scalar};

use super::params::GruParams;

/// Activations of one recurrent step kept for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct GruCache<T> {
    pub h_prev: Vec<T>,
    pub update: Vec<T>,
    pub reset: Vec<T>,
    pub candidate: Vec<T>,
    /// `U_n · h_prev`, before the reset gate is applied.
    pub recurrent_candidate: Vec<T>,
}

pub(crate) fn forward<T: Scalar>(p: &GruParams<T>, x: &[T], h: &[T]) -> (Vec<T>, GruCache<T>) {
    let hd = h.len();
    let wx = p.input.matvec(x);
    let uh = p.recurrent.matvec(h);
    let b = p.bias.as_slice();
    let mut update = Vec::with_capacity(hd);
    let mut reset = Vec::with_capacity(hd);
    let mut candidate = Vec::with_capacity(hd);
    let mut next = Vec::with_capacity(hd);
    for i in 0..hd {
        let z = sigmoid(wx[i] + uh[i] + b[i]);
        let r = sigmoid(wx[hd + i] + uh[hd + i] + b[hd + i]);
        let n = (wx[2 * hd + i] + b[2 * hd + i] + r * uh[2 * hd + i]).tanh();
        next.push((T::one() - z) * n + z * h[i]);
        update.push(z);
        reset.push(r);
        candidate.push(n);
    }
    let cache = GruCache {
        h_prev: h.to_vec(),
        update,
        reset,
        candidate,
        recurrent_candidate: uh[2 * hd..].to_vec(),
    };
    (next, cache)
}

/// Accumulates parameter gradients into `g`; returns `(dh_prev, dx)`.
pub(crate) fn backward<T: Scalar>(
    p: &GruParams<T>,
    g: &mut GruParams<T>,
    x: &[T],
    c: &GruCache<T>,
    dh: &[T],
) -> (Vec<T>, Vec<T>) {
    let hd = dh.len();
    let one = T::one();
    let mut da = vec![T::zero(); 3 * hd];
    let mut dah = vec![T::zero(); 3 * hd];
    let mut dh_prev = vec![T::zero(); hd];
    for i in 0..hd {
        let (z, r, n) = (c.update[i], c.reset[i], c.candidate[i]);
        let dn = dh[i] * (one - z);
        let dz = dh[i] * (c.h_prev[i] - n);
        dh_prev[i] = dh[i] * z;
        let dan = dn * (one - n * n);
        let dr = dan * c.recurrent_candidate[i];
        let daz = dz * z * (one - z);
        let dar = dr * r * (one - r);
        da[i] = daz;
        da[hd + i] = dar;
        da[2 * hd + i] = dan;
        dah[i] = daz;
        dah[hd + i] = dar;
        dah[2 * hd + i] = dan * r;
    }
    g.input.add_outer(&da, x);
    g.bias.add_column(&da);
    g.recurrent.add_outer(&dah, &c.h_prev);
    p.recurrent.t_matvec_acc(&dah, &mut dh_prev);
    let mut dx = vec![T::zero(); x.len()];
    p.input.t_matvec_acc(&da, &mut dx);
    (dh_prev, dx)
}
