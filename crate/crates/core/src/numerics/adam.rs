//! Adam with bias correction. One state per parameter tensor; the update is a
//! plain sequential loop so repeated runs are bitwise identical.

use super::element::Element;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct AdamState<E: Element> {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<E>,
    pub v: Vec<E>,
}

impl<E: Element> AdamState<E> {
    pub fn new(len: usize, lr: f64) -> Self {
        AdamState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![E::zero(); len],
            v: vec![E::zero(); len],
        }
    }
}

pub fn adam_step<E: Element>(param: &mut [E], grad: &[E], st: &mut AdamState<E>) -> Result<()> {
    if param.len() != grad.len() || param.len() != st.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!("param {}, grad {}, state {}", param.len(), grad.len(), st.m.len()),
        ));
    }
    st.step += 1;
    let b1 = E::from_f64(st.beta1);
    let b2 = E::from_f64(st.beta2);
    let one = E::one();
    let corr1 = E::from_f64(1.0 - st.beta1.powi(st.step as i32));
    let corr2 = E::from_f64(1.0 - st.beta2.powi(st.step as i32));
    let lr = E::from_f64(st.lr);
    let eps = E::from_f64(st.eps);
    for i in 0..param.len() {
        let g = grad[i];
        st.m[i] = b1 * st.m[i] + (one - b1) * g;
        st.v[i] = b2 * st.v[i] + (one - b2) * g * g;
        let m_hat = st.m[i] / corr1;
        let v_hat = st.v[i] / corr2;
        param[i] = param[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
