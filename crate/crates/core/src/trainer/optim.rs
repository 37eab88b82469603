//! AdamW with decoupled weight decay.

use voxgraph_tensor::{Checkpoint, Element, ParamStore, Tensor};

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T: Element> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates taken so far.
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, p)| vec![T::zero(); p.value.numel()]).collect();
        AdamW {
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// `p ← p − lr·(m̂ / (√v̂ + eps) + wd·p)` with bias-corrected moments, using
    /// the gradients currently accumulated in `params`.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64, weight_decay: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data().to_vec();
            for (((w, &g), mi), vi) in p.value.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.to_f64_lossy();
                let mf = b1 * mi.to_f64_lossy() + (1.0 - b1) * g;
                let vf = b2 * vi.to_f64_lossy() + (1.0 - b2) * g * g;
                *mi = T::from_f64_lossy(mf);
                *vi = T::from_f64_lossy(vf);
                let m_hat = mf / c1;
                let v_hat = vf / c2;
                let wf = w.to_f64_lossy();
                *w = T::from_f64_lossy(wf - lr * (m_hat / (v_hat.sqrt() + self.eps) + weight_decay * wf));
            }
        }
    }

    /// Stores moments as `adam.m.<name>` / `adam.v.<name>` entries.
    pub fn save(&self, params: &ParamStore<T>, ckpt: &mut Checkpoint) -> Result<()> {
        for (((_, p), m), v) in params.iter().zip(&self.m).zip(&self.v) {
            let shape = p.value.shape().to_vec();
            ckpt.put(&format!("adam.m.{}", p.name), &Tensor::new(shape.clone(), m.clone())?);
            ckpt.put(&format!("adam.v.{}", p.name), &Tensor::new(shape, v.clone())?);
        }
        ckpt.metadata.insert("adam.t".into(), self.t.to_string());
        Ok(())
    }

    pub fn load(params: &ParamStore<T>, ckpt: &Checkpoint) -> Result<Self> {
        let mut opt = AdamW::new(params);
        opt.t = ckpt
            .metadata
            .get("adam.t")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data("checkpoint has no optimizer state".into()))?;
        for (i, (_, p)) in params.iter().enumerate() {
            opt.m[i] = ckpt.get::<T>(&format!("adam.m.{}", p.name))?.into_data();
            opt.v[i] = ckpt.get::<T>(&format!("adam.v.{}", p.name))?.into_data();
            if opt.m[i].len() != p.value.numel() || opt.v[i].len() != p.value.numel() {
                return Err(Error::Data(format!("optimizer state for {} has the wrong size", p.name)));
            }
        }
        Ok(opt)
    }
}
