//! Monotonic mixing network whose weights come from state-conditioned
//! hypernetworks.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuro::{Activation, ForwardCache, LayerSpec, NetGrads, NetParams, NetSpec, RmsProp};
use crate::rng::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixerDims {
    pub agents: usize,
    pub state_width: usize,
    /// Width of the mixing hidden layer.
    pub hidden: usize,
    /// Hidden width of the two-layer hypernetworks.
    pub hyper_hidden: usize,
}

impl MixerDims {
    fn specs(&self) -> [NetSpec; 4] {
        let s = self.state_width;
        [
            NetSpec::mlp(s, &[self.hyper_hidden], Activation::Relu, self.agents * self.hidden, Activation::Abs),
            NetSpec::mlp(s, &[], Activation::Linear, self.hidden, Activation::Linear),
            NetSpec::mlp(s, &[], Activation::Linear, self.hidden, Activation::Abs),
            NetSpec {
                input: s,
                layers: vec![
                    LayerSpec { width: self.hidden, activation: Activation::Relu },
                    LayerSpec { width: 1, activation: Activation::Linear },
                ],
            },
        ]
    }
}

/// Hypernetworks generating `|W1|`, `b1`, `|W2|` and `b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixer {
    dims: MixerDims,
    /// In order: W1, b1, W2, b2.
    pub hypernets: [NetParams; 4],
}

#[derive(Debug, Clone)]
pub struct MixerCache {
    hyper: [ForwardCache; 4],
    w1: Array2<f64>,
    w2: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
    q: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixerGrads {
    pub hypernets: [NetGrads; 4],
}

impl Mixer {
    pub fn init(dims: MixerDims, rng: &mut SimRng) -> Result<Self> {
        if dims.agents == 0 || dims.state_width == 0 || dims.hidden == 0 || dims.hyper_hidden == 0 {
            return Err(Error::Config("mixer dimensions must be positive".into()));
        }
        let [a, b, c, d] = dims.specs();
        Ok(Self {
            dims,
            hypernets: [
                NetParams::init(&a, rng)?,
                NetParams::init(&b, rng)?,
                NetParams::init(&c, rng)?,
                NetParams::init(&d, rng)?,
            ],
        })
    }

    pub fn dims(&self) -> &MixerDims {
        &self.dims
    }

    pub fn param_count(&self) -> usize {
        self.hypernets.iter().map(|h| h.param_count()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.hypernets.iter().flat_map(|h| h.to_flat()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape("mixer parameter count mismatch".into()));
        }
        let mut offset = 0;
        for h in &mut self.hypernets {
            let n = h.param_count();
            h.set_flat(&flat[offset..offset + n])?;
            offset += n;
        }
        Ok(())
    }

    pub fn copy_from(&mut self, other: &Mixer) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape("mixer dimensions differ".into()));
        }
        for (dst, src) in self.hypernets.iter_mut().zip(&other.hypernets) {
            dst.copy_from(src)?;
        }
        Ok(())
    }

    fn check(&self, states: &ArrayView2<f64>, q: &ArrayView2<f64>) -> Result<()> {
        if q.ncols() != self.dims.agents || q.nrows() != states.nrows() {
            return Err(Error::Shape(format!(
                "mixer expects {} agent values per state row, got {:?} for {} rows",
                self.dims.agents,
                q.dim(),
                states.nrows()
            )));
        }
        Ok(())
    }

    /// `Q_tot` for every row of `states` and `q`.
    pub fn forward(&self, states: ArrayView2<f64>, q: ArrayView2<f64>) -> Result<(Vec<f64>, MixerCache)> {
        self.check(&states, &q)?;
        let (w1, c0) = self.hypernets[0].forward(states)?;
        let (b1, c1) = self.hypernets[1].forward(states)?;
        let (w2, c2) = self.hypernets[2].forward(states)?;
        let (b2, c3) = self.hypernets[3].forward(states)?;
        let (rows, h, agents) = (states.nrows(), self.dims.hidden, self.dims.agents);
        let mut pre = b1;
        for r in 0..rows {
            for n in 0..agents {
                let qn = q[[r, n]];
                for j in 0..h {
                    pre[[r, j]] += qn * w1[[r, n * h + j]];
                }
            }
        }
        let hidden = pre.mapv(|z| Activation::Elu.apply(z));
        let out = (0..rows)
            .map(|r| {
                (0..h).map(|j| w2[[r, j]] * hidden[[r, j]]).sum::<f64>() + b2[[r, 0]]
            })
            .collect();
        Ok((
            out,
            MixerCache { hyper: [c0, c1, c2, c3], w1, w2, pre, hidden, q: q.to_owned() },
        ))
    }

    pub fn predict(&self, states: ArrayView2<f64>, q: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(self.forward(states, q)?.0)
    }

    /// Gradients of `sum_r upstream[r] * Q_tot[r]` with respect to the
    /// hypernetwork parameters and to the agent values.
    pub fn backward(&self, cache: &MixerCache, upstream: &[f64]) -> Result<(MixerGrads, Array2<f64>)> {
        let rows = cache.pre.nrows();
        if upstream.len() != rows {
            return Err(Error::Shape("upstream length differs from batch".into()));
        }
        let (h, agents) = (self.dims.hidden, self.dims.agents);
        let mut d_w2 = Array2::zeros((rows, h));
        let mut d_b2 = Array2::zeros((rows, 1));
        let mut d_pre = Array2::zeros((rows, h));
        for r in 0..rows {
            let g = upstream[r];
            d_b2[[r, 0]] = g;
            for j in 0..h {
                d_w2[[r, j]] = g * cache.hidden[[r, j]];
                d_pre[[r, j]] = g * cache.w2[[r, j]] * Activation::Elu.derivative(cache.pre[[r, j]]);
            }
        }
        let mut d_w1 = Array2::zeros((rows, agents * h));
        let mut d_q = Array2::zeros((rows, agents));
        for r in 0..rows {
            for n in 0..agents {
                let qn = cache.q[[r, n]];
                let mut acc = 0.0;
                for j in 0..h {
                    let dp = d_pre[[r, j]];
                    d_w1[[r, n * h + j]] = dp * qn;
                    acc += dp * cache.w1[[r, n * h + j]];
                }
                d_q[[r, n]] = acc;
            }
        }
        let (g0, _) = self.hypernets[0].backward(&cache.hyper[0], d_w1.view())?;
        let (g1, _) = self.hypernets[1].backward(&cache.hyper[1], d_pre.view())?;
        let (g2, _) = self.hypernets[2].backward(&cache.hyper[2], d_w2.view())?;
        let (g3, _) = self.hypernets[3].backward(&cache.hyper[3], d_b2.view())?;
        Ok((MixerGrads { hypernets: [g0, g1, g2, g3] }, d_q))
    }

    /// One optimizer step per hypernetwork.
    pub fn apply(&mut self, grads: &MixerGrads, optimizers: &mut [RmsProp]) -> Result<()> {
        if optimizers.len() != 4 {
            return Err(Error::Shape("mixer needs one optimizer per hypernetwork".into()));
        }
        for ((net, g), opt) in self.hypernets.iter_mut().zip(&grads.hypernets).zip(optimizers) {
            opt.step(net, g)?;
        }
        Ok(())
    }
}

impl MixerGrads {
    pub fn to_flat(&self) -> Vec<f64> {
        self.hypernets.iter().flat_map(|g| g.to_flat()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuro::{central_difference, max_relative_error};
    use crate::rng::seeded;
    use ndarray::Array2;
    use rand::Rng;

    fn dims() -> MixerDims {
        MixerDims { agents: 3, state_width: 5, hidden: 4, hyper_hidden: 6 }
    }

    #[test]
    fn additive_degenerate_case() {
        let d = MixerDims { agents: 2, state_width: 1, hidden: 2, hyper_hidden: 2 };
        let mut m = Mixer::init(d, &mut seeded(0)).unwrap();
        // W1 = I (flattened agent-major), b1 = 0, W2 = 1, b2 = 0 at state s = 1
        let w1 = m.hypernets[0].layer_mut(1);
        w1.0.fill(0.0);
        w1.1.assign(&ndarray::arr1(&[1.0, 0.0, 0.0, 1.0]));
        let b1 = m.hypernets[1].layer_mut(0);
        b1.0.fill(0.0);
        b1.1.fill(0.0);
        let w2 = m.hypernets[2].layer_mut(0);
        w2.0.fill(0.0);
        w2.1.fill(1.0);
        for l in 0..2 {
            let (w, b) = m.hypernets[3].layer_mut(l);
            w.fill(0.0);
            b.fill(0.0);
        }
        let s = Array2::from_elem((1, 1), 1.0);
        let q = ndarray::arr2(&[[0.7, 2.5]]);
        let out = m.predict(s.view(), q.view()).unwrap();
        assert!((out[0] - 3.2).abs() < 1e-12);
    }

    #[test]
    fn monotone_in_every_agent_value() {
        let mut rng = seeded(3);
        for trial in 0..200 {
            let m = Mixer::init(dims(), &mut seeded(trial)).unwrap();
            let s = Array2::from_shape_fn((1, 5), |_| rng.random_range(-2.0..2.0));
            let q = Array2::from_shape_fn((1, 3), |_| rng.random_range(-5.0..5.0));
            let base = m.predict(s.view(), q.view()).unwrap()[0];
            for n in 0..3 {
                for bump in [0.1, 1.0, 10.0] {
                    let mut q2 = q.clone();
                    q2[[0, n]] += bump;
                    assert!(m.predict(s.view(), q2.view()).unwrap()[0] >= base);
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = seeded(9);
        let m = Mixer::init(dims(), &mut seeded(1)).unwrap();
        let s = Array2::from_shape_fn((4, 5), |_| rng.random_range(-1.0..1.0));
        let q = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let up = [0.3, -1.2, 0.8, 2.0];
        let objective = |mixer: &Mixer, q: &Array2<f64>| -> f64 {
            let out = mixer.predict(s.view(), q.view()).unwrap();
            out.iter().zip(&up).map(|(o, u)| o * u).sum()
        };
        let (_, cache) = m.forward(s.view(), q.view()).unwrap();
        let (grads, dq) = m.backward(&cache, &up).unwrap();
        let flat = m.to_flat();
        let numeric = central_difference(
            |x| {
                let mut mm = m.clone();
                mm.set_flat(x).unwrap();
                objective(&mm, &q)
            },
            &flat,
            1e-6,
        );
        assert!(max_relative_error(&grads.to_flat(), &numeric) < 1e-5);
        let qflat: Vec<f64> = q.iter().cloned().collect();
        let numeric_q = central_difference(
            |x| objective(&m, &Array2::from_shape_vec((4, 3), x.to_vec()).unwrap()),
            &qflat,
            1e-6,
        );
        let analytic_q: Vec<f64> = dq.iter().cloned().collect();
        assert!(max_relative_error(&analytic_q, &numeric_q) < 1e-5);
    }
}
