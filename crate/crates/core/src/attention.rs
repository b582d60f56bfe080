//! Object attention: score every fused object, normalize the scores with a
//! softmax and hand the policy the weighted embedding of the winner.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, AplError, Result};
use crate::fusion::ObjectFeature;
use crate::nn::{argmax, softmax, Activation, DenseNet, ForwardCache, LayerSpec};

/// Width of the attention output vector.
pub const OUTPUT_DIM: usize = 12;
const G: usize = ObjectFeature::DIM;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    #[default]
    Learned,
    /// Attend to the object with the lowest verification score.
    LowestScore,
}

impl std::str::FromStr for AttentionMode {
    type Err = AplError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(AttentionMode::Learned),
            "lowest-score" => Ok(AttentionMode::LowestScore),
            other => Err(invalid(format!("unknown attention mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// 6 -> 6, ReLU.
    pub fc: DenseNet,
    /// 12 -> 1, linear.
    pub selector: DenseNet,
}

impl AttentionParams {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Result<Self> {
        Ok(AttentionParams {
            fc: DenseNet::new(&[LayerSpec { input: G, output: G, activation: Activation::Relu }], rng)?,
            selector: DenseNet::new(&[LayerSpec { input: 2 * G, output: 1, activation: Activation::None }], rng)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.fc.param_count() + self.selector.param_count()
    }

    /// fc parameters followed by selector parameters.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.fc.params().to_vec();
        v.extend_from_slice(self.selector.params());
        v
    }

    pub fn set_flat(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(invalid(format!("expected {} attention parameters, got {}", self.param_count(), p.len())));
        }
        let n = self.fc.param_count();
        self.fc.set_params(&p[..n])?;
        self.selector.set_params(&p[n..])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionOutput {
    pub o: Vec<f64>,
    pub m: usize,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    mode: AttentionMode,
    m: usize,
    weights: Vec<f64>,
    g: Vec<Vec<f64>>,
    fc: Vec<ForwardCache>,
    selector: Vec<ForwardCache>,
}

/// Gradients from [`attend_backward`].
#[derive(Clone, Debug)]
pub struct AttentionGrads {
    /// Laid out like [`AttentionParams::flat`].
    pub params: Vec<f64>,
    pub features: Vec<[f64; G]>,
}

pub fn attend(
    features: &[ObjectFeature],
    params: &AttentionParams,
    mode: AttentionMode,
) -> Result<(AttentionOutput, AttentionCache)> {
    if features.is_empty() {
        return Err(AplError::NoDetection);
    }
    let k = features.len();
    let mut g = Vec::with_capacity(k);
    let mut fc = Vec::with_capacity(k);
    for f in features {
        let (gi, cache) = params.fc.forward(&f.to_array())?;
        g.push(gi);
        fc.push(cache);
    }

    let (m, weights, selector) = match mode {
        AttentionMode::Learned => {
            let mut global = vec![0.0; G];
            for gi in &g {
                for j in 0..G {
                    global[j] += gi[j];
                }
            }
            for v in &mut global {
                *v /= k as f64;
            }
            let mut scores = Vec::with_capacity(k);
            let mut sel = Vec::with_capacity(k);
            for gi in &g {
                let mut input = gi.clone();
                input.extend_from_slice(&global);
                let (s, cache) = params.selector.forward(&input)?;
                scores.push(s[0]);
                sel.push(cache);
            }
            let w = softmax(&scores);
            let m = argmax(&w).unwrap_or(0);
            (m, w, sel)
        }
        AttentionMode::LowestScore => {
            let mut m = 0;
            for (i, f) in features.iter().enumerate() {
                if f.c < features[m].c {
                    m = i;
                }
            }
            let mut w = vec![0.0; k];
            w[m] = 1.0;
            (m, w, Vec::new())
        }
    };

    let mut o = Vec::with_capacity(OUTPUT_DIM);
    o.extend(g[m].iter().map(|v| v * weights[m]));
    o.extend_from_slice(&features[m].to_array());
    let out = AttentionOutput { o, m, weights: weights.clone() };
    Ok((
        out,
        AttentionCache {
            mode,
            m,
            weights,
            g,
            fc,
            selector,
        },
    ))
}

/// Back-propagates `grad_o` through the weighted-embedding path. The hard
/// argmax itself has no gradient.
pub fn attend_backward(params: &AttentionParams, cache: &AttentionCache, grad_o: &[f64]) -> Result<AttentionGrads> {
    if grad_o.len() != OUTPUT_DIM {
        return Err(invalid(format!("expected gradient of length {OUTPUT_DIM}, got {}", grad_o.len())));
    }
    let k = cache.g.len();
    let m = cache.m;
    let n_fc = params.fc.param_count();
    let mut pg = vec![0.0; params.param_count()];
    let mut dg = vec![vec![0.0; G]; k];

    let go = &grad_o[..G];
    for j in 0..G {
        dg[m][j] += go[j] * cache.weights[m];
    }

    if cache.mode == AttentionMode::Learned {
        if cache.selector.len() != k {
            return Err(AplError::InvalidState("attention cache is inconsistent".into()));
        }
        let dwm: f64 = go.iter().zip(&cache.g[m]).map(|(a, b)| a * b).sum();
        let wm = cache.weights[m];
        let mut dglobal = [0.0; G];
        for i in 0..k {
            let delta = if i == m { 1.0 } else { 0.0 };
            let ds = wm * (delta - cache.weights[i]) * dwm;
            let din = params.selector.backward_into(&cache.selector[i], &[ds], &mut pg[n_fc..])?;
            for j in 0..G {
                dg[i][j] += din[j];
                dglobal[j] += din[G + j];
            }
        }
        for gi in dg.iter_mut() {
            for j in 0..G {
                gi[j] += dglobal[j] / k as f64;
            }
        }
    }

    let mut features = Vec::with_capacity(k);
    for i in 0..k {
        let dx = params.fc.backward_into(&cache.fc[i], &dg[i], &mut pg[..n_fc])?;
        let mut f = [0.0; G];
        f.copy_from_slice(&dx);
        if i == m {
            for j in 0..G {
                f[j] += grad_o[G + j];
            }
        }
        features.push(f);
    }
    Ok(AttentionGrads { params: pg, features })
}
