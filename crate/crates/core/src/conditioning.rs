//! Treatment pathway: one-hot treatment, mapping network to a 16-d latent
//! code, per-layer affine heads producing AdaIN scale and bias.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Binder, Linear, LinearVars};
use crate::tensor::{Graph, Tensor, Var};

pub const TREATMENT_COUNT: usize = 3;
pub const LATENT_WIDTH: usize = 16;
/// Negative slope of the activations between mapping layers.
pub const MAPPING_SLOPE: f64 = 0.2;
/// Std of the affine-head weights at initialization.
pub const AFFINE_INIT_STD: f64 = 0.01;

/// Resection type. Encoding order is fixed: GTR = 0, STR = 1, NA = 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TreatmentCode {
    /// Gross total resection.
    GTR,
    /// Subtotal resection.
    STR,
    /// No resection.
    NA,
}

impl TreatmentCode {
    pub const ALL: [TreatmentCode; TREATMENT_COUNT] =
        [TreatmentCode::GTR, TreatmentCode::STR, TreatmentCode::NA];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn onehot(self) -> [f64; TREATMENT_COUNT] {
        let mut v = [0.0; TREATMENT_COUNT];
        v[self.index()] = 1.0;
        v
    }

    /// Decodes a one-hot vector; anything that is not exactly one 1 among 0s
    /// is rejected.
    pub fn from_onehot(v: &[f64]) -> Result<Self> {
        if v.len() != TREATMENT_COUNT {
            return Err(Error::Validation(format!(
                "treatment one-hot must have {TREATMENT_COUNT} entries, got {}",
                v.len()
            )));
        }
        if v.iter().any(|&x| x != 0.0 && x != 1.0) {
            return Err(Error::Validation(format!(
                "treatment one-hot {v:?} is not binary"
            )));
        }
        let hot: Vec<usize> = (0..v.len()).filter(|&i| v[i] == 1.0).collect();
        match hot.as_slice() {
            [i] => Ok(Self::ALL[*i]),
            _ => Err(Error::Validation(format!(
                "treatment one-hot {v:?} sums to {}, expected 1",
                hot.len()
            ))),
        }
    }
}

impl fmt::Display for TreatmentCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TreatmentCode::GTR => "GTR",
            TreatmentCode::STR => "STR",
            TreatmentCode::NA => "NA",
        };
        f.write_str(s)
    }
}

impl FromStr for TreatmentCode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "GTR" => Ok(TreatmentCode::GTR),
            "STR" => Ok(TreatmentCode::STR),
            "NA" => Ok(TreatmentCode::NA),
            other => Err(Error::Validation(format!(
                "unknown treatment {other:?}, expected GTR, STR or NA"
            ))),
        }
    }
}

/// Stacks one-hot codes into a `[N, 3]` tensor.
pub fn onehot_batch(treatments: &[TreatmentCode]) -> Result<Tensor> {
    let data = treatments.iter().flat_map(|t| t.onehot()).collect();
    Tensor::new(vec![treatments.len(), TREATMENT_COUNT], data)
}

/// Three linear layers `3 -> 16 -> 16 -> 16` with leaky-relu between them
/// and none after the last.
#[derive(Clone, Debug, PartialEq)]
pub struct MappingNetwork {
    pub layers: [Linear; 3],
}

pub struct MappingVars {
    layers: [LinearVars; 3],
}

impl MappingNetwork {
    pub fn init(rng: &mut impl Rng) -> Self {
        MappingNetwork {
            layers: [
                Linear::he(TREATMENT_COUNT, LATENT_WIDTH, rng),
                Linear::he(LATENT_WIDTH, LATENT_WIDTH, rng),
                Linear::he(LATENT_WIDTH, LATENT_WIDTH, rng),
            ],
        }
    }

    pub fn zeros() -> Self {
        MappingNetwork {
            layers: [
                Linear::zeros(TREATMENT_COUNT, LATENT_WIDTH),
                Linear::zeros(LATENT_WIDTH, LATENT_WIDTH),
                Linear::zeros(LATENT_WIDTH, LATENT_WIDTH),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [TREATMENT_COUNT, LATENT_WIDTH, LATENT_WIDTH];
        for (i, (layer, fin)) in self.layers.iter().zip(widths).enumerate() {
            if layer.in_features() != fin || layer.out_features() != LATENT_WIDTH {
                return Err(Error::Shape(format!(
                    "mapping layer {i} is {:?}, expected [{LATENT_WIDTH}, {fin}]",
                    layer.weight.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn bind(&self, b: &mut Binder<'_>) -> MappingVars {
        MappingVars {
            layers: [
                self.layers[0].bind(b),
                self.layers[1].bind(b),
                self.layers[2].bind(b),
            ],
        }
    }
}

impl MappingVars {
    /// `[N, 3]` one-hots to `[N, 16]` latent codes.
    pub fn map(&self, g: &mut Graph, onehots: Var) -> Result<Var> {
        let mut h = self.layers[0].forward(g, onehots)?;
        for layer in &self.layers[1..] {
            h = g.leaky_relu(h, MAPPING_SLOPE);
            h = layer.forward(g, h)?;
        }
        Ok(h)
    }
}

/// Evaluates the mapping network for a single treatment, outside of any
/// training graph.
pub fn map_treatment(t: TreatmentCode, net: &MappingNetwork) -> Result<Tensor> {
    map_onehot(&t.onehot(), net)
}

/// Like [`map_treatment`] but starting from a raw one-hot vector, which is
/// validated first.
pub fn map_onehot(onehot: &[f64], net: &MappingNetwork) -> Result<Tensor> {
    TreatmentCode::from_onehot(onehot)?;
    net.validate()?;
    let mut g = Graph::new();
    let vars = net.bind(&mut Binder::new(&mut g, false));
    let x = g.input(Tensor::new(vec![1, TREATMENT_COUNT], onehot.to_vec())?);
    let z = vars.map(&mut g, x)?;
    g.value(z).clone().reshape(&[LATENT_WIDTH])
}

/// One linear head per conv stage, `16 -> 2 * C_i`. The first `C_i` outputs
/// are the AdaIN scale, the last `C_i` the bias.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineSpecializer {
    pub heads: Vec<Linear>,
}

impl AffineSpecializer {
    /// Small random weights; scale half of the bias set to 1 and bias half to
    /// 0, so every head starts out as plain instance normalization.
    pub fn init(channels: &[usize], rng: &mut impl Rng) -> Self {
        let heads = channels
            .iter()
            .map(|&c| {
                let mut head = Linear::with_std(LATENT_WIDTH, 2 * c, AFFINE_INIT_STD, rng);
                head.bias.data_mut()[..c].fill(1.0);
                head
            })
            .collect();
        AffineSpecializer { heads }
    }

    /// Zero weights with the identity bias: scale 1, bias 0 for every
    /// treatment.
    pub fn identity(channels: &[usize]) -> Self {
        let heads = channels
            .iter()
            .map(|&c| {
                let mut head = Linear::zeros(LATENT_WIDTH, 2 * c);
                head.bias.data_mut()[..c].fill(1.0);
                head
            })
            .collect();
        AffineSpecializer { heads }
    }

    pub fn channels(&self) -> Vec<usize> {
        self.heads.iter().map(|h| h.out_features() / 2).collect()
    }

    pub fn bind(&self, b: &mut Binder<'_>) -> Vec<LinearVars> {
        self.heads.iter().map(|h| h.bind(b)).collect()
    }
}

/// Runs affine head `layer_index` on latent codes `z [N, 16]` and splits the
/// result into `(scale [N, C], bias [N, C])`.
pub fn specialize(
    g: &mut Graph,
    z: Var,
    heads: &[LinearVars],
    layer_index: usize,
) -> Result<(Var, Var)> {
    let head = heads.get(layer_index).ok_or_else(|| {
        Error::Config(format!(
            "layer index {layer_index} out of range for {} affine heads",
            heads.len()
        ))
    })?;
    let out = head.forward(g, z)?;
    let width = g.shape(out)[1];
    if width % 2 != 0 {
        return Err(Error::Shape(format!(
            "affine head {layer_index} has odd output width {width}"
        )));
    }
    let c = width / 2;
    let scale = g.narrow(out, 1, 0, c)?;
    let bias = g.narrow(out, 1, c, c)?;
    Ok((scale, bias))
}

/// Specializes `z` for conv stage `layer_index` and applies AdaIN to `x`.
pub fn condition(
    g: &mut Graph,
    x: Var,
    z: Var,
    heads: &[LinearVars],
    layer_index: usize,
) -> Result<Var> {
    let (scale, bias) = specialize(g, z, heads, layer_index)?;
    g.adain(x, scale, bias)
}
