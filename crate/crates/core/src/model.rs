//! Survival regressor: four conv stages, global average pooling and a
//! three-layer fully connected head, with a selectable treatment fusion.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{
    self, onehot_batch, AffineSpecializer, MappingNetwork, MappingVars, TreatmentCode,
    LATENT_WIDTH, TREATMENT_COUNT,
};
use crate::error::{Error, Result};
use crate::nn::{Binder, Conv3d, Conv3dVars, Linear, LinearVars};
use crate::tensor::{Graph, Tensor, Var};

pub const CONV_STAGES: usize = 4;
pub const FC_STAGES: usize = 3;
/// Reported survival range in days.
pub const SURVIVAL_RANGE: (f64, f64) = (5.0, 1767.0);

/// How the treatment reaches the regressor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Treatment ignored.
    None,
    /// One-hot appended to the pooled features before the first FC layer.
    Concat,
    /// Mapping network + per-stage AdaIN.
    Adain,
}

impl Fusion {
    pub const ALL: [Fusion; 3] = [Fusion::None, Fusion::Concat, Fusion::Adain];
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::None => "none",
            Fusion::Concat => "concat",
            Fusion::Adain => "adain",
        })
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Fusion::None),
            "concat" => Ok(Fusion::Concat),
            "adain" => Ok(Fusion::Adain),
            other => Err(Error::Config(format!(
                "unknown fusion mode {other:?}, expected none, concat or adain"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurvivalNetConfig {
    /// 4 modalities, or 5 with the tumor mask.
    pub in_channels: usize,
    pub conv_channels: Vec<usize>,
    /// Output widths of the FC layers; the last must be 1.
    pub fc_widths: Vec<usize>,
    pub fusion: Fusion,
    pub latent_width: usize,
    /// Cubic spatial extent of the input volume.
    pub input_extent: usize,
    pub kernel_size: usize,
    pub seed: u64,
    /// Days per unit of the final linear layer.
    pub output_scale: f64,
    /// Days added to every prediction.
    pub output_offset: f64,
}

impl Default for SurvivalNetConfig {
    fn default() -> Self {
        SurvivalNetConfig {
            in_channels: 5,
            conv_channels: vec![8, 16, 32, 64],
            fc_widths: vec![64, 32, 1],
            fusion: Fusion::Adain,
            latent_width: LATENT_WIDTH,
            input_extent: 16,
            kernel_size: 3,
            seed: 0,
            output_scale: 100.0,
            output_offset: 350.0,
        }
    }
}

impl SurvivalNetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(4..=5).contains(&self.in_channels) {
            return Err(Error::Config(format!(
                "in_channels must be 4 or 5, got {}",
                self.in_channels
            )));
        }
        if self.conv_channels.len() != CONV_STAGES || self.conv_channels.contains(&0) {
            return Err(Error::Config(format!(
                "conv_channels must list {CONV_STAGES} positive widths, got {:?}",
                self.conv_channels
            )));
        }
        if self.fc_widths.len() != FC_STAGES
            || self.fc_widths.contains(&0)
            || self.fc_widths.last() != Some(&1)
        {
            return Err(Error::Config(format!(
                "fc_widths must list {FC_STAGES} positive widths ending in 1, got {:?}",
                self.fc_widths
            )));
        }
        if self.latent_width != LATENT_WIDTH {
            return Err(Error::Config(format!(
                "latent_width must be {LATENT_WIDTH}, got {}",
                self.latent_width
            )));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel_size {} is not odd",
                self.kernel_size
            )));
        }
        let mut extent = self.input_extent;
        for stage in 0..CONV_STAGES {
            if extent < 2 || extent % 2 != 0 {
                return Err(Error::Config(format!(
                    "input_extent {} gives extent {extent} at pool stage {stage}; every stage needs an even extent",
                    self.input_extent
                )));
            }
            extent /= 2;
        }
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) || !self.output_offset.is_finite() {
            return Err(Error::Config(format!(
                "output_scale must be positive and output_offset finite, got {} and {}",
                self.output_scale, self.output_offset
            )));
        }
        Ok(())
    }

    /// Width of the first FC layer's input.
    pub fn head_input_width(&self) -> usize {
        let pooled = self.conv_channels[CONV_STAGES - 1];
        match self.fusion {
            Fusion::Concat => pooled + TREATMENT_COUNT,
            Fusion::None | Fusion::Adain => pooled,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// FNV-1a over the little-endian bytes of the values, hex encoded.
    pub checksum: String,
}

pub fn checksum(data: &[f64]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in data {
        for byte in v.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurvivalNet {
    config: SurvivalNetConfig,
    convs: Vec<Conv3d>,
    fcs: Vec<Linear>,
    mapping: Option<MappingNetwork>,
    affine: Option<AffineSpecializer>,
}

/// The vars of one [`SurvivalNet`] bound to a graph.
pub struct BoundNet {
    convs: Vec<Conv3dVars>,
    fcs: Vec<LinearVars>,
    mapping: Option<MappingVars>,
    heads: Option<Vec<LinearVars>>,
    /// Every parameter var, in manifest order.
    pub vars: Vec<Var>,
}

impl BoundNet {
    fn with_vars(mut self, vars: Vec<Var>) -> Self {
        self.vars = vars;
        self
    }
}

impl SurvivalNet {
    /// Seeded He initialization; conditioning weights as in
    /// [`MappingNetwork::init`] and [`AffineSpecializer::init`].
    pub fn build(config: &SurvivalNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut convs = Vec::with_capacity(CONV_STAGES);
        let mut cin = config.in_channels;
        for &cout in &config.conv_channels {
            convs.push(Conv3d::he(cin, cout, config.kernel_size, &mut rng));
            cin = cout;
        }
        let mut fcs = Vec::with_capacity(FC_STAGES);
        let mut fin = config.head_input_width();
        for &fout in &config.fc_widths {
            fcs.push(Linear::he(fin, fout, &mut rng));
            fin = fout;
        }
        let (mapping, affine) = match config.fusion {
            Fusion::Adain => (
                Some(MappingNetwork::init(&mut rng)),
                Some(AffineSpecializer::init(&config.conv_channels, &mut rng)),
            ),
            Fusion::None | Fusion::Concat => (None, None),
        };
        Ok(SurvivalNet {
            config: config.clone(),
            convs,
            fcs,
            mapping,
            affine,
        })
    }

    pub fn config(&self) -> &SurvivalNetConfig {
        &self.config
    }

    pub fn fusion(&self) -> Fusion {
        self.config.fusion
    }

    pub fn mapping(&self) -> Option<&MappingNetwork> {
        self.mapping.as_ref()
    }

    pub fn affine(&self) -> Option<&AffineSpecializer> {
        self.affine.as_ref()
    }

    pub fn affine_mut(&mut self) -> Option<&mut AffineSpecializer> {
        self.affine.as_mut()
    }

    pub fn fc_mut(&mut self, index: usize) -> Option<&mut Linear> {
        self.fcs.get_mut(index)
    }

    /// Parameter names in manifest order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.convs.len() {
            names.push(format!("conv{i}.weight"));
            names.push(format!("conv{i}.bias"));
        }
        for i in 0..self.fcs.len() {
            names.push(format!("fc{i}.weight"));
            names.push(format!("fc{i}.bias"));
        }
        if self.mapping.is_some() {
            for i in 0..3 {
                names.push(format!("mapping{i}.weight"));
                names.push(format!("mapping{i}.bias"));
            }
        }
        if let Some(a) = &self.affine {
            for i in 0..a.heads.len() {
                names.push(format!("affine{i}.weight"));
                names.push(format!("affine{i}.bias"));
            }
        }
        names
    }

    /// Parameter tensors in manifest order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        out.extend(self.convs.iter().flat_map(|c| c.tensors()));
        out.extend(self.fcs.iter().flat_map(|l| l.tensors()));
        if let Some(m) = &self.mapping {
            out.extend(m.layers.iter().flat_map(|l| l.tensors()));
        }
        if let Some(a) = &self.affine {
            out.extend(a.heads.iter().flat_map(|l| l.tensors()));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        out.extend(self.convs.iter_mut().flat_map(|c| c.tensors_mut()));
        out.extend(self.fcs.iter_mut().flat_map(|l| l.tensors_mut()));
        if let Some(m) = &mut self.mapping {
            out.extend(m.layers.iter_mut().flat_map(|l| l.tensors_mut()));
        }
        if let Some(a) = &mut self.affine {
            out.extend(a.heads.iter_mut().flat_map(|l| l.tensors_mut()));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn param_manifest(&self) -> Vec<ParamEntry> {
        self.param_names()
            .into_iter()
            .zip(self.params())
            .map(|(name, t)| ParamEntry {
                name,
                shape: t.shape().to_vec(),
                checksum: checksum(t.data()),
            })
            .collect()
    }

    /// Replaces every parameter, checking names and shapes against this
    /// net's own manifest.
    pub fn load_params(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        let names = self.param_names();
        if named.len() != names.len() {
            let expected: Vec<&String> = names.iter().collect();
            let got: Vec<&String> = named.iter().map(|(n, _)| n).collect();
            let offending = expected
                .iter()
                .find(|n| !got.contains(n))
                .map(|n| n.as_str())
                .or_else(|| got.iter().find(|n| !expected.contains(n)).map(|n| n.as_str()))
                .unwrap_or("<count>");
            return Err(Error::Shape(format!(
                "parameter set mismatch at {offending}: expected {} tensors, got {}",
                names.len(),
                named.len()
            )));
        }
        for ((expected, slot), (name, t)) in names.iter().zip(self.params()).zip(&named) {
            if expected != name || slot.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name} {:?} does not match {expected} {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
        }
        for (slot, (_, t)) in self.params_mut().into_iter().zip(named) {
            *slot = t;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|t| t.is_finite())
    }

    /// Places the parameters on `g`, as trainable leaves if `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundNet {
        let (parts, b) = self.bind_with(Binder::new(g, trainable));
        parts.with_vars(b.into_vars())
    }

    /// Uses `vars`, already on `g` in manifest order, as the parameters.
    pub fn bind_existing(&self, g: &mut Graph, vars: &[Var]) -> Result<BoundNet> {
        let (parts, b) = self.bind_with(Binder::replay(g, vars));
        Ok(parts.with_vars(b.finish()?))
    }

    fn bind_with<'g>(&self, mut b: Binder<'g>) -> (BoundNet, Binder<'g>) {
        let convs = self.convs.iter().map(|c| c.bind(&mut b)).collect();
        let fcs = self.fcs.iter().map(|l| l.bind(&mut b)).collect();
        let mapping = self.mapping.as_ref().map(|m| m.bind(&mut b));
        let heads = self.affine.as_ref().map(|a| a.bind(&mut b));
        let parts = BoundNet {
            convs,
            fcs,
            mapping,
            heads,
            vars: Vec::new(),
        };
        (parts, b)
    }

    /// `volume [N, C, D, H, W]` and one treatment per sample to `[N, 1]`
    /// predicted days. Treatments are ignored (and may be empty) for
    /// [`Fusion::None`].
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundNet,
        volume: Var,
        treatments: &[TreatmentCode],
    ) -> Result<Var> {
        let shape = g.shape(volume).to_vec();
        if shape.len() != 5 || shape[1] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "expected volume [N, {}, D, H, W], got {shape:?}",
                self.config.in_channels
            )));
        }
        let n = shape[0];
        let uses_treatment = self.config.fusion != Fusion::None;
        if uses_treatment && treatments.len() != n {
            return Err(Error::Shape(format!(
                "{n} volumes but {} treatments",
                treatments.len()
            )));
        }

        let z = match (&bound.mapping, self.config.fusion) {
            (Some(mapping), Fusion::Adain) => {
                let onehots = g.input(onehot_batch(treatments)?);
                Some(mapping.map(g, onehots)?)
            }
            _ => None,
        };

        let mut h = volume;
        for (i, conv) in bound.convs.iter().enumerate() {
            h = conv.forward(g, h)?;
            if let (Some(z), Some(heads)) = (z, &bound.heads) {
                h = conditioning::condition(g, h, z, heads, i)?;
            }
            h = g.relu(h);
            h = g.maxpool3d(h, 2)?;
        }
        h = g.global_avg_pool(h)?;
        h = g.flatten(h)?;
        if self.config.fusion == Fusion::Concat {
            let onehots = g.input(onehot_batch(treatments)?);
            h = g.concat(h, onehots, 1)?;
        }
        let last = bound.fcs.len() - 1;
        for (i, fc) in bound.fcs.iter().enumerate() {
            h = fc.forward(g, h)?;
            if i < last {
                h = g.relu(h);
            }
        }
        Ok(g.scale_shift(h, self.config.output_scale, self.config.output_offset))
    }

    /// Raw predictions for a batch outside of any training graph.
    pub fn predict(&self, volume: &Tensor, treatments: &[TreatmentCode]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.input(volume.clone());
        let y = self.forward(&mut g, &bound, x, treatments)?;
        Ok(g.value(y).data().to_vec())
    }
}

/// Clamps a raw prediction to the reported survival range.
pub fn clamp_days(days: f64) -> f64 {
    days.clamp(SURVIVAL_RANGE.0, SURVIVAL_RANGE.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny(fusion: Fusion) -> SurvivalNetConfig {
        SurvivalNetConfig {
            conv_channels: vec![2, 3, 2, 4],
            fc_widths: vec![5, 3, 1],
            fusion,
            seed: 11,
            ..SurvivalNetConfig::default()
        }
    }

    fn volume(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, 5, 16, 16, 16], |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn first_fc_width_follows_fusion() {
        let none = SurvivalNet::build(&SurvivalNetConfig {
            fusion: Fusion::None,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(none.fcs[0].in_features(), 64);
        let concat = SurvivalNet::build(&SurvivalNetConfig {
            fusion: Fusion::Concat,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(concat.fcs[0].in_features(), 67);
    }

    #[test]
    fn manifest_contents() {
        let adain = SurvivalNet::build(&SurvivalNetConfig::default()).unwrap();
        let m = adain.param_manifest();
        let heads: Vec<usize> = m
            .iter()
            .filter(|e| e.name.starts_with("affine") && e.name.ends_with("weight"))
            .map(|e| e.shape[0])
            .collect();
        assert_eq!(heads, vec![16, 32, 64, 128]);
        assert_eq!(m.iter().filter(|e| e.name.starts_with("mapping")).count(), 6);

        let none = SurvivalNet::build(&SurvivalNetConfig {
            fusion: Fusion::None,
            ..Default::default()
        })
        .unwrap();
        assert!(none
            .param_manifest()
            .iter()
            .all(|e| !e.name.starts_with("mapping") && !e.name.starts_with("affine")));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = SurvivalNet::build(&SurvivalNetConfig::default()).unwrap();
        let b = SurvivalNet::build(&SurvivalNetConfig::default()).unwrap();
        assert_eq!(a.param_manifest(), b.param_manifest());
        let c = SurvivalNet::build(&SurvivalNetConfig {
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        assert_ne!(a.param_manifest(), c.param_manifest());
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            SurvivalNetConfig {
                in_channels: 3,
                ..Default::default()
            },
            SurvivalNetConfig {
                conv_channels: vec![8, 16, 32],
                ..Default::default()
            },
            SurvivalNetConfig {
                fc_widths: vec![64, 32, 2],
                ..Default::default()
            },
            SurvivalNetConfig {
                input_extent: 8,
                ..Default::default()
            },
            SurvivalNetConfig {
                input_extent: 24,
                ..Default::default()
            },
            SurvivalNetConfig {
                kernel_size: 2,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(SurvivalNet::build(&cfg), Err(Error::Config(_))), "{cfg:?}");
        }
        assert!(SurvivalNet::build(&SurvivalNetConfig {
            input_extent: 32,
            ..Default::default()
        })
        .is_ok());
    }

    #[test]
    fn output_shape_and_baseline_invariance() {
        let net = SurvivalNet::build(&tiny(Fusion::None)).unwrap();
        let x = volume(3, 0);
        let a = net.predict(&x, &[TreatmentCode::GTR; 3]).unwrap();
        let b = net.predict(&x, &[TreatmentCode::STR; 3]).unwrap();
        let c = net.predict(&x, &[]).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn adain_identity_heads_ignore_treatment() {
        let mut net = SurvivalNet::build(&tiny(Fusion::Adain)).unwrap();
        let channels = net.config.conv_channels.clone();
        *net.affine_mut().unwrap() = AffineSpecializer::identity(&channels);
        let x = volume(1, 1);
        let outs: Vec<f64> = TreatmentCode::ALL
            .iter()
            .map(|&t| net.predict(&x, &[t]).unwrap()[0])
            .collect();
        assert_eq!(outs[0], outs[1]);
        assert_eq!(outs[0], outs[2]);
    }

    #[test]
    fn adain_random_heads_see_treatment() {
        let net = SurvivalNet::build(&tiny(Fusion::Adain)).unwrap();
        let x = volume(1, 2);
        let a = net.predict(&x, &[TreatmentCode::GTR]).unwrap()[0];
        let b = net.predict(&x, &[TreatmentCode::NA]).unwrap()[0];
        assert_ne!(a, b);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let net = SurvivalNet::build(&tiny(Fusion::Concat)).unwrap();
        let x = volume(2, 3);
        assert!(matches!(net.predict(&x, &[TreatmentCode::GTR]), Err(Error::Shape(_))));
        let wrong = Tensor::zeros(&[1, 4, 16, 16, 16]);
        assert!(matches!(net.predict(&wrong, &[TreatmentCode::GTR]), Err(Error::Shape(_))));
    }

    #[test]
    fn load_params_checks_names_and_shapes() {
        let a = SurvivalNet::build(&tiny(Fusion::Adain)).unwrap();
        let mut b = SurvivalNet::build(&SurvivalNetConfig {
            seed: 99,
            ..tiny(Fusion::Adain)
        })
        .unwrap();
        let named: Vec<(String, Tensor)> = a
            .param_names()
            .into_iter()
            .zip(a.params().into_iter().cloned())
            .collect();
        b.load_params(named.clone()).unwrap();
        assert_eq!(a, SurvivalNet { config: a.config.clone(), ..b.clone() });

        let mut none = SurvivalNet::build(&tiny(Fusion::None)).unwrap();
        let err = none.load_params(named).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        assert!(err.to_string().contains("mapping") || err.to_string().contains("fc0"), "{err}");
    }

    #[test]
    fn treatment_changes_output_for_most_seeds() {
        let x = volume(1, 4);
        let sensitive = (0..100)
            .filter(|&seed| {
                let net = SurvivalNet::build(&SurvivalNetConfig {
                    seed,
                    fusion: Fusion::Adain,
                    ..SurvivalNetConfig::default()
                })
                .unwrap();
                let a = net.predict(&x, &[TreatmentCode::GTR]).unwrap()[0];
                let b = net.predict(&x, &[TreatmentCode::NA]).unwrap()[0];
                a != b
            })
            .count();
        assert!(sensitive >= 95, "{sensitive}/100");
    }

    /// Fraction of seeds where every parameter receives a nonzero gradient.
    /// Conv biases feeding AdaIN are excluded: instance normalization
    /// subtracts any per-channel constant, so their gradient is identically
    /// zero and only rounding noise remains, which is checked instead.
    fn gradient_reach(fusion: Fusion) -> usize {
        (0..100)
            .filter(|&seed| {
                let net = SurvivalNet::build(&SurvivalNetConfig {
                    seed,
                    fusion,
                    ..SurvivalNetConfig::default()
                })
                .unwrap();
                let mut g = Graph::new();
                let bound = net.bind(&mut g, true);
                let x = g.input(volume(2, seed + 1000));
                let y = net
                    .forward(&mut g, &bound, x, &[TreatmentCode::GTR, TreatmentCode::NA])
                    .unwrap();
                // Targets beyond any prediction, so per-sample residual signs
                // cannot cancel in the head bias.
                let target = g.input(Tensor::full(&[2, 1], 1e6));
                let loss = g.mae(y, target).unwrap();
                let grads = g.backward(loss).unwrap();
                net.param_names().iter().zip(&bound.vars).all(|(name, v)| {
                    let gmax = grads.get(*v).map_or(0.0, |t| {
                        t.data().iter().fold(0.0f64, |m, x| m.max(x.abs()))
                    });
                    let cancelled = fusion == Fusion::Adain
                        && name.starts_with("conv")
                        && name.ends_with("bias");
                    if cancelled {
                        gmax < 1e-9
                    } else {
                        gmax > 0.0
                    }
                })
            })
            .count()
    }

    #[test]
    fn gradient_reaches_every_parameter() {
        for fusion in Fusion::ALL {
            let n = gradient_reach(fusion);
            assert!(n >= 95, "{fusion}: {n}/100");
        }
    }

    #[test]
    fn concat_with_zeroed_onehot_columns_ignores_treatment() {
        let mut net = SurvivalNet::build(&tiny(Fusion::Concat)).unwrap();
        let x = volume(1, 5);
        let a = net.predict(&x, &[TreatmentCode::GTR]).unwrap()[0];
        let b = net.predict(&x, &[TreatmentCode::NA]).unwrap()[0];
        assert_ne!(a, b);

        let fc0 = net.fc_mut(0).unwrap();
        let width = fc0.in_features();
        for row in fc0.weight.data_mut().chunks_mut(width) {
            row[width - TREATMENT_COUNT..].fill(0.0);
        }
        let outs: Vec<f64> = TreatmentCode::ALL
            .iter()
            .map(|&t| net.predict(&x, &[t]).unwrap()[0])
            .collect();
        assert_eq!(outs[0], outs[1]);
        assert_eq!(outs[0], outs[2]);
    }

    #[test]
    fn bind_existing_checks_shapes() {
        let net = SurvivalNet::build(&tiny(Fusion::None)).unwrap();
        let mut g = Graph::new();
        let vars = net.bind(&mut g, true).vars;
        assert!(net.bind_existing(&mut g, &vars).is_ok());
        assert!(matches!(net.bind_existing(&mut g, &vars[1..]), Err(Error::Shape(_))));
        let mut extra = vars.clone();
        extra.push(vars[0]);
        assert!(matches!(net.bind_existing(&mut g, &extra), Err(Error::Shape(_))));
    }

    #[test]
    fn clamp_bounds() {
        assert_eq!(clamp_days(-40.0), 5.0);
        assert_eq!(clamp_days(3000.0), 1767.0);
        assert_eq!(clamp_days(321.5), 321.5);
    }
}
