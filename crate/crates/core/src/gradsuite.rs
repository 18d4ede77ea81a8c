//! The finite-difference suite behind `treatsurv gradcheck`: every
//! differentiable op on its own, the conditioning compositions, and a tiny
//! end-to-end model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::conditioning::{self, MappingNetwork, TreatmentCode, LATENT_WIDTH, TREATMENT_COUNT};
use crate::error::Result;
use crate::model::{Fusion, SurvivalNet, SurvivalNetConfig};
use crate::nn::{Binder, LinearVars};
use crate::tensor::gradcheck::{check_gradients, grad_check, GradCheckOptions, GradCheckReport};
use crate::tensor::{Tensor, Var};

/// Channels of the end-to-end model; small enough to run in about a second.
pub const TINY_CHANNELS: [usize; 4] = [2, 2, 2, 2];

fn shapes(s: &[&[usize]]) -> Vec<Vec<usize>> {
    s.iter().map(|v| v.to_vec()).collect()
}

fn linear_vars(v: &[Var]) -> LinearVars {
    LinearVars {
        weight: v[0],
        bias: v[1],
    }
}

/// Runs every check with inputs drawn from `seed`.
pub fn run_suite(seed: u64, opts: &GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let mut reports = vec![
        grad_check(
            "conv3d",
            &shapes(&[&[1, 2, 4, 4, 4], &[3, 2, 3, 3, 3], &[3]]),
            |g, v| g.conv3d(v[0], v[1], v[2], 1, 1),
            seed,
            opts,
        )?,
        grad_check(
            "conv3d_stride2",
            &shapes(&[&[1, 2, 5, 5, 5], &[2, 2, 3, 3, 3], &[2]]),
            |g, v| g.conv3d(v[0], v[1], v[2], 2, 1),
            seed,
            opts,
        )?,
        grad_check(
            "linear",
            &shapes(&[&[4, 6], &[5, 6], &[5]]),
            |g, v| g.linear(v[0], v[1], v[2]),
            seed,
            opts,
        )?,
        grad_check("relu", &shapes(&[&[2, 3, 4]]), |g, v| Ok(g.relu(v[0])), seed, opts)?,
        grad_check(
            "leaky_relu",
            &shapes(&[&[2, 3, 4]]),
            |g, v| Ok(g.leaky_relu(v[0], 0.2)),
            seed,
            opts,
        )?,
        grad_check(
            "maxpool3d",
            &shapes(&[&[1, 2, 4, 4, 4]]),
            |g, v| g.maxpool3d(v[0], 2),
            seed,
            opts,
        )?,
        grad_check(
            "global_avg_pool",
            &shapes(&[&[2, 3, 2, 2, 2]]),
            |g, v| g.global_avg_pool(v[0]),
            seed,
            opts,
        )?,
        grad_check(
            "instance_stats",
            &shapes(&[&[2, 3, 3, 3, 3]]),
            |g, v| {
                let (mu, sigma) = g.instance_stats(v[0])?;
                g.concat(mu, sigma, 1)
            },
            seed,
            opts,
        )?,
        grad_check(
            "adain",
            &shapes(&[&[2, 3, 3, 3, 3], &[2, 3], &[2, 3]]),
            |g, v| g.adain(v[0], v[1], v[2]),
            seed,
            opts,
        )?,
        grad_check(
            "mae",
            &shapes(&[&[6], &[6]]),
            |g, v| g.mae(v[0], v[1]),
            seed,
            opts,
        )?,
    ];

    let onehots = Tensor::new(
        vec![3, TREATMENT_COUNT],
        TreatmentCode::ALL.iter().flat_map(|t| t.onehot()).collect(),
    )?;
    let mapping = MappingNetwork::init(&mut ChaCha8Rng::seed_from_u64(seed));
    let mapping_shapes: Vec<Vec<usize>> = mapping
        .layers
        .iter()
        .flat_map(|l| l.tensors().map(|t| t.shape().to_vec()))
        .collect();
    reports.push(grad_check(
        "mapping_network",
        &mapping_shapes,
        |g, v| {
            let bound = mapping.bind(&mut Binder::replay(g, v));
            let x = g.input(onehots.clone());
            bound.map(g, x)
        },
        seed,
        opts,
    )?);

    let c = 3;
    reports.push(grad_check(
        "affine_adain",
        &shapes(&[&[2, c, 3, 3, 3], &[2, LATENT_WIDTH], &[2 * c, LATENT_WIDTH], &[2 * c]]),
        |g, v| conditioning::condition(g, v[0], v[1], &[linear_vars(&v[2..4])], 0),
        seed,
        opts,
    )?);

    reports.push(end_to_end(seed, opts)?);
    Ok(reports)
}

/// Grad check of a whole AdaIN model (all parameters and the input volume)
/// at its seeded initialization. With thousands of ReLU and pooling units a
/// kink-free sample point is impractical, so coordinates whose perturbation
/// flips any unit are skipped instead.
pub fn end_to_end(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let config = SurvivalNetConfig {
        conv_channels: TINY_CHANNELS.to_vec(),
        fusion: Fusion::Adain,
        seed,
        ..SurvivalNetConfig::default()
    };
    let net = SurvivalNet::build(&config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = config.input_extent;
    let volume = Tensor::from_fn(&[1, config.in_channels, e, e, e], |_| {
        StandardNormal.sample(&mut rng)
    });
    let mut inputs: Vec<Tensor> = net.params().into_iter().cloned().collect();
    let n_params = inputs.len();
    inputs.push(volume);
    check_gradients(
        "end_to_end",
        &inputs,
        |g, v| {
            let bound = net.bind_existing(g, &v[..n_params])?;
            net.forward(g, &bound, v[n_params], &[TreatmentCode::STR])
        },
        seed,
        opts,
    )
}
