//! Finite-difference validation of the gradient through the complete model:
//! encoder-decoder forward, head fusion, Dirichlet induction and the
//! segmentation loss, probed per parameter tensor.

use epl_core::evidence::{dempster_fuse_all, dirichlet_from_mass, expected_probs, mass_from_evidence};
use epl_core::labels::LabelVolume;
use epl_core::losses::seg_loss;
use epl_core::model::{forward, NetConfig, Params};
use epl_core::Tensor;

#[test]
fn full_model_gradients_match_finite_differences() {
    let net = NetConfig {
        in_channels: 1,
        base_width: 2,
        depth: 2,
        num_classes: 2,
        num_heads: 2,
        proto_stage: 1,
    };
    let params = Params::init(&net, 5).unwrap();
    let image = Tensor::from_vec(
        (0..64).map(|i| ((i * 37) % 11) as f64 * 0.2 - 1.0).collect(),
        &[1, 4, 4, 4],
    )
    .unwrap();
    let labels = LabelVolume::new([4, 4, 4], (0..64).map(|i| (i % 3 == 0) as u8).collect()).unwrap();

    let loss_of = |p: &Params| -> f64 {
        let out = forward(p, &net, &image).unwrap();
        let masses: Vec<_> = out
            .evidence
            .iter()
            .map(|e| mass_from_evidence(e).unwrap())
            .collect();
        let fused = dempster_fuse_all(&masses).unwrap();
        let probs = expected_probs(&dirichlet_from_mass(&fused).unwrap()).unwrap();
        seg_loss(&probs, &labels).unwrap().item().unwrap()
    };

    let out = forward(&params, &net, &image).unwrap();
    let masses: Vec<_> = out
        .evidence
        .iter()
        .map(|e| mass_from_evidence(e).unwrap())
        .collect();
    let fused = dempster_fuse_all(&masses).unwrap();
    let probs = expected_probs(&dirichlet_from_mass(&fused).unwrap()).unwrap();
    let loss = seg_loss(&probs, &labels).unwrap();
    let grads = loss.backward().unwrap();

    let step = 1e-5;
    for (name, tensor) in params.entries() {
        let analytic = grads.get(tensor);
        let probes = tensor.len().min(4);
        for i in 0..probes {
            let coord = (i * 97) % tensor.len();
            let perturb = |delta: f64| {
                let shifted = params
                    .map(|n, t| {
                        if n == name {
                            Ok(t.with_perturbed(coord, delta))
                        } else {
                            Ok(t.detach())
                        }
                    })
                    .unwrap();
                loss_of(&shifted)
            };
            let numeric = (perturb(step) - perturb(-step)) / (2.0 * step);
            let a = analytic.data()[coord];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            assert!(err <= 1e-4, "{name}[{coord}]: FD error {err:.2e}");
        }
    }
}
