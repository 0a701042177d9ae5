mod common;

use common::{max_diff, rows};
use texfield::flow::{
    euler_integrate, flow_loss, inpaint_from_projection, occlusion_mask, pbr_finetune, repaint_field, repaint_refine,
    sample, sample_field, training_batch, train_flow, velocity_loss, Conditioning, FlowBatch, FlowConfig, FlowExample,
    FlowRole, FlowTrainOptions, LatentMask, StraightLineField, VelocityField, VelocityNet,
};
use texfield::geometry::sample_surface;
use texfield::geometry::shapes::checker_sphere;
use texfield::nnkit::Tensor;
use texfield::vae::{LatentField, Vae, VaeConfig};
use texfield::voxelgrid::voxelize_points;

fn small() -> FlowConfig {
    FlowConfig { hidden_dim: 16, blocks: 2, window: 4, ..FlowConfig::default() }
}

fn field(n: usize, seed: u64) -> LatentField {
    let mut rng = common::rng(seed);
    let pts: Vec<[f64; 3]> = rows(&common::random(&mut rng, &[n, 3])).iter().map(|r| [r[0] * 0.45, r[1] * 0.45, r[2] * 0.45]).collect();
    let vs = voxelize_points(&pts, 8).unwrap();
    let l = vs.len();
    LatentField::from_codes(vs, 8, common::random(&mut rng, &[l, 8]).into_data()).unwrap()
}

struct Linear(f64);

impl VelocityField for Linear {
    fn velocity(&self, x: &Tensor<f64>, _t: f64) -> texfield::Result<Tensor<f64>> {
        Tensor::new(x.shape(), x.data().iter().map(|v| self.0 * v).collect())
    }
}

#[test]
fn loss_is_zero_for_exact_velocity_and_matches_hand_value() {
    assert_eq!(velocity_loss(&[0.5, 0.5], &[0.5, -0.5], &[1.0, 0.0]).unwrap(), 0.0);
    // target (ε − x₀) = (1, 1); errors (1, -1) squared and averaged
    assert_eq!(velocity_loss(&[2.0, 0.0], &[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
    assert!(velocity_loss(&[1.0], &[1.0, 2.0], &[0.0, 0.0]).is_err());
}

#[test]
fn flow_loss_agrees_with_direct_velocity() {
    let net = VelocityNet::<f64>::new(small(), FlowRole::Albedo, 1).unwrap();
    let target = field(40, 2);
    let cond = field(40, 2).with_codes(vec![0.1; target.z.len()]).unwrap();
    let ex = FlowExample::new(target, cond, None).unwrap();
    let batch = training_batch(&ex, 5, 0).unwrap();
    let c = Conditioning { cond: &batch.cond, geo: None, extra: None, keys: &batch.keys, resolution: batch.resolution };
    let v = net.velocity(&batch.xt().unwrap(), batch.t, &c).unwrap();
    let direct = velocity_loss(v.data(), batch.x0.data(), batch.eps.data()).unwrap();
    assert!((flow_loss(&net, &batch).unwrap() - direct).abs() < 1e-14);
    let bad = FlowBatch { keys: batch.keys[1..].to_vec(), ..batch };
    assert!(flow_loss(&net, &bad).is_err());
}

#[test]
fn velocity_is_equivariant_to_row_order() {
    let net = VelocityNet::<f64>::new(small(), FlowRole::Albedo, 3).unwrap();
    let lat = field(60, 4);
    let l = lat.len();
    let x = lat.z_tensor::<f64>();
    let cond = lat.with_codes(lat.z.iter().map(|v| v * 0.5).collect()).unwrap().z_tensor::<f64>();
    let keys = lat.voxels.keys().to_vec();
    let c = Conditioning { cond: &cond, geo: None, extra: None, keys: &keys, resolution: 8 };
    let v = rows(&net.velocity(&x, 0.4, &c).unwrap());

    let perm: Vec<usize> = (0..l).rev().collect();
    let pick = |t: &Tensor<f64>| Tensor::from_rows(&perm.iter().map(|&i| t.row(i)).collect::<Vec<_>>(), t.cols());
    let (px, pc) = (pick(&x), pick(&cond));
    let pkeys: Vec<_> = perm.iter().map(|&i| keys[i]).collect();
    let c2 = Conditioning { cond: &pc, geo: None, extra: None, keys: &pkeys, resolution: 8 };
    let pv = rows(&net.velocity(&px, 0.4, &c2).unwrap());
    let unpermuted: Vec<Vec<f64>> = (0..l).map(|i| pv[l - 1 - i].clone()).collect();
    assert!(max_diff(&v, &unpermuted) < 1e-12);
}

#[test]
fn euler_error_halves_with_twice_the_steps() {
    let x1 = Tensor::new(&[1, 2], vec![1.0, -2.0]).unwrap();
    let exact: Vec<f64> = x1.data().iter().map(|v| v * (-0.8f64).exp()).collect();
    let err = |n| {
        let x = euler_integrate(&Linear(0.8), x1.clone(), n).unwrap();
        x.data().iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    };
    for n in [10, 20, 40] {
        let ratio = err(n) / err(2 * n);
        assert!((ratio - 2.0).abs() < 0.15, "{n}: {ratio}");
    }
    let target = field(30, 5);
    let line = StraightLineField { x0: target.z_tensor() };
    for n in [1, 7, 50] {
        let out = sample_field(&line, &target, 8, n, 3).unwrap();
        assert!(out.z.iter().zip(&target.z).all(|(a, b)| (a - b).abs() < 1e-10));
    }
    assert!(euler_integrate(&Linear(1.0), x1, 0).is_err());
}

#[test]
fn sampling_is_seeded_and_keeps_condition_voxels() {
    let net = VelocityNet::<f64>::new(small(), FlowRole::Albedo, 6).unwrap();
    let cond = field(50, 7);
    let a = sample(&net, &cond, None, 8, 11).unwrap();
    assert_eq!(a, sample(&net, &cond, None, 8, 11).unwrap());
    assert_ne!(a.z, sample(&net, &cond, None, 8, 12).unwrap().z);
    assert_eq!(a.voxels.keys(), cond.voxels.keys());
    assert!(a.z.iter().all(|v| v.is_finite()));
}

#[test]
fn repaint_masks_behave_at_the_extremes() {
    let net = VelocityNet::<f64>::new(small(), FlowRole::Albedo, 8).unwrap();
    let cond = field(50, 9);
    let known = cond.with_codes(cond.z.iter().map(|v| v.sin()).collect()).unwrap();
    let l = known.len();
    let full = repaint_refine(&net, &known, &LatentMask::all(l, true), &cond, 6, 4).unwrap();
    assert_eq!(full.z, sample(&net, &cond, None, 6, 4).unwrap().z);
    assert_eq!(repaint_refine(&net, &known, &LatentMask::all(l, false), &cond, 6, 4).unwrap(), known);

    let half = LatentMask((0..l).map(|i| i % 2 == 0).collect());
    let out = repaint_refine(&net, &known, &half, &cond, 6, 4).unwrap();
    for i in 0..l {
        if half.0[i] {
            assert_ne!(out.row(i), known.row(i));
        } else {
            assert_eq!(out.row(i), known.row(i));
        }
    }
    let line = StraightLineField { x0: known.z_tensor() };
    let again = repaint_field(&line, &known, &half, 10, 2).unwrap();
    assert!(again.z.iter().zip(&known.z).all(|(a, b)| (a - b).abs() < 1e-10));
    assert!(repaint_refine(&net, &known, &LatentMask::all(l + 1, true), &cond, 6, 4).is_err());
}

#[test]
fn mask_constructors() {
    let lat = field(40, 12);
    let keys = lat.voxels.keys();
    let m = LatentMask::from_keys(&lat.voxels, &keys[..3]);
    assert_eq!(m.count(), 3);
    assert!(m.0[..3].iter().all(|&b| b));
    let right = LatentMask::from_region(&lat.voxels, |c| c[0] > 0.0);
    let centers = lat.voxels.centers();
    assert!(right.0.iter().zip(&centers).all(|(&b, c)| b == (c[0] > 0.0)));
}

#[test]
fn training_reduces_loss_and_is_reproducible() {
    let target = field(40, 13);
    let cond = target.with_codes(target.z.iter().map(|v| -v).collect()).unwrap();
    let ex = [FlowExample::new(target, cond, None).unwrap()];
    let opts = FlowTrainOptions { steps: 150, lr: 3e-3, seed: 1, grad_clip: Some(1.0), cosine: false };
    let run = || {
        let mut net = VelocityNet::<f64>::new(small(), FlowRole::Albedo, 14).unwrap();
        let losses = train_flow(&mut net, &ex, &opts, |_, _| {}).unwrap();
        (losses, net.to_checkpoint().to_bytes())
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert_eq!((&a, &ca), (&b, &cb));
    let eval = |bytes: &[u8]| {
        let net = VelocityNet::<f64>::from_checkpoint(&texfield::nnkit::Checkpoint::from_bytes(bytes).unwrap()).unwrap();
        (0..32).map(|i| flow_loss(&net, &training_batch(&ex[0], 99, i).unwrap()).unwrap()).sum::<f64>()
    };
    let before = eval(&VelocityNet::<f64>::new(small(), FlowRole::Albedo, 14).unwrap().to_checkpoint().to_bytes());
    assert!(eval(&ca) < 0.8 * before);
}

#[test]
fn material_finetune_starts_from_albedo_weights() {
    let net = VelocityNet::<f64>::new(FlowConfig { geo_input: false, ..small() }, FlowRole::Albedo, 15).unwrap();
    let albedo = field(30, 16);
    let material = albedo.with_codes(albedo.z.iter().map(|v| v * 0.3).collect()).unwrap();
    let geo = albedo.with_codes(vec![0.2; albedo.z.len()]).unwrap();
    let ex = [FlowExample::new(material, albedo.clone(), Some(geo.clone())).unwrap()];
    let opts = FlowTrainOptions { steps: 0, ..FlowTrainOptions::default() };
    let (mat, losses) = pbr_finetune(&net, &ex, true, &opts, |_, _| {}).unwrap();
    assert!(losses.is_empty());
    assert_eq!(mat.role, FlowRole::Material);
    let with_geo = sample(&mat, &albedo, Some(&geo), 4, 1).unwrap();
    assert!(max_diff(std::slice::from_ref(&with_geo.z), &[sample(&net, &albedo, None, 4, 1).unwrap().z]) < 1e-12);
    let no_geo = [FlowExample::new(ex[0].target.clone(), albedo, None).unwrap()];
    assert!(pbr_finetune(&net, &no_geo, true, &opts, |_, _| {}).is_err());
}

#[test]
fn inpainting_regenerates_only_occluded_voxels() {
    let mesh = checker_sphere(16, 8, 4, 2, [0.9, 0.1, 0.1], [0.1, 0.1, 0.9]);
    let samples = sample_surface(&mesh, 3000, 1, false).unwrap();
    let visible: Vec<bool> = samples.iter().map(|s| s.position[2] > 0.0).collect();
    let vae = Vae::<f64>::new(VaeConfig::tiny(), 2).unwrap();
    let dims = FlowConfig { latent_dim: vae.config.latent_dim, cond_dim: vae.config.latent_dim, ..small() };
    let net = VelocityNet::<f64>::new(dims, FlowRole::Albedo, 3).unwrap();
    let cond = vae.geometry_latent(&samples, 8).unwrap();
    let out = inpaint_from_projection(&vae, &net, &samples, &visible, &cond, 8, 5, 4).unwrap();
    assert_eq!(out.mask, occlusion_mask(&cond.voxels, &visible));
    assert!(out.mask.count() > 0 && out.mask.count() < out.mask.len());
    for i in 0..out.latent.len() {
        assert_eq!(out.mask.0[i], out.latent.row(i) != out.encoded.row(i), "voxel {i}");
    }
    assert!(inpaint_from_projection(&vae, &net, &samples, &visible[1..], &cond, 8, 5, 4).is_err());
}
