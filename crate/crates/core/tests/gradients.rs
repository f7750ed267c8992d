//! Analytic tape gradients against central differences, over many seeds.

use l2gnet::l2gmapper::{map_on_tape, position_weights, MapperSettings, embed_single_ref_on_tape, nystrom_on_tape};
use l2gnet::numerics::{grad_check, GradCheckOptions, Parameter, Rng, Tape, Tensor, Var};
use l2gnet::Result;

const SEEDS: u64 = 20;

fn opts() -> GradCheckOptions {
    GradCheckOptions::default()
}

fn assert_pass(report: &l2gnet::numerics::GradCheckReport, what: &str, seed: u64) {
    for p in &report.params {
        assert!(
            p.passed,
            "{what} seed {seed}: parameter {} max rel err {:.3e}",
            p.name, p.max_rel_err
        );
    }
}

/// Fixed random projection to a scalar, so every output entry matters.
fn project(tape: &Tape, x: Var, weights: &Tensor) -> Result<Var> {
    let y = tape.mul_const(x, weights)?;
    tape.sum(y)
}

#[test]
fn elementwise_and_linear_ops() {
    for seed in 0..SEEDS {
        let mut rng = Rng::seeded(seed);
        let a = Parameter::new("a", rng.normal_tensor(&[3, 4], 1.0));
        let b = Parameter::new("b", rng.normal_tensor(&[4, 2], 1.0));
        let bias = Parameter::new("bias", rng.normal_tensor(&[2], 1.0));
        let c = rng.normal_tensor(&[3, 2], 1.0);
        let r = grad_check(
            |t, v| {
                let m = t.matmul(v[0], v[1])?;
                let m = t.add_row_bias(m, v[2])?;
                let s = t.sigmoid(m)?;
                let e = t.exp(t.scale(m, 0.3)?)?;
                let prod = t.mul(s, e)?;
                let tr = t.transpose(prod)?;
                let back = t.transpose(tr)?;
                let d = t.sub(back, t.relu(m)?)?;
                let cat = t.concat0(&[d, m])?;
                let flat = t.reshape(cat, &[12])?;
                let w = Tensor::new(&[12], [c.data(), c.data()].concat())?;
                let l = project(t, flat, &w)?;
                let mn = t.mean(m)?;
                t.add(l, mn)
            },
            &[a, b, bias],
            opts(),
        )
        .unwrap();
        assert_pass(&r, "linear ops", seed);
    }
}

#[test]
fn sinkhorn_through_loss() {
    for seed in 0..SEEDS {
        let mut rng = Rng::seeded(100 + seed);
        let n = 2 + rng.index(5);
        let m = 2 + rng.index(5);
        let cost = Parameter::new("cost", rng.uniform_tensor(&[n, m], 0.0, 1.0));
        let c = rng.normal_tensor(&[n, m], 1.0);
        let a = vec![1.0 / n as f64; n];
        let b = vec![1.0 / m as f64; m];
        let r = grad_check(
            |t, v| {
                let plan = t.sinkhorn(v[0], &a, &b, 0.1, 10)?;
                project(t, plan, &c)
            },
            &[cost],
            opts(),
        )
        .unwrap();
        assert_pass(&r, "sinkhorn", seed);
    }
}

#[test]
fn nystrom_embedding_wrt_inputs_anchors_bandwidth() {
    for seed in 0..SEEDS {
        let mut rng = Rng::seeded(200 + seed);
        let z = Parameter::new("z", rng.normal_tensor(&[5, 3], 1.0));
        let w = Parameter::new("anchors", rng.normal_tensor(&[4, 3], 1.0));
        let s = Parameter::new("bandwidth", Tensor::scalar(rng.uniform_in(1.0, 2.0)));
        let c = rng.normal_tensor(&[5, 4], 1.0);
        let r = grad_check(
            |t, v| {
                let psi = nystrom_on_tape(t, v[0], v[1], v[2], 1e-6)?;
                project(t, psi, &c)
            },
            &[z, w, s],
            opts(),
        )
        .unwrap();
        assert_pass(&r, "nystrom", seed);
    }
}

#[test]
fn pooling_wrt_embedded_codes_and_reference() {
    for seed in 0..SEEDS {
        let mut rng = Rng::seeded(300 + seed);
        let psi = Parameter::new("psi", rng.normal_tensor(&[6, 3], 0.5));
        let r0 = Parameter::new("ref", rng.normal_tensor(&[3, 3], 0.5));
        let s = position_weights(6, 3, 0.3).unwrap();
        let c = rng.normal_tensor(&[3, 3], 1.0);
        let r = grad_check(
            |t, v| {
                let (out, _) = embed_single_ref_on_tape(t, v[0], v[1], &s, 0.1, 10)?;
                project(t, out, &c)
            },
            &[psi, r0],
            opts(),
        )
        .unwrap();
        assert_pass(&r, "pooling", seed);
    }
}

#[test]
fn full_mapper_chain() {
    for seed in 0..SEEDS {
        let mut rng = Rng::seeded(400 + seed);
        let z = Parameter::new("z_dis", rng.normal_tensor(&[6, 3], 1.0));
        let w = Parameter::new("anchors", rng.normal_tensor(&[4, 3], 1.0));
        let s = Parameter::new("bandwidth", Tensor::scalar(1.5));
        let r0 = Parameter::new("ref0", rng.normal_tensor(&[2, 4], 0.5));
        let r1 = Parameter::new("ref1", rng.normal_tensor(&[2, 4], 0.5));
        let c = rng.normal_tensor(&[4, 4], 1.0);
        let settings = MapperSettings::default();
        let r = grad_check(
            |t, v| {
                let out = map_on_tape(t, v[0], v[1], v[2], &[v[3], v[4]], &settings, 1e-6)?;
                project(t, out.embedding, &c)
            },
            &[z, w, s, r0, r1],
            opts(),
        )
        .unwrap();
        assert_pass(&r, "mapper", seed);
    }
}

#[test]
fn convolution_normalization_and_losses() {
    for seed in 0..SEEDS {
        let mut rng = Rng::seeded(500 + seed);
        let x = Parameter::new("x", rng.normal_tensor(&[2, 5, 5], 1.0));
        let w = Parameter::new("conv.w", rng.normal_tensor(&[4, 2, 3, 3], 0.4));
        let b = Parameter::new("conv.b", rng.normal_tensor(&[4], 0.1));
        let gamma = Parameter::new("gn.gamma", rng.uniform_tensor(&[4], 0.5, 1.5));
        let beta = Parameter::new("gn.beta", rng.normal_tensor(&[4], 0.1));
        let up_w = Parameter::new("up.w", rng.normal_tensor(&[4, 3, 2, 2], 0.4));
        let up_b = Parameter::new("up.b", rng.normal_tensor(&[3], 0.1));
        let labels: Vec<u8> = (0..36).map(|_| rng.index(3) as u8).collect();
        let r = grad_check(
            |t, v| {
                let h = t.conv2d(v[0], v[1], v[2], 2, 1)?; // 4×3×3
                let h = t.group_norm(h, v[3], v[4], 2, 1e-5)?;
                let u = t.conv_transpose2x2(h, v[5], v[6])?; // 3×6×6
                let logits = t.reshape(u, &[3, 36])?;
                let ce = t.cross_entropy(logits, &labels)?;
                let bce = t.binary_cross_entropy(logits, &labels)?;
                let probs = t.softmax_classes(logits)?;
                let dice = t.soft_dice_loss(probs, &labels, 1e-5)?;
                let l = t.add(ce, bce)?;
                t.add(l, dice)
            },
            &[x, w, b, gamma, beta, up_w, up_b],
            opts(),
        )
        .unwrap();
        assert_pass(&r, "conv stack", seed);
    }
}

#[test]
fn kernel_distance_and_inverse_square_root() {
    for seed in 0..SEEDS {
        let mut rng = Rng::seeded(600 + seed);
        let a = Parameter::new("a", rng.normal_tensor(&[4, 3], 1.0));
        let b = Parameter::new("b", rng.normal_tensor(&[3, 3], 1.0));
        let c = rng.normal_tensor(&[4, 3], 1.0);
        let sym = rng.normal_tensor(&[3, 3], 1.0);
        let r = grad_check(
            |t, v| {
                let d = t.pairwise_sqdist(v[0], v[1])?;
                let l1 = project(t, d, &c)?;
                // a well-conditioned SPD matrix built from b
                let bt = t.transpose(v[1])?;
                let g = t.matmul(v[1], bt)?;
                let spd = t.add(g, t.constant(Tensor::identity(3).scale(2.0)))?;
                let inv = t.sym_inv_sqrt(spd, 1e-6)?;
                let l2 = project(t, inv, &sym)?;
                t.add(l1, l2)
            },
            &[a, b],
            opts(),
        )
        .unwrap();
        assert_pass(&r, "kernel", seed);
    }
}

#[test]
fn quantizer_objectives_with_straight_through() {
    use l2gnet::quantizer::{quantize_on_tape, LiteralSquaredError, QuantObjective, StopGradientPair};
    let objectives: [&dyn QuantObjective; 2] = [&StopGradientPair { beta: 0.25 }, &LiteralSquaredError];
    for seed in 0..SEEDS {
        for obj in objectives {
            let mut rng = Rng::seeded(700 + seed);
            let z = Parameter::new("z_con", rng.normal_tensor(&[6, 3], 1.0));
            let e = Parameter::new("codebook", rng.normal_tensor(&[5, 3], 1.0));
            let c = rng.normal_tensor(&[6, 3], 1.0);
            let r = grad_check(
                |t, v| {
                    let q = quantize_on_tape(t, v[0], v[1], obj)?;
                    let down = project(t, q.z_dis, &c)?;
                    t.add(down, q.loss)
                },
                &[z, e],
                opts(),
            )
            .unwrap();
            assert_pass(&r, obj.name(), seed);
        }
    }
}
