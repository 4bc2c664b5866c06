//! Gradient-check suite: every differentiable operation on randomized
//! shapes, plus the full training objectives differentiated through a small
//! encoder pair, all against the central-difference oracle in 64-bit mode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::momentum::init_teacher;
use crate::nn::{build_encoder, BackboneKind, EncoderSpec, Mode, TapedParams};
use crate::objectives::{total_loss, BatchEmbeddings, InterLoss, IntraDistance, ObjectiveConfig};
use crate::tensor::{finite_diff_check, gradcheck::sabotaged_square, Result, Tensor};

#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub n_checked: usize,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub checks: Vec<OpCheck>,
    pub tol: f64,
    pub step: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn rand_values(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Random shape up to 4x8x8x8, biased toward small ranks.
fn rand_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let rank = rng.gen_range(1..=4usize);
    (0..rank)
        .map(|i| {
            if i == 0 {
                rng.gen_range(1..=4)
            } else {
                rng.gen_range(1..=8)
            }
        })
        .collect()
}

/// Shrinks a shape for the broadcast partner: random axes collapse to 1 and
/// leading axes may drop entirely.
fn broadcast_partner(rng: &mut ChaCha8Rng, dims: &[usize]) -> Vec<usize> {
    let keep_from = rng.gen_range(0..dims.len());
    dims[keep_from..]
        .iter()
        .map(|&d| if rng.gen_bool(0.3) { 1 } else { d })
        .collect()
}

fn tensor(dims: &[usize], values: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(dims, values).expect("suite shapes are valid")
}

/// Values resampled away from a kink point so central differences stay
/// two-sided.
fn rand_values_away_from(
    rng: &mut ChaCha8Rng,
    n: usize,
    lo: f64,
    hi: f64,
    kink: f64,
    margin: f64,
) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v = rng.gen_range(lo..hi);
            if (v - kink).abs() > margin {
                break v;
            }
        })
        .collect()
}

struct Suite {
    rng: ChaCha8Rng,
    draws: usize,
    step: f64,
    tol: f64,
    checks: Vec<OpCheck>,
}

impl Suite {
    fn check<F>(&mut self, name: &str, mut case: F) -> Result<()>
    where
        F: FnMut(&mut ChaCha8Rng) -> Result<(SuiteFn, Vec<Tensor<f64>>)>,
    {
        let mut worst = 0.0f64;
        let mut n = 0usize;
        for _ in 0..self.draws {
            let (f, xs) = case(&mut self.rng)?;
            let report = finite_diff_check(&f, &xs, self.step, self.tol)?;
            worst = worst.max(report.max_rel_err);
            n += report.n_checked;
        }
        self.checks.push(OpCheck {
            name: name.to_string(),
            max_rel_err: worst,
            n_checked: n,
            passed: worst <= self.tol,
        });
        Ok(())
    }
}

type SuiteFn = Box<dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>>;

fn elementwise_case(op: &'static str) -> impl FnMut(&mut ChaCha8Rng) -> Result<(SuiteFn, Vec<Tensor<f64>>)> {
    move |rng| {
        let a_dims = rand_shape(rng);
        let b_dims = broadcast_partner(rng, &a_dims);
        let n_a: usize = a_dims.iter().product();
        let n_b: usize = b_dims.iter().product();
        let a = tensor(&a_dims, rand_values(rng, n_a, -2.0, 2.0));
        let b = match op {
            // Keep denominators well away from the domain guard.
            "div" => {
                let v: Vec<f64> = rand_values(rng, n_b, 0.5, 2.5)
                    .into_iter()
                    .map(|x| if x < 1.5 { -x } else { x })
                    .collect();
                tensor(&b_dims, v)
            }
            _ => tensor(&b_dims, rand_values(rng, n_b, -2.0, 2.0)),
        };
        let f: SuiteFn = Box::new(move |xs: &[Tensor<f64>]| {
            let r = match op {
                "add" => xs[0].add(&xs[1])?,
                "sub" => xs[0].sub(&xs[1])?,
                "mul" => xs[0].mul(&xs[1])?,
                "div" => xs[0].div(&xs[1])?,
                _ => unreachable!(),
            };
            // Weighted sum keeps per-element gradients distinguishable.
            let n = r.numel();
            let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.1 * i as f64).collect();
            r.mul(&Tensor::from_vec(r.dims(), w)?)?.sum_all()
        });
        Ok((f, vec![a, b]))
    }
}

fn run_ops(suite: &mut Suite) -> Result<()> {
    for op in ["add", "sub", "mul", "div"] {
        suite.check(&format!("elementwise_{op}"), elementwise_case(op))?;
    }

    suite.check("matmul", |rng| {
        let (m, k, n) = (
            rng.gen_range(1..=6usize),
            rng.gen_range(1..=6usize),
            rng.gen_range(1..=6usize),
        );
        let a = tensor(&[m, k], rand_values(rng, m * k, -1.5, 1.5));
        let b = tensor(&[k, n], rand_values(rng, k * n, -1.5, 1.5));
        let f: SuiteFn = Box::new(|xs| {
            let r = xs[0].matmul(&xs[1])?;
            let w: Vec<f64> = (0..r.numel()).map(|i| 0.2 + 0.05 * i as f64).collect();
            r.mul(&Tensor::from_vec(r.dims(), w)?)?.sum_all()
        });
        Ok((f, vec![a, b]))
    })?;

    suite.check("conv2d", |rng| {
        let (n, c, o) = (
            rng.gen_range(1..=2usize),
            rng.gen_range(1..=3usize),
            rng.gen_range(1..=3usize),
        );
        let k = if rng.gen_bool(0.5) { 1 } else { 3 };
        let (h, w) = (rng.gen_range(k..=7usize), rng.gen_range(k..=7usize));
        let stride = rng.gen_range(1..=2usize);
        let pad = rng.gen_range(0..=1usize);
        let x = tensor(&[n, c, h, w], rand_values(rng, n * c * h * w, -1.5, 1.5));
        let wt = tensor(&[o, c, k, k], rand_values(rng, o * c * k * k, -1.0, 1.0));
        let f: SuiteFn = Box::new(move |xs| {
            let r = xs[0].conv2d(&xs[1], stride, pad)?;
            let wv: Vec<f64> = (0..r.numel()).map(|i| 0.1 + 0.03 * i as f64).collect();
            r.mul(&Tensor::from_vec(r.dims(), wv)?)?.sum_all()
        });
        Ok((f, vec![x, wt]))
    })?;

    suite.check("relu", |rng| {
        let dims = rand_shape(rng);
        let n: usize = dims.iter().product();
        let x = tensor(&dims, rand_values_away_from(rng, n, -2.0, 2.0, 0.0, 0.05));
        let f: SuiteFn = Box::new(|xs| xs[0].relu().mul(&xs[0].detach())?.sum_all());
        Ok((f, vec![x]))
    })?;

    suite.check("softmax_t", |rng| {
        let (b, d) = (rng.gen_range(1..=4usize), rng.gen_range(2..=8usize));
        let tau = [0.2, 1.0, 4.0][rng.gen_range(0..3usize)];
        let x = tensor(&[b, d], rand_values(rng, b * d, -2.0, 2.0));
        let w = tensor(&[b, d], rand_values(rng, b * d, -1.0, 1.0));
        let f: SuiteFn = Box::new(move |xs| xs[0].softmax_t(1, tau)?.mul(&w)?.sum_all());
        Ok((f, vec![x]))
    })?;

    suite.check("l2_normalize", |rng| {
        let (b, d) = (rng.gen_range(1..=4usize), rng.gen_range(2..=8usize));
        // Rows bounded away from zero norm.
        let v: Vec<f64> = rand_values(rng, b * d, -2.0, 2.0)
            .into_iter()
            .map(|x| x + 0.4 * x.signum() + if x == 0.0 { 0.4 } else { 0.0 })
            .collect();
        let x = tensor(&[b, d], v);
        let w = tensor(&[b, d], rand_values(rng, b * d, -1.0, 1.0));
        let f: SuiteFn = Box::new(move |xs| xs[0].l2_normalize(1, 1e-12)?.mul(&w)?.sum_all());
        Ok((f, vec![x]))
    })?;

    suite.check("reduce_sum", |rng| {
        let dims = rand_shape(rng);
        let n: usize = dims.iter().product();
        let axis = rng.gen_range(0..dims.len());
        let keep = rng.gen_bool(0.5);
        let x = tensor(&dims, rand_values(rng, n, -2.0, 2.0));
        let f: SuiteFn = Box::new(move |xs| {
            let r = xs[0].sum_axis(axis, keep)?;
            let w: Vec<f64> = (0..r.numel()).map(|i| 0.5 + 0.07 * i as f64).collect();
            r.mul(&Tensor::from_vec(r.dims(), w)?)?.sum_all()
        });
        Ok((f, vec![x]))
    })?;

    suite.check("reduce_mean", |rng| {
        let dims = rand_shape(rng);
        let n: usize = dims.iter().product();
        let axis = rng.gen_range(0..dims.len());
        let x = tensor(&dims, rand_values(rng, n, -2.0, 2.0));
        let f: SuiteFn = Box::new(move |xs| {
            let r = xs[0].mean_axis(axis, true)?;
            let w: Vec<f64> = (0..r.numel()).map(|i| 0.5 + 0.07 * i as f64).collect();
            r.mul(&Tensor::from_vec(r.dims(), w)?)?.mean_all()
        });
        Ok((f, vec![x]))
    })?;

    suite.check("exp", |rng| {
        let dims = rand_shape(rng);
        let n: usize = dims.iter().product();
        let x = tensor(&dims, rand_values(rng, n, -2.0, 2.0));
        let f: SuiteFn = Box::new(|xs| xs[0].exp().sum_all());
        Ok((f, vec![x]))
    })?;

    suite.check("ln", |rng| {
        let dims = rand_shape(rng);
        let n: usize = dims.iter().product();
        let x = tensor(&dims, rand_values(rng, n, 0.3, 3.0));
        let f: SuiteFn = Box::new(|xs| xs[0].ln()?.sum_all());
        Ok((f, vec![x]))
    })?;

    suite.check("sqrt", |rng| {
        let dims = rand_shape(rng);
        let n: usize = dims.iter().product();
        let x = tensor(&dims, rand_values(rng, n, 0.2, 4.0));
        let f: SuiteFn = Box::new(|xs| xs[0].sqrt()?.sum_all());
        Ok((f, vec![x]))
    })?;

    suite.check("clamp_min", |rng| {
        let dims = rand_shape(rng);
        let n: usize = dims.iter().product();
        let x = tensor(&dims, rand_values_away_from(rng, n, -2.0, 2.0, 0.5, 0.05));
        let f: SuiteFn = Box::new(|xs| xs[0].clamp_min_scalar(0.5).sum_all());
        Ok((f, vec![x]))
    })?;

    suite.check("scalar_affine", |rng| {
        let dims = rand_shape(rng);
        let n: usize = dims.iter().product();
        let x = tensor(&dims, rand_values(rng, n, -2.0, 2.0));
        let f: SuiteFn = Box::new(|xs| xs[0].mul_scalar(1.7).add_scalar(-0.3).sum_all());
        Ok((f, vec![x]))
    })?;

    suite.check("transpose_reshape", |rng| {
        let (m, n) = (rng.gen_range(1..=6usize), rng.gen_range(1..=6usize));
        let x = tensor(&[m, n], rand_values(rng, m * n, -2.0, 2.0));
        let f: SuiteFn = Box::new(move |xs| {
            let t = xs[0].transpose2d()?.reshape(&[m * n])?;
            let w: Vec<f64> = (0..m * n).map(|i| 0.4 + 0.09 * i as f64).collect();
            t.mul(&Tensor::from_vec(&[m * n], w)?)?.sum_all()
        });
        Ok((f, vec![x]))
    })?;

    suite.check("detach_freeze", |rng| {
        let dims = rand_shape(rng);
        let n: usize = dims.iter().product();
        let x = tensor(&dims, rand_values(rng, n, -2.0, 2.0));
        let frozen = x.detach();
        let f: SuiteFn = Box::new(move |xs| xs[0].mul(&frozen)?.sum_all());
        Ok((f, vec![x]))
    })?;

    Ok(())
}

fn loss_spec(backbone: BackboneKind) -> EncoderSpec {
    EncoderSpec {
        backbone,
        backbone_widths: match backbone {
            BackboneKind::Mlp => vec![5],
            BackboneKind::Smallconv => vec![2, 3],
        },
        in_channels: 2,
        in_size: 4,
        projector_hidden: 6,
        projector_out: 4,
        predictor_hidden: 6,
        use_predictor: true,
    }
}

/// Differentiates the full objective (both views, both heads, encoder
/// included) with respect to every student parameter.
fn run_loss_graphs(suite: &mut Suite) -> Result<()> {
    let graphs: Vec<(&str, BackboneKind, ObjectiveConfig)> = vec![
        (
            "loss_inter_intra_cosine",
            BackboneKind::Mlp,
            ObjectiveConfig::default(),
        ),
        (
            "loss_inter_intra_cosine_conv",
            BackboneKind::Smallconv,
            ObjectiveConfig::default(),
        ),
        (
            "loss_intra_ce",
            BackboneKind::Mlp,
            ObjectiveConfig { intra: IntraDistance::Ce, ..Default::default() },
        ),
        (
            "loss_intra_mse",
            BackboneKind::Mlp,
            ObjectiveConfig { intra: IntraDistance::Mse, ..Default::default() },
        ),
        (
            "loss_cl_no_ema",
            BackboneKind::Mlp,
            ObjectiveConfig { inter: InterLoss::InfonceNoEma, ..Default::default() },
        ),
        (
            "loss_byol",
            BackboneKind::Mlp,
            ObjectiveConfig { inter: InterLoss::Byol, ..Default::default() },
        ),
        (
            "loss_simsiam",
            BackboneKind::Mlp,
            ObjectiveConfig {
                inter: InterLoss::Simsiam,
                intra: IntraDistance::None,
                ..Default::default()
            },
        ),
    ];
    for (name, backbone, objective) in graphs {
        suite.check(name, |rng| {
            let spec = loss_spec(backbone);
            let wrap = |e: String| crate::tensor::TensorError::InvalidArgument {
                op: "gradcheck",
                detail: e,
            };
            let student =
                build_encoder::<f64>(&spec, rng.gen()).map_err(|e| wrap(e.to_string()))?;
            let teacher = init_teacher(&student).map_err(|e| wrap(e.to_string()))?;
            let b = 4usize;
            let n = b * 2 * 4 * 4;
            let x1 = tensor(&[b, 2, 4, 4], rand_values(rng, n, -1.0, 1.0));
            let x2 = tensor(&[b, 2, 4, 4], rand_values(rng, n, -1.0, 1.0));
            let t1 = teacher.encoder.encode_frozen(&x1, Mode::Train).map_err(
                |e| crate::tensor::TensorError::InvalidArgument {
                    op: "gradcheck",
                    detail: e.to_string(),
                },
            )?;
            let t2 = teacher.encoder.encode_frozen(&x2, Mode::Train).map_err(
                |e| crate::tensor::TensorError::InvalidArgument {
                    op: "gradcheck",
                    detail: e.to_string(),
                },
            )?;
            let params: Vec<Tensor<f64>> =
                student.params().iter().map(|p| p.value.clone()).collect();
            let f: SuiteFn = Box::new(move |xs: &[Tensor<f64>]| {
                let binding = TapedParams::from_leaves(xs.to_vec());
                let s1 = student
                    .encode_pure(&x1, Mode::Train, Some(&binding))
                    .map_err(|e| crate::tensor::TensorError::InvalidArgument {
                        op: "gradcheck",
                        detail: e.to_string(),
                    })?;
                let s2 = student
                    .encode_pure(&x2, Mode::Train, Some(&binding))
                    .map_err(|e| crate::tensor::TensorError::InvalidArgument {
                        op: "gradcheck",
                        detail: e.to_string(),
                    })?;
                let be = BatchEmbeddings::new(
                    s1.p,
                    s2.p,
                    s1.z,
                    s2.z,
                    t1.p.clone(),
                    t2.p.clone(),
                    t1.z.clone(),
                    t2.z.clone(),
                )?;
                Ok(total_loss(&be, &objective)?.total)
            });
            Ok((f, params))
        })?;
    }
    Ok(())
}

/// Runs the whole check suite; every differentiable operation appears
/// exactly once, followed by the composite loss graphs.
pub fn run_suite(seed: u64, draws: usize, step: f64, tol: f64) -> Result<SuiteReport> {
    run_suite_inner(seed, draws, step, tol, false)
}

/// Like [`run_suite`] but additionally checks a deliberately wrong backward
/// rule, which must fail (oracle sensitivity fixture).
pub fn run_suite_with_sabotage(seed: u64, draws: usize, step: f64, tol: f64) -> Result<SuiteReport> {
    run_suite_inner(seed, draws, step, tol, true)
}

fn run_suite_inner(
    seed: u64,
    draws: usize,
    step: f64,
    tol: f64,
    sabotage: bool,
) -> Result<SuiteReport> {
    let mut suite = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        draws,
        step,
        tol,
        checks: Vec::new(),
    };
    run_ops(&mut suite)?;
    run_loss_graphs(&mut suite)?;
    if sabotage {
        suite.check("sabotaged_square", |rng| {
            let x = tensor(&[3], rand_values(rng, 3, 0.5, 2.0));
            let f: SuiteFn = Box::new(|xs| sabotaged_square(&xs[0]).sum_all());
            Ok((f, vec![x]))
        })?;
    }
    Ok(SuiteReport {
        checks: suite.checks,
        tol,
        step,
    })
}
