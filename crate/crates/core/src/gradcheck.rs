//! Central finite-difference gradient checking.
//!
//! Runs in f64 regardless of the training precision. Inputs are sampled in
//! [-2, 2] with rejection away from non-smooth points (relu kinks, min ties,
//! coincident distance rows), where finite differences are invalid.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::loss::{
    ae_loss, proto_loss_reserved, proto_loss_unreserved, total_loss, weighted_ce, LossWeights,
    ProtoMode,
};
use crate::model::{Architecture, PreciseModel, PrototypeLayout};
use crate::rng::{mix, rng_from};
use crate::tape::{Tape, TapeResult, TensorId};

/// A named tensor input to a gradient check: (values, shape).
pub type CheckInput = (Vec<f64>, Vec<usize>);

/// Builds the scalar loss from the given input values and returns it with
/// the tensor ids whose gradients are under test (parallel to the inputs).
pub type BuildFn<'a> =
    dyn Fn(&mut Tape<f64>, &[CheckInput]) -> TapeResult<(TensorId, Vec<TensorId>)> + 'a;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!(
            "{} {:<28} max rel err {:>10.3e}  (tol {:.0e}, {} instances)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.tolerance,
            self.instances
        )
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Compares backward gradients against central differences for one instance;
/// returns the worst relative error over every input element.
pub fn check_instance(inputs: &[CheckInput], eps: f64, build: &BuildFn) -> TapeResult<f64> {
    let mut tape = Tape::new();
    let (loss, targets) = build(&mut tape, inputs)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = targets
        .iter()
        .map(|&id| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.values(id).len()])
        })
        .collect();

    let eval = |values: &[CheckInput]| -> TapeResult<f64> {
        let mut tape = Tape::new();
        let (loss, _) = build(&mut tape, values)?;
        Ok(tape.scalar_value(loss))
    };

    let mut worst = 0.0f64;
    for p in 0..inputs.len() {
        for e in 0..inputs[p].0.len() {
            let mut plus = inputs.to_vec();
            plus[p].0[e] += eps;
            let mut minus = inputs.to_vec();
            minus[p].0[e] -= eps;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            worst = worst.max(rel_err(analytic[p][e], numeric));
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy)]
pub struct SuiteConfig {
    pub instances: usize,
    pub seed: u64,
    pub eps: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            instances: 20,
            seed: 0,
            eps: 1e-6,
        }
    }
}

pub fn suite_passed(outcomes: &[CheckOutcome]) -> bool {
    !outcomes.is_empty() && outcomes.iter().all(|o| o.passed)
}

// ── Samplers ────────────────────────────────────────────────────────

fn sample(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

/// Values in [-2, 2] with |v| >= margin (relu kink avoidance).
fn sample_off_zero(rng: &mut ChaCha8Rng, n: usize, margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(-2.0..2.0);
            if v.abs() >= margin {
                break v;
            }
        })
        .collect()
}

fn sample_positive(rng: &mut ChaCha8Rng, n: usize, lo: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..2.0)).collect()
}

/// All pairwise gaps >= margin, so min reductions have no near-ties.
fn sample_distinct(rng: &mut ChaCha8Rng, n: usize, margin: f64) -> Vec<f64> {
    loop {
        let v = sample(rng, n);
        let mut ok = true;
        'outer: for i in 0..n {
            for j in i + 1..n {
                if (v[i] - v[j]).abs() < margin {
                    ok = false;
                    break 'outer;
                }
            }
        }
        if ok {
            return v;
        }
    }
}

/// Rows of `a` and `b` pairwise separated by at least `margin` so the
/// distance gradient (a - b) / dist stays well conditioned.
fn sample_separated_rows(
    rng: &mut ChaCha8Rng,
    rows_a: usize,
    rows_b: usize,
    dim: usize,
    margin: f64,
) -> (Vec<f64>, Vec<f64>) {
    loop {
        let a = sample(rng, rows_a * dim);
        let b = sample(rng, rows_b * dim);
        let mut ok = true;
        'outer: for i in 0..rows_a {
            for j in 0..rows_b {
                let d2: f64 = (0..dim)
                    .map(|t| (a[i * dim + t] - b[j * dim + t]).powi(2))
                    .sum();
                if d2.sqrt() < margin {
                    ok = false;
                    break 'outer;
                }
            }
        }
        if ok {
            return (a, b);
        }
    }
}

// ── The suite ───────────────────────────────────────────────────────

struct Suite {
    cfg: SuiteConfig,
    outcomes: Vec<CheckOutcome>,
}

impl Suite {
    fn run<G>(&mut self, name: &str, tol: f64, mut instance: G) -> TapeResult<()>
    where
        G: FnMut(&mut ChaCha8Rng) -> TapeResult<f64>,
    {
        let mut worst = 0.0f64;
        for i in 0..self.cfg.instances {
            let mut rng = rng_from(mix(self.cfg.seed, mix(0x6C, i as u64)));
            worst = worst.max(instance(&mut rng)?);
        }
        self.outcomes.push(CheckOutcome {
            name: name.to_string(),
            instances: self.cfg.instances,
            max_rel_err: worst,
            tolerance: tol,
            passed: worst < tol,
        });
        Ok(())
    }
}

fn loss_check_arch() -> Architecture {
    Architecture {
        width: 3,
        height: 3,
        hidden: vec![6],
        latent_dim: 3,
        per_class_prototypes: 2,
        num_classes: 2,
        classifier_bias: true,
    }
}

/// Rebuilds `template` with parameter buffers taken from `inputs` and
/// returns the bound leaves for gradient extraction.
fn model_from_inputs(
    tape: &mut Tape<f64>,
    template: &PreciseModel<f64>,
    inputs: &[CheckInput],
) -> TapeResult<(crate::model::BoundModel, PreciseModel<f64>)> {
    let mut model = template.clone();
    for (p, (values, _)) in model.params.iter_mut().zip(inputs) {
        p.values = values.clone();
    }
    let bound = model.bind(tape, true)?;
    Ok((bound, model))
}

/// Every differentiable op plus the composed losses, checked against central
/// finite differences. One outcome per check, worst instance recorded.
pub fn full_suite(cfg: &SuiteConfig) -> TapeResult<Vec<CheckOutcome>> {
    let eps = cfg.eps;
    let mut suite = Suite {
        cfg: *cfg,
        outcomes: Vec::new(),
    };

    suite.run("matmul", 1e-6, |rng| {
        let inputs = vec![(sample(rng, 12), vec![3, 4]), (sample(rng, 8), vec![4, 2])];
        check_instance(&inputs, eps, &|t, v| {
            let a = t.leaf(v[0].0.clone(), &v[0].1, true)?;
            let b = t.leaf(v[1].0.clone(), &v[1].1, true)?;
            let m = t.matmul(a, b)?;
            Ok((t.sum(m, None)?, vec![a, b]))
        })
    })?;

    for tag in ["add", "sub", "mul"] {
        suite.run(&format!("elementwise-{tag}"), 1e-6, |rng| {
            let inputs = vec![(sample(rng, 6), vec![2, 3]), (sample(rng, 6), vec![2, 3])];
            check_instance(&inputs, eps, &|t, v| {
                let a = t.leaf(v[0].0.clone(), &v[0].1, true)?;
                let b = t.leaf(v[1].0.clone(), &v[1].1, true)?;
                let o = t.elementwise(tag, a, Some(b), None)?;
                // square so sub/add get non-constant curvature
                let sq = t.mul(o, o)?;
                Ok((t.sum(sq, None)?, vec![a, b]))
            })
        })?;
    }

    suite.run("mul-scalar-broadcast", 1e-6, |rng| {
        let inputs = vec![(sample(rng, 6), vec![2, 3]), (sample(rng, 1), vec![1])];
        check_instance(&inputs, eps, &|t, v| {
            let a = t.leaf(v[0].0.clone(), &v[0].1, true)?;
            let s = t.leaf(v[1].0.clone(), &v[1].1, true)?;
            let o = t.mul(a, s)?;
            Ok((t.sum(o, None)?, vec![a, s]))
        })
    })?;

    suite.run("scalar-mul", 1e-6, |rng| {
        let c = rng.random_range(-2.0..2.0);
        let inputs = vec![(sample(rng, 6), vec![2, 3])];
        check_instance(&inputs, eps, &|t, v| {
            let a = t.leaf(v[0].0.clone(), &v[0].1, true)?;
            let o = t.elementwise("scalar-mul", a, None, Some(c))?;
            let sq = t.mul(o, o)?;
            Ok((t.sum(sq, None)?, vec![a]))
        })
    })?;

    suite.run("relu", 1e-5, |rng| {
        let inputs = vec![(sample_off_zero(rng, 8, 0.05), vec![2, 4])];
        check_instance(&inputs, eps, &|t, v| {
            let a = t.leaf(v[0].0.clone(), &v[0].1, true)?;
            let r = t.elementwise("relu", a, None, None)?;
            let sq = t.mul(r, r)?;
            Ok((t.sum(sq, None)?, vec![a]))
        })
    })?;

    suite.run("sigmoid", 1e-6, |rng| {
        let inputs = vec![(sample(rng, 8), vec![2, 4])];
        check_instance(&inputs, eps, &|t, v| {
            let a = t.leaf(v[0].0.clone(), &v[0].1, true)?;
            let s = t.elementwise("sigmoid", a, None, None)?;
            Ok((t.sum(s, None)?, vec![a]))
        })
    })?;

    suite.run("exp", 1e-6, |rng| {
        let inputs = vec![(sample(rng, 6), vec![6])];
        check_instance(&inputs, eps, &|t, v| {
            let a = t.leaf(v[0].0.clone(), &v[0].1, true)?;
            let e = t.exp(a)?;
            Ok((t.sum(e, None)?, vec![a]))
        })
    })?;

    suite.run("ln-clamped", 1e-6, |rng| {
        let inputs = vec![(sample_positive(rng, 6, 0.05), vec![6])];
        check_instance(&inputs, eps, &|t, v| {
            let a = t.leaf(v[0].0.clone(), &v[0].1, true)?;
            let l = t.ln_clamped(a, 1e-12)?;
            Ok((t.sum(l, None)?, vec![a]))
        })
    })?;

    suite.run("add-row-broadcast", 1e-6, |rng| {
        let inputs = vec![(sample(rng, 6), vec![2, 3]), (sample(rng, 3), vec![3])];
        check_instance(&inputs, eps, &|t, v| {
            let a = t.leaf(v[0].0.clone(), &v[0].1, true)?;
            let b = t.leaf(v[1].0.clone(), &v[1].1, true)?;
            let o = t.add_row_broadcast(a, b)?;
            let sq = t.mul(o, o)?;
            Ok((t.sum(sq, None)?, vec![a, b]))
        })
    })?;

    suite.run("transpose", 1e-6, |rng| {
        let inputs = vec![(sample(rng, 6), vec![2, 3])];
        check_instance(&inputs, eps, &|t, v| {
            let a = t.leaf(v[0].0.clone(), &v[0].1, true)?;
            let tr = t.transpose(a)?;
            let sq = t.mul(tr, tr)?;
            Ok((t.sum(sq, None)?, vec![a]))
        })
    })?;

    for (name, axis) in [
        ("sum", None),
        ("sum-axis0", Some(0)),
        ("sum-axis1", Some(1)),
    ] {
        suite.run(name, 1e-6, |rng| {
            let inputs = vec![(sample(rng, 6), vec![2, 3])];
            check_instance(&inputs, eps, &|t, v| {
                let a = t.leaf(v[0].0.clone(), &v[0].1, true)?;
                let s = t.reduce("sum", a, axis)?;
                let sq = t.mul(s, s)?;
                Ok((t.sum(sq, None)?, vec![a]))
            })
        })?;
    }

    for (name, axis) in [("mean", None), ("mean-axis1", Some(1))] {
        suite.run(name, 1e-6, |rng| {
            let inputs = vec![(sample(rng, 6), vec![2, 3])];
            check_instance(&inputs, eps, &|t, v| {
                let a = t.leaf(v[0].0.clone(), &v[0].1, true)?;
                let m = t.reduce("mean", a, axis)?;
                let sq = t.mul(m, m)?;
                Ok((t.sum(sq, None)?, vec![a]))
            })
        })?;
    }

    for (name, axis) in [
        ("min", None),
        ("min-axis0", Some(0)),
        ("min-axis1", Some(1)),
    ] {
        suite.run(name, 1e-5, |rng| {
            let inputs = vec![(sample_distinct(rng, 6, 1e-3), vec![2, 3])];
            check_instance(&inputs, eps, &|t, v| {
                let a = t.leaf(v[0].0.clone(), &v[0].1, true)?;
                let m = t.reduce("min", a, axis)?;
                let sq = t.mul(m, m)?;
                Ok((t.sum(sq, None)?, vec![a]))
            })
        })?;
    }

    suite.run("row-distances", 1e-5, |rng| {
        let (a, b) = sample_separated_rows(rng, 3, 2, 2, 0.1);
        let inputs = vec![(a, vec![3, 2]), (b, vec![2, 2])];
        check_instance(&inputs, eps, &|t, v| {
            let a = t.leaf(v[0].0.clone(), &v[0].1, true)?;
            let b = t.leaf(v[1].0.clone(), &v[1].1, true)?;
            let d = t.row_distances(a, b)?;
            let sq = t.mul(d, d)?;
            Ok((t.sum(sq, None)?, vec![a, b]))
        })
    })?;

    suite.run("log-softmax", 1e-6, |rng| {
        let inputs = vec![(sample(rng, 12), vec![4, 3])];
        check_instance(&inputs, eps, &|t, v| {
            let a = t.leaf(v[0].0.clone(), &v[0].1, true)?;
            let l = t.log_softmax(a)?;
            let sq = t.mul(l, l)?;
            Ok((t.sum(sq, None)?, vec![a]))
        })
    })?;

    suite.run("select-rows", 1e-6, |rng| {
        let inputs = vec![(sample(rng, 9), vec![3, 3])];
        check_instance(&inputs, eps, &|t, v| {
            let a = t.leaf(v[0].0.clone(), &v[0].1, true)?;
            let s = t.select_rows(a, &[2, 0, 0])?;
            let sq = t.mul(s, s)?;
            Ok((t.sum(sq, None)?, vec![a]))
        })
    })?;

    suite.run("slice-cols", 1e-6, |rng| {
        let inputs = vec![(sample(rng, 8), vec![2, 4])];
        check_instance(&inputs, eps, &|t, v| {
            let a = t.leaf(v[0].0.clone(), &v[0].1, true)?;
            let s = t.slice_cols(a, 1, 2)?;
            let sq = t.mul(s, s)?;
            Ok((t.sum(sq, None)?, vec![a]))
        })
    })?;

    suite.run("concat1", 1e-6, |rng| {
        let inputs = vec![(sample(rng, 3), vec![3]), (sample(rng, 2), vec![2])];
        check_instance(&inputs, eps, &|t, v| {
            let a = t.leaf(v[0].0.clone(), &v[0].1, true)?;
            let b = t.leaf(v[1].0.clone(), &v[1].1, true)?;
            let c = t.concat1(&[a, b])?;
            let sq = t.mul(c, c)?;
            Ok((t.sum(sq, None)?, vec![a, b]))
        })
    })?;

    suite.run("ae-loss", 1e-6, |rng| {
        let inputs = vec![(sample(rng, 8), vec![2, 4]), (sample(rng, 8), vec![2, 4])];
        check_instance(&inputs, eps, &|t, v| {
            let x = t.leaf(v[0].0.clone(), &v[0].1, true)?;
            let r = t.leaf(v[1].0.clone(), &v[1].1, true)?;
            Ok((ae_loss(t, x, r)?, vec![x, r]))
        })
    })?;

    suite.run("weighted-ce", 1e-6, |rng| {
        // positive rows normalized to probabilities, away from the log floor
        let mut p = sample_positive(rng, 6, 0.05);
        for i in 0..2 {
            let s: f64 = p[i * 3..(i + 1) * 3].iter().sum();
            for j in 0..3 {
                p[i * 3 + j] /= s;
            }
        }
        let inputs = vec![(p, vec![2, 3])];
        check_instance(&inputs, eps, &|t, v| {
            let probs = t.leaf(v[0].0.clone(), &v[0].1, true)?;
            let l = weighted_ce(t, probs, &[0, 2], &[1.0, 2.0, 0.5])?;
            Ok((l, vec![probs]))
        })
    })?;

    let layout = PrototypeLayout {
        per_class: 2,
        num_classes: 2,
    };
    suite.run("proto-loss-reserved", 1e-5, |rng| {
        let (z, p) = sample_separated_rows(rng, 4, 4, 3, 0.1);
        let inputs = vec![(z, vec![4, 3]), (p, vec![4, 3])];
        check_instance(&inputs, eps, &|t, v| {
            let z = t.leaf(v[0].0.clone(), &v[0].1, true)?;
            let p = t.leaf(v[1].0.clone(), &v[1].1, true)?;
            let (t1, t2) = proto_loss_reserved(t, z, &[0, 1, 0, 1], p, layout)?;
            Ok((t.add(t1, t2)?, vec![z, p]))
        })
    })?;

    suite.run("proto-loss-reserved-one-class", 1e-5, |rng| {
        let (z, p) = sample_separated_rows(rng, 3, 4, 3, 0.1);
        let inputs = vec![(z, vec![3, 3]), (p, vec![4, 3])];
        check_instance(&inputs, eps, &|t, v| {
            let z = t.leaf(v[0].0.clone(), &v[0].1, true)?;
            let p = t.leaf(v[1].0.clone(), &v[1].1, true)?;
            let (t1, t2) = proto_loss_reserved(t, z, &[1, 1, 1], p, layout)?;
            Ok((t.add(t1, t2)?, vec![z, p]))
        })
    })?;

    suite.run("proto-loss-unreserved", 1e-5, |rng| {
        let (z, p) = sample_separated_rows(rng, 4, 4, 3, 0.1);
        let inputs = vec![(z, vec![4, 3]), (p, vec![4, 3])];
        check_instance(&inputs, eps, &|t, v| {
            let z = t.leaf(v[0].0.clone(), &v[0].1, true)?;
            let p = t.leaf(v[1].0.clone(), &v[1].1, true)?;
            let (t1, t2) = proto_loss_unreserved(t, z, p)?;
            Ok((t.add(t1, t2)?, vec![z, p]))
        })
    })?;

    // Network paths: gradients with respect to every model parameter.
    let arch = loss_check_arch();
    let pixels = arch.pixels();

    suite.run("encode", 1e-5, |rng| {
        let template =
            PreciseModel::<f64>::init(loss_check_arch(), rng.random_range(0..1u64 << 40))
                .expect("valid arch");
        let mut inputs: Vec<CheckInput> = template
            .params
            .iter()
            .map(|p| (p.values.clone(), p.shape.clone()))
            .collect();
        inputs.push((sample_positive(rng, 2 * pixels, 0.0), vec![2, pixels]));
        check_instance(&inputs, eps, &|t, v| {
            let (bound, _) = model_from_inputs(t, &template, &v[..v.len() - 1])?;
            let x = t.leaf(v.last().unwrap().0.clone(), &v.last().unwrap().1, true)?;
            let z = bound.encode(t, x)?;
            let sq = t.mul(z, z)?;
            let mut ids = bound.param_ids.clone();
            ids.push(x);
            Ok((t.sum(sq, None)?, ids))
        })
    })?;

    suite.run("forward-end-to-end", 1e-4, |rng| {
        let template =
            PreciseModel::<f64>::init(loss_check_arch(), rng.random_range(0..1u64 << 40))
                .expect("valid arch");
        let inputs: Vec<CheckInput> = template
            .params
            .iter()
            .map(|p| (p.values.clone(), p.shape.clone()))
            .collect();
        let x = sample_positive(rng, 2 * pixels, 0.0);
        // fixed projections so every forward output contributes to the loss
        let c_recon = sample(rng, 2 * pixels);
        let c_dist = sample(rng, 2 * 4);
        let c_prob = sample(rng, 2 * 2);
        check_instance(&inputs, eps, &|t, v| {
            let (bound, _) = model_from_inputs(t, &template, v)?;
            let xid = t.leaf(x.clone(), &[2, pixels], false)?;
            let fp = bound.forward(t, xid)?;
            let mr = t.constant(c_recon.clone(), &[2, pixels])?;
            let md = t.constant(c_dist.clone(), &[2, 4])?;
            let mp = t.constant(c_prob.clone(), &[2, 2])?;
            let a = t.mul(fp.reconstruction, mr)?;
            let b = t.mul(fp.distances, md)?;
            let c = t.mul(fp.probs, mp)?;
            let sa = t.sum(a, None)?;
            let sb = t.sum(b, None)?;
            let sc = t.sum(c, None)?;
            let ab = t.add(sa, sb)?;
            Ok((t.add(ab, sc)?, bound.param_ids.clone()))
        })
    })?;

    for (name, mode, labels) in [
        (
            "total-loss-reserved",
            ProtoMode::Reserved,
            vec![0usize, 1, 0, 1],
        ),
        (
            "total-loss-reserved-one-class",
            ProtoMode::Reserved,
            vec![1, 1, 1, 1],
        ),
        (
            "total-loss-unreserved",
            ProtoMode::Unreserved,
            vec![0, 1, 0, 1],
        ),
    ] {
        suite.run(name, 1e-4, |rng| {
            let template =
                PreciseModel::<f64>::init(loss_check_arch(), rng.random_range(0..1u64 << 40))
                    .expect("valid arch");
            let inputs: Vec<CheckInput> = template
                .params
                .iter()
                .map(|p| (p.values.clone(), p.shape.clone()))
                .collect();
            let x = sample_positive(rng, 4 * pixels, 0.0);
            let weights = LossWeights::<f64>::new(1.0, 0.001, vec![0.8, 1.4]);
            let labels = labels.clone();
            check_instance(&inputs, eps, &|t, v| {
                let (bound, _) = model_from_inputs(t, &template, v)?;
                let xid = t.leaf(x.clone(), &[4, pixels], false)?;
                let out = total_loss(t, &bound, xid, &labels, &weights, mode)?;
                Ok((out.total, bound.param_ids.clone()))
            })
        })?;
    }

    Ok(suite.outcomes)
}
