//! Central finite-difference checks of the tape's backward rules.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::attention::{draw_features, AttentionMode};
use super::tape::{Activation, NormKind, Tape};
use super::tensor::Tensor;
use super::Var;
use crate::error::Result;
use crate::seed;

pub const FD_STEP: f64 = 1e-4;
const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckEntry {
    pub primitive: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub passed: bool,
    pub note: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn entry(&self, name: &str) -> Option<&GradcheckEntry> {
        self.entries.iter().find(|e| e.primitive == name)
    }
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn failed(primitive: &str, note: String) -> GradcheckEntry {
    GradcheckEntry {
        primitive: primitive.into(),
        max_rel_error: f64::INFINITY,
        checked: 0,
        passed: false,
        note: Some(note),
    }
}

/// Compare analytic and central-difference gradients of the scalar built by
/// `build` with respect to every element of every input.
pub fn check<F>(primitive: &str, inputs: &[Tensor<f64>], tolerance: f64, build: F) -> GradcheckEntry
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let analytic = match build(&mut tape, &vars).and_then(|l| tape.backward(l)) {
        Ok(g) => g,
        Err(e) => return failed(primitive, e.to_string()),
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut work = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let ga = analytic.get(v).expect("leaf gradient").data().to_vec();
        for (j, &a) in ga.iter().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&work);
            work[i].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&work);
            work[i].data_mut()[j] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) => return failed(primitive, e.to_string()),
            };
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(a, numeric));
            checked += 1;
        }
    }
    GradcheckEntry {
        primitive: primitive.into(),
        max_rel_error: worst,
        checked,
        passed: worst < tolerance,
        note: None,
    }
}

/// `sum(y * r)` for a fixed random `r`, turning any output into a scalar
/// with O(1) gradients.
pub fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = seed::rng(seed);
    let r = Tensor::from_fn(tape.shape(y), |_| rng.sample(StandardNormal));
    let r = tape.constant(r);
    let prod = tape.mul(y, r)?;
    Ok(tape.sum(prod))
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Uniform in `[-1, 1]` but at least `gap` away from every point in `kinks`.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], span: f64, kinks: &[f64], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| loop {
        let x = rng.gen_range(-span..span);
        if kinks.iter().all(|k| (x - k).abs() > gap) {
            break x;
        }
    })
}

/// Gradient check of every tape primitive, plus one composite graph.
pub fn primitive_suite(tolerance: f64, base_seed: u64) -> GradcheckReport {
    let mut rng = seed::rng(seed::derive(base_seed, "gradcheck"));
    let mut entries = Vec::new();
    let p = base_seed;
    macro_rules! run {
        ($name:expr, [$($inp:expr),*], |$t:ident, $v:ident| $body:expr) => {{
            let inputs = vec![$($inp),*];
            entries.push(check($name, &inputs, tolerance, |$t: &mut Tape<f64>, $v: &[Var]| $body));
        }};
    }

    let s = [2, 3, 4];
    run!("add", [randn(&mut rng, &s, 1.0), randn(&mut rng, &s, 1.0)], |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, p)
    });
    run!("sub", [randn(&mut rng, &s, 1.0), randn(&mut rng, &s, 1.0)], |t, v| {
        let y = t.sub(v[0], v[1])?;
        project(t, y, p)
    });
    run!("mul", [randn(&mut rng, &s, 1.0), randn(&mut rng, &s, 1.0)], |t, v| {
        let y = t.mul(v[0], v[1])?;
        project(t, y, p)
    });
    run!("scale", [randn(&mut rng, &s, 1.0)], |t, v| {
        let y = t.scale(v[0], -1.7);
        project(t, y, p)
    });
    run!("add_broadcast", [randn(&mut rng, &s, 1.0), randn(&mut rng, &[3, 4], 1.0)], |t, v| {
        let y = t.add_broadcast(v[0], v[1])?;
        project(t, y, p)
    });
    run!("reshape", [randn(&mut rng, &s, 1.0)], |t, v| {
        let y = t.reshape(v[0], &[6, 4])?;
        project(t, y, p)
    });
    run!("relu", [away_from(&mut rng, &s, 1.0, &[0.0], 0.01)], |t, v| {
        let y = t.activation(v[0], Activation::Relu);
        project(t, y, p)
    });
    run!("leaky_relu", [away_from(&mut rng, &s, 1.0, &[0.0], 0.01)], |t, v| {
        let y = t.activation(v[0], Activation::LeakyRelu(0.1));
        project(t, y, p)
    });
    run!("gelu", [randn(&mut rng, &s, 1.5)], |t, v| {
        let y = t.activation(v[0], Activation::Gelu);
        project(t, y, p)
    });
    run!("sigmoid", [randn(&mut rng, &s, 2.0)], |t, v| {
        let y = t.activation(v[0], Activation::Sigmoid);
        project(t, y, p)
    });
    run!(
        "dense",
        [randn(&mut rng, &[2, 3, 5], 1.0), randn(&mut rng, &[5, 4], 0.5), randn(&mut rng, &[4], 1.0)],
        |t, v| {
            let y = t.dense(v[0], v[1], Some(v[2]))?;
            project(t, y, p)
        }
    );
    run!(
        "conv3d",
        [
            randn(&mut rng, &[2, 2, 5, 4, 6], 1.0),
            randn(&mut rng, &[3, 2, 3, 3, 3], 0.3),
            randn(&mut rng, &[3], 1.0)
        ],
        |t, v| {
            let y = t.conv3d(v[0], v[1], Some(v[2]), 2, 1)?;
            project(t, y, p)
        }
    );
    run!(
        "conv3d_transpose",
        [
            randn(&mut rng, &[1, 3, 2, 3, 2], 1.0),
            randn(&mut rng, &[3, 2, 4, 4, 4], 0.3),
            randn(&mut rng, &[2], 1.0)
        ],
        |t, v| {
            let y = t.conv3d_transpose(v[0], v[1], Some(v[2]), 2, 1)?;
            project(t, y, p)
        }
    );
    {
        // distinct values spaced far wider than the step keep argmax stable
        let n = 2 * 2 * 4 * 4 * 4;
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let x = Tensor::new(&[2, 2, 4, 4, 4], order.iter().map(|&k| k as f64 * 0.01).collect()).unwrap();
        run!("max_pool3d", [x], |t, v| {
            let y = t.max_pool3d(v[0])?;
            project(t, y, p)
        });
    }
    run!("layer_norm", [randn(&mut rng, &[3, 6], 1.0)], |t, v| {
        let y = t.norm(v[0], NormKind::Layer)?;
        project(t, y, p)
    });
    run!("instance_norm", [randn(&mut rng, &[2, 2, 2, 3, 2], 1.0)], |t, v| {
        let y = t.norm(v[0], NormKind::Instance)?;
        project(t, y, p)
    });
    run!(
        "affine_last",
        [randn(&mut rng, &[3, 4], 1.0), randn(&mut rng, &[4], 1.0), randn(&mut rng, &[4], 1.0)],
        |t, v| {
            let y = t.affine_last(v[0], v[1], v[2])?;
            project(t, y, p)
        }
    );
    {
        let mut mrng = seed::rng(seed::derive(base_seed, "dropout"));
        let mask = super::tape::dropout_mask::<f64, _>(24, 0.5, &mut mrng);
        run!("dropout", [randn(&mut rng, &s, 1.0)], |t, v| {
            let y = t.dropout_with_mask(v[0], mask.clone())?;
            project(t, y, p)
        });
    }
    run!(
        "concat_channels",
        [randn(&mut rng, &[2, 1, 2, 2, 3], 1.0), randn(&mut rng, &[2, 2, 2, 2, 3], 1.0)],
        |t, v| {
            let y = t.concat_channels(v[0], v[1])?;
            project(t, y, p)
        }
    );
    run!("embedding", [randn(&mut rng, &[5, 3], 1.0)], |t, v| {
        let y = t.embedding(v[0], &[4, 0, 4, 2, 1, 0])?;
        project(t, y, p)
    });
    run!("row_slice", [randn(&mut rng, &[5, 3], 1.0)], |t, v| {
        let y = t.row_slice(v[0], 3)?;
        project(t, y, p)
    });
    run!("softmax_channels", [randn(&mut rng, &[2, 3, 2, 2, 1], 1.0)], |t, v| {
        let y = t.softmax_channels(v[0])?;
        project(t, y, p)
    });
    run!("select_channel", [randn(&mut rng, &[2, 3, 2, 2, 1], 1.0)], |t, v| {
        let y = t.select_channel(v[0], 1)?;
        project(t, y, p)
    });
    entries.push(straight_through_entry(&mut rng, tolerance, p));
    let (b, l, d, h) = (2, 5, 8, 2);
    run!(
        "attention_exact",
        [randn(&mut rng, &[b, l, d], 0.7), randn(&mut rng, &[b, l, d], 0.7), randn(&mut rng, &[b, l, d], 1.0)],
        |t, v| {
            let y = t.attention(v[0], v[1], v[2], h, &AttentionMode::Exact)?;
            project(t, y, p)
        }
    );
    {
        let omega = AttentionMode::Favor(draw_features::<f64, _>(&mut rng, 6, d / h, true));
        run!(
            "attention_favor",
            [randn(&mut rng, &[b, l, d], 0.5), randn(&mut rng, &[b, l, d], 0.5), randn(&mut rng, &[b, l, d], 1.0)],
            |t, v| {
                let y = t.attention(v[0], v[1], v[2], h, &omega)?;
                project(t, y, p)
            }
        );
    }
    run!("sum", [randn(&mut rng, &s, 1.0)], |t, v| {
        let sq = t.mul(v[0], v[0])?;
        Ok(t.sum(sq))
    });
    run!("mean", [randn(&mut rng, &s, 1.0)], |t, v| {
        let sq = t.mul(v[0], v[0])?;
        Ok(t.mean(sq))
    });
    {
        let targets: Vec<usize> = (0..2 * 4).map(|_| rng.gen_range(0..3)).collect();
        run!("cross_entropy", [randn(&mut rng, &[2, 3, 2, 2, 1], 1.5)], |t, v| {
            t.cross_entropy(v[0], &targets)
        });
    }
    run!("mse", [randn(&mut rng, &s, 1.0), randn(&mut rng, &s, 1.0)], |t, v| t.mse(v[0], v[1]));
    {
        let target = Tensor::from_fn(&[1, 1, 3, 3, 3], |_| if rng.gen::<bool>() { 1.0 } else { 0.0 });
        let pred = target.map(|x: f64| (x - 0.1 * (2.0 * x - 1.0)).clamp(0.0, 1.0));
        let pred = Tensor::from_fn(pred.shape(), |i| pred.data()[i] + 0.02 * (rng.gen::<f64>() - 0.5));
        run!("dice", [pred, target], |t, v| t.dice(v[0], v[1]));
    }
    run!("hinge_real", [away_from(&mut rng, &s, 2.5, &[1.0], 0.01)], |t, v| Ok(t.hinge_real(v[0])));
    run!("hinge_fake", [away_from(&mut rng, &s, 2.5, &[-1.0], 0.01)], |t, v| Ok(t.hinge_fake(v[0])));
    run!(
        "spectral",
        [randn(&mut rng, &[1, 2, 3, 4, 2], 1.0), randn(&mut rng, &[1, 2, 3, 4, 2], 1.0)],
        |t, v| t.spectral(v[0], v[1])
    );
    entries.push(composite_entry(&mut rng, tolerance, p));
    GradcheckReport { tolerance, entries }
}

/// The straight-through rule is checked against finite differences of the
/// downstream loss with respect to the quantized value itself.
fn straight_through_entry(rng: &mut ChaCha8Rng, tolerance: f64, p: u64) -> GradcheckEntry {
    let name = "straight_through";
    let z = randn(rng, &[4, 3], 1.0);
    let q = z.map(|x| (x * 2.0).round() / 2.0);
    let downstream = |t: &mut Tape<f64>, zq: Var| -> Result<Var> {
        let y = t.activation(zq, Activation::Gelu);
        let y = t.mul(y, zq)?;
        project(t, y, p)
    };
    let mut tape = Tape::new();
    let zv = tape.param(z);
    let analytic = tape
        .straight_through(zv, q.clone())
        .and_then(|st| downstream(&mut tape, st))
        .and_then(|l| tape.backward(l));
    let analytic = match analytic {
        Ok(g) => g.get(zv).unwrap().clone(),
        Err(e) => return failed(name, e.to_string()),
    };
    let eval = |vals: &Tensor<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(vals.clone());
        let l = downstream(&mut t, v)?;
        Ok(t.value(l).item())
    };
    let mut work = q;
    let mut worst: f64 = 0.0;
    for (j, &a) in analytic.data().iter().enumerate() {
        let orig = work.data()[j];
        work.data_mut()[j] = orig + FD_STEP;
        let plus = eval(&work);
        work.data_mut()[j] = orig - FD_STEP;
        let minus = eval(&work);
        work.data_mut()[j] = orig;
        match (plus, minus) {
            (Ok(pl), Ok(mi)) => worst = worst.max(rel_error(a, (pl - mi) / (2.0 * FD_STEP))),
            (Err(e), _) | (_, Err(e)) => return failed(name, e.to_string()),
        }
    }
    GradcheckEntry {
        primitive: name.into(),
        max_rel_error: worst,
        checked: analytic.len(),
        passed: worst < tolerance,
        note: None,
    }
}

fn composite_entry(rng: &mut ChaCha8Rng, tolerance: f64, p: u64) -> GradcheckEntry {
    let inputs = vec![
        randn(rng, &[1, 2, 4, 4, 4], 1.0),
        randn(rng, &[3, 2, 3, 3, 3], 0.3),
        randn(rng, &[3, 3, 3, 3, 3], 0.2),
        randn(rng, &[3, 2, 2, 2, 2], 0.3),
        randn(rng, &[2, 4], 0.5),
    ];
    check("composite", &inputs, tolerance, |t, v| {
        let h = t.conv3d(v[0], v[1], None, 1, 1)?;
        let h = t.norm(h, NormKind::Instance)?;
        let h = t.activation(h, Activation::Gelu);
        let down = t.conv3d(h, v[2], None, 2, 1)?;
        let up = t.conv3d_transpose(down, v[3], None, 2, 0)?;
        let h = t.concat_channels(v[0], up)?;
        let f = t.reshape(h, &[128, 2])?;
        let f = t.dense(f, v[4], None)?;
        let f = t.activation(f, Activation::Sigmoid);
        project(t, f, p)
    })
}

/// A primitive whose backward rule is deliberately wrong (`d/dx x^2`
/// reported as `3x`); the check must flag it.
pub fn corrupted_backward_control(tolerance: f64, base_seed: u64) -> GradcheckEntry {
    let mut rng = seed::rng(seed::derive(base_seed, "negative-control"));
    let x = randn(&mut rng, &[6], 1.0);
    check("corrupted_square", &[x], tolerance, |t, v| {
        let value = t.value(v[0]).map(|a| a * a);
        let y = t.custom(&[v[0]], value, |g, ins| {
            let d = Tensor::from_fn(ins[0].shape(), |i| 3.0 * ins[0].data()[i] * g.data()[i]);
            vec![Some(d)]
        });
        project(t, y, base_seed)
    })
}
