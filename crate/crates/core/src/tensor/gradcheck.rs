//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates forward passes, so it does not
//! share code with the backward sweep it checks.

use super::tape::Tape;
use super::{Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest relative error over all checked elements.
    pub max_rel_error: f64,
    /// Parameter index and element index where the maximum occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compares `backward` against central differences with step `h` for every
/// element of every tensor in `params`.
///
/// `build` records a scalar loss on the tape from the bound parameters.
pub fn check<F>(params: &[Tensor<f64>], h: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|v| grads.get(*v).expect("leaf gradient").clone())
        .collect();

    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.constant(p.clone())).collect();
        let l = build(&mut t, &vs)?;
        Ok(t.value(l).item())
    };

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for pi in 0..params.len() {
        for ei in 0..params[pi].len() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + h;
            let up = eval(&work)?;
            work[pi].data_mut()[ei] = orig - h;
            let down = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * h);
            let e = rel_error(analytic[pi].data()[ei], numeric);
            if e > out.max_rel_error {
                out.max_rel_error = e;
                out.worst = (pi, ei);
            }
            out.checked += 1;
        }
    }
    Ok(out)
}

fn random(rng: &mut crate::seed::Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    use rand::Rng;
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Values in `±[0.05, 1)`, kept clear of the ReLU kink.
fn away_from_zero(rng: &mut crate::seed::Rng, shape: &[usize]) -> Tensor<f64> {
    use rand::Rng;
    let mut t = random(rng, shape, 0.05, 1.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn one_hot(rng: &mut crate::seed::Rng, batch: usize, classes: usize) -> Tensor<f64> {
    use rand::Rng;
    let mut y = Tensor::zeros(&[batch, classes]);
    for b in 0..batch {
        let c = rng.random_range(0..classes);
        y.data_mut()[b * classes + c] = 1.0;
    }
    y
}

/// Projects a non-scalar output onto a fixed random direction so it can be
/// differentiated as a scalar.
fn project(tape: &mut Tape<f64>, y: Var, dir: &Tensor<f64>) -> Result<Var> {
    let d = tape.constant(dir.clone());
    let p = tape.mul(y, d)?;
    tape.sum(p)
}

/// Gradient checks for every layer kind and a composite encoder-decoder
/// with a classification head, all in f64 with step `h`.
pub fn layer_suite(seed: u64, h: f64) -> Result<Vec<(String, GradCheck)>> {
    use super::network::{Bound, HeadSpec, Network, NetworkSpec};
    use super::tape::Restoration;

    let mut rng = crate::seed::derived_rng(seed, "gradcheck", 0);
    let mut out = Vec::new();

    for (label, xshape, wshape, stride, pad) in [
        ("conv2d 3x3 stride 1", vec![2, 2, 5, 5], vec![3, 2, 3, 3], 1, 1),
        ("conv2d 3x3 stride 2", vec![2, 2, 6, 6], vec![3, 2, 3, 3], 2, 1),
        ("conv2d 1x1", vec![2, 3, 4, 4], vec![2, 3, 1, 1], 1, 0),
        ("conv3d 3x3x3 stride 2", vec![1, 2, 4, 4, 4], vec![2, 2, 3, 3, 3], 2, 1),
    ] {
        let x = random(&mut rng, &xshape, -1.0, 1.0);
        let w = random(&mut rng, &wshape, -0.5, 0.5);
        let b = random(&mut rng, &[wshape[0]], -0.5, 0.5);
        let probe = {
            let mut t = Tape::new();
            let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
            let y = t.conv(xv, wv, bv, stride, pad)?;
            t.value(y).shape().to_vec()
        };
        let dir = random(&mut rng, &probe, -1.0, 1.0);
        let r = check(&[x, w, b], h, |t, v| {
            let y = t.conv(v[0], v[1], v[2], stride, pad)?;
            project(t, y, &dir)
        })?;
        out.push((label.to_string(), r));
    }

    for (label, shape, out_shape) in [
        ("upsample 2d", vec![2, 2, 3, 3], vec![2, 2, 6, 6]),
        ("upsample 3d", vec![1, 2, 2, 2, 2], vec![1, 2, 4, 4, 4]),
    ] {
        let x = random(&mut rng, &shape, -1.0, 1.0);
        let dir = random(&mut rng, &out_shape, -1.0, 1.0);
        let r = check(&[x], h, |t, v| {
            let y = t.upsample(v[0], 2)?;
            project(t, y, &dir)
        })?;
        out.push((label.to_string(), r));
    }

    let a = random(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
    let b = random(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
    let dir = random(&mut rng, &[2, 5, 3, 3], -1.0, 1.0);
    out.push((
        "concat".to_string(),
        check(&[a, b], h, |t, v| {
            let y = t.concat(v[0], v[1])?;
            project(t, y, &dir)
        })?,
    ));

    let x = away_from_zero(&mut rng, &[3, 4, 2, 2]);
    let dir = random(&mut rng, &[3, 4, 2, 2], -1.0, 1.0);
    out.push((
        "relu".to_string(),
        check(std::slice::from_ref(&x), h, |t, v| {
            let y = t.relu(v[0])?;
            project(t, y, &dir)
        })?,
    ));
    out.push((
        "sigmoid".to_string(),
        check(&[x.map(|v| 3.0 * v)], h, |t, v| {
            let y = t.sigmoid(v[0])?;
            project(t, y, &dir)
        })?,
    ));

    let x = random(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
    let dir = random(&mut rng, &[2, 3], -1.0, 1.0);
    out.push((
        "global average pool".to_string(),
        check(std::slice::from_ref(&x), h, |t, v| {
            let y = t.global_avg_pool(v[0])?;
            project(t, y, &dir)
        })?,
    ));
    let dir = random(&mut rng, &[2, 48], -1.0, 1.0);
    out.push((
        "flatten".to_string(),
        check(&[x], h, |t, v| {
            let y = t.flatten(v[0])?;
            project(t, y, &dir)
        })?,
    ));

    let x = random(&mut rng, &[3, 5], -1.0, 1.0);
    let w = random(&mut rng, &[4, 5], -0.5, 0.5);
    let b = random(&mut rng, &[4], -0.5, 0.5);
    let dir = random(&mut rng, &[3, 4], -1.0, 1.0);
    out.push((
        "dense".to_string(),
        check(&[x, w, b], h, |t, v| {
            let y = t.dense(v[0], v[1], v[2])?;
            project(t, y, &dir)
        })?,
    ));

    let logits = random(&mut rng, &[4, 3], -2.0, 2.0);
    let dir = random(&mut rng, &[4, 3], -1.0, 1.0);
    out.push((
        "softmax".to_string(),
        check(std::slice::from_ref(&logits), h, |t, v| {
            let y = t.softmax(v[0])?;
            project(t, y, &dir)
        })?,
    ));
    let y = one_hot(&mut rng, 4, 3);
    out.push((
        "softmax + cross-entropy".to_string(),
        check(&[logits], h, |t, v| {
            let p = t.softmax(v[0])?;
            t.cross_entropy(p, y.clone())
        })?,
    ));

    let pred = random(&mut rng, &[3, 1, 4, 4], 0.0, 1.0);
    let target = random(&mut rng, &[3, 1, 4, 4], 0.0, 1.0);
    for (label, mode) in [
        ("restoration L2 norm", Restoration::L2Norm),
        ("restoration squared L2", Restoration::SquaredL2),
    ] {
        out.push((
            label.to_string(),
            check(&[pred.clone(), target.clone()], h, |t, v| {
                t.restoration_loss(v[0], v[1], mode)
            })?,
        ));
    }
    out.push((
        "mse".to_string(),
        check(&[pred.clone(), target.clone()], h, |t, v| t.mse(v[0], v[1]))?,
    ));
    let labels = target.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
    let probs = random(&mut rng, &[3, 1, 4, 4], 0.05, 0.95);
    out.push((
        "binary cross-entropy".to_string(),
        check(&[probs], h, |t, v| t.binary_cross_entropy(v[0], labels.clone()))?,
    ));

    let s1 = random(&mut rng, &[1], 0.0, 2.0).reshape(vec![])?;
    let s2 = random(&mut rng, &[1], 0.0, 2.0).reshape(vec![])?;
    out.push((
        "weighted sum".to_string(),
        check(&[s1, s2], h, |t, v| t.weighted_sum(&[(v[0], 0.01), (v[1], 1.0)]))?,
    ));

    let spec = NetworkSpec {
        convs_per_stage: 1,
        input_extent: vec![8, 8],
        in_channels: 1,
        widths: vec![2, 4, 8],
        decoder: true,
        skips: true,
        out_channels: 1,
        heads: vec![
            HeadSpec {
                name: "vw".to_string(),
                hidden: 8,
                classes: 3,
                flatten: false,
            },
            HeadSpec {
                name: "target".to_string(),
                hidden: 0,
                classes: 2,
                flatten: true,
            },
        ],
    };
    let net = Network::<f64>::new(spec, seed)?;
    let names: Vec<String> = net.params().keys().cloned().collect();
    let params: Vec<Tensor<f64>> = net
        .params()
        .iter()
        .map(|(n, t)| {
            if n.ends_with(".bias") {
                away_from_zero(&mut rng, t.shape()).map(|v| 0.2 * v)
            } else {
                t.clone()
            }
        })
        .collect();
    let x = random(&mut rng, &[2, 1, 8, 8], 0.0, 1.0);
    let target = random(&mut rng, &[2, 1, 8, 8], 0.0, 1.0);
    let y = one_hot(&mut rng, 2, 3);
    let y2 = one_hot(&mut rng, 2, 2);
    let r = check(&params, h, |t, v| {
        let bound = Bound::from_vars(names.iter().cloned().zip(v.iter().copied()));
        let xv = t.constant(x.clone());
        let tv = t.constant(target.clone());
        let o = net.forward(t, &bound, xv, true, &["vw", "target"])?;
        let rec = t.restoration_loss(o.restoration.expect("decoder"), tv, Restoration::L2Norm)?;
        let cls = t.cross_entropy(o.head_probs["vw"], y.clone())?;
        let tgt = t.cross_entropy(o.head_probs["target"], y2.clone())?;
        t.weighted_sum(&[(cls, 0.01), (rec, 1.0), (tgt, 0.5)])
    })?;
    out.push((format!("composite network ({} parameters)", net.param_count()), r));
    Ok(out)
}
