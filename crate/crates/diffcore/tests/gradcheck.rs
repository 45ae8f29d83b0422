//! Finite-difference verification of every catalog operation in 64-bit mode.

use diffcore::{finite_difference_check, Bound, Graph, ParamStore, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi)).unwrap()
}

/// Runs the harness and reduces the loss with a fixed random weighting so that
/// every output coordinate contributes distinctly.
fn check<F>(store: &mut ParamStore<f64>, mut f: F)
where
    F: FnMut(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    let mut weight_rng = ChaCha8Rng::seed_from_u64(99);
    let mut weights: Option<Tensor<f64>> = None;
    let report = finite_difference_check(
        |g, b| {
            let out = f(g, b)?;
            let shape = g.shape(out).to_vec();
            let w = weights
                .get_or_insert_with(|| random(&mut weight_rng, &shape, -1.0, 1.0))
                .clone();
            let w = g.constant(w);
            let prod = g.mul(out, w)?;
            g.sum_all(prod)
        },
        store,
        EPS,
        40,
        7,
    )
    .unwrap();
    assert!(
        report.max_rel_error < TOL,
        "max relative error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

fn store(entries: &[(&str, Tensor<f64>)]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.add(*n, t.clone()).unwrap();
    }
    s
}

#[test]
fn sum_loss_has_zero_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut s = store(&[("x", random(&mut rng, &[5], -2.0, 2.0))]);
    let ids: Vec<_> = s.ids().collect();
    let r = finite_difference_check(|g, b| g.sum_all(b[ids[0]]), &mut s, EPS, 10, 3).unwrap();
    assert!(r.max_rel_error < 1e-9);
}

#[test]
fn elementwise_binary_with_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut s = store(&[
        ("a", random(&mut rng, &[3, 1, 4], -2.0, 2.0)),
        ("b", random(&mut rng, &[2, 4], 0.5, 2.0)),
    ]);
    let (a, b) = (s.id("a").unwrap(), s.id("b").unwrap());
    check(&mut s, |g, p| {
        let x = g.add(p[a], p[b])?;
        let y = g.sub(x, p[b])?;
        let z = g.mul(y, p[b])?;
        let w = g.div(z, p[b])?;
        let v = g.div(p[a], p[b])?;
        let m = g.mul(w, v)?;
        g.add(m, z)
    });
}

#[test]
fn elementwise_unary() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut s = store(&[("x", random(&mut rng, &[12], 0.2, 2.0))]);
    let x = s.id("x").unwrap();
    check(&mut s, |g, p| {
        let e = g.exp(p[x])?;
        let l = g.log(p[x])?;
        let sg = g.sigmoid(p[x])?;
        let c = g.add_scalar(p[x], -1.0)?;
        let r = g.relu(c)?;
        let pw = g.powf(p[x], 1.7)?;
        let cl = g.clamp(p[x], 0.5, 1.5)?;
        let n = g.neg(cl)?;
        let sc = g.scale(pw, 0.3)?;
        let parts = [e, l, sg, r, n, sc];
        let mut acc = parts[0];
        for &q in &parts[1..] {
            acc = g.add(acc, q)?;
        }
        Ok(acc)
    });
}

#[test]
fn matmul_plain_and_batched() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut s = store(&[
        ("a", random(&mut rng, &[2, 3, 4], -1.0, 1.0)),
        ("w", random(&mut rng, &[4, 5], -1.0, 1.0)),
        ("b", random(&mut rng, &[2, 5, 2], -1.0, 1.0)),
    ]);
    let (a, w, b) = (s.id("a").unwrap(), s.id("w").unwrap(), s.id("b").unwrap());
    check(&mut s, |g, p| {
        let x = g.matmul(p[a], p[w])?;
        g.matmul(x, p[b])
    });
}

#[test]
fn softmax_and_log_softmax_over_axes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut s = store(&[("x", random(&mut rng, &[2, 3, 4], -3.0, 3.0))]);
    let x = s.id("x").unwrap();
    check(&mut s, |g, p| {
        let a = g.softmax(p[x], 1)?;
        let b = g.log_softmax(p[x], 2)?;
        g.add(a, b)
    });
}

#[test]
fn layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut s = store(&[
        ("x", random(&mut rng, &[3, 6], -2.0, 2.0)),
        ("gamma", random(&mut rng, &[6], 0.5, 1.5)),
        ("beta", random(&mut rng, &[6], -0.5, 0.5)),
    ]);
    let (x, ga, be) = (
        s.id("x").unwrap(),
        s.id("gamma").unwrap(),
        s.id("beta").unwrap(),
    );
    check(&mut s, |g, p| g.layer_norm(p[x], p[ga], p[be], 1e-5));
}

#[test]
fn conv2d_strides_and_upsample() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut s = store(&[
        ("x", random(&mut rng, &[2, 6, 6, 3], -1.0, 1.0)),
        ("w1", random(&mut rng, &[3, 3, 3, 4], -1.0, 1.0)),
        ("w2", random(&mut rng, &[3, 3, 4, 2], -1.0, 1.0)),
    ]);
    let (x, w1, w2) = (s.id("x").unwrap(), s.id("w1").unwrap(), s.id("w2").unwrap());
    check(&mut s, |g, p| {
        let a = g.conv2d(p[x], p[w1], 2, 1)?;
        let b = g.conv2d(a, p[w2], 1, 1)?;
        g.upsample_nearest(b, 2)
    });
}

#[test]
fn reductions_and_layout() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut s = store(&[
        ("x", random(&mut rng, &[2, 3, 4], -1.0, 1.0)),
        ("t", random(&mut rng, &[5, 4], -1.0, 1.0)),
    ]);
    let (x, tb) = (s.id("x").unwrap(), s.id("t").unwrap());
    check(&mut s, |g, p| {
        let sm = g.sum(p[x], &[1], true)?;
        let mn = g.mean(p[x], &[0, 2], false)?;
        let mn = g.reshape(mn, &[1, 3, 1])?;
        let y = g.add(sm, mn)?;
        let y = g.broadcast_to(y, &[2, 3, 4])?;
        let pm = g.permute(p[x], &[2, 0, 1])?;
        let pm = g.transpose(pm, 0, 2)?;
        let pm = g.permute(pm, &[1, 0, 2])?;
        let z = g.add(y, pm)?;
        let e = g.embedding(p[tb], &[4, 0, 4])?;
        let e = g.reshape(e, &[1, 3, 4])?;
        let c = g.concat(&[z, e], 0)?;
        let sl = g.slice(c, 0, 1, 3)?;
        g.mul(sl, sl)
    });
}

#[test]
fn masked_fill_then_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut s = store(&[("x", random(&mut rng, &[2, 5], -2.0, 2.0))]);
    let x = s.id("x").unwrap();
    let mask = [
        false, true, false, false, true, true, false, false, false, false,
    ];
    check(&mut s, |g, p| {
        let m = g.masked_fill(p[x], &mask, diffcore::MASK_FILL)?;
        g.softmax(m, 1)
    });
}
