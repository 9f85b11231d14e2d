//! Plain-vector forms of the losses, used for reporting and as references for
//! the graph versions.

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tokenizer::PAD;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch { expected: a.len(), got: b.len() });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine of a zero-norm vector"));
    }
    Ok(dot(a, b) / (na * nb))
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `z = softmax(w·Hᵀ)·H` over rows of `h`.
pub fn attention_pool(h: &[Vec<f64>], w: &[f64]) -> Result<Vec<f64>> {
    if h.is_empty() {
        return Err(Error::invalid("attention_pool over zero frames"));
    }
    let d = w.len();
    if let Some(r) = h.iter().find(|r| r.len() != d) {
        return Err(Error::DimMismatch { expected: d, got: r.len() });
    }
    let a = softmax(&h.iter().map(|r| dot(w, r)).collect::<Vec<_>>());
    let mut z = vec![0.0; d];
    for (ai, r) in a.iter().zip(h) {
        for (zj, rj) in z.iter_mut().zip(r) {
            *zj += ai * rj;
        }
    }
    Ok(z)
}

/// Contrastive loss of `z` against one positive and a set of negatives.
pub fn infonce(z: &[f64], pos: &[f64], negatives: &[Vec<f64>], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::validation("tau", "must be positive"));
    }
    if negatives.is_empty() {
        return Err(Error::invalid("infonce needs at least one negative"));
    }
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(cosine(z, pos)? / tau);
    for n in negatives {
        logits.push(cosine(z, n)? / tau);
    }
    // ln(sum_i e^(l_i - l_0)) with the largest term factored out, so a
    // dominant positive keeps full relative precision.
    let (top, &m) = logits.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).expect("non-empty");
    let rest: f64 = logits.iter().enumerate().filter(|&(i, _)| i != top).map(|(_, v)| (v - m).exp()).sum();
    Ok(m - logits[0] + rest.ln_1p())
}

/// Mean token NLL; `PAD` targets are skipped.
pub fn nll_loss(logits: &[Vec<f64>], targets: &[u32]) -> Result<f64> {
    if logits.len() != targets.len() {
        return Err(Error::DimMismatch { expected: logits.len(), got: targets.len() });
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (row, &t) in logits.iter().zip(targets) {
        if t == PAD {
            continue;
        }
        let t = t as usize;
        if t >= row.len() {
            return Err(Error::validation("target", format!("id {t} outside vocabulary of {}", row.len())));
        }
        total += log_sum_exp(row) - row[t];
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("every target position is PAD"));
    }
    Ok(total / n as f64)
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::DimMismatch { expected: a.len(), got: b.len() });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Graph NLL over `T x V` logits with PAD targets masked out.
pub fn nll_graph(g: &mut Graph, logits: Var, targets: &[u32]) -> Result<Var> {
    let [t, v] = g.shape(logits);
    if t != targets.len() {
        return Err(Error::DimMismatch { expected: t, got: targets.len() });
    }
    if let Some(&bad) = targets.iter().find(|&&x| x as usize >= v) {
        return Err(Error::validation("target", format!("id {bad} outside vocabulary of {v}")));
    }
    let masked: Vec<Option<usize>> = targets.iter().map(|&x| (x != PAD).then_some(x as usize)).collect();
    if masked.iter().all(Option::is_none) {
        return Err(Error::invalid("every target position is PAD"));
    }
    Ok(g.cross_entropy(logits, &masked))
}

/// Batched InfoNCE: anchor row `i` has key row `i` as its positive and every
/// other key row as a negative. Rows are normalized inside the graph.
pub fn infonce_graph(g: &mut Graph, anchors: Var, keys: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::validation("tau", "must be positive"));
    }
    let [b, d] = g.shape(anchors);
    let [n, dk] = g.shape(keys);
    if d != dk {
        return Err(Error::DimMismatch { expected: d, got: dk });
    }
    if n < 2 || n < b {
        return Err(Error::invalid("infonce needs at least one negative per anchor"));
    }
    for v in [anchors, keys] {
        let t = g.value(v);
        if (0..t.rows()).any(|r| norm(t.row(r)) == 0.0) {
            return Err(Error::invalid("infonce over a zero-norm embedding"));
        }
    }
    let a = g.normalize_rows(anchors);
    let k = g.normalize_rows(keys);
    let s = g.matmul_t(a, k);
    let s = g.scale(s, 1.0 / tau);
    let targets: Vec<Option<usize>> = (0..b).map(Some).collect();
    Ok(g.cross_entropy(s, &targets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mode, ParamStore, Tensor};
    use crate::rng;
    use rand_distr::{Distribution, StandardNormal};

    fn unit(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn infonce_orthogonal_negatives() {
        let z = unit(64, 0);
        let negs: Vec<Vec<f64>> = (1..64).map(|i| unit(64, i)).collect();
        let got = infonce(&z, &z, &negs, 0.05).unwrap();
        let want = (63.0 * (-20f64).exp()).ln_1p();
        assert!((got - want).abs() < 1e-12 * want, "{got} vs {want}");
        assert!((got - 1.30e-7).abs() < 0.01e-7);
    }

    #[test]
    fn infonce_symmetric_case_is_ln2() {
        let z = unit(3, 0);
        let got = infonce(&z, &unit(3, 1), &[unit(3, 2)], 0.05).unwrap();
        assert!((got - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn infonce_rejects_degenerate_inputs() {
        let z = unit(3, 0);
        assert!(infonce(&z, &z, &[], 0.05).is_err());
        assert!(infonce(&z, &z, &[unit(3, 1)], 0.0).is_err());
        assert!(infonce(&z, &[0.0; 3], &[unit(3, 1)], 0.05).is_err());
    }

    #[test]
    fn infonce_scale_invariant() {
        let mut r = rng::rng(3, "t", 0);
        let mut v = || (0..8).map(|_| StandardNormal.sample(&mut r)).collect::<Vec<f64>>();
        let (z, p, n1, n2) = (v(), v(), v(), v());
        let base = infonce(&z, &p, &[n1.clone(), n2.clone()], 0.05).unwrap();
        // Powers of two rescale exactly, so the cosines are bit-identical.
        let s = |x: &[f64], c: f64| x.iter().map(|y| y * c).collect::<Vec<_>>();
        let scaled = infonce(&s(&z, 4.0), &s(&p, 0.5), &[s(&n1, 8.0), n2], 0.05).unwrap();
        assert_eq!(base, scaled);
    }

    /// With τ = 1 the similarities of random unit vectors in d = 64 have
    /// variance 1/64, so the loss concentrates near ln(K + 1).
    #[test]
    fn infonce_random_vectors_near_log_k() {
        let mut r = rng::rng(11, "mc", 0);
        let mut v = || (0..64).map(|_| StandardNormal.sample(&mut r)).collect::<Vec<f64>>();
        let trials = 1000;
        let mut total = 0.0;
        for _ in 0..trials {
            let z = v();
            let p = v();
            let negs: Vec<Vec<f64>> = (0..127).map(|_| v()).collect();
            let l = infonce(&z, &p, &negs, 1.0).unwrap();
            assert!(l >= 0.0);
            total += l;
        }
        let mean = total / trials as f64;
        let want = 128f64.ln();
        assert!((mean - want).abs() < 0.1 * want, "{mean} vs {want}");
    }

    #[test]
    fn nll_examples() {
        let v = 11;
        let logits = vec![vec![0.0; v]; 3];
        let l = nll_loss(&logits, &[5, 6, 2]).unwrap();
        assert!((l - (v as f64).ln()).abs() < 1e-12);

        // At a logit gap of 20 the loss is ln(1 + (V-1)e^-20): below 1e-8 only
        // for V <= 5, about 2e-7 at V = 100.
        for v in [2usize, 5, 7, 100] {
            let mut row = vec![0.0; v];
            row[1] = 20.0;
            let l = nll_loss(&[row], &[1]).unwrap();
            let want = ((v as f64 - 1.0) * (-20f64).exp()).ln_1p();
            assert!((l - want).abs() < 1e-6 * want, "{l} vs {want}");
            assert_eq!(l < 1e-8, v <= 5);
            let mut row = vec![0.0; v];
            row[1] = 40.0;
            assert!(nll_loss(&[row], &[1]).unwrap() < 1e-8);
        }
        assert!(nll_loss(&[vec![0.0; 4]], &[PAD]).is_err());
        assert!(nll_loss(&[vec![0.0; 4]], &[1, 2]).is_err());
    }

    #[test]
    fn nll_pad_positions_do_not_count() {
        let a = vec![vec![1.0, 2.0, 0.5, -1.0], vec![9.0, -3.0, 0.0, 4.0]];
        let with_pad = nll_loss(&a, &[2, PAD]).unwrap();
        let alone = nll_loss(&a[..1], &[2]).unwrap();
        assert_eq!(with_pad, alone);
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn pool_examples() {
        let h = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let z = attention_pool(&h, &[10.0, 0.0]).unwrap();
        let w0 = 1.0 / (1.0 + (-10f64).exp());
        assert!((z[0] - w0).abs() < 1e-15 && (z[1] - (1.0 - w0)).abs() < 1e-15);
        assert!((z[0] - 0.99995).abs() < 1e-5 && (z[1] - 0.00005).abs() < 1e-5);

        let h3 = vec![vec![1.0, 2.0], vec![3.0, -1.0], vec![-2.0, 5.0]];
        let z = attention_pool(&h3, &[0.0, 0.0]).unwrap();
        assert!((z[0] - 2.0 / 3.0).abs() < 1e-15 && (z[1] - 2.0).abs() < 1e-15);

        let z = attention_pool(&h3[..1], &[3.0, -7.0]).unwrap();
        assert_eq!(z, h3[0]);
        assert!(attention_pool(&[], &[1.0]).is_err());
    }

    #[test]
    fn graph_losses_match_reference() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store, Mode::Eval);
        let rows = vec![vec![0.3, -1.2, 2.0, 0.1], vec![1.5, 0.0, -0.4, 0.9], vec![0.2, 0.2, 0.2, 0.2]];
        let x = g.input(Tensor::from_rows(&rows).unwrap());
        let l = nll_graph(&mut g, x, &[2, PAD, 3]).unwrap();
        let want = nll_loss(&rows, &[2, PAD, 3]).unwrap();
        assert!((g.value(l).item() - want).abs() < 1e-14);

        let anchors = vec![vec![1.0, 0.2, -0.3], vec![0.1, 0.9, 0.4]];
        let keys = vec![vec![0.8, 0.1, 0.0], vec![-0.2, 1.0, 0.3], vec![0.5, -0.5, 1.0]];
        let a = g.input(Tensor::from_rows(&anchors).unwrap());
        let k = g.input(Tensor::from_rows(&keys).unwrap());
        let l = infonce_graph(&mut g, a, k, 0.05).unwrap();
        let mut want = 0.0;
        for i in 0..2 {
            let negs: Vec<Vec<f64>> = keys.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, r)| r.clone()).collect();
            want += infonce(&anchors[i], &keys[i], &negs, 0.05).unwrap();
        }
        assert!((g.value(l).item() - want / 2.0).abs() < 1e-12);
    }
}
