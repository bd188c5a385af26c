//! Temperature scaling, nucleus truncation and draws from the result.

use rand::Rng;

use super::{DecodeParams, ModelError};

const MASS_TOLERANCE: f64 = 1e-9;

fn check_distribution(dist: &[f64]) -> Result<(), ModelError> {
    if dist.is_empty() {
        return Err(ModelError::NotADistribution("empty vector".into()));
    }
    if let Some(bad) = dist.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(ModelError::NotADistribution(format!("entry {bad}")));
    }
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > MASS_TOLERANCE {
        return Err(ModelError::NotADistribution(format!("mass {total}")));
    }
    Ok(())
}

/// Rescale a distribution to `p_i^(1/T)` and renormalize. Zero entries stay zero.
pub fn apply_temperature(dist: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 1.0 {
        return dist.to_vec();
    }
    let logits: Vec<f64> = dist.iter().map(|&p| if p > 0.0 { p.ln() / temperature } else { f64::NEG_INFINITY }).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { (l - max).exp() }).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Keep the smallest probability-descending prefix whose mass reaches
/// `top_p` (ties by lower index first), zero the rest, renormalize.
pub fn nucleus_filter(dist: &[f64], top_p: f64) -> Result<Vec<f64>, ModelError> {
    check_distribution(dist)?;
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(ModelError::InvalidDecode(format!("top_p {top_p} must be in (0, 1]")));
    }
    if top_p >= 1.0 {
        return Ok(dist.to_vec());
    }
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    let mut kept = vec![0.0; dist.len()];
    let mut mass = 0.0;
    for &i in &order {
        kept[i] = dist[i];
        mass += dist[i];
        if mass >= top_p {
            break;
        }
    }
    Ok(kept.into_iter().map(|p| p / mass).collect())
}

/// Draw an index proportionally to `weights` (need not be normalized).
pub fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Lowest index among the maxima.
pub fn argmax(dist: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > dist[best] {
            best = i;
        }
    }
    best
}

/// Pick the next token from a model distribution: temperature, then nucleus,
/// then a draw. Greedy parameters bypass both and take the argmax.
pub fn choose_next<R: Rng + ?Sized>(dist: &[f64], params: &DecodeParams, rng: &mut R) -> Result<usize, ModelError> {
    if params.greedy {
        return Ok(argmax(dist));
    }
    let scaled = apply_temperature(dist, params.temperature);
    let kept = nucleus_filter(&scaled, params.top_p)?;
    Ok(sample_index(&kept, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_for;

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn nucleus_keeps_minimal_prefix() {
        let out = nucleus_filter(&[0.5, 0.3, 0.15, 0.05], 0.9).unwrap();
        close(&out, &[0.5 / 0.95, 0.3 / 0.95, 0.15 / 0.95, 0.0], 1e-12);
        close(&out[..3], &[0.5263157894736842, 0.3157894736842105, 0.15789473684210525], 1e-12);
    }

    #[test]
    fn nucleus_identity_at_one() {
        let d = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(nucleus_filter(&d, 1.0).unwrap(), d.to_vec());
    }

    #[test]
    fn nucleus_tie_break_prefers_lower_index() {
        assert_eq!(nucleus_filter(&[0.5, 0.5], 0.5).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn nucleus_rejects_non_distributions() {
        assert!(nucleus_filter(&[0.5, 0.6], 0.9).is_err());
        assert!(nucleus_filter(&[f64::NAN, 1.0], 0.9).is_err());
        assert!(nucleus_filter(&[-0.5, 1.5], 0.9).is_err());
        assert!(nucleus_filter(&[], 0.9).is_err());
        assert!(nucleus_filter(&[1.0], 0.0).is_err());
    }

    #[test]
    fn temperature_sharpens_and_preserves_zeros() {
        let t = apply_temperature(&[0.6, 0.4, 0.0], 0.5);
        close(&t, &[0.36 / 0.52, 0.16 / 0.52, 0.0], 1e-12);
        assert_eq!(apply_temperature(&[0.6, 0.4], 1.0), vec![0.6, 0.4]);
    }

    #[test]
    fn greedy_takes_argmax() {
        let p = DecodeParams::greedy(4);
        let mut rng = rng_for(1);
        assert_eq!(choose_next(&[0.2, 0.4, 0.4], &p, &mut rng).unwrap(), 1);
    }

    #[test]
    fn sampling_is_deterministic_per_stream() {
        let d = [0.1, 0.2, 0.3, 0.4];
        let p = DecodeParams::default();
        let draw = |s| {
            let mut rng = rng_for(s);
            (0..50).map(|_| choose_next(&d, &p, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }
}
