use crate::error::{Error, Result};
use crate::numcore::{sq_dist, Matrix};

use super::LossOutput;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

pub type TripletSet = Vec<Triplet>;

fn pairwise_sq(emb: &Matrix) -> Vec<f64> {
    let n = emb.rows();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = sq_dist(emb.row(i), emb.row(j));
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Semi-hard negative mining over squared Euclidean distances.
///
/// For every ordered same-class `(anchor, positive)` pair the negative with
/// the smallest `d(a,n)` inside `d(a,p) < d(a,n) < d(a,p) + margin` is taken;
/// failing that, the closest negative with `d(a,n) > d(a,p)`; failing that,
/// the pair is dropped. Ties go to the lowest index.
pub fn mine_semi_hard(emb: &Matrix, labels: &[usize], margin: f64) -> Result<TripletSet> {
    let n = emb.rows();
    if labels.len() != n {
        return Err(Error::shape("mine_semi_hard (labels)", n, labels.len()));
    }
    let dist = pairwise_sq(emb);
    let mut out = Vec::new();
    let mut any_pair = false;
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            any_pair = true;
            let d_ap = dist[a * n + p];
            let mut band: Option<(f64, usize)> = None;
            let mut beyond: Option<(f64, usize)> = None;
            for (neg, &label) in labels.iter().enumerate() {
                if label == labels[a] {
                    continue;
                }
                let d_an = dist[a * n + neg];
                if d_an <= d_ap {
                    continue;
                }
                if beyond.is_none_or(|(best, _)| d_an < best) {
                    beyond = Some((d_an, neg));
                }
                if d_an < d_ap + margin && band.is_none_or(|(best, _)| d_an < best) {
                    band = Some((d_an, neg));
                }
            }
            if let Some((_, negative)) = band.or(beyond) {
                out.push(Triplet {
                    anchor: a,
                    positive: p,
                    negative,
                });
            }
        }
    }
    if !any_pair {
        return Err(Error::InvalidArgument(
            "batch has no anchor-positive pair for triplet mining".into(),
        ));
    }
    Ok(out)
}

/// Mean of `[margin − (d⁻ − d⁺)]₊` over the triplets.
///
/// An empty set yields zero loss and gradient with `empty` set.
pub fn triplet_hinge(emb: &Matrix, triplets: &[Triplet], margin: f64) -> Result<LossOutput> {
    let n = emb.rows();
    let mut grad = Matrix::zeros(n, emb.cols());
    if triplets.is_empty() {
        return Ok(LossOutput {
            loss: 0.0,
            grad_emb: grad,
            empty: true,
        });
    }
    let scale = 1.0 / triplets.len() as f64;
    let mut loss = 0.0;
    for t in triplets {
        if t.anchor.max(t.positive).max(t.negative) >= n {
            return Err(Error::InvalidArgument(format!("triplet {t:?} out of range for {n} rows")));
        }
        let (a, p, neg) = (emb.row(t.anchor), emb.row(t.positive), emb.row(t.negative));
        let d_pos = sq_dist(a, p);
        let d_neg = sq_dist(a, neg);
        let hinge = margin - (d_neg - d_pos);
        if hinge <= 0.0 {
            continue;
        }
        loss += hinge;
        // ∂d⁺/∂a = 2(a−p), ∂d⁻/∂a = 2(a−n)
        let coeff: Vec<(f64, f64)> = (0..emb.cols())
            .map(|k| (2.0 * (a[k] - p[k]) * scale, 2.0 * (a[k] - neg[k]) * scale))
            .collect();
        for (k, &(gp, gn)) in coeff.iter().enumerate() {
            grad[(t.anchor, k)] += gp - gn;
            grad[(t.positive, k)] -= gp;
            grad[(t.negative, k)] += gn;
        }
    }
    Ok(LossOutput {
        loss: loss * scale,
        grad_emb: grad,
        empty: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(points: &[f64]) -> Matrix {
        Matrix::from_vec(points.len(), 1, points.to_vec()).unwrap()
    }

    #[test]
    fn satisfied_margin_is_zero() {
        // d⁺ = 0.2, d⁻ = 0.5
        let emb = line(&[0.0, 0.2f64.sqrt(), -(0.5f64.sqrt())]);
        let t = [Triplet { anchor: 0, positive: 1, negative: 2 }];
        let out = triplet_hinge(&emb, &t, 0.1).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_emb.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn violated_margin_value() {
        // d⁺ = 0.3, d⁻ = 0.2 → 0.1 − (0.2 − 0.3) = 0.2
        let emb = line(&[0.0, 0.3f64.sqrt(), -(0.2f64.sqrt())]);
        let t = [Triplet { anchor: 0, positive: 1, negative: 2 }];
        let out = triplet_hinge(&emb, &t, 0.1).unwrap();
        assert!((out.loss - 0.2).abs() < 1e-12);
    }

    #[test]
    fn empty_set_is_flagged() {
        let out = triplet_hinge(&line(&[0.0, 1.0]), &[], 0.1).unwrap();
        assert!(out.empty);
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn band_negative_preferred() {
        // anchor 0, positive at d⁺ = 1; negatives at d⁺ + m/2 and d⁺ + 2m
        let m = 0.2;
        let emb = line(&[0.0, 1.0, (1.0f64 + 2.0 * m).sqrt(), -(1.0f64 + m / 2.0).sqrt()]);
        let labels = [0, 0, 1, 1];
        let set = mine_semi_hard(&emb, &labels, m).unwrap();
        let t = set.iter().find(|t| t.anchor == 0 && t.positive == 1).unwrap();
        assert_eq!(t.negative, 3);
    }

    #[test]
    fn fallback_to_nearest_farther_negative() {
        // both negatives beyond the band; nearest of them wins
        let emb = line(&[0.0, 0.1, 3.0, -2.0]);
        let set = mine_semi_hard(&emb, &[0, 0, 1, 1], 0.1).unwrap();
        let t = set.iter().find(|t| t.anchor == 0 && t.positive == 1).unwrap();
        assert_eq!(t.negative, 3);
    }

    #[test]
    fn pair_omitted_when_all_negatives_closer() {
        let emb = line(&[0.0, 5.0, 0.5, -0.5]);
        let set = mine_semi_hard(&emb, &[0, 0, 1, 1], 0.1).unwrap();
        assert!(!set.iter().any(|t| t.anchor == 0 && t.positive == 1));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let emb = line(&[0.0, 0.5, 0.6, -0.6]);
        let set = mine_semi_hard(&emb, &[0, 0, 1, 1], 1.0).unwrap();
        let t = set.iter().find(|t| t.anchor == 0 && t.positive == 1).unwrap();
        assert_eq!(t.negative, 2);
    }

    #[test]
    fn no_pairs_is_an_error() {
        assert!(mine_semi_hard(&line(&[0.0, 1.0, 2.0]), &[0, 1, 2], 0.1).is_err());
    }
}
