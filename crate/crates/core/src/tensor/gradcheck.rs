use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

/// Compares analytic gradients against central finite differences at
/// `sample_count` uniformly drawn scalar parameters (all of them if the
/// store is smaller) and returns the maximum relative error
/// `|a - fd| / max(|a|, |fd|, 1e-12)`.
///
/// `objective` returns the loss and the per-entry gradients of the store it
/// is given. `batch_id` only labels error messages.
pub fn grad_check<F>(
    objective: F,
    store: &ParamStore<f64>,
    batch_id: &str,
    eps: f64,
    sample_count: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&ParamStore<f64>) -> Result<(f64, Vec<Vec<f64>>)>,
{
    if !(eps > 0.0) {
        return Err(Error::Precondition("finite-difference eps must be positive".into()));
    }
    let (loss, analytic) = objective(store)?;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss {loss} at the unperturbed point of batch {batch_id}"
        )));
    }
    let total = store.num_params();
    let picks: Vec<usize> = if sample_count >= total {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = sample(&mut rng, total, sample_count).into_vec();
        v.sort_unstable();
        v
    };

    let mut worst = 0.0f64;
    let mut probe = store.clone();
    for flat in picks {
        let (ei, j) = locate(store, flat);
        let name = store.entries()[ei].name.clone();
        let original = store.entries()[ei].values[j];
        let mut eval = |delta: f64| -> Result<f64> {
            probe.entries_mut()[ei].values[j] = original + delta;
            let (l, _) = objective(&probe)?;
            probe.entries_mut()[ei].values[j] = original;
            if l.is_finite() {
                Ok(l)
            } else {
                Err(Error::Numerical(format!(
                    "non-finite loss when perturbing `{name}`[{j}] on batch {batch_id}"
                )))
            }
        };
        let fd = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
        let a = analytic[ei][j];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn locate(store: &ParamStore<f64>, flat: usize) -> (usize, usize) {
    let ei = store
        .entries()
        .partition_point(|e| e.offset() + e.len() <= flat);
    (ei, flat - store.entries()[ei].offset())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(w: f64) -> ParamStore<f64> {
        ParamStore::from_tensors(vec![("w".to_string(), vec![1], vec![w])]).unwrap()
    }

    #[test]
    fn quadratic_is_exact() {
        let err = grad_check(
            |s| {
                let w = s.entries()[0].values[0];
                Ok((w * w, vec![vec![2.0 * w]]))
            },
            &scalar(3.0),
            "q",
            1e-4,
            10,
            0,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let err = grad_check(|_| Ok((4.2, vec![vec![0.0]])), &scalar(1.0), "c", 1e-4, 1, 0).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let err = grad_check(
            |s| {
                let w = s.entries()[0].values[0];
                Ok((w * w, vec![vec![w]]))
            },
            &scalar(3.0),
            "bad",
            1e-4,
            1,
            0,
        )
        .unwrap();
        assert!(err > 0.4);
    }

    #[test]
    fn non_finite_loss_names_the_parameter() {
        let res = grad_check(
            |s| {
                let w = s.entries()[0].values[0];
                Ok((if w > 1.0 { f64::NAN } else { w }, vec![vec![1.0]]))
            },
            &scalar(1.0),
            "batch-7",
            1e-3,
            1,
            0,
        );
        match res {
            Err(Error::Numerical(msg)) => assert!(msg.contains("`w`") && msg.contains("batch-7")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn locate_maps_flat_indices() {
        let s = ParamStore::<f64>::from_tensors(vec![
            ("a".to_string(), vec![2], vec![0.0; 2]),
            ("b".to_string(), vec![3], vec![0.0; 3]),
        ])
        .unwrap();
        assert_eq!(locate(&s, 0), (0, 0));
        assert_eq!(locate(&s, 1), (0, 1));
        assert_eq!(locate(&s, 2), (1, 0));
        assert_eq!(locate(&s, 4), (1, 2));
    }
}
