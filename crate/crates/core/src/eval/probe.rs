use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Multinomial logistic regression on frozen embeddings, trained by
/// full-batch gradient descent from zero weights. Returns test accuracy.
///
/// Ties between class scores go to the class more frequent in the training
/// set, so an untrained probe predicts the majority class.
pub fn linear_probe(
    train: ArrayView2<f32>,
    train_labels: &[usize],
    test: ArrayView2<f32>,
    test_labels: &[usize],
    epochs: usize,
    lr: f64,
) -> Result<f64> {
    if train.nrows() != train_labels.len() || test.nrows() != test_labels.len() {
        return Err(Error::shape("embedding and label counts differ"));
    }
    if test.nrows() == 0 {
        return Err(Error::config("linear probe needs a nonempty test set"));
    }
    if train.ncols() != test.ncols() {
        return Err(Error::shape("train and test embeddings differ in width"));
    }
    let classes = train_labels.iter().chain(test_labels).max().map_or(0, |&m| m + 1);
    let mut prior = vec![0usize; classes];
    for &l in train_labels {
        prior[l] += 1;
    }
    if prior.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::config("linear probe needs at least two classes in the training set"));
    }
    let x = train.mapv(|v| v as f64);
    let n = x.nrows() as f64;
    let mut onehot = Array2::<f64>::zeros((x.nrows(), classes));
    for (i, &l) in train_labels.iter().enumerate() {
        onehot[[i, l]] = 1.0;
    }
    let mut w = Array2::<f64>::zeros((x.ncols(), classes));
    let mut b = Array1::<f64>::zeros(classes);
    for _ in 0..epochs {
        let mut p = x.dot(&w) + &b;
        for mut row in p.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row /= s;
        }
        let g = (p - &onehot) / n;
        w.scaled_add(-lr, &x.t().dot(&g));
        b.scaled_add(-lr, &g.sum_axis(Axis(0)));
    }
    let scores = test.mapv(|v| v as f64).dot(&w) + &b;
    let hits = scores
        .outer_iter()
        .zip(test_labels)
        .filter(|(row, &l)| {
            let mut best = 0;
            for c in 1..classes {
                if row[c] > row[best] || (row[c] == row[best] && prior[c] > prior[best]) {
                    best = c;
                }
            }
            best == l
        })
        .count();
    Ok(hits as f64 / test_labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::seq::SliceRandom;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    #[test]
    fn separable_two_class_problem() {
        let train = Array2::from_shape_fn((20, 2), |(i, j)| if j == 0 { if i < 10 { 1.0 } else { -1.0 } } else { (i % 5) as f32 * 0.1 });
        let labels: Vec<usize> = (0..20).map(|i| usize::from(i >= 10)).collect();
        let acc = linear_probe(train.view(), &labels, train.view(), &labels, 200, 1.0).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn untrained_probe_predicts_majority_class() {
        let train = Array2::from_shape_fn((6, 2), |(i, j)| (i + j) as f32);
        let acc = linear_probe(train.view(), &[0, 2, 2, 2, 1, 1], train.view(), &[2, 2, 0, 1, 1, 1], 0, 0.5).unwrap();
        assert!((acc - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn single_class_rejected() {
        let x = Array2::<f32>::ones((3, 2));
        assert!(linear_probe(x.view(), &[1, 1, 1], x.view(), &[1, 1, 1], 5, 0.1).is_err());
    }

    #[test]
    fn shuffled_labels_are_at_chance() {
        let mut accs = Vec::new();
        for seed in 0..5 {
            let mut rng = seeded(seed);
            let n = 1000;
            let x = Array2::from_shape_fn((n, 8), |_| rng.sample::<f32, _>(StandardNormal));
            let mut labels: Vec<usize> = (0..n).map(|i| i % 5).collect();
            labels.shuffle(&mut rng);
            let (tr, te) = (x.slice(ndarray::s![..800, ..]), x.slice(ndarray::s![800.., ..]));
            accs.push(linear_probe(tr, &labels[..800], te, &labels[800..], 100, 0.5).unwrap());
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.2).abs() <= 0.05, "{accs:?}");
    }
}
