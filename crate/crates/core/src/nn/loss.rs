use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

/// Row-wise log-softmax.
pub fn log_softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    log_softmax(logits).mapv(f64::exp)
}

/// Per-sample cross-entropy `-log p(y_i | x_i)`.
pub fn per_sample_cross_entropy(logits: ArrayView2<f64>, labels: &[usize]) -> Array1<f64> {
    let logp = log_softmax(logits);
    Array1::from_iter(labels.iter().enumerate().map(|(i, &y)| -logp[[i, y]]))
}

/// Mean cross-entropy and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: ArrayView2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = labels.len() as f64;
    let logp = log_softmax(logits);
    let mut loss = 0.0;
    let mut grad = logp.mapv(f64::exp);
    for (i, &y) in labels.iter().enumerate() {
        loss -= logp[[i, y]];
        grad[[i, y]] -= 1.0;
    }
    grad.mapv_inplace(|g| g / n);
    (loss / n, grad)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predictions(logits: ArrayView2<f64>) -> Vec<usize> {
    logits.axis_iter(Axis(0)).map(argmax).collect()
}
