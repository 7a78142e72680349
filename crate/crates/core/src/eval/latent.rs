use crate::error::{Error, Result};
use crate::numerics::DenseArray;

/// Velocity norms below this make a cosine undefined; such pairs are skipped.
pub const MIN_VELOCITY_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Straightness {
    pub value: f64,
    pub pairs: usize,
    pub degenerate: usize,
}

/// Mean cosine between consecutive latent velocities. Each sequence is a
/// `T x d` array.
pub fn straightening(sequences: &[DenseArray]) -> Result<Straightness> {
    let (mut sum, mut pairs, mut degenerate) = (0.0, 0, 0);
    for z in sequences {
        if z.rows() < 3 {
            return Err(Error::invalid(format!("straightening needs T >= 3, got {}", z.rows())));
        }
        let vel: Vec<Vec<f64>> = (0..z.rows() - 1)
            .map(|t| z.row(t + 1).iter().zip(z.row(t)).map(|(a, b)| a - b).collect())
            .collect();
        for w in vel.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na < MIN_VELOCITY_NORM || nb < MIN_VELOCITY_NORM {
                degenerate += 1;
                continue;
            }
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            sum += (dot / (na * nb)).clamp(-1.0, 1.0);
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::DegenerateBatch("every velocity pair is degenerate".into()));
    }
    Ok(Straightness { value: sum / pairs as f64, pairs, degenerate })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStats {
    /// Unbiased per-dimension standard deviation.
    pub std: Vec<f64>,
    pub mean: Vec<f64>,
    pub min_distance: f64,
    pub mean_distance: f64,
    pub max_distance: f64,
}

impl EmbeddingStats {
    pub fn mean_std(&self) -> f64 {
        self.std.iter().sum::<f64>() / self.std.len() as f64
    }
}

/// Collapse diagnostics of an `n x d` embedding matrix.
pub fn embedding_stats(z: &DenseArray) -> Result<EmbeddingStats> {
    let (n, d) = (z.rows(), z.cols());
    if n < 2 {
        return Err(Error::invalid("embedding stats need at least 2 samples"));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(z.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(z.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|s| (s / (n - 1) as f64).sqrt()).collect();

    let (mut lo, mut hi, mut total) = (f64::INFINITY, 0.0f64, 0.0);
    for i in 0..n {
        let a = z.row(i);
        for j in i + 1..n {
            let dist = a.iter().zip(z.row(j)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            lo = lo.min(dist);
            hi = hi.max(dist);
            total += dist;
        }
    }
    Ok(EmbeddingStats {
        std,
        mean,
        min_distance: lo,
        mean_distance: total / (n * (n - 1) / 2) as f64,
        max_distance: hi,
    })
}
