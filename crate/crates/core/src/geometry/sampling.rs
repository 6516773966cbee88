use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use thiserror::Error;

/// Weights at or below this are treated as zero foreground probability.
pub const MIN_FOREGROUND_WEIGHT: f64 = 1e-6;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum SampleError {
    /// No point survived the foreground draw.
    #[error("foreground is empty")]
    ForegroundEmpty,
    #[error("sample count must be at least 1")]
    ZeroCount,
}

/// Two-step soft-mask sampler.
///
/// 1. Each index `i` is kept as foreground with probability `weights[i]`.
/// 2. `count` indices are drawn from the kept set proportionally to their
///    weights: without replacement when the kept set has at least `count`
///    members, with replacement otherwise.
///
/// The returned indices are in draw order.
pub fn weighted_sample<R: Rng + ?Sized>(
    weights: &[f64],
    count: usize,
    rng: &mut R,
) -> Result<Vec<usize>, SampleError> {
    if count == 0 {
        return Err(SampleError::ZeroCount);
    }
    if weights.iter().all(|&w| !(w > MIN_FOREGROUND_WEIGHT)) {
        return Err(SampleError::ForegroundEmpty);
    }

    // One uniform per index, drawn unconditionally so the stream position
    // does not depend on the weight values.
    let kept: Vec<usize> = weights
        .iter()
        .enumerate()
        .filter_map(|(i, &w)| {
            let u: f64 = rng.random();
            (w > MIN_FOREGROUND_WEIGHT && u < w).then_some(i)
        })
        .collect();
    if kept.is_empty() {
        return Err(SampleError::ForegroundEmpty);
    }

    if kept.len() >= count {
        // Efraimidis–Spirakis: key ln(u)/w, keep the `count` largest.
        let mut keyed: Vec<(f64, usize)> = kept
            .iter()
            .map(|&i| {
                let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                (u.ln() / weights[i], i)
            })
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if keyed.len() > count {
            keyed.select_nth_unstable_by(count - 1, cmp);
            keyed.truncate(count);
        }
        keyed.sort_by(cmp);
        Ok(keyed.into_iter().map(|(_, i)| i).collect())
    } else {
        let dist = WeightedIndex::new(kept.iter().map(|&i| weights[i]))
            .map_err(|_| SampleError::ForegroundEmpty)?;
        Ok((0..count).map(|_| kept[dist.sample(rng)]).collect())
    }
}
