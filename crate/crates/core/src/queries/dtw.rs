/// Dynamic time warping cost with local cost `|a_i - b_j|` and no band.
///
/// Aligning against an empty sequence costs the sum of the other one.
pub fn dtw(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return a.iter().chain(b).map(|x| x.abs()).sum();
    }
    // Rolling rows over the shorter sequence.
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let mut prev = vec![f64::INFINITY; short.len() + 1];
    let mut cur = vec![f64::INFINITY; short.len() + 1];
    prev[0] = 0.0;
    for &x in long {
        cur[0] = f64::INFINITY;
        for (j, &y) in short.iter().enumerate() {
            let best = prev[j].min(prev[j + 1]).min(cur[j]);
            cur[j + 1] = (x - y).abs() + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[short.len()]
}
