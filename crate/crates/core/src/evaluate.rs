//! Evaluation metrics: cumulative/dynamic AUC, coefficient-recovery ROC,
//! Kaplan–Meier, log-rank, group splits and feature co-occurrence MI.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::inference::TrainedModel;

fn cmp_f64(a: &f64, b: &f64) -> std::cmp::Ordering {
    a.partial_cmp(b).expect("finite values")
}

fn check_finite(name: &str, xs: &[f64]) -> Result<()> {
    match xs.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("{name}[{i}] = {}", xs[i]))),
        None => Ok(()),
    }
}

/// Cumulative/dynamic AUC at `t`: among pairs with T_i ≤ t < T_j, the fraction
/// with HR_j ≤ HR_i. With `tie_half`, equal HRs score ½ instead of 1.
/// Returns None when either group is empty.
pub fn dynamic_auc(times: &[f64], hr: &[f64], t: f64, tie_half: bool) -> Option<f64> {
    assert_eq!(times.len(), hr.len(), "times and hazard ratios must align");
    let mut controls: Vec<f64> = times.iter().zip(hr).filter(|(&ti, _)| ti > t).map(|(_, &h)| h).collect();
    let n_cases = times.iter().filter(|&&ti| ti <= t).count();
    if controls.is_empty() || n_cases == 0 {
        return None;
    }
    controls.sort_by(cmp_f64);
    // twice the numerator keeps half-credit ties in integers
    let mut twice: u64 = 0;
    for (_, &h) in times.iter().zip(hr).filter(|(&ti, _)| ti <= t) {
        let le = controls.partition_point(|&c| c <= h) as u64;
        if tie_half {
            let lt = controls.partition_point(|&c| c < h) as u64;
            twice += lt + le;
        } else {
            twice += 2 * le;
        }
    }
    Some(twice as f64 / (2 * n_cases as u64 * controls.len() as u64) as f64)
}

/// O(P²) reference for [`dynamic_auc`].
pub fn dynamic_auc_brute_force(times: &[f64], hr: &[f64], t: f64, tie_half: bool) -> Option<f64> {
    let (mut twice, mut cases, mut controls) = (0u64, 0u64, 0u64);
    for i in 0..times.len() {
        if times[i] <= t {
            cases += 1;
        } else {
            controls += 1;
        }
    }
    if cases == 0 || controls == 0 {
        return None;
    }
    for i in 0..times.len() {
        for j in 0..times.len() {
            if times[j] > t && times[i] <= t {
                if hr[j] < hr[i] || (hr[j] == hr[i] && !tie_half) {
                    twice += 2;
                } else if hr[j] == hr[i] {
                    twice += 1;
                }
            }
        }
    }
    Some(twice as f64 / (2 * cases * controls) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicAucCurve {
    pub times: Vec<f64>,
    pub auc_at_t: Vec<Option<f64>>,
    pub mean_auc: f64,
}

impl DynamicAucCurve {
    pub fn n_defined(&self) -> usize {
        self.auc_at_t.iter().flatten().count()
    }
}

pub fn dynamic_auc_curve(times: &[f64], hr: &[f64], grid: &[f64], tie_half: bool) -> Result<DynamicAucCurve> {
    if times.len() != hr.len() {
        return Err(Error::Data(format!("{} times but {} hazard ratios", times.len(), hr.len())));
    }
    if times.len() < 2 {
        return Err(Error::Data("dynamic AUC needs at least two patients".into()));
    }
    check_finite("times", times)?;
    check_finite("hazard ratios", hr)?;
    check_finite("grid", grid)?;
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("time grid must be strictly increasing".into()));
    }
    let auc_at_t: Vec<Option<f64>> = grid.par_iter().map(|&t| dynamic_auc(times, hr, t, tie_half)).collect();
    let defined: Vec<f64> = auc_at_t.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Degenerate("degenerate grid: no time point has both cases and controls".into()));
    }
    Ok(DynamicAucCurve {
        times: grid.to_vec(),
        mean_auc: defined.iter().sum::<f64>() / defined.len() as f64,
        auc_at_t,
    })
}

/// start, start + step, … up to and including `stop` (within rounding).
pub fn time_grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(stop >= start) {
        return Err(Error::Config("grid needs step > 0 and stop ≥ start".into()));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|i| start + i as f64 * step).collect())
}

/// `n` interior quantiles i/(n+1) of `times` (linear interpolation), deduplicated.
pub fn quantile_grid(times: &[f64], n: usize) -> Vec<f64> {
    let mut sorted = times.to_vec();
    sorted.sort_by(cmp_f64);
    let mut grid: Vec<f64> = (1..=n).map(|i| quantile_sorted(&sorted, i as f64 / (n + 1) as f64)).collect();
    grid.dedup();
    grid
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// (false positive rate, true positive rate), from (0,0) to (1,1).
    pub points: Vec<(f64, f64)>,
    pub area: f64,
}

/// ROC of coefficient scores against the true support, sweeping the threshold
/// over |w| (or w when `signed`). Tied scores enter together.
pub fn coefficient_roc(w_est: &[f64], support: &[bool], signed: bool) -> Result<RocCurve> {
    if w_est.len() != support.len() {
        return Err(Error::Data(format!("{} coefficients but {} support flags", w_est.len(), support.len())));
    }
    check_finite("coefficients", w_est)?;
    let n_pos = support.iter().filter(|&&s| s).count();
    let n_neg = support.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Degenerate("support needs at least one positive and one negative".into()));
    }
    let mut scored: Vec<(f64, bool)> = w_est
        .iter()
        .zip(support)
        .map(|(&w, &s)| (if signed { w } else { w.abs() }, s))
        .collect();
    scored.sort_by(|a, b| cmp_f64(&b.0, &a.0));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let s = scored[i].0;
        while i < scored.len() && scored[i].0 == s {
            if scored[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    let area = points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum();
    Ok(RocCurve { points, area })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    /// Distinct observed times, ascending.
    pub times: Vec<f64>,
    /// S(t) just after each time.
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
}

impl KmCurve {
    /// Right-continuous step value at `t`.
    pub fn at(&self, t: f64) -> f64 {
        match self.times.partition_point(|&x| x <= t) {
            0 => 1.0,
            i => self.survival[i - 1],
        }
    }
}

/// Distinct times with (at risk, events, total leaving) at each.
fn risk_table(times: &[f64], events: &[bool]) -> Vec<(f64, usize, usize, usize)> {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| cmp_f64(&times[a], &times[b]));
    let mut out = Vec::new();
    let mut at_risk = times.len();
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let (mut d, mut leaving) = (0, 0);
        while i < order.len() && times[order[i]] == t {
            d += events[order[i]] as usize;
            leaving += 1;
            i += 1;
        }
        out.push((t, at_risk, d, leaving));
        at_risk -= leaving;
    }
    out
}

pub fn kaplan_meier(times: &[f64], events: &[bool]) -> Result<KmCurve> {
    if times.is_empty() {
        return Err(Error::Data("Kaplan–Meier needs at least one observation".into()));
    }
    if times.len() != events.len() {
        return Err(Error::Data("times and event flags must align".into()));
    }
    check_finite("times", times)?;
    let mut s = 1.0;
    let mut curve = KmCurve {
        times: Vec::new(),
        survival: Vec::new(),
        at_risk: Vec::new(),
        events: Vec::new(),
    };
    for (t, n, d, _) in risk_table(times, events) {
        s *= 1.0 - d as f64 / n as f64;
        curve.times.push(t);
        curve.survival.push(s);
        curve.at_risk.push(n);
        curve.events.push(d);
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRankResult {
    pub chi_square: f64,
    pub df: u32,
    pub p_value: f64,
    /// Alternative: group A has the higher hazard.
    pub p_value_one_sided: f64,
    pub observed_a: f64,
    pub expected_a: f64,
    pub variance: f64,
}

pub fn log_rank_test(times_a: &[f64], events_a: &[bool], times_b: &[f64], events_b: &[bool]) -> Result<LogRankResult> {
    if times_a.is_empty() || times_b.is_empty() {
        return Err(Error::Data("log-rank test needs two nonempty groups".into()));
    }
    if times_a.len() != events_a.len() || times_b.len() != events_b.len() {
        return Err(Error::Data("times and event flags must align".into()));
    }
    check_finite("times", times_a)?;
    check_finite("times", times_b)?;
    let times: Vec<f64> = times_a.iter().chain(times_b).copied().collect();
    let events: Vec<bool> = events_a.iter().chain(events_b).copied().collect();
    let in_a: Vec<bool> = (0..times.len()).map(|i| i < times_a.len()).collect();
    if !events.iter().any(|&e| e) {
        return Err(Error::NoEvents);
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&x, &y| cmp_f64(&times[x], &times[y]));
    let (mut n, mut n_a) = (times.len() as f64, times_a.len() as f64);
    let (mut observed, mut expected, mut variance) = (0.0, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let (mut d, mut d_a, mut out, mut out_a) = (0.0, 0.0, 0.0, 0.0);
        while i < order.len() && times[order[i]] == t {
            let j = order[i];
            if events[j] {
                d += 1.0;
                d_a += in_a[j] as u8 as f64;
            }
            out += 1.0;
            out_a += in_a[j] as u8 as f64;
            i += 1;
        }
        if d > 0.0 {
            observed += d_a;
            expected += d * n_a / n;
            if n > 1.0 {
                variance += n_a * (n - n_a) * d * (n - d) / (n * n * (n - 1.0));
            }
        }
        n -= out;
        n_a -= out_a;
    }
    if !(variance > 0.0) {
        return Err(Error::Degenerate("log-rank variance is zero".into()));
    }
    let diff = observed - expected;
    let chi_square = diff * diff / variance;
    let chi = ChiSquared::new(1.0).expect("one degree of freedom");
    let normal = Normal::standard();
    Ok(LogRankResult {
        chi_square,
        df: 1,
        p_value: chi.sf(chi_square).clamp(0.0, 1.0),
        p_value_one_sided: normal.sf(diff / variance.sqrt()).clamp(0.0, 1.0),
        observed_a: observed,
        expected_a: expected,
        variance,
    })
}

/// Splits patients at the `quantile` of θ_·k (linear interpolation): θ_jk at or
/// above the threshold goes to the high group. Returns (high, low) indices.
pub fn group_split_by_topic(theta: &[Vec<f64>], k: usize, quantile: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if theta.is_empty() {
        return Err(Error::Data("no patients to split".into()));
    }
    if !(0.0..=1.0).contains(&quantile) {
        return Err(Error::Config("quantile must lie in [0, 1]".into()));
    }
    let col: Vec<f64> = theta
        .iter()
        .map(|row| row.get(k).copied().ok_or_else(|| Error::Data(format!("topic {k} out of range"))))
        .collect::<Result<_>>()?;
    check_finite("theta", &col)?;
    if col.iter().all(|&x| x == col[0]) {
        return Err(Error::Degenerate(format!("no split: topic {k} is constant across patients")));
    }
    let mut sorted = col.clone();
    sorted.sort_by(cmp_f64);
    let thr = quantile_sorted(&sorted, quantile);
    Ok((0..col.len()).partition(|&j| col[j] >= thr))
}

/// Plug-in mutual information (nats) of two binary indicators.
pub fn binary_mutual_information(x: &[bool], y: &[bool]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mut table = [[0.0f64; 2]; 2];
    for (&a, &b) in x.iter().zip(y) {
        table[a as usize][b as usize] += 1.0;
    }
    let px = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
    let py = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
    let mut mi = 0.0;
    for a in 0..2 {
        for b in 0..2 {
            let c = table[a][b];
            if c > 0.0 {
                mi += c / n * (c * n / (px[a] * py[b])).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Pairwise MI between presence indicators of `features` (indices into
/// modality `m`) across patients. Diagonal entries are None.
pub fn mutual_information(corpus: &Corpus, m: usize, features: &[usize]) -> Result<Vec<Vec<Option<f64>>>> {
    if m >= corpus.n_modalities() {
        return Err(Error::Data(format!("modality {m} out of range")));
    }
    let v = corpus.vocabulary(m).size();
    if let Some(&f) = features.iter().find(|&&f| f >= v) {
        return Err(Error::Data(format!("feature index {f} out of range for modality {m}")));
    }
    let presence: Vec<Vec<bool>> = features
        .iter()
        .map(|&f| {
            corpus
                .patients()
                .iter()
                .map(|p| p.tokens(m).iter().any(|t| t.feature == f && t.count > 0))
                .collect()
        })
        .collect();
    Ok((0..features.len())
        .map(|a| {
            (0..features.len())
                .map(|b| (a != b).then(|| binary_mutual_information(&presence[a], &presence[b])))
                .collect()
        })
        .collect())
}

/// Top `n` features of topic `k` in modality `m` by φ, ties by feature id.
pub fn top_features(model: &TrainedModel, k: usize, m: usize, n: usize) -> Result<Vec<(String, f64)>> {
    if m >= model.n_modalities() || k >= model.k() {
        return Err(Error::Data(format!("topic {k} / modality {m} out of range")));
    }
    let vocab = &model.vocabularies[m];
    let mut ranked: Vec<(String, f64)> = model
        .phi_row(m, k)
        .iter()
        .enumerate()
        .map(|(v, &p)| (vocab.feature_id(v).to_string(), p))
        .collect();
    ranked.sort_by(|a, b| cmp_f64(&b.1, &a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(n);
    Ok(ranked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn auc_perfect_concordance() {
        assert_eq!(dynamic_auc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0], 1.5, false), Some(1.0));
    }

    #[test]
    fn auc_all_ties_scores_one_or_half() {
        let t = [1.0, 2.0, 3.0, 4.0];
        let hr = [2.0; 4];
        assert_eq!(dynamic_auc(&t, &hr, 2.5, false), Some(1.0));
        assert_eq!(dynamic_auc(&t, &hr, 2.5, true), Some(0.5));
    }

    #[test]
    fn auc_undefined_when_group_empty() {
        assert_eq!(dynamic_auc(&[1.0, 2.0], &[1.0, 2.0], 0.5, false), None);
        assert_eq!(dynamic_auc(&[1.0, 2.0], &[1.0, 2.0], 2.0, false), None);
    }

    #[test]
    fn auc_fast_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let p = rng.random_range(2..40);
            // small integer ranges force ties in both times and HRs
            let times: Vec<f64> = (0..p).map(|_| rng.random_range(0..10) as f64).collect();
            let hr: Vec<f64> = (0..p).map(|_| rng.random_range(0..6) as f64 * 0.5).collect();
            let t = rng.random_range(0..10) as f64 + 0.5;
            for tie_half in [false, true] {
                assert_eq!(dynamic_auc(&times, &hr, t, tie_half), dynamic_auc_brute_force(&times, &hr, t, tie_half));
            }
        }
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_transform(
            times in prop::collection::vec(0.0f64..10.0, 2..30),
            seed in 0u64..1000,
            t in 0.0f64..10.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let hr: Vec<f64> = times.iter().map(|_| rng.random_range(0..8) as f64).collect();
            let mapped: Vec<f64> = hr.iter().map(|h| (0.3 * h).exp() * 5.0 + 1.0).collect();
            prop_assert_eq!(dynamic_auc(&times, &hr, t, false), dynamic_auc(&times, &mapped, t, false));
            prop_assert_eq!(dynamic_auc(&times, &hr, t, true), dynamic_auc(&times, &mapped, t, true));
        }

        #[test]
        fn km_without_censoring_is_empirical_survival(times in prop::collection::vec(0u32..20, 1..40)) {
            let t: Vec<f64> = times.iter().map(|&x| x as f64).collect();
            let km = kaplan_meier(&t, &vec![true; t.len()]).unwrap();
            for probe in 0..21 {
                let s = probe as f64;
                let emp = t.iter().filter(|&&x| x > s).count() as f64 / t.len() as f64;
                prop_assert!((km.at(s) - emp).abs() < 1e-12);
            }
            prop_assert!(km.survival.windows(2).all(|w| w[1] <= w[0]));
        }

        #[test]
        fn log_rank_invariant_to_time_scale(
            a in prop::collection::vec((1u32..30, any::<bool>()), 1..15),
            b in prop::collection::vec((1u32..30, any::<bool>()), 1..15),
            scale in 0.01f64..100.0,
        ) {
            let ta: Vec<f64> = a.iter().map(|x| x.0 as f64).collect();
            let tb: Vec<f64> = b.iter().map(|x| x.0 as f64).collect();
            let ea: Vec<bool> = a.iter().map(|x| x.1).collect();
            let eb: Vec<bool> = b.iter().map(|x| x.1).collect();
            let base = log_rank_test(&ta, &ea, &tb, &eb);
            let sa: Vec<f64> = ta.iter().map(|x| x * scale).collect();
            let sb: Vec<f64> = tb.iter().map(|x| x * scale).collect();
            let scaled = log_rank_test(&sa, &ea, &sb, &eb);
            match (base, scaled) {
                (Ok(x), Ok(y)) => prop_assert_eq!(x.chi_square, y.chi_square),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "scaling changed solvability"),
            }
        }
    }

    #[test]
    fn curve_grids() {
        assert_eq!(time_grid(20.0, 755.0, 20.0).unwrap().len(), 37);
        assert_eq!(time_grid(20.0, 1400.0, 20.0).unwrap().len(), 70);
        let curve = dynamic_auc_curve(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0], &[0.5, 1.5, 5.0], false).unwrap();
        assert_eq!(curve.n_defined(), 1);
        assert_eq!(curve.mean_auc, 1.0);
        assert!(matches!(
            dynamic_auc_curve(&[1.0, 2.0], &[1.0, 2.0], &[5.0, 6.0], false),
            Err(Error::Degenerate(_))
        ));
        assert!(dynamic_auc_curve(&[1.0, 2.0], &[1.0, 2.0], &[2.0, 1.0], false).is_err());
    }

    #[test]
    fn roc_perfect_negated_and_degenerate() {
        let support = [true, false, true, false, false];
        let perfect: Vec<f64> = support.iter().map(|&s| if s { 6.0 } else { 0.0 }).collect();
        assert_eq!(coefficient_roc(&perfect, &support, false).unwrap().area, 1.0);
        let neg: Vec<f64> = perfect.iter().map(|x| -x).collect();
        assert_eq!(coefficient_roc(&neg, &support, false).unwrap().area, 1.0);
        assert_eq!(coefficient_roc(&neg, &support, true).unwrap().area, 0.0);
        assert!(coefficient_roc(&[1.0, 2.0], &[true, true], false).is_err());
        // all scores tied: a single diagonal step
        assert_eq!(coefficient_roc(&[0.0; 5], &support, false).unwrap().area, 0.5);
    }

    #[test]
    fn roc_of_permuted_scores_averages_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = 50;
        let support: Vec<bool> = (0..k).map(|i| i < 10).collect();
        let base: Vec<f64> = (0..k).map(|i| if i < 10 { 6.0 + i as f64 } else { i as f64 * 0.01 }).collect();
        let n = 10_000;
        let mut total = 0.0;
        for _ in 0..n {
            let mut s = base.clone();
            for i in (1..k).rev() {
                s.swap(i, rng.random_range(0..=i));
            }
            total += coefficient_roc(&s, &support, false).unwrap().area;
        }
        assert!((total / n as f64 - 0.5).abs() < 0.02);
    }

    #[test]
    fn km_hand_cases() {
        let km = kaplan_meier(&[1.0, 2.0, 3.0], &[true; 3]).unwrap();
        let expect = [2.0 / 3.0, 1.0 / 3.0, 0.0];
        for (s, e) in km.survival.iter().zip(expect) {
            assert!((s - e).abs() < 1e-15);
        }
        let all_censored = kaplan_meier(&[1.0, 2.0], &[false, false]).unwrap();
        assert!(all_censored.survival.iter().all(|&s| s == 1.0));
        let km = kaplan_meier(&[1.0, 2.0], &[false, true]).unwrap();
        assert_eq!(km.at(1.5), 1.0);
        assert_eq!(km.at(2.0), 0.0);
        assert_eq!(km.at_risk, vec![2, 1]);
    }

    #[test]
    fn log_rank_identical_groups() {
        let t = [1.0, 3.0, 4.0, 7.0];
        let e = [true, false, true, true];
        let r = log_rank_test(&t, &e, &t, &e).unwrap();
        assert!(r.chi_square.abs() < 1e-15);
        assert!((r.p_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_rank_hand_computation() {
        // A = {1,2,3}, B = {4,5,6}, all events.
        // t=1: n=6, nA=3 -> E=1/2, V=3·3·1·5/(36·5)=1/4
        // t=2: n=5, nA=2 -> E=2/5, V=2·3·1·4/(25·4)=6/25
        // t=3: n=4, nA=1 -> E=1/4, V=1·3·1·3/(16·3)=3/16
        // O−E = 3 − 23/20 = 37/20, V = 271/400, χ² = (37/20)²/(271/400) = 1369/271
        let r = log_rank_test(&[1.0, 2.0, 3.0], &[true; 3], &[4.0, 5.0, 6.0], &[true; 3]).unwrap();
        assert!((r.observed_a - 3.0).abs() < 1e-15);
        assert!((r.expected_a - 1.15).abs() < 1e-14);
        assert!((r.variance - 271.0 / 400.0).abs() < 1e-14);
        assert!((r.chi_square - 1369.0 / 271.0).abs() < 1e-12);
        assert!(r.p_value_one_sided < r.p_value);
        let swapped = log_rank_test(&[4.0, 5.0, 6.0], &[true; 3], &[1.0, 2.0, 3.0], &[true; 3]).unwrap();
        assert!((swapped.chi_square - r.chi_square).abs() < 1e-12);
        assert!(log_rank_test(&[1.0], &[false], &[2.0], &[false]).is_err());
    }

    #[test]
    fn split_counts_and_permutation() {
        let theta: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 * 0.1, 1.0 - i as f64 * 0.1]).collect();
        let (hi, lo) = group_split_by_topic(&theta, 0, 0.70).unwrap();
        assert_eq!(hi, vec![7, 8, 9]);
        assert_eq!(lo.len(), 7);
        let (hi, lo) = group_split_by_topic(&theta, 0, 0.0).unwrap();
        assert_eq!((hi.len(), lo.len()), (10, 0));
        let perm = [3, 9, 0, 5, 1, 8, 2, 7, 6, 4];
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| theta[i].clone()).collect();
        let (phi, _) = group_split_by_topic(&permuted, 0, 0.70).unwrap();
        let mapped: Vec<usize> = {
            let mut v: Vec<usize> = phi.iter().map(|&j| perm[j]).collect();
            v.sort();
            v
        };
        assert_eq!(mapped, vec![7, 8, 9]);
        assert!(group_split_by_topic(&vec![vec![0.5]; 4], 0, 0.7).is_err());
    }

    #[test]
    fn mi_identities_and_contingency_oracle() {
        let x = [true, true, false, false, false, true, false, false];
        let h = {
            let p = 3.0 / 8.0f64;
            -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
        };
        assert!((binary_mutual_information(&x, &x) - h).abs() < 1e-14);
        // product table: x uniform, y uniform, independent cells of 1
        let a = [true, true, false, false];
        let b = [true, false, true, false];
        assert_eq!(binary_mutual_information(&a, &b), 0.0);
        assert_eq!(binary_mutual_information(&[true; 5], &[true, false, true, false, true]), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x: Vec<bool> = (0..20).map(|_| rng.random_bool(0.4)).collect();
            let y: Vec<bool> = (0..20).map(|_| rng.random_bool(0.6)).collect();
            // direct plug-in over the 2×2 table written out cell by cell
            let n = 20.0;
            let mut oracle = 0.0;
            for (va, vb) in [(false, false), (false, true), (true, false), (true, true)] {
                let nab = x.iter().zip(&y).filter(|(p, q)| **p == va && **q == vb).count() as f64;
                let na = x.iter().filter(|p| **p == va).count() as f64;
                let nb = y.iter().filter(|q| **q == vb).count() as f64;
                if nab > 0.0 {
                    oracle += (nab / n) * ((nab / n) / ((na / n) * (nb / n))).ln();
                }
            }
            assert!((binary_mutual_information(&x, &y) - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn mi_matrix_masks_diagonal() {
        use crate::corpus::{PatientRecord, Vocabulary};
        let vocab = Vocabulary::new(0, "dx", vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let patients = vec![
            PatientRecord::new("p1", vec![vec![(0, 2), (1, 1)]]),
            PatientRecord::new("p2", vec![vec![(0, 1)]]),
            PatientRecord::new("p3", vec![vec![(2, 1)]]),
        ];
        let corpus = Corpus::new(vec![vocab], patients).unwrap();
        let mi = mutual_information(&corpus, 0, &[0, 1, 2]).unwrap();
        assert!(mi.iter().enumerate().all(|(i, row)| row[i].is_none()));
        assert_eq!(mi[0][1], mi[1][0]);
        assert!(mutual_information(&corpus, 0, &[7]).is_err());
    }
    #[test]
    fn top_features_ranking() {
        use crate::corpus::Vocabulary;
        use crate::inference::{Hyperparams, TrainConfig, TrainDiagnostics};
        use crate::prior::PriorModel;
        let ids = vec!["d".to_string(), "b".into(), "c".into(), "a".into()];
        let model = TrainedModel {
            config: TrainConfig { k: 2, ..Default::default() },
            hyper: Hyperparams {
                alpha: vec![1.0; 2],
                beta: vec![vec![1.0; 4]],
                a_alpha: 1.0,
                b_alpha: 1.0,
                a_beta: 1.0,
                b_beta: 1.0,
            },
            phi: vec![vec![0.0, 0.0, 1.0, 0.0, 0.25, 0.25, 0.25, 0.25]],
            survival: None,
            prior_model: PriorModel::Uniform,
            guide: None,
            vocabularies: vec![Vocabulary::new(0, "dx", ids).unwrap()],
            diagnostics: TrainDiagnostics::default(),
        };
        assert_eq!(top_features(&model, 0, 0, 1).unwrap(), vec![("c".to_string(), 1.0)]);
        let names: Vec<String> = top_features(&model, 1, 0, 10).unwrap().into_iter().map(|x| x.0).collect();
        assert_eq!(names, vec!["a", "b", "c", "d"]);
        assert!(top_features(&model, 1, 0, 0).unwrap().is_empty());
    }
}
