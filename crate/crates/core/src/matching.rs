//! Soft matching with exact binomial false-positive control.
//!
//! For an unwatermarked image every extracted bit agrees with a registered bit
//! with probability 1/2, so the match count `M` is `Binomial(k, 1/2)`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::message::{BitMessage, MessageRecord};

/// Which binomial tail a threshold `n` refers to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tail {
    /// `P(M >= n)`: consistent with the decision rule `M >= n`.
    #[default]
    Inclusive,
    /// `P(M > n)`.
    Strict,
}

pub fn match_count(a: &BitMessage, b: &BitMessage) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "message lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let pa = a.packed();
    let pb = b.packed();
    let diff: u32 = pa.iter().zip(&pb).map(|(x, y)| (x ^ y).count_ones()).sum();
    Ok(a.len() - diff as usize)
}

fn ln_choose(k: usize, i: usize) -> f64 {
    ln_factorial(k) - ln_factorial(i) - ln_factorial(k - i)
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|v| (v as f64).ln()).sum()
}

/// `P(M >= lo)` for `M ~ Binomial(k, 1/2)`.
fn upper_tail(lo: usize, k: usize) -> f64 {
    if lo > k {
        return 0.0;
    }
    if k <= 64 {
        // exact: C(k, i) fits in u64 for k <= 64, and the sum fits in u128
        let mut c: u128 = 1;
        let mut sum: u128 = 0;
        for i in 0..=k {
            if i >= lo {
                sum += c;
            }
            c = c * (k - i) as u128 / (i + 1) as u128;
        }
        return sum as f64 / 2f64.powi(k as i32);
    }
    let terms: Vec<f64> = (lo..=k)
        .map(|i| ln_choose(k, i) - k as f64 * std::f64::consts::LN_2)
        .collect();
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()).exp()
}

fn check_n(n: usize, k: usize) -> Result<()> {
    if k == 0 || n > k {
        return Err(Error::invalid(format!("threshold {n} out of range 0..={k}")));
    }
    Ok(())
}

/// Detection false-positive rate at threshold `n` for `k`-bit messages.
pub fn fpr_detection_with(n: usize, k: usize, tail: Tail) -> Result<f64> {
    check_n(n, k)?;
    Ok(match tail {
        Tail::Inclusive => upper_tail(n, k),
        Tail::Strict => upper_tail(n + 1, k),
    })
}

pub fn fpr_detection(n: usize, k: usize) -> Result<f64> {
    fpr_detection_with(n, k, Tail::Inclusive)
}

/// Probability that a random message matches at least one of `users` registered messages.
pub fn fpr_attribution_with(users: u64, n: usize, k: usize, tail: Tail) -> Result<f64> {
    if users == 0 {
        return Err(Error::invalid("user count must be >= 1"));
    }
    let p = fpr_detection_with(n, k, tail)?;
    if p >= 1.0 {
        return Ok(1.0);
    }
    Ok(-((users as f64) * (-p).ln_1p()).exp_m1())
}

pub fn fpr_attribution(users: u64, n: usize, k: usize) -> Result<f64> {
    fpr_attribution_with(users, n, k, Tail::Inclusive)
}

/// Smallest `n` whose attribution FPR does not exceed `target`.
pub fn solve_threshold_with(target: f64, users: u64, k: usize, tail: Tail) -> Result<usize> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::invalid(format!("target FPR {target} must lie in (0, 1)")));
    }
    for n in 0..=k {
        if fpr_attribution_with(users, n, k, tail)? <= target {
            return Ok(n);
        }
    }
    Err(Error::invalid(format!("no threshold reaches FPR {target}")))
}

pub fn solve_threshold(target: f64, users: u64, k: usize) -> Result<usize> {
    solve_threshold_with(target, users, k, Tail::Inclusive)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub matched_bits: usize,
    pub threshold: usize,
    pub decision: bool,
    pub fpr_det: f64,
    pub matched_user: Option<String>,
}

pub fn detect(extracted: &BitMessage, reference: &BitMessage, n: usize) -> Result<MatchReport> {
    let matched_bits = match_count(extracted, reference)?;
    Ok(MatchReport {
        matched_bits,
        threshold: n,
        decision: matched_bits >= n,
        fpr_det: fpr_detection(n, extracted.len())?,
        matched_user: None,
    })
}

/// Registered users and their messages, ordered by user id.
#[derive(Clone, Debug, Default)]
pub struct UserRegistry {
    users: BTreeMap<String, BitMessage>,
    k: Option<usize>,
}

impl UserRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, user_id: impl Into<String>, message: BitMessage) -> Result<()> {
        let id = user_id.into();
        if let Some(k) = self.k {
            if message.len() != k {
                return Err(Error::shape(format!(
                    "user {id}: message has {} bits, registry uses {k}",
                    message.len()
                )));
            }
        }
        if self.users.contains_key(&id) {
            return Err(Error::invalid(format!("duplicate user id {id}")));
        }
        self.k = Some(message.len());
        self.users.insert(id, message);
        Ok(())
    }

    pub fn from_records(records: Vec<MessageRecord>) -> Result<Self> {
        let mut r = Self::new();
        for rec in records {
            r.register(rec.user_id, rec.message)?;
        }
        Ok(r)
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn message_len(&self) -> Option<usize> {
        self.k
    }

    pub fn get(&self, user_id: &str) -> Option<&BitMessage> {
        self.users.get(user_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &BitMessage)> {
        self.users.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// Attributes `extracted` to the best-matching registered user if that user
/// reaches `n` matching bits. Ties go to the lowest user id.
pub fn attribute(extracted: &BitMessage, registry: &UserRegistry, n: usize) -> Result<MatchReport> {
    if registry.is_empty() {
        return Err(Error::Empty("user registry"));
    }
    let mut best: Option<(&str, usize)> = None;
    for (id, m) in registry.iter() {
        let c = match_count(extracted, m)?;
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((id, c));
        }
    }
    let (id, matched_bits) = best.expect("registry is nonempty");
    let decision = matched_bits >= n;
    Ok(MatchReport {
        matched_bits,
        threshold: n,
        decision,
        fpr_det: fpr_detection(n, extracted.len())?,
        matched_user: decision.then(|| id.to_string()),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionOutcome {
    pub threshold: usize,
    pub images: usize,
    pub correct: usize,
    pub false_attributions: usize,
    pub missed: usize,
    pub accuracy: f64,
}

/// Draws `users` random messages, simulates extraction of `per_user` images
/// each by flipping every bit independently with probability `flip`, and
/// attributes each at the threshold solved for `target_fpr_att`.
pub fn simulate_attribution(
    users: usize,
    per_user: usize,
    flip: f64,
    target_fpr_att: f64,
    k: usize,
    seed: u64,
) -> Result<AttributionOutcome> {
    if users == 0 || per_user == 0 || k == 0 {
        return Err(Error::invalid("users, images per user and k must be positive"));
    }
    if !(0.0..=0.5).contains(&flip) {
        return Err(Error::invalid(format!("flip probability {flip} outside [0, 0.5]")));
    }
    let n = solve_threshold(target_fpr_att, users as u64, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let messages: Vec<BitMessage> = (0..users).map(|_| BitMessage::random_with(k, &mut rng)).collect();
    let packed: Vec<Vec<u64>> = messages.iter().map(BitMessage::packed).collect();
    let (mut correct, mut wrong, mut missed) = (0, 0, 0);
    for (u, m) in messages.iter().enumerate() {
        for _ in 0..per_user {
            let bits: Vec<bool> = m.bits().iter().map(|&b| b ^ rng.random_bool(flip)).collect();
            let q = BitMessage::new(bits)?.packed();
            // argmax with lowest-index tie-break; equivalent to `attribute`
            // over a registry keyed by zero-padded indices, without the map
            let mut best = (0usize, 0usize);
            for (v, p) in packed.iter().enumerate() {
                let diff: u32 = p.iter().zip(&q).map(|(a, b)| (a ^ b).count_ones()).sum();
                let c = k - diff as usize;
                if v == 0 || c > best.1 {
                    best = (v, c);
                }
            }
            if best.1 < n {
                missed += 1;
            } else if best.0 == u {
                correct += 1;
            } else {
                wrong += 1;
            }
        }
    }
    let images = users * per_user;
    Ok(AttributionOutcome {
        threshold: n,
        images,
        correct,
        false_attributions: wrong,
        missed,
        accuracy: correct as f64 / images as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigUint;
    use proptest::prelude::*;

    fn big_tail(lo: usize, k: usize) -> f64 {
        // sum of exact binomials over 2^k, via big integers
        let mut total = BigUint::from(0u32);
        for i in lo..=k {
            let mut c = BigUint::from(1u32);
            for j in 0..i {
                c = c * BigUint::from((k - j) as u64) / BigUint::from((j + 1) as u64);
            }
            total += c;
        }
        // decimal string to f64 is correctly rounded; 2^k is exact
        let s: f64 = total.to_string().parse().unwrap();
        s / 2f64.powi(k as i32)
    }

    fn rel(a: f64, b: f64) -> f64 {
        if a == b {
            0.0
        } else {
            (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
        }
    }

    #[test]
    fn exact_against_big_integers() {
        for k in [1, 7, 16, 32, 48, 64] {
            for n in 0..=k {
                let ours = fpr_detection(n, k).unwrap();
                assert!(rel(ours, big_tail(n, k)) < 1e-12, "k={k} n={n}");
                let strict = fpr_detection_with(n, k, Tail::Strict).unwrap();
                assert!(rel(strict, big_tail(n + 1, k)) < 1e-12 || (n == k && strict == 0.0));
            }
        }
    }

    #[test]
    fn log_domain_path_is_close() {
        // k > 64 uses log-domain sums; compare with big integers
        for n in [40, 60, 70, 90] {
            let ours = fpr_detection(n, 100).unwrap();
            assert!(rel(ours, big_tail(n, 100)) < 1e-9, "n={n}");
        }
    }

    #[test]
    fn boundaries() {
        assert_eq!(fpr_detection_with(48, 48, Tail::Strict).unwrap(), 0.0);
        assert_eq!(fpr_detection(48, 48).unwrap(), 0.5f64.powi(48));
        let p0 = fpr_detection_with(0, 48, Tail::Strict).unwrap();
        assert!(rel(p0, 1.0 - 0.5f64.powi(48)) < 1e-15);
        assert_eq!(fpr_detection(0, 48).unwrap(), 1.0);
        assert!(fpr_detection(49, 48).is_err());
        assert_eq!(fpr_attribution_with(1000, 48, 48, Tail::Strict).unwrap(), 0.0);
        assert!(fpr_attribution(0, 10, 48).is_err());
    }

    #[test]
    fn attribution_with_one_user_is_detection() {
        for n in 0..=48 {
            assert_eq!(
                fpr_attribution(1, n, 48).unwrap(),
                fpr_detection(n, 48).unwrap()
            );
        }
    }

    #[test]
    fn solved_thresholds_for_published_setting() {
        assert_eq!(solve_threshold_with(1e-6, 100_000, 48, Tail::Strict).unwrap(), 45);
        assert_eq!(solve_threshold(1e-6, 100_000, 48).unwrap(), 46);
    }

    #[test]
    fn solve_matches_scan() {
        for (t, users) in [(1e-6, 1u64), (0.999_999, 10), (0.01, 1000), (1e-3, 7)] {
            let n = solve_threshold(t, users, 48).unwrap();
            let scan = (0..=48)
                .find(|&n| fpr_attribution(users, n, 48).unwrap() <= t)
                .unwrap();
            assert_eq!(n, scan);
            if n > 0 {
                assert!(fpr_attribution(users, n - 1, 48).unwrap() > t);
            }
        }
        assert!(solve_threshold(0.999_999, 10, 48).unwrap() <= 24);
        assert!(solve_threshold(0.0, 10, 48).is_err());
        assert!(solve_threshold(1.0, 10, 48).is_err());
    }

    #[test]
    fn match_count_and_detect() {
        let m = BitMessage::random(48, 3);
        assert_eq!(match_count(&m, &m).unwrap(), 48);
        assert_eq!(match_count(&m, &m.complement()).unwrap(), 0);
        assert!(detect(&m, &m, 48).unwrap().decision);
        assert!(!detect(&m.complement(), &m, 1).unwrap().decision);
        assert!(match_count(&m, &BitMessage::zeros(8)).is_err());
    }

    #[test]
    fn attribution_picks_exact_match_and_breaks_ties_low() {
        let mut reg = UserRegistry::new();
        let target = BitMessage::random(48, 100);
        for u in 0..50 {
            let m = if u == 17 { target.clone() } else { BitMessage::random(48, u) };
            reg.register(format!("user{u:03}"), m).unwrap();
        }
        let r = attribute(&target, &reg, 45).unwrap();
        assert_eq!(r.matched_user.as_deref(), Some("user017"));
        assert_eq!(r.matched_bits, 48);

        let mut tie = UserRegistry::new();
        tie.register("b", target.clone()).unwrap();
        tie.register("a", target.clone()).unwrap();
        assert_eq!(attribute(&target, &tie, 10).unwrap().matched_user.as_deref(), Some("a"));
        assert!(tie.register("a", target.clone()).is_err());
        assert!(tie.register("c", BitMessage::zeros(8)).is_err());
        assert!(attribute(&target, &UserRegistry::new(), 1).is_err());

        let r = attribute(&target.complement(), &tie, 1).unwrap();
        assert!(!r.decision && r.matched_user.is_none());
    }

    #[test]
    fn simulation_extremes_and_monotonicity() {
        let clean = simulate_attribution(2000, 2, 0.0, 1e-6, 48, 1).unwrap();
        assert_eq!(clean.accuracy, 1.0);
        assert_eq!(clean.false_attributions, 0);
        let noise = simulate_attribution(200, 2, 0.5, 1e-6, 48, 1).unwrap();
        assert!(noise.accuracy < 0.01);
        let mut prev = 1.0;
        for p in [0.0, 0.05, 0.1, 0.2] {
            let acc = simulate_attribution(500, 2, p, 1e-6, 48, 2).unwrap().accuracy;
            assert!(acc <= prev, "p={p}");
            prev = acc;
        }
        assert!(simulate_attribution(10, 1, 0.6, 1e-6, 48, 0).is_err());
    }

    proptest! {
        #[test]
        fn detection_monotone_in_n(k in 1usize..=80) {
            let mut prev = f64::INFINITY;
            for n in 0..=k {
                let p = fpr_detection(n, k).unwrap();
                prop_assert!(p <= prev);
                prev = p;
            }
        }

        #[test]
        fn attribution_monotone_in_users(n in 30usize..=48, a in 1u64..1000, b in 1u64..1000) {
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(fpr_attribution(lo, n, 48).unwrap() <= fpr_attribution(hi, n, 48).unwrap());
        }

        #[test]
        fn match_count_symmetric_and_oracle(s1 in any::<u64>(), s2 in any::<u64>(), k in 1usize..130) {
            let a = BitMessage::random(k, s1);
            let b = BitMessage::random(k, s2);
            let oracle = (0..k).filter(|&i| a.bit(i) == b.bit(i)).count();
            prop_assert_eq!(match_count(&a, &b).unwrap(), oracle);
            prop_assert_eq!(match_count(&b, &a).unwrap(), oracle);
        }
    }
}
