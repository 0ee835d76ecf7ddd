//! Verification scoring: cosine trials, EER and minimum detection cost.

use std::collections::{BTreeSet, HashMap};
use std::io::Write as _;
use std::path::Path;

use crate::error::{bail, Result};
use crate::linalg::{dot, Matrix};
use crate::model::{count_params, embed_frames, Embedding, ModelConfig, WeightSet};
use crate::parallel;

/// Length-normalized cosine similarity.
pub fn score(enroll: &Embedding, test: &Embedding) -> Result<f64> {
    let (a, b) = (enroll.values(), test.values());
    if a.len() != b.len() {
        bail!(Shape, "embedding dims differ: {} vs {}", a.len(), b.len());
    }
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        bail!(Numerical, "cannot score a zero-norm embedding");
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    /// One utterance id, or several joined by `+` whose embeddings are averaged.
    pub enroll: String,
    pub test: String,
    pub target: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    /// One trial per line: `<enroll_id> <test_id> target|nontarget`. Blank
    /// lines and lines starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut trials = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                bail!(Ingest, "trial line {}: expected 3 fields, got {}", n + 1, f.len());
            }
            let target = match f[2] {
                "target" => true,
                "nontarget" => false,
                other => bail!(Ingest, "trial line {}: label '{other}' is neither target nor nontarget", n + 1),
            };
            trials.push(Trial { enroll: f[0].into(), test: f[1].into(), target });
        }
        Ok(TrialList { trials })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        self.trials
            .iter()
            .map(|t| format!("{} {} {}\n", t.enroll, t.test, if t.target { "target" } else { "nontarget" }))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    /// Every utterance id referenced, sorted.
    pub fn utterance_ids(&self) -> Vec<String> {
        let mut ids = BTreeSet::new();
        for t in &self.trials {
            ids.extend(t.enroll.split('+').map(str::to_string));
            ids.insert(t.test.clone());
        }
        ids.into_iter().collect()
    }
}

/// Scores with their target/nontarget labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    scores: Vec<f64>,
    targets: Vec<bool>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, targets: Vec<bool>) -> Result<Self> {
        if scores.len() != targets.len() {
            bail!(Shape, "{} scores but {} labels", scores.len(), targets.len());
        }
        if scores.iter().any(|s| !s.is_finite()) {
            bail!(Numerical, "non-finite score");
        }
        Ok(ScoreSet { scores, targets })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn targets(&self) -> &[bool] {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn counts(&self) -> Result<(usize, usize)> {
        let nt = self.targets.iter().filter(|&&t| t).count();
        let nn = self.targets.len() - nt;
        if nt == 0 || nn == 0 {
            bail!(Config, "metrics need both target and nontarget trials ({nt} targets, {nn} nontargets)");
        }
        Ok((nt, nn))
    }
}

/// One operating point: trials scoring at or above `threshold` are accepted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// Operating points for thresholds at −∞, every midpoint between adjacent
/// distinct scores, and +∞, ordered by increasing threshold. Tied scores
/// share one threshold.
pub fn roc_points(set: &ScoreSet) -> Result<Vec<RocPoint>> {
    let (nt, nn) = set.counts()?;
    let mut pairs: Vec<(f64, bool)> = set.scores.iter().copied().zip(set.targets.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut points = vec![RocPoint { threshold: f64::NEG_INFINITY, p_miss: 0.0, p_fa: 1.0 }];
    // counts strictly below the next threshold
    let (mut tgt_below, mut non_below) = (0usize, 0usize);
    let mut i = 0;
    while i < pairs.len() {
        let v = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == v {
            if pairs[i].1 {
                tgt_below += 1;
            } else {
                non_below += 1;
            }
            i += 1;
        }
        let threshold = if i < pairs.len() { 0.5 * (v + pairs[i].0) } else { f64::INFINITY };
        points.push(RocPoint {
            threshold,
            p_miss: tgt_below as f64 / nt as f64,
            p_fa: (nn - non_below) as f64 / nn as f64,
        });
    }
    Ok(points)
}

/// Equal error rate, linearly interpolated between the two operating points
/// where the miss rate overtakes the false-alarm rate.
pub fn eer(set: &ScoreSet) -> Result<f64> {
    Ok(eer_from_points(&roc_points(set)?))
}

pub fn eer_from_points(points: &[RocPoint]) -> f64 {
    let i = points.iter().position(|p| p.p_miss >= p.p_fa).expect("last point has p_miss 1, p_fa 0");
    if i == 0 {
        return points[0].p_miss;
    }
    let (a, b) = (points[i - 1], points[i]);
    let t = (a.p_fa - a.p_miss) / ((b.p_miss - a.p_miss) - (b.p_fa - a.p_fa));
    a.p_miss + t * (b.p_miss - a.p_miss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        DcfParams { p_target: 0.01, c_miss: 1.0, c_fa: 1.0 }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            bail!(Config, "p_target {} outside (0, 1)", self.p_target);
        }
        if !(self.c_miss > 0.0 && self.c_fa > 0.0) {
            bail!(Config, "detection costs must be positive");
        }
        Ok(())
    }

    /// Normalized cost at one operating point.
    pub fn cost(&self, p_miss: f64, p_fa: f64) -> f64 {
        let norm = (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target));
        (self.c_miss * self.p_target * p_miss + self.c_fa * (1.0 - self.p_target) * p_fa) / norm
    }
}

/// Minimum normalized detection cost over all operating points.
pub fn min_dcf(set: &ScoreSet, params: DcfParams) -> Result<f64> {
    params.validate()?;
    Ok(roc_points(set)?.iter().map(|p| params.cost(p.p_miss, p.p_fa)).fold(f64::INFINITY, f64::min))
}

/// CSV with header `threshold,p_miss,p_fa`.
pub fn write_roc_csv(path: impl AsRef<Path>, points: &[RocPoint]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "threshold,p_miss,p_fa")?;
    for p in points {
        writeln!(out, "{},{},{}", p.threshold, p.p_miss, p.p_fa)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub eer: f64,
    pub min_dcf: f64,
    pub num_params: usize,
    pub num_trials: usize,
    pub scores: ScoreSet,
}

/// Embeds every referenced utterance once (in parallel up to
/// `LRX_THREADS`), scores all trials and computes the metrics.
pub fn evaluate_model(
    config: &ModelConfig,
    weights: &WeightSet,
    utterances: &HashMap<String, Matrix>,
    trials: &TrialList,
    dcf: DcfParams,
) -> Result<EvalResult> {
    weights.check_shapes(config)?;
    let ids = trials.utterance_ids();
    if let Some(missing) = ids.iter().find(|id| !utterances.contains_key(*id)) {
        bail!(Ingest, "trial list references unknown utterance '{missing}'");
    }
    let embedded = parallel::map_indexed(ids.len(), parallel::threads(), |i| embed_frames(config, weights, &utterances[&ids[i]]));
    let mut cache = HashMap::with_capacity(ids.len());
    for (id, e) in ids.iter().zip(embedded) {
        cache.insert(id.as_str(), e?);
    }
    let mut scores = Vec::with_capacity(trials.len());
    for t in &trials.trials {
        let enroll = average(t.enroll.split('+').map(|id| &cache[id]));
        scores.push(score(&enroll, &cache[t.test.as_str()])?);
    }
    let set = ScoreSet::new(scores, trials.trials.iter().map(|t| t.target).collect())?;
    Ok(EvalResult {
        eer: eer(&set)?,
        min_dcf: min_dcf(&set, dcf)?,
        num_params: count_params(config).total,
        num_trials: trials.len(),
        scores: set,
    })
}

fn average<'a>(embs: impl Iterator<Item = &'a Embedding>) -> Embedding {
    let mut sum: Vec<f64> = Vec::new();
    let mut n = 0.0;
    for e in embs {
        if sum.is_empty() {
            sum = e.values().to_vec();
        } else {
            sum.iter_mut().zip(e.values()).for_each(|(s, v)| *s += v);
        }
        n += 1.0;
    }
    if n > 1.0 {
        sum.iter_mut().for_each(|s| *s /= n);
    }
    Embedding(sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::tiny_config;
    use crate::rng::substream;
    use proptest::prelude::*;
    use rand::Rng as _;

    /// Exhaustive oracle: every candidate threshold evaluated by direct
    /// counting, then the same crossing rule.
    fn brute(scores: &[f64], targets: &[bool]) -> Vec<RocPoint> {
        let mut uniq: Vec<f64> = scores.to_vec();
        uniq.sort_by(f64::total_cmp);
        uniq.dedup();
        let mut ths = vec![f64::NEG_INFINITY];
        for w in uniq.windows(2) {
            ths.push(0.5 * (w[0] + w[1]));
        }
        ths.push(f64::INFINITY);
        let nt = targets.iter().filter(|&&t| t).count() as f64;
        let nn = targets.len() as f64 - nt;
        ths.iter()
            .map(|&th| {
                let mut miss = 0.0;
                let mut fa = 0.0;
                for (s, &t) in scores.iter().zip(targets) {
                    if t && *s < th {
                        miss += 1.0;
                    }
                    if !t && *s >= th {
                        fa += 1.0;
                    }
                }
                RocPoint { threshold: th, p_miss: miss / nt, p_fa: fa / nn }
            })
            .collect()
    }

    fn set(t: &[f64], n: &[f64]) -> ScoreSet {
        let mut s = t.to_vec();
        s.extend_from_slice(n);
        let mut l = vec![true; t.len()];
        l.extend(vec![false; n.len()]);
        ScoreSet::new(s, l).unwrap()
    }

    #[test]
    fn cosine_cases() {
        let a = Embedding(vec![1.0, 2.0]);
        assert!((score(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(score(&Embedding(vec![1.0, 0.0]), &Embedding(vec![0.0, 3.0])).unwrap(), 0.0);
        assert!((score(&a, &Embedding(vec![-1.0, -2.0])).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(score(&a, &Embedding(vec![0.0, 0.0])).unwrap_err().category(), "numerical");
        let mut rng = substream(1, "cos", &[]);
        let x: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut d = 0.0;
        let mut nx = 0.0;
        let mut ny = 0.0;
        for i in 0..7 {
            d += x[i] * y[i];
            nx += x[i] * x[i];
            ny += y[i] * y[i];
        }
        assert!((score(&Embedding(x), &Embedding(y)).unwrap() - d / (nx.sqrt() * ny.sqrt())).abs() <= 1e-12);
    }

    #[test]
    fn eer_cases() {
        assert_eq!(eer(&set(&[0.9, 0.8], &[0.1, 0.2])).unwrap(), 0.0);
        assert_eq!(eer(&set(&[0.5, 0.5], &[0.5, 0.5, 0.5])).unwrap(), 0.5);
        let s = set(&[0.9, 0.8, 0.3], &[0.7, 0.2, 0.1]);
        assert_eq!(eer(&s).unwrap(), eer_from_points(&brute(s.scores(), s.targets())));
        assert!((eer(&s).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(eer(&set(&[0.9], &[])).unwrap_err().category(), "config");
    }

    #[test]
    fn dcf_cases() {
        let p = DcfParams::default();
        assert_eq!(min_dcf(&set(&[0.9, 0.8], &[0.1, 0.2]), p).unwrap(), 0.0);
        assert!((min_dcf(&set(&[0.5, 0.5], &[0.5, 0.5]), p).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn trial_parsing() {
        let t = TrialList::parse("a b target\n# c\n\nc d nontarget\n").unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(TrialList::parse(&t.to_text()).unwrap(), t);
        assert_eq!(TrialList::parse("a b maybe").unwrap_err().category(), "ingest");
        assert!(TrialList::parse("a b").is_err());
        assert_eq!(t.utterance_ids(), vec!["a", "b", "c", "d"]);
    }

    fn utterances(cfg: &ModelConfig, n: usize) -> HashMap<String, Matrix> {
        (0..n)
            .map(|i| (format!("u{i}"), Matrix::uniform(20, cfg.input_dim, 1.0, &mut substream(3, "u", &[i as u64]))))
            .collect()
    }

    #[test]
    fn self_trials_and_determinism() {
        let cfg = tiny_config(3, false);
        let w = WeightSet::init_random(&cfg, &mut substream(3, "init", &[]));
        let utts = utterances(&cfg, 6);
        let mut trials = TrialList::default();
        for i in 0..6 {
            trials.trials.push(Trial { enroll: format!("u{i}"), test: format!("u{i}"), target: true });
            trials.trials.push(Trial { enroll: format!("u{i}"), test: format!("u{}", (i + 1) % 6), target: false });
        }
        let a = evaluate_model(&cfg, &w, &utts, &trials, DcfParams::default()).unwrap();
        assert_eq!(a.eer, 0.0);
        assert_eq!(a.num_params, count_params(&cfg).total);
        let b = evaluate_model(&cfg, &w, &utts, &trials, DcfParams::default()).unwrap();
        assert_eq!(a, b);
        trials.trials.push(Trial { enroll: "u0+u1".into(), test: "zz".into(), target: true });
        assert_eq!(evaluate_model(&cfg, &w, &utts, &trials, DcfParams::default()).unwrap_err().category(), "ingest");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn metrics_match_brute_force(seed in 0u64..100_000, n in 2usize..200, levels in 2u32..40) {
            let mut rng = substream(seed, "scores", &[]);
            // coarse levels force ties
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
            let mut targets: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
            targets[0] = true;
            targets[1] = false;
            let s = ScoreSet::new(scores.clone(), targets.clone()).unwrap();
            let pts = brute(&scores, &targets);
            prop_assert_eq!(roc_points(&s).unwrap(), pts.clone());
            prop_assert_eq!(eer(&s).unwrap(), eer_from_points(&pts));
            let p = DcfParams::default();
            let want = pts.iter().map(|q| p.cost(q.p_miss, q.p_fa)).fold(f64::INFINITY, f64::min);
            prop_assert_eq!(min_dcf(&s, p).unwrap(), want);

            let e = eer(&s).unwrap();
            prop_assert!((0.0..=1.0).contains(&e));
            let warped = ScoreSet::new(scores.iter().map(|x| (3.0 * x).exp() - 2.0).collect(), targets.clone()).unwrap();
            prop_assert_eq!(eer(&warped).unwrap(), e);
            prop_assert_eq!(min_dcf(&warped, p).unwrap(), min_dcf(&s, p).unwrap());
            let flipped = ScoreSet::new(scores.iter().map(|x| -x).collect(), targets.iter().map(|t| !t).collect()).unwrap();
            prop_assert!((eer(&flipped).unwrap() - e).abs() <= 1e-15);
        }
    }
}
