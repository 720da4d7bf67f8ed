//! Turn-wise attribution, omission interventions, trajectory distance,
//! Lipschitz estimates and the empirical KL bound check.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Task, World};
use crate::policy::{kl, Features, PolicyParams, N_PARAMS};
use crate::render::{render, View};
use crate::rl::mean_kl;
use crate::rng;
use crate::rollout::{
    continuations, continue_paired, live_prefix, run_episode, Actor, ContinuationOutcome, Episode,
    InterventionError, OmissionKind,
};
use crate::tokenizer::tokenize;
use crate::trajectory::Trajectory;

/// Token scale that puts cost deviations on the same footing as rewards.
pub const COST_SCALE: f64 = 4096.0;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Intervention(#[from] InterventionError),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("no usable pairs: all {skipped} pairs are closer than d_min")]
    NoUsablePairs { skipped: usize },
    #[error("perturbation scales must be ascending and include 0")]
    Scales,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributionPoint {
    /// Number of reference turns kept before continuing.
    pub turn: usize,
    pub pass_at_1: f64,
    pub pass_at_k: f64,
    pub mean_tokens: f64,
    pub tasks: usize,
}

/// Continuation outcomes for every prefix length of one reference rollout.
pub fn prefix_continuations(
    task: &Arc<Task>,
    reference: &Trajectory,
    actor: Actor<'_>,
    k: usize,
    seed: u64,
) -> Vec<Vec<ContinuationOutcome>> {
    (0..reference.turns.len())
        .map(|t| {
            let prefix = live_prefix(&reference.turns, t + 1);
            (0..k)
                .map(|j| {
                    let key = [seed, rng::str_key(&task.task_id), t as u64, j as u64, 0xa7];
                    let ep = continue_paired(task, prefix.clone(), Default::default(), actor, &key)
                        .expect("reference prefixes always replay");
                    ContinuationOutcome {
                        success: ep.success(),
                        cost: ep.trajectory.live_tokens(),
                    }
                })
                .collect()
        })
        .collect()
}

/// Whether any of the first `k` outcomes succeeded.
pub fn pass_at(outcomes: &[ContinuationOutcome], k: usize) -> bool {
    outcomes.iter().take(k).any(|o| o.success)
}

/// Pass@1 and Pass@k of continuations from every prefix of each task's
/// reference rollout, aggregated over tasks in task order.
pub fn attribution_curve(
    tasks: &[Arc<Task>],
    reference_actor: Actor<'_>,
    actor: Actor<'_>,
    k: usize,
    seed: u64,
) -> Result<Vec<AttributionPoint>, AnalysisError> {
    if k == 0 {
        return Err(AnalysisError::ZeroK);
    }
    let per_task: Vec<Vec<Vec<ContinuationOutcome>>> = tasks
        .par_iter()
        .map(|task| {
            let mut r = rng::stream(&[seed, rng::str_key(&task.task_id), 0xa1]);
            let reference = run_episode(task, reference_actor, &mut r).trajectory;
            prefix_continuations(task, &reference, actor, k, seed)
        })
        .collect();
    let mut acc: BTreeMap<usize, (usize, usize, usize, f64)> = BTreeMap::new();
    for outcomes in &per_task {
        for (t, o) in outcomes.iter().enumerate() {
            let e = acc.entry(t).or_default();
            e.0 += 1;
            e.1 += usize::from(pass_at(o, 1));
            e.2 += usize::from(pass_at(o, k));
            e.3 += o.iter().map(|x| x.cost as f64).sum::<f64>() / o.len() as f64;
        }
    }
    Ok(acc
        .into_iter()
        .map(|(t, (n, p1, pk, cost))| AttributionPoint {
            turn: t,
            pass_at_1: p1 as f64 / n as f64,
            pass_at_k: pk as f64 / n as f64,
            mean_tokens: cost / n as f64,
            tasks: n,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionResult {
    pub task_id: String,
    pub turn: usize,
    pub kind: OmissionKind,
    pub delta_accuracy: f64,
    pub delta_tokens: f64,
}

fn mean_success(o: &[ContinuationOutcome]) -> f64 {
    o.iter().filter(|x| x.success).count() as f64 / o.len().max(1) as f64
}

fn mean_cost(o: &[ContinuationOutcome]) -> f64 {
    o.iter().map(|x| x.cost as f64).sum::<f64>() / o.len().max(1) as f64
}

/// Treated minus control, both averaged over `k` paired continuations.
pub fn intervene(
    task: &Arc<Task>,
    trajectory: &Trajectory,
    turn: usize,
    kind: OmissionKind,
    actor: Actor<'_>,
    k: usize,
    seed: u64,
) -> Result<InterventionResult, AnalysisError> {
    if k == 0 {
        return Err(AnalysisError::ZeroK);
    }
    let control = continuations(task, trajectory, turn, None, actor, k, seed)?;
    let treated = continuations(task, trajectory, turn, Some(kind), actor, k, seed)?;
    Ok(InterventionResult {
        task_id: task.task_id.clone(),
        turn,
        kind,
        delta_accuracy: mean_success(&treated) - mean_success(&control),
        delta_tokens: mean_cost(&treated) - mean_cost(&control),
    })
}

/// Every applicable single omission of a trajectory, in turn order.
pub fn intervention_sweep(
    task: &Arc<Task>,
    trajectory: &Trajectory,
    actor: Actor<'_>,
    k: usize,
    seed: u64,
) -> Result<Vec<InterventionResult>, AnalysisError> {
    crate::synthesis::candidate_omissions(trajectory)
        .par_iter()
        .map(|&(t, kind)| intervene(task, trajectory, t, kind, actor, k, seed))
        .collect()
}

/// FactSearch turns whose observation shows the fact naming the answer.
pub fn bridging_observations(task: &Task, trajectory: &Trajectory) -> Vec<usize> {
    let World::FactSearch(world) = &task.world else {
        return Vec::new();
    };
    let evidence = world.facts[world.evidence_index].text();
    trajectory
        .turns
        .iter()
        .filter(|t| t.observation.as_ref().is_some_and(|o| o.text.contains(&evidence)))
        .map(|t| t.index)
        .collect()
}

fn token_counts(trajectory: &Trajectory) -> BTreeMap<String, usize> {
    let text = render(&trajectory.question, &trajectory.turns, View::Transcript).to_text();
    let mut counts = BTreeMap::new();
    for tok in tokenize(&text).into_tokens() {
        *counts.entry(tok).or_insert(0) += 1;
    }
    counts
}

/// Jaccard distance between multisets of tokens.
pub fn multiset_distance(a: &BTreeMap<String, usize>, b: &BTreeMap<String, usize>) -> f64 {
    let mut inter = 0;
    let mut union = 0;
    for (tok, &x) in a {
        let y = b.get(tok).copied().unwrap_or(0);
        inter += x.min(y);
        union += x.max(y);
    }
    union += b
        .iter()
        .filter(|(tok, _)| !a.contains_key(*tok))
        .map(|(_, &y)| y)
        .sum::<usize>();
    if union == 0 {
        0.0
    } else {
        1.0 - inter as f64 / union as f64
    }
}

pub fn trajectory_distance(y1: &Trajectory, y2: &Trajectory) -> f64 {
    multiset_distance(&token_counts(y1), &token_counts(y2))
}

/// Distance, reward deviation and normalized cost deviation of one pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairDelta {
    pub distance: f64,
    pub reward: f64,
    pub cost: f64,
}

impl PairDelta {
    pub fn of(y1: &Trajectory, y2: &Trajectory) -> Self {
        PairDelta {
            distance: trajectory_distance(y1, y2),
            reward: (y1.r_task - y2.r_task).abs(),
            cost: (y1.live_tokens() as f64 - y2.live_tokens() as f64).abs() / COST_SCALE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub k_r: f64,
    pub k_c: f64,
    pub used: usize,
    pub skipped: usize,
}

pub fn estimate_lipschitz(pairs: &[PairDelta], d_min: f64) -> Result<LipschitzEstimate, AnalysisError> {
    let mut est = LipschitzEstimate {
        k_r: 0.0,
        k_c: 0.0,
        used: 0,
        skipped: 0,
    };
    for p in pairs {
        if p.distance < d_min {
            est.skipped += 1;
            continue;
        }
        est.used += 1;
        est.k_r = est.k_r.max(p.reward / p.distance);
        est.k_c = est.k_c.max(p.cost / p.distance);
    }
    if est.used == 0 {
        return Err(AnalysisError::NoUsablePairs {
            skipped: est.skipped,
        });
    }
    Ok(est)
}

/// Affine upper envelope `intercept + slope * x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub intercept: f64,
    pub slope: f64,
}

impl Envelope {
    pub fn at(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

/// Least-squares line with non-negative coefficients, raised by the largest
/// residual so that it covers every point.
pub fn fit_envelope(points: &[(f64, f64)]) -> Envelope {
    if points.is_empty() {
        return Envelope {
            intercept: 0.0,
            slope: 0.0,
        };
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = if sxx > 0.0 { (sxy / sxx).max(0.0) } else { 0.0 };
    let base = my - slope * mx;
    let shift = points
        .iter()
        .map(|p| p.1 - (base + slope * p.0))
        .fold(f64::NEG_INFINITY, f64::max);
    Envelope {
        intercept: (base + shift).max(0.0),
        slope,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundSample {
    pub seed: u64,
    pub scale: f64,
    pub kl: f64,
    pub dev_reward: f64,
    pub dev_cost: f64,
    pub bound_reward: f64,
    pub bound_cost: f64,
    pub holds: bool,
}

/// Transport and trade-off constants implied by an envelope and a
/// Lipschitz constant, when both sides are non-degenerate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub epsilon: Option<f64>,
    pub omega: Option<f64>,
}

pub fn implied_constants(envelope: &Envelope, lipschitz: f64) -> Constants {
    let (d, s) = (envelope.intercept, envelope.slope);
    if d > 0.0 && s > 0.0 && lipschitz > 0.0 {
        Constants {
            epsilon: Some(2.0 * (d * s).sqrt() / lipschitz),
            omega: Some((s / d).sqrt()),
        }
    } else {
        Constants {
            epsilon: None,
            omega: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundEstimate {
    pub k_r: f64,
    pub k_c: f64,
    pub lipschitz_pairs: usize,
    pub lipschitz_skipped: usize,
    pub reward: Envelope,
    pub cost: Envelope,
    pub reward_constants: Constants,
    pub cost_constants: Constants,
    pub samples: Vec<BoundSample>,
}

/// Parameters moved by `scale` along a fixed direction drawn from `seed`.
pub fn perturb(params: &PolicyParams, scale: f64, seed: u64) -> PolicyParams {
    let mut r = rng::stream(&[seed, 0x9e7]);
    let mut dir = [0.0; N_PARAMS];
    for d in &mut dir {
        *d = r.gen_range(-1.0..1.0);
    }
    params.axpy(scale, &dir)
}

struct ScaleRun {
    reward: f64,
    cost: f64,
    kl: f64,
    pairs: Vec<PairDelta>,
}

fn sampled(params: &PolicyParams) -> Actor<'_> {
    Actor::Sample {
        params,
        temperature: 1.0,
    }
}

fn run_pool(tasks: &[Arc<Task>], params: &PolicyParams, rollouts: usize, seed: u64) -> Vec<Episode> {
    let jobs: Vec<(usize, usize)> = (0..tasks.len())
        .flat_map(|i| (0..rollouts).map(move |j| (i, j)))
        .collect();
    jobs.par_iter()
        .map(|&(i, j)| {
            let task = &tasks[i];
            let mut r = rng::stream(&[seed, rng::str_key(&task.task_id), j as u64, 0xb0]);
            run_episode(task, sampled(params), &mut r)
        })
        .collect()
}

fn means(eps: &[Episode]) -> (f64, f64) {
    let n = eps.len().max(1) as f64;
    let r = eps.iter().map(|e| e.trajectory.r_task).sum::<f64>() / n;
    let c = eps.iter().map(|e| e.trajectory.live_tokens() as f64).sum::<f64>() / n;
    (r, c / COST_SCALE)
}

/// Sweep perturbations of the reference policy, measuring reward and cost
/// deviations against the exact KL on the reference policy's own contexts.
pub fn verify_bound(
    tasks: &[Arc<Task>],
    reference: &PolicyParams,
    scales: &[f64],
    rollouts: usize,
    seeds: &[u64],
) -> Result<BoundEstimate, AnalysisError> {
    if scales.first() != Some(&0.0) || scales.windows(2).any(|w| w[1] < w[0]) {
        return Err(AnalysisError::Scales);
    }
    let mut samples = Vec::new();
    let mut pairs = Vec::new();
    for &seed in seeds {
        let base = run_pool(tasks, reference, rollouts, seed);
        let contexts: Vec<Features> = base
            .iter()
            .flat_map(|e| e.steps.iter().map(|s| s.features.clone()))
            .collect();
        let (r0, c0) = means(&base);
        let runs: Vec<ScaleRun> = scales
            .iter()
            .map(|&scale| {
                let params = perturb(reference, scale, seed);
                let eps = run_pool(tasks, &params, rollouts, seed);
                let (r, c) = means(&eps);
                ScaleRun {
                    reward: r,
                    cost: c,
                    kl: contexts.iter().map(|f| kl(reference, &params, f)).sum::<f64>()
                        / contexts.len().max(1) as f64,
                    pairs: base
                        .iter()
                        .zip(&eps)
                        .map(|(a, b)| PairDelta::of(&a.trajectory, &b.trajectory))
                        .collect(),
                }
            })
            .collect();
        for (&scale, run) in scales.iter().zip(runs) {
            samples.push(BoundSample {
                seed,
                scale,
                kl: run.kl,
                dev_reward: (run.reward - r0).abs(),
                dev_cost: (run.cost - c0).abs(),
                bound_reward: 0.0,
                bound_cost: 0.0,
                holds: false,
            });
            pairs.extend(run.pairs);
        }
    }
    let reward = fit_envelope(&samples.iter().map(|s| (s.kl, s.dev_reward)).collect::<Vec<_>>());
    let cost = fit_envelope(&samples.iter().map(|s| (s.kl, s.dev_cost)).collect::<Vec<_>>());
    for s in &mut samples {
        s.bound_reward = reward.at(s.kl);
        s.bound_cost = cost.at(s.kl);
        s.holds = s.dev_reward <= s.bound_reward + 1e-12 && s.dev_cost <= s.bound_cost + 1e-12;
    }
    let lip = estimate_lipschitz(&pairs, 0.05).unwrap_or(LipschitzEstimate {
        k_r: 0.0,
        k_c: 0.0,
        used: 0,
        skipped: pairs.len(),
    });
    Ok(BoundEstimate {
        k_r: lip.k_r,
        k_c: lip.k_c,
        lipschitz_pairs: lip.used,
        lipschitz_skipped: lip.skipped,
        reward,
        cost,
        reward_constants: implied_constants(&reward, lip.k_r),
        cost_constants: implied_constants(&cost, lip.k_c),
        samples,
    })
}

/// Mean deviations per scale, averaged over seeds, in scale order.
pub fn mean_deviation_by_scale(samples: &[BoundSample]) -> Vec<(f64, f64, f64)> {
    let mut acc: Vec<(f64, f64, f64, usize)> = Vec::new();
    for s in samples {
        match acc.iter_mut().find(|a| a.0 == s.scale) {
            Some(a) => {
                a.1 += s.dev_reward;
                a.2 += s.dev_cost;
                a.3 += 1;
            }
            None => acc.push((s.scale, s.dev_reward, s.dev_cost, 1)),
        }
    }
    acc.sort_by(|a, b| a.0.total_cmp(&b.0));
    acc.into_iter()
        .map(|(s, r, c, n)| (s, r / n as f64, c / n as f64))
        .collect()
}

/// Mean exact KL between two policies on the given contexts.
pub fn policy_kl(p: &PolicyParams, q: &PolicyParams, contexts: &[Features]) -> f64 {
    mean_kl(p, q, contexts)
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v}")).unwrap_or_default()
}

pub fn attribution_csv(points: &[AttributionPoint]) -> String {
    let mut out = String::from("turn,pass1,passk,tokens,tasks\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            p.turn, p.pass_at_1, p.pass_at_k, p.mean_tokens, p.tasks
        );
    }
    out
}

pub fn interventions_csv(results: &[InterventionResult]) -> String {
    let mut out = String::from("task_id,turn,kind,delta_accuracy,delta_tokens\n");
    for r in results {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.task_id,
            r.turn,
            r.kind.name(),
            r.delta_accuracy,
            r.delta_tokens
        );
    }
    out
}

pub fn bounds_csv(b: &BoundEstimate) -> String {
    let mut out = String::from(
        "seed,scale,kl,dev_reward,dev_cost,bound_reward,bound_cost,holds,\
         k_r,k_c,delta_r,slope_r,delta_c,slope_c,epsilon_r,omega_r,epsilon_c,omega_c\n",
    );
    for s in &b.samples {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            s.seed,
            s.scale,
            s.kl,
            s.dev_reward,
            s.dev_cost,
            s.bound_reward,
            s.bound_cost,
            s.holds,
            b.k_r,
            b.k_c,
            b.reward.intercept,
            b.reward.slope,
            b.cost.intercept,
            b.cost.slope,
            opt(b.reward_constants.epsilon),
            opt(b.reward_constants.omega),
            opt(b.cost_constants.epsilon),
            opt(b.cost_constants.omega),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_task, Difficulty, EnvKind, ThinkingStyle};
    use crate::trajectory::{ActionBlock, ObservationCell, ThoughtBlock, Turn};
    use proptest::prelude::*;

    fn task(env: EnvKind, seed: u64) -> Arc<Task> {
        Arc::new(make_task(env, seed, Difficulty::Easy))
    }

    const ORACLE: Actor<'static> = Actor::Oracle(ThinkingStyle::Terse);

    fn oracle_traj(t: &Arc<Task>) -> Trajectory {
        run_episode(t, Actor::Oracle(ThinkingStyle::Verbose), &mut rng::stream(&[0])).trajectory
    }

    fn one_turn(thought: &str, obs: &str) -> Trajectory {
        Trajectory {
            task_id: "x".into(),
            env: "craftworld".into(),
            seed: 0,
            question: String::new(),
            turns: vec![Turn {
                index: 1,
                thought: ThoughtBlock::verbose(thought),
                omit: Default::default(),
                action: ActionBlock::answer("done"),
                observation: Some(ObservationCell::present(obs)),
            }],
            final_answer: "done".into(),
            r_task: 1.0,
            r_omit: 0.0,
        }
    }

    #[test]
    fn oracle_attribution_is_flat_and_monotone() {
        let tasks: Vec<Arc<Task>> = (0..4).map(|s| task(EnvKind::CraftWorld, s)).collect();
        let pts = attribution_curve(&tasks, Actor::Oracle(ThinkingStyle::Verbose), ORACLE, 3, 1).unwrap();
        assert!(!pts.is_empty());
        for p in &pts {
            assert_eq!((p.pass_at_1, p.pass_at_k), (1.0, 1.0));
        }
        let csv = attribution_csv(&pts);
        assert!(csv.starts_with("turn,pass1,passk,tokens"));
        assert_eq!(csv.lines().count(), pts.len() + 1);
        assert!(matches!(
            attribution_curve(&tasks, ORACLE, ORACLE, 0, 1),
            Err(AnalysisError::ZeroK)
        ));
    }

    #[test]
    fn factsearch_interventions_show_expected_pattern() {
        for seed in 0..5 {
            let t = task(EnvKind::FactSearch, seed);
            let traj = oracle_traj(&t);
            let distractor = intervene(&t, &traj, 1, OmissionKind::Observation, ORACLE, 4, 0).unwrap();
            assert_eq!(distractor.delta_accuracy, 0.0);
            assert!(distractor.delta_tokens < 0.0);
            let bridging = bridging_observations(&t, &traj);
            assert_eq!(bridging.len(), 1);
            let b = intervene(&t, &traj, bridging[0], OmissionKind::Observation, ORACLE, 4, 0).unwrap();
            assert!(b.delta_accuracy < 0.0, "{b:?}");
        }
    }

    #[test]
    fn vacuous_intervention_has_zero_deltas() {
        let t = task(EnvKind::GridNav, 3);
        let traj = run_episode(&t, ORACLE, &mut rng::stream(&[0])).trajectory;
        let r = intervene(&t, &traj, 2, OmissionKind::Thought, ORACLE, 4, 0).unwrap();
        assert_eq!((r.delta_accuracy, r.delta_tokens), (0.0, 0.0));
    }

    #[test]
    fn distance_hand_cases() {
        let a = one_turn("alpha", "beta");
        assert_eq!(trajectory_distance(&a, &a), 0.0);
        let x: BTreeMap<String, usize> = [("a".to_string(), 2), ("b".to_string(), 2)].into();
        let y: BTreeMap<String, usize> = [("a".to_string(), 2), ("c".to_string(), 2)].into();
        let z: BTreeMap<String, usize> = [("d".to_string(), 1)].into();
        assert!((multiset_distance(&x, &y) - (1.0 - 2.0 / 6.0)).abs() < 1e-12);
        assert_eq!(multiset_distance(&x, &z), 1.0);
        let b = one_turn("gamma", "delta");
        let d = trajectory_distance(&a, &b);
        assert!(d > 0.0 && d < 1.0);
    }

    fn bag() -> impl Strategy<Value = BTreeMap<String, usize>> {
        prop::collection::btree_map("[a-e]", 1usize..4, 0..5)
    }

    proptest! {
        #[test]
        fn distance_is_a_metric(x in bag(), y in bag(), z in bag()) {
            let dxy = multiset_distance(&x, &y);
            prop_assert!((0.0..=1.0).contains(&dxy));
            prop_assert_eq!(dxy, multiset_distance(&y, &x));
            prop_assert_eq!(dxy == 0.0, x == y);
            prop_assert!(dxy <= multiset_distance(&x, &z) + multiset_distance(&z, &y) + 1e-12);
        }
    }

    #[test]
    fn lipschitz_hand_cases() {
        let est = estimate_lipschitz(
            &[
                PairDelta { distance: 0.5, reward: 0.2, cost: 0.1 },
                PairDelta { distance: 0.01, reward: 1.0, cost: 1.0 },
            ],
            0.05,
        )
        .unwrap();
        assert!((est.k_r - 0.4).abs() < 1e-12);
        assert!((est.k_c - 0.2).abs() < 1e-12);
        assert_eq!((est.used, est.skipped), (1, 1));
        let same = PairDelta { distance: 0.0, reward: 0.0, cost: 0.0 };
        assert!(matches!(
            estimate_lipschitz(&[same, same], 0.05),
            Err(AnalysisError::NoUsablePairs { skipped: 2 })
        ));
    }

    #[test]
    fn envelope_covers_points() {
        let pts = [(0.0, 0.0), (1.0, 0.5), (2.0, 2.0), (3.0, 1.0)];
        let e = fit_envelope(&pts);
        assert!(e.slope >= 0.0 && e.intercept >= 0.0);
        assert!(pts.iter().all(|p| p.1 <= e.at(p.0) + 1e-12));
        let c = implied_constants(&Envelope { intercept: 0.5, slope: 2.0 }, 1.0);
        let (eps, om) = (c.epsilon.unwrap(), c.omega.unwrap());
        assert!((eps / (2.0 * om) - 0.5).abs() < 1e-12);
        assert!((eps * om / 2.0 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn bound_scale_zero_is_exact() {
        let tasks: Vec<Arc<Task>> = (0..3).map(|s| task(EnvKind::CraftWorld, s)).collect();
        let p = crate::policy::tests::random_params(&mut rng::stream(&[2]), 1.0);
        let b = verify_bound(&tasks, &p, &[0.0, 0.5], 2, &[7]).unwrap();
        let zero = b.samples[0];
        assert_eq!((zero.kl, zero.dev_reward, zero.dev_cost), (0.0, 0.0, 0.0));
        assert!(b.samples[1].kl > 0.0);
        assert!(b.samples.iter().all(|s| s.holds));
        assert_eq!(bounds_csv(&b).lines().count(), 3);
        assert!(matches!(
            verify_bound(&tasks, &p, &[0.5, 0.0], 1, &[7]),
            Err(AnalysisError::Scales)
        ));
    }
}
