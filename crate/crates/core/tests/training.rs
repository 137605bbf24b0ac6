mod common;

use squeezelab::envs::{make_benchmark_suite, skewed_base_policy, skewed_suite_policy, PathTask, SuiteParams};
use squeezelab::irl::{
    grpo_baseline_loop, irl_loss, irl_step, sps_loop, Demo, DemoMeta, DemoSet, Phase, Source, SpsConfig,
};
use squeezelab::metrics::{greedy_logprob_report, support_coverage};
use squeezelab::objectives::{
    contrastive_decomposition, dapo_objective, grpo_objective, gspo_objective, rl_step, ClipConfig, RlConfig,
    RlStepContext, RolloutGroup,
};
use squeezelab::{PolicyTable, Prefix, SparseGradient, TokenId, Trajectory, Vocab};

fn diamond() -> PathTask {
    let vocab = Vocab::with_terminator(4, 3).unwrap();
    PathTask::new(0, 3, 4, vec![(0, 1, 0), (0, 2, 1), (1, 3, 2), (2, 3, 2)], 0, 2, vocab).unwrap()
}

fn small_suite(tasks: usize) -> Vec<PathTask> {
    make_benchmark_suite(
        2,
        &SuiteParams {
            num_tasks: tasks,
            ..Default::default()
        },
    )
    .unwrap()
}

fn ctx(seed: u64) -> RlStepContext<'static> {
    RlStepContext {
        seed,
        tags: vec![0, 0],
        step_index: 0,
        ref_policy: None,
        behavior: None,
    }
}

fn short_cfg() -> SpsConfig {
    SpsConfig {
        max_iterations: 2,
        rl_steps_per_iteration: 2,
        irl_steps_per_iteration: 3,
        ..Default::default()
    }
}

/// A group whose behavior log-probs make token `t` of trajectory `i` carry ratio `ratios[i][t]`.
fn group_with_ratios(
    policy: &PolicyTable,
    seqs: &[Vec<TokenId>],
    rewards: Vec<u8>,
    ratios: &[Vec<f64>],
) -> RolloutGroup {
    let trajectories: Vec<Trajectory> = seqs.iter().map(|s| policy.score(0, s.clone()).unwrap()).collect();
    let old_logps = trajectories
        .iter()
        .zip(ratios)
        .map(|(t, r)| t.per_token_logp.iter().zip(r).map(|(l, r)| l - r.ln()).collect())
        .collect();
    RolloutGroup {
        prompt_id: 0,
        trajectories,
        rewards,
        old_logps,
    }
}

fn assert_grad_eq(a: &SparseGradient, b: &SparseGradient, prefixes: &[Prefix], vocab: usize) {
    for p in prefixes {
        for t in 0..vocab {
            assert!(
                (a.get(p, t) - b.get(p, t)).abs() < 1e-12,
                "{p:?}/{t}: {} vs {}",
                a.get(p, t),
                b.get(p, t)
            );
        }
    }
}

#[test]
fn zero_learning_rate_fills_the_pool_only() {
    let tasks = small_suite(4);
    let base = skewed_suite_policy(&tasks, 2.0, 0).unwrap();
    let mut policy = base.clone();
    let cfg = RlConfig {
        lr: 0.0,
        ..Default::default()
    };
    let (_, pool) = rl_step(&mut policy, &tasks, &cfg, &ctx(5)).unwrap();
    assert_eq!(policy, base);
    assert_eq!(pool.len(), 4 * cfg.group_size);
    for e in &pool {
        let task = tasks.iter().find(|t| t.prompt_id() == e.prompt_id).unwrap();
        assert_eq!(e.reward, task.reward(&e.trajectory.tokens));
        assert!(e.behavior_total_logp <= 0.0);
    }
}

#[test]
fn rl_step_is_deterministic() {
    let tasks = small_suite(4);
    let base = skewed_suite_policy(&tasks, 2.0, 0).unwrap();
    let run = || {
        let mut p = base.clone();
        let out = rl_step(&mut p, &tasks, &RlConfig::default(), &ctx(17)).unwrap();
        (p, out)
    };
    assert_eq!(run(), run());
}

#[test]
fn one_step_raises_rewarded_rollouts() {
    let task = diamond();
    let base = skewed_base_policy(&task, 1.0, 0).unwrap();
    let mut cfg = RlConfig::default();
    cfg.clip.beta = 0.0;
    let mut wins = 0;
    for seed in 0..20 {
        let mut policy = base.clone();
        let (rec, pool) = rl_step(&mut policy, std::slice::from_ref(&task), &cfg, &ctx(seed)).unwrap();
        assert_eq!(rec.clipped_frac, 0.0);
        let pos: Vec<_> = pool.iter().filter(|e| e.reward == 1).collect();
        if pos.is_empty() {
            continue;
        }
        let before = pos.iter().map(|e| e.behavior_total_logp).sum::<f64>() / pos.len() as f64;
        let after = pos
            .iter()
            .map(|e| policy.trajectory_log_prob(0, &e.trajectory.tokens).unwrap().1)
            .sum::<f64>()
            / pos.len() as f64;
        wins += (after > before) as usize;
    }
    assert!(wins >= 18, "{wins}/20");
}

#[test]
fn two_point_group_gradient_is_the_advantage_weighted_score() {
    let vocab = Vocab::new(3).unwrap();
    let mut policy = PolicyTable::new(vocab, 1).unwrap();
    policy.set_logits(Prefix::root(0), vec![0.3, -0.2, 0.9]).unwrap();
    let g = group_with_ratios(&policy, &[vec![0], vec![2]], vec![1, 0], &[vec![1.0], vec![1.0]]);
    let cfg = ClipConfig {
        beta: 0.0,
        ..ClipConfig::grpo()
    };
    let rep = grpo_objective(std::slice::from_ref(&g), &policy, None, &cfg).unwrap();
    assert!(rep.value.abs() < 1e-15);
    let mut want = SparseGradient::new();
    want.add_scaled(&policy.grad_log_prob(&g.trajectories[0]).unwrap(), 0.5);
    want.add_scaled(&policy.grad_log_prob(&g.trajectories[1]).unwrap(), -0.5);
    assert_grad_eq(&rep.gradient, &want, &[Prefix::root(0)], 3);
}

#[test]
fn ratio_past_the_grpo_clip_drops_the_token() {
    let vocab = Vocab::new(3).unwrap();
    let mut policy = PolicyTable::new(vocab, 1).unwrap();
    policy.set_logits(Prefix::root(0), vec![0.3, -0.2, 0.9]).unwrap();
    let eps = ClipConfig::grpo().eps_low;
    let g = group_with_ratios(
        &policy,
        &[vec![0], vec![2]],
        vec![1, 0],
        &[vec![1.0 + 2.0 * eps], vec![1.0]],
    );
    let cfg = ClipConfig {
        beta: 0.0,
        ..ClipConfig::grpo()
    };
    let rep = grpo_objective(std::slice::from_ref(&g), &policy, None, &cfg).unwrap();
    assert_eq!(rep.token_clipped, vec![true, false]);
    assert_eq!(rep.clipped_token_fraction, 0.5);
    // only the unclipped negative token moves the policy
    let mut want = SparseGradient::new();
    want.add_scaled(&policy.grad_log_prob(&g.trajectories[1]).unwrap(), -0.5);
    assert_grad_eq(&rep.gradient, &want, &[Prefix::root(0)], 3);
    assert!((rep.value - 0.5 * ((1.0 + eps) - 1.0)).abs() < 1e-12);
}

#[test]
fn dapo_matches_grpo_on_single_token_responses() {
    let vocab = Vocab::new(4).unwrap();
    let mut policy = PolicyTable::new(vocab, 1).unwrap();
    policy.set_logits(Prefix::root(0), vec![0.1, 0.5, -0.4, 0.2]).unwrap();
    let ratios = [vec![1.05], vec![0.9], vec![1.1], vec![0.97]];
    let g = group_with_ratios(
        &policy,
        &[vec![0], vec![1], vec![2], vec![3]],
        vec![1, 0, 0, 1],
        &ratios,
    );
    let grpo = grpo_objective(
        std::slice::from_ref(&g),
        &policy,
        None,
        &ClipConfig {
            beta: 0.0,
            ..ClipConfig::grpo()
        },
    )
    .unwrap();
    let dapo = dapo_objective(std::slice::from_ref(&g), &policy, &ClipConfig::dapo()).unwrap();
    assert!((grpo.value - dapo.value).abs() < 1e-12);
    assert_grad_eq(&grpo.gradient, &dapo.gradient, &[Prefix::root(0)], 4);
}

#[test]
fn dapo_weights_tokens_not_sequences() {
    let vocab = Vocab::with_terminator(3, 2).unwrap();
    let mut rng = squeezelab::rng::stream(8, &[]);
    let policy = common::random_policy(&mut rng, vocab, 3, 1, 1.0);
    let ratios = [vec![1.1], vec![0.95, 1.02, 1.05]];
    let g = group_with_ratios(&policy, &[vec![2], vec![0, 1, 2]], vec![1, 0], &ratios);
    let groups = [g];
    let dapo = dapo_objective(&groups, &policy, &ClipConfig::dapo()).unwrap();
    let grpo = grpo_objective(
        &groups,
        &policy,
        None,
        &ClipConfig {
            beta: 0.0,
            ..ClipConfig::grpo()
        },
    )
    .unwrap();
    assert!((dapo.value - common::dapo_value(&groups, &policy, 0.2, 0.28)).abs() < 1e-12);
    assert!((grpo.value - common::grpo_value(&groups, &policy, None, 0.2, 0.0)).abs() < 1e-12);
    // (1.1 - 0.95 - 1.02 - 1.05) / 4 against (1.1 - (0.95 + 1.02 + 1.05) / 3) / 2
    assert!((dapo.value - (1.1 - 3.02) / 4.0).abs() < 1e-12);
    assert!((grpo.value - (1.1 - 3.02 / 3.0) / 2.0).abs() < 1e-12);
}

#[test]
fn dapo_upper_clip_sits_at_one_point_two_eight() {
    let vocab = Vocab::new(3).unwrap();
    let policy = PolicyTable::new(vocab, 1).unwrap();
    for (r, clipped) in [(1.3, true), (1.28 + 1e-6, true), (1.27, false)] {
        let g = group_with_ratios(&policy, &[vec![0], vec![1]], vec![1, 0], &[vec![r], vec![1.0]]);
        let rep = dapo_objective(&[g], &policy, &ClipConfig::dapo()).unwrap();
        assert_eq!(rep.token_clipped[0], clipped, "ratio {r}");
    }
}

#[test]
fn gspo_clips_whole_sequences() {
    let vocab = Vocab::with_terminator(3, 2).unwrap();
    let policy = PolicyTable::new(vocab, 3).unwrap();
    let s = 1.0 + 1e-3;
    let g = group_with_ratios(
        &policy,
        &[vec![0, 1, 2], vec![1, 2]],
        vec![1, 0],
        &[vec![s; 3], vec![1.0, 1.0]],
    );
    let rep = gspo_objective(std::slice::from_ref(&g), &policy, &ClipConfig::gspo()).unwrap();
    assert_eq!(rep.token_clipped, vec![true, true, true, false, false]);
    let mut want = SparseGradient::new();
    // A = -1 on the second response, spread over its two tokens
    want.add_scaled(&policy.grad_log_prob(&g.trajectories[1]).unwrap(), -0.5 / 2.0);
    let prefixes = common::all_prefixes(vocab, 3, 0);
    assert_grad_eq(&rep.gradient, &want, &prefixes, 3);
}

#[test]
fn contrastive_value_rises_with_a_positive_likelihood() {
    let vocab = Vocab::with_terminator(3, 2).unwrap();
    let mut rng = squeezelab::rng::stream(3, &[]);
    let policy = common::random_policy(&mut rng, vocab, 3, 1, 1.0);
    let seqs = [vec![0, 2], vec![1, 0, 2], vec![2], vec![0, 0, 1]];
    let trajs: Vec<_> = seqs.iter().map(|s| policy.score(0, s.clone()).unwrap()).collect();
    let g = RolloutGroup::on_policy(0, trajs, vec![1, 0, 0, 1]);
    let before = contrastive_decomposition(&g, &policy).unwrap();
    let mut raised = policy.clone();
    raised.logits_mut(&Prefix::new(0, vec![0]))[2] += 0.5;
    let after = contrastive_decomposition(&g, &raised).unwrap();
    assert!(after.value > before.value);
    assert_eq!(after.neg_expectation, before.neg_expectation);
}

#[test]
fn zero_iterations_return_the_base() {
    let tasks = small_suite(3);
    let base = skewed_suite_policy(&tasks, 4.0, 0).unwrap();
    let cfg = SpsConfig {
        max_iterations: 0,
        ..Default::default()
    };
    let (p, trace) = sps_loop(&base, &tasks, &cfg, 1).unwrap();
    assert_eq!(p, base);
    assert!(trace.records.is_empty() && trace.rl_steps.is_empty());
}

#[test]
fn phases_alternate_within_each_iteration() {
    let tasks = small_suite(3);
    let base = skewed_suite_policy(&tasks, 4.0, 0).unwrap();
    let cfg = short_cfg();
    let (_, trace) = sps_loop(&base, &tasks, &cfg, 1).unwrap();
    let per_iter = cfg.rl_steps_per_iteration + cfg.irl_steps_per_iteration;
    assert_eq!(trace.records.len(), cfg.max_iterations * per_iter);
    for (i, r) in trace.records.iter().enumerate() {
        let pos = i % per_iter;
        assert_eq!(r.iter, i / per_iter);
        if pos < cfg.rl_steps_per_iteration {
            assert_eq!((r.phase, r.step), (Phase::Rl, pos));
            assert!(r.irl_loss.is_none());
        } else {
            assert_eq!((r.phase, r.step), (Phase::Irl, pos - cfg.rl_steps_per_iteration));
            assert!(r.irl_loss.is_some());
        }
    }
}

#[test]
fn no_irl_steps_reproduces_the_baseline_bit_for_bit() {
    let tasks = small_suite(3);
    let base = skewed_suite_policy(&tasks, 4.0, 0).unwrap();
    let cfg = SpsConfig {
        irl_steps_per_iteration: 0,
        ..short_cfg()
    };
    let (ps, ts) = sps_loop(&base, &tasks, &cfg, 9).unwrap();
    let (pg, tg) = grpo_baseline_loop(&base, &tasks, &cfg, 9).unwrap();
    assert_eq!(ps, pg);
    assert_eq!(ts, tg);
}

#[test]
fn baseline_shares_the_first_rl_phase() {
    let tasks = small_suite(3);
    let base = skewed_suite_policy(&tasks, 4.0, 0).unwrap();
    let cfg = short_cfg();
    let (_, ts) = sps_loop(&base, &tasks, &cfg, 4).unwrap();
    let (_, tg) = grpo_baseline_loop(&base, &tasks, &cfg, 4).unwrap();
    let n = cfg.rl_steps_per_iteration;
    assert_eq!(ts.records[..n], tg.records[..n]);
    assert_eq!(ts.rl_steps[..n], tg.rl_steps[..n]);
    assert!(tg.records.iter().all(|r| r.phase == Phase::Rl));
    assert_eq!(tg.records.len(), cfg.max_iterations * n);
}

fn demos_of(policy: &PolicyTable, pid: u32, seqs: &[Vec<TokenId>]) -> DemoSet {
    DemoSet {
        demos: seqs
            .iter()
            .map(|s| {
                let t = policy.score(pid, s.clone()).unwrap();
                Demo {
                    prompt_id: pid,
                    meta: DemoMeta {
                        normalized_logp: t.normalized_logp(),
                        quantile_rank: 0.0,
                        source: Source::LowLikelihood,
                    },
                    trajectory: t,
                    reward: 1,
                }
            })
            .collect(),
    }
}

#[test]
fn greedy_demos_move_the_loss_less_than_rare_ones() {
    let task = &small_suite(1)[0];
    let policy = skewed_base_policy(task, 4.0, 0).unwrap();
    let greedy = policy.greedy_decode(task.prompt_id()).tokens;
    let mut correct = task.enumerate_correct().unwrap();
    correct.sort_by(|a, b| {
        let la = policy.trajectory_log_prob(task.prompt_id(), a).unwrap().1;
        let lb = policy.trajectory_log_prob(task.prompt_id(), b).unwrap().1;
        la.total_cmp(&lb)
    });
    let cfg = SpsConfig::default();
    let drop = |demos: &DemoSet| {
        let mut p = policy.clone();
        let before = irl_loss(&p, &demos.demos).unwrap().0;
        irl_step(&mut p, demos, &cfg).unwrap();
        before - irl_loss(&p, &demos.demos).unwrap().0
    };
    let common_drop = drop(&demos_of(&policy, task.prompt_id(), &vec![greedy; 3]));
    let rare_drop = drop(&demos_of(&policy, task.prompt_id(), &correct[..3]));
    assert!(common_drop >= 0.0);
    assert!(common_drop < rare_drop, "{common_drop} vs {rare_drop}");
}

#[test]
fn irl_never_lowers_mean_demo_likelihood() {
    let vocab = Vocab::with_terminator(3, 2).unwrap();
    let mut rng = squeezelab::rng::stream(21, &[]);
    for case in 0..30 {
        let policy = common::random_policy(&mut rng, vocab, 3, 1, 2.5);
        let seqs: Vec<_> = (0..4)
            .map(|_| policy.sample_trajectory(0, 1.0, &mut rng).unwrap().tokens)
            .collect();
        let demos = demos_of(&policy, 0, &seqs);
        let mean = |p: &PolicyTable| -irl_loss(p, &demos.demos).unwrap().0;
        let mut p = policy.clone();
        let rep = irl_step(
            &mut p,
            &demos,
            &SpsConfig {
                irl_lr: 0.5,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(mean(&p) >= mean(&policy), "case {case}");
        assert!(rep.losses.windows(2).all(|w| w[1] <= w[0]));
    }
}

#[test]
fn sps_keeps_coverage_where_grpo_collapses() {
    // aggressive learning rates make GRPO squeeze solutions below the floor
    let mut cfg = SpsConfig::default();
    cfg.rl.lr = 0.5;
    cfg.irl_lr = 0.05;
    let mut better = 0;
    for seed in 0..4u64 {
        let tasks = make_benchmark_suite(seed, &SuiteParams::default()).unwrap();
        let base = skewed_suite_policy(&tasks, 4.0, seed).unwrap();
        let (pg, _) = grpo_baseline_loop(&base, &tasks, &cfg, seed).unwrap();
        let (ps, _) = sps_loop(&base, &tasks, &cfg, seed).unwrap();
        let covered = |p: &PolicyTable| -> usize {
            tasks
                .iter()
                .map(|t| support_coverage(p, t, 1e-4).unwrap().covered)
                .sum()
        };
        let (cg, cs) = (covered(&pg), covered(&ps));
        assert!(cs >= cg, "seed {seed}: {cs} < {cg}");
        better += (cs > cg) as usize;
        let drift = |p: &PolicyTable| greedy_logprob_report(p, &base, &tasks).mean_drift;
        assert!(drift(&ps) < drift(&pg), "seed {seed}");
    }
    assert!(better >= 3, "{better}/4");
}
