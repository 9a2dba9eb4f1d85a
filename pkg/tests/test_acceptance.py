"""The release gate: ten checks, one test per criterion.

Everything expensive (pretraining, the five default training runs, the two
ablation families, the latent grid search) is built once at module scope
and shared; wall-clock budgets are asserted inside the tests that own them,
counting the fixture time they depend on.
"""

import itertools
import json
import math
import os
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats as sps

from georeward import (
    CorrespondenceSet,
    Intrinsics,
    PolicySnapshot,
    PoseSE3,
    TrainerConfig,
    eight_point,
    fm_pretrain,
    fundamental_from_pose,
    geo_quality,
    group_advantages,
    init_policy,
    latent_reward,
    normalized_epe,
    pair_reward,
    params_vector,
    project,
    relative_depth_error,
    render_pair,
    sample_group,
    sampson_error,
    sde_step,
    surrogate_loss,
    time_grid,
    toy_scene,
    train,
    velocity,
    velocity_grad,
    with_params,
    PerturbationSpec,
    inject_perturbation,
)
from georeward.cli import main as cli_main

_ELAPSED = {}


def _timed(key):
    class _Timer:
        def __enter__(self):
            self.t0 = time.perf_counter()
            return self

        def __exit__(self, *exc):
            _ELAPSED[key] = time.perf_counter() - self.t0

    return _Timer()


@pytest.fixture(scope="module")
def pretrained_policy():
    with _timed("pretrain"):
        rng = np.random.default_rng(1)
        pol = init_policy(4, 32, rng)
        means = np.array([-2.5, 1.5])

        def sampler(r, n):
            idx = r.choice(2, size=(n, 4))
            return means[idx] + 0.7 * r.standard_normal((n, 4))

        pre, _ = fm_pretrain(pol, sampler, 1200, 0.01, rng, batch_size=128)
    return pre


@pytest.fixture(scope="module")
def default_runs(pretrained_policy):
    with _timed("default_runs"):
        runs = [
            train(TrainerConfig(iterations=200, seed=s), pretrained_policy, toy_scene())
            for s in range(5)
        ]
    return runs


@pytest.fixture(scope="module")
def ablation_runs(pretrained_policy):
    with _timed("ablation_runs"):
        nosync = [
            train(
                TrainerConfig(iterations=200, seed=s, sync_noise=False),
                pretrained_policy,
                toy_scene(),
            )
            for s in range(5)
        ]
        full_window = [
            train(
                TrainerConfig(iterations=200, seed=s, grad_window=10),
                pretrained_policy,
                toy_scene(),
            )
            for s in range(5)
        ]
    return nosync, full_window


@pytest.fixture(scope="module")
def grid_optimum():
    with _timed("grid"):
        best = -math.inf
        for combo in itertools.product((-4.0, -2.0, 0.0, 2.0, 4.0), repeat=4):
            best = max(best, latent_reward(np.array(combo), toy_scene(), seed=0))
    return best


def _last50(run):
    return float(np.mean([m["reward_mean"] for m in run.metrics[-50:]]))


# ---------------------------------------------------------------------------

def test_criterion_01_clean_scene_scores_at_the_optimum(translating_scene, score_rendered):
    t0 = time.perf_counter()
    pair = render_pair(translating_scene, 0)
    score = score_rendered(pair)
    assert abs(score.r_pair) < 1e-6
    assert time.perf_counter() - t0 < 5.0


def test_criterion_02_worked_examples():
    tol = 1e-9
    assert normalized_epe([[6.0, 0.0]], [[4.0, 0.0]], 1.0)[0] == pytest.approx(2 / 11, abs=tol)
    assert normalized_epe([[3.0, 4.0]], [[0.0, 0.0]], 1.0)[0] == pytest.approx(5 / 6, abs=tol)
    depth = relative_depth_error([2.2], [2.0], 1.0, [True])[0]
    assert depth == pytest.approx(0.2 / 3.0, abs=tol)
    assert geo_quality(2 / 11, 0.2 / 3.0) == pytest.approx((9 / 11) * (14 / 15), abs=tol)
    assert pair_reward(-0.2, -0.4, 0.5) == pytest.approx(-0.3, abs=tol)

    adv = group_advantages(np.array([-0.1, -0.2, -0.3, -0.4]))
    want = np.array([3.0, 1.0, -1.0, -3.0]) / math.sqrt(5.0)
    np.testing.assert_allclose(adv, want, atol=tol)

    x_next, _, _ = sde_step(
        lambda x, t: np.full_like(x, -2.0), np.array([1.0]), 0.5, 0.1, 1.0, np.array([0.0])
    )
    assert x_next[0] == pytest.approx(1.2, abs=tol)

    f_skew = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
    corr = CorrespondenceSet(np.zeros((2, 2)), np.array([[0.0, 1.0], [5.0, 0.0]]))
    np.testing.assert_allclose(sampson_error(f_skew, corr).errors, [0.5, 0.0], atol=tol)


def test_criterion_03_reward_falls_monotonically_with_wobble(
    translating_scene, two_plane_scene, inclined_scene, score_rendered
):
    t0 = time.perf_counter()
    wobbles = (0.0, 0.25, 0.5, 1.0, 2.0)
    outcomes = []
    for scene in (translating_scene, two_plane_scene, inclined_scene):
        pair = render_pair(scene, 0)
        for seed in range(3):
            rewards = []
            for amp in wobbles:
                p = PerturbationSpec(wobble_px=amp, corrupt_flow=True)
                rewards.append(score_rendered(inject_perturbation(pair, p, seed)).r_pair)
            outcomes.append(all(b < a for a, b in zip(rewards, rewards[1:])))
    assert sum(outcomes) == 9
    assert time.perf_counter() - t0 < 60.0


def test_criterion_04_velocity_gradient_matches_finite_differences():
    t0 = time.perf_counter()
    rng = np.random.default_rng(44)
    pol = init_policy(3, 8, rng)
    worst = 0.0
    for _ in range(100):
        x = rng.standard_normal(3)
        t = float(rng.uniform(0.05, 0.95))
        up = rng.standard_normal(3)
        grad = velocity_grad(pol, x[None], np.array([t]), up[None])
        theta = params_vector(pol)
        fd = np.empty_like(theta)
        h = 1e-6
        for i in range(theta.size):
            plus, minus = theta.copy(), theta.copy()
            plus[i] += h
            minus[i] -= h
            fd[i] = (
                float(up @ velocity(with_params(pol, plus), x, t))
                - float(up @ velocity(with_params(pol, minus), x, t))
            ) / (2.0 * h)
        worst = max(worst, float(np.abs(grad - fd).max() / (1.0 + np.abs(grad).max())))
    assert worst < 1e-7
    assert time.perf_counter() - t0 < 10.0


def test_criterion_05_sde_and_ode_share_the_terminal_marginal(gauss_velocity):
    t0 = time.perf_counter()
    n, steps, a = 20000, 200, 0.3
    ts = time_grid(steps)
    rng = np.random.default_rng(7)

    x_sde = rng.standard_normal(n)
    for k in range(steps):
        t, dt = float(ts[k]), float(ts[k] - ts[k + 1])
        z = rng.standard_normal(n)
        x_sde, _, _ = sde_step(gauss_velocity, x_sde, t, dt, a, z)

    x_ode = rng.standard_normal(n)
    for k in range(steps):
        t, dt = float(ts[k]), float(ts[k] - ts[k + 1])
        x_ode, _, _ = sde_step(gauss_velocity, x_ode, t, dt, 0.0, 0.0)

    ks = sps.ks_2samp(x_sde, x_ode).statistic
    assert ks < 0.02
    assert time.perf_counter() - t0 < 30.0


def test_criterion_06_training_closes_the_reward_gap(default_runs, grid_optimum):
    t0 = time.perf_counter()
    firsts = [float(np.mean([m["reward_mean"] for m in r.metrics[:50]])) for r in default_runs]
    lasts = [_last50(r) for r in default_runs]
    baseline = float(np.mean([r.metrics[0]["reward_mean"] for r in default_runs]))
    final = float(np.mean(lasts))
    assert grid_optimum > baseline
    closure = (final - baseline) / (grid_optimum - baseline)
    assert closure >= 0.5

    test = sps.ttest_rel(lasts, firsts, alternative="greater")
    assert test.pvalue < 0.01

    spent = (
        time.perf_counter()
        - t0
        + _ELAPSED["pretrain"]
        + _ELAPSED["default_runs"]
        + _ELAPSED["grid"]
    )
    assert spent < 900.0


def test_criterion_07_ablations_do_not_beat_the_default(default_runs, ablation_runs):
    defaults = [_last50(r) for r in default_runs]
    nosync, full_window = ablation_runs
    sync_votes = sum(_last50(a) <= d for a, d in zip(nosync, defaults))
    window_votes = sum(_last50(a) <= d for a, d in zip(full_window, defaults))
    assert sync_votes >= 4
    assert window_votes >= 4


def test_criterion_08_eight_point_recovery_and_sampson_floor():
    t0 = time.perf_counter()
    k = Intrinsics(fx=100.0, fy=100.0, cx=32.0, cy=24.0)
    rng = np.random.default_rng(8)
    recovered = 0
    for _ in range(20):
        # small-angle rotations keep every sample point in front of both
        # cameras; translations are resampled past a minimum parallax
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        angle = rng.uniform(0.02, 0.2)
        skew = np.array([
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ])
        rot = np.eye(3) + np.sin(angle) * skew + (1.0 - np.cos(angle)) * (skew @ skew)
        while True:
            t_vec = 0.3 * rng.standard_normal(3)
            if np.linalg.norm(t_vec) >= 0.05:
                break
        transform = PoseSE3(rot, t_vec)
        pts = np.stack(
            [
                rng.uniform(-0.8, 0.8, 40),
                rng.uniform(-0.6, 0.6, 40),
                rng.uniform(2.0, 4.0, 40),
            ],
            axis=1,
        )
        moved = pts @ transform.r.T + transform.t
        corr = CorrespondenceSet(project(pts, k), project(moved, k))
        f_hat = eight_point(corr)
        f_true = fundamental_from_pose(k, k, transform)
        assert sampson_error(f_hat, corr).mean < 1e-10
        if abs(float((f_hat * f_true).sum())) > 0.9999:
            recovered += 1
    assert recovered == 20
    assert time.perf_counter() - t0 < 10.0


def test_criterion_09_gradient_ignores_steps_past_the_window(pretrained_policy):
    cfg = TrainerConfig(iterations=1, seed=0)
    snap = PolicySnapshot.from_policy(pretrained_policy)
    group = sample_group(snap, toy_scene(), cfg, np.random.default_rng([0, 0]))
    pol = snap.policy_old()
    loss_a, grad_a, _ = surrogate_loss(pol, pol, group, cfg)

    def zeroed(step):
        return replace(
            step,
            x_t=np.zeros_like(step.x_t),
            mean=np.zeros_like(step.mean),
            z=np.zeros_like(step.z),
            x_next=np.zeros_like(step.x_next),
            logp=0.0,
        )

    tampered = type(group)(
        eps_init=group.eps_init,
        trajectories=[
            traj[: cfg.grad_window] + [zeroed(s) for s in traj[cfg.grad_window:]]
            for traj in group.trajectories
        ],
        x0s=np.zeros_like(group.x0s),
        rewards=group.rewards,
        advantages=group.advantages,
    )
    loss_b, grad_b, _ = surrogate_loss(pol, pol, tampered, cfg)
    assert loss_a == loss_b
    np.testing.assert_array_equal(grad_a, grad_b)


def test_criterion_10_cli_reports_are_thread_count_invariant(tmp_path, monkeypatch):
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps({
        "geometry": "two_plane",
        "camera_path": {"kind": "linear", "velocity": [0.1, 0.0, 0.0], "frames": 3},
    }))
    grpo_path = tmp_path / "grpo.json"
    grpo_path.write_text(json.dumps({
        "trainer": {"iterations": 10, "seed": 0},
        "pretrain": {"iterations": 100, "hidden": 8},
    }))

    roots = {}
    for threads in ("1", "8"):
        monkeypatch.setenv("GEOFLOW_THREADS", threads)
        root = tmp_path / f"threads{threads}"
        root.mkdir()
        assert cli_main(["synth", "--spec", str(spec_path), "--out", str(root / "dump")]) == 0
        # both scoring runs read the first dump so their inputs match
        score_input = str(roots.get("1", root) / "dump")
        assert cli_main(["score", "--input", score_input, "--out", str(root / "score.json")]) == 0
        assert cli_main(["grpo", "--config", str(grpo_path), "--out", str(root / "grpo")]) == 0
        roots[threads] = root

    a, b = roots["1"], roots["8"]

    def same_bytes(rel):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), f"{rel} differs"

    for sub in ("frames", "depth", "flow_fwd", "flow_bwd", "confidence", "dynamic"):
        for name in sorted(os.listdir(a / "dump" / sub)):
            same_bytes(os.path.join("dump", sub, name))
    same_bytes("dump/cameras.json")
    same_bytes("score.json")
    same_bytes("grpo/metrics.jsonl")
    same_bytes("grpo/config.json")
    for ckpt in ("checkpoint", "checkpoint_ema"):
        for name in sorted(os.listdir(a / "grpo" / ckpt)):
            same_bytes(os.path.join("grpo", ckpt, name))

    for rel in ("dump/manifest.json", "score.json.manifest.json", "grpo/manifest.json"):
        docs = []
        for root in (a, b):
            with open(root / rel) as f:
                doc = json.load(f)
            doc.pop("duration_s")
            doc.pop("outputs")
            docs.append(doc)
        assert docs[0] == docs[1], f"{rel} differs beyond duration/outputs"
