"""End-to-end acceptance checks.

Each test prints one ``criterion N: PASS|FAIL`` line with the measured
quantities and runtime. Runtimes include any shared model training the
criterion depends on.
"""

import json
import time
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from conftest import FIXTURE_SEED, record_criterion
from lhuc import io
from lhuc.adapter import AdaptConfig, adapt, evaluate, factorised_experiment, one_shot_apply, two_pass_adapt
from lhuc.config import ExperimentConfig, load_config
from lhuc.experiments import bump_sat_comparison, per_speaker_two_pass, run_experiment, spread_network
from lhuc.gradcheck import gradcheck, random_case
from lhuc.model import LhucTransform, NetworkParams, TransformBank, backward, forward
from lhuc.synth import BumpSpec, ClusterTaskSpec, FrameDataset, gen_bump, gen_session
from lhuc.tensor import softmax_xent
from lhuc.trainer import SatConfig, assign_routes, train_si

FIXTURES = Path(__file__).parent / "fixtures"


class Outcome:
    def __init__(self):
        self.detail = ""
        self.extra_seconds = 0.0


@contextmanager
def criterion(request, number: int, title: str, budget: float):
    """Time the body, check the runtime budget and report one line."""
    out = Outcome()
    t0 = time.perf_counter()
    ok = False
    try:
        yield out
        ok = True
    finally:
        elapsed = time.perf_counter() - t0 + out.extra_seconds
        in_budget = elapsed <= budget
        status = "PASS" if ok and in_budget else "FAIL"
        note = "" if in_budget else " (over budget)"
        record_criterion(request.config, number,
                         f"criterion {number:>2}: {status}  {title}  [{out.detail}]  {elapsed:.1f}s/{budget:.0f}s{note}")
    assert in_budget, f"criterion {number} took {elapsed:.1f}s, budget {budget:.0f}s"


def test_c01_gradient_soundness(request):
    with criterion(request, 1, "analytic vs finite-difference gradients", 30) as out:
        cases = [random_case(i) for i in range(25)]
        assert {c.kind for c in cases} == {"identity", "exp", "sigmoid2", "relu"}
        assert all(len(c.params.hidden_sizes) <= 3 and max(c.params.hidden_sizes) <= 16 for c in cases)
        assert any(len(np.unique(c.routes)) > 1 for c in cases)
        rep = gradcheck(25, seed=0)
        out.detail = f"max rel err {rep.overall:.2e} over {rep.n_cases} cases"
        assert rep.overall <= 1e-5


def test_c02_identity_invariant(request, rng):
    with criterion(request, 2, "r=0 forward equals SI forward bit for bit", 1) as out:
        params = NetworkParams.initialize([12, 16, 16, 5], seed=3)
        X = rng.normal(scale=3.0, size=(100, 12))
        routes = rng.integers(0, 3, size=100)
        base = forward(params, None, None, X).output
        for kind in ("exp", "sigmoid2"):
            bank = TransformBank.for_clusters(params, [0, 1, 2], kind)
            assert all(np.all(v == 0.0) for t in bank.transforms.values() for v in t.r)
            got = forward(params, bank, routes, X).output
            assert got.tobytes() == base.tobytes(), kind
        out.detail = "exp, sigmoid2 on 100 inputs"


def _routing_dataset(rng, n=100_000):
    seg_len = rng.integers(20, 200, size=n // 20)
    segments = np.repeat(np.arange(1, len(seg_len) + 1), seg_len)[:n]
    speakers = 1 + (segments - 1) // 25
    return FrameDataset(np.zeros((n, 1)), np.zeros(n, dtype=np.int64), speakers, segments, None, 2)


def test_c03_routing_statistics(request, rng):
    with criterion(request, 3, "SI routing fraction", 1) as out:
        data = _routing_dataset(rng)
        n = len(data)
        frame = assign_routes(data, SatConfig(gamma=0.5, granularity="frame", seed=0)).si_fraction
        assert abs(frame - 0.5) <= 0.0063
        parts = [f"frame {frame:.4f}"]
        for gran, ids in (("segment", data.segments), ("speaker", data.speakers)):
            ra = assign_routes(data, SatConfig(gamma=0.5, granularity=gran, seed=0))
            unit_mass = np.bincount(ids).max() / n
            assert abs(ra.si_fraction - 0.5) <= unit_mass, gran
            parts.append(f"{gran} {ra.si_fraction:.4f} (unit {unit_mass:.4f})")
        out.detail = ", ".join(parts)


def test_c04_gradient_additivity(request):
    with criterion(request, 4, "mixed-batch r gradient equals per-cluster sum", 5) as out:
        worst = 0.0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            kind = ("identity", "exp", "sigmoid2", "relu")[seed % 4]
            sizes = [int(rng.integers(2, 9)), *rng.integers(2, 17, size=int(rng.integers(1, 4))), 4]
            params = NetworkParams.initialize(sizes, seed=seed)
            bank = TransformBank.for_clusters(params, [0, 1, 2, 3], kind)
            for t in bank.transforms.values():
                t.r = [v + rng.normal(scale=0.5, size=v.shape) for v in t.r]
            X = rng.normal(size=(12, sizes[0]))
            routes = rng.permutation(np.repeat([1, 2, 3], 4))
            y = rng.integers(0, 4, size=12)
            _, g_out = softmax_xent(forward(params, bank, routes, X).output, y)
            mixed = backward(forward(params, bank, routes, X), params, g_out, bank)
            parts = {c: backward(forward(params, bank, routes[routes == c], X[routes == c]), params,
                                 g_out[routes == c], bank) for c in (1, 2, 3)}
            for c in (1, 2, 3):
                split = [sum(parts[k].r[c][l] for k in parts) for l in range(len(params.hidden_sizes))]
                for a, b in zip(mixed.r[c], split):
                    worst = max(worst, float(np.max(np.abs(a - b))))
            for l in range(len(params.weights)):
                worst = max(worst, float(np.max(np.abs(mixed.weights[l] - sum(p.weights[l] for p in parts.values())))))
        out.detail = f"max abs diff {worst:.1e} over 20 cases"
        assert worst <= 1e-12


def test_c05_bump_adaptation(request):
    ref = json.loads((FIXTURES / "bump_reference.json").read_text())
    with criterion(request, 5, "bump net adapted from f1 to f2", 30) as out:
        cfg = ExperimentConfig(experiment="bump_demo")
        spec = BumpSpec()
        f1, f2 = gen_bump(spec)
        params, _ = train_si(f1, spread_network(4, spec.x_range, 0), replace(cfg.bump_train, seed=0))
        acfg = replace(cfg.bump_adapt, lr=0.8, layers_enabled=None, supervised=True)
        t = adapt(params, f2, f2.labels, acfg)
        before = evaluate(params, None, f2).mean_loss
        after = evaluate(params, t, f2).mean_loss
        out.detail = (f"unadapted {before:.4f}, adapted {after:.5f}, "
                      f"eps_accept {ref['eps_accept']:.4f}, 0.25x own {0.25 * before:.4f}")
        assert after <= ref["eps_accept"]
        assert after <= 0.25 * before


def test_c06_sat_basis_superiority(request):
    with criterion(request, 6, "SAT-LHUC beats SI+LHUC on the bump mixture", 60) as out:
        cfg = ExperimentConfig(experiment="bump_demo")
        acfg = replace(cfg.bump_adapt, supervised=True)
        wins, rows = 0, []
        for seed in range(5):
            si_mse, sat_mse, *_ = bump_sat_comparison(cfg.mixture, seed, 4, cfg.bump_train, acfg, 0.5)
            wins += sat_mse < si_mse
            rows.append(f"{si_mse:.3f}/{sat_mse:.3f}")
        out.detail = f"SAT wins {wins}/5 (SI/SAT mse {', '.join(rows)})"
        assert wins >= 4


def test_c07_adaptation_helps_most_speakers(request, task, si_model):
    spec, _, test = task
    with criterion(request, 7, "two-pass LHUC helps held-out speakers", 120) as out:
        out.extra_seconds = si_model.seconds
        rows = per_speaker_two_pass(si_model.params, None, test, spec.test_speakers, AdaptConfig())
        helped = sum(a <= b for _, b, a in rows)
        out.detail = (f"{helped}/{len(rows)} improved, mean FER {np.mean([r[1] for r in rows]):.4f} -> "
                      f"{np.mean([r[2] for r in rows]):.4f}")
        assert len(rows) == 20
        assert helped >= 17


def test_c08_sat_at_least_lhuc(request, task, si_model, sat_model):
    spec, _, test = task
    with criterion(request, 8, "SAT-LHUC vs LHUC and SI-mode parity", 180) as out:
        out.extra_seconds = si_model.seconds + sat_model.seconds
        cfg = AdaptConfig()
        si_fer = evaluate(si_model.params, None, test).frame_error_rate
        sat_si_fer = evaluate(sat_model.params, sat_model.bank, test).frame_error_rate
        lhuc = np.mean([r[2] for r in per_speaker_two_pass(si_model.params, None, test, spec.test_speakers, cfg)])
        sat = np.mean([r[2] for r in per_speaker_two_pass(sat_model.params, sat_model.bank, test,
                                                          spec.test_speakers, cfg)])
        rel = abs(sat_si_fer - si_fer) / si_fer
        out.detail = (f"adapted SAT {sat:.4f} vs LHUC {lhuc:.4f}; SI-mode {sat_si_fer:.4f} vs SI {si_fer:.4f} "
                      f"({100 * rel:.2f}% rel)")
        assert sat <= lhuc
        assert rel <= 0.02


def test_c09_factorisation_ordering(request, task, si_model):
    _, _, test = task
    with criterion(request, 9, "joint <= interpolated <= min(S, E) <= unadapted", 180) as out:
        out.extra_seconds = si_model.seconds
        rep = factorised_experiment(si_model.params, test, (0.5, 0.7), AdaptConfig())
        fer = {k: getattr(rep, k).frame_error_rate for k in ("unadapted", "speaker", "environment", "joint")}
        interp = {a: m.frame_error_rate for a, m in rep.interpolated.items()}
        out.detail = ", ".join(f"{k} {v:.4f}" for k, v in fer.items()) + ", " + ", ".join(
            f"alpha {a} {v:.4f}" for a, v in interp.items())
        assert set(interp) == {0.5, 0.7}
        assert fer["joint"] <= interp[0.7] <= min(fer["speaker"], fer["environment"]) <= fer["unadapted"]


def test_c10_one_shot_stability(request, task, si_model):
    spec, _, test = task
    with criterion(request, 10, "one-shot reuse vs two-pass on a new session", 120) as out:
        out.extra_seconds = si_model.seconds
        speakers = spec.test_speakers[:10]
        session_b = gen_session(spec, 1, speakers)
        cfg, diffs = AdaptConfig(), []
        for s in speakers:
            t_a, _ = two_pass_adapt(si_model.params, None, test.where(speaker=s), cfg)
            b = session_b.where(speaker=s)
            one = one_shot_apply(si_model.params, t_a, b).frame_error_rate
            two = two_pass_adapt(si_model.params, None, b, cfg)[1].frame_error_rate
            diffs.append(abs(one - two))
        out.detail = f"mean |diff| {np.mean(diffs):.4f} over {len(diffs)} speakers"
        assert np.mean(diffs) <= 0.02


def test_c11_target_quality_robustness(request, task, si_model):
    spec, _, test = task
    with criterion(request, 11, "adapted FER vs pseudo-label corruption", 180) as out:
        out.extra_seconds = si_model.seconds
        cfg = AdaptConfig()
        fer = {}
        for rate in (0.0, 0.1, 0.3):
            rows = per_speaker_two_pass(si_model.params, None, test, spec.test_speakers, cfg, label_corruption=rate)
            fer[rate] = float(np.mean([r[2] for r in rows]))
        si = float(np.mean([r[1] for r in rows]))
        gain = si - fer[0.0]
        out.detail = f"SI {si:.4f}; " + ", ".join(f"rate {k}: {v:.4f}" for k, v in fer.items())
        assert fer[0.0] <= fer[0.1] <= fer[0.3], "mean adapted FER decreases with corruption"
        assert fer[0.1] - fer[0.0] <= 0.5 * gain


def _small_task():
    return ClusterTaskSpec(n_speakers=8, n_test_speakers=4, frames_per_speaker_per_env=60)


def test_c12_determinism_and_persistence(request, tmp_path, rng):
    with criterion(request, 12, "re-runs byte-identical, checkpoints bit-exact", 30) as out:
        configs = [
            ExperimentConfig(experiment="two_pass", seed=FIXTURE_SEED, task=_small_task()),
            ExperimentConfig(experiment="train_sat", seed=FIXTURE_SEED, task=_small_task()),
            ExperimentConfig(experiment="bump_demo", options=replace(ExperimentConfig("x").options, bump_seeds=[0])),
        ]
        checked = 0
        for cfg in configs:
            first = run_experiment(cfg, tmp_path / f"{cfg.experiment}_a")
            again = run_experiment(load_config(first.dir / "resolved_config.json"), tmp_path / f"{cfg.experiment}_b")
            files = sorted(p.name for p in first.dir.iterdir())
            assert files == sorted(p.name for p in again.dir.iterdir())
            for name in files:
                assert (first.dir / name).read_bytes() == (again.dir / name).read_bytes(), name
                if name.endswith(".ckpt"):
                    raw = (first.dir / name).read_bytes()
                    assert io.checkpoint_bytes(io.load_checkpoint(first.dir / name)) == raw
                checked += 1

        params = NetworkParams.initialize([7, 5, 6, 3], seed=9)
        bank = TransformBank.for_clusters(params, [0, 3, 4, 11, 12], "sigmoid2")
        for t in bank.transforms.values():
            t.r = [rng.normal(size=v.shape) for v in t.r]
        ck = io.Checkpoint(params, bank, "sigmoid2", {"seed": 9})
        io.save_checkpoint(tmp_path / "m.ckpt", ck)
        back = io.load_checkpoint(tmp_path / "m.ckpt")
        assert back.equals(ck) and back.bank.cluster_ids == [0, 3, 4, 11, 12]
        out.detail = f"{checked} output files identical across {len(configs)} experiment re-runs"
