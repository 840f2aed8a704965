"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line
(run with -s to see them all).

Criteria 7 and 8 are implemented at their stated scale (small preset, 20k
steps, batch 64, three seeds, both arms). On this class of hardware that is
multi-day single-core work (measured ~5.5 s/step aligned + ~3.2 s/step
baseline), so they only run when SELFALIGN_RUN_DESK_SCALE=1 is set and are
reported as skipped otherwise. scripts/direction_smoke.py runs a reduced
analogue in tens of minutes.
"""

import hashlib
import json
import math
import os
import time
from contextlib import contextmanager

import pytest
import torch

import selfalign.trainer as tr
from selfalign.alignment import AlignConfig
from selfalign.backbone import ModelConfig, preset_config
from selfalign.data import generate_shapes
from selfalign.diagnostics import ProbeConfig, frechet_gaussian_distance
from selfalign.experiments import run_arm
from selfalign.process import linear_beta_schedule, make_interpolant
from selfalign.rng import make_generator
from selfalign.sampler import SampleConfig, ddpm_sample, euler_flow_sample
from selfalign.trainer import TrainConfig, TrainerState, load_checkpoint, save_checkpoint, train_loop

RUN_DESK_SCALE = os.environ.get("SELFALIGN_RUN_DESK_SCALE") == "1"
DESK_SCALE_SKIP = (
    "full-scale direction experiment (6 runs x 20k steps of the 12-layer preset) "
    "needs ~6 days on this single-core host (measured 5.5 s/step aligned, 3.2 s/step "
    "baseline); set SELFALIGN_RUN_DESK_SCALE=1 to run it; "
    "scripts/direction_smoke.py covers a reduced analogue"
)


@contextmanager
def criterion(num: int, description: str, budget: float | None = None):
    t0 = time.perf_counter()
    ok = False
    try:
        yield
        elapsed = time.perf_counter() - t0
        if budget is not None and elapsed > budget:
            raise AssertionError(f"criterion {num} took {elapsed:.1f}s, over its {budget:.0f}s budget")
        ok = True
    finally:
        elapsed = time.perf_counter() - t0
        print(f"\nCRITERION {num} {'PASS' if ok else 'FAIL'} - {description} ({elapsed:.1f}s)")


def _toy_model(**kw):
    defaults = dict(input_height=8, input_width=8, channels=1, patch_size=2,
                    depth=4, hidden_dim=32, num_heads=2, num_classes=4)
    return ModelConfig(**{**defaults, **kw})


def _run_steps(state, dataset, num, start=0):
    for step in range(start, start + num):
        g = make_generator(state.train_config.seed, "step", step)
        batch = tr.make_train_batch(dataset.images, dataset.labels, state, step, g)
        tr.train_step(state, batch, g)


def _state_dicts_equal(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return set(sa) == set(sb) and all(torch.equal(sa[k], sb[k]) for k in sa)


def test_criterion_1_stop_gradient():
    with criterion(1, "stop-gradient: teacher grads exactly zero, student/head grads nonzero", budget=10):
        dataset = generate_shapes(64, 4, seed=41)
        state = TrainerState(
            preset_config("tiny"), TrainConfig(batch_size=16, total_steps=1, seed=13),
            AlignConfig(), family="flow",
        )
        _run_steps(state, dataset, 1)

        for name, p in state.teacher.named_parameters():
            assert p.grad is None or not bool(p.grad.any()), f"teacher grad nonzero: {name}"
        head_norm = sum(float(p.grad.abs().sum()) for p in state.head.parameters() if p.grad is not None)
        assert head_norm > 0, "projection head received no gradient"
        m = state.align_config.student_layer
        early = [p.grad for i in range(m) for p in state.student.blocks[i].parameters() if p.grad is not None]
        assert early and any(float(g.abs().sum()) > 0 for g in early), "early student blocks got no gradient"
        total = sum(float(p.grad.abs().sum()) for p in state.student.parameters()
                    if p.requires_grad and p.grad is not None)
        assert total > 0


def test_criterion_2_ema_exactness():
    with criterion(2, "EMA 500-step trace matches the closed-form recursion at alpha in {0, 0.9999}", budget=1):
        from selfalign.alignment import ema_update

        g = torch.Generator().manual_seed(2)
        students = torch.randn(500, generator=g, dtype=torch.float64)
        for alpha in (0.0, 0.9999):
            theta0 = 3.0
            teacher = {"w": torch.tensor([theta0], dtype=torch.float64)}
            for i in range(500):
                ema_update(teacher, {"w": students[i : i + 1]}, alpha)
            # closed form: alpha^s theta0 + (1 - alpha) sum_i alpha^(s-1-i) student_i
            closed = alpha**500 * theta0 + (1 - alpha) * sum(
                alpha ** (500 - 1 - i) * float(students[i]) for i in range(500)
            )
            got = float(teacher["w"])
            assert abs(got - closed) / max(abs(closed), 1e-12) < 1e-6, (alpha, got, closed)


def test_criterion_3_gradient_correctness():
    with criterion(3, "joint-loss reverse-mode grads match central differences (20 params, fp64)", budget=30):
        from selfalign import process
        from selfalign.alignment import alignment_loss, alignment_taps, joint_loss

        cfg = _toy_model(depth=2, hidden_dim=8, num_heads=2, num_classes=2)
        tcfg = TrainConfig(batch_size=4, total_steps=1, seed=3, dtype="float64")
        state = TrainerState(cfg, tcfg, AlignConfig(student_layer=1, teacher_layer=2), family="flow")
        # decorrelate the teacher from the student so its tap is a nontrivial target
        gperturb = torch.Generator().manual_seed(30)
        with torch.no_grad():
            for p in state.teacher.parameters():
                p.add_(0.01 * torch.randn(p.shape, generator=gperturb, dtype=p.dtype))

        g = torch.Generator().manual_seed(31)
        x0 = torch.randn(4, 1, 8, 8, generator=g, dtype=torch.float64)
        eps = torch.randn(4, 1, 8, 8, generator=g, dtype=torch.float64)
        t = torch.rand(4, generator=g, dtype=torch.float64) * 0.9 + 0.05
        labels = torch.tensor([0, 1, 0, 1])
        k = 0.07
        acfg = state.align_config
        spec = state.time_spec

        def loss_fn():
            pred, tap_s, tap_t = alignment_taps(
                state.student, state.teacher, state.noiser(), spec, acfg,
                x0, eps, t, labels, k,
            )
            target = process.velocity_target(state.interpolant, x0, eps, t)
            gen = process.velocity_loss(pred, target)
            align = alignment_loss(tap_t, state.head(tap_s), acfg.distance, acfg.smooth_l1_beta)
            return joint_loss(gen, align, acfg.weight)

        loss = loss_fn()
        for p in list(state.student.parameters()) + list(state.head.parameters()):
            p.grad = None
        loss.backward()

        params = [p for p in list(state.student.parameters()) + list(state.head.parameters())
                  if p.requires_grad and p.grad is not None]
        picker = torch.Generator().manual_seed(32)
        for _ in range(20):
            p = params[int(torch.randint(len(params), (1,), generator=picker))]
            flat = p.detach().reshape(-1)
            j = int(torch.randint(flat.numel(), (1,), generator=picker))
            h = 1e-5 * max(1.0, abs(float(flat[j])))
            with torch.no_grad():
                orig = float(flat[j])
                flat[j] = orig + h
                up = float(loss_fn())
                flat[j] = orig - h
                down = float(loss_fn())
                flat[j] = orig
            fd = (up - down) / (2 * h)
            ad = float(p.grad.reshape(-1)[j])
            rel = abs(fd - ad) / max(abs(fd), abs(ad), 1e-10)
            assert rel < 1e-4, f"finite-difference mismatch: fd={fd}, ad={ad}, rel={rel}"


def test_criterion_4_baseline_reduction():
    with criterion(4, "100 weight-0 steps bit-identical to the baseline trainer", budget=60):
        dataset = generate_shapes(256, 4, seed=44, height=8, width=8)
        cfg = _toy_model()
        tcfg = TrainConfig(batch_size=16, total_steps=100, seed=5)
        base = TrainerState(cfg, tcfg, None, family="flow")
        zero = TrainerState(cfg, tcfg, AlignConfig(weight=0.0), family="flow")
        _run_steps(base, dataset, 100)
        _run_steps(zero, dataset, 100)
        assert _state_dicts_equal(base.student, zero.student), "student trajectories diverged"
        assert _state_dicts_equal(base.teacher, zero.teacher), "teacher trajectories diverged"
        zero_states = {n: zero.optimizer.state[p] for n, p in zero.trainable_parameters()
                       if p in zero.optimizer.state}
        for name, p in base.trainable_parameters():
            if p in base.optimizer.state:
                for key in ("step", "exp_avg", "exp_avg_sq"):
                    assert torch.equal(base.optimizer.state[p][key], zero_states[name][key])


def test_criterion_5_sampler_oracles():
    with criterion(5, "sampler oracles: flow ODE point mass, DDPM point mass, SDE(w=0) == ODE", budget=120):
        interp = make_interpolant("linear")

        # (a) analytic point-mass velocity, 250 steps, error <= 1e-2
        m = torch.tensor([0.7, -1.3, 0.2, 2.0]).reshape(1, 4)

        def v_oracle(x, t, ids):
            tt = t.reshape(-1, 1)
            return -m + (x - (1 - tt) * m) / tt

        cfg = SampleConfig(family="flow", num_steps=250, num_samples=200, seed=50, chunk_size=200)
        ids = torch.zeros(200, dtype=torch.long)
        out = euler_flow_sample(v_oracle, interp, (4,), ids, cfg)
        assert float((out - m).abs().max()) < 1e-2

        # (b) DDPM with the analytic noise oracle, mean within 0.05 over 1000 samples
        sched = linear_beta_schedule(1000)
        point = torch.tensor([0.5, -0.8]).reshape(1, 2)

        def eps_oracle(x, t, ids):
            ab = sched.alpha_bar[t].float().reshape(-1, 1)
            return (x - ab.sqrt() * point) / (1 - ab).sqrt()

        dcfg = SampleConfig(family="denoise", num_steps=250, num_samples=1000, seed=51, chunk_size=1000)
        dout = ddpm_sample(eps_oracle, sched, (2,), torch.zeros(1000, dtype=torch.long), dcfg)
        assert float((dout.mean(0) - point).abs().max()) < 0.05

        # (c) SDE with w == 0 reproduces the ODE bit for bit
        sde0 = euler_flow_sample(v_oracle, interp, (4,), ids, cfg, diffusion_fn=lambda t: 0.0)
        assert torch.equal(out, sde0)


def test_criterion_6_frechet_proxy():
    with criterion(6, "distribution distance: zero on identical, exact mean shift, 1-D closed form", budget=30):
        g = torch.Generator().manual_seed(6)
        a = torch.randn(400, 6, generator=g, dtype=torch.float64)
        assert frechet_gaussian_distance(a, a.clone()) <= 1e-8

        shift = torch.zeros(6, dtype=torch.float64)
        shift[2], shift[4] = 3.0 * math.cos(1.1), 3.0 * math.sin(1.1)
        assert abs(frechet_gaussian_distance(a, a + shift) - 9.0) <= 1e-8

        x1 = torch.randn(500, 1, generator=g, dtype=torch.float64) * 1.3 + 0.2
        x2 = torch.randn(600, 1, generator=g, dtype=torch.float64) * 0.7 - 0.5
        closed = (float(x1.mean()) - float(x2.mean())) ** 2 + (
            float(x1.std(unbiased=True)) - float(x2.std(unbiased=True))
        ) ** 2
        assert abs(frechet_gaussian_distance(x1, x2) - closed) <= 1e-8


# ---------------------------------------------------------------------------
# Criteria 7 and 8: the full-scale direction experiment
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_scale_results(tmp_path_factory):
    if not RUN_DESK_SCALE:
        pytest.skip(DESK_SCALE_SKIP)
    root = tmp_path_factory.mktemp("desk")
    dataset = generate_shapes(4096, 4, seed=1234)
    model_cfg = preset_config("small")
    align = AlignConfig(
        student_layer=3, teacher_layer=8, interval_max=0.2, weight=0.2, ema_alpha=0.9999
    ).resolve(model_cfg.depth, "flow")
    results = {}
    for seed in (0, 1, 2):
        per_seed = {}
        for arm, arm_align, probe_every in (("aligned", align, 200), ("baseline", None, 0)):
            tcfg = TrainConfig(
                batch_size=64, total_steps=20_000, seed=seed,
                log_every=200, checkpoint_every=0, ema_alpha=0.9999,
            )
            per_seed[arm] = run_arm(
                root / f"seed{seed}_{arm}", model_cfg, tcfg, arm_align, "flow", dataset,
                probe_layers=(3, 8), probe_timestep=0.25,
                probe_config=ProbeConfig(epochs=20), probe_from=2000, probe_every=probe_every,
                probe_subset=1024, score_samples=1024, score_steps=50,
            )
        results[seed] = per_seed
    return results


def test_criterion_7_effect_direction(desk_scale_results):
    with criterion(7, "in >= 2 of 3 seeds: aligned run has lower distance proxy and higher layer-3 probe"):
        wins = 0
        for seed, arms in desk_scale_results.items():
            frechet_ok = arms["aligned"].frechet_projected <= arms["baseline"].frechet_projected
            probe_ok = arms["aligned"].student_probe_accuracy >= arms["baseline"].student_probe_accuracy
            print(
                f"  seed {seed}: frechet aligned={arms['aligned'].frechet_projected:.4f} "
                f"baseline={arms['baseline'].frechet_projected:.4f} | probe "
                f"aligned={arms['aligned'].student_probe_accuracy:.4f} "
                f"baseline={arms['baseline'].student_probe_accuracy:.4f}"
            )
            wins += int(frechet_ok and probe_ok)
        assert wins >= 2, f"direction held in only {wins}/3 seeds"


def test_criterion_8_teacher_ahead(desk_scale_results):
    with criterion(8, "teacher layer-8 probe >= student layer-3 probe at every 200-step checkpoint from 2k"):
        for seed, arms in desk_scale_results.items():
            trace = arms["aligned"].trace
            assert trace, f"seed {seed}: no probe trace collected"
            for point in trace:
                assert point.teacher_accuracy >= point.student_accuracy, (
                    f"seed {seed} step {point.step}: teacher {point.teacher_accuracy:.4f} "
                    f"< student {point.student_accuracy:.4f}"
                )


def test_criterion_9_checkpoint_resume(tmp_path):
    with criterion(9, "byte-identical checkpoint round trips; resume reproduces the metrics stream", budget=60):
        dataset = generate_shapes(256, 4, seed=49, height=8, width=8)
        cfg = _toy_model(depth=2)
        tcfg = TrainConfig(batch_size=8, total_steps=8, seed=9, log_every=1, checkpoint_every=4)

        full = TrainerState(cfg, tcfg, AlignConfig(), family="flow")
        train_loop(full, dataset.images, dataset.labels, tmp_path / "full")

        mid = tmp_path / "full" / "checkpoint_step0000004.ntar"
        again = tmp_path / "again.ntar"
        save_checkpoint(load_checkpoint(mid), again)
        assert hashlib.sha256(mid.read_bytes()).digest() == hashlib.sha256(again.read_bytes()).digest(), (
            "save -> load -> save changed bytes"
        )

        resumed = load_checkpoint(mid)
        train_loop(resumed, dataset.images, dataset.labels, tmp_path / "resumed")

        def records(path):
            # wall_time is real elapsed time, the one field that cannot replay
            out = {}
            with open(path) as f:
                for line in f:
                    rec = json.loads(line)
                    rec.pop("wall_time")
                    out[rec["step"]] = rec
            return out

        full_rec = records(tmp_path / "full" / "metrics.jsonl")
        tail_rec = records(tmp_path / "resumed" / "metrics.jsonl")
        assert set(tail_rec) == {5, 6, 7, 8}
        for step, rec in tail_rec.items():
            assert rec == full_rec[step], f"metrics diverged at step {step}"
        assert _state_dicts_equal(full.student, resumed.student)
        assert _state_dicts_equal(full.teacher, resumed.teacher)
