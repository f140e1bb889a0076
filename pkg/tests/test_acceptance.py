"""Acceptance gate: one test per headline guarantee of the package.

Each criterion below is verified at its stated tolerance and prints a
single ``criterion N: PASS`` line (run with ``-v`` to see one pass/fail
line per criterion even without ``-s``):

 1. analytic gradients match central finite differences for every block
    and the full default model (max relative error < 1e-3, < 1 min);
 2. noisy-or matches an independent log-space evaluation within 1e-12,
    hits 0.6 exactly on {0.2, 0.5}, and is monotone;
 3. pair mixing is exact at the endpoints and the sampled mixing weight
    matches Beta(alpha, alpha) moments;
 4. trapezoidal AUC equals the Mann-Whitney pairwise AUC within 1e-12,
    perfect separation gives exactly 1.0, and specificity + f_pr = 1
    exactly;
 5. the paired AUC test agrees with a 10^4-resample paired-bootstrap
    oracle within 0.05 in p, with identical-score and swap identities
    (< 2 min);
 6. the 27-patch augmentation yields exactly 27 patches, 9 per view,
    with in-range angles and values, deterministically per seed;
 7. on the default synthetic benchmark over 5 fixed seeds the noisy
    student beats the teacher-only baseline by >= 0.02 mean patient
    AUC, the maxout head is >= the linear head, and the mixup student
    is within 0.01 of the plain student (< 15 min total);
 8. the ablation harness reproduces the published grids (row counts
    4, 2, 2, 6, 2, 11) deterministically;
 9. checkpoints round-trip byte-stably with forward agreement within
    1e-5, and corrupted files fail with the designated error;
10. the self-train command is byte-identical across reruns of one
    configuration.
"""

import math
import time

import numpy as np
import pytest

from nslgc import blocks as B
from nslgc import model as M
from nslgc import tensor as T
from nslgc.ablation import SUITES, run_suite, suite_specs
from nslgc.aggregate import noisy_or
from nslgc.cli import EXIT_DATA, EXIT_OK, main
from nslgc.config import build_experiment_config
from nslgc.evaluate import (
    confusion_at_threshold,
    delong_test,
    false_positive_rate,
    mann_whitney_auc,
    roc_curve,
    specificity,
)
from nslgc.experiments import run_benchmark
from nslgc.mixup import MixupConfig, mix_pair, sample_lambda
from nslgc.model import ModelConfig, build_model, model_forward
from nslgc.persist import PersistError, load_checkpoint, save_checkpoint
from nslgc.preprocess import NoduleCrop, augment_27
from nslgc.tensor import Tensor

TINY = {
    "synth.n_labeled_nodules": "12",
    "synth.n_patients": "6",
    "synth.n_test_patients": "6",
    "synth.crop_size": "8",
    "model.input_size": "8",
    "model.base_channels": "2",
    "train.epochs": "2",
    "train.batch_size": "8",
    "selftrain.iterations": "2",
    "selftrain.confidence_threshold": "0.0",
}


def tiny_cli_flags(out_dir):
    flags = []
    for key, value in TINY.items():
        flags += ["--set", f"{key}={value}"]
    return flags + ["--out-dir", str(out_dir)]


def test_criterion_01_gradient_correctness():
    """Every block and the full default model pass a finite-difference check."""
    t0 = time.monotonic()
    tol = 1e-3
    reports = {}

    def weighted_mean_loss(forward, shape, seed):
        w = np.random.default_rng(seed).normal(size=shape)
        return lambda: T.scale(T.sum_all(T.mul(forward(), Tensor(w))), 1.0 / w.size)

    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 3, 8, 8)))
    conv = B.init_conv_block(rng, 3, 4, kernel_size=3, padding=1)
    params = [("kernel", conv.kernel), ("bias", conv.bias), ("gamma", conv.gamma), ("beta", conv.beta)]
    net = weighted_mean_loss(lambda: B.conv_block_forward(conv, x, "eval", update_bn_stats=False), (2, 4, 8, 8), 1)
    reports["conv_block"] = T.gradient_check(net, params, rng=np.random.default_rng(10))

    res = B.init_residual_block(rng, 3, 3)
    res_params = []
    for branch, p in (("b1", res.block1), ("b2", res.block2)):
        res_params += [(f"{branch}.kernel", p.kernel), (f"{branch}.bias", p.bias),
                       (f"{branch}.gamma", p.gamma), (f"{branch}.beta", p.beta)]
    net = weighted_mean_loss(lambda: B.residual_block_forward(res, x, "eval", update_bn_stats=False), (2, 3, 8, 8), 2)
    reports["residual_block"] = T.gradient_check(net, res_params, rng=np.random.default_rng(11))

    x4 = Tensor(rng.normal(size=(2, 4, 5, 5)))
    nl = B.init_nonlocal_block(rng, 4, dropout_rate=0.2)
    nl_params = []
    for name, lin in (("theta", nl.theta), ("phi", nl.phi), ("g", nl.g), ("out", nl.out)):
        nl_params += [(f"{name}.kernel", lin.kernel), (f"{name}.bias", lin.bias)]
    net = weighted_mean_loss(lambda: B.nonlocal_block_forward(nl, x4, "eval"), (2, 4, 5, 5), 3)
    reports["nonlocal_block"] = T.gradient_check(net, nl_params, rng=np.random.default_rng(12))

    feats = Tensor(rng.normal(size=(5, 6)))
    head = B.init_maxout_head(rng, 6, pieces=2)
    net = weighted_mean_loss(lambda: B.maxout_head_forward(head, feats), (5,), 4)
    reports["maxout_head"] = T.gradient_check(net, [("weight", head.weight), ("bias", head.bias)],
                                              rng=np.random.default_rng(13))

    state = build_model(ModelConfig(variant="maxout_local_global", input_size=16, base_channels=4, seed=0))
    xm = Tensor(np.random.default_rng(5).uniform(size=(2, 1, 16, 16)))
    net = weighted_mean_loss(lambda: model_forward(state, xm, mode="eval"), (2,), 6)
    reports["maxout_local_global"] = T.gradient_check(
        net, [(n, p) for n, p in state.parameters()],
        rng=np.random.default_rng(14), max_coords_per_param=4,
    )

    for name, report in reports.items():
        assert report.passed(tol), (
            f"{name}: max relative error {report.max_rel_error:.2e} over "
            f"{report.n_checked} coordinates (worst: {report.worst_param})"
        )
    elapsed = time.monotonic() - t0
    assert elapsed < 60.0, f"gradient checks took {elapsed:.1f}s (budget 60s)"
    worst = max(r.max_rel_error for r in reports.values())
    print(f"criterion 1: PASS - {len(reports)} gradient checks, "
          f"worst relative error {worst:.2e}, {elapsed:.1f}s")


def test_criterion_02_noisy_or_oracle():
    """Noisy-or matches log-space evaluation within 1e-12 and is monotone."""
    rng = np.random.default_rng(20)
    worst = 0.0
    for _ in range(10_000):
        p = rng.uniform(0.0, 1.0, size=int(rng.integers(1, 7))) * 0.999999
        expected = 1.0 - math.exp(np.log1p(-p).sum())
        worst = max(worst, abs(noisy_or(p) - expected))
    assert worst < 1e-12, f"worst |noisy_or - log-space| = {worst:.2e}"

    assert noisy_or([0.2, 0.5]) == 0.6

    for _ in range(1_000):
        p = rng.uniform(0.0, 0.999, size=int(rng.integers(1, 7)))
        i = int(rng.integers(p.size))
        bumped = p.copy()
        bumped[i] += rng.uniform(0.0, 1.0 - bumped[i])
        assert noisy_or(bumped) >= noisy_or(p)
    print(f"criterion 2: PASS - log-space agreement {worst:.1e} on 10^4 vectors, "
          "exact 0.6 on {0.2, 0.5}, monotone on 10^3 perturbations")


def test_criterion_03_mixup_endpoints_and_moments():
    """mix_pair endpoints are exact; lambda moments match Beta(alpha, alpha)."""
    rng = np.random.default_rng(30)
    x_i, x_j = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    y_i, y_j = 1.0, 0.0
    at_one = mix_pair(x_i, y_i, x_j, y_j, 1.0)
    np.testing.assert_array_equal(at_one.x, x_i)
    assert at_one.y == y_i
    at_zero = mix_pair(x_i, y_i, x_j, y_j, 0.0)
    np.testing.assert_array_equal(at_zero.x, x_j)
    assert at_zero.y == y_j

    details = []
    for alpha in (0.2, 1.0, 16.0):
        config = MixupConfig(alpha=alpha)
        lam_rng = np.random.default_rng(31)
        draws = np.array([sample_lambda(config, lam_rng) for _ in range(100_000)])
        mean, var = draws.mean(), draws.var()
        expected_var = 1.0 / (4.0 * (2.0 * alpha + 1.0))
        assert abs(mean - 0.5) < 0.01, f"alpha={alpha}: mean {mean:.4f}"
        assert abs(var - expected_var) < 0.1 * expected_var, (
            f"alpha={alpha}: var {var:.5f} vs expected {expected_var:.5f}"
        )
        details.append(f"alpha={alpha:g}: mean {mean:.3f}, var {var:.4f}~{expected_var:.4f}")
    print(f"criterion 3: PASS - exact endpoints; {'; '.join(details)}")


def test_criterion_04_auc_oracle_and_rate_identity():
    """Trapezoidal AUC == pairwise AUC within 1e-12; exact rate identity."""
    rng = np.random.default_rng(40)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 201))
        labels = np.zeros(n, dtype=np.int64)
        labels[: int(rng.integers(1, n))] = 1
        rng.shuffle(labels)
        # quantized scores force plenty of ties
        scores = np.round(rng.uniform(size=n), decimals=int(rng.integers(1, 3)))
        worst = max(worst, abs(roc_curve(scores, labels).auc - mann_whitney_auc(scores, labels)))
    assert worst < 1e-12, f"worst |trapezoid - pairwise| = {worst:.2e}"

    labels = np.array([0] * 50 + [1] * 50)
    scores = np.concatenate([np.linspace(0.0, 0.4, 50), np.linspace(0.6, 1.0, 50)])
    assert roc_curve(scores, labels).auc == 1.0

    for threshold in np.linspace(0.05, 0.95, 19):
        c = confusion_at_threshold(rng.uniform(size=60), np.tile([0, 1], 30), threshold)
        assert specificity(c) + false_positive_rate(c) == 1.0
    print(f"criterion 4: PASS - AUC oracle agreement {worst:.1e} on 100 tied instances, "
          "perfect separation = 1.0, specificity + f_pr = 1 exact at 19 thresholds")


def _normal_sf2(z: float) -> float:
    """Two-sided normal p-value for a z statistic."""
    return 2.0 * (1.0 - 0.5 * (1.0 + math.erf(abs(z) / math.sqrt(2.0))))


def _paired_bootstrap_p(scores_a, scores_b, labels, n_resamples=10_000, seed=0):
    """Bootstrap-oracle p: resample cases with replacement (paired across
    models), form the AUC-difference distribution, and read a two-sided
    normal p from the observed difference over the bootstrap spread."""
    rng = np.random.default_rng(seed)
    n = labels.size
    diffs = []
    chunk = 2_500
    remaining = n_resamples
    while remaining > 0:
        take = min(chunk, remaining)
        remaining -= take
        idx = rng.integers(0, n, size=(take, n))
        y = labels[idx].astype(np.float64)
        n_pos = y.sum(axis=1)
        valid = (n_pos > 0) & (n_pos < n)

        def chunk_auc(scores):
            s = scores[idx]
            greater = (s[:, :, None] > s[:, None, :]).astype(np.float64)
            greater += 0.5 * (s[:, :, None] == s[:, None, :])
            num = np.einsum("rij,ri,rj->r", greater, y, 1.0 - y)
            return num / np.maximum(n_pos * (n - n_pos), 1.0)

        d = chunk_auc(scores_a) - chunk_auc(scores_b)
        diffs.append(d[valid])
    diffs = np.concatenate(diffs)
    observed = mann_whitney_auc(scores_a, labels) - mann_whitney_auc(scores_b, labels)
    return _normal_sf2(observed / diffs.std(ddof=1))


def test_criterion_05_delong_vs_bootstrap():
    """Paired AUC test: degenerate identity, antisymmetry, bootstrap agreement."""
    t0 = time.monotonic()
    rng = np.random.default_rng(50)
    scores = rng.uniform(size=40)
    labels = np.tile([0, 1], 20)
    same = delong_test(scores, scores, labels)
    assert same.p_value == 1.0 and same.degenerate

    worst = 0.0
    for instance in range(20):
        inst_rng = np.random.default_rng(1000 + instance)
        latent = inst_rng.normal(size=30)
        labels = (latent + inst_rng.logistic(size=30) > 0.0).astype(np.int64)
        if labels.sum() < 3 or labels.sum() > 27:  # keep both classes populated
            labels[:3] = 1
            labels[-3:] = 0
        scores_a = latent + 0.8 * inst_rng.normal(size=30)
        scores_b = latent + 0.8 * inst_rng.normal(size=30)

        forward = delong_test(scores_a, scores_b, labels)
        swapped = delong_test(scores_b, scores_a, labels)
        assert forward.z == pytest.approx(-swapped.z, abs=1e-12)
        assert forward.p_value == pytest.approx(swapped.p_value, abs=1e-12)

        p_boot = _paired_bootstrap_p(scores_a, scores_b, labels, seed=2000 + instance)
        worst = max(worst, abs(forward.p_value - p_boot))
    assert worst <= 0.05, f"worst |p_delong - p_bootstrap| = {worst:.3f}"
    elapsed = time.monotonic() - t0
    assert elapsed < 120.0, f"paired-test checks took {elapsed:.1f}s (budget 120s)"
    print(f"criterion 5: PASS - degenerate p=1, antisymmetry exact, "
          f"bootstrap agreement within {worst:.3f} on 20 instances, {elapsed:.1f}s")


def test_criterion_06_augmentation_contract():
    """27 patches, 9 per view, angles and values in range, seed-deterministic."""
    volume = np.random.default_rng(60).uniform(size=(16, 16, 16))
    crop = NoduleCrop(crop_id="acc", volume=volume)
    patches = augment_27(crop, np.random.default_rng(7))

    assert len(patches) == 27
    per_view = {axis: sum(1 for vp in patches if vp.descriptor.view_axis == axis) for axis in range(3)}
    assert per_view == {0: 9, 1: 9, 2: 9}
    for vp in patches:
        assert -180.0 <= vp.descriptor.angle_deg <= 180.0
        assert vp.patch.min() >= 0.0 and vp.patch.max() <= 1.0

    again = augment_27(crop, np.random.default_rng(7))
    for vp, vq in zip(patches, again):
        assert vp.patch.tobytes() == vq.patch.tobytes()
        assert vp.descriptor == vq.descriptor
    print("criterion 6: PASS - 27 patches, 9 per view, angles and values in range, "
          "bit-identical regeneration per seed")


def test_criterion_07_benchmark_directions():
    """Default benchmark, 5 fixed seeds: student gain, head order, mixup parity."""
    t0 = time.monotonic()
    result = run_benchmark(build_experiment_config({}))
    elapsed = time.monotonic() - t0

    gain = result.mean_student_auc - result.mean_teacher_auc
    head_margin = result.mean_student_auc - result.mean_linear_student_auc
    mixup_margin = result.mean_mixup_student_auc - (result.mean_student_auc - 0.01)
    per_seed = ", ".join(
        f"seed {r.seed}: T={r.teacher_auc:.3f} S={r.student_auc:.3f} "
        f"L={r.linear_student_auc:.3f} M={r.mixup_student_auc:.3f}"
        for r in result.per_seed
    )
    assert gain >= 0.02, (
        f"(a) student mean {result.mean_student_auc:.4f} vs teacher mean "
        f"{result.mean_teacher_auc:.4f}: gain {gain:+.4f} < +0.02 [{per_seed}]"
    )
    assert head_margin >= 0.0, (
        f"(b) maxout mean {result.mean_student_auc:.4f} < linear mean "
        f"{result.mean_linear_student_auc:.4f} [{per_seed}]"
    )
    assert mixup_margin >= 0.0, (
        f"(c) mixup mean {result.mean_mixup_student_auc:.4f} below student mean "
        f"{result.mean_student_auc:.4f} - 0.01 [{per_seed}]"
    )
    assert elapsed < 900.0, f"benchmark took {elapsed:.0f}s (budget 900s)"
    print(
        f"criterion 7: PASS - teacher {result.mean_teacher_auc:.4f}, "
        f"student {result.mean_student_auc:.4f} (gain {gain:+.4f}), "
        f"linear {result.mean_linear_student_auc:.4f}, "
        f"mixup {result.mean_mixup_student_auc:.4f}, {elapsed:.0f}s"
    )


def test_criterion_08_ablation_grids():
    """Six ablation suites with the published row counts, deterministic per seed."""
    exp = build_experiment_config({})
    counts = {suite: len(suite_specs(suite, exp)) for suite in SUITES}
    assert counts == {"b1": 4, "b2": 2, "b3": 2, "b4": 6, "b5": 2, "b6": 11}

    tiny = build_experiment_config(TINY)
    first = run_suite("b5", tiny)
    second = run_suite("b5", tiny)
    assert [r.aucs for r in first.rows] == [r.aucs for r in second.rows]
    print("criterion 8: PASS - row counts 4, 2, 2, 6, 2, 11; "
          "repeated tiny-scale suite runs are identical")


def test_criterion_09_checkpoint_round_trip(tmp_path):
    """Byte-stable round trip, forward agreement <= 1e-5, designated errors."""
    state = build_model(ModelConfig(variant="maxout_local_global", input_size=16, base_channels=4, seed=9))
    path_a, path_b = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
    save_checkpoint(state, path_a)
    loaded = load_checkpoint(path_a)
    save_checkpoint(loaded, path_b)
    bytes_a = (tmp_path / "a.ckpt").read_bytes()
    assert bytes_a == (tmp_path / "b.ckpt").read_bytes()

    x = Tensor(np.random.default_rng(90).uniform(size=(4, 1, 16, 16)))
    before = model_forward(state, x, mode="eval").data
    after = model_forward(loaded, x, mode="eval").data
    worst = float(np.max(np.abs(before - after)))
    assert worst <= 1e-5, f"forward drift {worst:.2e} after round trip"

    corrupt = tmp_path / "corrupt.ckpt"
    corrupt.write_bytes(b"XXXX" + bytes_a[4:])
    with pytest.raises(PersistError):
        load_checkpoint(str(corrupt))
    flipped = bytearray(bytes_a)
    flipped[-1] ^= 0xFF
    (tmp_path / "flipped.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(PersistError):
        load_checkpoint(str(tmp_path / "flipped.ckpt"))
    truncated = tmp_path / "truncated.ckpt"
    truncated.write_bytes(bytes_a[: len(bytes_a) // 2])
    with pytest.raises(PersistError):
        load_checkpoint(str(truncated))
    assert main(["evaluate", "--model", str(corrupt), *tiny_cli_flags(tmp_path)]) == EXIT_DATA
    print(f"criterion 9: PASS - byte-stable round trip, forward drift {worst:.1e}, "
          "corrupt/flipped/truncated files raise the designated error (exit 3)")


def test_criterion_10_end_to_end_determinism(tmp_path):
    """self-train twice with one configuration: byte-identical artifacts."""
    flags = tiny_cli_flags(tmp_path)
    assert main(["self-train", *flags]) == EXIT_OK
    metrics = (tmp_path / "selftrain-metrics.txt").read_bytes()
    checkpoint = (tmp_path / "final.ckpt").read_bytes()
    assert main(["self-train", *flags]) == EXIT_OK
    assert (tmp_path / "selftrain-metrics.txt").read_bytes() == metrics
    assert (tmp_path / "final.ckpt").read_bytes() == checkpoint
    print("criterion 10: PASS - rerun reproduced selftrain-metrics.txt "
          f"({len(metrics)} bytes) and final.ckpt ({len(checkpoint)} bytes) exactly")
