"""Release gate: eight go/no-go checks with pinned tolerances.

Each check prints one verdict line; run with ``pytest
tests/test_acceptance.py -v -s`` to see them.  The candidate-value sweep
and its determinism twin retrain four networks and are marked
``extended_ci``; deselect with ``-m "not extended_ci"`` for a quicker
gate.  Heavy stages run inside module-scoped fixtures that execute the
work twice, so the determinism check compares full reruns, not cached
objects.
"""

import io
import json
import time
from contextlib import redirect_stdout

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from blobsurrogate.bench import compare_pipelines
from blobsurrogate.cli import main as cli_main
from blobsurrogate.evaluation import (
    ExperimentConfig,
    FrocCurve,
    report_to_json,
    run_experiment,
    strip_timing,
)
from blobsurrogate.nn import Conv3D, Dense, Flatten, Network, bce_loss, check_gradients, dice_loss
from blobsurrogate.phantom import FWHM_FACTOR, GroundTruth, Lesion, PhantomConfig, generate_phantom
from blobsurrogate.scalespace import (
    LoGParams,
    OptimizeGrid,
    detect_candidates,
    optimize_log_params,
    radius_for_sigma,
)
from blobsurrogate.surrogate import (
    SurrogateModel,
    SurrogateSpec,
    build_surrogate_net,
    conv_receptive_field,
    depth_for_receptive_field,
    predict_response,
    receptive_field_for_log,
    select_threshold,
)
from blobsurrogate.volume import Point3

from conftest import bump_volume
from oracles import brute_force_optimize, brute_force_select_threshold, peak_scale_by_sweep
from test_nn import GRADCHECK_CASES


def _verdict(num: int | str, checks: list[tuple[str, bool]], summary: str) -> None:
    """One printed line per check group; the assert carries the failures."""
    bad = [name for name, ok in checks if not ok]
    if bad:
        print(f"[criterion {num}] FAIL {summary}; failed: {', '.join(bad)}", flush=True)
    else:
        print(f"[criterion {num}] PASS {summary}", flush=True)
    assert not bad, f"criterion {num} failed checks: {bad}"


# ---------------------------------------------------------------------------
# 1. receptive-field table
# ---------------------------------------------------------------------------


def test_criterion_1_receptive_field_table():
    t0 = time.perf_counter()
    checks = [
        ("radius(sigma=1mm)=2", radius_for_sigma(1.0, 1.0) == 2),
        ("radius(sigma=4mm)=7", radius_for_sigma(4.0, 1.0) == 7),
        ("radius(sigma=5mm)=9", radius_for_sigma(5.0, 1.0) == 9),
        ("rf(sigma_max=4mm)=15", receptive_field_for_log(
            LoGParams(1.0, 4.0, 1.0, 0.1), 1.0) == 15),
        ("rf(sigma_max=5mm)=19", receptive_field_for_log(
            LoGParams(1.0, 5.0, 1.0, 0.1), 1.0) == 19),
        ("depth(rf=15)=7", depth_for_receptive_field(15, 3) == 7),
        ("depth(rf=19)=9", depth_for_receptive_field(19, 3) == 9),
        ("rf(depth=7)=15", conv_receptive_field(3, 7) == 15),
        ("rf(depth=9)=19", conv_receptive_field(3, 9) == 19),
    ]
    dt = time.perf_counter() - t0
    checks.append(("runtime<1s", dt < 1.0))
    _verdict(1, checks, f"radius/receptive-field/depth integers exact ({dt:.3f}s)")


# ---------------------------------------------------------------------------
# 2. search routines against brute-force enumeration
# ---------------------------------------------------------------------------

OPTIMIZE_GRID = OptimizeGrid(sigma_values_mm=(1.0, 1.6, 2.2), sigma_step_mm=0.6,
                             thresholds=(0.05, 0.15, 0.4))


def _blob_instance(seed: int) -> tuple[list, list]:
    """Two small volumes with two Gaussian lesions each, plus ground truth."""
    rng = np.random.default_rng(seed)
    vols, truths = [], []
    for _ in range(2):
        centers = rng.uniform(3.5, 10.5, size=(2, 3))
        sigma = float(rng.uniform(0.8, 1.6))
        vols.append(bump_volume(size=14, centers=tuple(map(tuple, centers)),
                                sigma_mm=sigma))
        truths.append(GroundTruth(lesions=tuple(
            Lesion(center=Point3(*map(float, c)), diameter_mm=sigma * FWHM_FACTOR)
            for c in centers)))
    return vols, truths


def _response_instance(seed: int) -> tuple[list, list]:
    """Random response maps with one injected high-response lesion voxel each."""
    rng = np.random.default_rng(seed)
    responses, truths = [], []
    for _ in range(2):
        resp = rng.uniform(0.0, 0.4, size=(9, 9, 9))
        ix, iy, iz = rng.integers(1, 8, size=3)
        resp[iz, iy, ix] = float(rng.uniform(0.5, 0.95))
        responses.append(resp)
        truths.append(GroundTruth(lesions=(
            Lesion(center=Point3(float(ix), float(iy), float(iz)), diameter_mm=3.0),)))
    return responses, truths


def test_criterion_2_search_matches_brute_force():
    t0 = time.perf_counter()
    checks = []
    for seed in range(20):
        vols, truths = _blob_instance(1000 + seed)
        got = optimize_log_params(vols, truths, OPTIMIZE_GRID, 0.9)
        want = brute_force_optimize(vols, truths, OPTIMIZE_GRID, 0.9)
        checks.append((f"optimize seed {seed}",
                       got.params == want[0]
                       and got.mean_sensitivity == want[1]
                       and got.mean_candidates == want[2]
                       and got.reached_target == want[3]))
    for seed in range(20):
        responses, truths = _response_instance(2000 + seed)
        budget = 25.0 if seed % 2 else None
        got = select_threshold(responses, truths, 1.0, 0.9, grid_size=64,
                               voxel_budget=budget)
        want = brute_force_select_threshold(responses, truths, 1.0, 0.9,
                                            grid_size=64, voxel_budget=budget)
        checks.append((f"threshold seed {seed}",
                       got.tau == want[0]
                       and got.mean_sensitivity == want[1]
                       and got.mean_voxels_above == want[2]
                       and got.reached_target == want[3]
                       and got.budget_tau == want[4]
                       and got.budget_mean_voxels == want[5]))
    dt = time.perf_counter() - t0
    checks.append(("runtime<60s", dt < 60.0))
    _verdict(2, checks, f"20+20 randomized instances, exact match ({dt:.1f}s)")


# ---------------------------------------------------------------------------
# 3. gradient suite
# ---------------------------------------------------------------------------


def test_criterion_3_gradient_suite():
    t0 = time.perf_counter()
    checks = [("at least 10 shapes", len(GRADCHECK_CASES) >= 10)]
    worst = 0.0
    losses_used = set()
    for name, seed, layers, shape in GRADCHECK_CASES:
        rng = np.random.default_rng(seed)
        net = Network(layers)
        net.initialize(rng)
        x = rng.normal(size=shape)
        target = rng.uniform(0.2, 0.8, size=net.forward(x).shape)
        sigmoid_tail = layers[-1].__class__ is Dense and layers[-1].activation == "sigmoid"
        loss = bce_loss if sigmoid_tail else dice_loss
        if loss is dice_loss:
            target = (target > 0.5).astype(np.float64)
        losses_used.add(loss.__name__)
        err = check_gradients(net, x, target, loss, rng)
        worst = max(worst, err)
        checks.append((f"{name} err {err:.2e}", err < 1e-6))
    # the ten shapes must collectively exercise every layer variant
    convs = [l for _, _, layers, _ in GRADCHECK_CASES for l in layers
             if isinstance(l, Conv3D)]
    denses = [l for _, _, layers, _ in GRADCHECK_CASES for l in layers
              if isinstance(l, Dense)]
    flats = [l for _, _, layers, _ in GRADCHECK_CASES for l in layers
             if isinstance(l, Flatten)]
    checks.append(("conv strides 1 and 2", {l.stride for l in convs} >= {1, 2}))
    checks.append(("conv kernels 1/3/5", {l.kernel_size for l in convs} >= {1, 3, 5}))
    checks.append(("conv activations", {l.activation for l in convs} >= {"none", "relu"}))
    checks.append(("dense activations", {l.activation for l in denses} >= {"none", "sigmoid"}))
    checks.append(("flatten present", len(flats) > 0))
    checks.append(("both losses", losses_used == {"bce_loss", "dice_loss"}))
    dt = time.perf_counter() - t0
    checks.append(("runtime<120s", dt < 120.0))
    _verdict(3, checks, f"max relative error {worst:.2e} < 1e-6 over "
                        f"{len(GRADCHECK_CASES)} shapes ({dt:.1f}s)")


# ---------------------------------------------------------------------------
# 4. single-lesion localization and peak scale
# ---------------------------------------------------------------------------

DETECT_GRID = LoGParams(sigma_min_mm=1.0, sigma_max_mm=5.0, sigma_step_mm=0.2,
                        response_threshold=1e-4)
# Frozen from an exhaustive per-sigma sweep (peak_scale_by_sweep) over the
# same 40 volumes this suite constructs; all ten cases per diameter agree.
# Discrete kernels (sqrt(3)*sigma taps, renormalized) and off-grid centres
# shift the argmax away from the continuous matched-scale value
# sigma = diameter / FWHM * sqrt(2/3), so these are measured numbers.
GOLDEN_PEAK_SIGMA_MM = {3.0: 1.0, 5.0: 2.2, 8.0: 2.8, 12.0: 4.6}
CASES_PER_DIAMETER = 10


def _single_lesion_suite() -> dict:
    t0 = time.perf_counter()
    rows = []
    for diameter, golden in GOLDEN_PEAK_SIGMA_MM.items():
        for case in range(CASES_PER_DIAMETER):
            rng = np.random.default_rng(
                np.random.SeedSequence([4242, int(diameter * 10), case]))
            center = tuple(float(v) for v in rng.uniform(24.0, 40.0, size=3))
            vol = bump_volume(size=64, centers=(center,),
                              sigma_mm=diameter / FWHM_FACTOR)
            cands = detect_candidates(vol, DETECT_GRID)
            top_pos = cands.positions_mm[0]
            dist = float(np.linalg.norm(top_pos - np.asarray(center)))
            oracle = peak_scale_by_sweep(vol, DETECT_GRID.scales())
            rows.append({
                "diameter_mm": float(diameter),
                "case": case,
                "golden_sigma_mm": float(golden),
                "oracle_sigma_mm": float(oracle),
                "detected_sigma_mm": float(cands.sigmas_mm[0]),
                "distance_mm": dist,
            })
    lines = ["diameter_mm,case,golden_sigma_mm,oracle_sigma_mm,detected_sigma_mm,distance_mm"]
    lines += [f"{r['diameter_mm']!r},{r['case']},{r['golden_sigma_mm']!r},"
              f"{r['oracle_sigma_mm']!r},{r['detected_sigma_mm']!r},{r['distance_mm']!r}"
              for r in rows]
    return {
        "duration_s": time.perf_counter() - t0,
        "rows": rows,
        "artifact": "\n".join(lines).encode(),
    }


@pytest.fixture(scope="module")
def single_lesion_runs():
    return _single_lesion_suite(), _single_lesion_suite()


def test_criterion_4_single_lesion_localization(single_lesion_runs):
    run = single_lesion_runs[0]
    checks = [("40 cases", len(run["rows"]) == 40)]
    step = DETECT_GRID.sigma_step_mm
    for r in run["rows"]:
        tag = f"D={r['diameter_mm']:g} case {r['case']}"
        checks.append((f"{tag} within 1.5mm ({r['distance_mm']:.2f})",
                       r["distance_mm"] <= 1.5))
        # the stored golden must survive re-derivation by the sweep oracle
        checks.append((f"{tag} golden stable", r["oracle_sigma_mm"] == r["golden_sigma_mm"]))
        checks.append((f"{tag} scale within one step",
                       abs(r["detected_sigma_mm"] - r["golden_sigma_mm"]) <= step + 1e-9))
    dt = run["duration_s"]
    checks.append(("runtime<300s", dt < 300.0))
    worst = max(r["distance_mm"] for r in run["rows"])
    _verdict(4, checks, f"40/40 localized, worst miss {worst:.2f}mm, peak scales "
                        f"within {step}mm of goldens ({dt:.0f}s)")


# ---------------------------------------------------------------------------
# 5. end-to-end two-pipeline experiment
# ---------------------------------------------------------------------------

# 64^3 phantoms, 8 train / 4 test; epochs and classifier iterations reduced
# from the defaults (120 and 400) to fit the CI budget.  The vessel and
# noise settings keep enough non-lesion structure above the optimized
# thresholds for the classifier's negative pool.
EXPERIMENT_CONFIG = ExperimentConfig(
    phantom=PhantomConfig(diameter_min_mm=3.0, diameter_max_mm=12.0,
                          vessel_count=3, vessel_radius_max_mm=2.0,
                          vessel_contrast=0.95, noise_sigma=0.03),
    n_train=8, n_test=4, seed=7,
    surrogate_epochs=40, classifier_iterations=300)


def _experiment_run() -> dict:
    t0 = time.perf_counter()
    report = run_experiment(EXPERIMENT_CONFIG)
    return {
        "duration_s": time.perf_counter() - t0,
        "report": report,
        "artifact": report_to_json(strip_timing(report)).encode(),
    }


@pytest.fixture(scope="module")
def experiment_runs():
    return _experiment_run(), _experiment_run()


def test_criterion_5_end_to_end_experiment(experiment_runs):
    run = experiment_runs[0]
    report = run["report"]
    checks = [
        ("64^3 volumes", EXPERIMENT_CONFIG.phantom.size_vox == (64, 64, 64)),
        ("8 train / 4 test", (EXPERIMENT_CONFIG.n_train, EXPERIMENT_CONFIG.n_test) == (8, 4)),
        ("reduced epochs", EXPERIMENT_CONFIG.surrogate_epochs < 120
         and EXPERIMENT_CONFIG.classifier_iterations < 400),
    ]
    best = {}
    for name in ("log", "surrogate"):
        curve = FrocCurve.from_csv(report["froc"][name])
        best[name] = max(p.sensitivity for p in curve.points)
        checks.append((f"{name} reaches 90% sensitivity ({best[name]:.3f})",
                       best[name] >= 0.9))
    afp_log = report["operating_points"]["log"]["afp"]
    afp_sur = report["operating_points"]["surrogate"]["afp"]
    # the factor-of-two bound guards the surrogate against degrading the
    # filter bank's precision; producing fewer false positives at the same
    # sensitivity is an improvement, not a failure, so the bound is one-sided
    checks.append((f"surrogate AFP {afp_sur:.2f} <= 2x log AFP {afp_log:.2f}",
                   afp_sur <= 2.0 * afp_log + 1e-12))
    dt = run["duration_s"]
    checks.append(("runtime<45min", dt < 2700.0))
    _verdict(5, checks, f"log sens {best['log']:.3f}, surrogate sens "
                        f"{best['surrogate']:.3f}, AFP {afp_log:.2f} vs {afp_sur:.2f} "
                        f"({dt:.0f}s)")


# ---------------------------------------------------------------------------
# 6. candidate-stage speed at matched receptive field
# ---------------------------------------------------------------------------

# 7 scales; sigma_max 4mm -> rf 15. The surrogate's cost depends only on
# sigma_max (one conv stack replaces the whole ladder), so the ladder
# density is what the speed comparison is about.
BENCH_PARAMS = LoGParams(sigma_min_mm=1.0, sigma_max_mm=4.0, sigma_step_mm=0.5,
                         response_threshold=0.1)


def _speed_bench() -> dict:
    t0 = time.perf_counter()
    vol, _ = generate_phantom(PhantomConfig(), seed=1234)
    spec = SurrogateSpec.for_log_params(BENCH_PARAMS, vol.spacing_mm, 3, 3)
    net = build_surrogate_net(spec)
    net.initialize(np.random.default_rng(97))
    # tau at the response's 99.9th percentile keeps the thresholding and
    # component-extraction stages doing realistic work during timing
    tau = float(np.quantile(predict_response(net, vol), 0.999))
    model = SurrogateModel(network=net, spec=spec, tau=tau,
                           candidate_value=0.001, smooth_sigma_mm=1.0)
    with threadpool_limits(limits=1):
        report, log_cands, sur_cands = compare_pipelines(
            vol, BENCH_PARAMS, model, warmups=2, runs=5, threads=1)
    artifact = json.dumps({
        "volume_dims": list(report.volume_dims),
        "spacing_mm": report.spacing_mm,
        "n_scales": report.n_scales,
        "receptive_field_vox": report.receptive_field_vox,
        "threads": report.threads,
        "warmups": report.warmups,
        "runs": report.runs,
        "log_candidates_csv": log_cands.to_csv(),
        "surrogate_candidates_csv": sur_cands.to_csv(),
    }, sort_keys=True).encode()
    return {
        "duration_s": time.perf_counter() - t0,
        "report": report,
        "artifact": artifact,
    }


@pytest.fixture(scope="module")
def speed_bench_runs():
    return _speed_bench(), _speed_bench()


def test_criterion_6_speed_advantage(speed_bench_runs):
    run = speed_bench_runs[0]
    report = run["report"]
    checks = [
        ("receptive field >= 15", report.receptive_field_vox >= 15),
        ("at least 4 scales", report.n_scales >= 4),
        ("64^3 volume", tuple(report.volume_dims) == (64, 64, 64)),
        ("single thread", report.threads == 1),
        (f"speedup ratio {report.speedup_ratio:.2f} > 1", report.speedup_ratio > 1.0),
        ("medians consistent", report.log_median_s > report.surrogate_median_s),
    ]
    dt = run["duration_s"]
    checks.append(("runtime<600s", dt < 600.0))
    _verdict(6, checks, f"surrogate median {report.surrogate_median_s * 1e3:.1f}ms vs "
                        f"filter bank {report.log_median_s * 1e3:.1f}ms, ratio "
                        f"{report.speedup_ratio:.2f} ({dt:.1f}s)")


# ---------------------------------------------------------------------------
# 7. candidate-value sweep (extended CI)
# ---------------------------------------------------------------------------

SWEEP_PHANTOM = PhantomConfig(diameter_min_mm=3.5, diameter_max_mm=12.0,
                              vessel_count=3, vessel_radius_max_mm=2.0,
                              vessel_contrast=0.95, noise_sigma=0.03)
SWEEP_ARGS = ["--values", "1,0.1,0.01,0.001", "--budget", "200", "--seed", "21",
              "--n-train", "4", "--n-test", "2", "--epochs", "40"]


def _sweep_run(tmp_dir, tag: str) -> dict:
    phantom_path = tmp_dir / f"phantom-{tag}.json"
    phantom_path.write_text(SWEEP_PHANTOM.to_json())
    out_path = tmp_dir / f"sweep-{tag}.json"
    t0 = time.perf_counter()
    with redirect_stdout(io.StringIO()):
        rc = cli_main(["sweep-c", *SWEEP_ARGS,
                       "--phantom-config", str(phantom_path), "--out", str(out_path)])
    return {
        "duration_s": time.perf_counter() - t0,
        "returncode": rc,
        "artifact": out_path.read_bytes(),
    }


@pytest.fixture(scope="module")
def sweep_runs(tmp_path_factory):
    tmp_dir = tmp_path_factory.mktemp("sweep")
    return _sweep_run(tmp_dir, "first"), _sweep_run(tmp_dir, "second")


@pytest.mark.extended_ci
def test_criterion_7_candidate_value_sweep(sweep_runs):
    run = sweep_runs[0]
    result = json.loads(run["artifact"].decode())
    sens = {row["candidate_value"]: row["test_sensitivity_at_budget"]
            for row in result["rows"]}
    below_one = {c: s for c, s in sens.items() if c < 1.0}
    best_c, best_sens = max(below_one.items(), key=lambda kv: kv[1])
    checks = [
        ("exit code 0", run["returncode"] == 0),
        ("swept 1, 0.1, 0.01, 0.001", set(sens) == {1.0, 0.1, 0.01, 0.001}),
        (f"c={best_c:g} sens {best_sens:.3f} >= c=1 sens {sens[1.0]:.3f}",
         best_sens >= sens[1.0]),
    ]
    dt = run["duration_s"]
    checks.append(("runtime<2h", dt < 7200.0))
    _verdict(7, checks, f"sensitivity at budget: c=1 {sens[1.0]:.3f}, best c<1 "
                        f"({best_c:g}) {best_sens:.3f} ({dt:.0f}s)")


# ---------------------------------------------------------------------------
# 8. determinism of every heavy stage
# ---------------------------------------------------------------------------


def test_criterion_8_determinism(single_lesion_runs, experiment_runs, speed_bench_runs):
    # wall-clock fields are stripped before comparison; everything else in
    # the reports must reproduce byte for byte under the fixed seeds
    checks = [
        ("single-lesion suite byte-identical",
         single_lesion_runs[0]["artifact"] == single_lesion_runs[1]["artifact"]),
        ("experiment report byte-identical",
         experiment_runs[0]["artifact"] == experiment_runs[1]["artifact"]),
        ("bench candidates and config byte-identical",
         speed_bench_runs[0]["artifact"] == speed_bench_runs[1]["artifact"]),
    ]
    _verdict(8, checks, "repeated runs reproduce byte-identical reports "
                        "(timing fields excluded)")


@pytest.mark.extended_ci
def test_criterion_8_determinism_extended(sweep_runs):
    checks = [
        ("sweep report byte-identical",
         sweep_runs[0]["artifact"] == sweep_runs[1]["artifact"]),
    ]
    _verdict("8, extended", checks, "repeated sweep reproduces byte-identical report")
