"""End-to-end acceptance criteria, one test per criterion, each printing a
PASS/FAIL line with the measured numbers (run with -s to see them)."""

import time

import numpy as np
import pytest

import splatcal as sc
from splatcal import io as sio
from splatcal.cli import main as cli_main
from splatcal.geometry import quat_geodesic_angle
from splatcal.optim import OptimizerConfig
from splatcal.renderer import cull_and_project, psnr, rasterize
from splatcal.reparam import build_frame, eigen3_sym, estimate_hessian
from splatcal.scene import merge_scenes, perturb_camera, synth_cameras, synth_scene
from splatcal.schedule import ScheduleConfig, calibrate, camera_phase

from test_camgrad import small_gaussian_scene
from test_schedule import run_scripted_phase, simulate_stop_step

pytestmark = pytest.mark.acceptance


def report(criterion, ok, detail):
    print(f"\nACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} ({detail})")
    return ok


class TestCriterion1GradientCorrectness:
    def test_frozen_cov_oracle_agreement(self):
        t0 = time.time()
        worst = 0.0
        cases = 0
        for i in range(20):
            n = [100, 220, 370, 520, 700, 850, 1000][i % 7]
            layout = ["cloud", "textured_wall"][i % 2]
            scene = synth_scene(1000 + i, n, layout)
            rig = "orbit" if layout == "cloud" else "arc"
            cam = synth_cameras(2000 + i, 1, scene, rig, width=64, height=64)[0]
            target = rasterize(cull_and_project(scene, cam), 64, 64)
            pert = perturb_camera(cam, 3000 + i, dt=0.01 * scene.extent,
                                  dtheta=np.radians(0.5), dfov=0.01)
            got = sc.grad_camera(scene, pert, target, "l2").as_vector()
            want = sc.finite_diff_grad(scene, pert, target, "l2",
                                       mode="frozen_cov").as_vector()
            mask = np.abs(want) > 1e-8 * np.abs(want).max()
            rel = np.abs(got - want)[mask] / np.abs(want)[mask]
            worst = max(worst, rel.max())
            cases += 1
        elapsed = time.time() - t0
        ok = worst < 1e-3 and elapsed < 120
        assert report("1 gradient-correctness",
                      ok, f"{cases} scenes, max per-component rel {worst:.2e}, "
                          f"{elapsed:.0f}s < 120s")


class TestCriterion2ApproximationBound:
    def test_full_fd_within_5_percent(self):
        worst = 0.0
        for seed in (1, 2, 6, 7, 11, 13):
            scene, cam = small_gaussian_scene(seed)
            assert np.max(scene.scales / scene.positions[:, 2:3]) < 1e-3
            target = rasterize(cull_and_project(scene, cam), 64, 64)
            pert = perturb_camera(cam, 31 + seed, dt=0.01 * scene.extent,
                                  dtheta=np.radians(0.5), dfov=0.01)
            got = sc.grad_camera(scene, pert, target, "l2").as_vector()
            want = sc.finite_diff_grad(scene, pert, target, "l2", mode="full").as_vector()
            worst = max(worst, np.linalg.norm(got - want) / np.linalg.norm(want))
        ok = worst < 5e-2
        assert report("2 eq2-approximation-bound", ok,
                      f"max norm-relative deviation from full FD {worst:.2e} < 5e-2")


@pytest.fixture(scope="module")
def pose_recovery_run():
    """The scaled-down pose-recovery experiment shared by criterion 3's clauses."""
    t0 = time.time()
    scene = merge_scenes(synth_scene(21, 1400, "textured_wall"),
                         synth_scene(22, 600, "cloud"))
    res = 128
    cams_gt = sc.synth_cameras(5, 12, scene, "arc", width=res, height=res)
    targets = [rasterize(cull_and_project(scene, c), res, res) for c in cams_gt]
    pert = [perturb_camera(c, 100 + i, dt=0.01 * scene.extent,
                           dtheta=np.radians(0.5), dfov=0.01)
            for i, c in enumerate(cams_gt)]

    def medians(cams):
        te = np.median([np.linalg.norm(c.t - g.t) for c, g in zip(cams, cams_gt)])
        re = np.median([quat_geodesic_angle(c.q, g.q) for c, g in zip(cams, cams_gt)])
        return float(te), float(np.degrees(re))

    def median_psnr(cams):
        return float(np.median([psnr(rasterize(cull_and_project(scene, c), res, res), t)
                                for c, t in zip(cams, targets)]))

    before = medians(pert)
    psnr_before = median_psnr(pert)
    work = scene.copy()
    refined, _ = calibrate(work, pert, targets, ScheduleConfig(seed=1))
    return {
        "before": before, "after": medians(refined),
        "psnr_before": psnr_before, "psnr_after": median_psnr(refined),
        "elapsed": time.time() - t0,
    }


class TestCriterion3PoseRecovery:
    def test_runtime_budget(self, pose_recovery_run):
        r = pose_recovery_run
        assert report("3 pose-recovery runtime", r["elapsed"] < 900,
                      f"{r['elapsed']:.0f}s < 900s")

    def test_psnr_improvement(self, pose_recovery_run):
        r = pose_recovery_run
        ok = r["psnr_after"] >= r["psnr_before"] + 3.0
        assert report("3 pose-recovery psnr", ok,
                      f"median {r['psnr_before']:.2f} -> {r['psnr_after']:.2f} dB "
                      f"(needs +3)")

    def test_translation_error_reduction(self, pose_recovery_run):
        r = pose_recovery_run
        reduction = 1.0 - r["after"][0] / r["before"][0]
        ok = reduction >= 0.9
        assert report("3 pose-recovery translation", ok,
                      f"median {r['before'][0]:.5f} -> {r['after'][0]:.5f} "
                      f"({100 * reduction:.0f}% reduction, needs >= 90%)")

    def test_rotation_error_reduction(self, pose_recovery_run):
        r = pose_recovery_run
        reduction = 1.0 - r["after"][1] / r["before"][1]
        ok = reduction >= 0.9
        assert report("3 pose-recovery rotation", ok,
                      f"median {r['before'][1]:.4f} -> {r['after'][1]:.4f} deg "
                      f"({100 * reduction:.0f}% reduction, needs >= 90%)")


class TestCriterion4Reparameterization:
    def test_abc_beats_raw_on_entangled_fixture(self):
        wins = 0
        worst_offdiag = 0.0
        for seed in range(10):
            scene = synth_scene(100 + seed, 400, "textured_wall")
            cam0 = synth_cameras(200 + seed, 1, scene, "arc", width=64, height=64)[0]
            target = rasterize(cull_and_project(scene, cam0), 64, 64)
            rng = np.random.default_rng(300 + seed)
            t = cam0.t.copy()
            t[2] += rng.choice([-1, 1]) * rng.uniform(0.01, 0.02) * scene.extent
            k = 1.0 + rng.choice([-1, 1]) * rng.uniform(0.005, 0.015)
            pert = cam0.replace(t=t, fov_x=cam0.fov_x * k, fov_y=cam0.fov_y * k)

            def err(c):
                return (np.linalg.norm(c.t - cam0.t) / scene.extent
                        + 0.5 * (abs(c.fov_x - cam0.fov_x) / cam0.fov_x
                                 + abs(c.fov_y - cam0.fov_y) / cam0.fov_y))

            opt = OptimizerConfig()
            cfg = ScheduleConfig(min_steps=1000, max_steps=1000, threshold=0.0)
            cam_raw, _ = camera_phase(scene, pert, target, cfg, opt, opt.new_state(9))
            H = estimate_hessian(scene, pert, target, "l2")
            frame = build_frame(H, np.array([pert.t[2], pert.fov_x, pert.fov_y]))
            diag = frame.basis.T @ H @ frame.basis
            off = np.linalg.norm(diag - np.diag(np.diag(diag))) / np.linalg.norm(H)
            worst_offdiag = max(worst_offdiag, off)
            cam_abc, _ = camera_phase(scene, pert, target, cfg, opt, opt.new_state(9),
                                      frame)
            wins += err(cam_abc) <= 0.5 * err(cam_raw)
        ok = wins >= 8 and worst_offdiag < 1e-6
        assert report("4 reparameterization", ok,
                      f"abc beat raw 2x in {wins}/10 seeds (needs >= 8), "
                      f"max eigenbasis off-diagonal mass {worst_offdiag:.1e} < 1e-6")


class TestCriterion5LossChoice:
    def test_l2_beats_l1_for_cameras(self):
        wins = 0
        for seed in range(10):
            scene = synth_scene(400 + seed, 300, "cloud")
            cam0 = synth_cameras(500 + seed, 1, scene, "orbit", width=64, height=64)[0]
            target = rasterize(cull_and_project(scene, cam0), 64, 64)
            pert = perturb_camera(cam0, 600 + seed, dt=0.01 * scene.extent,
                                  dtheta=np.radians(0.5), dfov=0.01)
            opt = OptimizerConfig()
            final = {}
            for kind in ("l2", "l1"):
                cfg = ScheduleConfig(camera_loss=kind)
                _, rec = camera_phase(scene, pert, target, cfg, opt, opt.new_state(9))
                final[kind] = rec.psnr_after
            wins += final["l2"] >= final["l1"]
        ok = wins >= 7
        assert report("5 loss-choice", ok, f"L2 >= L1 final PSNR in {wins}/10 seeds "
                                           f"(needs >= 7)")


class TestCriterion6ScheduleSemantics:
    def test_stop_steps_match_scalar_simulation(self, monkeypatch):
        cfg = ScheduleConfig()
        rng = np.random.default_rng(7)
        n = cfg.max_steps + 1
        sequences = []
        for case in range(46):
            kind = case % 4
            if kind == 0:
                sequences.append(list(30.0 + np.cumsum(rng.normal(0.002, 0.02, n))))
            elif kind == 1:
                plateau = int(rng.integers(20, 900))
                sequences.append(list(30.0 + 0.01 * np.minimum(np.arange(n), plateau)))
            elif kind == 2:
                ramp = np.maximum(0.0, 1.0 - np.arange(n) / rng.integers(80, 950))
                sequences.append(list(30.0 + np.cumsum(0.012 * ramp)))
            else:
                sequences.append(list(30.0 + rng.normal(0.0, 0.05, n).cumsum()))
        sequences.append([30.0] * n)                        # min-steps boundary
        sequences.append(list(30.0 + 0.02 * np.arange(n)))  # max-steps boundary
        sequences.append(list(30.0 + 0.01 * np.arange(n)))  # EMA sits at/above t
        sequences.append(list(30.0 - 0.001 * np.arange(n)))  # monotone decline
        mismatches = 0
        boundary_hits = {100: 0, 1000: 0}
        for seq in sequences:
            record = run_scripted_phase(monkeypatch, seq, cfg)
            expected = simulate_stop_step(seq, cfg)
            mismatches += record.steps != expected
            if expected in boundary_hits:
                boundary_hits[expected] += 1
        ok = mismatches == 0 and boundary_hits[100] > 0 and boundary_hits[1000] > 0
        assert report("6 schedule-semantics", ok,
                      f"{len(sequences)} scripted sequences, {mismatches} mismatches "
                      f"(0 tolerance), boundaries hit: {boundary_hits}")

    def test_threshold_equality_is_strict(self, monkeypatch):
        # First step lands the score exactly on t = beta * 0.01; strict < must
        # not stop there, and constant progress keeps the score above t after.
        cfg = ScheduleConfig(min_steps=1, max_steps=300)
        assert cfg.ema_beta * 0.01 == cfg.threshold
        seq = list(30.0 + 0.01 * np.arange(cfg.max_steps + 1))
        record = run_scripted_phase(monkeypatch, seq, cfg)
        ok = record.steps == 300
        assert report("6 threshold-equality", ok,
                      f"ran to max_steps ({record.steps}) under strict s < t")


class TestCriterion7IoRoundTrips:
    def test_hundred_seeded_fixtures(self):
        rng = np.random.default_rng(0)
        colmap_bad = ply_bad = pfm_bad = 0
        for seed in range(100):
            scene = synth_scene(seed, 12, ("cloud", "textured_wall", "grid")[seed % 3])
            cams = {i + 1: c for i, c in enumerate(
                synth_cameras(seed, 3, scene, "arc", width=32, height=32))}

            recon = sio.cameras_to_reconstruction(cams)
            cam_text, img_text = sio.write_colmap_text(recon)
            back = sio.parse_colmap_text(cam_text, img_text)
            for iid, im in recon.images.items():
                got = back.images[iid]
                if (np.max(np.abs(got.q - im.q)) > 1e-9
                        or np.max(np.abs(got.t - im.t)) > 1e-9):
                    colmap_bad += 1
                bc, cc = back.cameras[im.camera_id], recon.cameras[im.camera_id]
                if abs(bc.fx - cc.fx) > 1e-9 or abs(bc.cy - cc.cy) > 1e-9:
                    colmap_bad += 1

            ply = sio.read_ply_gaussians(sio.write_ply_gaussians(scene))
            f32 = np.float32
            if not (np.array_equal(f32(ply.positions), f32(scene.positions))
                    and np.allclose(ply.scales, scene.scales, rtol=3e-7)
                    and np.allclose(ply.opacities, scene.opacities, atol=3e-7)
                    and np.array_equal(f32(ply.colors), f32(scene.colors))):
                ply_bad += 1

            image = rng.random((8, 8, 3)).astype(np.float32).astype(float)
            if not np.array_equal(sio.read_image(sio.write_image(image, "pfm")), image):
                pfm_bad += 1
        ok = colmap_bad == 0 and ply_bad == 0 and pfm_bad == 0
        assert report("7 io-round-trips", ok,
                      f"100 fixtures: colmap {colmap_bad}, ply {ply_bad}, "
                      f"pfm {pfm_bad} failures")


class TestCriterion8Determinism:
    def test_cmd_calibrate_byte_identical(self, tmp_path):
        synth = tmp_path / "synth"
        args = ["synth", "--out", str(synth), "--seed", "3",
                "--set", "synth_gaussians=200", "--set", "synth_camera_count=3",
                "--set", "width=48", "--set", "height=48"]
        assert cli_main(args) == 0
        pert = tmp_path / "pert"
        assert cli_main(["perturb", "--cameras", str(synth / "cameras.txt"),
                         "--images", str(synth / "images.txt"), "--out", str(pert),
                         "--set", "perturb_dt=0.005", "--seed", "4"]) == 0
        outs = []
        for run_dir in ("a", "b"):
            out = tmp_path / run_dir
            assert cli_main(["calibrate", "--scene", str(synth / "scene.ply"),
                             "--cameras", str(pert / "cameras.txt"),
                             "--images", str(pert / "images.txt"),
                             "--targets", str(synth / "targets"), "--out", str(out),
                             "--set", "model_steps=10", "--phases", "2",
                             "--set", "max_steps=150", "--seed", "1"]) == 0
            outs.append(out)
        diffs = [name for name in ("report.json", "cameras.txt", "images.txt",
                                   "scene_refined.ply", "trace.csv")
                 if (outs[0] / name).read_bytes() != (outs[1] / name).read_bytes()]
        ok = not diffs
        assert report("8 determinism", ok,
                      f"two cmd_calibrate runs byte-identical"
                      + (f"; differing: {diffs}" if diffs else ""))


class TestPinnedDefaults:
    def test_schedule_and_optimizer_defaults(self):
        cfg = ScheduleConfig()
        opt = OptimizerConfig()
        pins = [
            cfg.model_steps == 3000, cfg.min_steps == 100, cfg.max_steps == 1000,
            cfg.threshold == 0.0002, cfg.ema_beta == 1.0 / 50.0, cfg.n_phases == 5,
            cfg.camera_loss == "l2", cfg.model_loss == "l1",
            cfg.reparam_after_phase == 1,
            opt.beta1 == 0.9, opt.beta2 == 0.999, opt.eps == 1e-8,
            opt.camera.translation == 1e-3, opt.camera.quaternion == 1e-4,
            opt.camera.fov == 1e-4, opt.camera.abc == 1e-3,
            opt.model.position == 1.6e-4, opt.model.scale == 5e-3,
            opt.model.rotation == 1e-3, opt.model.opacity == 5e-2,
            opt.model.color == 2.5e-3,
        ]
        ok = all(pins)
        assert report("pinned-defaults", ok,
                      f"{sum(pins)}/{len(pins)} schedule/optimizer defaults match")


class TestCriterion9EigenSolver:
    def test_thousand_random_matrices(self):
        rng = np.random.default_rng(99)
        worst_resid = worst_orth = 0.0
        for _ in range(1000):
            a = rng.normal(size=(3, 3)) * 10.0 ** rng.uniform(-2, 2)
            H = 0.5 * (a + a.T)
            eigvals, E = eigen3_sym(H)
            norm = np.linalg.norm(H)
            resid = np.linalg.norm(H @ E - E @ np.diag(eigvals)) / max(norm, 1e-300)
            orth = np.max(np.abs(E.T @ E - np.eye(3)))
            worst_resid = max(worst_resid, resid)
            worst_orth = max(worst_orth, orth)
        ok = worst_resid < 1e-8 and worst_orth < 1e-9
        assert report("9 eigen-solver", ok,
                      f"1000 matrices: max residual {worst_resid:.1e} < 1e-8, "
                      f"max orthogonality error {worst_orth:.1e} < 1e-9")
