"""Evaluation tests: accuracy protocol, PR sweep vs counting oracle, export."""

import numpy as np
import pytest

from adl import datagen as dg
from adl import evaluation as ev
from adl import harness
from adl.errors import EvaluationError, InputError


@pytest.fixture(scope="module")
def mini_world():
    config = dg.DatasetConfig(train_per_class=1, test_per_class=1)
    train, test = dg.generate_dataset(config, seed=11)
    run = harness.RunConfig(role="teacher-flow", epochs=0, widths=(4, 6, 8), seed=2)
    teacher = harness.train_teacher(train, run)
    student = harness.train_student(
        train, harness.RunConfig(role="student-rgb-baseline", epochs=0,
                                 widths=(4, 6, 8), seed=2))
    oracle = harness.train_student(
        train, harness.RunConfig(role="student-rgb-oracle-attn", epochs=0,
                                 widths=(4, 6, 8), seed=2), teacher=teacher)
    return train, test, teacher, student, oracle


class TestMeanClassAccuracy:
    def test_perfect_predictor(self):
        labels = np.repeat(np.arange(4), 8)
        assert ev.mean_class_accuracy(labels.copy(), labels) == 1.0

    def test_chance_level(self):
        rng = np.random.default_rng(0)
        labels = np.repeat(np.arange(16), 8)
        pred = rng.integers(0, 16, size=labels.size)
        assert ev.mean_class_accuracy(pred, labels) == pytest.approx(0.0625, abs=0.03)

    def test_class_weighting(self):
        # 9 of class 0 all right, 1 of class 1 wrong: mean class = 0.5
        labels = np.array([0] * 9 + [1])
        pred = np.array([0] * 9 + [0])
        assert ev.mean_class_accuracy(pred, labels) == 0.5

    def test_length_mismatch(self):
        with pytest.raises(InputError):
            ev.mean_class_accuracy(np.zeros(3), np.zeros(4))


class TestEvaluateAccuracy:
    def test_teacher_and_student_run(self, mini_world):
        _, test, teacher, student, _ = mini_world
        for ckpt in (teacher, student):
            acc = ev.evaluate_accuracy(ckpt, test)
            assert 0.0 <= acc <= 1.0

    def test_deterministic(self, mini_world):
        _, test, teacher, _, _ = mini_world
        assert ev.evaluate_accuracy(teacher, test) == ev.evaluate_accuracy(teacher, test)

    def test_oracle_needs_reference(self, mini_world):
        _, test, teacher, student, oracle = mini_world
        with pytest.raises(EvaluationError):
            ev.evaluate_accuracy(oracle, test)
        with pytest.raises(EvaluationError):
            ev.evaluate_accuracy(oracle, test, teacher=student)
        acc = ev.evaluate_accuracy(oracle, test, teacher=teacher)
        assert 0.0 <= acc <= 1.0

    def test_modality_mismatch(self, mini_world):
        train, test, teacher, student, _ = mini_world
        rgb_as_flow = dg.Dataset(rgb=test.rgb, flow=test.rgb,
                                 labels=test.labels, boxes=test.boxes)
        with pytest.raises(EvaluationError):
            ev.evaluate_accuracy(teacher, rgb_as_flow)
        flow_as_rgb = dg.Dataset(rgb=test.flow, flow=test.flow,
                                 labels=test.labels, boxes=test.boxes)
        with pytest.raises(EvaluationError):
            ev.evaluate_accuracy(student, flow_as_rgb)

    def test_static_dataset_reversal_is_identity(self):
        config = dg.DatasetConfig(motions=("static",), train_per_class=2,
                                  test_per_class=2)
        train, test = dg.generate_dataset(config, seed=3)
        ckpt = harness.train_student(
            train, harness.RunConfig(role="student-rgb-baseline", epochs=0,
                                     widths=(4, 6, 8), num_classes=4))
        fwd = ev.evaluate_accuracy(ckpt, test)
        rev = ev.evaluate_accuracy(ckpt, test, reversed_clips=True)
        assert fwd == rev

    def test_arrow_of_time_report(self, mini_world):
        _, test, teacher, _, _ = mini_world
        report = ev.arrow_of_time_report(teacher, test)
        assert report["drop"] == pytest.approx(report["forward"] - report["reversed"])


class TestBilinearResize:
    def test_identity(self):
        plane = np.random.default_rng(0).random((8, 8))
        assert np.allclose(ev.bilinear_resize(plane, 8, 8), plane)

    def test_constant(self):
        plane = np.full((4, 4), 0.7)
        out = ev.bilinear_resize(plane, 9, 13)
        assert np.allclose(out, 0.7)

    def test_against_loop_oracle(self):
        rng = np.random.default_rng(1)
        plane = rng.random((3, 5))
        out_h, out_w = 7, 11
        got = ev.bilinear_resize(plane, out_h, out_w)
        for i in range(out_h):
            for j in range(out_w):
                y = i * (3 - 1) / (out_h - 1)
                x = j * (5 - 1) / (out_w - 1)
                y0, x0 = int(np.floor(y)), int(np.floor(x))
                y1, x1 = min(y0 + 1, 2), min(x0 + 1, 4)
                fy, fx = y - y0, x - x0
                want = (plane[y0, x0] * (1 - fy) * (1 - fx)
                        + plane[y0, x1] * (1 - fy) * fx
                        + plane[y1, x0] * fy * (1 - fx)
                        + plane[y1, x1] * fy * fx)
                assert got[i, j] == pytest.approx(want, abs=1e-12)

    def test_corners_preserved(self):
        plane = np.random.default_rng(2).random((4, 4))
        out = ev.bilinear_resize(plane, 16, 16)
        assert out[0, 0] == pytest.approx(plane[0, 0])
        assert out[-1, -1] == pytest.approx(plane[-1, -1])


class TestTemporalExpansion:
    def test_four_to_sixteen(self):
        amap = np.arange(4)[:, None, None] * np.ones((1, 2, 2))
        out = ev.expand_map_to_frames(amap, 16)
        assert out.shape == (16, 2, 2)
        assert np.array_equal(out[:, 0, 0],
                              np.repeat(np.arange(4), 4).astype(float))

    def test_single_slice(self):
        amap = np.random.default_rng(0).random((1, 3, 3))
        out = ev.expand_map_to_frames(amap, 5)
        assert all(np.array_equal(out[t], amap[0]) for t in range(5))


def oracle_curve(planes, tights, wides, recall_dilated=False):
    """Exhaustive per-threshold counting over explicit pixel sets."""
    values = np.concatenate([p.ravel() for p in planes])
    tight = np.concatenate([t.ravel() for t in tights])
    wide = np.concatenate([w.ravel() for w in wides])
    rmask = wide if recall_dilated else tight
    points = []
    for th in np.unique(values):
        predicted = values >= th
        n = predicted.sum()
        tp = (predicted & wide).sum()
        rec_hits = (predicted & rmask).sum()
        precision = tp / n if n else 0.0
        recall = rec_hits / rmask.sum() if rmask.sum() else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        points.append((float(th), precision, recall, f1))
    return points


class TestLocalizationPR:
    def toy_case(self):
        # 8x8 frame, 3x3 box at (2,3), four-level map, tolerance 1 at R=8
        plane = np.zeros((8, 8))
        plane[3:6, 2:5] = 0.9          # exactly the box
        plane[0, 0] = 0.5
        plane[7, 7] = 0.2
        maps = plane[None, None]       # one clip, one slice
        boxes = np.array([[[2, 3, 5, 6]]])
        return maps, boxes

    def test_toy_matches_counting_oracle(self):
        maps, boxes = self.toy_case()
        report = ev.localization_pr(maps, boxes, frame_size=(8, 8), resolution=8)
        assert report.tolerance == 1
        tight = np.zeros((8, 8), dtype=bool)
        tight[3:6, 2:5] = True
        wide = np.zeros((8, 8), dtype=bool)
        wide[2:7, 1:6] = True
        want = oracle_curve([maps[0, 0]], [tight], [wide])
        assert len(report.curve) == len(want)
        for point, (th, p, r, f1) in zip(report.curve, want):
            assert point.threshold == pytest.approx(th)
            assert point.precision == pytest.approx(p)
            assert point.recall == pytest.approx(r)
            assert point.f1 == pytest.approx(f1)

    def test_perfect_map(self):
        maps = np.zeros((1, 1, 8, 8))
        maps[0, 0, 3:6, 2:5] = 1.0 / 9
        boxes = np.array([[[2, 3, 5, 6]]])
        report = ev.localization_pr(maps, boxes, frame_size=(8, 8), resolution=8)
        top = max(report.curve, key=lambda p: p.threshold)
        assert top.precision == 1.0 and top.recall == 1.0 and top.f1 == 1.0
        assert report.best.f1 == 1.0

    def test_mass_outside_tolerance_zone(self):
        maps = np.zeros((1, 1, 8, 8))
        maps[0, 0, 7, 7] = 1.0
        boxes = np.array([[[0, 0, 3, 3]]])
        report = ev.localization_pr(maps, boxes, frame_size=(8, 8), resolution=8)
        top = max(report.curve, key=lambda p: p.threshold)
        assert top.precision == 0.0 and top.f1 == 0.0

    def test_recall_monotone_in_threshold(self):
        rng = np.random.default_rng(7)
        maps = rng.random((3, 2, 8, 8))
        boxes = np.tile(np.array([1, 1, 5, 5]), (3, 8, 1))
        report = ev.localization_pr(maps, boxes, frame_size=(8, 8), resolution=8)
        recalls = [p.recall for p in report.curve]  # thresholds ascend
        assert all(a >= b - 1e-12 for a, b in zip(recalls, recalls[1:]))

    def test_tolerance_zero_changes_precision_not_recall(self):
        rng = np.random.default_rng(8)
        maps = rng.random((2, 2, 8, 8))
        boxes = np.tile(np.array([2, 2, 6, 6]), (2, 8, 1))
        with_tol = ev.localization_pr(maps, boxes, frame_size=(8, 8), resolution=8)
        no_tol = ev.localization_pr(maps, boxes, frame_size=(8, 8), resolution=8,
                                    tolerance_base=0)
        assert no_tol.tolerance == 0
        for a, b in zip(with_tol.curve, no_tol.curve):
            assert a.recall == pytest.approx(b.recall)
        assert any(a.precision > b.precision + 1e-9
                   for a, b in zip(with_tol.curve, no_tol.curve))

    def test_recall_dilated_flag(self):
        maps, boxes = self.toy_case()
        tight_r = ev.localization_pr(maps, boxes, frame_size=(8, 8), resolution=8)
        wide_r = ev.localization_pr(maps, boxes, frame_size=(8, 8), resolution=8,
                                    recall_dilated=True)
        # same box pixels predicted, larger denominator under dilation
        top_t = max(tight_r.curve, key=lambda p: p.threshold)
        top_w = max(wide_r.curve, key=lambda p: p.threshold)
        assert top_w.recall < top_t.recall

    def test_per_class_reports(self):
        rng = np.random.default_rng(9)
        maps = rng.random((4, 1, 8, 8))
        boxes = np.tile(np.array([2, 2, 6, 6]), (4, 4, 1))
        labels = np.array([0, 0, 1, 1])
        report = ev.localization_pr(maps, boxes, frame_size=(8, 8), resolution=8,
                                    labels=labels)
        assert set(report.per_class) == {0, 1}
        solo = ev.localization_pr(maps[2:], boxes[2:], frame_size=(8, 8),
                                  resolution=8)
        assert report.per_class[1].f1 == pytest.approx(solo.best.f1)

    def test_report_lines_format(self):
        maps, boxes = self.toy_case()
        report = ev.localization_pr(maps, boxes, frame_size=(8, 8), resolution=8,
                                    labels=np.array([3]))
        lines = report.lines()
        assert len(lines) == 1
        cols = lines[0].split()
        assert cols[0] == "3" and len(cols) == 5

    def test_empty_inputs_rejected(self):
        with pytest.raises(InputError):
            ev.localization_pr(np.zeros((0, 1, 4, 4)), np.zeros((0, 1, 4)),
                               frame_size=(8, 8))
        with pytest.raises(InputError):
            ev.localization_pr(np.zeros((2, 1, 4, 4)), np.zeros((1, 1, 4)),
                               frame_size=(8, 8))

    def test_default_tolerance_scaling(self):
        maps = np.full((1, 1, 4, 4), 0.25)
        boxes = np.array([[[10, 10, 17, 17]]])
        report = ev.localization_pr(maps, boxes, frame_size=(32, 32))
        assert report.resolution == 32
        assert report.tolerance == 6  # round(10 * 32 / 56)


class TestCenterPrior:
    def test_symmetry_and_normalization(self):
        maps = ev.center_prior_baseline((4,), resolution=32)
        assert maps.shape == (4, 32, 32)
        for sl in maps:
            assert sl.sum() == pytest.approx(1.0, abs=1e-6)
            assert np.allclose(sl, sl[::-1, :])
            assert np.allclose(sl, sl[:, ::-1])

    def test_matches_formula_oracle(self):
        res, sigma = 32, 8.0
        maps = ev.center_prior_baseline((1,), resolution=res, sigma=sigma)
        center = (res - 1) / 2
        want = np.empty((res, res))
        for i in range(res):
            for j in range(res):
                r2 = (i - center) ** 2 + (j - center) ** 2
                want[i, j] = np.exp(-r2 / (2 * sigma ** 2))
        want /= want.sum()
        assert np.allclose(maps[0], want, atol=1e-6)

    def test_default_sigma_is_quarter_resolution(self):
        a = ev.center_prior_baseline((1,), resolution=32)
        b = ev.center_prior_baseline((1,), resolution=32, sigma=8.0)
        assert np.array_equal(a, b)

    def test_bad_sigma(self):
        with pytest.raises(InputError):
            ev.center_prior_baseline((2,), sigma=0.0)


class TestExport:
    def test_uniform_pgm_all_255(self, tmp_path):
        amap = np.full((2, 4, 4), 0.0625)
        files = ev.export_attention(amap, str(tmp_path / "u"), fmt="pgm")
        assert len(files) == 2
        blob = open(files[0], "rb").read()
        header, pixels = blob.split(b"255\n", 1)
        assert header.startswith(b"P5\n4 4\n")
        assert pixels == b"\xff" * 16

    def test_delta_pgm_single_peak(self, tmp_path):
        amap = np.zeros((1, 4, 4))
        amap[0, 1, 2] = 1.0
        files = ev.export_attention(amap, str(tmp_path / "d"), fmt="pgm")
        pixels = np.frombuffer(open(files[0], "rb").read().split(b"255\n", 1)[1],
                               dtype=np.uint8)
        assert (pixels == 255).sum() == 1
        assert pixels[1 * 4 + 2] == 255

    def test_csv_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        amap = rng.random((3, 5, 7))
        files = ev.export_attention(amap, str(tmp_path / "m"), fmt="csv")
        back = ev.read_attention_csv(files[0])
        assert back.shape == (3, 5, 7)
        assert np.allclose(back, amap, atol=1e-6)

    def test_unknown_format(self, tmp_path):
        with pytest.raises(InputError):
            ev.export_attention(np.zeros((1, 2, 2)), str(tmp_path / "x"), fmt="png")

    def test_non_clip_shape_rejected(self, tmp_path):
        with pytest.raises(InputError):
            ev.export_attention(np.zeros((2, 2)), str(tmp_path / "x"))

    def test_csv_header_required(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("1,2\n3,4\n")
        with pytest.raises(InputError):
            ev.read_attention_csv(str(p))


class TestMotionMaps:
    def test_shapes_per_source(self, mini_world):
        _, test, teacher, student, oracle = mini_world
        for ckpt, needs in ((teacher, None), (student, None), (oracle, teacher)):
            maps = ev.motion_attention_maps(ckpt, test, teacher=needs)
            assert maps.shape == (len(test), 4, 8, 8)
            sums = maps.sum(axis=(-2, -1))
            assert np.allclose(sums, 1.0, atol=1e-4)

    def test_oracle_maps_equal_teacher_reference(self, mini_world):
        _, test, teacher, _, oracle = mini_world
        from adl.harness import model_from_checkpoint
        import adl.autodiff as ad
        tmodel, _ = model_from_checkpoint(teacher)
        want = tmodel.reference_attention(ad.Tensor(test.flow[:4])).data
        got = ev.motion_attention_maps(oracle, test, teacher=teacher)[:4]
        assert np.allclose(got, want, atol=1e-6)
