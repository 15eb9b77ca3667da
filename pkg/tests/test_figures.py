"""Figure rendering smoke tests: files exist, parsers round-trip."""

import numpy as np
import pytest

from adl import figures
from adl.errors import InputError
from adl.evaluation import LocalizationReport, PRPoint


def png_ok(path):
    with open(path, "rb") as fh:
        return fh.read(8) == b"\x89PNG\r\n\x1a\n"


class TestPrCurve:
    def test_writes_png(self, tmp_path):
        curve = [PRPoint(0.1 * i, 1.0 - 0.1 * i, 0.1 * i, 0.1) for i in range(10)]
        report = LocalizationReport(curve=curve, best=curve[5], per_class={},
                                    resolution=32, tolerance=6)
        out = figures.save_pr_curve(report, str(tmp_path / "pr.png"))
        assert png_ok(out)


class TestOverlay:
    def test_writes_png(self, tmp_path):
        rng = np.random.default_rng(0)
        clip = rng.random((16, 32, 32, 3)).astype(np.float32)
        amap = rng.dirichlet(np.ones(64), size=4).reshape(4, 8, 8)
        out = figures.save_attention_overlay(clip, amap, str(tmp_path / "ov.png"))
        assert png_ok(out)

    def test_bad_shapes(self, tmp_path):
        with pytest.raises(InputError):
            figures.save_attention_overlay(np.zeros((4, 4, 3)), np.zeros((1, 2, 2)),
                                           str(tmp_path / "x.png"))


class TestTrainingCurves:
    def make_log(self, tmp_path):
        lines = []
        for epoch in range(2):
            for step in range(4):
                total = 2.0 / (1 + epoch + 0.1 * step)
                lines.append(f"{epoch} {step} {total * 0.9:.6g} 0.01 0.02 "
                             f"{total:.6g} 0.01")
            lines.append(f"# epoch {epoch} mean_total {1.5 / (1 + epoch):.6g} "
                         f"accuracy 0.5 lr 0.01")
        p = tmp_path / "run.log"
        p.write_text("\n".join(lines) + "\n")
        return p

    def test_parse(self, tmp_path):
        p = self.make_log(tmp_path)
        steps, epochs = figures.parse_training_log(str(p))
        assert steps.shape == (8, 7)
        assert len(epochs) == 2
        assert epochs[1][0] == 1

    def test_writes_png(self, tmp_path):
        p = self.make_log(tmp_path)
        out = figures.save_training_curves(str(p), str(tmp_path / "curve.png"))
        assert png_ok(out)

    def test_empty_log_rejected(self, tmp_path):
        p = tmp_path / "empty.log"
        p.write_text("# epoch 0 mean_total 1 accuracy 0 lr 0.01\n")
        with pytest.raises(InputError):
            figures.parse_training_log(str(p))

    def test_malformed_line_rejected(self, tmp_path):
        p = tmp_path / "bad.log"
        p.write_text("0 0 1.0 2.0\n")
        with pytest.raises(InputError):
            figures.parse_training_log(str(p))


class TestAccuracyBars:
    def test_writes_png(self, tmp_path):
        entries = [("teacher", 0.99, 0.50), ("student", 0.9, 0.7)]
        out = figures.save_accuracy_bars(entries, str(tmp_path / "bars.png"))
        assert png_ok(out)

    def test_empty_rejected(self, tmp_path):
        with pytest.raises(InputError):
            figures.save_accuracy_bars([], str(tmp_path / "x.png"))
