import csv
import hashlib
from decimal import Decimal

import numpy as np
import pytest
from PIL import Image

from wsinr.config import resolve
from wsinr.data import ImagePyramid, SlidePyramid
from wsinr.errors import ConfigError, DomainError, ShapeError
from wsinr.experiments import protocols
from wsinr.experiments.protocols import (
    arm_config,
    decouple_hash_levels,
    default_split,
    eval_cross_resolution,
    format_pct,
    load_slides,
    pct_change,
    summarize_cross_resolution,
    write_table1,
)
from wsinr.experiments.report import emit_report
from wsinr.experiments.spectrum import fft2, fft2_magnitude, fft_last_axis
from wsinr.pipeline import make_encoder, run_ito


class TestFFT:
    @pytest.mark.parametrize("n", [1, 2, 4, 8, 64, 256])
    def test_matches_numpy_1d(self, n):
        x = np.random.default_rng(n).standard_normal((3, n)) + 1j * np.random.default_rng(n + 1).standard_normal((3, n))
        assert np.allclose(fft_last_axis(x), np.fft.fft(x, axis=-1), atol=1e-10 * max(n, 1))

    @pytest.mark.parametrize("n", [2, 16, 64])
    def test_matches_numpy_2d(self, n):
        x = np.random.default_rng(n).random((n, n))
        assert np.allclose(fft2(x), np.fft.fft2(x), atol=1e-9)

    def test_constant_patch_is_all_dc(self):
        rep = fft2_magnitude(np.full((16, 16), 0.7))
        assert rep.band_energy[0] == pytest.approx(rep.spectral_energy, rel=1e-12)
        assert rep.band_energy[1:].sum() < 1e-20
        assert np.unravel_index(np.argmax(rep.log_magnitude), (16, 16)) == (8, 8)

    def test_horizontal_sinusoid_gives_symmetric_peaks(self):
        P, k = 32, 5
        x = np.cos(2 * np.pi * k * np.arange(P) / P)
        rep = fft2_magnitude(np.tile(x, (P, 1)))
        lm = rep.log_magnitude
        peaks = sorted(zip(*np.unravel_index(np.argsort(lm.ravel())[-2:], lm.shape)))
        assert peaks == [(16, 16 - k), (16, 16 + k)]

    @pytest.mark.parametrize("seed", range(5))
    def test_parseval(self, seed):
        patch = np.random.default_rng(seed).random((64, 64, 3))
        assert fft2_magnitude(patch).parseval_rel_err < 1e-6

    def test_rejects_bad_sizes(self):
        with pytest.raises(ShapeError):
            fft2_magnitude(np.zeros((12, 12)))
        with pytest.raises(ShapeError):
            fft2_magnitude(np.zeros((8, 16)))


class TestPercentChange:
    PRINTED = [
        (0.2417, 0.1664, "-31.15%"),
        (0.2417, 0.1683, "-30.37%"),
        (0.2417, 0.2333, "-3.48%"),
        (0.2417, 0.3048, "+26.11%"),
        (0.4858, 0.2418, "-50.23%"),
        (0.4858, 0.2221, "-54.28%"),
        (0.1534, 0.1146, "-25.29%"),
        (0.1534, 0.0979, "-36.18%"),
    ]

    @pytest.mark.parametrize("base, value, printed", PRINTED)
    def test_printed_deltas(self, base, value, printed):
        assert format_pct(value, base) == printed

    def test_zero_change(self):
        assert format_pct(0.5, 0.5) == "+0.00%"

    def test_half_up(self):
        assert pct_change(1.00005, 1.0) == Decimal("0.01")

    def test_zero_base(self):
        with pytest.raises(ZeroDivisionError):
            pct_change(0.1, 0.0)


class TestAblationConfig:
    def test_arms_differ_only_in_encoder(self):
        cfg = resolve("desk-scale")
        for arm in ("hash", "nerf-pe", "none"):
            a = arm_config(cfg, arm)
            assert a.experiment.encoder == arm and a.model == cfg.model and a.train == cfg.train

    def test_unknown_arm(self):
        with pytest.raises(ConfigError):
            arm_config(resolve("smoke"), "siren")


@pytest.fixture(scope="module")
def cross(smoke_cfg, smoke_state):
    test = load_slides(smoke_cfg, "test")
    return eval_cross_resolution(smoke_cfg, smoke_state.model, test)


class TestProtocols:
    def test_rows(self, cross, smoke_cfg):
        assert len(cross) == 2 * smoke_cfg.data.n_test * 3
        assert {r.pct_change for r in cross if r.level == "base"} == {""}

    def test_modes_share_base_dice(self, cross):
        base = {(r.mode, r.slide): r.dice for r in cross if r.level == "base"}
        for (mode, slide), d in base.items():
            assert base[("base-resolution-opt", slide)] == d

    def test_table1_layout(self, cross, tmp_path):
        write_table1(tmp_path / "t.csv", cross)
        rows = list(csv.DictReader(open(tmp_path / "t.csv")))
        assert list(rows[0]) == ["mode", "slide", "level", "dice", "pct_change"]
        means = [r for r in rows if r["slide"] == "mean"]
        assert len(means) == 6
        summ = summarize_cross_resolution(cross)
        for r in means:
            assert float(r["dice"]) == pytest.approx(summ[(r["mode"], r["level"])], abs=5e-7)

    def test_optimization_never_sees_masks(self, smoke_cfg, smoke_state, monkeypatch):
        seen = []

        def guarded(fn):
            def inner(images, *a, **k):
                assert not isinstance(images, SlidePyramid)
                seen.append(type(images))
                return fn(images, *a, **k)

            return inner

        monkeypatch.setattr(protocols, "run_ito", guarded(protocols.run_ito))
        monkeypatch.setattr(protocols, "infer_dense", guarded(protocols.infer_dense))
        eval_cross_resolution(smoke_cfg, smoke_state.model, load_slides(smoke_cfg, "test")[:1])
        assert seen and set(seen) == {ImagePyramid}

    def test_missing_level(self, smoke_cfg, smoke_state):
        s = load_slides(smoke_cfg, "test")[0]
        short = SlidePyramid(s.slide_id, s.images[:2], s.base_shape, s.masks[:2])
        with pytest.raises(DomainError):
            eval_cross_resolution(smoke_cfg, smoke_state.model, [short])

    def test_unknown_mode(self, smoke_cfg, smoke_state):
        with pytest.raises(ConfigError):
            eval_cross_resolution(smoke_cfg, smoke_state.model, [], modes=["joint"])


@pytest.fixture(scope="module")
def fitted(smoke_cfg, smoke_state):
    s = load_slides(smoke_cfg, "test")[0]
    res = run_ito(s, "base", smoke_state.model, make_encoder(smoke_cfg, s.slide_id), smoke_cfg.ito, smoke_cfg.data.window)
    return s, res.encoder


class TestDecouple:
    def test_default_split_is_direct_count(self, fitted):
        _, enc = fitted
        assert default_split(enc) == sum(m == "direct" for m in enc.level_modes)
        assert 1 <= default_split(enc) <= enc.config.levels - 1

    @pytest.mark.parametrize("level", ["base", "base/2"])
    def test_variants_have_level_dimensions(self, fitted, smoke_cfg, smoke_state, level):
        s, enc = fitted
        out = decouple_hash_levels(s, level, smoke_state.model, enc, smoke_cfg.data.window, patch=32)
        k = ("base", "base/2").index(level)
        assert set(out) == {"full", "low-only", "high-only"}
        for r in out.values():
            assert r.mask.shape == s.level_shape(k)
            assert r.spectrum.parseval_rel_err < 1e-6

    @pytest.mark.parametrize("split", [0, 8])
    def test_split_bounds(self, fitted, smoke_cfg, smoke_state, split):
        s, enc = fitted
        with pytest.raises(DomainError):
            decouple_hash_levels(s, "base", smoke_state.model, enc, 32, split)

    def test_needs_hash_encoder(self, fitted, smoke_state):
        from wsinr.encoding import FixedEncoder

        with pytest.raises(ConfigError):
            decouple_hash_levels(fitted[0], "base", smoke_state.model, FixedEncoder("none"), 32)


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and (p.name.startswith("report") or p.parent.name == "figures"):
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class TestReport:
    def test_regeneration_is_byte_identical(self, smoke_run):
        emit_report(smoke_run)
        first = _digest(smoke_run)
        emit_report(smoke_run)
        assert _digest(smoke_run) == first

    def test_missing_arm_marked_absent(self, smoke_run):
        (smoke_run / "table2.csv").write_text("arm,level,dice\nhash,base,0.5\nhash,base/2,0.4\nhash,base/4,0.3\n")
        text = emit_report(smoke_run).read_text()
        assert "| none | absent | absent | absent |" in text
        assert "| hash | 0.5000 | 0.4000 | 0.3000 |" in text

    def test_panels_match_source_dimensions(self, smoke_run):
        emit_report(smoke_run)
        panels = sorted((smoke_run / "figures").glob("panel_*.png"))
        assert panels
        for p in panels:
            slide, lvl = p.stem[len("panel_") :].split("_", 1)
            src = Image.open(smoke_run / "outputs" / slide / lvl / "mask.png")
            w, h = src.size
            assert Image.open(p).size == (3 * w, h)

    def test_partial_report_on_empty_dir(self, tmp_path):
        text = emit_report(tmp_path).read_text()
        assert "## Missing inputs" in text and "- table1.csv" in text
