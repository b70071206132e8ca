"""Markdown report, figures and a file manifest from a run directory."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from ..config import ENCODER_KINDS  # noqa: E402
from ..data import LEVEL_TAGS, tag_filename  # noqa: E402

PANEL_PARTS = ("reconstruction.png", "probmap.png", "mask.png")
# no timestamps or version strings, so regenerated figures are byte-identical
_PNG_META = {"Software": None}


def _read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _md_table(header: list[str], rows: list[list[str]]) -> list[str]:
    out = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    out += ["| " + " | ".join(r) + " |" for r in rows]
    return out


def _save(fig, path: Path) -> None:
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def _bar_chart(groups: dict[str, dict[str, float]], title: str, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    names = list(groups)
    width = 0.8 / max(len(names), 1)
    x = np.arange(len(LEVEL_TAGS))
    for i, name in enumerate(names):
        vals = [groups[name].get(t, np.nan) for t in LEVEL_TAGS]
        ax.bar(x + i * width - 0.4 + width / 2, vals, width, label=name)
    ax.set_xticks(x, LEVEL_TAGS)
    ax.set_ylim(0, 1)
    ax.set_ylabel("Dice")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def _panel(parts: list[Path], path: Path) -> tuple[int, int]:
    """Side-by-side strip at the source resolution; returns (height, width) of one tile."""
    ims = [Image.open(p).convert("RGB") for p in parts]
    h, w = ims[0].size[1], ims[0].size[0]
    strip = Image.new("RGB", (w * len(ims), h))
    for i, im in enumerate(ims):
        strip.paste(im, (i * w, 0))
    strip.save(path, optimize=False)
    return h, w


def emit_report(run_dir: str | Path) -> Path:
    """Render whatever the run directory holds; absent inputs are listed, not fatal."""
    run = Path(run_dir)
    fig_dir = run / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    written: list[str] = []
    missing: list[str] = []
    md = [f"# Run report: {run.name}", ""]

    cfg_path = run / "config.json"
    if cfg_path.exists():
        cfg = json.loads(cfg_path.read_text())
        md += ["## Configuration", ""]
        md += [f"- preset: {cfg.get('preset')}", f"- seed: {cfg.get('seed')}", f"- encoder: {cfg.get('experiment.encoder')}"]
        hash_path = run / "config.hash"
        if hash_path.exists():
            md.append(f"- config hash: {hash_path.read_text().strip()}")
        md.append("")
    else:
        missing.append("config.json")

    hist = run / "history.csv"
    if hist.exists():
        rows = _read_csv(hist)
        fig, axes = plt.subplots(1, 2, figsize=(8, 3))
        for ax, stage in zip(axes, ("reconstruction", "segmentation")):
            by_slide: dict[str, list[tuple[int, float]]] = {}
            for r in rows:
                if r["stage"] == stage:
                    by_slide.setdefault(r["slide"], []).append((int(r["epoch"]), float(r["loss"])))
            for sid, pts in sorted(by_slide.items()):
                ax.plot([p[0] for p in pts], [p[1] for p in pts], label=sid)
            ax.set_title(f"{stage} loss")
            ax.set_xlabel("epoch")
            if stage == "reconstruction":
                ax.set_yscale("log")
        axes[0].legend(fontsize=6)
        fig.tight_layout()
        _save(fig, fig_dir / "training_loss.png")
        written.append("figures/training_loss.png")
    else:
        missing.append("history.csv")

    metrics = run / "metrics.csv"
    if metrics.exists():
        rows = _read_csv(metrics)
        md += ["## Metrics", ""]
        md += _md_table(
            ["source", "slide", "level", "dice", "psnr"],
            [[r["source"], r["slide"], r["level"], f"{float(r['dice']):.4f}", f"{float(r['psnr']):.2f}"] for r in rows],
        )
        md.append("")
    else:
        missing.append("metrics.csv")

    t1 = run / "table1.csv"
    if t1.exists():
        rows = [r for r in _read_csv(t1) if r["slide"] == "mean"]
        md += ["## Cross-resolution Dice (mean over test slides)", ""]
        modes: dict[str, dict[str, str]] = {}
        values: dict[str, dict[str, float]] = {}
        for r in rows:
            cell = f"{float(r['dice']):.4f}" + (f" ({r['pct_change']})" if r["pct_change"] else "")
            modes.setdefault(r["mode"], {})[r["level"]] = cell
            values.setdefault(r["mode"], {})[r["level"]] = float(r["dice"])
        md += _md_table(["mode"] + list(LEVEL_TAGS), [[m] + [c.get(t, "absent") for t in LEVEL_TAGS] for m, c in modes.items()])
        md.append("")
        _bar_chart(values, "Cross-resolution Dice", fig_dir / "table1.png")
        written.append("figures/table1.png")
    else:
        missing.append("table1.csv")

    t2 = run / "table2.csv"
    if t2.exists():
        rows = _read_csv(t2)
        arms: dict[str, dict[str, float]] = {}
        for r in rows:
            arms.setdefault(r["arm"], {})[r["level"]] = float(r["dice"])
        md += ["## Encoding ablation (mean test Dice)", ""]
        table = []
        for arm in ENCODER_KINDS:
            if arm in arms:
                table.append([arm] + [f"{arms[arm][t]:.4f}" if t in arms[arm] else "absent" for t in LEVEL_TAGS])
            else:
                table.append([arm] + ["absent"] * len(LEVEL_TAGS))
        md += _md_table(["arm"] + list(LEVEL_TAGS), table)
        md.append("")
        _bar_chart({a: arms[a] for a in ENCODER_KINDS if a in arms}, "Encoding ablation", fig_dir / "table2.png")
        written.append("figures/table2.png")
    else:
        missing.append("table2.csv")

    dec = run / "decouple" / "decouple.csv"
    if dec.exists():
        rows = _read_csv(dec)
        md += ["## Hash-level decoupling", ""]
        md += _md_table(
            ["variant", "psnr", "high-band energy", "parseval rel err"],
            [[r["variant"], f"{float(r['psnr']):.2f}", f"{float(r['high_band_energy']):.4g}", f"{float(r['parseval_rel_err']):.1e}"] for r in rows],
        )
        md.append("")
        fig, axes = plt.subplots(1, len(rows) + 1, figsize=(3 * (len(rows) + 1), 3))
        for ax, r in zip(axes[1:], rows):
            logmag = run / "decouple" / f"{r['variant']}_spectrum.png"
            if logmag.exists():
                ax.imshow(np.asarray(Image.open(logmag)), cmap="magma")
            ax.set_title(r["variant"])
            ax.axis("off")
            bands = run / "decouple" / f"{r['variant']}_bands.csv"
            if bands.exists():
                b = _read_csv(bands)
                axes[0].semilogy([int(x["band"]) for x in b], [max(float(x["energy"]), 1e-12) for x in b], label=r["variant"])
        axes[0].set_xlabel("radial band")
        axes[0].set_title("radial energy")
        axes[0].legend(fontsize=7)
        fig.tight_layout()
        _save(fig, fig_dir / "spectra.png")
        written.append("figures/spectra.png")
        parts = [run / "decouple" / f"{r['variant']}_reconstruction.png" for r in rows]
        if all(p.exists() for p in parts):
            _panel(parts, fig_dir / "decouple_panel.png")
            written.append("figures/decouple_panel.png")
    else:
        missing.append("decouple/decouple.csv")

    outputs = run / "outputs"
    panels = []
    if outputs.exists():
        for slide_dir in sorted(p for p in outputs.iterdir() if p.is_dir()):
            for tag in LEVEL_TAGS:
                lvl = slide_dir / tag_filename(tag)
                parts = [lvl / name for name in PANEL_PARTS]
                if all(p.exists() for p in parts):
                    name = f"figures/panel_{slide_dir.name}_{tag_filename(tag)}.png"
                    _panel(parts, run / name)
                    written.append(name)
                    panels.append(name)
    if panels:
        md += ["## Reconstruction | lesion probability | mask", ""]
        md += [f"![{p}]({p})" for p in panels]
        md.append("")

    if written:
        md += ["## Figures", ""] + [f"- {p}" for p in written] + [""]
    if missing:
        md += ["## Missing inputs", ""] + [f"- {p}" for p in missing] + [""]
    report = run / "report.md"
    report.write_text("\n".join(md))
    manifest = {"report": "report.md", "figures": written, "missing": missing}
    (run / "report_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return report
