"""Evaluation report assembly and file emission.

Writes report.json (all numbers), delimited CSV tables, a hand-rolled SVG
scatter of the PCA projection, and matplotlib renderings of the PSNR
curves, confusion matrices, and PCA clouds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


class ReportError(ValueError):
    pass


@dataclass
class PsnrEntry:
    config_id: str
    method: str
    mean: float
    std: float
    seen: bool


@dataclass
class PcaCloud:
    points: np.ndarray  # (n, 3)
    labels: np.ndarray
    config_ids: list[str]
    explained: np.ndarray  # (3,)


@dataclass
class EvalReport:
    psnr: list[PsnrEntry]
    confusion: dict[str, np.ndarray]  # method -> row-normalized k x k
    accuracy: dict[str, tuple[float, float]]  # method -> (mean, std)
    pca: dict[str, PcaCloud]  # "raw" / "latent"
    silhouette: dict[str, float]
    metadata: dict

    def to_dict(self) -> dict:
        return {
            "psnr": [
                {"config": e.config_id, "method": e.method, "mean": e.mean,
                 "std": e.std, "seen": e.seen}
                for e in self.psnr
            ],
            "confusion": {m: mat.tolist() for m, mat in self.confusion.items()},
            "accuracy": {m: {"mean": a, "std": s} for m, (a, s) in self.accuracy.items()},
            "pca": {
                which: {
                    "points": cloud.points.tolist(),
                    "labels": cloud.labels.tolist(),
                    "configs": list(cloud.config_ids),
                    "explained": cloud.explained.tolist(),
                }
                for which, cloud in self.pca.items()
            },
            "silhouette": dict(self.silhouette),
            "metadata": self.metadata,
        }

    @staticmethod
    def from_dict(doc: dict) -> "EvalReport":
        return EvalReport(
            psnr=[PsnrEntry(e["config"], e["method"], e["mean"], e["std"], e["seen"])
                  for e in doc["psnr"]],
            confusion={m: np.array(v) for m, v in doc["confusion"].items()},
            accuracy={m: (v["mean"], v["std"]) for m, v in doc["accuracy"].items()},
            pca={
                which: PcaCloud(
                    points=np.array(v["points"]),
                    labels=np.array(v["labels"]),
                    config_ids=list(v["configs"]),
                    explained=np.array(v["explained"]),
                )
                for which, v in doc["pca"].items()
            },
            silhouette=dict(doc["silhouette"]),
            metadata=doc["metadata"],
        )


def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def _dump_json(obj, indent: int = 0) -> str:
    """Deterministic JSON with floats at 17 significant digits."""
    pad = " " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = ",\n".join(
            f'{pad}  {json.dumps(str(key))}: {_dump_json(val, indent + 2)}'
            for key, val in obj.items()
        )
        return "{\n" + items + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        flat = all(not isinstance(v, (dict, list, tuple)) for v in obj)
        if flat:
            return "[" + ", ".join(_dump_json(v) for v in obj) + "]"
        items = ",\n".join(f"{pad}  {_dump_json(v, indent + 2)}" for v in obj)
        return "[\n" + items + "\n" + pad + "]"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, float):
        return format(obj, ".17g")
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    return json.dumps(str(obj))


_CLASS_COLORS = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
    "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
]


def _write_pca_svg(path: Path, cloud: PcaCloud) -> None:
    pts = cloud.points[:, :2]
    lo = pts.min(axis=0)
    span = pts.max(axis=0) - lo
    span[span == 0.0] = 1.0
    width = height = 480.0
    margin = 20.0
    scale = (width - 2 * margin) / span
    config_order = sorted(set(cloud.config_ids))
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" height="{height:.0f}" '
        f'viewBox="0 0 {width:.0f} {height:.0f}">',
        f'<rect x="0" y="0" width="{width:.0f}" height="{height:.0f}" fill="white"/>',
    ]
    for (x, y), label, cid in zip(pts, cloud.labels, cloud.config_ids):
        px = margin + (x - lo[0]) * scale[0]
        py = height - margin - (y - lo[1]) * scale[1]
        color = _CLASS_COLORS[int(label) % len(_CLASS_COLORS)]
        if config_order.index(cid) % 2 == 0:
            lines.append(
                f'<circle cx="{px:.3f}" cy="{py:.3f}" r="3.5" fill="{color}" fill-opacity="0.75"/>'
            )
        else:
            lines.append(
                f'<rect x="{px - 3.0:.3f}" y="{py - 3.0:.3f}" width="6" height="6" '
                f'fill="{color}" fill-opacity="0.75"/>'
            )
    lines.append("</svg>")
    path.write_text("\n".join(lines) + "\n")


def _render_figures(report: EvalReport, out_dir: Path) -> list[Path]:
    written = []
    methods = sorted({e.method for e in report.psnr})
    if methods:
        fig, ax = plt.subplots(figsize=(6, 4))
        configs = []
        for e in report.psnr:
            if e.config_id not in configs:
                configs.append(e.config_id)
        for method in methods:
            by_cfg = {e.config_id: e for e in report.psnr if e.method == method}
            means = [by_cfg[c].mean for c in configs if c in by_cfg]
            stds = [by_cfg[c].std for c in configs if c in by_cfg]
            cfgs = [c for c in configs if c in by_cfg]
            ax.errorbar(cfgs, means, yerr=stds, marker="o", capsize=3, label=method)
        for e in report.psnr:
            if not e.seen:
                ax.axvspan(e.config_id, e.config_id, color="0.85", zorder=0)
        ax.set_xlabel("fiber configuration")
        ax.set_ylabel("PSNR (dB)")
        ax.legend()
        fig.tight_layout()
        p = out_dir / "psnr_curves.png"
        fig.savefig(p)
        plt.close(fig)
        written.append(p)
    for method, mat in report.confusion.items():
        fig, ax = plt.subplots(figsize=(4.5, 4))
        im = ax.imshow(mat, vmin=0.0, vmax=1.0, cmap="viridis")
        fig.colorbar(im, ax=ax)
        ax.set_xlabel("predicted class")
        ax.set_ylabel("true class")
        ax.set_title(f"confusion ({method})")
        fig.tight_layout()
        p = out_dir / f"confusion_{method}.png"
        fig.savefig(p)
        plt.close(fig)
        written.append(p)
    for which, cloud in report.pca.items():
        fig, ax = plt.subplots(figsize=(5, 4.5))
        config_order = sorted(set(cloud.config_ids))
        markers = ["o", "s", "^", "D", "v", "P", "X"]
        for ci, cid in enumerate(config_order):
            sel = np.array([c == cid for c in cloud.config_ids])
            ax.scatter(cloud.points[sel, 0], cloud.points[sel, 1],
                       c=[_CLASS_COLORS[int(l) % len(_CLASS_COLORS)] for l in cloud.labels[sel]],
                       marker=markers[ci % len(markers)], s=18, alpha=0.75,
                       label=cid)
        ax.set_xlabel("PC 1")
        ax.set_ylabel("PC 2")
        ax.set_title(f"PCA ({which})")
        ax.legend()
        fig.tight_layout()
        p = out_dir / f"pca_{which}.png"
        fig.savefig(p)
        plt.close(fig)
        written.append(p)
    return written


def emit_report(report: EvalReport, out_dir, figures: bool = True) -> list[Path]:
    """Write all report artifacts; returns the list of written paths."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ReportError(f"output directory {out_dir} is not writable: {exc}") from exc

    written: list[Path] = []

    path = out_dir / "report.json"
    path.write_text(_dump_json(report.to_dict()) + "\n")
    written.append(path)

    path = out_dir / "psnr.csv"
    rows = ["config,method,mean,std"]
    rows += [f"{e.config_id},{e.method},{_fmt(e.mean)},{_fmt(e.std)}" for e in report.psnr]
    path.write_text("\n".join(rows) + "\n")
    written.append(path)

    for method, mat in report.confusion.items():
        path = out_dir / f"confusion_{method}.csv"
        rows = [",".join(_fmt(float(v)) for v in row) for row in mat]
        path.write_text("\n".join(rows) + "\n")
        written.append(path)

    for which, cloud in report.pca.items():
        path = out_dir / f"pca_{which}.csv"
        rows = ["x,y,z,label,config"]
        for pt, label, cid in zip(cloud.points, cloud.labels, cloud.config_ids):
            rows.append(
                f"{_fmt(float(pt[0]))},{_fmt(float(pt[1]))},{_fmt(float(pt[2]))},{int(label)},{cid}"
            )
        path.write_text("\n".join(rows) + "\n")
        written.append(path)
        svg = out_dir / f"pca_{which}.svg"
        _write_pca_svg(svg, cloud)
        written.append(svg)

    if figures:
        written += _render_figures(report, out_dir)
    return written
