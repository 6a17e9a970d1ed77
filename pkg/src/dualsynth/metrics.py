"""MAE / PSNR (whole image and masked), confidence-map export and ablation tables."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "EmptyRegionError",
    "MetricsReport",
    "mae",
    "psnr",
    "metrics_report",
    "format_psnr",
    "export_confidence",
    "read_pgm",
    "quantize_confidence",
    "ablation_report",
    "MODE_ORDER",
]

MODE_ORDER = ("unet_only", "global_only", "local_only", "dual", "dual_attention")


class EmptyRegionError(ValueError):
    """A mask selected no voxels."""


def _arr(v):
    return np.asarray(getattr(v, "voxels", v), dtype=np.float64)


def _select(y, yhat, mask):
    y, yhat = _arr(y), _arr(yhat)
    if y.shape != yhat.shape:
        raise ValueError(f"extents differ: reference {y.shape}, estimate {yhat.shape}")
    if mask is None:
        return y.ravel(), yhat.ravel()
    m = _arr(mask)
    if m.shape != y.shape:
        raise ValueError(f"mask extents {m.shape} differ from image extents {y.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask must be binary")
    sel = m.astype(bool)
    if not sel.any():
        raise EmptyRegionError("mask selects no voxels")
    return y[sel], yhat[sel]


def mae(y, yhat, mask=None) -> float:
    """Mean absolute error over all voxels, or over ``mask == 1`` voxels."""
    a, b = _select(y, yhat, mask)
    return float(np.mean(np.abs(a - b)))


def psnr(y, yhat, mask=None, peak: Optional[float] = None) -> float:
    """Peak signal-to-noise ratio in dB.

    ``peak`` defaults to the data range (max - min) of the reference ``y``
    over the whole image. Identical inputs give ``math.inf``.
    """
    if peak is None:
        ref = _arr(y)
        peak = float(ref.max() - ref.min())
    a, b = _select(y, yhat, mask)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak ** 2 / mse)


def format_psnr(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.2f}"


@dataclass
class MetricsReport:
    mae: float
    psnr: float
    masked_mae: Optional[float] = None
    masked_psnr: Optional[float] = None
    voxels: int = 0
    masked_voxels: int = 0
    peak_convention: str = "data-range"

    def to_dict(self):
        d = asdict(self)
        for k in ("psnr", "masked_psnr"):
            if d[k] is not None and math.isinf(d[k]):
                d[k] = "inf"
        return d

    def to_text(self) -> str:
        lines = [f"peak convention: {self.peak_convention}",
                 f"voxels: {self.voxels}",
                 f"MAE:  {self.mae:.6f}",
                 f"PSNR: {format_psnr(self.psnr)} dB"]
        if self.masked_mae is not None:
            lines += [f"masked voxels: {self.masked_voxels}",
                      f"masked MAE:  {self.masked_mae:.6f}",
                      f"masked PSNR: {format_psnr(self.masked_psnr)} dB"]
        return "\n".join(lines) + "\n"


def metrics_report(y, yhat, mask=None, peak: Optional[float] = None) -> MetricsReport:
    ref = _arr(y)
    rep = MetricsReport(mae(y, yhat), psnr(y, yhat, peak=peak), voxels=int(ref.size),
                        peak_convention="data-range" if peak is None else f"fixed:{peak:g}")
    if mask is not None:
        if peak is None:
            peak = float(ref.max() - ref.min())
        rep.masked_mae = mae(y, yhat, mask)
        rep.masked_psnr = psnr(y, yhat, mask, peak=peak)
        rep.masked_voxels = int(_arr(mask).sum())
    return rep


# ---------------------------------------------------------------------------
# confidence maps


def quantize_confidence(m) -> np.ndarray:
    """Map [0, 1] to 0..255 with round-half-up."""
    m = np.asarray(m, dtype=np.float64)
    if m.size and (np.nanmin(m) < 0 or np.nanmax(m) > 1 or np.isnan(m).any()):
        raise ValueError(f"confidence values must lie in [0, 1]; found [{np.nanmin(m)}, {np.nanmax(m)}]")
    return np.floor(m * 255.0 + 0.5).astype(np.uint8)


def export_confidence(m, path: str) -> np.ndarray:
    """Write a 2-D confidence map as a binary 8-bit PGM (0 black, 1 white)."""
    m = np.asarray(getattr(m, "data", m))
    m = np.squeeze(m)
    if m.ndim != 2:
        raise ValueError(f"confidence map must be 2-D after squeezing, got shape {m.shape}")
    q = quantize_confidence(m)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{q.shape[1]} {q.shape[0]}\n255\n".encode("ascii"))
        fh.write(q.tobytes())
    return q


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"not a binary PGM file: magic {tokens[0]!r}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"only 8-bit PGM supported, maxval={maxval}")
    pos += 1
    return np.frombuffer(raw[pos:pos + w * h], dtype=np.uint8).reshape(h, w)


# ---------------------------------------------------------------------------
# ablation table


def _mean_std(values: Sequence[float], nd: int) -> str:
    vals = np.asarray(values, dtype=np.float64)
    if np.isinf(vals).any():
        return "inf"
    if len(vals) == 1:
        return f"{vals[0]:.{nd}f}"
    return f"{vals.mean():.{nd}f}({vals.std(ddof=1):.{nd}f})"


def _decimals(columns: Sequence[Sequence[float]]) -> int:
    # one decimal for large values, more for normalized intensities
    means = [abs(np.mean(c)) for c in columns if np.all(np.isfinite(c))]
    return 1 if means and min(means) >= 10 else 4


def ablation_report(runs: Sequence, path: Optional[str] = None, masked: bool = False) -> str:
    """Aligned text table of MAE and PSNR per mode as ``mean(std)``.

    ``runs`` is a sequence of ``(mode, MetricsReport)``; repeated modes are
    pooled. Rows follow :data:`MODE_ORDER`, unknown modes after in sorted
    order. With ``path``, the table is written there and a JSON twin next to it.
    """
    if not runs:
        raise ValueError("ablation_report needs at least one run")
    grouped: dict[str, list] = {}
    for mode, rep in runs:
        grouped.setdefault(mode, []).append(rep)
    order = [m for m in MODE_ORDER if m in grouped] + sorted(m for m in grouped if m not in MODE_ORDER)
    header = ["Method", "MAE", "PSNR"]
    if masked:
        header += ["lesion MAE", "lesion PSNR"]
    keys = ["mae", "psnr"] + (["masked_mae", "masked_psnr"] if masked else [])
    nd = {k: _decimals([[getattr(r, k) for r in grouped[m]] for m in order]) for k in keys}
    rows = []
    machine = []
    for mode in order:
        reps = grouped[mode]
        row = [mode, _mean_std([r.mae for r in reps], nd["mae"]), _mean_std([r.psnr for r in reps], nd["psnr"])]
        entry = {"mode": mode, "n": len(reps), "mae": [r.mae for r in reps],
                 "psnr": [format_psnr(r.psnr) if math.isinf(r.psnr) else r.psnr for r in reps]}
        if masked:
            row += [_mean_std([r.masked_mae for r in reps], nd["masked_mae"]),
                    _mean_std([r.masked_psnr for r in reps], nd["masked_psnr"])]
            entry["masked_mae"] = [r.masked_mae for r in reps]
            entry["masked_psnr"] = [r.masked_psnr for r in reps]
        rows.append(row)
        machine.append(entry)
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    peak = {getattr(r, "peak_convention", "data-range") for _, r in runs}
    lines.append(f"peak convention: {', '.join(sorted(peak))}")
    text = "\n".join(lines) + "\n"
    if path:
        with open(path, "w") as fh:
            fh.write(text)
        base = path.rsplit(".", 1)[0] if "." in path.rsplit("/", 1)[-1] else path
        with open(base + ".json", "w") as fh:
            json.dump({"rows": machine, "peak_convention": sorted(peak)}, fh, indent=2)
    return text
