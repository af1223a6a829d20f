"""
Artifact Store.
===============

Writes run outputs (CSV tables, JSON summaries, operator triplets, SVG
scatters) into one output directory and tracks every file with its SHA-256
content hash. All writers are deterministic: identical inputs give
byte-identical files.
"""

import dataclasses
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from viscosity_lab.continuation import Branch
from viscosity_lab.correlation_lab import CorrelationTrace
from viscosity_lab.dynamics import PairedTrajectories, SectionCrossings
from viscosity_lab.eigensolver import ResonanceSet
from viscosity_lab.generator_assembly import FourierTruncation, OperatorMatrix
from viscosity_lab.projectors import EigenfunctionSet

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
SVG_SIZE = 1000
SVG_MARGIN = 40
# categorical palette, cycled per seed
PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
    "#aec7e8", "#ffbb78", "#98df8a", "#ff9896", "#c5b0d5",
    "#c49c94", "#f7b6d2", "#c7c7c7", "#dbdb8d", "#9edae5",
)


@dataclass
class ArtifactRecord:
    """One emitted file."""

    name: str
    path: Path
    sha256: str
    size_bytes: int


def format_value(value: Any) -> str:
    """17-significant-digit text for header lines."""
    if value is None:
        return "none"
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (complex, np.complexfloating)):
        return f"{FLOAT_FORMAT % value.real},{FLOAT_FORMAT % value.imag}"
    if isinstance(value, (float, np.floating)):
        return FLOAT_FORMAT % value
    return str(value)


def to_jsonable(obj: Any) -> Any:
    """Plain JSON types; complex as {"re", "im"}, non-finite floats as null."""
    if isinstance(obj, Enum):
        return obj.value
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, Mapping):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (complex, np.complexfloating)):
        return {"re": to_jsonable(float(obj.real)), "im": to_jsonable(float(obj.imag))}
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if math.isfinite(value) else None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _header_lines(header: Optional[Mapping[str, Any]]) -> str:
    if not header:
        return ""
    return "".join(f"# {key}={format_value(value)}\n" for key, value in header.items())


def csv_text(frame: pd.DataFrame, header: Optional[Mapping[str, Any]] = None) -> str:
    buffer = io.StringIO()
    buffer.write(_header_lines(header))
    frame.to_csv(buffer, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return buffer.getvalue()


def resonance_frame(resonances: ResonanceSet) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "re": resonances.eigenvalues.real.astype(float),
            "im": resonances.eigenvalues.imag.astype(float),
            "residual": np.asarray(resonances.residuals, dtype=float),
            "defect_flag": resonances.defect_flags.astype(int),
        }
    )


def resonance_header(resonances: ResonanceSet) -> Dict[str, Any]:
    cutoff = resonances.truncation.cutoff if resonances.truncation is not None else None
    return {
        "epsilon": resonances.epsilon,
        "K": cutoff,
        "solver": resonances.solver,
        "shift": resonances.shift,
    }


BRANCH_COLUMNS = ["branch_id", "epsilon", "re", "im", "residual", "status", "K", "boundary_mass"]


def branches_frame(branches: Sequence[Branch]) -> pd.DataFrame:
    rows = []
    for branch in branches:
        for eps, value, residual, cutoff, mass in zip(
            branch.epsilons, branch.values, branch.residuals, branch.cutoffs, branch.boundary_masses
        ):
            rows.append(
                (branch.identifier, eps, value.real, value.imag, residual,
                 branch.status.value, cutoff, mass)
            )
    frame = pd.DataFrame(rows, columns=BRANCH_COLUMNS)
    return frame.astype({"branch_id": int, "K": int, "status": str})


def limits_payload(branches: Sequence[Branch]) -> List[Dict[str, Any]]:
    """JSON summary of each branch's epsilon -> 0 limit."""
    return [
        {
            "branch_id": b.identifier,
            "status": b.status.value,
            "points": len(b.values),
            "last": b.last,
            "extrapolated": b.extrapolated,
            "order": b.extrapolation_order,
            "residual_of_fit": b.residual_of_fit,
        }
        for b in branches
    ]


def trace_frame(trace: CorrelationTrace) -> pd.DataFrame:
    n = trace.times.size
    nan = np.full(n, np.nan)
    return pd.DataFrame(
        {
            "t": trace.times,
            "re": trace.values.real,
            "im": trace.values.imag,
            "stderr_re": nan if trace.stderr_re is None else trace.stderr_re,
            "stderr_im": nan if trace.stderr_im is None else trace.stderr_im,
            "source": [trace.source.value] * n,
        }
    )


def eigenfunction_frame(
    groups: Sequence[EigenfunctionSet], truncation: FourierTruncation
) -> pd.DataFrame:
    """Mode-coefficient format: one row per (group, vector, side, k)."""
    modes = truncation.modes
    mode_columns = [f"k{i + 1}" for i in range(truncation.dimension)]
    frames = []
    for g, group in enumerate(groups):
        for side, vectors in (("right", group.right), ("left", group.left)):
            for j in range(vectors.shape[1]):
                block = pd.DataFrame(modes, columns=mode_columns)
                block.insert(0, "side", side)
                block.insert(0, "vector", j)
                block.insert(0, "group", g)
                block["lambda_re"] = float(group.eigenvalues[j].real)
                block["lambda_im"] = float(group.eigenvalues[j].imag)
                block["re"] = vectors[:, j].real
                block["im"] = vectors[:, j].imag
                frames.append(block)
    if not frames:
        columns = ["group", "vector", "side", *mode_columns, "lambda_re", "lambda_im", "re", "im"]
        return pd.DataFrame(columns=columns)
    return pd.concat(frames, ignore_index=True)


def crossings_frame(
    crossings: SectionCrossings, labels: Optional[Mapping[int, str]] = None
) -> pd.DataFrame:
    width = crossings.points.shape[1]
    coords = [i for i in range(width + 1) if i != crossings.plane.coordinate]
    frame = pd.DataFrame(crossings.points, columns=[f"x{i + 1}" for i in coords])
    frame.insert(0, "seed", crossings.tags.astype(int))
    frame["residual"] = crossings.residuals
    if labels is not None:
        frame["class"] = [labels.get(int(t), "undetermined") for t in crossings.tags]
    return frame


def exponents_frame(exponents: np.ndarray) -> pd.DataFrame:
    data: Dict[str, Any] = {"seed": np.arange(exponents.shape[0])}
    for i in range(exponents.shape[1]):
        data[f"lambda_{i + 1}"] = exponents[:, i]
    return pd.DataFrame(data)


def trajectories_frame(paired: PairedTrajectories) -> pd.DataFrame:
    d = paired.deterministic.shape[1]
    data: Dict[str, Any] = {"t": paired.times}
    for i in range(d):
        data[f"det_x{i + 1}"] = paired.deterministic[:, i]
    for i in range(d):
        data[f"sto_x{i + 1}"] = paired.stochastic[:, i]
    data["separation"] = paired.separation
    return pd.DataFrame(data)


def triplet_text(op: OperatorMatrix) -> str:
    """Sparse-triplet export: kind, d, K, epsilon header then row,col,re,im."""
    rows, cols, values = op.triplets()
    frame = pd.DataFrame(
        {"row": rows.astype(int), "col": cols.astype(int), "re": values.real, "im": values.imag}
    )
    header = {
        "kind": op.kind,
        "d": op.truncation.dimension,
        "K": op.truncation.cutoff,
        "epsilon": op.epsilon,
    }
    return csv_text(frame, header)


def svg_scatter(
    points: np.ndarray, tags: np.ndarray, title: str = "", radius: float = 1.5
) -> str:
    """Scatter in a fixed 1000x1000 viewBox, one palette colour per tag."""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    tags = np.asarray(tags, dtype=int)
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {SVG_SIZE} {SVG_SIZE}" '
        f'width="{SVG_SIZE}" height="{SVG_SIZE}">',
        f'<rect x="0" y="0" width="{SVG_SIZE}" height="{SVG_SIZE}" fill="white"/>',
    ]
    if title:
        lines.append(f'<text x="{SVG_MARGIN}" y="{SVG_MARGIN // 2}" font-size="16">{title}</text>')
    if points.size:
        lo, hi = points.min(axis=0), points.max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        usable = SVG_SIZE - 2 * SVG_MARGIN
        px = SVG_MARGIN + (points[:, 0] - lo[0]) / span[0] * usable
        py = SVG_SIZE - SVG_MARGIN - (points[:, 1] - lo[1]) / span[1] * usable
        for tag in np.unique(tags):
            colour = PALETTE[int(tag) % len(PALETTE)]
            lines.append(f'<g fill="{colour}" data-seed="{int(tag)}">')
            for x, y in zip(px[tags == tag], py[tags == tag]):
                lines.append(f'<circle cx="{x:.3f}" cy="{y:.3f}" r="{radius:g}"/>')
            lines.append("</g>")
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


class ArtifactStore:
    """
    Output directory for one run.

    Features:
    - CSV with `# key=value` headers and 17-digit floats
    - sorted-key JSON with complex numbers as {"re", "im"}
    - operator triplet export and SVG scatter
    - SHA-256 inventory of every file written
    """

    def __init__(self, output_dir: Union[str, Path]):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.records: Dict[str, ArtifactRecord] = {}
        self.stats = {"files": 0, "bytes": 0}
        logger.info(f"Artifact store at {self.output_dir}")

    def path(self, name: str) -> Path:
        return self.output_dir / name

    def write_text(self, name: str, text: str) -> ArtifactRecord:
        data = text.encode("utf-8")
        target = self.path(name)
        with open(target, "wb") as f:
            f.write(data)
        record = ArtifactRecord(name, target, hashlib.sha256(data).hexdigest(), len(data))
        if name not in self.records:
            self.stats["files"] += 1
        self.records[name] = record
        self.stats["bytes"] += len(data)
        logger.debug(f"Wrote {name} ({len(data)} bytes)")
        return record

    def write_csv(
        self, name: str, frame: pd.DataFrame, header: Optional[Mapping[str, Any]] = None
    ) -> ArtifactRecord:
        return self.write_text(name, csv_text(frame, header))

    def write_json(self, name: str, payload: Any) -> ArtifactRecord:
        text = json.dumps(to_jsonable(payload), sort_keys=True, indent=2) + "\n"
        return self.write_text(name, text)

    def write_resonances(self, name: str, resonances: ResonanceSet) -> ArtifactRecord:
        return self.write_csv(name, resonance_frame(resonances), resonance_header(resonances))

    def write_triplets(self, name: str, op: OperatorMatrix) -> ArtifactRecord:
        return self.write_text(name, triplet_text(op))

    def write_svg(self, name: str, points: np.ndarray, tags: np.ndarray, title: str = "") -> ArtifactRecord:
        return self.write_text(name, svg_scatter(points, tags, title))

    def register(self, name: str) -> ArtifactRecord:
        """Track a file written into the directory by another writer."""
        target = self.path(name)
        record = ArtifactRecord(name, target, file_sha256(target), target.stat().st_size)
        if name not in self.records:
            self.stats["files"] += 1
        self.records[name] = record
        return record

    def inventory(self) -> Dict[str, str]:
        return {name: self.records[name].sha256 for name in sorted(self.records)}


def export_triplets(op: OperatorMatrix, path: Union[str, Path]) -> str:
    """Write an operator in triplet format to `path`; returns the SHA-256."""
    data = triplet_text(op).encode("utf-8")
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def file_sha256(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()
