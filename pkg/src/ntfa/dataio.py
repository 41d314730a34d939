"""Study datasets on disk: JSON manifests plus a small binary matrix format.

Matrices are stored with a fixed header (magic ``NTFA``, format version
u16, rows u32, cols u32, all little-endian) followed by row-major
little-endian float32 values.  Storage is 32-bit by convention; all
in-memory computation is float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"NTFA"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHII")


class FormatError(ValueError):
    """A file violates the on-disk format; message carries file and offset."""


@dataclass
class Trial:
    """One continuous recording segment for a (participant, stimulus) pairing.

    Rest segments carry ``stimulus=None`` and ``block_type='rest'``.
    """

    participant: int
    stimulus: int | None
    run: int
    block_type: str
    data: np.ndarray  # (T, V)

    @property
    def n_timepoints(self) -> int:
        return self.data.shape[0]


@dataclass
class StudyDataset:
    n_participants: int
    n_stimuli: int
    voxel_grid: np.ndarray  # (V, 3)
    trials: list[Trial] = field(default_factory=list)

    @property
    def n_trials(self) -> int:
        return len(self.trials)

    @property
    def n_voxels(self) -> int:
        return self.voxel_grid.shape[0]

    def validate(self) -> None:
        if not np.all(np.isfinite(self.voxel_grid)):
            raise ValueError("voxel grid has non-finite coordinates")
        for i, t in enumerate(self.trials):
            if not (0 <= t.participant < self.n_participants):
                raise ValueError(f"trial {i}: participant {t.participant} out of range")
            if t.block_type == "task":
                if t.stimulus is None or not (0 <= t.stimulus < self.n_stimuli):
                    raise ValueError(f"trial {i}: stimulus {t.stimulus} out of range")
            elif t.block_type == "rest":
                if t.stimulus is not None:
                    raise ValueError(f"trial {i}: rest blocks carry no stimulus")
            else:
                raise ValueError(f"trial {i}: unknown block type {t.block_type!r}")
            if t.data.ndim != 2 or t.data.shape[1] != self.n_voxels:
                raise ValueError(f"trial {i}: data shape {t.data.shape} mismatches V")

    def runs(self) -> dict[tuple[int, int], list[int]]:
        """Trial indices grouped by (participant, run)."""
        grouped: dict[tuple[int, int], list[int]] = {}
        for i, t in enumerate(self.trials):
            grouped.setdefault((t.participant, t.run), []).append(i)
        return grouped


# ---------------------------------------------------------------------------
# binary matrix format


def write_matrix(path, array) -> None:
    array = np.asarray(array)
    if array.ndim != 2:
        raise ValueError("matrix files hold 2-D arrays")
    rows, cols = array.shape
    payload = np.ascontiguousarray(array, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, rows, cols))
        fh.write(payload)


def read_matrix(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header at offset {len(raw)}")
    magic, version, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version} at offset 4")
    expected = _HEADER.size + rows * cols * 4
    if len(raw) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes, file ends at offset {len(raw)}"
        )
    flat = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    return flat.reshape(rows, cols).astype(np.float64)


# ---------------------------------------------------------------------------
# dataset persistence


def save_dataset(dataset: StudyDataset, path) -> None:
    dataset.validate()
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_matrix(path / "voxel_grid.ntfa", dataset.voxel_grid)
    records = []
    for i, t in enumerate(dataset.trials):
        fname = f"trial_{i:04d}.ntfa"
        write_matrix(path / fname, t.data)
        records.append(
            {
                "participant": t.participant,
                "stimulus": t.stimulus,
                "run": t.run,
                "block_type": t.block_type,
                "t": t.n_timepoints,
                "file": fname,
            }
        )
    manifest = {
        "participants": dataset.n_participants,
        "stimuli": dataset.n_stimuli,
        "voxel_grid_file": "voxel_grid.ntfa",
        "trials": records,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_dataset(path) -> StudyDataset:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"{manifest_path}: missing manifest")
    manifest = json.loads(manifest_path.read_text())
    grid = read_matrix(path / manifest["voxel_grid_file"])
    trials = []
    for rec in manifest["trials"]:
        data = read_matrix(path / rec["file"])
        if data.shape[0] != rec["t"]:
            raise FormatError(f"{path / rec['file']}: row count disagrees with manifest")
        trials.append(
            Trial(
                participant=rec["participant"],
                stimulus=rec["stimulus"],
                run=rec["run"],
                block_type=rec["block_type"],
                data=data,
            )
        )
    dataset = StudyDataset(
        n_participants=manifest["participants"],
        n_stimuli=manifest["stimuli"],
        voxel_grid=grid,
        trials=trials,
    )
    dataset.validate()
    return dataset


# ---------------------------------------------------------------------------
# model archives (trained parameters + config + loss trace)


def save_archive(path, kind: str, arrays: dict[str, np.ndarray], meta: dict) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        fname = f"{name}.ntfa"
        write_matrix(path / fname, arr.reshape(1, -1) if arr.size else arr.reshape(1, 0))
        entries[name] = {"file": fname, "shape": list(arr.shape)}
    manifest = {"kind": kind, "arrays": entries, "meta": meta}
    (path / "model.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_archive(path):
    path = Path(path)
    manifest_path = path / "model.json"
    if not manifest_path.exists():
        raise FormatError(f"{manifest_path}: missing model manifest")
    manifest = json.loads(manifest_path.read_text())
    arrays = {}
    for name, entry in manifest["arrays"].items():
        flat = read_matrix(path / entry["file"])
        arrays[name] = flat.reshape(entry["shape"])
    return manifest["kind"], arrays, manifest["meta"]


# ---------------------------------------------------------------------------
# rest-block normalization


def zscore_to_rest(trials: list[Trial]) -> list[Trial]:
    """Z-score the task trials of one run against that run's pooled rest data.

    Statistics pool every rest trial and time point; voxels whose pooled
    rest deviation is zero get z = 0.
    """
    rest = [t for t in trials if t.block_type == "rest"]
    if not rest:
        raise ValueError("run has no rest trials to normalize against")
    pooled = np.concatenate([t.data for t in rest], axis=0)
    mean = pooled.mean(axis=0)
    std = pooled.std(axis=0)
    safe = np.where(std > 0, std, 1.0)
    normalized = []
    for t in trials:
        if t.block_type != "task":
            continue
        z = (t.data - mean) / safe
        z[:, std == 0] = 0.0
        normalized.append(Trial(t.participant, t.stimulus, t.run, t.block_type, z))
    return normalized


def zscore_dataset(dataset: StudyDataset) -> StudyDataset:
    """Apply rest-block z-scoring run by run, to task and rest trials alike.

    Rest trials are normalized with the same pooled statistics so every
    trial of the returned dataset shares one unit scale.
    """
    new_trials: list[Trial] = list(dataset.trials)
    for _, idx in sorted(dataset.runs().items()):
        run_trials = [dataset.trials[i] for i in idx]
        rest = [t for t in run_trials if t.block_type == "rest"]
        if not rest:
            raise ValueError("run has no rest trials to normalize against")
        pooled = np.concatenate([t.data for t in rest], axis=0)
        mean = pooled.mean(axis=0)
        std = pooled.std(axis=0)
        safe = np.where(std > 0, std, 1.0)
        for i in idx:
            t = dataset.trials[i]
            z = (t.data - mean) / safe
            z[:, std == 0] = 0.0
            new_trials[i] = Trial(t.participant, t.stimulus, t.run, t.block_type, z)
    return StudyDataset(
        dataset.n_participants, dataset.n_stimuli, dataset.voxel_grid, new_trials
    )


# ---------------------------------------------------------------------------
# embedding export


def export_embeddings(vstate, labels, csv_path, svg_path=None) -> None:
    """Write one CSV row per participant and stimulus embedding.

    `labels` maps ("participant"|"stimulus", index) to a display string;
    missing keys fall back to the bare index.  Sigmas are exp(log_sigma).
    An optional SVG scatter draws mean markers with 1-sigma ellipses.
    """
    rows = []
    for kind, mu_t, ls_t in (
        ("participant", vstate.z_p_mu, vstate.z_p_log_sigma),
        ("stimulus", vstate.z_s_mu, vstate.z_s_log_sigma),
    ):
        mu = np.asarray(mu_t.data if hasattr(mu_t, "data") else mu_t, dtype=np.float64)
        ls = np.asarray(ls_t.data if hasattr(ls_t, "data") else ls_t, dtype=np.float64)
        for i in range(mu.shape[0]):
            label = (labels or {}).get((kind, i), str(i))
            rows.append((kind, i, label, mu[i], np.exp(ls[i])))

    dim = rows[0][3].shape[0] if rows else 0
    header = ["kind", "index", "label"]
    header += [f"mean_{d}" for d in range(dim)]
    header += [f"sigma_{d}" for d in range(dim)]
    lines = [",".join(header)]
    for kind, i, label, mu, sigma in rows:
        cells = [kind, str(i), label]
        cells += [repr(float(v)) for v in mu]
        cells += [repr(float(v)) for v in sigma]
        lines.append(",".join(cells))
    Path(csv_path).write_text("\n".join(lines) + "\n")

    if svg_path is not None:
        Path(svg_path).write_text(_embedding_svg(rows))


def _embedding_svg(rows, size=480, margin=50):
    colors = {"participant": "#7a3fb0", "stimulus": "#e07b00"}
    if not rows:
        return f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}"/>'
    mus = np.array([r[3][:2] for r in rows])
    sigmas = np.array([r[4][:2] for r in rows])
    lo = (mus - 2 * sigmas).min(axis=0)
    hi = (mus + 2 * sigmas).max(axis=0)
    span = np.maximum(hi - lo, 1e-9)

    def to_px(xy):
        frac = (xy - lo) / span
        return (
            margin + frac[0] * (size - 2 * margin),
            size - margin - frac[1] * (size - 2 * margin),
        )

    scale = (size - 2 * margin) / span
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for kind, i, label, mu, sigma in rows:
        cx, cy = to_px(mu[:2])
        rx = max(sigma[0] * scale[0], 1.0)
        ry = max(sigma[1] * scale[1], 1.0)
        color = colors.get(kind, "#444444")
        parts.append(
            f'<ellipse cx="{cx:.1f}" cy="{cy:.1f}" rx="{rx:.1f}" ry="{ry:.1f}" '
            f'fill="{color}" fill-opacity="0.15" stroke="{color}"/>'
        )
        parts.append(
            f'<circle cx="{cx:.1f}" cy="{cy:.1f}" r="2.5" fill="{color}"/>'
        )
        parts.append(
            f'<text x="{cx + 4:.1f}" y="{cy - 4:.1f}" font-size="10" '
            f'fill="{color}">{label}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts)
