"""Synthetic desk-scale datasets and their on-disk dump formats."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .foundation import RngStream

NAMES = ("eight_gaussians", "checkerboard", "two_moons", "tiny_bars")
TENSOR_MAGIC = b"DFTENS01"


@dataclass
class DatasetSpec:
    name: str = "eight_gaussians"
    n: int = 10_000
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.name not in NAMES:
            raise ValueError(f"unknown dataset {self.name!r}; choose from {NAMES}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    @property
    def num_classes(self) -> int:
        return {"eight_gaussians": 8, "checkerboard": 0, "two_moons": 2, "tiny_bars": 8}[self.name]

    @property
    def geometry(self) -> str:
        return "image" if self.name == "tiny_bars" else "point"

    def to_dict(self) -> dict:
        return asdict(self)


def eight_gaussian_modes(radius: float = 2.0) -> np.ndarray:
    ang = 2 * np.pi * np.arange(8) / 8
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def _eight_gaussians(n, std, stream, labels=None):
    drawn = stream.integers(8, n)  # always consumed so supplied labels keep the stream aligned
    labels = drawn if labels is None else labels
    pts = eight_gaussian_modes()[labels] + std * stream.normal((n, 2))
    return pts, labels


def _checkerboard(n, std, stream, labels=None):
    # black squares of a 4x4 board with side 2 on [-4, 4]^2: (col + row) even
    cells = np.array([(i, j) for i in range(4) for j in range(4) if (i + j) % 2 == 0])
    pick = cells[stream.integers(len(cells), n)]
    pts = -4.0 + 2.0 * pick + 2.0 * stream.uniform((n, 2))
    return pts, None


def _two_moons(n, std, stream, labels=None):
    drawn = stream.integers(2, n)
    labels = drawn if labels is None else labels
    theta = np.pi * stream.uniform(n)
    upper = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    lower = np.stack([1 - np.cos(theta), 0.5 - np.sin(theta)], axis=1)
    pts = np.where(labels[:, None] == 0, upper, lower) + std * stream.normal((n, 2))
    return pts, labels


def _tiny_bars(n, std, stream, labels=None):
    drawn = stream.integers(8, n)
    labels = drawn if labels is None else labels
    img = np.zeros((n, 1, 8, 8))
    img[np.arange(n), 0, labels, :] = 1.0
    return img + std * stream.normal(img.shape), labels


_GENERATORS = {
    "eight_gaussians": _eight_gaussians,
    "checkerboard": _checkerboard,
    "two_moons": _two_moons,
    "tiny_bars": _tiny_bars,
}


def generate(spec: DatasetSpec, stream: Optional[RngStream] = None, n: Optional[int] = None, labels=None):
    """Returns ``(data f32 tensor, class ids long tensor or None)``; pure in ``(spec, stream)``.

    Passing ``labels`` draws a class-conditional sample with exactly those classes.
    """
    if spec.name not in _GENERATORS:
        raise ValueError(f"unknown dataset {spec.name!r}")
    stream = stream if stream is not None else RngStream(spec.seed, stream_id=0)
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if spec.num_classes == 0:
            raise ValueError(f"{spec.name} is unconditional; labels are not accepted")
        if n is not None and n != len(labels):
            raise ValueError(f"n={n} but {len(labels)} labels given")
        if labels.size and (labels.min() < 0 or labels.max() >= spec.num_classes):
            raise ValueError(f"labels must lie in [0, {spec.num_classes})")
        n = len(labels)
    x, y = _GENERATORS[spec.name](n or spec.n, spec.noise_std, stream, labels)
    x = torch.from_numpy(np.asarray(x)).float()
    y = torch.from_numpy(np.asarray(y)).long() if y is not None else None
    return x, y


def reference_baseline(spec: DatasetSpec, n: int, stream: RngStream, stream_b: Optional[RngStream] = None,
                       n_projections: int = 128, class_matched: bool = True) -> float:
    """Sliced W2 between two reference draws of size ``n``: the noise floor for generated-vs-reference metrics.

    With ``class_matched`` the second draw reuses the first draw's labels, matching how
    :func:`deepflow.evaluation.evaluate_run` scores conditional models.
    """
    from .evaluation import sliced_wasserstein

    a, ya = generate(spec, stream, n)
    match = ya if (class_matched and ya is not None) else None
    b, _ = generate(spec, stream_b if stream_b is not None else stream, n, labels=match)
    return sliced_wasserstein(a.reshape(n, -1), b.reshape(n, -1), n_projections, RngStream(spec.seed, 0x5EED))


# ---------------------------------------------------------------- dump formats


def write_points_csv(path, x: torch.Tensor, labels: Optional[torch.Tensor] = None) -> None:
    x = np.asarray(x, dtype=np.float64)
    cols = ["x", "y"] if x.shape[1] == 2 else [f"x{i}" for i in range(x.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols + (["class"] if labels is not None else []))
        for i in range(x.shape[0]):
            row = [repr(float(v)) for v in x[i]]
            if labels is not None:
                row.append(int(labels[i]))
            w.writerow(row)


def read_points_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    has_cls = header[-1] == "class"
    ncoord = len(header) - int(has_cls)
    x = torch.tensor([[float(v) for v in r[:ncoord]] for r in body], dtype=torch.float32)
    y = torch.tensor([int(r[-1]) for r in body], dtype=torch.long) if has_cls else None
    return x, y


def write_tensor_file(path, x: torch.Tensor) -> None:
    """``DFTENS01`` | u32 rank | u32 dims... | little-endian f32 data."""
    arr = np.ascontiguousarray(np.asarray(x, dtype="<f4"))
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_tensor_file(path) -> torch.Tensor:
    data = Path(path).read_bytes()
    if data[:8] != TENSOR_MAGIC:
        raise ValueError(f"{path}: not a DFTENS01 tensor file")
    (rank,) = struct.unpack_from("<I", data, 8)
    dims = struct.unpack_from(f"<{rank}I", data, 12)
    off = 12 + 4 * rank
    count = int(np.prod(dims)) if dims else 1
    if len(data) - off != 4 * count:
        raise ValueError(f"{path}: expected {4 * count} data bytes, found {len(data) - off}")
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(dims)
    return torch.from_numpy(arr.astype(np.float32))
