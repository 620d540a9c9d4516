"""Timestamped ball trajectories and their line-delimited JSON encoding.

Missing values are stored as NaN rows internally and as ``null`` on disk.
Spin is kept in rad/s in memory; files carry it in Hz.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

TWO_PI = 2.0 * math.pi
_ENCODER = json.JSONEncoder(sort_keys=True)


def hz_to_rad(omega_hz):
    return np.asarray(omega_hz, dtype=float) * TWO_PI


def rad_to_hz(omega_rad):
    return np.asarray(omega_rad, dtype=float) / TWO_PI


def _as_rows(values, n: int, width: int) -> np.ndarray:
    if values is None:
        return np.full((n, width), np.nan)
    arr = np.array(values, dtype=float).reshape(n, width)
    return arr


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Ordered ball samples.

    Attributes
    ----------
    t : (N,) array
        Strictly increasing timestamps in seconds.
    p3d : (N, 3) array
        World positions in meters, NaN rows where missing.
    omega : (N, 3) array
        Spin in rad/s, NaN rows where missing.
    p2d : (N, 2) array
        Pixel detections, NaN rows where missing.
    visible : (N,) bool array
    """

    t: np.ndarray
    p3d: np.ndarray = None
    omega: np.ndarray = None
    p2d: np.ndarray = None
    visible: np.ndarray = None

    def __post_init__(self):
        t = np.array(self.t, dtype=float).reshape(-1)
        n = t.size
        if n > 1 and not np.all(np.diff(t) > 0):
            raise ValueError("timestamps must be strictly increasing")
        set_ = object.__setattr__
        set_(self, "t", t)
        set_(self, "p3d", _as_rows(self.p3d, n, 3))
        set_(self, "omega", _as_rows(self.omega, n, 3))
        set_(self, "p2d", _as_rows(self.p2d, n, 2))
        if self.visible is None:
            vis = np.ones(n, dtype=bool)
        else:
            vis = np.array(self.visible, dtype=bool).reshape(n)
        set_(self, "visible", vis)
        for name in ("t", "p3d", "omega", "p2d", "visible"):
            getattr(self, name).setflags(write=False)

    def __len__(self) -> int:
        return self.t.size

    @property
    def valid3d(self) -> np.ndarray:
        """Mask of samples with a complete 3D position."""
        return np.all(np.isfinite(self.p3d), axis=1)

    @property
    def valid2d(self) -> np.ndarray:
        return np.all(np.isfinite(self.p2d), axis=1)

    @property
    def has_spin(self) -> np.ndarray:
        return np.all(np.isfinite(self.omega), axis=1)

    def subset(self, index) -> "Trajectory":
        """Return the samples selected by a boolean mask, slice or index array."""
        return Trajectory(self.t[index], self.p3d[index], self.omega[index],
                          self.p2d[index], self.visible[index])

    def replace(self, **changes) -> "Trajectory":
        fields = dict(t=self.t, p3d=self.p3d, omega=self.omega,
                      p2d=self.p2d, visible=self.visible)
        fields.update(changes)
        return Trajectory(**fields)

    def window(self, t_start: float, t_end: float,
               inclusive: bool = True) -> "Trajectory":
        if inclusive:
            mask = (self.t >= t_start) & (self.t <= t_end)
        else:
            mask = (self.t > t_start) & (self.t < t_end)
        return self.subset(mask)

    def resample_every(self, stride: int, offset: int = 0) -> "Trajectory":
        return self.subset(slice(offset, None, stride))

    def velocity(self) -> np.ndarray:
        """Finite-difference velocity of the 3D track (NaN where undefined)."""
        n = len(self)
        v = np.full((n, 3), np.nan)
        if n < 2:
            return v
        v[1:-1] = (self.p3d[2:] - self.p3d[:-2]) / (self.t[2:] - self.t[:-2])[:, None]
        v[0] = (self.p3d[1] - self.p3d[0]) / (self.t[1] - self.t[0])
        v[-1] = (self.p3d[-1] - self.p3d[-2]) / (self.t[-1] - self.t[-2])
        return v

    # -- serialization -------------------------------------------------

    def to_records(self) -> list[dict]:
        """One dict per sample; spin converted to Hz; missing values as None."""
        def rows(arr, ok):
            return [r if k else None for r, k in zip(arr.tolist(), ok.tolist())]

        cols = zip(self.t.tolist(), rows(self.p3d, self.valid3d),
                   rows(rad_to_hz(self.omega), self.has_spin), rows(self.p2d, self.valid2d),
                   self.visible.tolist())
        return [{"t": t, "p3d": p, "omega_hz": w, "p2d": q, "visible": v}
                for t, p, w, q, v in cols]

    @classmethod
    def from_records(cls, records: Iterable[dict]) -> "Trajectory":
        records = list(records)
        n = len(records)
        t = np.empty(n)
        p3d = np.full((n, 3), np.nan)
        omega = np.full((n, 3), np.nan)
        p2d = np.full((n, 2), np.nan)
        visible = np.ones(n, dtype=bool)
        for i, rec in enumerate(records):
            t[i] = rec["t"]
            if rec.get("p3d") is not None:
                p3d[i] = rec["p3d"]
            if rec.get("omega_hz") is not None:
                omega[i] = hz_to_rad(rec["omega_hz"])
            if rec.get("p2d") is not None:
                p2d[i] = rec["p2d"]
            visible[i] = bool(rec.get("visible", True))
        return cls(t, p3d, omega, p2d, visible)

    def save_jsonl(self, path) -> None:
        write_jsonl(path, self.to_records())

    @classmethod
    def load_jsonl(cls, path) -> "Trajectory":
        return cls.from_records(read_jsonl(path))

    def equals(self, other: "Trajectory") -> bool:
        return all(
            np.array_equal(getattr(self, k), getattr(other, k), equal_nan=(k != "visible"))
            for k in ("t", "p3d", "omega", "p2d", "visible")
        )


def write_jsonl(path, records: Iterable[dict]) -> None:
    """Write records atomically (temp file then rename), UTF-8 with LF endings."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for rec in map(_ENCODER.encode, records):
            fh.write(rec + "\n")
    tmp.replace(path)


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: {exc.msg}") from exc
    return out


def write_json(path, obj, sort_keys: bool = True) -> None:
    """Atomic pretty-printed JSON; ``sort_keys=False`` keeps insertion order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, sort_keys=sort_keys, indent=1)
        fh.write("\n")
    tmp.replace(path)


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
