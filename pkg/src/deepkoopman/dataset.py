"""Min-max normalization, episode splits, delay-stacked windows and the CSV
episode format."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .plant import Episode

log = logging.getLogger(__name__)

CSV_COLUMNS = ("t", "v_x", "v_y", "yaw_rate", "steer", "engine")


@dataclass(frozen=True)
class NormalizationStats:
    x_min: np.ndarray
    x_max: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray

    def __post_init__(self):
        for lo, hi, name in ((self.x_min, self.x_max, "state"), (self.u_min, self.u_max, "control")):
            if np.shape(lo) != np.shape(hi):
                raise ValueError(f"{name} bounds differ in shape")
            if np.any(np.asarray(hi) <= np.asarray(lo)):
                raise ValueError(f"{name} max must exceed min on every channel")

    @classmethod
    def from_episodes(cls, episodes):
        states = np.vstack([e.states for e in episodes])
        controls = np.vstack([e.controls for e in episodes])
        return cls(*_span(states, "state"), *_span(controls, "control"))

    @property
    def x_range(self):
        return self.x_max - self.x_min

    @property
    def u_range(self):
        return self.u_max - self.u_min

    def normalize_x(self, x):
        return (np.asarray(x, float) - self.x_min) / self.x_range

    def denormalize_x(self, xn):
        return np.asarray(xn, float) * self.x_range + self.x_min

    def normalize_u(self, u):
        return (np.asarray(u, float) - self.u_min) / self.u_range

    def denormalize_u(self, un):
        return np.asarray(un, float) * self.u_range + self.u_min

    def normalize_episode(self, ep: Episode):
        """Normalized ``(states, controls)`` arrays of an episode."""
        return self.normalize_x(ep.states), self.normalize_u(ep.controls)

    def to_dict(self):
        return {k: np.asarray(getattr(self, k)).tolist() for k in ("x_min", "x_max", "u_min", "u_max")}

    @classmethod
    def from_dict(cls, d):
        return cls(*(np.asarray(d[k], float) for k in ("x_min", "x_max", "u_min", "u_max")))

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def _span(a, name):
    lo, hi = a.min(axis=0), a.max(axis=0)
    flat = hi <= lo
    if np.any(flat):
        log.warning("%s channels %s are constant; widening their range to +-1", name, np.flatnonzero(flat))
        lo, hi = np.where(flat, lo - 1.0, lo), np.where(flat, hi + 1.0, hi)
    return lo, hi


def normalize(x, lo, hi):
    """Map ``lo -> 0`` and ``hi -> 1`` channel-wise."""
    return (np.asarray(x, float) - lo) / (np.asarray(hi, float) - lo)


def denormalize(xn, lo, hi):
    return np.asarray(xn, float) * (np.asarray(hi, float) - lo) + lo


def split_episodes(episodes, seed):
    """Random train/validation/test split in 90/5/5 proportion.

    Validation and test each get ``max(1, round(0.05 * n))`` episodes.
    """
    n = len(episodes)
    if n < 5:
        raise ValueError(f"need at least 5 episodes to split, got {n}")
    n_hold = max(1, int(round(0.05 * n)))
    order = np.random.default_rng(seed).permutation(n)
    test = [episodes[i] for i in order[:n_hold]]
    val = [episodes[i] for i in order[n_hold:2 * n_hold]]
    train = [episodes[i] for i in order[2 * n_hold:]]
    return train, val, test


def stack_delays(states, tau):
    """Rows ``[x_{k-tau+1}, ..., x_k]`` for ``k = tau-1 .. T-1``.

    Row ``j`` of the result is the delay state at time ``k = j + tau - 1``
    and is driven forward by control ``u_k``.
    """
    states = np.asarray(states, float)
    t = len(states) - tau + 1
    if t < 1:
        raise ValueError("episode shorter than tau")
    return np.hstack([states[i:i + t] for i in range(tau)])


@dataclass(frozen=True)
class TrainingBatch:
    x0: np.ndarray  # (b, n*tau)
    u_seq: np.ndarray  # (b, p, m)
    x_seq: np.ndarray  # (b, p, n*tau)

    def __post_init__(self):
        b, p = self.u_seq.shape[:2]
        if self.x0.shape[0] != b or self.x_seq.shape[:2] != (b, p):
            raise ValueError("inconsistent batch dimensions")

    def __len__(self):
        return self.x0.shape[0]

    @property
    def horizon(self):
        return self.u_seq.shape[1]

    def take(self, idx):
        return TrainingBatch(self.x0[idx], self.u_seq[idx], self.x_seq[idx])

    @staticmethod
    def concat(batches):
        return TrainingBatch(np.concatenate([b.x0 for b in batches]),
                             np.concatenate([b.u_seq for b in batches]),
                             np.concatenate([b.x_seq for b in batches]))


def window_sequences(states, controls, p, tau, offset=None, rng=None):
    """Cut an episode into consecutive length-``p`` training windows.

    Windows start at ``offset, offset + p, ...`` in delay-state index; the
    offset is drawn uniformly from ``[0, p]`` when not given. Returns ``None``
    (with a warning) if the episode is too short for a single window.
    """
    z = stack_delays(states, tau)
    u = np.asarray(controls, float)[tau - 1:]
    if offset is None:
        rng = rng if rng is not None else np.random.default_rng()
        offset = int(rng.integers(0, p + 1))
    starts = np.arange(offset, len(z) - p, p)
    if starts.size == 0:
        log.warning("episode of length %d too short for p=%d, tau=%d; skipped", len(states), p, tau)
        return None
    idx = starts[:, None] + np.arange(p + 1)[None, :]
    return TrainingBatch(z[starts], u[idx[:, :-1]], z[idx[:, 1:]])


def epoch_windows(episodes_norm, p, tau, rng):
    """All windows of one epoch (fresh offsets per episode), shuffled."""
    parts = [window_sequences(s, u, p, tau, rng=rng) for s, u in episodes_norm]
    parts = [w for w in parts if w is not None]
    if not parts:
        raise ValueError("no episode is long enough to form a training window")
    allw = TrainingBatch.concat(parts)
    return allw.take(rng.permutation(len(allw)))


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

class EpisodeFormatError(ValueError):
    pass


def write_csv(episode: Episode, path):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for t, x, u in zip(episode.times, episode.states, episode.controls):
            w.writerow([f"{v:.17g}" for v in (t, *x, *u)])


def read_csv(path):
    path = Path(path)
    rows = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EpisodeFormatError(f"{path}: empty file")
        if tuple(h.strip() for h in header) != CSV_COLUMNS:
            raise EpisodeFormatError(f"{path}:1: expected header {','.join(CSV_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_COLUMNS):
                raise EpisodeFormatError(f"{path}:{lineno}: expected {len(CSV_COLUMNS)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise EpisodeFormatError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise EpisodeFormatError(f"{path}: no data rows (empty episode)")
    if len(rows) < 2:
        raise EpisodeFormatError(f"{path}: an episode needs at least two rows")
    a = np.array(rows)
    return Episode(float(a[1, 0] - a[0, 0]), a[:, 1:4].copy(), a[:, 4:6].copy())
