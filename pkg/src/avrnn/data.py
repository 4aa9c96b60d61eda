"""Synthetic sequence families, the ``seqdata v1`` file format and batching.

``seqdata v1`` files start with one ASCII line::

    seqdata v1 <n_seq> <T> <x_dim>

followed by ``n_seq * T * x_dim`` little-endian float64 values, sequence-major
then time-major.  A provenance sidecar ``<path>.provenance`` records the
generator parameters as ``key = value`` lines.
"""

from __future__ import annotations

import math
import queue
import threading
from dataclasses import dataclass, field
from typing import Dict, Iterator, Optional

import numpy as np

MAGIC = "seqdata"
VERSION = "v1"
LOG_2PI = math.log(2.0 * math.pi)


class DatasetError(ValueError):
    pass


class MalformedHeaderError(DatasetError):
    pass


class TruncatedPayloadError(DatasetError):
    pass


class VersionError(DatasetError):
    pass


@dataclass
class LgssmParams:
    """1-D latent linear-Gaussian state space model with vector observations.

    ``z_1 ~ N(0, s0^2)``, ``z_{t+1} = a z_t + N(0, q^2)``,
    ``x_t = cobs * loading * z_t + N(0, r^2 I)``.  ``loading`` defaults to ones.
    """

    a: float = 0.9
    q: float = 0.5
    cobs: float = 1.0
    r: float = 0.5
    s0: float = 1.0
    loading: Optional[np.ndarray] = None

    def validate(self) -> None:
        if not (self.q > 0 and self.r > 0 and self.s0 > 0):
            raise ValueError("q, r and s0 must be positive")
        if abs(self.a) > 1:
            raise ValueError("|a| must be <= 1")

    def loading_vector(self, x_dim: int) -> np.ndarray:
        if self.loading is None:
            return np.ones(x_dim)
        v = np.asarray(self.loading, dtype=np.float64).reshape(-1)
        if v.size != x_dim:
            raise ValueError(f"loading has length {v.size}, expected {x_dim}")
        return v


@dataclass
class SequenceDataset:
    x: np.ndarray
    loglik: Optional[np.ndarray] = None
    provenance: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 3:
            raise ValueError(f"dataset array must be (n_seq, T, x_dim), got {self.x.shape}")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("dataset contains non-finite values")

    @property
    def n_seq(self) -> int:
        return self.x.shape[0]

    @property
    def T(self) -> int:
        return self.x.shape[1]

    @property
    def x_dim(self) -> int:
        return self.x.shape[2]

    def subset(self, idx) -> "SequenceDataset":
        ll = None if self.loglik is None else self.loglik[idx]
        return SequenceDataset(self.x[idx], ll, dict(self.provenance))


def kalman_loglik(p: LgssmParams, x_seq) -> np.ndarray:
    """Exact ``log p(x_{1:T})`` by the prediction-error decomposition.

    Accepts ``(T, x_dim)`` for one sequence (returns a float) or
    ``(n, T, x_dim)`` (returns ``(n,)``).  The filter covariances do not depend
    on the data, so all sequences are filtered together.
    """
    p.validate()
    x = np.asarray(x_seq, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3:
        raise ValueError(f"expected (T, d) or (n, T, d), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite observations")
    n, T, d = x.shape
    c = p.cobs * p.loading_vector(d)
    mean = np.zeros(n)
    var = p.s0 ** 2
    total = np.zeros(n)
    eye = np.eye(d)
    for t in range(T):
        S = var * np.outer(c, c) + p.r ** 2 * eye
        L = np.linalg.cholesky(S)
        innov = x[:, t, :] - mean[:, None] * c
        w = np.linalg.solve(L, innov.T)
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        total += -0.5 * (d * LOG_2PI + logdet + np.sum(w * w, axis=0))
        gain = var * np.linalg.solve(S, c)
        mean = mean + innov @ gain
        var = var - var * float(c @ gain)
        mean = p.a * mean
        var = p.a ** 2 * var + p.q ** 2
    return float(total[0]) if single else total


def gen_lgssm(p: LgssmParams, n: int, T: int, x_dim: int, seed: int) -> SequenceDataset:
    p.validate()
    if n < 1 or T < 1 or x_dim < 1:
        raise ValueError("n, T and x_dim must be >= 1")
    rng = np.random.default_rng(seed)
    c = p.cobs * p.loading_vector(x_dim)
    z = np.empty((n, T))
    z[:, 0] = p.s0 * rng.standard_normal(n)
    for t in range(1, T):
        z[:, t] = p.a * z[:, t - 1] + p.q * rng.standard_normal(n)
    x = z[:, :, None] * c + p.r * rng.standard_normal((n, T, x_dim))
    prov = {"family": "lgssm", "n": str(n), "T": str(T), "x_dim": str(x_dim), "seed": str(seed),
            "a": repr(p.a), "q": repr(p.q), "cobs": repr(p.cobs), "r": repr(p.r), "s0": repr(p.s0),
            "loading": ",".join(repr(float(v)) for v in p.loading_vector(x_dim))}
    return SequenceDataset(x, kalman_loglik(p, x), prov)


def gen_sine(n: int, T: int, seed: int, noise_std: float = 0.1) -> SequenceDataset:
    """``x_t = sin(2 pi f t + phase) + noise`` for ``t = 0..T-1``, one channel."""
    if n < 1 or T < 1:
        raise ValueError("n and T must be >= 1")
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    rng = np.random.default_rng(seed)
    f = rng.uniform(0.02, 0.1, size=n)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=n)
    t = np.arange(T)
    x = np.sin(2.0 * np.pi * f[:, None] * t + phase[:, None])
    x = x + noise_std * rng.standard_normal((n, T))
    prov = {"family": "sine", "n": str(n), "T": str(T), "x_dim": "1", "seed": str(seed),
            "noise_std": repr(noise_std)}
    return SequenceDataset(x[:, :, None], None, prov)


def save_dataset(d: SequenceDataset, path, provenance: bool = True) -> None:
    header = f"{MAGIC} {VERSION} {d.n_seq} {d.T} {d.x_dim}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(d.x, dtype="<f8").tobytes())
    if provenance and d.provenance:
        with open(f"{path}.provenance", "w") as fh:
            for k, v in d.provenance.items():
                fh.write(f"{k} = {v}\n")


def load_dataset(path) -> SequenceDataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.find(b"\n")
    if end < 0:
        raise MalformedHeaderError("missing header line")
    parts = raw[:end].decode("ascii", errors="replace").split()
    if not parts or parts[0] != MAGIC:
        raise VersionError(f"not a {MAGIC} file")
    if len(parts) < 2 or parts[1] != VERSION:
        raise VersionError(f"unsupported version {parts[1] if len(parts) > 1 else '?'}; expected {VERSION}")
    if len(parts) != 5:
        raise MalformedHeaderError(f"header must have 5 fields, got {len(parts)}")
    try:
        n, T, d = (int(v) for v in parts[2:])
    except ValueError:
        raise MalformedHeaderError("non-integer dimensions in header") from None
    if n < 0 or T < 0 or d < 0:
        raise MalformedHeaderError("negative dimensions in header")
    count = n * T * d
    payload = raw[end + 1:]
    if len(payload) < 8 * count:
        raise TruncatedPayloadError(f"expected {8 * count} payload bytes, found {len(payload)}")
    if len(payload) > 8 * count:
        raise MalformedHeaderError("payload is longer than the header declares")
    x = np.frombuffer(payload, dtype="<f8", count=count).astype(np.float64).reshape(n, T, d)
    return SequenceDataset(x)


def read_provenance(path) -> Dict[str, str]:
    out = {}
    with open(path) as fh:
        for line in fh:
            if "=" in line:
                k, v = line.split("=", 1)
                out[k.strip()] = v.strip()
    return out


@dataclass
class SequenceBatch:
    x: np.ndarray
    indices: np.ndarray
    seed: int
    number: int

    @property
    def m(self) -> int:
        return self.x.shape[0]


def batches(d: SequenceDataset, m: int, seed: int) -> Iterator[SequenceBatch]:
    """Endless stream of batches; each draws ``m`` indices uniformly with replacement."""
    if m < 1:
        raise ValueError("batch size must be >= 1")
    if d.n_seq < 1:
        raise DatasetError("empty dataset")
    rng = np.random.default_rng(seed)
    k = 0
    while True:
        idx = rng.integers(0, d.n_seq, size=m)
        yield SequenceBatch(d.x[idx], idx, seed, k)
        k += 1


def prefetch(it: Iterator, size: int = 4) -> Iterator:
    """Run an iterator on a background thread through a bounded queue.

    Items arrive in exactly the order the source yields them, so a seeded
    stream stays deterministic.
    """
    q: "queue.Queue" = queue.Queue(maxsize=size)
    stop = threading.Event()
    done = object()

    def work():
        try:
            for item in it:
                while not stop.is_set():
                    try:
                        q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
        finally:
            q.put(done)

    th = threading.Thread(target=work, daemon=True)
    th.start()
    try:
        while True:
            item = q.get()
            if item is done:
                return
            yield item
    finally:
        stop.set()
