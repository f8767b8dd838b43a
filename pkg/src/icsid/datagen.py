"""Streaming datasets: context/query pairs from freshly sampled systems.

Every sample draws its own system, simulates an observed context window and an
independent query window (separate input realization and burn-in, so the query
starts from arbitrary initial conditions), and keeps the first n_in query
steps as initial-condition anchors. Sample content is a pure function of
(seed, sample index) through counter-based generator substreams, which makes
the stream resumable at any batch index and reproducible bitwise.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError
from .wh import SignalSpec, WhClassConfig, gen_signal, sample_wh, simulate

MAGIC = b"ICSD"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class StreamConfig:
    """Everything that determines the data stream."""

    m: int = 400
    N: int = 110
    n_in: int = 10
    b: int = 32
    seed: int = 0
    input_spec: SignalSpec = SignalSpec()
    class_cfg: WhClassConfig = WhClassConfig()

    def __post_init__(self):
        if self.m < 1:
            raise ConfigError(f"context length m must be >= 1, got {self.m}")
        if not 1 <= self.n_in < self.N:
            raise ConfigError(f"need 1 <= n_in < N, got n_in={self.n_in}, N={self.N}")
        if self.b < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.b}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")


@dataclass
class DatasetSample:
    """One (context, query) pair from a single system.

    qry_y_clean is the noiseless query output; it never reaches the model and
    exists so the measurement-noise floor can be computed exactly.
    """

    ctx_u: np.ndarray
    ctx_y: np.ndarray
    qry_u: np.ndarray
    qry_y: np.ndarray
    qry_y_clean: np.ndarray
    n_in: int

    def __eq__(self, other):
        if not isinstance(other, DatasetSample):
            return NotImplemented
        return self.n_in == other.n_in and all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("ctx_u", "ctx_y", "qry_u", "qry_y", "qry_y_clean")
        )


@dataclass
class Minibatch:
    """b samples stacked on a leading axis; lengths are homogeneous."""

    ctx_u: np.ndarray  # (b, m)
    ctx_y: np.ndarray  # (b, m)
    qry_u: np.ndarray  # (b, N)
    qry_y: np.ndarray  # (b, N)
    qry_y_clean: np.ndarray  # (b, N)
    n_in: int

    @classmethod
    def stack(cls, samples: list) -> "Minibatch":
        if not samples:
            raise ConfigError("cannot stack an empty sample list")
        n_in = samples[0].n_in
        if any(s.n_in != n_in for s in samples):
            raise ConfigError("samples in a minibatch must share n_in")
        return cls(
            ctx_u=np.stack([s.ctx_u for s in samples]),
            ctx_y=np.stack([s.ctx_y for s in samples]),
            qry_u=np.stack([s.qry_u for s in samples]),
            qry_y=np.stack([s.qry_y for s in samples]),
            qry_y_clean=np.stack([s.qry_y_clean for s in samples]),
            n_in=n_in,
        )

    @property
    def b(self) -> int:
        return self.ctx_u.shape[0]


def substream(seed: int, index: int) -> np.random.Generator:
    """Independent generator for a (seed, counter) pair."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def sample_dataset(rng: np.random.Generator, cfg: StreamConfig) -> DatasetSample:
    """Draw one full sample: system, context window, independent query window.

    The generator is split into system/context/query substreams so the two
    windows are independent given the system by construction.
    """
    sys_rng, ctx_rng, qry_rng = rng.spawn(3)
    system = sample_wh(sys_rng, cfg.class_cfg)
    burn = cfg.class_cfg.burn_in

    ctx_u = gen_signal(ctx_rng, dataclasses.replace(cfg.input_spec, length=cfg.m))
    ctx_y = simulate(system, ctx_u, ctx_rng, add_noise=True, burn_in=burn)

    qry_u = gen_signal(qry_rng, dataclasses.replace(cfg.input_spec, length=cfg.N))
    qry_y_clean = simulate(system, qry_u, qry_rng, add_noise=False, burn_in=burn)
    qry_y = qry_y_clean + qry_rng.normal(0.0, system.noise_std, size=cfg.N)

    return DatasetSample(
        ctx_u=ctx_u.astype(np.float32),
        ctx_y=ctx_y.astype(np.float32),
        qry_u=qry_u.astype(np.float32),
        qry_y=qry_y.astype(np.float32),
        qry_y_clean=qry_y_clean.astype(np.float32),
        n_in=cfg.n_in,
    )


def make_batch(cfg: StreamConfig, index: int) -> Minibatch:
    """Batch at a given stream position; pure function of (cfg.seed, index)."""
    samples = [sample_dataset(substream(cfg.seed, index * cfg.b + i), cfg) for i in range(cfg.b)]
    return Minibatch.stack(samples)


def stream_batches(cfg: StreamConfig, start_index: int = 0):
    """Infinite iterator of minibatches, resumable at any batch index."""
    index = start_index
    while True:
        yield make_batch(cfg, index)
        index += 1


# -- serialized test sets -------------------------------------------------


def _cfg_to_json(cfg: StreamConfig) -> dict:
    d = dataclasses.asdict(cfg)
    # tuples inside nested dataclasses become lists in JSON; normalized on read
    return d


def _cfg_from_json(d: dict) -> StreamConfig:
    spec = SignalSpec(**d["input_spec"])
    cc = dict(d["class_cfg"])
    cc["pole_mag"] = tuple(cc["pole_mag"])
    cc["pole_phase"] = tuple(cc["pole_phase"])
    class_cfg = WhClassConfig(**cc)
    top = {k: v for k, v in d.items() if k not in ("input_spec", "class_cfg")}
    return StreamConfig(input_spec=spec, class_cfg=class_cfg, **top)


def write_testset(path, cfg: StreamConfig, count: int) -> None:
    """Generate `count` samples from cfg and serialize them.

    Layout (little-endian): magic "ICSD", u16 version, u32 header length,
    JSON header {cfg, count}, then per sample five float32 arrays
    (ctx_u[m], ctx_y[m], qry_u[N], qry_y[N], qry_y_clean[N]).
    """
    if count < 0:
        raise ConfigError(f"count must be non-negative, got {count}")
    header = json.dumps({"cfg": _cfg_to_json(cfg), "count": count}).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for i in range(count):
            s = sample_dataset(substream(cfg.seed, i), cfg)
            for arr in (s.ctx_u, s.ctx_y, s.qry_u, s.qry_y, s.qry_y_clean):
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_testset(path) -> "TestSet":
    """Read a serialized test set; rejects bad magic/version/truncation."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 10:
        raise FormatError(f"file too short ({len(blob)} bytes) to hold a header")
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r} at offset 0, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version} at offset 4")
    (hlen,) = struct.unpack_from("<I", blob, 6)
    if 10 + hlen > len(blob):
        raise FormatError(f"truncated header: need {10 + hlen} bytes, file has {len(blob)}")
    try:
        header = json.loads(blob[10 : 10 + hlen].decode())
        cfg = _cfg_from_json(header["cfg"])
        count = int(header["count"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"invalid header block at offset 10: {exc}") from exc

    per_sample = (2 * cfg.m + 3 * cfg.N) * 4
    need = 10 + hlen + count * per_sample
    if len(blob) != need:
        raise FormatError(
            f"payload size mismatch at offset {10 + hlen}: expected {need} total bytes, got {len(blob)}"
        )
    samples = []
    off = 10 + hlen
    for _ in range(count):
        arrs = []
        for length in (cfg.m, cfg.m, cfg.N, cfg.N, cfg.N):
            arrs.append(np.frombuffer(blob, dtype="<f4", count=length, offset=off).copy())
            off += length * 4
        samples.append(DatasetSample(*arrs, n_in=cfg.n_in))
    return TestSet(samples=samples, cfg=cfg)


@dataclass
class TestSet:
    """A fixed list of samples plus the config that produced them."""

    samples: list
    cfg: StreamConfig

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    def to_minibatch(self) -> Minibatch:
        return Minibatch.stack(self.samples)


def export_csv(path, samples) -> None:
    """Plain-text dump, one row per time step: sample_id, segment, t, u, y."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "segment", "t", "u", "y"])
        for sid, s in enumerate(samples):
            for t in range(len(s.ctx_u)):
                w.writerow([sid, "ctx", t + 1, repr(float(s.ctx_u[t])), repr(float(s.ctx_y[t]))])
            for t in range(len(s.qry_u)):
                w.writerow([sid, "qry", t + 1, repr(float(s.qry_u[t])), repr(float(s.qry_y[t]))])
