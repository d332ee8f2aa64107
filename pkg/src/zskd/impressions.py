"""Data Impressions: inputs optimised so a frozen teacher reproduces a sampled softmax.

Transfer-set container layout (little-endian)::

    header   8s magic b"ZSKDTSET" | u32 version | u32 P | P bytes provenance JSON
             | u32 K | u32 H | u32 W | u32 C | u32 CRC-32 of the header bytes so far
    record   i32 class | f64 beta | f64 final_loss | f64 initial_loss | u32 iterations
             | u64 seed | u32 batch | K x f64 target | H*W*C x f64 image | u32 CRC-32

Records are appended one crafting batch at a time, so an interrupted run
leaves a valid prefix that :func:`generate_transfer_set` resumes from.
"""
from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import prior as P
from . import tensor as T
from .errors import (ChecksumError, DimensionError, FormatError, NonConvergenceError, NumericalError,
                     ParameterError, ProvenanceError, SynthesisDivergenceError, TruncatedError, VersionError)
from .models import Network, parameter_hash

log = logging.getLogger(__name__)

TSET_MAGIC = b"ZSKDTSET"
TSET_VERSION = 1
_REC_HEAD = struct.Struct("<idddIQI")

CI_CONFIDENCE_RANGE = (0.55, 0.70)


@dataclass
class DataImpression:
    image: np.ndarray
    target: np.ndarray
    class_index: int
    beta: float
    final_loss: float
    initial_loss: float
    iterations: int
    seed: int
    batch: int = 0


@dataclass
class TransferSet:
    """Columnar store of impressions plus the provenance they were crafted under."""

    images: np.ndarray
    targets: np.ndarray
    class_index: np.ndarray
    beta: np.ndarray
    final_loss: np.ndarray
    initial_loss: np.ndarray
    iterations: np.ndarray
    seeds: np.ndarray
    batch: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> DataImpression:
        return DataImpression(self.images[i], self.targets[i], int(self.class_index[i]), float(self.beta[i]),
                              float(self.final_loss[i]), float(self.initial_loss[i]), int(self.iterations[i]),
                              int(self.seeds[i]), int(self.batch[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @classmethod
    def empty(cls, K: int, image_shape=(32, 32, 1), provenance=None) -> "TransferSet":
        return cls(np.zeros((0,) + tuple(image_shape)), np.zeros((0, K)), np.zeros(0, np.int64), np.zeros(0),
                   np.zeros(0), np.zeros(0), np.zeros(0, np.int64), np.zeros(0, np.uint64), np.zeros(0, np.int64),
                   dict(provenance or {}))

    @classmethod
    def from_impressions(cls, items, provenance=None) -> "TransferSet":
        items = list(items)
        if not items:
            raise ParameterError("cannot build a transfer set from no impressions")
        return cls(np.stack([d.image for d in items]), np.stack([d.target for d in items]),
                   np.array([d.class_index for d in items], np.int64), np.array([d.beta for d in items]),
                   np.array([d.final_loss for d in items]), np.array([d.initial_loss for d in items]),
                   np.array([d.iterations for d in items], np.int64), np.array([d.seed for d in items], np.uint64),
                   np.array([d.batch for d in items], np.int64), dict(provenance or {}))

    def concat(self, other: "TransferSet") -> "TransferSet":
        cols = ("images", "targets", "class_index", "beta", "final_loss", "initial_loss", "iterations",
                "seeds", "batch")
        return TransferSet(*(np.concatenate([getattr(self, c), getattr(other, c)]) for c in cols),
                           provenance=dict(self.provenance))

    def counts(self) -> dict:
        """Impressions per (class, beta) pair."""
        out: dict = {}
        for k, b in zip(self.class_index.tolist(), self.beta.tolist()):
            out[(k, b)] = out.get((k, b), 0) + 1
        return out


# --------------------------------------------------------------- container io

def _header_bytes(provenance: dict, K: int, image_shape) -> bytes:
    prov = json.dumps(provenance, sort_keys=True, separators=(",", ":")).encode()
    head = TSET_MAGIC + struct.pack("<II", TSET_VERSION, len(prov)) + prov + struct.pack("<4I", K, *image_shape)
    return head + struct.pack("<I", zlib.crc32(head))


def _record_bytes(tset: TransferSet, i: int) -> bytes:
    body = (_REC_HEAD.pack(int(tset.class_index[i]), float(tset.beta[i]), float(tset.final_loss[i]),
                           float(tset.initial_loss[i]), int(tset.iterations[i]), int(tset.seeds[i]),
                           int(tset.batch[i]))
            + np.ascontiguousarray(tset.targets[i], "<f8").tobytes()
            + np.ascontiguousarray(tset.images[i], "<f8").tobytes())
    return body + struct.pack("<I", zlib.crc32(body))


def _append_records(path: Path, tset: TransferSet) -> None:
    with open(path, "ab") as fh:
        fh.write(b"".join(_record_bytes(tset, i) for i in range(len(tset))))


def save_transfer_set(tset: TransferSet, path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    K = tset.targets.shape[1]
    tmp.write_bytes(_header_bytes(tset.provenance, K, tset.images.shape[1:]))
    _append_records(tmp, tset)
    tmp.replace(path)
    return path


def _parse_header(blob: bytes):
    if len(blob) < 8 or blob[:8] != TSET_MAGIC:
        raise FormatError("not a zskd transfer set (bad magic)")
    if len(blob) < 16:
        raise TruncatedError("transfer set header truncated")
    version, plen = struct.unpack_from("<II", blob, 8)
    if version != TSET_VERSION:
        raise VersionError(f"transfer set version {version}, this build reads {TSET_VERSION}")
    end = 16 + plen + 16
    if len(blob) < end + 4:
        raise TruncatedError("transfer set header truncated")
    if zlib.crc32(blob[:end]) != struct.unpack_from("<I", blob, end)[0]:
        raise ChecksumError("transfer set header checksum mismatch")
    provenance = json.loads(blob[16:16 + plen].decode())
    K, H, W, C = struct.unpack_from("<4I", blob, 16 + plen)
    return provenance, K, (H, W, C), end + 4


def load_transfer_set(path, allow_partial: bool = False) -> TransferSet:
    """Read a container; a short file is an error unless ``allow_partial``."""
    blob = Path(path).read_bytes()
    provenance, K, shape, offset = _parse_header(blob)
    npx = int(np.prod(shape))
    rec_len = _REC_HEAD.size + 8 * K + 8 * npx + 4
    n_full, tail = divmod(len(blob) - offset, rec_len)
    if tail and not allow_partial:
        raise TruncatedError(f"{path}: trailing partial record ({tail} bytes)")
    heads, targets, images = [], np.empty((n_full, K)), np.empty((n_full,) + shape)
    for i in range(n_full):
        start = offset + i * rec_len
        body = blob[start:start + rec_len - 4]
        if zlib.crc32(body) != struct.unpack_from("<I", blob, start + rec_len - 4)[0]:
            raise ChecksumError(f"{path}: record {i} checksum mismatch")
        heads.append(_REC_HEAD.unpack_from(body, 0))
        targets[i] = np.frombuffer(body, "<f8", K, _REC_HEAD.size)
        images[i] = np.frombuffer(body, "<f8", npx, _REC_HEAD.size + 8 * K).reshape(shape)
    expected = provenance.get("expected_count")
    if not allow_partial and expected is not None and n_full != expected:
        raise TruncatedError(f"{path}: {n_full} impressions, provenance expects {expected}")
    cols = list(zip(*heads)) if heads else [()] * 7
    return TransferSet(images, targets, np.array(cols[0], np.int64), np.array(cols[1], np.float64),
                       np.array(cols[2], np.float64), np.array(cols[3], np.float64),
                       np.array(cols[4], np.int64), np.array(cols[5], np.uint64), np.array(cols[6], np.int64),
                       provenance)


# ------------------------------------------------------------------ crafting

def _row_ce(targets: np.ndarray, probs: np.ndarray) -> np.ndarray:
    return -(targets * np.log(probs + T.LOG_EPS)).sum(axis=-1)


def craft_batch(teacher: Network, targets: np.ndarray, init: np.ndarray, tau: float, lr: float,
                iters: int) -> tuple:
    """Optimise ``init`` images so ``softmax(teacher(x) / tau)`` matches ``targets``.

    The summed per-image loss is minimised with Adam on the pixels only; pixels
    are clamped to [0, 1] after every step. Returns ``(images, final_loss,
    initial_loss)`` with per-image losses evaluated on clamped images.
    """
    if iters < 1:
        raise ParameterError(f"iterations must be >= 1, got {iters}")
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if targets.shape[1] != teacher.num_classes or len(targets) != len(init):
        raise DimensionError(f"targets {targets.shape} do not match {len(init)} images x {teacher.num_classes}")
    x = T.Tensor(np.clip(init, 0.0, 1.0), requires_grad=True)
    state = T.AdamState.like(x.data)
    initial = None
    with teacher.frozen():
        for step in range(iters):
            try:
                probs = T.softmax_t(teacher.logits(x), tau)
                loss = T.cross_entropy(targets, probs, reduction="sum")
            except NumericalError as exc:
                raise SynthesisDivergenceError(step) from exc
            if not np.isfinite(loss.data):
                raise SynthesisDivergenceError(step)
            if initial is None:
                initial = _row_ce(targets, probs.data)
            x.grad = None
            loss.backward()
            T.adam_step(x.data, x.grad, state, lr)
            np.clip(x.data, 0.0, 1.0, out=x.data)
        final = _row_ce(targets, T.softmax_np(teacher.logits(x).data, tau))
    return x.data, final, initial


def init_noise(rng: np.random.Generator, n: int, shape=(32, 32, 1)) -> np.ndarray:
    return rng.random((n,) + tuple(shape))


def craft_impression(teacher: Network, target, tau: float = 20.0, lr: float = 0.1, iters: int = 1500,
                     seed: int = 0, class_index: int | None = None, beta: float = float("nan")) -> DataImpression:
    target = np.asarray(target, dtype=np.float64)
    rng = np.random.default_rng(seed)
    images, final, initial = craft_batch(teacher, target[None], init_noise(rng, 1, teacher.input_shape),
                                         tau, lr, iters)
    k = int(np.argmax(target)) if class_index is None else class_index
    return DataImpression(images[0], target, k, beta, float(final[0]), float(initial[0]), iters, seed)


def sub_seed(*keys: int) -> int:
    """Deterministic 64-bit seed for one crafting job, independent of run order."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0])


def schedule(K: int, N: int, n_betas: int, batch_size: int) -> list:
    """``(class, beta_index, batch_index, size)`` jobs: classes outermost, then betas."""
    per_pair = N // (K * n_betas)
    if per_pair < 1:
        raise ParameterError(f"N={N} too small for {K} classes x {n_betas} betas")
    if batch_size < 1:
        raise ParameterError(f"batch size must be >= 1, got {batch_size}")
    jobs = []
    for k in range(K):
        for b in range(n_betas):
            for j, start in enumerate(range(0, per_pair, batch_size)):
                jobs.append((k, b, j, min(batch_size, per_pair - start)))
    return jobs


def _resume(path: Path, provenance: dict, jobs: list) -> tuple:
    """Load the completed prefix of a partial run and truncate any half-written batch."""
    if not path.exists():
        return None, 0
    blob = path.read_bytes()
    found, _, _, offset = _parse_header(blob)
    if found != provenance:
        diff = sorted(k for k in set(found) | set(provenance) if found.get(k) != provenance.get(k))
        raise ProvenanceError(f"{path} was produced under different settings: {', '.join(diff)}")
    done = load_transfer_set(path, allow_partial=True)
    n_jobs, count = 0, 0
    for *_, size in jobs:
        if count + size > len(done):
            break
        count += size
        n_jobs += 1
    if count != len(done) or len(blob) != offset + _record_len(done) * count:
        with open(path, "r+b") as fh:
            fh.truncate(offset + _record_len(done) * count)
    cols = ("images", "targets", "class_index", "beta", "final_loss", "initial_loss", "iterations", "seeds", "batch")
    trimmed = TransferSet(*(getattr(done, c)[:count] for c in cols), provenance=provenance)
    return trimmed, n_jobs


def _record_len(tset: TransferSet) -> int:
    return _REC_HEAD.size + 8 * tset.targets.shape[1] + 8 * int(np.prod(tset.images.shape[1:])) + 4


def generate_transfer_set(teacher: Network, N: int, betas=(1.0, 0.1), tau: float = 20.0, lr: float = 0.1,
                          batch_size: int = 10, iters: int = 1500, seed: int = 0,
                          sim: P.SimilarityMatrix | None = None, prior_name: str = "class_similarity",
                          path=None, progress=None) -> TransferSet:
    """Craft ``N // (K * B)`` impressions for every (class, beta) pair.

    Targets for class ``k`` are drawn from ``Dir(beta * c_k)``. When ``path``
    is given the set is appended to it batch by batch and a rerun with the
    same settings picks up where the previous one stopped.
    """
    betas = [float(b) for b in betas]
    K = teacher.num_classes
    if N < K * len(betas):
        raise ParameterError(f"N={N} must be at least K*B={K * len(betas)}")
    sim = P.class_similarity(teacher) if sim is None else sim
    jobs = schedule(K, N, len(betas), batch_size)
    provenance = {
        "kind": "DI", "teacher_hash": parameter_hash(teacher), "N": N, "betas": betas, "tau": tau,
        "lr": lr, "batch_size": batch_size, "iterations": iters, "seed": seed, "prior": prior_name,
        "eps_floor": sim.eps_floor, "expected_count": sum(j[3] for j in jobs),
    }
    tset, start = None, 0
    if path is not None:
        path = Path(path)
        tset, start = _resume(path, provenance, jobs)
        if tset is None:
            path.write_bytes(_header_bytes(provenance, K, teacher.input_shape))
    if tset is None:
        tset = TransferSet.empty(K, teacher.input_shape, provenance)

    for n, (k, b, j, size) in enumerate(jobs[start:], start):
        s = sub_seed(seed, k, b, j)
        rng = np.random.default_rng(s)
        targets = P.dirichlet_sample(P.concentration(sim, k, betas[b]), rng, size=size)
        images, final, initial = craft_batch(teacher, targets, init_noise(rng, size, teacher.input_shape),
                                             tau, lr, iters)
        part = TransferSet(images, targets, np.full(size, k, np.int64), np.full(size, betas[b]), final, initial,
                           np.full(size, iters, np.int64), np.full(size, s, np.uint64), np.full(size, j, np.int64),
                           provenance)
        if path is not None:
            _append_records(path, part)
        tset = tset.concat(part)
        if progress:
            progress(n + 1, len(jobs))
        log.debug("DI batch %d/%d class=%d beta=%g mean loss %.4f", n + 1, len(jobs), k, betas[b], final.mean())
    return tset


# ---------------------------------------------------------- class impressions

def sample_thresholds(rng: np.random.Generator, n: int, low: float = CI_CONFIDENCE_RANGE[0],
                      high: float = CI_CONFIDENCE_RANGE[1]) -> np.ndarray:
    return rng.uniform(low, high, size=n)


def craft_class_batch(teacher: Network, classes, thresholds, init: np.ndarray, lr: float,
                      max_iters: int = 5000) -> tuple:
    """Raise each image's class confidence (temperature 1) until it reaches its threshold.

    Images stop updating as soon as they cross. Returns ``(images, iterations,
    final_confidence)``; raises :class:`NonConvergenceError` at the cap.
    """
    classes = np.asarray(classes, dtype=np.int64)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    K = teacher.num_classes
    if np.any(classes < 0) or np.any(classes >= K):
        raise ParameterError(f"class indices must lie in [0, {K})")
    onehot = np.eye(K)[classes]
    x = T.Tensor(np.clip(init, 0.0, 1.0), requires_grad=True)
    state = T.AdamState.like(x.data)
    iterations = np.zeros(len(classes), np.int64)
    rows = np.arange(len(classes))
    with teacher.frozen():
        for step in range(max_iters + 1):
            probs = T.softmax_t(teacher.logits(x), 1.0)
            conf = probs.data[rows, classes]
            active = conf < thresholds
            if not active.any():
                return x.data, iterations, conf
            if step == max_iters:
                break
            iterations[active] += 1
            loss = T.cross_entropy(onehot[active], _select_rows(probs, active), reduction="sum")
            x.grad = None
            loss.backward()
            before = x.data.copy()
            T.adam_step(x.data, x.grad, state, lr)
            np.clip(x.data, 0.0, 1.0, out=x.data)
            x.data[~active] = before[~active]
    raise NonConvergenceError(
        f"class impressions for classes {sorted(set(classes[active].tolist()))} did not reach their "
        f"confidence threshold within {max_iters} iterations")


def _select_rows(t: T.Tensor, mask: np.ndarray) -> T.Tensor:
    idx = np.flatnonzero(mask)

    def bw(g):
        full = np.zeros(t.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return T._result(t.data[idx], (t,), bw, "select_rows")


def craft_class_impression(teacher: Network, k: int, lr: float = 0.1, seed: int = 0,
                           confidence_range=CI_CONFIDENCE_RANGE, max_iters: int = 5000) -> DataImpression:
    if not 0 <= k < teacher.num_classes:
        raise ParameterError(f"class index {k} outside [0, {teacher.num_classes})")
    rng = np.random.default_rng(seed)
    thr = sample_thresholds(rng, 1, *confidence_range)
    images, iters, conf = craft_class_batch(teacher, [k], thr, init_noise(rng, 1, teacher.input_shape), lr,
                                            max_iters)
    target = np.eye(teacher.num_classes)[k]
    return DataImpression(images[0], target, k, 0.0, float(-np.log(conf[0] + T.LOG_EPS)), float("nan"),
                          int(iters[0]), seed)


def generate_class_impressions(teacher: Network, N: int, lr: float = 0.1, batch_size: int = 10, seed: int = 0,
                               max_iters: int = 5000, confidence_range=CI_CONFIDENCE_RANGE, path=None,
                               progress=None) -> TransferSet:
    """``N // K`` class impressions per class, crafted batch by batch."""
    K = teacher.num_classes
    jobs = schedule(K, N, 1, batch_size)
    provenance = {
        "kind": "CI", "teacher_hash": parameter_hash(teacher), "N": N, "lr": lr, "batch_size": batch_size,
        "max_iterations": max_iters, "confidence_range": list(confidence_range), "seed": seed,
        "expected_count": sum(j[3] for j in jobs),
    }
    tset, start = None, 0
    if path is not None:
        path = Path(path)
        tset, start = _resume(path, provenance, jobs)
        if tset is None:
            path.write_bytes(_header_bytes(provenance, K, teacher.input_shape))
    if tset is None:
        tset = TransferSet.empty(K, teacher.input_shape, provenance)
    for n, (k, _, j, size) in enumerate(jobs[start:], start):
        s = sub_seed(seed, k, 0, j)
        rng = np.random.default_rng(s)
        thr = sample_thresholds(rng, size, *confidence_range)
        images, iters, conf = craft_class_batch(teacher, np.full(size, k), thr,
                                                init_noise(rng, size, teacher.input_shape), lr, max_iters)
        part = TransferSet(images, np.tile(np.eye(K)[k], (size, 1)), np.full(size, k, np.int64), np.zeros(size),
                           -np.log(conf + T.LOG_EPS), np.full(size, np.nan), iters, np.full(size, s, np.uint64),
                           np.full(size, j, np.int64), provenance)
        if path is not None:
            _append_records(path, part)
        tset = tset.concat(part)
        if progress:
            progress(n + 1, len(jobs))
    return tset


# --------------------------------------------------------------- PGM export

def _pgm_bytes(image: np.ndarray) -> bytes:
    h, w = image.shape[:2]
    pixels = np.rint(255 * np.clip(image[..., 0], 0, 1)).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes()


def export_impression_images(tset: TransferSet, directory) -> list:
    """One binary PGM per impression, named ``<index>_class<k>_beta<beta>.pgm``."""
    if tset.images.ndim != 4 or tset.images.shape[-1] != 1:
        raise ParameterError("PGM export needs single-channel images")
    directory = Path(directory)
    paths = []
    try:
        directory.mkdir(parents=True, exist_ok=True)
        for i in range(len(tset)):
            p = directory / f"{i:06d}_class{int(tset.class_index[i])}_beta{float(tset.beta[i]):g}.pgm"
            p.write_bytes(_pgm_bytes(tset.images[i]))
            paths.append(p)
    except OSError as exc:
        raise OSError(f"failed writing impressions under {directory}: {exc}") from exc
    return paths


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5, maxval 255) PGM back into an ``H x W x 1`` array in [0, 1]."""
    blob = Path(path).read_bytes()
    parts = blob.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise FormatError(f"{path}: not an 8-bit binary PGM")
    w, h = int(parts[1]), int(parts[2])
    pixels = np.frombuffer(blob[-w * h:], dtype=np.uint8).reshape(h, w, 1)
    return pixels / 255.0
