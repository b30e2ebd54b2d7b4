"""AET pre-training, probe training, KNN evaluation and the metrics log."""

from __future__ import annotations

import csv
import hashlib
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import config as config_mod
from .config import RunConfig
from .data import Dataset, gen_synthetic, iter_batches, load_cifar10, make_aet_batch, split
from .errors import (
    ArchMismatch,
    CheckpointError,
    EmptyDataset,
    IoFailure,
    MalformedCsv,
    NonFiniteError,
    NonFiniteLoss,
)
from .model import PROBE_TAP, AetHead, Encoder, NinConfig, ProbeHead, ProbeSpec, aet_forward, encode, make_probe_head
from .nn import ops
from .nn.checkpoint import load_container, save_container
from .nn.optim import SgdConfig, lr_at_epoch, sgd_step
from .nn.tensor import Tensor, backward, no_grad

CSV_HEADER = ("epoch", "aet_loss", "lr", "probe_error", "knn_error", "wall_seconds")
CHECKPOINT_KIND = "aet-checkpoint"


# ---------------------------------------------------------------------------
# metrics log

@dataclass(frozen=True)
class MetricsRow:
    epoch: int
    aet_loss: float
    lr: float
    probe_error: float | None = None
    knn_error: float | None = None
    wall_seconds: float | None = None

    def as_list(self):
        return [self.epoch, self.aet_loss, self.lr, self.probe_error, self.knn_error, self.wall_seconds]


@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)

    def append(self, row: MetricsRow):
        if self.rows and row.epoch <= self.rows[-1].epoch:
            raise ValueError(f"epoch {row.epoch} does not follow {self.rows[-1].epoch}")
        if not math.isfinite(row.aet_loss):
            raise ValueError(f"non-finite loss at epoch {row.epoch}")
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return [getattr(r, name) for r in self.rows]

    def evaluated(self):
        """Rows that carry a probe or KNN measurement."""
        return [r for r in self.rows if r.probe_error is not None or r.knn_error is not None]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def export_metrics(log: MetricsLog, path) -> str:
    if not log.rows:
        raise ValueError("cannot export an empty metrics log")
    path = os.fspath(path)
    try:
        with open(path, "w", newline="") as fh:
            fh.write(",".join(CSV_HEADER) + "\n")
            for r in log.rows:
                fh.write(",".join(_fmt(v) for v in r.as_list()) + "\n")
    except OSError as e:
        raise IoFailure(f"cannot write metrics to {path}: {e}") from e
    return path


def import_metrics(path) -> MetricsLog:
    """Parse a CSV written by :func:`export_metrics`; errors carry the line number."""
    path = os.fspath(path)
    try:
        with open(path, newline="") as fh:
            lines = list(csv.reader(fh))
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    if not lines or tuple(lines[0]) != CSV_HEADER:
        raise MalformedCsv(path, 1, f"header must be {','.join(CSV_HEADER)}")
    if len(lines) == 1:
        raise MalformedCsv(path, 1, "no data rows")
    log = MetricsLog()
    for lineno, cells in enumerate(lines[1:], 2):
        if len(cells) != len(CSV_HEADER):
            raise MalformedCsv(path, lineno, f"expected {len(CSV_HEADER)} cells, got {len(cells)}")
        try:
            opt = [float(c) if c != "" else None for c in cells[3:]]
            row = MetricsRow(int(cells[0]), float(cells[1]), float(cells[2]), *opt)
            log.append(row)
        except ValueError as e:
            raise MalformedCsv(path, lineno, str(e)) from e
    return log


# ---------------------------------------------------------------------------
# checkpoints

def state_digest(module) -> str:
    """SHA-256 over every parameter and buffer, in name order."""
    h = hashlib.sha256()
    for name, arr in sorted(module.state_arrays().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


@dataclass
class EncoderCheckpoint:
    config: RunConfig
    epoch: int
    arrays: dict  # "encoder/<name>", "head/<name>", "momentum/<name>"
    rng_state: dict | None = None
    log_rows: list = field(default_factory=list)

    def encoder(self) -> Encoder:
        """A fresh encoder in eval mode carrying the saved weights."""
        e = Encoder(self.config.nin, np.random.default_rng(0))
        e.load_state_arrays(_section(self.arrays, "encoder"))
        return e.eval()

    def head(self) -> AetHead:
        d = AetHead(np.random.default_rng(0), self.config.nin.feature_width)
        d.load_state_arrays(_section(self.arrays, "head"))
        return d

    def log(self) -> MetricsLog:
        return MetricsLog([MetricsRow(*r) for r in self.log_rows])

    def save(self, path) -> str:
        manifest = {
            "kind": CHECKPOINT_KIND,
            "epoch": self.epoch,
            "config": config_mod.to_flat(self.config),
            "rng_state": self.rng_state,
            "log": [list(r) for r in self.log_rows],
        }
        return save_container(path, manifest, self.arrays)

    @classmethod
    def load(cls, path) -> "EncoderCheckpoint":
        manifest, arrays = load_container(path)
        if manifest.get("kind") != CHECKPOINT_KIND:
            raise CheckpointError(f"{path}: not an encoder checkpoint")
        cfg = config_mod.from_flat(manifest["config"])
        return cls(cfg, int(manifest["epoch"]), arrays, manifest.get("rng_state"),
                   [tuple(r) for r in manifest.get("log", [])])


def _section(arrays, prefix):
    p = prefix + "/"
    return {k[len(p):]: v for k, v in arrays.items() if k.startswith(p)}


def _snapshot(cfg, epoch, encoder, head, rng, log) -> EncoderCheckpoint:
    arrays = {}
    for prefix, module in (("encoder", encoder), ("head", head)):
        for name, arr in module.state_arrays().items():
            arrays[f"{prefix}/{name}"] = np.array(arr, dtype=np.float64)
    for p in encoder.parameters() + head.parameters():
        arrays[f"momentum/{p.name}"] = np.array(p.momentum, dtype=np.float64)
    return EncoderCheckpoint(cfg, epoch, arrays, rng.bit_generator.state, [r.as_list() for r in log.rows])


# ---------------------------------------------------------------------------
# data and models

def load_datasets(cfg: RunConfig):
    """``(train, test)`` for the configured dataset; test uses train statistics."""
    if cfg.data.name == "cifar10":
        cfg.check_paths()
        return load_cifar10(cfg.data.path)
    ds = gen_synthetic(cfg.synthetic)
    return split(ds, cfg.data.test_fraction, cfg.data.split_seed)


def _rngs(seed: int):
    init_ss, data_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(data_ss)


def build_models(cfg: RunConfig):
    """Encoder and AET head exactly as ``train_aet`` initializes them for ``cfg.seed``."""
    init_rng, _ = _rngs(cfg.seed)
    encoder = Encoder(cfg.nin, init_rng)
    head = AetHead(init_rng, cfg.nin.feature_width)
    return encoder, head


def random_checkpoint(cfg: RunConfig) -> EncoderCheckpoint:
    """An untrained checkpoint: the random-init baseline at epoch 0."""
    encoder, head = build_models(cfg)
    _, data_rng = _rngs(cfg.seed)
    return _snapshot(cfg, 0, encoder, head, data_rng, MetricsLog())


def _check_compat(nin: NinConfig, ds: Dataset):
    if nin.num_blocks < PROBE_TAP:
        raise ArchMismatch(f"encoder has {nin.num_blocks} blocks; probes read block {PROBE_TAP}")
    if ds.images.shape[1] != nin.in_channels:
        raise ArchMismatch(f"encoder expects {nin.in_channels} channels, data has {ds.images.shape[1]}")


# ---------------------------------------------------------------------------
# AET training

def train_aet(cfg: RunConfig, resume: EncoderCheckpoint | None = None, data=None, out_dir=None,
              progress=None):
    """Minibatch SGD on the AET regression loss.

    Writes ``ckpt_epochNNNN.ckpt`` at the eval cadence, ``final.ckpt`` and
    ``metrics.csv`` into ``out_dir`` (skipped when ``out_dir`` is None).
    ``resume`` continues a checkpoint bit-identically. ``data`` may pass a
    preloaded ``(train, test)`` pair.
    """
    train, test = data if data is not None else load_datasets(cfg)
    if len(train) < 2:
        raise EmptyDataset("AET training needs at least two images")
    _check_compat(cfg.nin, train)
    encoder, head = build_models(cfg)
    _, rng = _rngs(cfg.seed)
    log = MetricsLog()
    start = 0
    params = encoder.parameters() + head.parameters()
    if resume is not None:
        encoder.load_state_arrays(_section(resume.arrays, "encoder"))
        head.load_state_arrays(_section(resume.arrays, "head"))
        moms = _section(resume.arrays, "momentum")
        for p in params:
            p.momentum = np.array(moms[p.name], dtype=np.float64)
        rng.bit_generator.state = resume.rng_state
        log = resume.log()
        start = resume.epoch
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    ckpt = None
    for epoch in range(start, cfg.epochs):
        t0 = time.perf_counter()
        encoder.train()
        head.train()
        lr = lr_at_epoch(cfg.sgd, epoch)
        total, count = 0.0, 0
        order = rng.permutation(len(train))
        for b, idx in enumerate(iter_batches(order, cfg.batch_size)):
            batch = make_aet_batch(train, idx, cfg.xform, rng)
            try:
                loss = ops.regression_loss(aet_forward(encoder, head, batch.originals, batch.transformed),
                                           batch.targets)
                backward(loss, params)
            except NonFiniteError as e:
                raise NonFiniteLoss(epoch + 1, b) from e
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLoss(epoch + 1, b)
            sgd_step(params, cfg.sgd, lr)
            total += value * len(idx)
            count += len(idx)

        done = epoch + 1
        evaluate = done % cfg.eval_cadence == 0 or done == cfg.epochs
        probe_err = knn_err = None
        if evaluate:
            try:
                probe_err, knn_err = _evaluate(cfg, encoder, train, test, done)
            except NonFiniteError as e:
                # the last step left non-finite weights
                raise NonFiniteLoss(done, b) from e
        wall = time.perf_counter() - t0 if cfg.wall_clock else None
        log.append(MetricsRow(done, total / count, lr, probe_err, knn_err, wall))
        if progress:
            progress(log.rows[-1])
        if evaluate:
            ckpt = _snapshot(cfg, done, encoder, head, rng, log)
            if out_dir:
                ckpt.save(os.path.join(out_dir, f"ckpt_epoch{done:04d}.ckpt"))

    if ckpt is None or ckpt.epoch != cfg.epochs:
        ckpt = _snapshot(cfg, cfg.epochs, encoder, head, rng, log)
    if out_dir:
        ckpt.save(os.path.join(out_dir, "final.ckpt"))
        if log.rows:
            export_metrics(log, os.path.join(out_dir, "metrics.csv"))
    return ckpt, log


def _evaluate(cfg, encoder, train, test, epoch):
    encoder.eval()
    before = state_digest(encoder)
    ftr = pooled_features(encoder, train)
    fte = pooled_features(encoder, test)
    knn_err = knn_from_features(ftr, train.labels, fte, test.labels, [cfg.knn_k])[0][1]
    probe_err = None
    if cfg.probe.kind != "conv":
        spec = cfg.probe.spec(train.class_count)
        _, probe_err = fit_feature_probe(ftr, train.labels, fte, test.labels, spec, cfg.probe,
                                         seed=(cfg.seed, epoch))
    else:
        _, probe_err = train_probe_encoder(encoder, cfg.probe.spec(train.class_count), train, test, cfg.probe,
                                           seed=(cfg.seed, epoch))
    if state_digest(encoder) != before:
        raise RuntimeError("evaluation modified the encoder")
    encoder.train()
    return probe_err, knn_err


# ---------------------------------------------------------------------------
# features and probes

def pooled_features(encoder: Encoder, ds: Dataset, tap: int = PROBE_TAP, batch: int = 256) -> np.ndarray:
    """Global-average-pooled block-``tap`` features, eval mode, ``(N, width)``."""
    was_training = encoder.training
    encoder.eval()
    out = []
    try:
        with no_grad():
            for i in range(0, len(ds), batch):
                x = ds.normalized(np.arange(i, min(i + batch, len(ds))))
                out.append(encode(encoder, x, tap, pooled=True).data)
    finally:
        encoder.train(was_training)
    width = encoder.cfg.widths[tap - 1]
    return np.concatenate(out) if out else np.zeros((0, width))


def _fit_head(head: ProbeHead, feats_fn, labels, n, cfg, rng):
    """SGD on softmax cross-entropy; ``feats_fn(idx)`` returns probe inputs."""
    sgd = cfg.sgd()
    params = head.parameters()
    head.train()
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(sgd, epoch)
        for idx in iter_batches(rng.permutation(n), cfg.batch_size):
            loss = ops.softmax_cross_entropy(head(feats_fn(idx)), labels[idx])
            backward(loss, params)
            sgd_step(params, sgd, lr)
    head.eval()
    return head


def _error(head: ProbeHead, feats_fn, labels, batch=512) -> float:
    if len(labels) == 0:
        raise EmptyDataset("cannot evaluate on an empty test set")
    wrong = 0
    with no_grad():
        for i in range(0, len(labels), batch):
            idx = np.arange(i, min(i + batch, len(labels)))
            pred = np.argmax(head(feats_fn(idx)).data, axis=1)
            wrong += int(np.sum(pred != labels[idx]))
    return wrong / len(labels)


def fit_feature_probe(train_feats, train_labels, test_feats, test_labels, spec: ProbeSpec, cfg, seed=0):
    """Train an fc probe on fixed feature vectors; returns ``(head, test error)``."""
    if spec.needs_map:
        raise ValueError("fit_feature_probe takes pooled vectors; use train_probe for conv probes")
    train_feats = np.asarray(train_feats, dtype=np.float64).reshape(len(train_labels), -1)
    test_feats = np.asarray(test_feats, dtype=np.float64).reshape(len(test_labels), -1)
    rng = np.random.default_rng(seed)
    head = ProbeHead(spec, train_feats.shape[1], rng)
    train_labels = np.asarray(train_labels)
    test_labels = np.asarray(test_labels)
    _fit_head(head, lambda idx: Tensor(train_feats[idx]), train_labels, len(train_labels), cfg, rng)
    return head, _error(head, lambda idx: Tensor(test_feats[idx]), test_labels)


def train_probe_encoder(encoder: Encoder, spec: ProbeSpec, train: Dataset, test: Dataset, cfg, seed=0):
    """Probe a frozen in-memory encoder; the encoder is bit-verified unchanged."""
    _check_compat(encoder.cfg, train)
    if len(train) < 2 or len(test) == 0:
        raise EmptyDataset("probe training needs a non-empty train and test split")
    was_training = encoder.training
    encoder.eval()
    before = state_digest(encoder)
    rng = np.random.default_rng(seed)
    head = make_probe_head(encoder, spec, rng)
    try:
        if spec.needs_map:
            def maps(ds):
                return lambda idx: encode(encoder, ds.normalized(idx), PROBE_TAP).detach()
            _fit_head(head, _frozen(maps(train)), train.labels, len(train), cfg, rng)
            err = _error(head, _frozen(maps(test)), test.labels)
        else:
            ftr = pooled_features(encoder, train)
            fte = pooled_features(encoder, test)
            _fit_head(head, lambda idx: Tensor(ftr[idx]), train.labels, len(train), cfg, rng)
            err = _error(head, lambda idx: Tensor(fte[idx]), test.labels)
    finally:
        encoder.train(was_training)
    if state_digest(encoder) != before:
        raise RuntimeError("probe training modified the frozen encoder")
    return head, err


def _frozen(fn):
    def wrapped(idx):
        with no_grad():
            return fn(idx)
    return wrapped


def train_probe(ckpt: EncoderCheckpoint, spec: ProbeSpec, train: Dataset, test: Dataset, cfg=None, seed=0):
    """Train a probe head on the checkpoint's frozen block-2 features.

    Returns ``(head, held-out top-1 error)``.
    """
    cfg = cfg or ckpt.config.probe
    return train_probe_encoder(ckpt.encoder(), spec, train, test, cfg, seed)


# ---------------------------------------------------------------------------
# KNN

def knn_from_features(train_feats, train_labels, test_feats, test_labels, ks, chunk=1024):
    """Top-1 error for each K in ``ks`` from precomputed features.

    Votes go to the majority class among the K nearest (Euclidean) training
    points; ties go to the smaller summed distance, then the smaller class.
    Neighbors are ranked by (distance, label, index-free), so the result does
    not depend on the order of the training set up to exact distance ties
    within one class.
    """
    ks = list(ks)
    train_feats = np.asarray(train_feats, dtype=np.float64)
    test_feats = np.asarray(test_feats, dtype=np.float64)
    train_labels = np.asarray(train_labels, dtype=np.int64)
    test_labels = np.asarray(test_labels, dtype=np.int64)
    n = len(train_labels)
    if n == 0 or len(test_labels) == 0:
        raise EmptyDataset("KNN needs non-empty train and test sets")
    for k in ks:
        if not 1 <= k <= n:
            raise ValueError(f"K must lie in [1, {n}], got {k}")
    kmax = max(ks)
    classes = int(max(train_labels.max(), test_labels.max())) + 1
    sq_train = np.einsum("ij,ij->i", train_feats, train_feats)
    wrong = np.zeros(len(ks), dtype=np.int64)
    for s in range(0, len(test_labels), chunk):
        q = test_feats[s:s + chunk]
        d2 = np.einsum("ij,ij->i", q, q)[:, None] + sq_train[None, :] - 2.0 * q @ train_feats.T
        dist = np.sqrt(np.maximum(d2, 0.0))
        for row, truth in zip(dist, test_labels[s:s + chunk]):
            order = np.lexsort((train_labels, row))[:kmax]
            nd, nl = row[order], train_labels[order]
            for j, k in enumerate(ks):
                wrong[j] += _vote(nd[:k], nl[:k], classes) != truth
    return [(k, float(w) / len(test_labels)) for k, w in zip(ks, wrong)]


def _vote(dists, labels, classes) -> int:
    counts = np.bincount(labels, minlength=classes)
    tied = np.flatnonzero(counts == counts.max())
    if len(tied) == 1:
        return int(tied[0])
    sums = np.bincount(labels, weights=dists, minlength=classes)[tied]
    return int(tied[np.argmin(sums)])  # argmin takes the first, i.e. smallest class, on equal sums


def knn_sweep(ckpt, train: Dataset, test: Dataset, ks):
    """``[(K, error)]`` for every K, computing features once."""
    encoder = ckpt.encoder() if isinstance(ckpt, EncoderCheckpoint) else ckpt
    before = state_digest(encoder)
    result = knn_from_features(pooled_features(encoder, train), train.labels,
                               pooled_features(encoder, test), test.labels, ks)
    if state_digest(encoder) != before:
        raise RuntimeError("KNN evaluation modified the encoder")
    return result


def knn_eval(ckpt, train: Dataset, test: Dataset, k: int = 10) -> float:
    """Top-1 KNN error on pooled block-2 features; ``ckpt`` may also be an Encoder."""
    return knn_sweep(ckpt, train, test, [k])[0][1]


def rank_correlation(log: MetricsLog, column="probe_error"):
    """Spearman correlation between aet_loss and ``column`` over evaluated rows."""
    from scipy.stats import spearmanr

    rows = [r for r in log.rows if getattr(r, column) is not None]
    if len(rows) < 3:
        raise ValueError("need at least three evaluated checkpoints")
    rho = spearmanr([r.aet_loss for r in rows], [getattr(r, column) for r in rows]).statistic
    return float(rho)


__all__ = [
    "CSV_HEADER", "EncoderCheckpoint", "MetricsLog", "MetricsRow", "SgdConfig", "build_models",
    "export_metrics", "fit_feature_probe", "import_metrics", "knn_eval", "knn_from_features", "knn_sweep",
    "load_datasets", "pooled_features", "random_checkpoint", "rank_correlation", "state_digest",
    "train_aet", "train_probe", "train_probe_encoder",
]
