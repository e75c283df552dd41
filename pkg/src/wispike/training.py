"""Adam/BPTT training loop, run configuration, checkpoints and evaluation metrics."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .csi_data import DatasetManifest, read_manifest
from .errors import ConfigError, DataError, FormatError, NumericsError
from .layers import Model, ModelConfig, build_model, predict
from .objective import LossConfig, ProjectionHead, hybrid_loss_and_grad, one_hot
from .telemetry import LayerRates, rates_from_counts

log = logging.getLogger(__name__)

CKPT_MAGIC = b"WSPK"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    manifest: str | None = None
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig.from_dict(self.loss)
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.betas = tuple(float(b) for b in self.betas)
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ConfigError(f"epochs must be a positive integer, got {self.epochs}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ConfigError(f"batch_size must be a positive integer, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"adam betas must be two numbers in [0, 1), got {self.betas}")

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown run config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs, "batch_size": self.batch_size, "learning_rate": self.learning_rate,
            "betas": list(self.betas), "eps": self.eps, "seed": self.seed, "manifest": self.manifest,
            "loss": self.loss.to_dict(), "model": self.model.to_dict(),
        }

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")).digest()


def default_config() -> TrainConfig:
    text = resources.files("wispike").joinpath("configs/desk.json").read_text(encoding="utf-8")
    return TrainConfig.from_dict(json.loads(text))


def load_config(path) -> TrainConfig:
    """Read a JSON run config; keys left out fall back to the desk defaults.

    A relative ``manifest`` path is resolved against the config file's folder.
    """
    path = Path(path)
    try:
        user = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    base = default_config().to_dict()
    for key in ("loss", "model"):
        if key in user:
            base[key].update(user.pop(key))
    base.update(user)
    cfg = TrainConfig.from_dict(base)
    if cfg.manifest and not Path(cfg.manifest).is_absolute():
        cfg.manifest = str((path.parent / cfg.manifest).resolve())
    return cfg


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# optimizer

def adam_step(params: dict, grads: dict, moments: dict, lr: float, betas=(0.9, 0.999),
              eps: float = 1e-8, t: int = 1) -> None:
    """In-place Adam update with bias correction; ``moments`` maps name -> (m, v)."""
    if t < 1:
        raise ValueError(f"adam step counter starts at 1, got {t}")
    b1, b2 = betas
    for name in sorted(params):
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for parameter {name!r}")
        p = params[name]
        if name not in moments:
            moments[name] = (np.zeros_like(p), np.zeros_like(p))
        m, v = moments[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)


class Adam:
    def __init__(self, lr=0.01, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.t = 0
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def step(self, params: dict, grads: dict):
        self.t += 1
        adam_step(params, grads, self.moments, self.lr, self.betas, self.eps, self.t)


# ---------------------------------------------------------------------------
# model bundle and checkpoints

@dataclass
class TrainedModel:
    model: Model
    head: ProjectionHead
    config: TrainConfig

    def parameters(self) -> dict[str, np.ndarray]:
        out = {f"model/{k}": v for k, v in self.model.parameters().items()}
        out.update({f"head/{k}": v for k, v in self.head.params.items()})
        return out

    def gradients(self) -> dict[str, np.ndarray]:
        out = {f"model/{k}": v for k, v in self.model.gradients().items()}
        out.update({f"head/{k}": v for k, v in self.head.grads.items()})
        return out

    def zero_grad(self):
        self.model.zero_grad()
        self.head.zero_grad()

    def scores(self, x, batch_size=64) -> np.ndarray:
        return np.concatenate([self.model.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def init_model(cfg: TrainConfig, input_shape, n_class, dtype=np.float32) -> TrainedModel:
    model = build_model(cfg.model, input_shape, n_class, seed=cfg.seed, dtype=dtype)
    head = ProjectionHead(model.tap_features, cfg.loss.projection_dim,
                          np.random.default_rng([cfg.seed, 1]), dtype)
    return TrainedModel(model, head, cfg)


def _blob(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.asarray(arr, dtype="<f4")
    return (struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
            + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes())


def save_checkpoint(path, tm: TrainedModel, optimizer: Adam, epoch: int) -> None:
    cfg = tm.config
    cfg_json = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    blobs = dict(tm.parameters())
    for name in sorted(optimizer.moments):
        m, v = optimizer.moments[name]
        blobs[f"adam_m/{name}"] = m
        blobs[f"adam_v/{name}"] = v
    out = io.BytesIO()
    out.write(CKPT_MAGIC)
    out.write(struct.pack("<IIQI", CKPT_VERSION, epoch, cfg.seed & (2 ** 64 - 1), optimizer.t))
    out.write(cfg.digest())
    out.write(struct.pack("<I", len(cfg_json)) + cfg_json)
    out.write(struct.pack("<I", len(blobs)))
    for name in blobs:
        out.write(_blob(name, blobs[name]))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(out.getvalue())
    tmp.replace(path)


@dataclass
class Checkpoint:
    trained: TrainedModel
    optimizer: Adam
    epoch: int
    seed: int
    digest: bytes


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated checkpoint while reading {what}", len(buf))
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    version, epoch, seed, adam_t = struct.unpack("<IIQI", take(20, "header"))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    digest = take(32, "config digest")
    (n_cfg,) = struct.unpack("<I", take(4, "config length"))
    cfg = TrainConfig.from_dict(json.loads(take(n_cfg, "config").decode("utf-8")))
    if cfg.digest() != digest:
        raise FormatError("config digest mismatch", 28)
    (n_blobs,) = struct.unpack("<I", take(4, "blob count"))
    blobs = {}
    for _ in range(n_blobs):
        (n_name,) = struct.unpack("<I", take(4, "name length"))
        name = take(n_name, "name").decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4, "rank"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        count = int(np.prod(shape, dtype=np.int64))
        blobs[name] = np.frombuffer(take(4 * count, name), dtype="<f4").astype(np.float32).reshape(shape)
    tm = init_model(cfg, cfg.model.input_shape, cfg.model.n_class)
    for name, arr in tm.parameters().items():
        if name not in blobs:
            raise FormatError(f"checkpoint lacks parameter {name}", pos)
        arr[...] = blobs[name]
    opt = Adam(cfg.learning_rate, cfg.betas, cfg.eps)
    opt.t = adam_t
    for name in tm.parameters():
        if f"adam_m/{name}" in blobs:
            opt.moments[name] = (blobs[f"adam_m/{name}"].copy(), blobs[f"adam_v/{name}"].copy())
    return Checkpoint(tm, opt, epoch, seed, digest)


# ---------------------------------------------------------------------------
# metrics

@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: np.ndarray

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall, "f1": self.f1}


def confusion_matrix(y_true, y_pred, n_class) -> np.ndarray:
    cm = np.zeros((n_class, n_class), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def metrics_from_confusion(cm) -> Metrics:
    """Macro-averaged metrics; rows are true classes, columns predictions.

    A class never predicted (or never present) contributes 0 precision (recall).
    """
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm).astype(np.float64)
    pred = cm.sum(axis=0)
    true = cm.sum(axis=1)
    precision = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
    recall = np.divide(tp, true, out=np.zeros_like(tp), where=true > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    total = cm.sum()
    accuracy = float(tp.sum() / total) if total else 0.0
    return Metrics(accuracy, float(precision.mean()), float(recall.mean()), float(f1.mean()), cm)


def evaluate(tm: TrainedModel, data, batch_size: int = 64) -> Metrics:
    """Metrics on a manifest (its test split if it has one) or on ``(x, y)`` arrays."""
    if isinstance(data, DatasetManifest):
        if data.class_names and len(data.class_names) != tm.model.n_class:
            raise ConfigError(f"model has {tm.model.n_class} classes, manifest has {len(data.class_names)}")
        part = data.split("test") if any(e.split == "test" for e in data.entries) else data
        x, y = part.load()
    else:
        x, y = data
    if len(y) == 0:
        raise DataError("no samples to evaluate")
    if y.max() >= tm.model.n_class:
        raise ConfigError(f"labels reach class {y.max()} but the model has {tm.model.n_class} classes")
    pred = predict(tm.scores(x, batch_size))
    return metrics_from_confusion(confusion_matrix(y, pred, tm.model.n_class))


# ---------------------------------------------------------------------------
# training loop

@dataclass
class EpochRecord:
    epoch: int
    split: str
    loss: float
    accuracy: float
    rates: list[LayerRates]

    def row(self) -> list:
        # repr round-trips floats exactly, so logged rates can be checked against recomputation
        return [self.epoch, self.split, repr(float(self.loss)), repr(float(self.accuracy))] + [
            repr(float(r.mean)) for r in self.rates]


@dataclass
class TrainResult:
    trained: TrainedModel
    history: list[EpochRecord]
    checkpoint: Path | None


class _EpochStats:
    def __init__(self, model: Model):
        self.layers = model.neuron_layers()
        self.model = model
        self.loss = 0.0
        self.correct = 0
        self.n = 0
        self.counts = [None] * len(self.layers)

    def add(self, loss, scores, y):
        n = len(y)
        self.loss += loss * n
        self.correct += int((predict(scores) == y).sum())
        self.n += n
        for k, idx in enumerate(self.layers):
            spikes = self.model.layers[idx].last_spikes
            c = np.count_nonzero(spikes, axis=(0, 1)).astype(np.int64)
            self.counts[k] = c if self.counts[k] is None else self.counts[k] + c

    def record(self, epoch, split) -> EpochRecord:
        t = self.model.time_steps
        rates = [rates_from_counts(c, t * self.n) for c in self.counts]
        return EpochRecord(epoch, split, self.loss / self.n, self.correct / self.n, rates)


def _batch_loss(tm: TrainedModel, x, y, need_grad: bool):
    model, head, cfg = tm.model, tm.head, tm.config
    scores = model.forward(x)
    targets = one_hot(y, model.n_class, scores.dtype)
    use_scl = cfg.loss.gamma2 > 0 and len(y) >= 2
    z = head.forward(model.tap_output()) if use_scl else None
    lcfg = cfg.loss if use_scl else LossConfig(cfg.loss.gamma1 or 1.0, 0.0, cfg.loss.tau, cfg.loss.projection_dim)
    loss, g_f, g_z, _ = hybrid_loss_and_grad(scores, targets, z, y, lcfg)
    if not np.isfinite(loss):
        raise NumericsError(f"non-finite loss {loss}")
    if need_grad:
        tap_grad = head.backward(g_z) if g_z is not None else None
        model.backward(g_f, tap_grad)
    return loss, scores


def evaluate_split(tm: TrainedModel, x, y, epoch: int = 0, split: str = "test") -> EpochRecord:
    stats = _EpochStats(tm.model)
    bs = tm.config.batch_size
    for i in range(0, len(y), bs):
        loss, scores = _batch_loss(tm, x[i:i + bs], y[i:i + bs], need_grad=False)
        stats.add(loss, scores, y[i:i + bs])
    return stats.record(epoch, split)


def _load_data(cfg: TrainConfig):
    if not cfg.manifest:
        raise DataError("run config names no manifest")
    manifest = read_manifest(cfg.manifest)
    xtr, ytr = manifest.split("train").load()
    xte, yte = manifest.split("test").load()
    n_class = manifest.n_classes
    return xtr, ytr, xte, yte, n_class


HISTORY_NAME = "history.csv"
RATES_NAME = "rates.csv"
CHECKPOINT_NAME = "checkpoint.wspk"


def write_history(path, history: list[EpochRecord]) -> None:
    n_layers = len(history[0].rates) if history else 0
    buf = io.StringIO(newline="")
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["epoch", "split", "loss", "accuracy"] + [f"fr_layer_{i}" for i in range(n_layers)])
    for rec in history:
        wr.writerow(rec.row())
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="")


def write_rates(path, history: list[EpochRecord], layer_names: list[str]) -> None:
    buf = io.StringIO(newline="")
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["epoch", "split", "layer", "name", "mean", "std", "in_band"])
    for rec in history:
        for i, r in enumerate(rec.rates):
            wr.writerow([rec.epoch, rec.split, i, layer_names[i], repr(float(r.mean)), repr(float(r.std)), int(r.in_band)])
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="")


def read_history(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def train(config: TrainConfig, out_dir=None, *, data=None, resume=None, progress=False) -> TrainResult:
    """Train with Adam on the hybrid loss.

    ``data`` may supply ``(x_train, y_train, x_test, y_test, n_class)`` arrays
    directly; otherwise the manifest named in the config is loaded. With
    ``resume`` (a checkpoint path) training continues from that epoch up to
    ``config.epochs``. Epoch ``e`` visits the training set in the order of
    ``default_rng([seed, e]).permutation``, so interrupted and uninterrupted
    runs see the same batches.
    """
    xtr, ytr, xte, yte, n_class = data if data is not None else _load_data(config)
    if len(ytr) == 0:
        raise DataError("training split is empty")
    history: list[EpochRecord] = []
    if resume is not None:
        ckpt = load_checkpoint(resume)
        tm, opt, start = ckpt.trained, ckpt.optimizer, ckpt.epoch
        tm.config = config
        if out_dir is not None and (Path(out_dir) / HISTORY_NAME).exists():
            history = _history_from_files(Path(out_dir), start)
    else:
        tm = init_model(config, xtr.shape[1:], n_class)
        opt = Adam(config.learning_rate, config.betas, config.eps)
        start = 0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_config(config, out / "run.json")
    names = [f"{i}:{tm.model.layers[i].kind}" for i in tm.model.neuron_layers()]
    bs = config.batch_size
    ckpt_path = None
    for epoch in range(start + 1, config.epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(ytr))
        stats = _EpochStats(tm.model)
        for b, i in enumerate(range(0, len(order), bs)):
            idx = order[i:i + bs]
            tm.zero_grad()
            try:
                loss, scores = _batch_loss(tm, xtr[idx], ytr[idx], need_grad=True)
                opt.step(tm.parameters(), tm.gradients())
            except NumericsError as exc:
                raise NumericsError(f"epoch {epoch}, batch {b}: {exc}") from exc
            stats.add(loss, scores, ytr[idx])
        history.append(stats.record(epoch, "train"))
        if len(yte):
            history.append(evaluate_split(tm, xte, yte, epoch, "test"))
        if progress:
            tr = history[-2] if len(yte) else history[-1]
            log.info("epoch %d train loss %.4f acc %.3f | test acc %.3f", epoch, tr.loss, tr.accuracy,
                     history[-1].accuracy)
        if out is not None:
            ckpt_path = out / CHECKPOINT_NAME
            save_checkpoint(ckpt_path, tm, opt, epoch)
            write_history(out / HISTORY_NAME, history)
            write_rates(out / RATES_NAME, history, names)
    return TrainResult(tm, history, ckpt_path)


def _history_from_files(out: Path, upto: int) -> list[EpochRecord]:
    rows = read_history(out / HISTORY_NAME)
    std = {}
    if (out / RATES_NAME).exists():
        for r in read_history(out / RATES_NAME):
            std[(r["epoch"], r["split"], int(r["layer"]))] = float(r["std"])
    recs = []
    for r in rows:
        if int(r["epoch"]) > upto:
            continue
        keys = sorted((k for k in r if k.startswith("fr_layer_")), key=lambda k: int(k.rsplit("_", 1)[1]))
        rates = [LayerRates(float(r[k]), std.get((r["epoch"], r["split"], i), 0.0)) for i, k in enumerate(keys)]
        recs.append(EpochRecord(int(r["epoch"]), r["split"], float(r["loss"]), float(r["accuracy"]), rates))
    return recs
