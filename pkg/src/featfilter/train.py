"""Adam training of a LayerGraph on pixel-wise cross-entropy.

The validation loss per epoch (the "global entropy" curve) is recorded and
the parameters at five probe epochs are kept as checkpoints:

    Es   first epoch            Em   minimum validation loss
    Esm  midway Es..Em          Enm  midway Em..En
    En   last epoch
"""

from __future__ import annotations

import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .entropy import PROBE_TAGS
from .layers import softmax_ce_loss
from .metrics import evaluate, mean_seg
from .nets import LayerGraph, NetworkSpec, build, predict
from .tensor import load_fsm1, save_fsm1

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 0.001
    batch_size: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size != 1:
            raise ValueError("only batch_size 1 is supported")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")


@dataclass
class AdamState:
    """First/second moment estimates, stored flat in ``keys`` order."""

    keys: tuple = ()
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0
    scratch: tuple = field(default=(), repr=False)

    def moment(self, name, params):
        """Per-parameter views ``(m, v)`` of one named parameter."""
        off = 0
        for k in self.keys:
            n = params[k].size
            if k == name:
                return (self.m[off:off + n].reshape(params[k].shape),
                        self.v[off:off + n].reshape(params[k].shape))
            off += n
        raise KeyError(name)


def adam_step(params, grads, state: AdamState, t, config: TrainConfig):
    """One bias-corrected Adam update, applied in place to ``params``.

    Shapes are validated before anything is written, so a bad gradient
    leaves both ``params`` and ``state`` untouched.
    """
    if t < 1:
        raise ValueError("step index t must be >= 1")
    keys = tuple(params)
    for k in keys:
        if k not in grads or np.shape(grads[k]) != params[k].shape:
            raise ValueError(f"gradient for {k!r} missing or mis-shaped")
    if state.m is None:
        total = sum(params[k].size for k in keys)
        state.keys, state.m, state.v = keys, np.zeros(total), np.zeros(total)
        state.scratch = tuple(np.empty(total) for _ in range(3))
    elif state.keys != keys:
        raise ValueError("parameter set changed between Adam steps")
    # preallocated scratch: fresh MB-sized temporaries cost more than the math
    g, work, step = state.scratch
    np.concatenate([np.ravel(grads[k]) for k in keys], out=g)
    b1, b2 = config.beta1, config.beta2
    state.m *= b1
    g *= 1.0 - b1
    state.m += g
    g *= g
    g *= (1.0 - b2) / (1.0 - b1) ** 2
    state.v *= b2
    state.v += g
    # step = lr * mhat / (sqrt(vhat) + eps)
    np.multiply(state.v, 1.0 / (1.0 - b2**t), out=work)
    np.sqrt(work, out=work)
    work += config.epsilon
    np.multiply(state.m, config.learning_rate / (1.0 - b1**t), out=step)
    step /= work
    off = 0
    for k in keys:
        p = params[k]
        p -= step[off:off + p.size].reshape(p.shape)
        off += p.size
    state.t = t
    return params, state


def dataset_loss(graph: LayerGraph, samples):
    """Mean eval-mode cross-entropy over ``samples``."""
    total = 0.0
    for s in samples:
        loss, _ = softmax_ce_loss(graph.forward(s.image, train=False), s.label)
        total += loss
    return total / len(samples)


def probe_epochs(n_epochs, best_epoch):
    """1-based epoch index for every probe tag."""
    es, en, em = 1, n_epochs, best_epoch
    return {"Es": es, "Esm": (es + em) // 2, "Em": em, "Enm": (em + en) // 2, "En": en}


@dataclass
class RunRecord:
    spec: NetworkSpec
    config: TrainConfig
    train_loss: list
    val_loss: list
    best_epoch: int
    tag_epochs: dict
    tag_states: dict
    checkpoints: dict = field(default_factory=dict)
    param_count: int = 0

    def best_state(self):
        return self.tag_states["Em"]

    def loss_csv(self):
        lines = ["epoch,train_loss,val_loss"]
        for i, (tr, va) in enumerate(zip(self.train_loss, self.val_loss), start=1):
            lines.append(f"{i},{tr!r},{va!r}")
        return "\n".join(lines) + "\n"


def train_run(spec: NetworkSpec, train, val, config: TrainConfig, out_dir=None):
    """Train a freshly built network; returns a :class:`RunRecord`.

    The graph is initialised from ``config.seed`` and the sample order is
    reshuffled every epoch from the same seed. If ``out_dir`` is given the
    loss curve and the five probe checkpoints are written there.
    """
    if not train or not val:
        raise ValueError("training and validation sets must be non-empty")
    graph = build(spec, seed=config.seed)
    params = graph.params()
    adam = AdamState()
    step = 0
    train_hist, val_hist, snapshots = [], [], []
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train))
        total = 0.0
        for idx in order:
            s = train[idx]
            logits = graph.forward(s.image, train=True)
            loss, grad = softmax_ce_loss(logits, s.label)
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} (sample {s.id}); "
                    f"first non-finite layer: {graph.first_nonfinite() or 'loss'}")
            graph.backward(grad)
            step += 1
            adam_step(params, graph.grads(), adam, step, config)
            total += loss
        train_hist.append(total / len(train))
        val_hist.append(dataset_loss(graph, val))
        if not math.isfinite(val_hist[-1]):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}; "
                                   f"first non-finite layer: {graph.first_nonfinite() or 'loss'}")
        snapshots.append(graph.state_dict())
        log.info("epoch %d train %.5f val %.5f", epoch, train_hist[-1], val_hist[-1])
    best = int(np.argmin(val_hist)) + 1  # argmin returns the earliest tie
    tags = probe_epochs(config.epochs, best)
    record = RunRecord(spec, config, train_hist, val_hist, best, tags,
                       {t: snapshots[e - 1] for t, e in tags.items()},
                       param_count=graph.count_params())
    if out_dir is not None:
        save_run(record, out_dir)
    return record


def save_run(record: RunRecord, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "record.csv", record.loss_csv())
    atomic_write(out / "tags.csv", "tag,epoch\n" + "".join(
        f"{t},{record.tag_epochs[t]}\n" for t in PROBE_TAGS))
    for tag in PROBE_TAGS:
        path = out / "ckpt" / tag
        save_checkpoint(record.tag_states[tag], record.spec, path)
        record.checkpoints[tag] = path


# -- checkpoints ------------------------------------------------------------------

def atomic_write(path, text):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def spec_text(spec: NetworkSpec):
    return "".join(f"{k} = {v}\n" for k, v in asdict(spec).items())


def parse_spec_text(text):
    fields = NetworkSpec.__dataclass_fields__
    kw = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        k, v = (part.strip() for part in line.split("=", 1))
        if k not in fields:
            raise KeyError(f"unknown network field {k!r}")
        typ = type(getattr(NetworkSpec(), k))
        kw[k] = (v == "True") if typ is bool else typ(v)
    return NetworkSpec(**kw)


def save_checkpoint(state, spec: NetworkSpec, path):
    """Write one FSM1 file per array plus ``manifest.txt`` and ``spec.txt``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = []
    for name in sorted(state):
        arr = state[name]
        fname = f"{name}.fsm"
        save_fsm1(path / fname, arr)
        lines.append(f"{name},{fname},{'x'.join(str(d) for d in arr.shape)}")
    atomic_write(path / "manifest.txt", "\n".join(lines) + "\n")
    atomic_write(path / "spec.txt", spec_text(spec))


def load_checkpoint(path):
    """Rebuild the network stored at ``path``; returns a LayerGraph."""
    path = Path(path)
    manifest = path / "manifest.txt"
    if not manifest.is_file():
        raise FileNotFoundError(f"checkpoint manifest not found: {manifest}")
    spec = parse_spec_text((path / "spec.txt").read_text())
    state = {}
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        name, fname, dims = line.split(",")
        arr = load_fsm1(path / fname)
        if "x".join(str(d) for d in arr.shape) != dims:
            raise ValueError(f"{path / fname}: dims {arr.shape} disagree with manifest {dims}")
        state[name] = arr
    graph = build(spec)
    graph.load_state_dict(state)
    return graph


# -- evaluation and repeated runs ----------------------------------------------------

def evaluate_samples(graph: LayerGraph, samples):
    """``[(sample_id, [MetricsRow, ...]), ...]`` for every sample."""
    k = graph.spec.num_classes
    return [(s.id, evaluate(predict(graph, s.image), s.label, k)) for s in samples]


def summarize(values):
    """Mean and sample standard deviation (0 for a single value)."""
    arr = np.asarray(values, dtype=float)
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), sd


def multi_seed(spec: NetworkSpec, train, val, config: TrainConfig, n_seeds, seeds=None, out_dir=None):
    """Train ``n_seeds`` runs (seeds ``config.seed + i`` unless given) and
    summarise validation Dice/HD at each run's best epoch.

    Returns ``(records, summary)`` where ``summary`` maps ``class_id`` (and
    ``"mean_seg"``) to ``{"dice": (mean, std), "hausdorff": (mean, std)}``
    across seeds, plus ``"best_val_loss"`` as ``(mean, std)``.
    """
    if n_seeds < 2:
        raise ValueError("multi_seed needs at least 2 seeds")
    if seeds is None:
        seeds = [config.seed + i for i in range(n_seeds)]
    if len(seeds) != n_seeds:
        raise ValueError("len(seeds) must equal n_seeds")
    records, per_seed = [], []
    for i, seed in enumerate(seeds):
        cfg = TrainConfig(**{**asdict(config), "seed": seed})
        sub = None if out_dir is None else Path(out_dir) / f"seed_{i}"
        rec = train_run(spec, train, val, cfg, out_dir=sub)
        records.append(rec)
        graph = build(spec)
        graph.load_state_dict(rec.best_state())
        per_seed.append(class_means(evaluate_samples(graph, val), spec.num_classes))
    summary = {}
    for key in list(range(spec.num_classes)) + ["mean_seg"]:
        summary[key] = {m: summarize([ps[key][m] for ps in per_seed]) for m in ("dice", "hausdorff")}
    summary["best_val_loss"] = summarize([min(r.val_loss) for r in records])
    return records, summary


def class_means(evaluated, num_classes):
    """Per-class mean Dice/HD over samples, plus the foreground ``mean_seg``."""
    out = {}
    for c in range(num_classes):
        rows = [r for _, rs in evaluated for r in rs if r.class_id == c]
        out[c] = {"dice": float(np.mean([r.dice for r in rows])),
                  "hausdorff": float(np.mean([r.hausdorff for r in rows]))}
    ms = [mean_seg(rs) for _, rs in evaluated]
    out["mean_seg"] = {"dice": float(np.mean([m[0] for m in ms])),
                       "hausdorff": float(np.mean([m[1] for m in ms]))}
    return out
