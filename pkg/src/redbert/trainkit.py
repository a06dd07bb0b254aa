"""Training loops: pretraining, fine-tuning, early stopping, and metrics.

One driver owns the model per run. Every run is deterministic under its
config seed: the validation carve, batch order, dropout draws, and
parameter initialization all derive from it, so two runs with the same
inputs produce bit-identical metrics files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datapipe import (TaskDataset, encode_classification, encode_proactive,
                       encode_tagging)
from .depinject import DepEmbeddingTable, InjectedModel, SideTransformer
from .encoder import (EncoderState, cls_rows, count_parameters,
                      forward as encoder_forward, load_checkpoint,
                      make_batch, save_checkpoint)
from .errors import ConfigError, DataError, RunError
from .objectives import (ClassifierHead, MLMHead, NSPHead, ProactiveHead,
                         TaggerHead, classify, joint_pretrain_loss,
                         proactive_forward, tag, tag_predict)
from .optim import Adam, clip_grad_norm
from .tensor import Tensor

CLIP_NORM = 1.0  # global-norm gradient clip, guards desk-scale divergence
VALIDATION_FRACTION = 0.1  # carved from the training split; test stays out


@dataclass
class TrainRunConfig:
    batch_size: int = 32
    learning_rate: float = 2e-5
    max_epochs: int = 10
    patience: int = 3  # evals without improvement before stopping
    eval_every: int = 1  # epochs between validation passes
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")


class EarlyStopper:
    """Track a validation metric; stop after `patience` stale updates.

    mode "min" for losses, "max" for F1. Equal values do not count as
    improvement.
    """

    def __init__(self, patience: int, mode: str = "min"):
        if mode not in ("min", "max"):
            raise ConfigError(f"unknown early-stopping mode {mode!r}")
        self.patience = patience
        self.mode = mode
        self.best = None
        self.stale = 0

    def update(self, value: float) -> bool:
        improved = (self.best is None
                    or (value < self.best if self.mode == "min"
                        else value > self.best))
        if improved:
            self.best = value
            self.stale = 0
        else:
            self.stale += 1
        return improved

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


# ------------------------------------------------------------------ metrics


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricReport:
    per_class: dict[str, ClassMetrics]
    macro_f1: float
    micro_f1: float
    accuracy: float
    total: int
    losses: list = field(default_factory=list)


def _safe_div(a: float, b: float) -> float:
    return a / b if b > 0 else 0.0


def evaluate_f1(predictions, gold, scheme: str, labels) -> MetricReport:
    """Precision/recall/F1 per class plus macro and micro aggregates.

    classification: 1-D id sequences, one entry per example.
    tagging: 2-D (batch, seq) id arrays; positions with gold == -1 (the
    ignore marker: [CLS]/[SEP]/padding) are excluded.
    """
    if scheme not in ("classification", "tagging"):
        raise ConfigError(f"unknown evaluation scheme {scheme!r}")
    pred = np.asarray(predictions)
    true = np.asarray(gold)
    if pred.shape != true.shape:
        raise DataError(f"predictions shape {pred.shape} does not match "
                        f"gold shape {true.shape}")
    if scheme == "classification":
        if pred.ndim != 1:
            raise DataError(f"classification expects 1-D ids, got "
                            f"{pred.ndim}-D")
    else:
        if pred.ndim != 2:
            raise DataError(f"tagging expects 2-D ids, got {pred.ndim}-D")
        keep = true >= 0
        pred, true = pred[keep], true[keep]
    n_classes = len(labels)
    if true.size and (true.min() < 0 or true.max() >= n_classes):
        raise DataError("gold label id outside the label set")
    if pred.size and (pred.min() < 0 or pred.max() >= n_classes):
        raise DataError("predicted label id outside the label set")

    hit = pred == true
    tp = np.bincount(true[hit], minlength=n_classes)
    fp = np.bincount(pred[~hit], minlength=n_classes)
    fn = np.bincount(true[~hit], minlength=n_classes)
    per_class = {}
    f1s = []
    for c, name in enumerate(labels):
        p = float(_safe_div(tp[c], tp[c] + fp[c]))
        r = float(_safe_div(tp[c], tp[c] + fn[c]))
        f1 = float(_safe_div(2 * p * r, p + r))
        per_class[name] = ClassMetrics(p, r, f1, int(tp[c] + fn[c]))
        f1s.append(f1)
    accuracy = float(_safe_div(int(hit.sum()), int(true.size)))
    # single-label, every position counted once: micro-P == micro-R == acc
    return MetricReport(per_class=per_class,
                        macro_f1=float(np.mean(f1s)) if f1s else 0.0,
                        micro_f1=accuracy, accuracy=accuracy,
                        total=int(true.size))


# ------------------------------------------------------------ model plumbing


def run_model(model, batch, *, train: bool = False, rng=None):
    if isinstance(model, InjectedModel):
        return model.forward(batch, train=train, rng=rng)
    return encoder_forward(batch, model, train=train, rng=rng)


def model_config(model):
    return model.encoder.config if isinstance(model, InjectedModel) \
        else model.config


def model_out_dim(model) -> int:
    return model.out_dim if isinstance(model, InjectedModel) \
        else model.config.hidden_size


def trainable_param_dict(model) -> dict[str, Tensor]:
    """Optimizer view: every tensor gradient updates may move."""
    if isinstance(model, InjectedModel):
        d = dict(model.encoder.params)
        d.update({f"dep_table.{k}": v for k, v in model.table.params.items()})
        d.update({f"side.{k}": v for k, v in model.side.params.items()})
        return d
    return dict(model.params)


def _token_table(model) -> Tensor:
    state = model.encoder if isinstance(model, InjectedModel) else model
    return state.params["embeddings.token"]


# ----------------------------------------------------------- save/load model


def save_model(path, model, head_params: dict | None = None,
               extra: dict | None = None):
    """Checkpoint a plain or injected model (plus optional extra tensors).

    head_params are stored under their given names and handed back verbatim
    by load_model.
    """
    extra = dict(extra or {})
    if isinstance(model, InjectedModel):
        params = dict(model.encoder.params)
        params["dep_table.dw"] = model.table.dw
        params["dep_table.from_file"] = Tensor(
            model.table.from_file.astype(np.uint8))
        params.update({f"side.{k}": v for k, v in model.side.params.items()})
        extra["kind"] = "injected"
        extra["side"] = {"num_heads": model.side.num_heads,
                         "dropout": model.side.dropout}
        extra["table_trainable"] = model.table.trainable
    else:
        params = dict(model.params)
        extra["kind"] = "plain"
    if head_params:
        params.update(head_params)
    save_checkpoint(path, model_config(model), params, extra)


def load_model(path):
    """Inverse of save_model: (model, leftover tensors, extra)."""
    config, params, extra = load_checkpoint(path)
    kind = extra.get("kind", "plain")
    if kind == "injected":
        dw = params.pop("dep_table.dw")
        ff = params.pop("dep_table.from_file", None)
        from_file = (ff.data.astype(bool) if ff is not None
                     else np.zeros(dw.shape[0], dtype=bool))
        dep_dim = dw.shape[1]  # tensor shapes are the authority, not config
        table = DepEmbeddingTable(dw.data, dep_dim, from_file,
                                  trainable=extra.get("table_trainable",
                                                      True))
        side_params = {k[len("side."):]: v for k, v in params.items()
                       if k.startswith("side.")}
        for k in list(params):
            if k.startswith("side."):
                del params[k]
        max_len = side_params["position"].shape[0]
        side = SideTransformer(dep_dim, max_len,
                               num_heads=extra["side"]["num_heads"],
                               dropout=extra["side"]["dropout"])
        if set(side.params) != set(side_params):
            raise DataError(f"{path}: side transformer tensors do not match")
        side.params = side_params
        encoder_params = {k: v for k, v in params.items() if "." in k
                          and not k.startswith(("head.", "mlm.", "nsp."))}
        leftover = {k: v for k, v in params.items()
                    if k not in encoder_params}
        model = InjectedModel(EncoderState(config, encoder_params), table,
                              side)
    else:
        head_keys = [k for k in params
                     if k.startswith(("head.", "mlm.", "nsp."))]
        leftover = {k: params.pop(k) for k in head_keys}
        model = EncoderState(config, params)
    return model, leftover, extra


# ---------------------------------------------------------------- run files


class RunLog:
    """Append-only JSON-lines event log."""

    def __init__(self, path):
        self.path = path
        open(path, "w").close()

    def event(self, kind: str, **fields):
        rec = {"event": kind, **fields}
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def write_metrics_csv(path, rows):
    """rows: (step, split, loss, f1-or-None). Deterministic formatting."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,split,loss,f1\n")
        for step, split_name, loss, f1 in rows:
            f1_text = "" if f1 is None else repr(float(f1))
            fh.write(f"{step},{split_name},{repr(float(loss))},{f1_text}\n")


def read_metrics_csv(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "step,split,loss,f1":
            raise DataError(f"{path}: unexpected metrics header {header!r}")
        for line in fh:
            step, split_name, loss, f1 = line.rstrip("\n").split(",")
            rows.append((int(step), split_name, float(loss),
                         float(f1) if f1 else None))
    return rows


# ------------------------------------------------------------- shared bits


def carve_validation(items, seed: int):
    """(train, validation): a seeded 10% slice held out for early stopping."""
    if not items:
        raise DataError("cannot carve validation from an empty collection")
    if len(items) < 2:
        return list(items), list(items)
    order = np.random.default_rng(seed).permutation(len(items))
    n_val = min(max(1, int(round(VALIDATION_FRACTION * len(items)))),
                len(items) - 1)
    val = [items[i] for i in order[:n_val]]
    train = [items[i] for i in order[n_val:]]
    return train, val


def _batch_slices(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def _snapshot(params: dict) -> dict:
    return {k: v.data.copy() for k, v in params.items()}


def _restore(params: dict, snap: dict):
    for k, v in params.items():
        v.data[...] = snap[k]


def instances_to_batch(instances):
    batch = make_batch([inst.pair for inst in instances])
    positions = [inst.masked_positions for inst in instances]
    mlm_labels = [inst.mlm_labels for inst in instances]
    nsp_labels = np.array([inst.nsp_label for inst in instances],
                          dtype=np.int64)
    return batch, positions, mlm_labels, nsp_labels


class _Diverged(Exception):
    """Internal signal: loss or gradients went non-finite."""


def _check_finite(value: float):
    if not np.isfinite(value):
        raise _Diverged()


# --------------------------------------------------------------- pretraining


@dataclass
class PretrainResult:
    loss_history: list
    val_history: list  # (step, val_loss) pairs
    best_val_loss: float
    stopped_early: bool
    checkpoint_path: str | None


def make_pretrain_heads(model, seed: int = 0):
    out_dim = model_out_dim(model)
    mlm = MLMHead(_token_table(model), input_dim=out_dim, seed=seed)
    nsp = NSPHead(out_dim, seed=seed + 1)
    return mlm, nsp


def _pretrain_loss_on(model, mlm_head, nsp_head, instances, batch_size,
                      nsp_weight, mlm_weight) -> float:
    total, count = 0.0, 0
    for sl in _batch_slices(len(instances), batch_size):
        chunk = instances[sl]
        batch, positions, mlm_labels, nsp_labels = instances_to_batch(chunk)
        out = run_model(model, batch, train=False)
        loss, _ = joint_pretrain_loss(out, nsp_head, mlm_head, positions,
                                      mlm_labels, nsp_labels,
                                      nsp_weight=nsp_weight,
                                      mlm_weight=mlm_weight)
        total += float(loss.data) * len(chunk)
        count += len(chunk)
    return total / count


def pretrain(model, instances, config: TrainRunConfig, *, run_dir=None,
             heads=None, nsp_weight: float = 1.0, mlm_weight: float = 1.0):
    """Optimize the joint masked-token + is-next loss with Adam.

    Carves a 10% validation slice from `instances`, evaluates every
    `eval_every` epochs, stops early after `patience` non-improving
    evaluations, and leaves the model holding the best-validation
    parameters. Divergence (non-finite loss or gradients) raises RunError
    after writing a checkpoint of the last finite state to run_dir.

    Returns (PretrainResult, (mlm_head, nsp_head)).
    """
    if not instances:
        raise DataError("no pretraining instances")
    run_dir = Path(run_dir) if run_dir is not None else None
    mlm_head, nsp_head = heads or make_pretrain_heads(model,
                                                      seed=config.seed)
    params = trainable_param_dict(model)
    params.update({f"mlm.{k}": v for k, v in mlm_head.params.items()})
    params.update({f"nsp.{k}": v for k, v in nsp_head.params.items()})
    opt = Adam(list(params.values()), learning_rate=config.learning_rate)
    train_set, val_set = carve_validation(instances, config.seed)
    rng = np.random.default_rng(config.seed + 1)
    stopper = EarlyStopper(config.patience, mode="min")
    log = RunLog(run_dir / "run.log.jsonl") if run_dir else None
    if log:
        log.event("run_start", phase="pretrain", train=len(train_set),
                  val=len(val_set), seed=config.seed)

    def head_tensors():
        out = {f"mlm.{k}": v for k, v in mlm_head.params.items()}
        out.update({f"nsp.{k}": v for k, v in nsp_head.params.items()})
        return out

    rows, loss_history, val_history = [], [], []
    best = None
    best_val = float("inf")
    stopped = False
    step = 0
    checkpoint_path = str(run_dir / "best.ckpt") if run_dir else None
    try:
        for epoch in range(config.max_epochs):
            order = rng.permutation(len(train_set))
            for sl in _batch_slices(len(order), config.batch_size):
                chunk = [train_set[i] for i in order[sl]]
                batch, positions, mlm_labels, nsp_labels = \
                    instances_to_batch(chunk)
                opt.zero_grad()
                out = run_model(model, batch, train=True, rng=rng)
                loss, _ = joint_pretrain_loss(
                    out, nsp_head, mlm_head, positions, mlm_labels,
                    nsp_labels, nsp_weight=nsp_weight, mlm_weight=mlm_weight)
                loss_value = float(loss.data)
                _check_finite(loss_value)
                loss.backward()
                _check_finite(clip_grad_norm(opt.params, CLIP_NORM))
                opt.step()
                loss_history.append(loss_value)
                rows.append((step, "train", loss_value, None))
                step += 1
            if (epoch + 1) % config.eval_every != 0:
                continue
            val_loss = _pretrain_loss_on(model, mlm_head, nsp_head, val_set,
                                         config.batch_size, nsp_weight,
                                         mlm_weight)
            _check_finite(val_loss)
            val_history.append((step, val_loss))
            rows.append((step, "val", val_loss, None))
            improved = stopper.update(val_loss)
            if log:
                log.event("eval", epoch=epoch, step=step, val_loss=val_loss,
                          improved=improved)
            if improved:
                best_val = val_loss
                best = _snapshot(params)
            if stopper.should_stop:
                stopped = True
                if log:
                    log.event("early_stop", epoch=epoch, step=step)
                break
    except _Diverged:
        # parameters are still the last finite state: the bad update was
        # either never applied (non-finite gradients) or produced the
        # non-finite loss that stopped us before stepping again
        if run_dir:
            save_model(run_dir / "last_finite.ckpt", model,
                       head_params=head_tensors())
            write_metrics_csv(run_dir / "metrics.csv", rows)
        if log:
            log.event("divergence", step=step)
        raise RunError(f"pretraining diverged at step {step}; last finite "
                       "state retained") from None

    if best is not None:
        _restore(params, best)
    if run_dir:
        save_model(run_dir / "best.ckpt", model, head_params=head_tensors(),
                   extra={"best_val_loss": best_val})
        write_metrics_csv(run_dir / "metrics.csv", rows)
    if log:
        log.event("run_end", best_val_loss=best_val, steps=step,
                  stopped_early=stopped)
    return (PretrainResult(loss_history, val_history, best_val, stopped,
                           checkpoint_path),
            (mlm_head, nsp_head))


def overfit_one_batch(model, instances, steps: int,
                      learning_rate: float = 1e-3, heads=None, seed: int = 0):
    """Drive the joint loss down on one fixed batch; returns the loss curve.

    Dropout is disabled so the curve is deterministic. Smoke-test utility:
    on a healthy model/optimizer the loss decreases monotonically at the
    start and approaches zero.
    """
    if not instances:
        raise DataError("no instances to overfit")
    mlm_head, nsp_head = heads or make_pretrain_heads(model, seed=seed)
    params = trainable_param_dict(model)
    params.update({f"mlm.{k}": v for k, v in mlm_head.params.items()})
    params.update({f"nsp.{k}": v for k, v in nsp_head.params.items()})
    opt = Adam(list(params.values()), learning_rate=learning_rate)
    batch, positions, mlm_labels, nsp_labels = instances_to_batch(instances)
    losses = []
    for step in range(steps):
        opt.zero_grad()
        out = run_model(model, batch, train=False)
        loss, _ = joint_pretrain_loss(out, nsp_head, mlm_head, positions,
                                      mlm_labels, nsp_labels)
        value = float(loss.data)
        if not np.isfinite(value):
            raise RunError(f"overfit run diverged at step {step}")
        losses.append(value)
        loss.backward()
        clip_grad_norm(opt.params, CLIP_NORM)
        opt.step()
    return losses


# --------------------------------------------------------------- fine-tuning


@dataclass
class FineTuneResult:
    head: object
    report: MetricReport
    best_val_f1: float
    loss_history: list
    val_history: list  # (step, val_loss, val_macro_f1)
    trainable_count: int


def build_task_head(kind: str, out_dim: int, labels, seed: int = 0):
    if kind == "classification":
        return ClassifierHead(out_dim, len(labels), list(labels), seed=seed)
    if kind == "tagging":
        return TaggerHead(out_dim, len(labels), list(labels), seed=seed)
    if kind == "proactive":
        return ProactiveHead(out_dim, len(labels), len(labels), seed=seed)
    raise ConfigError(f"unknown task kind {kind!r}")


def load_task_head(kind: str, out_dim: int, labels, head_params: dict):
    """Rebuild a task head from tensors saved under "head." names."""
    head = build_task_head(kind, out_dim, labels)
    stripped = {k[len("head."):]: v for k, v in head_params.items()
                if k.startswith("head.")}
    if set(stripped) != set(head.params):
        raise DataError("saved head tensors do not match the task head")
    for k, t in head.params.items():
        if stripped[k].shape != t.shape:
            raise DataError(f"saved head tensor {k} has shape "
                            f"{stripped[k].shape}, expected {t.shape}")
        t.data[...] = stripped[k].data
    return head


def _encode_task(dataset: TaskDataset, vocab, max_len: int):
    if dataset.kind == "classification":
        return [encode_classification(ex, vocab, dataset.labels, max_len)
                for ex in dataset.examples]
    if dataset.kind == "tagging":
        return [encode_tagging(ex, vocab, dataset.labels, max_len)
                for ex in dataset.examples]
    if dataset.kind == "proactive":
        return [encode_proactive(ex, vocab, dataset.labels, max_len)
                for ex in dataset.examples]
    raise ConfigError(f"unknown task kind {dataset.kind!r}")


def _task_loss(model, head, kind, encoded, *, train, rng):
    batch = make_batch([e[0] for e in encoded])
    out = run_model(model, batch, train=train, rng=rng)
    if kind == "classification":
        labels = np.array([e[1] for e in encoded], dtype=np.int64)
        loss, _ = classify(cls_rows(out), head, labels)
    elif kind == "tagging":
        rows = np.stack([e[1] for e in encoded])
        loss, _ = tag(out, head, rows)
    else:
        onehots = np.stack([e[1] for e in encoded])
        labels = np.array([e[2] for e in encoded], dtype=np.int64)
        loss, _ = proactive_forward(cls_rows(out), onehots, head, labels)
    return loss


def predict_task(model, head, kind, encoded, batch_size: int = 32):
    """(predictions, gold) id arrays in the task's evaluation scheme."""
    preds, golds = [], []
    for sl in _batch_slices(len(encoded), batch_size):
        chunk = encoded[sl]
        batch = make_batch([e[0] for e in chunk])
        out = run_model(model, batch, train=False)
        if kind == "classification":
            _, probs = classify(cls_rows(out), head)
            preds.append(np.argmax(probs.data, axis=-1))
            golds.append(np.array([e[1] for e in chunk], dtype=np.int64))
        elif kind == "tagging":
            preds.append(tag_predict(out, head))
            golds.append(np.stack([e[1] for e in chunk]))
        else:
            onehots = np.stack([e[1] for e in chunk])
            _, probs = proactive_forward(cls_rows(out), onehots, head)
            preds.append(np.argmax(probs.data, axis=-1))
            golds.append(np.array([e[2] for e in chunk], dtype=np.int64))
    return np.concatenate(preds), np.concatenate(golds)


def _task_scheme(kind: str) -> str:
    return "tagging" if kind == "tagging" else "classification"


def fine_tune(model, dataset: TaskDataset, vocab, config: TrainRunConfig, *,
              max_len: int = 64, freeze_encoder: bool = False, labels=None,
              run_dir=None, head_seed: int = 0) -> FineTuneResult:
    """Train a task head (and, unless frozen, the whole model) on a dataset.

    Early-stops on validation macro-F1 and returns the best-validation
    state. `labels`, when given (e.g. from a label file), must match the
    dataset's label set exactly.
    """
    if not dataset.examples:
        raise DataError(f"task {dataset.name!r} has no examples")
    run_dir = Path(run_dir) if run_dir is not None else None
    if labels is not None and list(labels) != list(dataset.labels):
        raise ConfigError(
            f"label set mismatch: dataset {dataset.name!r} carries "
            f"{dataset.labels}, caller expected {list(labels)}")
    head = build_task_head(dataset.kind, model_out_dim(model),
                           dataset.labels, seed=head_seed)
    trainable = {f"head.{k}": v for k, v in head.params.items()}
    if not freeze_encoder:
        trainable.update(trainable_param_dict(model))
    trainable_count = count_parameters(
        {k: v for k, v in trainable.items()})
    opt = Adam(list(trainable.values()), learning_rate=config.learning_rate)

    encoded = _encode_task(dataset, vocab, max_len)
    train_set, val_set = carve_validation(encoded, config.seed)
    rng = np.random.default_rng(config.seed + 1)
    stopper = EarlyStopper(config.patience, mode="max")
    log = RunLog(run_dir / "run.log.jsonl") if run_dir else None
    if log:
        log.event("run_start", phase="finetune", task=dataset.name,
                  train=len(train_set), val=len(val_set), seed=config.seed,
                  frozen_encoder=freeze_encoder,
                  trainable_params=trainable_count)

    scheme = _task_scheme(dataset.kind)
    rows, loss_history, val_history = [], [], []
    best = None
    best_f1 = 0.0
    stopped = False
    step = 0
    try:
        for epoch in range(config.max_epochs):
            order = rng.permutation(len(train_set))
            for sl in _batch_slices(len(order), config.batch_size):
                chunk = [train_set[i] for i in order[sl]]
                opt.zero_grad()
                loss = _task_loss(model, head, dataset.kind, chunk,
                                  train=True, rng=rng)
                loss_value = float(loss.data)
                _check_finite(loss_value)
                loss.backward()
                _check_finite(clip_grad_norm(opt.params, CLIP_NORM))
                opt.step()
                loss_history.append(loss_value)
                rows.append((step, "train", loss_value, None))
                step += 1
            if (epoch + 1) % config.eval_every != 0:
                continue
            val_loss = float(_task_loss(model, head, dataset.kind, val_set,
                                        train=False, rng=None).data)
            _check_finite(val_loss)
            pred, gold = predict_task(model, head, dataset.kind, val_set,
                                      config.batch_size)
            report = evaluate_f1(pred, gold, scheme, dataset.labels)
            val_history.append((step, val_loss, report.macro_f1))
            rows.append((step, "val", val_loss, report.macro_f1))
            improved = stopper.update(report.macro_f1)
            if log:
                log.event("eval", epoch=epoch, step=step, val_loss=val_loss,
                          val_macro_f1=report.macro_f1, improved=improved)
            if improved:
                best_f1 = report.macro_f1
                best = _snapshot(trainable)
            if stopper.should_stop:
                stopped = True
                if log:
                    log.event("early_stop", epoch=epoch, step=step)
                break
    except _Diverged:
        if run_dir:
            save_model(run_dir / "last_finite.ckpt", model,
                       head_params={f"head.{k}": v
                                    for k, v in head.params.items()})
            write_metrics_csv(run_dir / "metrics.csv", rows)
        if log:
            log.event("divergence", step=step)
        raise RunError(f"fine-tuning diverged at step {step}; last finite "
                       "state retained") from None

    if best is not None:
        _restore(trainable, best)
    pred, gold = predict_task(model, head, dataset.kind, val_set,
                              config.batch_size)
    report = evaluate_f1(pred, gold, scheme, dataset.labels)
    report.losses = loss_history
    if run_dir:
        save_model(run_dir / "finetuned.ckpt", model,
                   head_params={f"head.{k}": v
                                for k, v in head.params.items()},
                   extra={"task": dataset.name, "task_kind": dataset.kind,
                          "labels": list(dataset.labels),
                          "best_val_f1": best_f1})
        write_metrics_csv(run_dir / "metrics.csv", rows)
    if log:
        log.event("run_end", best_val_f1=best_f1, steps=step,
                  stopped_early=stopped)
    return FineTuneResult(head, report, best_f1, loss_history, val_history,
                          trainable_count)
