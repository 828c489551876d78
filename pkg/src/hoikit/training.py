"""Training loop: per-scene set-prediction loss with distillation, adaptive
moment updates under a cosine learning-rate schedule, append-only metrics,
checkpoints, and the convergence-epoch summary."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import matching as M
from . import object_queries as oq
from . import tensor as tt
from .config import ModelConfig, TrainConfig
from .data import VocabSpec, category_counts, oracle_detect, render_scene
from .detector import HOIModel, detect, patchify
from .errors import NonFiniteError, ParseError
from .evaluation import EvalReport, evaluate
from .tensor import backward
from .textbank import TextDictionary


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; the run must abort."""


class Adam:
    """Adaptive-moment optimizer over a model's named parameters.

    Parameter data and gradients are repacked into contiguous flat buffers
    (each Parameter keeps a reshaped view), so one step is a handful of
    whole-buffer array ops instead of hundreds of small ones.
    """

    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.order = sorted(params)
        total = sum(params[k].data.size for k in self.order)
        dtype = params[self.order[0]].data.dtype if self.order else np.float64
        self.flat_data = np.empty(total, dtype=dtype)
        self.flat_grad = np.zeros(total, dtype=dtype)
        self.slices = {}
        off = 0
        for k in self.order:
            p = params[k]
            size = p.data.size
            sl = slice(off, off + size)
            self.slices[k] = sl
            self.flat_data[sl] = p.data.ravel()
            self.flat_grad[sl] = p.grad.ravel()
            p.data = self.flat_data[sl].reshape(p.data.shape)
            p.grad = self.flat_grad[sl].reshape(p.data.shape)
            off += size
        self.flat_m = np.zeros(total, dtype=dtype)
        self.flat_v = np.zeros(total, dtype=dtype)
        self._scratch = np.empty(total, dtype=dtype)
        self._update = np.empty(total, dtype=dtype)
        self.m = {k: self.flat_m[self.slices[k]].reshape(params[k].data.shape)
                  for k in self.order}
        self.v = {k: self.flat_v[self.slices[k]].reshape(params[k].data.shape)
                  for k in self.order}
        self.t = 0

    def zero_grad(self) -> None:
        self.flat_grad.fill(0.0)

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        g = self.flat_grad
        s, u = self._scratch, self._update
        np.multiply(self.flat_m, b1, out=self.flat_m)
        np.multiply(g, 1.0 - b1, out=s)
        self.flat_m += s
        np.multiply(self.flat_v, b2, out=self.flat_v)
        np.multiply(g, g, out=s)
        s *= 1.0 - b2
        self.flat_v += s
        np.divide(self.flat_v, c2, out=s)
        np.sqrt(s, out=s)
        s += self.eps
        np.divide(self.flat_m, c1 / lr, out=u)
        u /= s
        self.flat_data -= u


def cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    """Cosine decay from base_lr toward zero over the planned epochs."""
    if total_epochs <= 1:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def scene_loss(model: HOIModel, out, gts, pseudo_labels, weights):
    """Hungarian matching on detached costs, then the differentiable loss."""
    if gts:
        logits = out.class_logits.data
        logp = logits - np.log(np.exp(logits - logits.max(axis=1, keepdims=True))
                               .sum(axis=1, keepdims=True)) \
            - logits.max(axis=1, keepdims=True)
        cost = M.cost_matrix(out.human_boxes.data, out.object_boxes.data,
                             logp, out.action_logits.data, gts, weights)
        assignment = M.hungarian_assign(cost)
    else:
        assignment = M.MatchAssignment(())
    labels = pseudo_labels.y if pseudo_labels is not None else None
    distill = out.distill_logits if model.config.use_object_tokens else None
    return M.set_loss(out.human_boxes, out.object_boxes, out.class_logits,
                      out.action_logits, gts, assignment,
                      distill, labels, weights)


@dataclass
class SceneCache:
    """Precomputed per-scene training inputs (images are re-rendered once)."""

    image_ids: list
    patches: list
    gts: list
    labels: list

    @classmethod
    def build(cls, scenes, model_cfg: ModelConfig, train_cfg: TrainConfig):
        size, patch = model_cfg.image_size, model_cfg.patch_size
        ids, patches, gts, labels = [], [], [], []
        for s in scenes:
            ids.append(s.image_id)
            patches.append(patchify(render_scene(s, size, size), patch))
            gts.append(s.gt_quads())
            labels.append(oq.make_pseudo_labels(
                oracle_detect(s, train_cfg.noise),
                model_cfg.n_object_classes, train_cfg.tau))
        return cls(ids, patches, gts, labels)


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    map_full: float
    map_rare: float
    map_nonrare: float
    lr: float


@dataclass
class TrainResult:
    history: list = field(default_factory=list)     # EpochRow per epoch
    best_epoch: int = 0
    best_map_full: float = 0.0
    convergence_epoch: int = 0
    best_state: dict | None = None                  # name -> array snapshot


METRICS_HEADER = "# hoikit-metrics v1"


def append_metrics(path, row: EpochRow) -> None:
    new = not os.path.exists(path)
    with open(path, "a") as f:
        if new:
            f.write(METRICS_HEADER + "\n")
        f.write(f"{row.epoch}\t{row.train_loss!r}\t{row.map_full!r}\t"
                f"{row.map_rare!r}\t{row.map_nonrare!r}\t{row.lr!r}\n")


def read_metrics(path):
    rows = []
    with open(path) as f:
        first = f.readline().rstrip("\n")
        if first != METRICS_HEADER:
            raise ParseError(f"bad metrics header {first!r}", 1)
        for ln, line in enumerate(f, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 6:
                raise ParseError(f"metrics row needs 6 fields, got {len(parts)}", ln)
            rows.append(EpochRow(int(parts[0]), *(float(v) for v in parts[1:])))
    return rows


def save_checkpoint(path, model: HOIModel, optimizer: Adam, epoch: int) -> None:
    payload = {f"p::{k}": p.data for k, p in model.params.items()}
    payload.update({f"m::{k}": v for k, v in optimizer.m.items()})
    payload.update({f"v::{k}": v for k, v in optimizer.v.items()})
    payload["t"] = np.asarray(optimizer.t)
    payload["epoch"] = np.asarray(epoch)
    np.savez(path, **payload)


def load_checkpoint(path, model: HOIModel, optimizer: Adam | None = None) -> int:
    """Restore parameters (and optimizer state when given); returns the number
    of epochs already completed."""
    with np.load(path) as z:
        for k, p in model.params.items():
            p.data[...] = z[f"p::{k}"]
        if optimizer is not None:
            for k in optimizer.m:
                optimizer.m[k][...] = z[f"m::{k}"]
                optimizer.v[k][...] = z[f"v::{k}"]
            optimizer.t = int(z["t"])
        return int(z["epoch"])


def evaluate_model(model: HOIModel, scenes, cache: SceneCache,
                   tdict: TextDictionary | None, train_counts,
                   vocab: VocabSpec) -> EvalReport:
    preds = {}
    with tt.no_grad():
        for i, s in enumerate(scenes):
            preds[s.image_id] = detect(None, model, tdict,
                                       patches=cache.patches[i])
    return evaluate(preds, scenes, train_counts, vocab)


def repeat_factors(scenes, counts, cap: float, threshold: int = 10):
    """Per-scene visit multiplicity for long-tail oversampling: a scene
    containing category c repeats by sqrt(threshold / count_c), capped.
    Returns an index array with duplicates (identity when cap <= 1)."""
    if cap <= 1.0:
        return np.arange(len(scenes))
    out = []
    for i, scene in enumerate(scenes):
        factor = 1.0
        for _, _, cls, verb in scene.gt_quads():
            c = max(int(counts[verb, cls]), 1)
            if c < threshold:
                factor = max(factor, math.sqrt(threshold / c))
        out.extend([i] * int(round(min(factor, cap))))
    return np.asarray(out, dtype=np.intp)


def convergence_epoch(map_history, tol: float = 0.01) -> int:
    """First epoch (1-based) whose validation mAP is within tol of the best."""
    if not map_history:
        return 0
    best = max(map_history)
    for i, v in enumerate(map_history):
        if v >= best * (1.0 - tol):
            return i + 1
    return len(map_history)


def train(model: HOIModel, train_scenes, val_scenes, tdict: TextDictionary | None,
          vocab: VocabSpec, train_cfg: TrainConfig, metrics_path=None,
          checkpoint_path=None, resume_from=None, quiet: bool = True,
          stop_after: int | None = None, keep_best_state: bool = False) -> TrainResult:
    """Run the full loop; deterministic given (model config, data, train_cfg).

    Scenes are visited in a per-epoch order drawn from (model seed, epoch), so
    a resumed run replays exactly the epochs a continuous run would have seen.
    stop_after interrupts the schedule after that many epochs (the learning
    rate curve still spans train_cfg.epochs), modelling a killed run.
    """
    cache = SceneCache.build(train_scenes, model.config, train_cfg)
    val_cache = SceneCache.build(val_scenes, model.config, train_cfg)
    train_counts = category_counts(train_scenes, vocab)
    optimizer = Adam(model.params)
    start_epoch = 0
    if resume_from is not None:
        start_epoch = load_checkpoint(resume_from, model, optimizer)
    last_path = None
    if checkpoint_path:
        base = str(checkpoint_path)
        last_path = (base[:-4] if base.endswith(".npz") else base) + ".last.npz"

    result = TrainResult()
    best = -1.0
    stale = 0
    visit = repeat_factors(train_scenes, train_counts, train_cfg.rare_repeat)
    n = len(visit)
    end_epoch = train_cfg.epochs
    if stop_after is not None:
        end_epoch = min(end_epoch, start_epoch + stop_after)
    for epoch in range(start_epoch, end_epoch):
        lr = cosine_lr(train_cfg.lr, epoch, train_cfg.epochs)
        rng = np.random.default_rng([model.config.seed, 4099, epoch])
        order = visit[rng.permutation(n)]
        total = 0.0
        batch = max(1, train_cfg.batch_size)
        for start in range(0, n, batch):
            optimizer.zero_grad()
            for idx in order[start:start + batch]:
                try:
                    out = model.forward(None, tdict, patches=cache.patches[idx])
                    loss = scene_loss(model, out, cache.gts[idx],
                                      cache.labels[idx], train_cfg.weights)
                except NonFiniteError as exc:
                    raise TrainingDiverged(
                        f"non-finite values at epoch {epoch + 1}") from exc
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}")
                total += value
                backward(loss)
            optimizer.step(lr)

        report = evaluate_model(model, val_scenes, val_cache, tdict,
                                train_counts, vocab)
        row = EpochRow(epoch + 1, total / n, report.map_full,
                       report.map_rare, report.map_nonrare, lr)
        result.history.append(row)
        if metrics_path:
            append_metrics(metrics_path, row)
        if not quiet:
            print(f"epoch {row.epoch}: loss {row.train_loss:.4f} "
                  f"val mAP {row.map_full:.4f}")

        if report.map_full > best:
            best = report.map_full
            result.best_epoch = epoch + 1
            result.best_map_full = best
            stale = 0
            if checkpoint_path:
                save_checkpoint(checkpoint_path, model, optimizer, epoch + 1)
            if keep_best_state:
                result.best_state = {k: p.data.copy()
                                     for k, p in model.params.items()}
            early_stop = False
        else:
            stale += 1
            early_stop = bool(train_cfg.patience and stale >= train_cfg.patience)
        if last_path:
            save_checkpoint(last_path, model, optimizer, epoch + 1)
        if early_stop:
            break

    result.convergence_epoch = convergence_epoch(
        [r.map_full for r in result.history])
    return result
