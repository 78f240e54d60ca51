"""Task training, the sequential multi-task protocol, and its baselines.

Three modes share one loop:

* ``dynamic``    adapters with importance weights, proximal l1 shrinkage after
                 every optimizer step and pruning at the end of each task;
* ``fixed_rank`` the same adapters with no shrinkage and no pruning, so the
                 rank stays at ``r``;
* ``full_ft``    no adapters, every backbone tensor is trained.

In the adapter modes only ``{a, b, w}`` and the task head receive gradients.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import tensor as T
from .adapter import PruneReport, active_rank, prune, soft_shrink_weights
from .checkpoint import model_from_entries, read_entries, save_checkpoint
from .config import TrainConfig
from .glyphgen import GlyphDataset, generate_pretext, read_gly1
from .metrics import EvalReport, forgetting
from .model import ATTENTION, MLP, GlyphTransformer, ModelConfigError, GlyphTransformerConfig, init_params, reset_head
from .optim import AdamWState, NaNLossError, adamw_step
from .tensor import Tensor

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


@dataclass
class TaskSpec:
    name: str
    train: GlyphDataset
    test: GlyphDataset

    @property
    def n_classes(self) -> int:
        return self.train.n_classes


def load_task(directory) -> TaskSpec:
    """A task directory holds ``train.gly1`` and ``test.gly1``."""
    directory = Path(directory)
    paths = [directory / "train.gly1", directory / "test.gly1"]
    for p in paths:
        if not p.is_file():
            raise DataError(f"missing dataset file {p}")
    train, test = (read_gly1(p) for p in paths)
    if train.n_classes != test.n_classes:
        raise DataError(f"{directory}: train/test class counts differ")
    return TaskSpec(directory.name, train, test)


# --- data -------------------------------------------------------------------

def split_train_val(dataset: GlyphDataset, val_fraction: float, seed: int) -> tuple[GlyphDataset, GlyphDataset]:
    n = len(dataset)
    if n == 0:
        raise DataError("empty dataset")
    order = np.random.default_rng([seed, 0x5A11]).permutation(n)
    n_val = max(1, int(round(n * val_fraction))) if n > 1 else 0
    return dataset.subset(order[n_val:]), dataset.subset(order[:n_val])


def augment_batch(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip, rotation (+-10 deg), resized crop (scale 0.8-1.0) and
    brightness/contrast jitter, applied per image to floats in [0, 1]."""
    out = np.empty_like(images)
    side = images.shape[-1]
    c = (side - 1) / 2.0
    for i, img in enumerate(images):
        if rng.random() < 0.5:
            img = img[:, ::-1]
        theta = np.deg2rad(rng.uniform(-10, 10))
        zoom = np.sqrt(rng.uniform(0.8, 1.0))
        slack = (1 - zoom) * side / 2
        shift = rng.uniform(-slack, slack, 2)
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        mat = rot * zoom
        offset = np.array([c, c]) + shift - mat @ np.array([c, c])
        warped = ndimage.affine_transform(img, mat, offset=offset, order=1, mode="constant")
        contrast = rng.uniform(0.8, 1.2)
        bright = rng.uniform(-0.1, 0.1)
        out[i] = np.clip((warped - 0.5) * contrast + 0.5 + bright * warped.mean(), 0.0, 1.0)
    return out


# --- mode setup -------------------------------------------------------------

def _target_names(targets) -> tuple[str, ...]:
    names = ()
    if "attention" in targets:
        names += ATTENTION
    if "mlp" in targets:
        names += MLP
    return names


def configure_mode(model: GlyphTransformer, config: TrainConfig, seed: int = 0) -> list[Tensor]:
    """Attach adapters / flip requires_grad per ``config.mode``; returns the trainable tensors."""
    for name in model.backbone_names():
        model.params[name].requires_grad = config.mode == "full_ft"
    model.params["head"].requires_grad = True
    if config.mode != "full_ft":
        model.attach_adapters(config.rank, config.alpha, seed=seed,
                              targets=_target_names(config.targets),
                              train_importance=config.train_importance)
    return trainable_parameters(model)


def trainable_parameters(model: GlyphTransformer) -> list[Tensor]:
    params = [p for p in model.params.values() if p.requires_grad]
    for ad in model.adapters.values():
        params.extend(ad.parameters())
    return params


def count_parameters(params) -> int:
    return int(sum(p.data.size for p in params))


# --- training ---------------------------------------------------------------

@dataclass
class TaskResult:
    step_losses: list[float] = field(default_factory=list)  # supervised + lambda * ||w||_1, per optimizer step
    sup_losses: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = -1
    epochs_run: int = 0
    steps: int = 0
    trainable_params: int = 0
    prune_reports: list[PruneReport] = field(default_factory=list)
    active_ranks: dict[str, int] = field(default_factory=dict)
    wall_time: float = 0.0


def evaluate(model: GlyphTransformer, dataset: GlyphDataset, batch_size: int = 256, **extra) -> EvalReport:
    if model.n_classes != dataset.n_classes:
        raise ModelConfigError(f"data has {dataset.n_classes} classes but the head has {model.n_classes}")
    preds = model.predict(dataset.as_float(), batch_size=batch_size)
    return EvalReport.from_predictions(preds, dataset.labels, dataset.n_classes, **extra)


def shrink_threshold(state: AdamWState, w: Tensor, config: TrainConfig):
    """Per-weight soft-threshold applied after an optimizer step.

    ``euclidean``: tau = lambda * lr, the plain proximal-gradient coupling.
    ``adam``: the same step measured in Adam's preconditioned metric,
    tau_i = lambda * lr / (sqrt(v_hat_i + lambda**2) + eps); v_hat is the
    bias-corrected second moment of w's gradient.  The lambda**2 floor keeps
    tau <= lr when w receives no supervised gradient.
    """
    lam, lr = config.lambda_sparsity, config.lr
    if config.prox_metric == "euclidean" or id(w) not in state.v:
        return lam * lr
    vhat = state.v[id(w)].astype(np.float64) / (1.0 - state.betas[1] ** state.step)
    return lam * lr / (np.sqrt(vhat + lam * lam) + state.eps)


def _l1(model: GlyphTransformer) -> float:
    return float(sum(np.abs(ad.w.data[ad.active]).sum() for ad in model.adapters.values()))


def _groups(n: int, micro: int, accum: int) -> list[list[tuple[int, int]]]:
    bounds = [(i, min(i + micro, n)) for i in range(0, n, micro)]
    return [bounds[i:i + accum] for i in range(0, len(bounds), accum)]


def _snapshot(model: GlyphTransformer, params: list[Tensor]):
    return ([p.data.copy() for p in params],
            {k: (ad.w.data.copy(), ad.active.copy()) for k, ad in model.adapters.items()})


def _restore(model: GlyphTransformer, params: list[Tensor], snap) -> None:
    datas, ads = snap
    for p, d in zip(params, datas):
        p.data[...] = d
    for k, (w, act) in ads.items():
        ad = model.adapters[k]
        ad.w.data[...] = w
        ad.active[...] = act


def accumulate_gradients(model: GlyphTransformer, X: np.ndarray, Y: np.ndarray, micro_batches,
                         aug_rng: np.random.Generator | None = None) -> float:
    """Backpropagate one optimizer step's worth of micro-batches; returns the group's mean loss.

    Each micro-batch's mean loss is weighted by its share of the group, so the
    accumulated gradient equals that of one batch holding all the samples.
    """
    dt = T.default_dtype()
    total = sum(len(idx) for idx in micro_batches)
    sup = 0.0
    for idx in micro_batches:
        xb = augment_batch(X[idx], aug_rng) if aug_rng is not None else X[idx]
        loss = T.mul_scalar(T.cross_entropy(model.forward(xb.astype(dt)), Y[idx]), len(idx) / total)
        loss.backward()
        sup += loss.item()
    return sup


def train_task(model: GlyphTransformer, dataset: GlyphDataset, config: TrainConfig,
               task_seed: int = 0) -> TaskResult:
    """Train the currently attached adapters (or the whole model in full_ft) on one task.

    Expects ``configure_mode`` to have been called.  Ends with the best-validation
    parameters restored and, in dynamic mode, one pruning pass.
    """
    t0 = time.perf_counter()
    if len(dataset) == 0:
        raise DataError("empty dataset")
    train, val = split_train_val(dataset, config.val_fraction, config.seed * 1009 + task_seed)
    params = trainable_parameters(model)
    state = AdamWState()
    for ad in model.adapters.values():
        state.no_decay.add(id(ad.w))
    res = TaskResult(trainable_params=count_parameters(params))
    shuffle_rng = np.random.default_rng([config.seed, task_seed, 1])
    aug_rng = np.random.default_rng([config.seed, task_seed, 2])
    X, Y = train.as_float(), train.labels
    best_acc, best_l1, since_best, snap = -1.0, np.inf, 0, None
    done = False

    for epoch in range(config.max_epochs):
        perm = shuffle_rng.permutation(len(Y))
        for group in _groups(len(Y), config.micro_batch, config.accumulation_steps):
            sup = accumulate_gradients(model, X, Y, [perm[a:b] for a, b in group],
                                       aug_rng if config.augment else None)
            total = sup + config.lambda_sparsity * _l1(model)
            if not np.isfinite(total):
                raise NaNLossError(res.steps + 1, "loss")
            res.sup_losses.append(sup)
            res.step_losses.append(total)
            T.global_grad_clip(params, config.clip_norm)
            adamw_step(params, state, config.lr, config.weight_decay)
            res.steps += 1
            if config.shrinks and config.lambda_sparsity > 0:
                for ad in model.adapters.values():
                    soft_shrink_weights(ad, shrink_threshold(state, ad.w, config))
            if config.max_steps is not None and res.steps >= config.max_steps:
                done = True
                break
        res.epochs_run = epoch + 1
        acc = evaluate(model, val, config.eval_batch).accuracy if len(val) else 0.0
        res.val_accuracy.append(acc)
        # model selection on validation accuracy; ties go to the smaller l1 penalty,
        # i.e. the better state under the training objective.  Only strict gains reset patience.
        l1 = _l1(model)
        if acc > best_acc or (acc == best_acc and l1 < best_l1):
            since_best = 0 if acc > best_acc else since_best + 1
            best_acc, best_l1, res.best_epoch = acc, l1, epoch
            snap = _snapshot(model, params)
        else:
            since_best += 1
        log.debug("epoch %d loss %.4f val %.4f", epoch, res.step_losses[-1], acc)
        if done or since_best >= config.early_stop_patience:
            break

    if snap is not None:
        _restore(model, params, snap)
    if config.prunes:
        for ad in model.adapters.values():
            res.prune_reports.append(prune(ad, config.prune_epsilon))
    res.active_ranks = {k: active_rank(ad) for k, ad in model.adapters.items()}
    res.wall_time = time.perf_counter() - t0
    return res


# --- backbone ---------------------------------------------------------------

_BACKBONES: dict[tuple, tuple[GlyphTransformerConfig, dict[str, np.ndarray]]] = {}


def pretrain_backbone(model_config: GlyphTransformerConfig, seed: int = 0, epochs: int = 10,
                      per_class: int = 15, lr: float = 1e-3, batch: int = 32) -> GlyphTransformer:
    """Full-train a fresh model on the pretext glyph set; returns it with the pretext head.

    Results are memoised per process, keyed on every argument and the dtype.
    """
    key = (model_config.as_dict().__repr__(), seed, epochs, per_class, lr, batch, T.default_dtype())
    if key not in _BACKBONES:
        data = generate_pretext(per_class, seed)
        cfg = GlyphTransformerConfig(**{**model_config.as_dict(), "n_classes": data.n_classes})
        model = init_params(cfg, seed)
        tc = TrainConfig(lr=lr, micro_batch=batch, accumulation_steps=1, max_epochs=epochs,
                         early_stop_patience=epochs, mode="full_ft", augment=False, seed=seed)
        configure_mode(model, tc)
        res = train_task(model, data, tc)
        log.info("pretrained backbone: %d epochs, val acc %.3f", res.epochs_run, res.val_accuracy[-1])
        _BACKBONES[key] = (cfg, {k: p.data.copy() for k, p in model.params.items()})
    cfg, arrays = _BACKBONES[key]
    model = init_params(cfg, seed)
    for k, arr in arrays.items():
        model.params[k].data = arr.copy()
    return model


def initial_backbone(config: TrainConfig, model_config: GlyphTransformerConfig) -> GlyphTransformer:
    if config.pretrain_epochs > 0:
        return pretrain_backbone(model_config, config.seed, config.pretrain_epochs, config.pretrain_per_class)
    return init_params(model_config, config.seed)


# --- sequential protocol ----------------------------------------------------

@dataclass
class SequentialRunResult:
    task_names: list[str]
    R: np.ndarray  # R[t_eval, t_after]; NaN where t_after < t_eval
    reports: list[EvalReport]  # per task, after the final task
    task_results: list[TaskResult]
    active_ranks: list[dict[str, int]]
    trainable_params: list[int]
    checkpoint_sizes: list[int]
    checkpoints: list[Path]
    wall_times: list[float]
    heads: list[np.ndarray]
    model: GlyphTransformer | None = None

    @property
    def forgetting(self) -> list[float]:
        return forgetting(self.R)


def _use_head(model: GlyphTransformer, head: np.ndarray) -> None:
    model.params["head"] = Tensor(head.copy())
    model.params["head"].name = "head"
    model.config = GlyphTransformerConfig(**{**model.config.as_dict(), "n_classes": head.shape[0]})


def train_sequential(tasks: list[TaskSpec], config: TrainConfig,
                     model_config: GlyphTransformerConfig | None = None,
                     checkpoint_dir=None, model: GlyphTransformer | None = None) -> SequentialRunResult:
    """Train ``tasks`` in order on one backbone and fill the accuracy matrix.

    Per task: fresh head, fresh adapters, ``train_task``, checkpoint (adapters
    unmerged alongside merged weights), then merge into the backbone (unless
    ``config.merge`` is False, in which case each task keeps its own adapters)
    and evaluate every task seen so far.
    """
    if not tasks:
        raise DataError("need at least one task")
    if model is None:
        mc = model_config or GlyphTransformerConfig(n_classes=tasks[0].n_classes)
        model = initial_backbone(config, GlyphTransformerConfig(**{**mc.as_dict(), "n_classes": tasks[0].n_classes}))
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
    n = len(tasks)
    R = np.full((n, n), np.nan)
    heads: list[np.ndarray] = []
    kept: list[dict] = []
    out = SequentialRunResult([t.name for t in tasks], R, [], [], [], [], [], [], [], heads)

    for t, task in enumerate(tasks):
        reset_head(model, task.n_classes, seed=config.seed * 31 + t)
        configure_mode(model, config, seed=config.seed * 7919 + t)
        res = train_task(model, task.train, config, task_seed=t)
        heads.append(model.params["head"].data.copy())
        if checkpoint_dir is not None:
            path = checkpoint_dir / f"task{t}.dlra"
            out.checkpoint_sizes.append(save_checkpoint(model, path, heads))
            out.checkpoints.append(path)
        if config.merge:
            model.merge_adapters()
        else:
            kept.append(model.detach_adapters())
        for name in model.backbone_names():
            model.params[name].requires_grad = False
        out.task_results.append(res)
        out.active_ranks.append(res.active_ranks)
        out.trainable_params.append(res.trainable_params)
        out.wall_times.append(res.wall_time)
        log.info("task %d (%s): %d trainable params, active rank %d, %.1fs", t, task.name,
                 res.trainable_params, sum(res.active_ranks.values()), res.wall_time)
        for s in range(t + 1):
            R[s, t] = _eval_task(model, tasks[s], heads[s], kept[s] if kept else None, config.eval_batch).accuracy

    for s in range(n):
        out.reports.append(_eval_task(model, tasks[s], heads[s], kept[s] if kept else None,
                                      config.eval_batch, active_ranks=out.active_ranks[s]))
    _use_head(model, heads[-1])
    out.model = model
    for r in out.reports:
        r.forgetting = out.forgetting
    return out


def _eval_task(model: GlyphTransformer, task: TaskSpec, head: np.ndarray, adapters, batch: int, **extra) -> EvalReport:
    _use_head(model, head)
    if adapters:
        for k, ad in adapters.items():
            model.linears[k].adapter = ad
    try:
        return evaluate(model, task.test, batch, **extra)
    finally:
        if adapters:
            model.detach_adapters()


def replay_accuracy_matrix(checkpoints: list, tasks: list[TaskSpec], batch: int = 256) -> np.ndarray:
    """Recompute R from per-task checkpoints using their stored merged weights."""
    n = len(tasks)
    R = np.full((n, n), np.nan)
    for t, path in enumerate(checkpoints):
        entries = {k: v for k, v in read_entries(path).items() if ".lora." not in k}
        model, heads = model_from_entries(entries)
        for s in range(t + 1):
            R[s, t] = _eval_task(model, tasks[s], heads[s], None, batch).accuracy
    return R
