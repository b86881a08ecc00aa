"""Losses, optimization, distillation, and the training/eval loops.

The segmentation loss is label-smoothed cross-entropy plus Lovász-softmax
in equal parts. With distillation enabled the total objective is
0.5 * L_seg(seg head, ground truth) + 0.5 * L_seg(distill head, teacher
hard labels), where the teacher sees the same augmented batch as the
student. Optimization is AdamW with decoupled weight decay (skipped for
biases, norm scales and gains), a 1-cycle learning-rate schedule, and an
EMA of the weights used for evaluation.

A finite-difference gradient-checking harness validates every backward
pass; the training loop aborts on NaN loss with a diagnostic dump.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import runtime
from .augment import pipeline, stream_rng
from .decoder_heads import (
    distill_logits,
    head_bank,
    neighborhood_conv,
    build_neighbor_table,
    predict_points,
    seg_logits,
)
from .model import init_params, prepare_scene, voxel_features
from .params import ParamStore, load_checkpoint, save_checkpoint, split_ema, truncated_normal
from .scene import IGNORE_LABEL

__all__ = [
    "ce_label_smooth",
    "lovasz_softmax",
    "seg_loss",
    "distill_loss",
    "OptimState",
    "adamw_step",
    "Schedule",
    "onecycle_lr",
    "EmaState",
    "ema_update",
    "init_params",
    "grad_check",
    "TeacherConfig",
    "Teacher",
    "init_teacher",
    "teacher_train",
    "teacher_forward",
    "confusion_matrix",
    "miou",
    "train_loop",
    "eval_loop",
]


# -- losses ----------------------------------------------------------------------


def ce_label_smooth(logits, labels, epsilon=0.1, ignore_id=IGNORE_LABEL):
    """Mean smoothed cross-entropy over non-ignored rows.

    Target distribution is (1 - eps) * onehot + eps / K. An all-ignored
    batch is defined as loss 0 (with a warning).
    """
    logits = ag.as_tensor(logits)
    labels = np.asarray(labels)
    k = logits.shape[1]
    valid = np.flatnonzero(labels != ignore_id)
    if valid.size == 0:
        warnings.warn("all labels ignored; smoothed cross-entropy defined as 0")
        return ag.Tensor(np.asarray(0.0, dtype=logits.dtype))
    sel = ag.gather_rows(logits, valid) if valid.size < logits.shape[0] else logits
    y = labels[valid]
    target = np.full((valid.size, k), epsilon / k, dtype=logits.dtype)
    target[np.arange(valid.size), y] += 1.0 - epsilon
    logp = sel - ag.logsumexp(sel, axis=-1, keepdims=True)
    return -(logp * target).sum() * (1.0 / valid.size)


def _lovasz_grad_vector(fg_sorted):
    """Gradient of the Jaccard extension along the sorted error sequence."""
    gts = fg_sorted.sum()
    intersection = gts - fg_sorted.cumsum()
    union = gts + (1.0 - fg_sorted).cumsum()
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(probs, labels, ignore_id=IGNORE_LABEL):
    """Lovász-softmax over classes present in the labels.

    For each present class c, errors are |1{label=c} - p_c| sorted in
    descending order and dotted with the Jaccard-extension gradient; the
    result is averaged over present classes. With hard one-hot
    predictions this equals 1 - IoU exactly.
    """
    probs = ag.as_tensor(probs)
    labels = np.asarray(labels)
    valid = np.flatnonzero(labels != ignore_id)
    if valid.size == 0:
        return ag.Tensor(np.asarray(0.0, dtype=probs.dtype))
    p = ag.gather_rows(probs, valid) if valid.size < probs.shape[0] else probs
    y = labels[valid]

    present = np.unique(y)
    data = p.data
    losses = []
    grad_cols = []
    for c in present:
        fg = (y == c).astype(data.dtype)
        errors = np.abs(fg - data[:, c])
        order = np.argsort(-errors, kind="stable")
        grad_vec = _lovasz_grad_vector(fg[order])
        losses.append(float(errors[order] @ grad_vec))
        col = np.zeros(valid.size, dtype=data.dtype)
        col[order] = grad_vec
        col *= np.where(fg == 1.0, -1.0, 1.0)  # d|fg - p_c| / d p_c
        grad_cols.append((int(c), col))

    value = np.asarray(np.mean(losses), dtype=data.dtype)

    def vjp(g):
        gp = np.zeros_like(data)
        for c, col in grad_cols:
            gp[:, c] = col / len(grad_cols)
        return (gp * g,)

    return ag.from_op(value, (p,), vjp)


def seg_loss(logits, labels, epsilon=0.1, ignore_id=IGNORE_LABEL):
    """Equal-weight smoothed cross-entropy + Lovász-softmax."""
    return ce_label_smooth(logits, labels, epsilon, ignore_id) + lovasz_softmax(
        ag.softmax(ag.as_tensor(logits), axis=-1), labels, ignore_id
    )


def distill_loss(voxel_feats, y_gt, y_teacher, heads, dataset_id, epsilon=0.1):
    """0.5 * L_seg(seg head, gt) + 0.5 * L_seg(distill head, teacher)."""
    if len(np.asarray(y_gt)) != len(np.asarray(y_teacher)):
        raise ValueError("ground-truth and teacher labels must have equal length")
    seg_part = seg_loss(seg_logits(voxel_feats, dataset_id, heads), y_gt, epsilon)
    dis_part = seg_loss(distill_logits(voxel_feats, heads), y_teacher, epsilon)
    return 0.5 * seg_part + 0.5 * dis_part


# -- optimizer / schedule / EMA ---------------------------------------------------


@dataclass
class OptimState:
    m: dict
    v: dict
    step: int = 0
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optim(store, weight_decay=0.05, beta1=0.9, beta2=0.999, eps=1e-8):
    zeros = {name: np.zeros_like(t.data, dtype=np.float64) for name, t in store.items()}
    return OptimState(
        m=zeros,
        v={name: z.copy() for name, z in zeros.items()},
        weight_decay=weight_decay,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def _decay_exempt(tensor):
    # Biases, LayerNorm scales/biases and QKNorm gains are all 1-D.
    return tensor.data.ndim <= 1


def adamw_step(store, state, lr):
    """One decoupled-weight-decay Adam step over all params with gradients."""
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, p in store.items():
        if p.grad is None:
            continue
        g = np.asarray(p.grad, dtype=np.float64)
        if state.weight_decay and not _decay_exempt(p):
            p.data = p.data - (lr * state.weight_decay) * p.data
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data = (p.data - lr * update).astype(p.data.dtype)


@dataclass(frozen=True)
class Schedule:
    max_lr: float
    total_steps: int
    pct_start: float = 0.1
    div_factor: float = 25.0
    final_div_factor: float = 1000.0


def onecycle_lr(step, sched):
    """Cosine warmup from max/div to max, then cosine anneal to max/final_div."""
    if not 0 <= step <= sched.total_steps:
        raise ValueError(f"step {step} outside [0, {sched.total_steps}]")
    peak = sched.pct_start * sched.total_steps
    start_lr = sched.max_lr / sched.div_factor
    final_lr = sched.max_lr / sched.final_div_factor
    if peak > 0 and step <= peak:
        t = step / peak
        return start_lr + (sched.max_lr - start_lr) * 0.5 * (1.0 - np.cos(np.pi * t))
    t = (step - peak) / max(sched.total_steps - peak, 1e-12)
    return final_lr + (sched.max_lr - final_lr) * 0.5 * (1.0 + np.cos(np.pi * t))


@dataclass
class EmaState:
    shadow: dict
    decay: float = 0.999


def init_ema(store, decay=0.999):
    return EmaState(shadow=store.state_dict(), decay=decay)


def ema_update(ema, store, decay=None):
    d = ema.decay if decay is None else decay
    for name, t in store.items():
        ema.shadow[name] = d * ema.shadow[name] + (1.0 - d) * t.data
    return ema


# -- gradient checking -------------------------------------------------------------


def grad_check(loss_fn, store, eps=1e-4, n_coords=200, rng=None, grad_hook=None, names=None):
    """Max relative error between analytic and central-difference gradients.

    Samples at least one coordinate from every parameter (restricted to
    `names` when given) and tops up to `n_coords` weighted by size.
    `grad_hook(name, grad) -> grad` lets tests plant faults in the
    analytic side. Returns (max_error, {param name: max error}).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    names = list(store.names()) if names is None else list(names)

    store.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {}
    for name in names:
        g = store[name].grad
        analytic[name] = np.zeros_like(store[name].data) if g is None else np.array(g)
        if grad_hook is not None:
            analytic[name] = grad_hook(name, analytic[name])

    coords = [(name, int(rng.integers(store[name].data.size))) for name in names]
    sizes = np.array([store[name].data.size for name in names], dtype=np.float64)
    weights = sizes / sizes.sum()
    while len(coords) < n_coords:
        name = names[int(rng.choice(len(names), p=weights))]
        coords.append((name, int(rng.integers(store[name].data.size))))

    per_param = {name: 0.0 for name in names}
    with ag.no_grad():
        for name, flat in coords:
            data = store[name].data
            orig = data.flat[flat]
            data.flat[flat] = orig + eps
            up = float(loss_fn().data)
            data.flat[flat] = orig - eps
            down = float(loss_fn().data)
            data.flat[flat] = orig
            numeric = (up - down) / (2.0 * eps)
            err = abs(float(analytic[name].flat[flat]) - numeric) / max(1.0, abs(numeric))
            per_param[name] = max(per_param[name], err)
    return max(per_param.values()), per_param


# -- CNN teacher --------------------------------------------------------------------


@dataclass(frozen=True)
class TeacherConfig:
    in_channels: int = 3
    hidden: int = 24
    n_classes: int = 6


@dataclass
class Teacher:
    """Small dense voxel CNN over 3x3x3 occupied-voxel neighborhoods."""

    cfg: TeacherConfig
    store: ParamStore
    trained: bool = False


def init_teacher(cfg, seed, dtype=None):
    if dtype is None:
        dtype = runtime.default_dtype()
    rng = np.random.default_rng(seed)
    store = ParamStore()
    dims = [cfg.in_channels, cfg.hidden, cfg.hidden, cfg.n_classes]
    for i, (cin, cout) in enumerate(zip(dims[:-1], dims[1:])):
        store.add(f"teacher.conv{i}.w", truncated_normal(rng, (27, cin, cout), std=0.02, dtype=dtype))
        store.add(f"teacher.conv{i}.b", np.zeros(cout, dtype=dtype))
    return Teacher(cfg=cfg, store=store)


def teacher_logits(teacher, vset):
    table = build_neighbor_table(vset.coords)
    x = ag.Tensor(vset.features.astype(teacher.store["teacher.conv0.w"].dtype, copy=False))
    for i in range(3):
        x = neighborhood_conv(
            x, teacher.store[f"teacher.conv{i}.w"], teacher.store[f"teacher.conv{i}.b"], table
        )
        if i < 2:
            x = ag.gelu(x)
    return x


def teacher_forward(teacher, vset):
    """Frozen teacher's hard per-voxel labels for one (augmented) voxel set."""
    if not teacher.trained:
        raise RuntimeError("teacher must be trained before use in distillation")
    with ag.no_grad():
        logits = teacher_logits(teacher, vset)
    return np.argmax(logits.data, axis=1)


def teacher_train(teacher, vsets, steps=300, max_lr=0.01, seed=0, log=None):
    """Pretrain the teacher on labeled voxel sets, then freeze it."""
    optim = init_optim(teacher.store, weight_decay=0.0)
    sched = Schedule(max_lr=max_lr, total_steps=steps)
    rng = np.random.default_rng(seed)
    for step in range(steps):
        vset = vsets[int(rng.integers(len(vsets)))]
        teacher.store.zero_grad()
        loss = seg_loss(teacher_logits(teacher, vset), vset.labels, epsilon=0.0)
        loss.backward()
        adamw_step(teacher.store, optim, onecycle_lr(step, sched))
        if log is not None:
            log.append(float(loss.data))
    teacher.trained = True
    return teacher


# -- metrics --------------------------------------------------------------------------


def confusion_matrix(pred, labels, n_classes, ignore_id=IGNORE_LABEL):
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    valid = labels != ignore_id
    idx = labels[valid] * n_classes + pred[valid]
    return np.bincount(idx, minlength=n_classes**2).reshape(n_classes, n_classes)


def miou(confusion):
    """Mean IoU over classes with non-empty union; returns (mean, per-class).

    Excluded classes carry NaN in the per-class vector.
    """
    confusion = np.asarray(confusion, dtype=np.float64)
    tp = np.diag(confusion)
    union = confusion.sum(axis=0) + confusion.sum(axis=1) - tp
    per_class = np.full(confusion.shape[0], np.nan)
    nonempty = union > 0
    per_class[nonempty] = tp[nonempty] / union[nonempty]
    mean = float(np.nanmean(per_class)) if nonempty.any() else 0.0
    return mean, per_class


# -- training / evaluation loops -------------------------------------------------------


@dataclass
class TrainSettings:
    steps: int = 2000
    batch_scenes: int = 2
    max_lr: float = 2e-3
    pct_start: float = 0.1
    div_factor: float = 25.0
    final_div_factor: float = 1000.0
    weight_decay: float = 0.05
    label_smoothing: float = 0.1
    ema_decay: float = 0.999
    eval_every: int = 0  # 0 = only at the end
    voxel_mode: str = "stochastic"  # training-time representative sampling
    seed: int = 0


@dataclass
class DistillSettings:
    enabled: bool = False
    teacher: str = "oracle"  # "oracle" | "train" | checkpoint path
    hidden: int = 24
    steps: int = 300
    max_lr: float = 0.01


def _nan_dump(out_dir, step, lr, losses, store):
    payload = {
        "step": step,
        "lr": lr,
        "losses": {k: float(v) for k, v in losses.items()},
        "param_norms": {name: float(np.linalg.norm(t.data)) for name, t in store.items()},
    }
    path = out_dir / "nan_dump.json"
    path.write_text(json.dumps(payload, indent=2))
    return path


def train_loop(model_cfg, voxel_size, scenes_by_dataset, out_dir, settings=None,
               augment_cfg=None, distill=None, grid_shift=False):
    """Full training run; writes metrics.jsonl and model.ckpt into out_dir.

    Per step: sample a single-dataset batch, augment, voxelize, patchify,
    embed, encode, decode, heads, loss (two-head form when distillation is
    on), backward, AdamW with the 1-cycle rate, EMA update.
    """
    from pathlib import Path

    settings = settings or TrainSettings()
    distill = distill or DistillSettings()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dtype = runtime.default_dtype()

    if distill.enabled:
        if model_cfg.distill_classes is None:
            raise ValueError("distillation requires distill_classes in the model config")
        if len(scenes_by_dataset) != 1:
            raise ValueError("distillation supports single-dataset training only")

    store = init_params(model_cfg, settings.seed, dtype)
    optim = init_optim(store, weight_decay=settings.weight_decay)
    sched = Schedule(
        max_lr=settings.max_lr,
        total_steps=settings.steps,
        pct_start=settings.pct_start,
        div_factor=settings.div_factor,
        final_div_factor=settings.final_div_factor,
    )
    ema = init_ema(store, settings.ema_decay)
    heads = head_bank(store, model_cfg.dataset_classes, with_distill=distill.enabled)

    teacher = None
    if distill.enabled and distill.teacher != "oracle":
        dataset = next(iter(scenes_by_dataset))
        teacher = init_teacher(
            TeacherConfig(
                in_channels=model_cfg.in_channels,
                hidden=distill.hidden,
                n_classes=model_cfg.distill_classes,
            ),
            seed=settings.seed + 1,
            dtype=dtype,
        )
        if distill.teacher == "train":
            vsets = [
                voxelize(c, voxel_size) for c in scenes_by_dataset[dataset]
            ]
            teacher_train(teacher, vsets, steps=distill.steps, max_lr=distill.max_lr,
                          seed=settings.seed + 2)
        else:  # checkpoint path
            state, _ = split_ema(load_checkpoint(distill.teacher))
            teacher.store.load_state_dict(state)
            teacher.trained = True

    flat = [(name, i) for name, scenes in scenes_by_dataset.items() for i in range(len(scenes))]
    metrics_path = out_dir / "metrics.jsonl"
    log_file = open(metrics_path, "w")
    t_start = time.monotonic()

    try:
        for step in range(settings.steps):
            rng = np.random.default_rng(np.random.SeedSequence(settings.seed, spawn_key=(7, step)))
            # Single-dataset batch: the first uniformly drawn scene picks the dataset.
            dataset, _ = flat[int(rng.integers(len(flat)))]
            pool = scenes_by_dataset[dataset]
            idx = rng.integers(len(pool), size=settings.batch_scenes)
            clouds = [pool[int(i)] for i in idx]

            if augment_cfg is not None:
                clouds = [
                    pipeline(
                        c,
                        augment_cfg,
                        step,
                        slot,
                        partner=clouds[(slot + 1) % len(clouds)] if len(clouds) > 1 else None,
                    )
                    for slot, c in enumerate(clouds)
                ]

            prepared = []
            for slot, cloud in enumerate(clouds):
                srng = stream_rng(settings.seed + 13, step, slot)
                shift = srng.integers(0, model_cfg.patch_size, size=3) if grid_shift else None
                prepared.append(
                    prepare_scene(
                        cloud,
                        voxel_size,
                        model_cfg.patch_size,
                        voxel_mode=settings.voxel_mode,
                        rng=srng if settings.voxel_mode == "stochastic" else None,
                        grid_shift=shift,
                    )
                )

            store.zero_grad()
            feats = voxel_features(store, model_cfg, prepared, training=True, rng=rng)

            seg_terms, dis_terms = [], []
            for scene, f in zip(prepared, feats):
                s = seg_loss(
                    seg_logits(f, dataset, heads), scene.vset.labels, settings.label_smoothing
                )
                seg_terms.append(s)
                if distill.enabled:
                    if teacher is None:  # oracle teacher := ground truth
                        y_teacher = scene.vset.labels
                    else:
                        y_teacher = teacher_forward(teacher, scene.vset)
                    dis_terms.append(
                        seg_loss(distill_logits(f, heads), y_teacher, settings.label_smoothing)
                    )

            n = len(seg_terms)
            loss_seg = seg_terms[0] * (1.0 / n)
            for t in seg_terms[1:]:
                loss_seg = loss_seg + t * (1.0 / n)
            if distill.enabled:
                loss_dis = dis_terms[0] * (1.0 / n)
                for t in dis_terms[1:]:
                    loss_dis = loss_dis + t * (1.0 / n)
                total = 0.5 * loss_seg + 0.5 * loss_dis
            else:
                loss_dis = None
                total = loss_seg

            lr = float(onecycle_lr(step, sched))
            losses = {
                "loss_total": float(total.data),
                "loss_seg": float(loss_seg.data),
                "loss_distill": float(loss_dis.data) if loss_dis is not None else 0.0,
            }
            if not all(np.isfinite(v) for v in losses.values()):
                dump = _nan_dump(out_dir, step, lr, losses, store)
                raise RuntimeError(f"non-finite loss at step {step}; diagnostics in {dump}")

            total.backward()
            grad_norm = store.grad_norm()
            adamw_step(store, optim, lr)
            ema_update(ema, store)

            record = {
                "step": step,
                "lr": lr,
                "loss_total": losses["loss_total"],
                "loss_seg": losses["loss_seg"],
                "loss_distill": losses["loss_distill"],
                "grad_norm": grad_norm,
            }
            if settings.eval_every and (step + 1) % settings.eval_every == 0:
                eval_store = init_params(model_cfg, settings.seed, dtype)
                eval_store.load_state_dict(ema.shadow)
                report = evaluate_scenes(eval_store, model_cfg, voxel_size, scenes_by_dataset)
                record["eval_miou"] = report["mean_miou"]
            log_file.write(json.dumps(record) + "\n")
        ckpt_path = out_dir / "model.ckpt"
        save_checkpoint(ckpt_path, store, ema.shadow)

        # Final metrics computed from the saved checkpoint so that
        # `volt eval` on it reproduces the logged numbers exactly.
        report = eval_loop(ckpt_path, model_cfg, voxel_size, scenes_by_dataset)
        final = {
            "step": settings.steps,
            "eval_miou": report["mean_miou"],
            "eval_voxel_acc": report["mean_voxel_acc"],
        }
        log_file.write(json.dumps(final) + "\n")
    finally:
        log_file.close()

    return {
        "checkpoint": str(ckpt_path),
        "metrics": str(metrics_path),
        "final": final,
        "wall_time_s": time.monotonic() - t_start,
    }


def evaluate_scenes(store, model_cfg, voxel_size, scenes_by_dataset, dump_dir=None):
    """mIoU / accuracy report over labeled scenes, deterministic pipeline."""
    from pathlib import Path

    heads = head_bank(store, model_cfg.dataset_classes, with_distill=False)
    report = {"datasets": {}}
    mious, vaccs = [], []
    for dataset, scenes in scenes_by_dataset.items():
        k = model_cfg.dataset_classes[dataset]
        confusion = np.zeros((k, k), dtype=np.int64)
        vox_hits = vox_total = 0
        for i, cloud in enumerate(scenes):
            prepared = prepare_scene(cloud, voxel_size, model_cfg.patch_size)
            with ag.no_grad():
                feats = voxel_features(store, model_cfg, [prepared])[0]
            logits = seg_logits(feats, dataset, heads).data
            vox_pred = np.argmax(logits, axis=1)
            point_pred = predict_points(logits, prepared.vset)
            if cloud.labels is not None:
                confusion += confusion_matrix(point_pred, cloud.labels, k)
            if prepared.vset.labels is not None:
                valid = prepared.vset.labels != IGNORE_LABEL
                vox_hits += int((vox_pred[valid] == prepared.vset.labels[valid]).sum())
                vox_total += int(valid.sum())
            if dump_dir is not None:
                path = Path(dump_dir) / f"predictions_{dataset}_{i}.csv"
                dump_point_predictions(path, point_pred, cloud.labels)
        mean, per_class = miou(confusion)
        voxel_acc = vox_hits / max(vox_total, 1)
        point_acc = float(np.trace(confusion) / max(confusion.sum(), 1))
        report["datasets"][dataset] = {
            "miou": mean,
            "per_class_iou": per_class.tolist(),
            "point_acc": point_acc,
            "voxel_acc": voxel_acc,
        }
        mious.append(mean)
        vaccs.append(voxel_acc)
    report["mean_miou"] = float(np.mean(mious)) if mious else 0.0
    report["mean_voxel_acc"] = float(np.mean(vaccs)) if vaccs else 0.0
    return report


def dump_point_predictions(path, point_pred, labels):
    """CSV dump: point_index,pred_class,label (label -1 when absent)."""
    with open(path, "w") as f:
        f.write("point_index,pred_class,label\n")
        lab = labels if labels is not None else np.full(len(point_pred), IGNORE_LABEL)
        for i, (p, l) in enumerate(zip(point_pred, lab)):
            f.write(f"{i},{int(p)},{int(l)}\n")


def eval_loop(checkpoint_path, model_cfg, voxel_size, scenes_by_dataset, use_ema=True,
              dump_dir=None):
    """Evaluate a checkpoint; EMA shadow weights by default."""
    state = load_checkpoint(checkpoint_path)
    params, ema_shadow = split_ema(state)
    store = init_params(model_cfg, seed=0, dtype=runtime.default_dtype())
    chosen = ema_shadow if (use_ema and ema_shadow) else params
    store.load_state_dict(chosen)
    return evaluate_scenes(store, model_cfg, voxel_size, scenes_by_dataset, dump_dir=dump_dir)
