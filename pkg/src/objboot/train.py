"""Training step, pretraining loop, checkpointing and evaluation runs."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .bootstrap import BankPair, BatchObjects, ObjectKey, bootstrapping_ratio, match_view
from .clustering import cluster_joint, kmeans_joint, label_objects
from .config import ConfigError, RunConfig, apply_overrides, parse_kv_text, to_kv_text
from .encoder import (LossGraph, NumericError, Params, TeacherCenter, backward, ema_update, encode,
                      head_forward, init_params, pool_tokens, softmax, view_patches)
from .evaldense import dense_features, knn_predict, linear_probe, miou, store_from_features
from .objectives import LossReport, loss_total, weighted_ce_and_grad
from .synthdata import ViewPairBatch, augment_pair, derive_seed, make_scenes

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["step", "epoch", "l_cv_g", "l_cv_o", "l_ci_o", "l_total", "Z1", "Z2",
                  "bootstrap_ratio", "match_cosine"]

# seed streams
_S_INIT, _S_SCENES, _S_ORDER, _S_AUG, _S_CLUSTER = 1, 2, 3, 4, 5


@dataclass
class TrainState:
    student: Params
    teacher: Params
    center: TeacherCenter
    banks: BankPair
    adam_m: Params
    adam_v: Params
    step: int = 0
    epoch: int = 0  # completed epochs
    seed: int = 0


def init_state(cfg: RunConfig) -> TrainState:
    seed = cfg.train.seed
    student = init_params(cfg.encoder, cfg.scene.patch_size, derive_seed(seed, _S_INIT))
    return TrainState(
        student=student,
        teacher={k: v.copy() for k, v in student.items()},
        center=TeacherCenter.zeros(cfg.encoder.out_dim, cfg.encoder.out_dim_global, cfg.loss.center_momentum),
        banks=BankPair(cfg.bank.capacity, cfg.encoder.dim),
        adam_m={k: np.zeros_like(v) for k, v in student.items()},
        adam_v={k: np.zeros_like(v) for k, v in student.items()},
        seed=seed,
    )


def training_scenes(cfg: RunConfig):
    return make_scenes(cfg.train.train_scenes, derive_seed(cfg.train.seed, _S_SCENES), cfg.scene)


def epoch_batches(scenes, epoch: int, cfg: RunConfig):
    """Seeded shuffle and augmentation for one epoch (``epoch`` is 0-based)."""
    seed = cfg.train.seed
    order = np.random.default_rng(derive_seed(seed, _S_ORDER, epoch)).permutation(len(scenes))
    bs = cfg.train.batch_size
    for start in range(0, len(order), bs):
        items = []
        for i in order[start:start + bs]:
            scene = scenes[i]
            v1, v2 = augment_pair(scene, derive_seed(seed, _S_AUG, epoch, scene.image_id), cfg.aug)
            items.append((scene.image_id, v1, v2))
        yield ViewPairBatch(items)


@dataclass
class StepContext:
    """Everything the student objective needs, computed from the teacher and held constant."""

    x: np.ndarray  # (2B, N, F), views ordered (img0 v1, img0 v2, img1 v1, ...)
    global_targets: np.ndarray | None = None  # (2B, Lg) teacher distribution each student row must match
    global_weights: np.ndarray | None = None  # (2B,)
    pool_view: np.ndarray | None = None  # (2M,) rows 0..M-1 are view-1 objects, M..2M-1 view-2
    pool_weights: np.ndarray | None = None  # (2M, N)
    cv_targets: np.ndarray | None = None
    cv_weights: np.ndarray | None = None
    ci_targets: np.ndarray | None = None
    ci_weights: np.ndarray | None = None
    # bookkeeping
    object_keys: list[tuple[int, int]] = field(default_factory=list)  # (image_id, k) per object
    object_image: np.ndarray | None = None  # (M,) batch index
    teacher_object_reps: np.ndarray | None = None  # (2M, d)
    teacher_object_logits: np.ndarray | None = None
    teacher_global_logits: np.ndarray | None = None
    z1: int = 0
    z2: int = 0
    records: list = field(default_factory=list)
    warmup: bool = False

    @property
    def num_objects(self) -> int:
        return len(self.object_keys)


def _teacher_probs(logits: np.ndarray, center: np.ndarray, tau: float, centering: bool) -> np.ndarray:
    return softmax((logits - center) / tau if centering else logits / tau)


def build_context(state: TrainState, batch: ViewPairBatch, cfg: RunConfig) -> StepContext:
    lc = cfg.loss
    views = [v for _, v1, v2 in batch.items for v in (v1, v2)]
    x = view_patches(views)
    b = batch.batch_size
    ctx = StepContext(x=x)
    t_tokens, _ = encode(state.teacher, x)

    if lc.enable_global:
        t_glob_logits, _ = head_forward(state.teacher, t_tokens.mean(axis=1), "global")
        pt = _teacher_probs(t_glob_logits, state.center.center_global, lc.tau_t_global, lc.centering)
        swap = np.arange(2 * b) ^ 1  # student view 1 learns from teacher view 2 and vice versa
        ctx.global_targets = pt[swap]
        ctx.global_weights = np.full(2 * b, 1.0 / b)
        ctx.teacher_global_logits = t_glob_logits

    if not lc.needs_objects:
        return ctx

    pool_v1, pool_v2, w1_rows, w2_rows, obj_image, keys = [], [], [], [], [], []
    for bi, (image_id, v1, v2) in enumerate(batch.items):
        z1, z2 = t_tokens[2 * bi], t_tokens[2 * bi + 1]
        method = cfg.cluster.method
        if method == "oracle":
            assignment, objects = label_objects(v1.patch_labels, v2.patch_labels, z1, z2, cfg.scene.num_classes)
        else:
            seed = derive_seed(state.seed, _S_CLUSTER, state.step, bi)
            if method == "kmeans":
                assignment, objects = kmeans_joint(z1, z2, cfg.cluster, seed)
            else:
                coords = np.concatenate([v1.patch_coords, v2.patch_coords])
                assignment, objects = cluster_joint(z1, z2, coords, cfg.cluster, seed)
        w1, w2 = assignment.view_split
        for k in objects.valid_indices:
            pool_v1.append(2 * bi)
            pool_v2.append(2 * bi + 1)
            w1_rows.append(w1[:, k])
            w2_rows.append(w2[:, k])
            obj_image.append(bi)
            keys.append((int(image_id), int(k)))

    m = len(keys)
    ctx.object_keys = keys
    ctx.object_image = np.array(obj_image, dtype=np.int64)
    n = x.shape[1]
    ctx.pool_view = np.array(pool_v1 + pool_v2, dtype=np.int64)
    ctx.pool_weights = np.array(w1_rows + w2_rows).reshape(2 * m, n)
    if m == 0:
        return ctx
    t_obj = pool_tokens(t_tokens, ctx.pool_view, ctx.pool_weights)
    t_obj_logits, _ = head_forward(state.teacher, t_obj, "object")
    pt_obj = _teacher_probs(t_obj_logits, state.center.center_object, lc.tau_t, lc.centering)
    ctx.teacher_object_reps = t_obj
    ctx.teacher_object_logits = t_obj_logits
    swap = np.concatenate([np.arange(m, 2 * m), np.arange(m)])

    if lc.enable_cv_object:
        per_image = np.bincount(ctx.object_image, minlength=b)
        images_with_objects = int((per_image > 0).sum())
        w = 1.0 / (images_with_objects * per_image[ctx.object_image])
        ctx.cv_targets = pt_obj[swap]
        ctx.cv_weights = np.concatenate([w, w])

    if lc.enable_ci_object:
        snaps = state.banks.snapshot()
        objs = (BatchObjects(1, [ObjectKey(i, 1, k) for i, k in keys], t_obj[:m]),
                BatchObjects(2, [ObjectKey(i, 2, k) for i, k in keys], t_obj[m:]))
        rec1, rec2 = match_view(objs, snaps, 1), match_view(objs, snaps, 2)
        ctx.records = rec1 + rec2
        ctx.warmup = any(r.warmup for r in ctx.records)
        c1 = np.array([r.cycle_consistent for r in rec1])
        c2 = np.array([r.cycle_consistent for r in rec2])
        ctx.z1, ctx.z2 = int(c1.sum()), int(c2.sum())
        nn_t = np.zeros((2 * m, cfg.encoder.out_dim))
        if not ctx.warmup:
            nn_vec = np.concatenate([snaps[0].vectors[[snaps[0].index[r.nn_key] for r in rec1]],
                                     snaps[1].vectors[[snaps[1].index[r.nn_key] for r in rec2]]])
            nn_logits, _ = head_forward(state.teacher, nn_vec, "object")
            nn_t = _teacher_probs(nn_logits, state.center.center_object, lc.tau_t, lc.centering)
        # the neighbour of view-1 object k supervises the student's view-2 object k, and vice versa
        ctx.ci_targets = nn_t[swap]
        ci_w1 = np.where(c1, 1.0 / max(ctx.z1, 1), 0.0)
        ci_w2 = np.where(c2, 1.0 / max(ctx.z2, 1), 0.0)
        ctx.ci_weights = np.concatenate([ci_w2, ci_w1])
    return ctx


def student_objective(student: Params, ctx: StepContext, cfg: RunConfig,
                      with_grad: bool = True) -> tuple[dict, Params | None]:
    """Loss parts for the student given a fixed teacher context, and optionally gradients."""
    lc = cfg.loss
    tokens, cache = encode(student, ctx.x.astype(student["embed.w"].dtype, copy=False))
    parts = {"l_cv_g": 0.0, "l_cv_o": 0.0, "l_ci_o": 0.0}
    graph = LossGraph(dense=cache, num_patches=tokens.shape[1])
    if lc.enable_global:
        logits, graph.global_cache = head_forward(student, tokens.mean(axis=1), "global")
        parts["l_cv_g"], graph.dglobal_logits = weighted_ce_and_grad(
            ctx.global_targets, logits, lc.tau_s_global, ctx.global_weights)
    if lc.needs_objects and ctx.num_objects:
        reps = pool_tokens(tokens, ctx.pool_view, ctx.pool_weights)
        logits, graph.object_cache = head_forward(student, reps, "object")
        dlogits = np.zeros_like(logits)
        if lc.enable_cv_object:
            parts["l_cv_o"], g = weighted_ce_and_grad(ctx.cv_targets, logits, lc.tau_s, ctx.cv_weights)
            dlogits += g
        if lc.enable_ci_object:
            parts["l_ci_o"], g = weighted_ce_and_grad(ctx.ci_targets, logits, lc.tau_s, ctx.ci_weights)
            dlogits += g
        graph.dobject_logits = dlogits
        graph.pool_view, graph.pool_weights = ctx.pool_view, ctx.pool_weights
    total = sum(parts[name] for name, on in (("l_cv_g", lc.enable_global), ("l_cv_o", lc.enable_cv_object),
                                            ("l_ci_o", lc.enable_ci_object)) if on)
    parts["l_total"] = total
    if not math.isfinite(total):
        raise NumericError("loss", f"non-finite loss {parts}")
    return parts, (backward(student, graph) if with_grad else None)


def adamw_update(params: Params, grads: Params, m: Params, v: Params, step: int, cfg) -> None:
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1 ** step, 1.0 - b2 ** step
    for name, p in params.items():
        g = grads[name]
        m[name] = b1 * m[name] + (1.0 - b1) * g
        v[name] = b2 * v[name] + (1.0 - b2) * g * g
        update = (m[name] / c1) / (np.sqrt(v[name] / c2) + cfg.eps)
        if p.ndim > 1:
            update = update + cfg.weight_decay * p
        params[name] = p - cfg.lr * update


def train_step(state: TrainState, batch: ViewPairBatch, cfg: RunConfig) -> tuple[TrainState, LossReport]:
    ctx = build_context(state, batch, cfg)
    parts, grads = student_objective(state.student, ctx, cfg)
    parts.update(z1=ctx.z1, z2=ctx.z2, valid_object_count=ctx.num_objects)
    report = loss_total(cfg.loss, parts)

    state.step += 1
    adamw_update(state.student, grads, state.adam_m, state.adam_v, state.step, cfg.optim)
    state.teacher = ema_update(state.teacher, state.student, cfg.optim.ema_momentum)
    if cfg.loss.centering:
        state.center.update(ctx.teacher_object_logits, ctx.teacher_global_logits)

    if cfg.loss.enable_ci_object:
        report.bootstrap_ratio, _ = bootstrapping_ratio(ctx.records)
        report.warmup = ctx.warmup
        cosines = [r.cosine for r in ctx.records if not r.warmup]
        report.match_cosine = float(np.mean(cosines)) if cosines else float("nan")
        # insertion strictly after the loss: a query never sees its own step's entries
        m = ctx.num_objects
        keys = np.array(ctx.object_keys, dtype=np.int64).reshape(-1, 2)
        for bi, (image_id, _, _) in enumerate(batch.items):
            rows = np.flatnonzero(ctx.object_image == bi)
            if len(rows):
                state.banks.insert(image_id, keys[rows, 1], ctx.teacher_object_reps[rows],
                                   ctx.teacher_object_reps[m + rows])
    return state, report


# --------------------------------------------------------------------------- persistence

def save_state(path, state: TrainState, cfg: RunConfig) -> Path:
    arrays = {}
    for prefix, group in (("student", state.student), ("teacher", state.teacher),
                          ("adam_m", state.adam_m), ("adam_v", state.adam_v)):
        for name, arr in group.items():
            arrays[f"{prefix}/{name}"] = arr
    arrays["center/object"] = state.center.center_object
    arrays["center/global"] = state.center.center_global
    banks_meta = []
    for view in (1, 2):
        groups = state.banks[view].state()
        banks_meta.append([int(image_id) for image_id, _, _ in groups])
        for gi, (_, ids, vecs) in enumerate(groups):
            arrays[f"bank{view}/{gi:06d}/ids"] = ids
            arrays[f"bank{view}/{gi:06d}/vectors"] = vecs
    meta = {
        "step": state.step, "epoch": state.epoch, "seed": state.seed,
        "center_momentum": state.center.momentum,
        "bank_capacity": state.banks[1].capacity, "bank_images": banks_meta,
        "config": to_kv_text(cfg),
    }
    return ckpt.save_container(path, meta, arrays)


def load_state(path) -> tuple[TrainState, RunConfig]:
    meta, arrays = ckpt.load_container(path)
    cfg = apply_overrides(RunConfig(), parse_kv_text(meta["config"])).validate()

    def group(prefix):
        return {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith(prefix + "/")}

    banks = BankPair(meta["bank_capacity"], cfg.encoder.dim)
    for gi, image_id in enumerate(meta["bank_images"][0]):
        banks.insert(image_id, arrays[f"bank1/{gi:06d}/ids"], arrays[f"bank1/{gi:06d}/vectors"],
                     arrays[f"bank2/{gi:06d}/vectors"])
    state = TrainState(
        student=group("student"), teacher=group("teacher"),
        center=TeacherCenter(arrays["center/object"], arrays["center/global"], meta["center_momentum"]),
        banks=banks, adam_m=group("adam_m"), adam_v=group("adam_v"),
        step=meta["step"], epoch=meta["epoch"], seed=meta["seed"],
    )
    return state, cfg


# --------------------------------------------------------------------------- runs

def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def metrics_row(report: LossReport, step: int, epoch: int) -> list[str]:
    return [_fmt(v) for v in (step, epoch, report.l_cv_g, report.l_cv_o, report.l_ci_o, report.l_total,
                              report.z1, report.z2, report.bootstrap_ratio, report.match_cosine)]


def _dump_diagnostics(out_dir: Path, state: TrainState, exc: Exception) -> None:
    info = {"error": str(exc), "step": state.step, "epoch": state.epoch,
            "student_norms": {k: float(np.linalg.norm(v)) for k, v in state.student.items()},
            "teacher_norms": {k: float(np.linalg.norm(v)) for k, v in state.teacher.items()}}
    (out_dir / "diagnostics.json").write_text(json.dumps(info, indent=1, sort_keys=True))


def run_pretrain(cfg: RunConfig, out_dir, resume=None, on_step=None) -> tuple[Path, Path]:
    """Pretrain for ``cfg.train.epochs`` epochs; returns (last checkpoint, metrics CSV)."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    metrics_path = out_dir / "metrics.csv"
    if resume is not None:
        state, saved_cfg = load_state(resume)
        if saved_cfg.train.seed != cfg.train.seed:
            raise ConfigError("resume checkpoint was written with a different seed")
        kept = []
        if metrics_path.exists():
            with open(metrics_path, newline="") as fh:
                rows = list(csv.reader(fh))
            kept = [r for r in rows[1:] if int(r[0]) <= state.step]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        writer.writerows(kept)
        metrics_path.write_text(buf.getvalue())
    else:
        state = init_state(cfg)
        metrics_path.write_text(",".join(METRIC_COLUMNS) + "\n")
        save_state(out_dir / "ckpt_epoch0000.ckpt", state, cfg)
    last = out_dir / f"ckpt_epoch{state.epoch:04d}.ckpt"
    if state.epoch >= cfg.train.epochs:
        return last, metrics_path

    scenes = training_scenes(cfg)
    with open(metrics_path, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for epoch in range(state.epoch, cfg.train.epochs):
            for batch in epoch_batches(scenes, epoch, cfg):
                try:
                    state, report = train_step(state, batch, cfg)
                except NumericError as exc:
                    _dump_diagnostics(out_dir, state, exc)
                    raise
                writer.writerow(metrics_row(report, state.step, epoch + 1))
                if on_step is not None:
                    on_step(state, report)
            fh.flush()
            state.epoch = epoch + 1
            if state.epoch % cfg.train.checkpoint_every == 0 or state.epoch == cfg.train.epochs:
                last = save_state(out_dir / f"ckpt_epoch{state.epoch:04d}.ckpt", state, cfg)
            log.info("epoch %d done (step %d)", state.epoch, state.step)
    save_state(out_dir / "last.ckpt", state, cfg)
    return out_dir / "last.ckpt", metrics_path


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def epoch_summary(rows: list[dict]) -> dict[int, dict]:
    """Per-epoch mean loss and mean bootstrapping ratio (warm-up steps with no matches excluded)."""
    out: dict[int, dict] = {}
    for epoch in sorted({int(r["epoch"]) for r in rows}):
        sel = [r for r in rows if int(r["epoch"]) == epoch]
        matched = [r["bootstrap_ratio"] for r in sel if not math.isnan(r["match_cosine"])]
        out[epoch] = {"l_total": float(np.mean([r["l_total"] for r in sel])),
                      "bootstrap_ratio": float(np.mean(matched)) if matched else 0.0}
    return out


def evaluate_params(params: Params, cfg: RunConfig, ratios=None, methods=("knn",)) -> list[dict]:
    """Dense k-NN (and/or linear probe) mIoU of frozen features for each subsample ratio."""
    train_scenes = training_scenes(cfg)
    val_scenes = make_scenes(cfg.eval.val_scenes, derive_seed(cfg.eval.seed, _S_SCENES), cfg.scene,
                             id_offset=10 ** 9)
    train_f, train_l = dense_features(params, train_scenes)
    val_f, val_l = dense_features(params, val_scenes)
    return evaluate_features(train_f, train_l, val_f, val_l, cfg, ratios, methods)


def evaluate_features(train_f: np.ndarray, train_l: np.ndarray, val_f: np.ndarray, val_l: np.ndarray,
                      cfg: RunConfig, ratios=None, methods=("knn",)) -> list[dict]:
    """Same protocol on precomputed (images, patches, d) features and (images, patches) labels."""
    ec = cfg.eval
    ratios = tuple(ratios if ratios is not None else ec.ratios)
    for r in ratios:
        if r > len(train_f):
            raise ConfigError(f"subsample ratio {r} exceeds the {len(train_f)} training images")
    c = cfg.scene.num_classes
    val_flat_f, val_flat_l = val_f.reshape(-1, val_f.shape[-1]), val_l.reshape(-1)
    ids = np.arange(len(train_f))
    rows = []
    for ratio in ratios:
        row = {"ratio": ratio}
        runs = 1 if ratio == 1 else ec.runs
        for method in methods:
            scores = []
            for run in range(runs):
                store = store_from_features(train_f, train_l, ids, ratio, derive_seed(ec.seed, ratio, run), c)
                if method == "knn":
                    preds = knn_predict(store, val_flat_f, min(ec.k, len(store)), ec.query_chunk)
                    scores.append(miou(preds, val_flat_l, c).miou)
                else:
                    val_store = store_from_features(val_f, val_l, np.arange(len(val_f)), 1, 0, c)
                    result = linear_probe(store, val_store, ec.probe_epochs, ec.probe_lr, seed=ec.seed)
                    scores.append(result.metrics.miou)
            row[f"{method}_miou"] = float(np.mean(scores))
        rows.append(row)
    return rows


def write_results(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = list(rows[0].keys()) if rows else ["ratio"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in cols])
    return path


def run_eval(checkpoint, out_path, methods=("knn",), eval_overrides: dict | None = None,
             which: str = "teacher") -> list[dict]:
    if not Path(checkpoint).exists():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    state, cfg = load_state(checkpoint)
    if eval_overrides:
        apply_overrides(cfg, eval_overrides)
        cfg.validate()
    params = state.teacher if which == "teacher" else state.student
    rows = evaluate_params(params, cfg, methods=methods)
    write_results(rows, out_path)
    return rows
