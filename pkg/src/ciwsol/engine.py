"""Task-by-task training orchestration.

Each task snapshots the previous network, expands both heads for the new
classes, trains on the new data plus the exemplar replay set with the
distillation losses, then trains the drift-compensation pair against the
frozen snapshot, rebalances the exemplar memory, and writes a checkpoint.
Every random choice derives from the run seed, so a rerun with the same
configuration reproduces the metrics file byte for byte.
"""

from __future__ import annotations

import copy
import hashlib
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .compensation import (TRAIN_GRAD_EPS, CompensationPair, train_compensation)
from .config import Config
from .data import (ArrayDataset, BatchStream, concat_datasets, eval_batches,
                   load_images, load_manifest)
from .distill_losses import (KdLossWeights, loss_ci_total, loss_kd_cls,
                             loss_kd_feat, loss_kd_loc)
from .evaluation import (IncrementalReport, TaskRecord, eval_task,
                         write_metrics_csv)
from .exemplars import ExemplarStore, compute_embeddings, rebalance, write_manifest
from .model import (ImageBatch, ModelConfig, WsolNetwork, expand_heads,
                    forward_full, freeze)
from .wsol_losses import WsolLossWeights, wsol_losses

logger = logging.getLogger(__name__)

# Sub-seed stream tags; combined with the run seed and task index.
_SEED_INIT, _SEED_EXPAND, _SEED_SHUFFLE, _SEED_FDC = 0, 1, 2, 3


def sub_seed(master: int, tag: int, task: int = 0) -> int:
    return int(np.random.SeedSequence([master, tag, task]).generate_state(1)[0])


@dataclass(frozen=True)
class TaskSchedule:
    """Disjoint per-task class lists over a fixed random class order."""

    base_classes: int
    increment: int
    num_tasks: int
    class_order: tuple  # permutation of the original class ids

    def classes_learned(self, t: int) -> int:
        """|accumulated classes| after task t (1-based)."""
        if not 1 <= t <= self.num_tasks:
            raise ValueError(f"task {t} outside 1..{self.num_tasks}")
        return self.base_classes + (t - 1) * self.increment

    def task_classes(self, t: int) -> tuple:
        hi = self.classes_learned(t)
        lo = hi - (self.base_classes if t == 1 else self.increment)
        return self.class_order[lo:hi]

    def channel_map(self) -> dict:
        """Original class id -> network channel index."""
        return {cid: pos for pos, cid in enumerate(self.class_order)}


def build_schedule(total_classes: int, base: int, increment: int,
                   seed: int) -> TaskSchedule:
    """Deterministic schedule with base + (T-1) * increment = total classes."""
    if total_classes < 1 or base < 1 or base > total_classes:
        raise ValueError(f"invalid class counts: total={total_classes}, base={base}")
    remaining = total_classes - base
    if remaining == 0:
        num_tasks = 1
    else:
        if increment < 1 or remaining % increment != 0:
            raise ValueError(
                f"{total_classes} classes cannot be split as {base} + k*{increment}")
        num_tasks = 1 + remaining // increment
    order = tuple(int(c) for c in
                  np.random.default_rng(seed).permutation(total_classes))
    return TaskSchedule(base, increment, num_tasks, order)


@dataclass
class RunState:
    """Everything that survives from one task to the next."""

    task_index: int
    cur_net: WsolNetwork
    prev_net: WsolNetwork | None
    cur_pair: CompensationPair | None
    prev_pair: CompensationPair | None
    store: ExemplarStore
    schedule: TaskSchedule
    config: Config
    train_pool: ArrayDataset  # full training split, labels = channel indices
    run_dir: str
    optimizer: torch.optim.Optimizer | None = None
    prev_hash: str | None = None


def _state_hash(net: torch.nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in sorted(net.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def model_config_from(config: Config) -> ModelConfig:
    return ModelConfig(
        input_size=config["dataset.input_size"],
        backbone_channels=config.int_tuple("model.backbone_channels"),
        backbone_strides=config.int_tuple("model.backbone_strides"),
        classifier_channels=config.int_tuple("model.classifier_channels"),
        classifier_kernel=config["model.classifier_kernel"],
        cosine_head=config["model.cosine_head"],
        scale_init=config["model.scale_init"],
    )


def _exemplar_dataset(state: RunState) -> ArrayDataset | None:
    ids = state.store.image_ids()
    if not ids:
        return None
    index_of = {image_id: i for i, image_id in enumerate(state.train_pool.ids)}
    return state.train_pool.subset([index_of[i] for i in ids])


def _train_wsol(state: RunState, task_ds: ArrayDataset, t: int):
    cfg = state.config
    cur, prev = state.cur_net, state.prev_net
    cur.train()
    for p in cur.parameters():
        p.requires_grad_(True)
    replay = _exemplar_dataset(state)
    full = concat_datasets(task_ds, replay) if replay is not None else task_ds
    loader = BatchStream(full, cfg["train.batch_size"],
                         seed=sub_seed(cfg["run.seed"], _SEED_SHUFFLE, t))
    epochs = cfg["train.epochs_base"] if t == 1 else cfg["train.epochs_incr"]
    wsol_w = WsolLossWeights(cfg["loss.alpha1"], cfg["loss.alpha2"],
                             cfg["loss.alpha3"], cfg["loss.epsilon"])
    kd_w = KdLossWeights(cfg["loss.alpha4"], cfg["loss.alpha5"],
                         cfg["loss.alpha6"], cfg["loss.alpha7"])
    optimizer = torch.optim.SGD(cur.parameters(), lr=cfg["train.lr"],
                                momentum=cfg["train.momentum"])
    state.optimizer = optimizer
    decay_at = (epochs * 2) // 3
    for epoch in range(epochs):
        if epoch == decay_at and epoch > 0 and cfg["train.lr_decay"] != 1.0:
            for group in optimizer.param_groups:
                group["lr"] *= cfg["train.lr_decay"]
        for batch in loader.epoch(epoch):
            total = _training_loss(cur, prev, batch, wsol_w, kd_w)
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
    cur.eval()


def _training_loss(cur: WsolNetwork, prev: WsolNetwork | None, batch: ImageBatch,
                   wsol_w: WsolLossWeights, kd_w: KdLossWeights) -> torch.Tensor:
    out = forward_full(cur, batch)
    parts = wsol_losses(cur, out, batch.labels, wsol_w)
    if prev is None:
        return parts["wsol"]
    with torch.no_grad():
        prev_out = forward_full(prev, batch)
    kd_cls = loss_kd_cls(out.cls_map, prev_out.cls_map)
    kd_feat_cls = loss_kd_feat(out.cls_tap_pre_last, prev_out.cls_tap_pre_last)
    kd_feat_loc = loss_kd_feat(out.loc_tap_pre_last, prev_out.loc_tap_pre_last)
    exemplar = batch.labels < prev.num_classes  # replayed old-class samples
    if exemplar.any():
        kd_loc = loss_kd_loc(out.cam_map[exemplar], prev_out.cam_map[exemplar],
                             batch.labels[exemplar], grad_eps=TRAIN_GRAD_EPS)
    else:
        kd_loc = out.cam_map.new_zeros(())
    return loss_ci_total(parts["wsol"], kd_cls, kd_loc, kd_feat_cls,
                         kd_feat_loc, kd_w)


def _update_exemplars(state: RunState, task_ds: ArrayDataset, t: int):
    cfg = state.config
    if cfg["memory.budget"] <= 0:
        return  # replay disabled
    batches = eval_batches(task_ds, cfg["eval.batch_size"])
    embeddings = compute_embeddings(state.cur_net, batches)
    by_id = dict(embeddings)
    new_classes = {}
    for i, image_id in enumerate(task_ds.ids):
        channel = int(task_ds.labels[i])
        new_classes.setdefault(channel, []).append((image_id, by_id[image_id]))
    state.store = rebalance(state.store, new_classes,
                            k_acc=state.schedule.classes_learned(t))


def run_task(state: RunState, task_ds: ArrayDataset, t: int) -> RunState:
    """Execute one task end to end and checkpoint the result.

    Order: snapshot and freeze the previous network, expand the heads, train
    with the incremental objective (plain WSOL objective at t=1), train the
    compensation pair, rebalance the exemplar store, then write
    `task_<t>/checkpoint` and the exemplar manifest. A failure in any step
    propagates before the checkpoint is touched, so the last completed task's
    files stay valid.
    """
    cfg = state.config
    schedule = state.schedule
    if t >= 2:
        state.prev_net = freeze(copy.deepcopy(state.cur_net))
        state.prev_hash = _state_hash(state.prev_net)
        state.prev_pair = state.cur_pair
        state.cur_pair = None
        n_new = len(schedule.task_classes(t))
        state.cur_net = expand_heads(state.cur_net, n_new,
                                     sub_seed(cfg["run.seed"], _SEED_EXPAND, t))

    _train_wsol(state, task_ds, t)

    if t >= 2 and cfg["fdc.enabled"]:
        freeze(state.cur_net)
        loader = BatchStream(
            concat_datasets(task_ds, _exemplar_dataset(state))
            if _exemplar_dataset(state) is not None else task_ds,
            cfg["train.batch_size"], seed=sub_seed(cfg["run.seed"], _SEED_FDC, t))
        state.cur_pair = train_compensation(
            state.cur_net, state.prev_net, state.prev_pair, loader,
            epochs=cfg["train.fdc_epochs"], beta=cfg["loss.beta"],
            lr=cfg["train.lr"], momentum=cfg["train.momentum"],
            hidden=cfg["fdc.hidden"], seed=sub_seed(cfg["run.seed"], _SEED_FDC, t))

    if state.prev_net is not None:
        assert _state_hash(state.prev_net) == state.prev_hash, \
            "previous-task network changed during the task"

    _update_exemplars(state, task_ds, t)

    expected = schedule.classes_learned(t)
    assert state.cur_net.num_classes == expected, \
        f"class bookkeeping broken: {state.cur_net.num_classes} != {expected}"

    task_dir = os.path.join(state.run_dir, f"task_{t}")
    os.makedirs(task_dir, exist_ok=True)
    save_checkpoint(os.path.join(task_dir, "checkpoint"), state.cur_net,
                    state.cur_pair)
    write_manifest(state.store, os.path.join(task_dir, "exemplars.tsv"))
    state.task_index = t
    return state


def _task_subset(pool: ArrayDataset, schedule: TaskSchedule, t: int) -> ArrayDataset:
    lo = schedule.classes_learned(t) - (schedule.base_classes if t == 1
                                        else schedule.increment)
    hi = schedule.classes_learned(t)
    return pool.subset(np.nonzero((pool.labels >= lo) & (pool.labels < hi))[0])


def run_experiment(config: Config) -> IncrementalReport:
    """Run every task of the schedule and evaluate after each one.

    Evaluation covers the accumulated classes, using compensated (fused)
    outputs from the second task on when compensation is enabled. Writes
    config.resolved, metrics.csv, report.json, and per-task checkpoints under
    `<run.out_dir>/<run.name>/`.
    """
    manifest = load_manifest(os.path.join(config["dataset.root"],
                                          config["dataset.manifest"]))
    schedule = build_schedule(manifest.num_classes(), config["schedule.base"],
                              config["schedule.increment"], config["schedule.seed"])
    run_dir = os.path.join(config["run.out_dir"], config["run.name"])
    os.makedirs(run_dir, exist_ok=True)
    config.save(os.path.join(run_dir, "config.resolved"))

    input_size = config["dataset.input_size"]
    channel_map = schedule.channel_map()
    train_pool = load_images(manifest, manifest.split("train"), input_size, channel_map)
    test_pool = load_images(manifest, manifest.split("test"), input_size, channel_map)

    torch.manual_seed(sub_seed(config["run.seed"], _SEED_INIT))
    net = WsolNetwork(model_config_from(config), schedule.base_classes,
                      seed=sub_seed(config["run.seed"], _SEED_INIT))
    state = RunState(task_index=0, cur_net=net, prev_net=None, cur_pair=None,
                     prev_pair=None, store=ExemplarStore(config["memory.budget"]),
                     schedule=schedule, config=config, train_pool=train_pool,
                     run_dir=run_dir)

    records = []
    for t in range(1, schedule.num_tasks + 1):
        state = run_task(state, _task_subset(train_pool, schedule, t), t)
        learned = schedule.classes_learned(t)
        test_t = test_pool.subset(np.nonzero(test_pool.labels < learned)[0])
        pair = state.cur_pair if (config["fdc.enabled"] and t >= 2) else None
        top1, top5, gtk = eval_task(state.cur_net, pair,
                                    eval_batches(test_t, config["eval.batch_size"]),
                                    config["eval.iou_thresh"], config["eval.tau"])
        records.append(TaskRecord(t, learned, top1, top5, gtk))
        logger.info("task %d/%d: classes=%d top1=%.4f top5=%.4f gtk=%.4f",
                    t, schedule.num_tasks, learned, top1, top5, gtk)
        report = IncrementalReport(records)
        write_metrics_csv(report, os.path.join(run_dir, "metrics.csv"))
        report.save(os.path.join(run_dir, "report.json"))
    return IncrementalReport(records)


def evaluate_checkpoint(run_dir, task: int):
    """Re-evaluate a saved task checkpoint on its accumulated test classes."""
    from .checkpoint import load_checkpoint
    from .config import load_config

    config = load_config(os.path.join(run_dir, "config.resolved"))
    manifest = load_manifest(os.path.join(config["dataset.root"],
                                          config["dataset.manifest"]))
    schedule = build_schedule(manifest.num_classes(), config["schedule.base"],
                              config["schedule.increment"], config["schedule.seed"])
    net, pair, _ = load_checkpoint(os.path.join(run_dir, f"task_{task}", "checkpoint"))
    learned = schedule.classes_learned(task)
    test_pool = load_images(manifest, manifest.split("test"),
                            config["dataset.input_size"], schedule.channel_map())
    test_t = test_pool.subset(np.nonzero(test_pool.labels < learned)[0])
    use_pair = pair if (config["fdc.enabled"] and task >= 2) else None
    top1, top5, gtk = eval_task(net, use_pair,
                                eval_batches(test_t, config["eval.batch_size"]),
                                config["eval.iou_thresh"], config["eval.tau"])
    return TaskRecord(task, learned, top1, top5, gtk)
