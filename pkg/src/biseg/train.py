"""Training loop: deterministic batching, momentum SGD, poly schedule.

One iteration draws a batch (epoch-wise shuffled, cycling through the
dataset), augments each sample with its own derived RNG stream, runs the
training graph forward and backward under the joint loss, and applies one
SGD step at the poly learning rate. Every iteration appends a CSV row
"iter,lr,L,lp,l2,l3" with repr-precision floats, so two runs with the same
seed produce bitwise identical logs. A non-finite loss aborts immediately,
naming the iteration and the batch indices that produced it.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import graph, network
from .config import EngineConfig, config_hash
from .data import ConfusionMatrix, MiouResult, SegDataset, augment, miou, sample_rng
from .errors import DataError, NumericAbort
from .graph import ParamStore
from .tensor import Rng, Tensor

LOG_HEADER = "iter,lr,L,lp,l2,l3"

_PERM_SALT = 0x9E377
_INIT_SALT = 0x1A17


@dataclass
class TrainResult:
    store: ParamStore
    log_rows: list[str]
    log_path: str
    checkpoint_paths: list[str]
    final_path: str


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    keys = Rng(seed).split(_PERM_SALT).split(epoch).uniform(n)
    return np.argsort(keys, kind="stable")


def batch_indices(seed: int, iteration: int, batch_size: int, n: int):
    """Sample indices for one iteration: [(epoch, index), ...].

    The dataset is walked in epoch-wise shuffled order; batches may straddle
    an epoch boundary. Pure function of (seed, iteration), so any iteration
    can be replayed in isolation.
    """
    out = []
    for j in range(batch_size):
        g = iteration * batch_size + j
        epoch, pos = divmod(g, n)
        out.append((epoch, int(_epoch_order(seed, epoch, n)[pos])))
    return out


def _load_batch(dataset: SegDataset, picks, cfg: EngineConfig):
    images, labels = [], []
    for epoch, idx in picks:
        s = augment(dataset.load(idx), cfg.aug, sample_rng(cfg.seed, epoch, idx))
        images.append(s.image.data)
        labels.append(s.label)
    return np.concatenate(images, axis=0), np.stack(labels, axis=0)


def format_row(iteration: int, lr: float, total: float, lp: float,
               l2: float, l3: float) -> str:
    vals = ",".join(repr(float(v)) for v in (lr, total, lp, l2, l3))
    return f"{iteration},{vals}"


def run_training(cfg: EngineConfig, out_dir, dataset: SegDataset | None = None,
                 echo_every: int = 0) -> TrainResult:
    """Train for cfg.sgd.max_iter iterations; returns the trained store.

    The dataset defaults to cfg.train.manifest. Artifacts written under
    out_dir: loss_log.csv, optional cadence checkpoints, and final.bsnt.
    """
    if dataset is None:
        if not cfg.train.manifest:
            raise DataError("no dataset: config sets no train.manifest")
        dataset = SegDataset.from_manifest(cfg.train.manifest)
    if len(dataset) == 0:
        raise DataError("dataset lists no samples")
    os.makedirs(out_dir, exist_ok=True)

    net = network.build_network(cfg.model, train=True)
    store = ParamStore()
    graph.init_params(net.specs, store, Rng(cfg.seed).split(_INIT_SALT))

    def loss_fn(values):
        jl = network.joint_loss_on_values(values, net, loss_labels, cfg.model)
        aux = list(jl.aux) + [0.0, 0.0]
        terms = {"lp": jl.main, "l2": aux[0], "l3": aux[1]}
        return jl.total, jl.seed_grads, terms

    chash = config_hash(cfg)
    log_path = os.path.join(out_dir, "loss_log.csv")
    rows: list[str] = []
    ckpts: list[str] = []
    n = len(dataset)
    with open(log_path, "w", encoding="utf-8") as log:
        log.write(LOG_HEADER + "\n")
        for it in range(cfg.sgd.max_iter):
            picks = batch_indices(cfg.seed, it, cfg.train.batch_size, n)
            images, loss_labels = _load_batch(dataset, picks, cfg)
            lr = graph.poly_lr(cfg.sgd, it)
            fb = graph.forward_backward(
                net.specs, store, {net.input: images}, loss_fn, mode="train"
            )
            if not math.isfinite(fb.loss):
                raise NumericAbort(
                    f"loss became {fb.loss!r}", iteration=it,
                    batch_indices=[idx for _e, idx in picks],
                )
            graph.sgd_step(store, fb.param_grads, lr, cfg.sgd)
            row = format_row(it, lr, fb.loss, fb.terms["lp"],
                             fb.terms["l2"], fb.terms["l3"])
            rows.append(row)
            log.write(row + "\n")
            if echo_every and (it % echo_every == 0 or it == cfg.sgd.max_iter - 1):
                print(f"iter {it}: lr={lr:.6f} loss={fb.loss:.4f}")
            every = cfg.train.checkpoint_every
            if every and (it + 1) % every == 0 and (it + 1) < cfg.sgd.max_iter:
                path = os.path.join(out_dir, f"ckpt_{it + 1:06d}.bsnt")
                graph.save_checkpoint(store, path, iteration=it + 1, config_hash=chash)
                ckpts.append(path)
    final_path = os.path.join(out_dir, "final.bsnt")
    graph.save_checkpoint(store, final_path, iteration=cfg.sgd.max_iter,
                          config_hash=chash)
    return TrainResult(store=store, log_rows=rows, log_path=log_path,
                       checkpoint_paths=ckpts, final_path=final_path)


def evaluate(store: ParamStore, cfg: EngineConfig,
             dataset: SegDataset) -> MiouResult:
    """Mean IoU of the model over a dataset at native resolution.

    Applies mean subtraction only (no geometric augmentation), so extents
    must already be multiples of 32.
    """
    cm = ConfusionMatrix(cfg.model.num_classes)
    mean = np.asarray(cfg.aug.mean, dtype=np.float32).reshape(1, 3, 1, 1)
    for i in range(len(dataset)):
        s = dataset.load(i)
        x = Tensor(s.image.data - mean)
        arts = network.network_forward(x, store, cfg.model, mode="infer")
        h, w = s.label.shape
        pred = network.predict_full_res(arts.main_logits, h, w)
        cm.update(pred[0], s.label, ignore_index=cfg.model.ignore_index)
    return miou(cm)
