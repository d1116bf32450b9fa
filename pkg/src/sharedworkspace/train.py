"""Minibatch training: Adam with optional cosine annealing, JSON-lines
metrics, best-by-test-accuracy checkpointing, and exact resume.

Every run is reproducible from (config, seed): datasets regenerate from
recorded seeds, the shuffle and dropout streams are keyed by (seed, epoch),
and resuming from the rolling checkpoint replays the remaining epochs
bit-for-bit.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ModelConfig, validate
from .errors import ConfigError
from .models import RimsModel, build_model, patchify
from .optim import Adam, NumericError, cosine_lr
from .serialization import MetricsWriter, load_checkpoint, save_checkpoint
from .tasks import (copy_loss_mask, gen_copy, gen_sort_of_clevr, gen_triangles,
                    load_dataset, save_dataset)

# Offset separating the test-set seed stream from the train-set stream.
TEST_SEED_OFFSET = 100_003


def resolve_task_fields(cfg: ModelConfig) -> ModelConfig:
    """Pin the config fields the task dictates (classes, channels)."""
    if cfg.task == "triangles":
        cfg = dataclasses.replace(cfg, n_classes=2, n_channels=1)
    elif cfg.task == "soc":
        cfg = dataclasses.replace(cfg, n_classes=12, n_channels=3)
    if cfg.host == "rims_sw" and cfg.task != "triangles":
        raise ConfigError("the recurrent-specialist host is bound to the triangles task")
    if cfg.host == "tims_sw" and cfg.task != "copy":
        raise ConfigError("the mechanism-partitioned host is bound to the copy task")
    return validate(cfg)


def _dataset_name(cfg: ModelConfig, n: int, seed: int) -> str:
    if cfg.task == "triangles":
        tag = f"is{cfg.image_size}"
    elif cfg.task == "soc":
        tag = f"is{cfg.image_size}"
    else:
        tag = f"v{cfg.vocab_size}-l{cfg.copy_len}"
    return f"{cfg.task}-{tag}-n{n}-seed{seed}.swds"


def generate_dataset(cfg: ModelConfig, n: int, seed: int) -> dict:
    if cfg.task == "triangles":
        return gen_triangles(n, image_size=cfg.image_size, seed=seed)
    if cfg.task == "soc":
        return gen_sort_of_clevr(n, seed=seed, image_size=cfg.image_size)
    return gen_copy(n, vocab=cfg.vocab_size, seq_len=2 * cfg.copy_len, seed=seed)


def dataset_pair(cfg: ModelConfig, data_root=None) -> tuple[dict, dict]:
    """Train/test datasets for the configured task, cached when a data root
    is given (files are keyed by task parameters, size and seed)."""
    def make(n, seed):
        if data_root is None:
            return generate_dataset(cfg, n, seed)
        path = Path(data_root) / _dataset_name(cfg, n, seed)
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            save_dataset(path, generate_dataset(cfg, n, seed))
        return load_dataset(path)

    return make(cfg.train_n, cfg.seed), make(cfg.test_n, cfg.seed + TEST_SEED_OFFSET)


def n_examples(cfg: ModelConfig, data: dict) -> int:
    if cfg.task == "triangles":
        return len(data["labels"])
    if cfg.task == "soc":
        return data["questions"].shape[0] * data["questions"].shape[1]
    return len(data["tokens"])


def _batch_arrays(cfg: ModelConfig, data: dict, idx: np.ndarray) -> dict:
    if cfg.task == "triangles":
        return {"images": np.asarray(data["images"][idx]),
                "labels": np.asarray(data["labels"][idx])}
    if cfg.task == "soc":
        n_q = data["questions"].shape[1]
        s, q = idx // n_q, idx % n_q
        return {"images": np.asarray(data["images"][s]),
                "questions": np.asarray(data["questions"][s, q]),
                "answers": np.asarray(data["answers"][s, q])}
    return {"tokens": np.asarray(data["tokens"][idx])}


def masked_cross_entropy(logits: T.Tensor, targets: np.ndarray, mask: np.ndarray) -> T.Tensor:
    """Mean negative log-likelihood over the positions where mask is 1."""
    v = logits.shape[-1]
    lp = T.log_softmax(logits)
    flat = T.reshape(lp, (-1, v))
    picked = T.take(flat, (np.arange(flat.data.shape[0]), targets.reshape(-1)))
    w = np.broadcast_to(mask, targets.shape).reshape(-1).astype(flat.data.dtype)
    return T.mul(T.tsum(T.mul(picked, w)), -1.0 / max(float(w.sum()), 1.0))


def _vision_logits(model, cfg: ModelConfig, images, question, rng):
    if isinstance(model, RimsModel):
        # Feed the image as a sequence of patch rows: one time step per row
        # of patches, one input row per patch.
        side = cfg.image_size // cfg.patch_size
        p = patchify(np.asarray(images, dtype=model.dtype), cfg.patch_size)
        frames = p.reshape(p.shape[0], side, side, p.shape[-1])
        return model.forward(frames, rng=rng)
    return model.forward(images, question=question, rng=rng)


def batch_loss(model, cfg: ModelConfig, batch: dict, rng=None):
    """Loss tensor plus a per-unit correctness vector (units: examples for
    the classifiers, echo-region tokens for the copy task)."""
    if cfg.task == "copy":
        tokens = batch["tokens"]
        inp, tgt = tokens[:, :-1], tokens[:, 1:]
        logits = model.forward(inp, rng=rng)
        mask = copy_loss_mask(tgt.shape[1])
        loss = masked_cross_entropy(logits, tgt, mask)
        pred = logits.data.argmax(axis=-1)
        correct = (pred == tgt)[:, mask == 1].reshape(-1)
        return loss, correct
    if cfg.task == "soc":
        targets = batch["answers"]
        logits = _vision_logits(model, cfg, batch["images"], batch["questions"], rng)
    else:
        targets = batch["labels"]
        logits = _vision_logits(model, cfg, batch["images"], None, rng)
    loss = T.cross_entropy(logits, targets)
    correct = logits.data.argmax(axis=-1) == targets
    return loss, correct


def evaluate(model, cfg: ModelConfig, data: dict, batch_size: int | None = None,
             max_examples: int | None = None) -> dict:
    """Test-mode loss/accuracy; for the scene task also the accuracy split
    into relational and non-relational questions."""
    batch_size = batch_size or cfg.batch_size
    n = n_examples(cfg, data)
    if max_examples is not None:
        n = min(n, max_examples)
    total_loss, n_units = 0.0, 0
    correct_all, rel_all = [], []
    for lo in range(0, n, batch_size):
        idx = np.arange(lo, min(lo + batch_size, n))
        batch = _batch_arrays(cfg, data, idx)
        loss, correct = batch_loss(model, cfg, batch, rng=None)
        total_loss += float(loss.data) * len(correct)
        n_units += len(correct)
        correct_all.append(correct)
        if cfg.task == "soc":
            rel_all.append(batch["questions"][:, 7] == 1)
    correct = np.concatenate(correct_all)
    out = {"loss": total_loss / n_units, "accuracy": float(correct.mean())}
    if cfg.task == "soc":
        rel = np.concatenate(rel_all)
        out["accuracy_relational"] = float(correct[rel].mean())
        out["accuracy_nonrelational"] = float(correct[~rel].mean())
    return out


# ---- checkpoint plumbing -----------------------------------------------------


def _checkpoint_tensors(params: dict, opt: Adam) -> dict:
    tensors = dict(params)
    for name in params:
        tensors[f"adam.m/{name}"] = opt.m[name]
        tensors[f"adam.v/{name}"] = opt.v[name]
    tensors["adam.step"] = np.array(opt.step_count, dtype=np.int64)
    return tensors


def _restore(params: dict, opt: Adam | None, tensors: dict) -> None:
    for name, p in params.items():
        p.data[...] = tensors[name]
    if opt is not None:
        for name in params:
            opt.m[name][...] = tensors[f"adam.m/{name}"]
            opt.v[name][...] = tensors[f"adam.v/{name}"]
        opt.step_count = int(np.asarray(tensors["adam.step"]).reshape(-1)[0])


def load_model(checkpoint_path, overrides: dict | None = None):
    """Rebuild the model recorded in a checkpoint; returns (model, config)."""
    tensors, meta = load_checkpoint(checkpoint_path)
    data = dict(meta["config"])
    if overrides:
        data.update(overrides)
    cfg = resolve_task_fields(validate(ModelConfig(**data)))
    model = build_model(cfg)
    _restore(model.parameters(), None, tensors)
    return model, cfg


# ---- training loop -----------------------------------------------------------


def run_training(cfg: ModelConfig, out_dir, data_root=None, resume: bool = False,
                 stop_epoch: int | None = None, log=None) -> dict:
    """Train to cfg.epochs, returning a summary with the per-epoch history.

    ``stop_epoch`` ends the run early (after that many total epochs) without
    shortening the learning-rate schedule; a later resume continues exactly
    where an uninterrupted run would have been.

    Writes metrics.jsonl (append-only), last.ckpt (rolling, every epoch) and
    best.ckpt (highest test accuracy) under ``out_dir``.  A non-finite loss
    raises NumericError; the rolling checkpoint of the last completed epoch
    stays on disk.
    """
    cfg = resolve_task_fields(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_d, test_d = dataset_pair(cfg, data_root)

    model = build_model(cfg)
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    meta_cfg = dataclasses.asdict(cfg)
    last_path, best_path = out / "last.ckpt", out / "best.ckpt"

    start_epoch, step, best_acc = 0, 0, -1.0
    if resume:
        if not last_path.exists():
            raise ConfigError(f"cannot resume: {last_path} does not exist")
        tensors, meta = load_checkpoint(last_path)
        # The epoch budget may be extended on resume; everything else must match.
        drop_epochs = lambda d: {k: v for k, v in d.items() if k != "epochs"}
        if drop_epochs(meta["config"]) != drop_epochs(meta_cfg):
            raise ConfigError("checkpoint config does not match the requested config")
        _restore(params, opt, tensors)
        start_epoch = meta["epoch"]
        step = meta["step"]
        best_acc = meta["best_test_accuracy"]
    else:
        save_checkpoint(last_path, _checkpoint_tensors(params, opt),
                        {"epoch": 0, "step": 0, "best_test_accuracy": best_acc,
                         "config": meta_cfg})

    n_train = n_examples(cfg, train_d)
    end_epoch = cfg.epochs if stop_epoch is None else min(cfg.epochs, stop_epoch)
    history = []
    with MetricsWriter(out / "metrics.jsonl") as metrics:
        for epoch in range(start_epoch, end_epoch):
            lr = cosine_lr(cfg.lr, epoch, cfg.epochs) if cfg.cosine else cfg.lr
            order = np.random.default_rng([cfg.seed, epoch]).permutation(n_train)
            drop_rng = (np.random.default_rng([cfg.seed, epoch, 1])
                        if cfg.dropout > 0 else None)
            run_loss, run_correct, run_units = 0.0, 0, 0
            for lo in range(0, n_train, cfg.batch_size):
                batch = _batch_arrays(cfg, train_d, order[lo:lo + cfg.batch_size])
                loss, correct = batch_loss(model, cfg, batch, rng=drop_rng)
                if not np.isfinite(loss.data):
                    raise NumericError(f"non-finite loss at epoch {epoch}, step {step}")
                opt.zero_grad()
                loss.backward()
                opt.step(lr)
                step += 1
                run_loss += float(loss.data) * len(correct)
                run_correct += int(correct.sum())
                run_units += len(correct)

            train_loss = run_loss / run_units
            train_acc = run_correct / run_units
            metrics.log(step, epoch, "train", train_loss, train_acc)
            ev = evaluate(model, cfg, test_d)
            metrics.log(step, epoch, "test", ev["loss"], ev["accuracy"])
            if "accuracy_relational" in ev:
                metrics.log(step, epoch, "test_relational", ev["loss"],
                            ev["accuracy_relational"])
                metrics.log(step, epoch, "test_nonrelational", ev["loss"],
                            ev["accuracy_nonrelational"])

            if ev["accuracy"] > best_acc:
                best_acc = ev["accuracy"]
                save_checkpoint(best_path, _checkpoint_tensors(params, opt),
                                {"epoch": epoch + 1, "step": step,
                                 "best_test_accuracy": best_acc, "config": meta_cfg})
            save_checkpoint(last_path, _checkpoint_tensors(params, opt),
                            {"epoch": epoch + 1, "step": step,
                             "best_test_accuracy": best_acc, "config": meta_cfg})

            record = {"epoch": epoch, "train_loss": train_loss,
                      "train_accuracy": train_acc, "test_loss": ev["loss"],
                      "test_accuracy": ev["accuracy"]}
            for key in ("accuracy_relational", "accuracy_nonrelational"):
                if key in ev:
                    record[f"test_{key}"] = ev[key]
            history.append(record)
            if log is not None:
                log(f"epoch {epoch:3d}  lr {lr:.2e}  "
                    f"train loss {train_loss:.4f} acc {train_acc:.4f}  "
                    f"test loss {ev['loss']:.4f} acc {ev['accuracy']:.4f}")

    return {
        "epochs_run": end_epoch - start_epoch,
        "best_test_accuracy": best_acc,
        "final_test_accuracy": history[-1]["test_accuracy"] if history else best_acc,
        "history": history,
        "metrics_path": str(out / "metrics.jsonl"),
        "checkpoints": {"last": str(last_path), "best": str(best_path)},
    }


def epochs_to_accuracy(history: list[dict], threshold: float,
                       key: str = "test_accuracy") -> int | None:
    """1-based epoch count until ``key`` first reaches ``threshold``."""
    for rec in history:
        if rec[key] >= threshold:
            return rec["epoch"] + 1
    return None
