"""Training harness: warmup schedule, Adam, synthetic CTC task, seed sweeps."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import RunConfig, SyntheticTaskSpec
from .ctc import ctc_greedy_decode, ctc_log_probs, ctc_loss, init_ctc_head, token_error_rate, CtcHead
from .encoders import EncoderParams, encoder_forward, init_encoder, spec_augment
from .nn import named_parameters, save_state

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# learning-rate schedule


@dataclasses.dataclass(frozen=True)
class WarmupSchedule:
    peak_lr: float
    warmup_steps: int

    def __post_init__(self):
        if self.peak_lr < 0:
            raise ValueError("peak_lr must be non-negative")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be a positive integer")


def lr_at(schedule: WarmupSchedule, step: int) -> float:
    """Linear warmup to ``peak_lr`` at ``warmup_steps``, then inverse-sqrt decay."""
    if step < 1:
        raise ValueError("steps are counted from 1")
    w = schedule.warmup_steps
    return schedule.peak_lr * min(step / w, math.sqrt(w / step))


# ---------------------------------------------------------------------------
# Adam


@dataclasses.dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    weight_decay: float = 0.0


def init_adam(params: list[ad.Tensor], beta1=0.9, beta2=0.98, eps=1e-9, weight_decay=0.0) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p.data) for p in params],
        v=[np.zeros_like(p.data) for p in params],
        beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay,
    )


def adam_step(params: list[ad.Tensor], grads: list[np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float | None) -> float:
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if max_norm is not None and math.isfinite(total) and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for g in grads:
            g *= factor
    return total


# ---------------------------------------------------------------------------
# synthetic data


@dataclasses.dataclass
class Batch:
    feats: np.ndarray  # B x T x F
    feat_lengths: np.ndarray
    labels: np.ndarray  # B x L, zero padded
    label_lengths: np.ndarray

    def label_lists(self) -> list[list[int]]:
        return [list(map(int, row[:n])) for row, n in zip(self.labels, self.label_lengths)]


def make_templates(spec: SyntheticTaskSpec) -> np.ndarray:
    """One Gaussian feature vector per token (row 0 unused), pairwise well separated."""
    rng = np.random.default_rng(spec.template_seed)
    for _ in range(1000):
        t = rng.normal(scale=spec.template_scale, size=(spec.vocab_size, spec.feat_dim))
        dist = np.linalg.norm(t[:, None] - t[None, :], axis=-1)
        np.fill_diagonal(dist, np.inf)
        if dist.min() >= spec.min_template_distance:
            return np.vstack([np.zeros((1, spec.feat_dim)), t])
    raise ValueError("could not draw templates with the requested minimum distance")


def _pad_batch(feat_list, label_list) -> Batch:
    B = len(feat_list)
    F = feat_list[0].shape[1]
    T = max(f.shape[0] for f in feat_list)
    L = max(max((len(lab) for lab in label_list), default=0), 1)
    feats = np.zeros((B, T, F))
    labels = np.zeros((B, L), dtype=np.int64)
    for b, (f, lab) in enumerate(zip(feat_list, label_list)):
        feats[b, : f.shape[0]] = f
        labels[b, : len(lab)] = lab
    return Batch(
        feats=feats,
        feat_lengths=np.array([f.shape[0] for f in feat_list]),
        labels=labels,
        label_lengths=np.array([len(lab) for lab in label_list]),
    )


def _gen_utterances(spec: SyntheticTaskSpec, rng: np.random.Generator, n: int, templates=None):
    templates = make_templates(spec) if templates is None else templates
    feats, labels = [], []
    for _ in range(n):
        L = int(rng.integers(spec.min_label_len, spec.max_label_len + 1))
        tokens = rng.integers(1, spec.vocab_size + 1, size=L)
        durations = rng.integers(spec.min_frames_per_token, spec.max_frames_per_token + 1, size=L)
        frames = np.repeat(templates[tokens], durations, axis=0)
        if spec.noise_std:
            frames = frames + rng.normal(scale=spec.noise_std, size=frames.shape)
        feats.append(frames)
        labels.append(tokens.tolist())
    return feats, labels


def gen_synthetic_batch(spec: SyntheticTaskSpec, rng: np.random.Generator, n: int = 8) -> Batch:
    """Draw ``n`` utterances: per token, a random number of noisy copies of its template."""
    return _pad_batch(*_gen_utterances(spec, rng, n))


@dataclasses.dataclass
class Dataset:
    feats: list[np.ndarray]
    labels: list[list[int]]

    def __len__(self):
        return len(self.feats)

    def batch(self, indices) -> Batch:
        indices = list(indices)
        return _pad_batch([self.feats[i] for i in indices], [self.labels[i] for i in indices])

    def batches(self, batch_frames: int) -> list[Batch]:
        """Length-sorted buckets whose padded size stays within ``batch_frames``."""
        order = sorted(range(len(self)), key=lambda i: (self.feats[i].shape[0], i))
        groups, current, longest = [], [], 0
        for i in order:
            n = self.feats[i].shape[0]
            if current and max(longest, n) * (len(current) + 1) > batch_frames:
                groups.append(current)
                current, longest = [], 0
            current.append(i)
            longest = max(longest, n)
        if current:
            groups.append(current)
        return [_pad_batch([self.feats[i] for i in g], [self.labels[i] for i in g]) for g in groups]


def make_datasets(spec: SyntheticTaskSpec) -> tuple[Dataset, Dataset]:
    templates = make_templates(spec)
    train = Dataset(*_gen_utterances(spec, np.random.default_rng(spec.train_seed), spec.n_train, templates))
    valid = Dataset(*_gen_utterances(spec, np.random.default_rng(spec.valid_seed), spec.n_valid, templates))
    return train, valid


# ---------------------------------------------------------------------------
# model


@dataclasses.dataclass
class AsrModel:
    encoder: EncoderParams
    head: CtcHead


def init_model(cfg: RunConfig, seed: int | None = None) -> AsrModel:
    rng = np.random.default_rng(cfg.train.seed if seed is None else seed)
    dtype = np.dtype(cfg.train.dtype)
    return AsrModel(
        encoder=init_encoder(rng, cfg.model, dtype=dtype),
        head=init_ctc_head(rng, cfg.model.d, cfg.task.vocab_size, dtype=dtype),
    )


def model_log_probs(model: AsrModel, cfg: RunConfig, feats, lengths, mode="eval", rng=None):
    feats = ad.Tensor(np.asarray(ad.as_tensor(feats).data, dtype=cfg.train.dtype))
    enc, out_lengths = encoder_forward(feats, lengths, model.encoder, cfg.model, mode, rng)
    return ctc_log_probs(enc, model.head), out_lengths


def evaluate(model: AsrModel, cfg: RunConfig, batches: list[Batch]) -> tuple[float, float]:
    """Utterance-weighted mean CTC loss and token error rate, eval mode."""
    total, count, refs, hyps = 0.0, 0, [], []
    with ad.no_grad():
        for batch in batches:
            lp, lengths = model_log_probs(model, cfg, batch.feats, batch.feat_lengths, "eval")
            loss = ctc_loss(lp, batch.labels, lengths, batch.label_lengths).item()
            n = len(batch.feat_lengths)
            total += loss * n
            count += n
            refs += batch.label_lists()
            hyps += ctc_greedy_decode(lp, lengths)
    return total / max(count, 1), token_error_rate(refs, hyps)


# ---------------------------------------------------------------------------
# training


@dataclasses.dataclass
class RunRecord:
    run_id: str
    seed: int
    config_digest: str
    steps: list[dict] = dataclasses.field(default_factory=list)
    epochs: list[dict] = dataclasses.field(default_factory=list)
    initial_val_loss: float | None = None
    initial_val_ter: float | None = None
    diverged: bool = False
    divergence_reason: str | None = None
    wall_time: float = 0.0

    @property
    def final_val_loss(self) -> float | None:
        return self.epochs[-1]["val_loss"] if self.epochs else self.initial_val_loss

    @property
    def final_ter(self) -> float | None:
        return self.epochs[-1]["val_ter"] if self.epochs else self.initial_val_ter

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["final_val_loss"] = self.final_val_loss
        out["final_ter"] = self.final_ter
        return out


def is_diverged(val_loss: float, initial: float | None, factor: float) -> bool:
    if not math.isfinite(val_loss):
        return True
    return initial is not None and math.isfinite(initial) and val_loss > factor * initial


def write_metrics_csv(record: RunRecord, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "loss"])
        for row in record.steps:
            writer.writerow([row["step"], repr(row["lr"]), repr(row["loss"])])


def train(cfg: RunConfig, out_dir=None, run_id: str | None = None, plot: bool = True, data=None) -> RunRecord:
    """Train encoder + CTC head on the synthetic task; never raises on divergence."""
    started = time.perf_counter()
    ts = cfg.train
    record = RunRecord(run_id=run_id or f"{cfg.model.kind}-seed{ts.seed}", seed=ts.seed, config_digest=cfg.digest())
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    train_set, valid_set = data if data is not None else make_datasets(cfg.task)
    train_batches = train_set.batches(ts.batch_frames)
    valid_batches = valid_set.batches(ts.batch_frames)

    model = init_model(cfg)
    names, params = zip(*named_parameters(model))
    params = list(params)
    state = init_adam(params, ts.beta1, ts.beta2, ts.adam_eps, ts.weight_decay)
    schedule = WarmupSchedule(ts.peak_lr, ts.warmup_steps)
    rng = np.random.default_rng([ts.seed, 1])

    record.initial_val_loss, record.initial_val_ter = evaluate(model, cfg, valid_batches)
    best = math.inf
    step = 0
    for epoch in range(1, ts.epochs + 1):
        epoch_losses = []
        for bi in rng.permutation(len(train_batches)):
            batch = train_batches[bi]
            step += 1
            lr = lr_at(schedule, step)
            feats = spec_augment(batch.feats, cfg.specaug, rng, batch.feat_lengths)
            ad.reset_tape()
            lp, lengths = model_log_probs(model, cfg, feats, batch.feat_lengths, "train", rng)
            loss = ctc_loss(lp, batch.labels, lengths, batch.label_lengths)
            value = loss.item()
            record.steps.append({"step": step, "lr": lr, "loss": value})
            if not math.isfinite(value):
                record.diverged, record.divergence_reason = True, f"non-finite training loss at step {step}"
                break
            for p in params:
                p.grad = None
            ad.backward(loss)
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            norm = clip_by_global_norm(grads, ts.clip_norm)
            if not math.isfinite(norm):
                record.diverged, record.divergence_reason = True, f"non-finite gradient at step {step}"
                break
            adam_step(params, grads, state, lr)
            epoch_losses.append(value)
        ad.reset_tape()
        if record.diverged:
            break

        val_loss, val_ter = evaluate(model, cfg, valid_batches)
        record.epochs.append(
            {"epoch": epoch, "train_loss": float(np.mean(epoch_losses)) if epoch_losses else None,
             "val_loss": val_loss, "val_ter": val_ter}
        )
        logger.info("%s epoch %d  train %.4f  val %.4f  ter %.4f", record.run_id, epoch,
                    record.epochs[-1]["train_loss"] or float("nan"), val_loss, val_ter)
        if is_diverged(val_loss, record.initial_val_loss, ts.divergence_factor):
            record.diverged = True
            record.divergence_reason = f"validation loss {val_loss:.4g} at epoch {epoch}"
            break
        if out is not None and val_loss < best:
            best = val_loss
            save_state(model, out / "checkpoint")

    record.wall_time = time.perf_counter() - started
    if out is not None:
        (out / "run.json").write_text(json.dumps(record.to_dict(), indent=1))
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
        write_metrics_csv(record, out / "metrics.csv")
        if plot and record.steps:
            from .plotting import plot_training

            plot_training(record, out / "training.png")
    return record


# ---------------------------------------------------------------------------
# stability sweeps


SUMMARY_FIELDS = ["arch", "peak_lr", "seed", "diverged", "final_val_loss", "final_ter"]


def _run_one(job):
    cfg, out_dir, run_id = job
    rec = train(cfg, out_dir, run_id=run_id, plot=False)
    return rec.to_dict()


def _workers() -> int:
    raw = os.environ.get("BRANCHKIT_THREADS")
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"BRANCHKIT_THREADS must be an integer, got {raw!r}") from None


def stability_experiment(
    configs: dict[str, RunConfig],
    peak_lrs,
    n_seeds: int,
    out_dir,
    first_seed: int = 0,
    plot: bool = True,
) -> dict:
    """Train ``n_seeds`` runs for every (architecture, peak lr) cell.

    Writes ``summary.csv`` and per-run directories under ``out_dir``; returns
    the per-run rows, per-cell divergence counts and validation curves.
    """
    if n_seeds < 2:
        raise ValueError("a stability sweep needs at least two seeds")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs, keys = [], []
    for arch in sorted(configs):
        for lr in peak_lrs:
            for seed in range(first_seed, first_seed + n_seeds):
                cfg = configs[arch].with_train(peak_lr=float(lr), seed=seed)
                run_id = f"{arch}-lr{lr:g}-seed{seed}"
                jobs.append((cfg, out / run_id, run_id))
                keys.append((arch, float(lr), seed))

    workers = _workers()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(job) for job in jobs]

    rows, curves = [], {}
    for (arch, lr, seed), rec in zip(keys, results):
        rows.append({
            "arch": arch, "peak_lr": lr, "seed": seed, "diverged": rec["diverged"],
            "final_val_loss": rec["final_val_loss"], "final_ter": rec["final_ter"],
        })
        curves.setdefault((arch, lr), []).append(
            [rec["initial_val_loss"]] + [e["val_loss"] for e in rec["epochs"]] if not rec["diverged"] else None
        )
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)

    cells = {}
    for row in rows:
        cell = cells.setdefault((row["arch"], row["peak_lr"]), {"runs": 0, "diverged": 0})
        cell["runs"] += 1
        cell["diverged"] += int(row["diverged"])
    if plot:
        from .plotting import plot_stability

        plot_stability(curves, out / "val_curves.png")
    return {"rows": rows, "cells": cells, "curves": curves}


def format_stability_table(cells: dict) -> str:
    lines = [f"{'arch':<16} {'peak_lr':>10} {'runs':>5} {'diverged':>9}"]
    for (arch, lr), cell in sorted(cells.items()):
        lines.append(f"{arch:<16} {lr:>10.3g} {cell['runs']:>5d} {cell['diverged']:>9d}")
    return "\n".join(lines)
