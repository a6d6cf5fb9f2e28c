"""Training loop: MixMatch + ensemble AET/consistency regularizers + EMA teacher."""
from __future__ import annotations

import contextlib
import dataclasses
import hashlib
import json
import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import checkpoint
from .data import DatasetSplit, LabeledSet, augment_batch
from .losses import (
    LossBreakdown,
    aet_loss,
    consistency_loss,
    mixmatch_batch,
    ssl_loss,
    total_loss,
)
from .model import Classifier, ModelConfig, ModelState, encode, frozen_running_stats, init_model, predict, torch_dtype
from .transforms import FAMILIES, Kind, ccbs_batch, sample_ccbs, sample_spatial, target_vector, warp_batch

log = logging.getLogger(__name__)

SPATIAL_KINDS = (Kind.PROJECTIVE, Kind.AFFINE, Kind.SIMILARITY, Kind.EUCLIDEAN)
RNG_STREAMS = ("data", "mix", "transform")


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 30
    steps_per_epoch: int = 0  # 0: one pass over the larger of the two pools
    ema_alpha: float = 0.999
    ema_warmup: bool = True
    lr_enc_cls: float = 0.002
    lr_dec_init: float = 0.1
    lr_dec_final: float = 1e-4
    momentum_dec: float = 0.9
    weight_decay_dec: float = 5e-4
    lambda_k: tuple[float, ...] = (1.0, 0.75, 0.5, 0.2, 0.05)
    gamma: float = 0.2
    family_mask: tuple[int, ...] = (1, 1, 1, 1, 1)  # 0 drops a family from both AET and CL
    lambda_u_max: float = 25.0
    ramp_steps: int = 0  # 0: 10% of total steps
    T: float = 0.5
    K: int = 2
    beta_param: float = 0.75
    max_shift: int = 4
    aet_on_labeled: bool = False
    skip_inactive: bool = True
    regularizer_bn_stats: bool = False  # let transformed batches update batch-norm running averages
    seed: int = 0
    eval_every: int = 1  # epochs
    checkpoint_every: int = 1  # epochs; 0 disables periodic checkpoints
    last_k_report: int = 20
    widths: tuple[int, ...] = (16, 32, 64, 64)
    dtype: str = "float32"
    workers: int = 0

    def validate(self) -> None:
        rates = [self.lr_enc_cls, self.lr_dec_init, self.lr_dec_final, self.T, self.beta_param]
        if any(r <= 0 for r in rates):
            raise ValueError("learning rates, temperature and Beta parameter must be positive")
        if not 0 < self.ema_alpha < 1:
            raise ValueError("ema_alpha must lie in (0, 1)")
        if len(self.lambda_k) != len(FAMILIES):
            raise ValueError(f"lambda_k needs {len(FAMILIES)} entries")
        if len(self.family_mask) != len(FAMILIES) or any(m not in (0, 1) for m in self.family_mask):
            raise ValueError(f"family_mask needs {len(FAMILIES)} entries of 0 or 1")
        if self.batch_size < 1 or self.epochs < 0 or self.K < 1:
            raise ValueError("batch_size and K must be >= 1, epochs >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if len(self.widths) != 4:
            raise ValueError("widths needs 4 entries")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda_k"] = list(self.lambda_k)
        d["widths"] = list(self.widths)
        d["family_mask"] = list(self.family_mask)
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    l_labeled: float | None = None
    l_unlabeled: float | None = None
    l_aet: list[float] | None = None
    l_cl: list[float] | None = None
    weights_applied: dict | None = None
    total: float | None = None
    student_error: float | None = None
    teacher_error: float | None = None
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# --------------------------------------------------------------------------
# Small pieces


def ramp_weight(step: int, max_weight: float, ramp_steps: int) -> float:
    if ramp_steps <= 0:
        raise ValueError("ramp_steps must be positive")
    return max_weight * min(1.0, step / ramp_steps)


def cosine_lr(step: int, total_steps: int, lr_init: float, lr_final: float) -> float:
    frac = min(1.0, step / max(1, total_steps))
    return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + math.cos(math.pi * frac))


@torch.no_grad()
def ema_update(teacher: torch.nn.Module, student: torch.nn.Module, alpha: float) -> torch.nn.Module:
    """teacher <- alpha * teacher + (1 - alpha) * student; buffers are copied."""
    t_params, s_params = list(teacher.parameters()), list(student.parameters())
    if len(t_params) != len(s_params):
        raise ValueError("teacher and student differ in structure")
    for t, s in zip(t_params, s_params):
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch {tuple(t.shape)} vs {tuple(s.shape)}")
        t.mul_(alpha).add_(s, alpha=1.0 - alpha)
    for t, s in zip(teacher.buffers(), student.buffers()):
        t.copy_(s)
    return teacher


def effective_ema_alpha(cfg: TrainConfig, step: int) -> float:
    """Configured alpha, optionally capped at 1 - 1/(step + 1) early in training."""
    if not cfg.ema_warmup:
        return cfg.ema_alpha
    return min(cfg.ema_alpha, 1.0 - 1.0 / (step + 1))


def to_tensor(images: np.ndarray, dtype: torch.dtype) -> torch.Tensor:
    """(N, H, W, C) array -> (N, C, H, W) tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.asarray(images).transpose(0, 3, 1, 2))).to(dtype)


def error_rate(predictions: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise ValueError("empty evaluation set")
    return float(np.mean(np.asarray(predictions) != np.asarray(labels)))


class ErrorTracker:
    """Running mean over the last ``k`` evaluations."""

    def __init__(self, k: int = 20, history=()):
        self.history: deque[float] = deque(history, maxlen=k)

    def add(self, err: float) -> None:
        self.history.append(err)

    @property
    def mean(self) -> float:
        return float(np.mean(self.history)) if self.history else float("nan")


def evaluate(
    state: ModelState,
    test: LabeledSet,
    use_teacher: bool = True,
    tracker: ErrorTracker | None = None,
    images: torch.Tensor | None = None,
) -> float:
    """Misclassification rate of the teacher (default) or the student."""
    if len(test) == 0:
        raise ValueError("empty evaluation set")
    model = state.teacher if use_teacher else state.student
    if images is None:
        dtype = next(model.parameters()).dtype
        images = to_tensor(test.images, dtype)
    err = error_rate(predict(model, images), test.labels)
    if tracker is not None:
        tracker.add(err)
    return err


# --------------------------------------------------------------------------
# Training steps


def make_rngs(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(RNG_STREAMS))
    return {name: np.random.Generator(np.random.PCG64(c)) for name, c in zip(RNG_STREAMS, children)}


def new_state(cfg: TrainConfig, split: DatasetSplit) -> ModelState:
    cfg.validate()
    h, w, c = split.image_shape
    mcfg = ModelConfig(in_channels=c, num_classes=split.num_classes, widths=tuple(cfg.widths), dtype=cfg.dtype)
    # Model init draws from its own stream so data/transform streams stay aligned.
    init_seed = int(np.random.SeedSequence([cfg.seed, 1]).generate_state(1)[0])
    state = init_model(
        mcfg,
        init_seed,
        mean=split.metadata.get("mean"),
        std=split.metadata.get("std"),
        lr_main=cfg.lr_enc_cls,
        lr_dec=cfg.lr_dec_init,
        weight_decay_dec=cfg.weight_decay_dec,
    )
    for g in state.opt_dec.param_groups:
        g["momentum"] = cfg.momentum_dec
    state.rngs = make_rngs(cfg.seed)
    return state


def sample_family(k: int, images: torch.Tensor, rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-image transforms of family ``k``: (transformed images, normalized targets)."""
    n = len(images)
    if FAMILIES[k] == "ccbs":
        ts = [sample_ccbs(rng) for _ in range(n)]
        out = ccbs_batch(images, np.stack([t.params for t in ts]))
    else:
        ts = [sample_spatial(SPATIAL_KINDS[k], rng) for _ in range(n)]
        out = warp_batch(images, np.stack([t.matrix for t in ts]))
    targets = torch.as_tensor(np.stack([target_vector(t) for t in ts]), dtype=images.dtype)
    return out, targets


def _regularizer_terms(state, cfg, src, q, active):
    """AET and CL terms for each family; inactive families report 0."""
    zero = torch.zeros((), dtype=src.dtype)
    batches, targets, fams = [], [], []
    for k in range(len(FAMILIES)):
        if active[k]:
            tk, tgt = sample_family(k, src, state.rngs["transform"])
            batches.append(tk)
            targets.append(tgt)
            fams.append(k)
    l_aet, l_cl = [zero] * len(FAMILIES), [zero] * len(FAMILIES)
    if not fams:
        return l_aet, l_cl
    net = state.net
    # Transformed images are off the test distribution: keep them out of the running averages.
    ctx = contextlib.nullcontext() if cfg.regularizer_bn_stats else frozen_running_stats(net)
    with ctx:
        return _regularizer_forward(net, src, q, batches, targets, fams, l_aet, l_cl)


def _regularizer_forward(net, src, q, batches, targets, fams, l_aet, l_cl):
    n_src = len(src)
    feats = encode(net, torch.cat([src, *batches]))
    f_orig = feats[:n_src]
    f_trans = feats[n_src:]
    # CL on the unlabeled part only; q covers the first len(q) rows of src.
    n_u = len(q)
    cl_in = torch.cat([f_trans[i * n_src : i * n_src + n_u] for i in range(len(fams))])
    probs = torch.softmax(net.classifier(cl_in), dim=1)
    for i, k in enumerate(fams):
        fk = f_trans[i * n_src : (i + 1) * n_src]
        pred = net.decoders[k](torch.cat([f_orig, fk], dim=1))
        l_aet[k] = aet_loss(pred, targets[i])
        l_cl[k] = consistency_loss(q, probs[i * n_u : (i + 1) * n_u])
    return l_aet, l_cl


def _ssl_forward(state: ModelState, cfg: TrainConfig, x, y, u, num_classes, q=None):
    student = state.student
    state.net.train()
    aug = lambda t, rng: augment_batch(t, rng, cfg.max_shift)  # noqa: E731
    mx, mu, q = mixmatch_batch(
        student, x, y, u, num_classes, state.rngs["mix"], T=cfg.T, K=cfg.K, alpha=cfg.beta_param, augment=aug, q=q
    )
    logits = student(torch.cat([mx.inputs, mu.inputs]))
    l_x, l_u = ssl_loss(logits[: len(x)], mx.targets, logits[len(x) :], mu.targets)
    return l_x, l_u, q


def _ramp(cfg: TrainConfig, total_steps: int) -> int:
    return cfg.ramp_steps if cfg.ramp_steps > 0 else max(1, round(0.1 * total_steps))


def effective_weights(cfg: TrainConfig, step: int, total_steps: int) -> tuple[float, list[float], float]:
    r = _ramp(cfg, total_steps)
    return (
        ramp_weight(step, cfg.lambda_u_max, r),
        [ramp_weight(step, w, r) for w in cfg.lambda_k],
        ramp_weight(step, cfg.gamma, r),
    )


def _finish_step(state: ModelState, cfg: TrainConfig, loss: torch.Tensor, dec_lr: float | None) -> None:
    state.opt_main.zero_grad(set_to_none=True)
    state.opt_dec.zero_grad(set_to_none=True)
    loss.backward()
    state.opt_main.step()
    if dec_lr is not None:
        for g in state.opt_dec.param_groups:
            g["lr"] = dec_lr
        state.opt_dec.step()
    state.step += 1
    ema_update(state.teacher, state.student, effective_ema_alpha(cfg, state.step))


def compute_loss(
    state: ModelState,
    x: torch.Tensor,
    y: torch.Tensor,
    u: torch.Tensor,
    cfg: TrainConfig,
    num_classes: int,
    total_steps: int,
    q: torch.Tensor | None = None,
) -> tuple[torch.Tensor, LossBreakdown, torch.Tensor]:
    """Overall objective for one batch: SSL loss plus weighted AET and CL terms.

    Consumes the state's ``mix`` and ``transform`` streams.  ``q`` replaces
    the guessed labels (they are constants of the objective either way).
    """
    if len(x) != len(u):
        raise ValueError("labeled and unlabeled batches must have the same size")
    lam_u, lam_k, gamma = effective_weights(cfg, state.step, total_steps)
    l_x, l_u, q = _ssl_forward(state, cfg, x, y, u, num_classes, q)

    active = [
        bool(cfg.family_mask[k]) and (not cfg.skip_inactive or cfg.lambda_k[k] > 0 or cfg.gamma > 0)
        for k in range(len(FAMILIES))
    ]
    src = torch.cat([u, x]) if cfg.aet_on_labeled else u
    l_aet, l_cl = _regularizer_terms(state, cfg, src, q, active)
    loss, breakdown = total_loss(l_x, l_u, l_aet, l_cl, lam_u, lam_k, gamma)
    return loss, breakdown, q


def train_step(
    state: ModelState,
    x: torch.Tensor,
    y: torch.Tensor,
    u: torch.Tensor,
    cfg: TrainConfig,
    num_classes: int,
    total_steps: int,
    epoch: int = 0,
) -> tuple[ModelState, MetricsRecord]:
    """One joint update of encoder, classifier and decoders, then the EMA teacher."""
    t0 = time.perf_counter()
    loss, breakdown, _ = compute_loss(state, x, y, u, cfg, num_classes, total_steps)
    dec_lr = cosine_lr(state.step, total_steps, cfg.lr_dec_init, cfg.lr_dec_final)
    _finish_step(state, cfg, loss, dec_lr)
    rec = MetricsRecord(step=state.step, epoch=epoch, **breakdown.to_dict())
    rec.wall_time = time.perf_counter() - t0
    return state, rec


def mixmatch_step(
    state: ModelState,
    x: torch.Tensor,
    y: torch.Tensor,
    u: torch.Tensor,
    cfg: TrainConfig,
    num_classes: int,
    total_steps: int,
) -> ModelState:
    """Plain MixMatch update (no ensemble terms, decoders untouched)."""
    r = _ramp(cfg, total_steps)
    lam_u = ramp_weight(state.step, cfg.lambda_u_max, r)
    l_x, l_u, _ = _ssl_forward(state, cfg, x, y, u, num_classes)
    _finish_step(state, cfg, l_x + lam_u * l_u, None)
    return state


# --------------------------------------------------------------------------
# Full training run


@dataclass
class RunResult:
    state: ModelState
    log: list[MetricsRecord] = field(default_factory=list)
    evals: list[MetricsRecord] = field(default_factory=list)
    tracker: ErrorTracker | None = None

    @property
    def final_error(self) -> float:
        return self.tracker.mean if self.tracker is not None else float("nan")


def total_steps_for(cfg: TrainConfig, split: DatasetSplit) -> tuple[int, int]:
    pool = max(len(split.unlabeled), len(split.labeled))
    spe = cfg.steps_per_epoch or max(1, math.ceil(pool / cfg.batch_size))
    return spe, spe * cfg.epochs


def _draw_batch(rng: np.random.Generator, n: int, size: int) -> np.ndarray:
    return rng.choice(n, size=size, replace=n < size)


def train(
    cfg: TrainConfig,
    split: DatasetSplit,
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
    stop_after_epoch: int | None = None,
    step_fn: Callable | None = None,
) -> RunResult:
    """Run ``cfg.epochs`` epochs of training on ``split``.

    With ``out_dir`` the run writes ``config.json``, ``metrics.jsonl`` (one
    record per step), ``evals.jsonl`` (one per evaluation) and
    ``ckpt_epoch<N>.zip`` checkpoints.  ``stop_after_epoch`` ends the call
    early (as if interrupted); a later call with ``resume_from`` continues it.
    """
    cfg.validate()
    dtype = torch_dtype(cfg.dtype)
    if cfg.workers == 0:
        torch.set_num_threads(1)
    state = new_state(cfg, split)
    tracker = ErrorTracker(cfg.last_k_report)
    start_epoch = 0
    result = RunResult(state, tracker=tracker)
    out = Path(out_dir) if out_dir is not None else None

    if resume_from is not None:
        meta = checkpoint.load_into(resume_from, state, cfg.hash())
        start_epoch = int(meta["epoch"])
        tracker.history.extend(meta["tracker"])
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
        if resume_from is None:
            for name in ("metrics.jsonl", "evals.jsonl"):
                (out / name).write_text("")
            checkpoint.save(out / "ckpt_epoch0.zip", state, cfg.hash(), {"epoch": 0, "tracker": []})

    spe, total = total_steps_for(cfg, split)
    lab_x = to_tensor(split.labeled.images, dtype)
    lab_y = torch.as_tensor(split.labeled.labels)
    unl = to_tensor(split.unlabeled.images, dtype) if len(split.unlabeled) else lab_x
    test_x = to_tensor(split.test.images, dtype)
    step_fn = step_fn or train_step

    for epoch in range(start_epoch, cfg.epochs):
        t_epoch = time.perf_counter()
        records = []
        for _ in range(spe):
            rng = state.rngs["data"]
            li = torch.as_tensor(_draw_batch(rng, len(lab_x), cfg.batch_size))
            ui = torch.as_tensor(_draw_batch(rng, len(unl), cfg.batch_size))
            state, rec = step_fn(state, lab_x[li], lab_y[li], unl[ui], cfg, split.num_classes, total, epoch + 1)
            records.append(rec)
        result.log.extend(records)
        done = epoch + 1
        ev = None
        if cfg.eval_every and done % cfg.eval_every == 0:
            s_err = evaluate(state, split.test, use_teacher=False, images=test_x)
            t_err = evaluate(state, split.test, use_teacher=True, tracker=tracker, images=test_x)
            ev = MetricsRecord(step=state.step, epoch=done, student_error=s_err, teacher_error=t_err)
            ev.wall_time = time.perf_counter() - t_epoch
            result.evals.append(ev)
            log.info("epoch %d step %d student %.4f teacher %.4f", done, state.step, s_err, t_err)
        if out is not None:
            with open(out / "metrics.jsonl", "a") as f:
                for r in records:
                    f.write(json.dumps(r.to_dict()) + "\n")
            if ev is not None:
                with open(out / "evals.jsonl", "a") as f:
                    f.write(json.dumps(ev.to_dict()) + "\n")
            last = done == cfg.epochs
            if last or (cfg.checkpoint_every and done % cfg.checkpoint_every == 0):
                checkpoint.save(
                    out / f"ckpt_epoch{done}.zip",
                    state,
                    cfg.hash(),
                    {"epoch": done, "tracker": list(tracker.history)},
                )
        if stop_after_epoch is not None and done >= stop_after_epoch:
            break
    return result
