"""Training loop and unlearning methods: retrain, fine-tune, reverse gradient,
SISA and contrastive unlearning."""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterator, Sequence, TextIO

import numpy as np

from . import autograd as ag
from .data import Batch, Sentence, TokenDataset, UnlearnRequest, collate, make_batches
from .evaluation import F1Score, evaluate_split
from .model import ModelCheckpoint, ModelConfig, classify, init_parameters
from .objectives import (LossBreakdown, build_contrast_pool, combined_objective,
                         dual_dropout_views, forward_logits, token_cross_entropy)
from .optim import AdamWState, adamw_update
from .rng import Rng

log = logging.getLogger(__name__)

METHODS = ("retrain", "finetune", "revgrad", "sisa", "deepcut")
BLOWUP_LOSS = 50.0
BUCKET = 8  # batches per length-sorting window


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    batch_size: int = 32
    epochs: int = 20
    lr: float = 1e-3
    warmup_steps: int = 200
    weight_decay: float = 0.01
    unlearn_epochs: int = 5
    unlearn_lr: float = 1e-3
    tau: float = 0.1
    gamma: float = 0.3
    forget_weight: float = 1.0
    forget_batch_size: int | None = None
    sisa_shards: int = 5
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    dropout_rate: float = 0.1
    selection: str = "composite"

    def validate(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.batch_size < 1 or (self.forget_batch_size is not None and self.forget_batch_size < 1):
            raise ValueError("batch sizes must be >= 1")
        if self.epochs < 0 or self.unlearn_epochs < 0:
            raise ValueError("epoch budgets must be non-negative")
        if self.lr < 0 or self.unlearn_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if self.selection not in ("composite", "dev", "last"):
            raise ValueError(f"unknown selection rule {self.selection!r}")
        if self.sisa_shards < 1:
            raise ValueError("sisa_shards must be >= 1")

    def as_dict(self) -> dict:
        return asdict(self)


def model_config(ds: TokenDataset, cfg: TrainConfig) -> ModelConfig:
    return ModelConfig(vocab_size=ds.vocab_size, max_len=ds.max_len, num_classes=ds.num_classes,
                       hidden_dim=cfg.hidden_dim, num_layers=cfg.num_layers,
                       num_heads=cfg.num_heads, dropout_rate=cfg.dropout_rate)


def default_forget_batch_size(cfg: TrainConfig, n_forget: int, n_train: int) -> int:
    if cfg.forget_batch_size is not None:
        return cfg.forget_batch_size
    return max(1, round(cfg.batch_size * n_forget / max(n_train, 1)))


# ---------------------------------------------------------------------------
# timing and evaluation hooks

class Stopwatch:
    """Monotonic clock that can be paused around excluded work."""

    def __init__(self):
        self.elapsed = 0.0
        self._start: float | None = None

    def start(self) -> "Stopwatch":
        self._start = time.perf_counter()
        return self

    def stop(self) -> float:
        if self._start is not None:
            self.elapsed += time.perf_counter() - self._start
            self._start = None
        return self.elapsed

    def paused(self):
        watch = self

        class _Pause:
            def __enter__(self):
                watch.stop()

            def __exit__(self, *exc):
                watch.start()
                return False

        return _Pause()


class Evaluator:
    """Scores checkpoints between epochs; timing excludes its calls."""

    def __init__(self, label_names: Sequence[str], batch_size: int = 64):
        self.label_names = list(label_names)
        self.batch_size = batch_size

    def __call__(self, model, sentences: Sequence[Sentence]) -> F1Score:
        return evaluate_split(model, sentences, self.label_names, self.batch_size)


@dataclass
class EpochRecord:
    epoch: int
    dev_f1: float
    forget_f1: float | None
    score: float
    digest: str
    mean_loss: float


@dataclass
class UnlearnOutcome:
    method: str
    model: object                # ModelCheckpoint or SisaEnsemble
    seconds: float
    steps: int
    epochs: list[EpochRecord] = field(default_factory=list)
    losses: list[dict] = field(default_factory=list)
    retrained_shards: tuple[int, ...] = ()
    stopped_early: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")


def params_digest(params) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()[:16]


def _emit(progress: TextIO | None, epoch: int, split: str, metric: str, value: float) -> None:
    if progress is not None:
        progress.write(f"{epoch}\t{split}\t{metric}\t{value:.6f}\n")
        progress.flush()


def _forget_cycle(sentences: Sequence[Sentence], size: int, rng: Rng) -> Iterator[Batch]:
    while True:
        order = rng.permutation(len(sentences))
        for start in range(0, len(order), size):
            yield collate([sentences[i] for i in order[start:start + size]])


# ---------------------------------------------------------------------------
# generic loop

StepFn = Callable[[ModelConfig, dict, Batch], "tuple[ag.Tensor, dict | None]"]


def _run(ckpt: ModelCheckpoint, retained: Sequence[Sentence], ds: TokenDataset, epochs: int, lr: float,
         cfg: TrainConfig, streams: Rng, step_loss, selection: str, forget: Sequence[Sentence] = (),
         evaluator: Evaluator | None = None, progress: TextIO | None = None):
    """Shared epoch loop. ``step_loss(params, batch)`` builds the step's loss on the tape.

    Returns ``(best_checkpoint, seconds, steps, epoch_records, losses, stopped_early)``.
    """
    evaluator = evaluator or Evaluator(ds.label_names)
    mcfg = ckpt.config
    state = AdamWState(base_lr=lr, warmup_steps=cfg.warmup_steps, weight_decay=cfg.weight_decay)
    params = dict(ckpt.params)
    best, best_score = ckpt, -np.inf
    records: list[EpochRecord] = []
    losses: list[dict] = []
    steps = 0
    stopped = False
    watch = Stopwatch().start()
    for epoch in range(1, epochs + 1):
        total, count = 0.0, 0
        for batch in make_batches(retained, cfg.batch_size, streams.child("shuffle", epoch), BUCKET):
            leaves = ag.leaves(params)
            with ag.Tape() as tape:
                loss, info = step_loss(mcfg, leaves, batch)
            if info is not None and info.get("halt"):
                stopped = True
                break
            grads = ag.backward(tape, loss, leaves)
            params, state = adamw_update(params, grads, state)
            steps += 1
            total += loss.item()
            count += 1
            if info is not None:
                info["epoch"] = epoch
                losses.append(info)
        current = ckpt.with_params(params, steps=ckpt.steps + steps)
        with watch.paused():
            dev = evaluator(current, ds.dev)
            fgt = evaluator(current, forget) if forget else None
            if selection == "composite" and fgt is not None:
                score = dev.f1 - fgt.f1
            elif selection == "last":
                score = float(epoch)
            else:
                score = dev.f1
            digest = params_digest(params)
            mean_loss = total / max(count, 1)
            records.append(EpochRecord(epoch, dev.f1, fgt.f1 if fgt else None, score, digest, mean_loss))
            _emit(progress, epoch, "train", "loss", mean_loss)
            _emit(progress, epoch, "dev", "micro_f1", dev.f1)
            if fgt is not None:
                _emit(progress, epoch, "forget", "micro_f1", fgt.f1)
        if score > best_score:
            best, best_score = current, score
        if stopped:
            break
    seconds = watch.stop()
    return best, seconds, steps, records, losses, stopped


def _ce_step(rng_drop: Rng):
    def step(mcfg, params, batch):
        logits = forward_logits(mcfg, params, batch, True, rng_drop)
        return token_cross_entropy(logits, batch.labels, batch.mask), None
    return step


# ---------------------------------------------------------------------------
# training / retraining

def train_model(ds: TokenDataset, cfg: TrainConfig, sentences: Sequence[Sentence] | None = None,
                evaluator: Evaluator | None = None, progress: TextIO | None = None,
                with_timing: bool = False):
    """Train from a fresh initialisation; the best-dev epoch is returned.

    ``sentences`` overrides the training split (used by retraining and SISA).
    With ``with_timing`` the result is ``(checkpoint, seconds, steps, records)``.
    """
    cfg.validate()
    train = ds.train if sentences is None else list(sentences)
    if not train:
        raise TrainingError("no training sentences")
    root = Rng(cfg.seed, "train")
    ckpt = init_parameters(model_config(ds, cfg), root.child("init"))
    try:
        best, seconds, steps, records, _, _ = _run(
            ckpt, train, ds, cfg.epochs, cfg.lr, cfg, root, _ce_step(root.child("dropout")),
            "dev", evaluator=evaluator, progress=progress)
    except ag.NonFiniteError as exc:
        raise TrainingError(f"training diverged: {exc}") from exc
    if cfg.epochs == 0:
        best = ckpt
    best.meta["dev_f1"] = [r.dev_f1 for r in records]
    if with_timing:
        return best, seconds, steps, records
    return best


def unlearn_retrain(ds: TokenDataset, request: UnlearnRequest, cfg: TrainConfig,
                    evaluator: Evaluator | None = None, progress: TextIO | None = None) -> UnlearnOutcome:
    """Exact unlearning: train from scratch on the retained set with the original seed."""
    retained, _ = request.split(ds.train)
    ckpt, seconds, steps, records = train_model(ds, cfg, retained, evaluator, progress, with_timing=True)
    return UnlearnOutcome("retrain", ckpt, seconds, steps, records)


# ---------------------------------------------------------------------------
# approximate unlearning from a trained model

def _unlearn_loop(method: str, model: ModelCheckpoint, ds: TokenDataset, request: UnlearnRequest,
                  cfg: TrainConfig, make_step, evaluator, progress) -> UnlearnOutcome:
    cfg.validate()
    retained, forget = request.split(ds.train)
    if not retained:
        raise TrainingError("retained set is empty")
    root = Rng(cfg.seed, "unlearn")
    fbs = default_forget_batch_size(cfg, len(forget), len(ds.train))
    forget_batches = _forget_cycle(forget, fbs, root.child("forget")) if forget else None
    step = make_step(root.child("dropout"), root.child("aux"), forget_batches)
    try:
        best, seconds, steps, records, losses, stopped = _run(
            model, retained, ds, cfg.unlearn_epochs, cfg.unlearn_lr, cfg, root, step,
            cfg.selection, forget=forget, evaluator=evaluator, progress=progress)
    except ag.NonFiniteError as exc:
        raise TrainingError(f"{method} diverged: {exc}") from exc
    if cfg.unlearn_epochs == 0 or not records:
        best = model
    return UnlearnOutcome(method, best, seconds, steps, records, losses, stopped_early=stopped)


def unlearn_finetune(model: ModelCheckpoint, ds: TokenDataset, request: UnlearnRequest, cfg: TrainConfig,
                     evaluator: Evaluator | None = None, progress: TextIO | None = None) -> UnlearnOutcome:
    """Continue cross-entropy training on the retained set only."""
    def make_step(rng_drop, rng_aux, forget_batches):
        return _ce_step(rng_drop)
    return _unlearn_loop("finetune", model, ds, request, cfg, make_step, evaluator, progress)


def unlearn_reverse_gradient(model: ModelCheckpoint, ds: TokenDataset, request: UnlearnRequest,
                             cfg: TrainConfig, evaluator: Evaluator | None = None,
                             progress: TextIO | None = None) -> UnlearnOutcome:
    """Descend on retained cross-entropy while ascending on forget cross-entropy.

    The step gradient is ``grad CE(retained) - forget_weight * grad CE(forget)``.
    A forget cross-entropy above ``BLOWUP_LOSS`` ends the run.
    """
    w = cfg.forget_weight

    def make_step(rng_drop, rng_aux, forget_batches):
        def step(mcfg, params, batch):
            ce_r = token_cross_entropy(forward_logits(mcfg, params, batch, True, rng_drop),
                                       batch.labels, batch.mask)
            if forget_batches is None:
                return ce_r, None
            fb = next(forget_batches)
            ce_f = token_cross_entropy(forward_logits(mcfg, params, fb, True, rng_aux), fb.labels, fb.mask)
            info = {"ce_retained": ce_r.item(), "ce_forget": ce_f.item()}
            if ce_f.item() > BLOWUP_LOSS:
                info["halt"] = True
            return ag.sub(ce_r, ag.scale(ce_f, w)), info
        return step

    return _unlearn_loop("revgrad", model, ds, request, cfg, make_step, evaluator, progress)


def unlearn_deepcut(model: ModelCheckpoint, ds: TokenDataset, request: UnlearnRequest, cfg: TrainConfig,
                    evaluator: Evaluator | None = None, progress: TextIO | None = None) -> UnlearnOutcome:
    """Retained cross-entropy plus ``gamma`` times the contrastive forget loss.

    Each step pairs a retained batch with a forget batch, encodes both twice
    under independent dropout masks and contrasts forget entity tokens
    against the union batch.
    """
    outside = ds.outside_index

    def make_step(rng_drop, rng_aux, forget_batches):
        def step(mcfg, params, batch):
            r_views = dual_dropout_views(mcfg, params, batch, rng_drop, rng_aux)
            ce = token_cross_entropy(classify(params, r_views.first), batch.labels, batch.mask)
            pool = None
            if forget_batches is not None:
                fb = next(forget_batches)
                f_views = dual_dropout_views(mcfg, params, fb, rng_aux, rng_aux)
                pool = build_contrast_pool(f_views, r_views, cfg.tau, outside)
            parts: LossBreakdown = combined_objective(ce, pool, cfg.gamma, batch.num_tokens)
            return parts.combined, parts.as_dict()
        return step

    outcome = _unlearn_loop("deepcut", model, ds, request, cfg, make_step, evaluator, progress)
    for rec in outcome.epochs:
        if all(info["anchors"] == 0 for info in outcome.losses if info["epoch"] == rec.epoch):
            log.warning("deepcut epoch %d: no usable forget anchors, cross-entropy only", rec.epoch)
    return outcome


# ---------------------------------------------------------------------------
# SISA

def shard_assignment(ids: Sequence[int], k: int, seed: int) -> dict[int, int]:
    """Balanced deterministic sharding: order ids by a keyed hash, deal round-robin."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(ids) < k:
        raise ValueError(f"cannot split {len(ids)} sentences into {k} non-empty shards")

    def key(i: int) -> bytes:
        return hashlib.sha256(f"{seed}:{i}".encode()).digest()

    ordered = sorted(ids, key=key)
    return {sid: pos % k for pos, sid in enumerate(ordered)}


def shard_seed(seed: int, shard: int) -> int:
    return seed + 1_000_003 * shard


@dataclass
class SisaEnsemble:
    members: list[ModelCheckpoint]
    assignment: dict[int, int]
    seeds: list[int]

    @property
    def k(self) -> int:
        return len(self.members)

    @property
    def num_classes(self) -> int:
        return self.members[0].num_classes

    def shard_ids(self, shard: int) -> list[int]:
        return sorted(i for i, s in self.assignment.items() if s == shard)

    def predict_proba(self, ids: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """Mean of member class distributions."""
        if any(m is None for m in self.members):
            raise ValueError("ensemble is missing members")
        total = None
        for m in self.members:
            p = m.predict_proba(ids, mask)
            total = p if total is None else total + p
        return total / len(self.members)

    def equals(self, other: "SisaEnsemble") -> bool:
        return (self.assignment == other.assignment and self.seeds == other.seeds
                and len(self.members) == len(other.members)
                and all(a.equals(b) for a, b in zip(self.members, other.members)))


def _train_shard(ds: TokenDataset, cfg: TrainConfig, sentences: list[Sentence], seed: int,
                 evaluator, progress):
    return train_model(ds, replace(cfg, seed=seed), sentences, evaluator, progress, with_timing=True)


def sisa_train(ds: TokenDataset, k: int, cfg: TrainConfig, assignment: dict[int, int] | None = None,
               evaluator: Evaluator | None = None, progress: TextIO | None = None) -> SisaEnsemble:
    """Train one model per shard. ``assignment`` pins the sharding (sentence id -> shard)."""
    ids = [s.id for s in ds.train]
    if assignment is None:
        assignment = shard_assignment(ids, k, cfg.seed)
    else:
        assignment = {i: assignment[i] for i in ids}
    members = []
    seeds = []
    for shard in range(k):
        sents = [s for s in ds.train if assignment[s.id] == shard]
        if not sents:
            raise ValueError(f"shard {shard} is empty")
        seed = shard_seed(cfg.seed, shard)
        ckpt, *_ = _train_shard(ds, cfg, sents, seed, evaluator, progress)
        members.append(ckpt)
        seeds.append(seed)
    return SisaEnsemble(members, assignment, seeds)


def sisa_unlearn(ensemble: SisaEnsemble, ds: TokenDataset, request: UnlearnRequest, cfg: TrainConfig,
                 evaluator: Evaluator | None = None, progress: TextIO | None = None) -> UnlearnOutcome:
    """Retrain, from scratch and with their own seeds, only shards holding forget ids."""
    affected = sorted({ensemble.assignment[i] for i in request.forget_ids if i in ensemble.assignment})
    assignment = {i: s for i, s in ensemble.assignment.items() if i not in request.forget_ids}
    members = list(ensemble.members)
    seconds = 0.0
    steps = 0
    for shard in affected:
        sents = [s for s in ds.train if assignment.get(s.id) == shard]
        if not sents:
            raise ValueError(f"shard {shard} would be empty after unlearning")
        ckpt, secs, n, _ = _train_shard(ds, cfg, sents, ensemble.seeds[shard], evaluator, progress)
        members[shard] = ckpt
        seconds += secs
        steps += n
    out = SisaEnsemble(members, assignment, list(ensemble.seeds))
    return UnlearnOutcome("sisa", out, max(seconds, 1e-9), steps, retrained_shards=tuple(affected))
