"""
Learn / adapt / test drivers.

learn:  encoder (upper level) trained by the one-step hypergradient on the
        learning scenes while the decoder (lower level) takes Adam steps
        (``inner_optimizer="sgd"`` for plain steps of size xi);
        RBL additionally learns a decoder meta-initialization with episodic
        resets of the decoder. The denoiser is trained on mixed noisy/clean
        batches throughout.
adapt:  encoder frozen, decoder (and optionally the denoiser) trained with
        Adam on a new scene; ``mode="naive"`` trains every part from scratch.
test:   enhancement plus metrics over a scene's test split.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import bilevel as BL
from . import network as N
from . import tensor as T
from .data import SceneDataset, save_image, stack_gt, stack_low, stream
from .losses import SmoothnessContext, adaptive_denoise_loss, supervised_loss, unsupervised_loss
from .metrics import MetricReport, psnr

log = logging.getLogger(__name__)

MODES = ("BL", "RBL", "naive")
DECODER_INITS = ("random", "meta", "learned")


class ConfigurationError(ValueError):
    """Inconsistent phase inputs (dataset flags, modes, parameter sets)."""


@dataclass
class BilevelConfig:
    xi: float = 1e-3
    eps: Optional[float] = None
    eps_scale: float = 1e-2
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    learn_epochs: int = 12
    adapt_epochs: int = 20
    episode_len: int = 5
    prox_weight: float = 1.0
    clip_norm: Optional[float] = 5.0
    inner_optimizer: str = "adam"
    seed: int = 0
    freeze_bn_stats: bool = True
    finetune_denoiser: bool = False
    denoiser_width: int = N.DENOISER_WIDTH
    uns_lambda: float = 0.2
    uns_sigma: float = 0.1

    def __post_init__(self):
        if self.xi < 0:
            raise ConfigurationError("xi must be non-negative")
        if self.eps is not None and self.eps <= 0:
            raise ConfigurationError("eps must be positive")
        if self.eps_scale <= 0:
            raise ConfigurationError("eps_scale must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigurationError("beta1 and beta2 must lie in (0, 1)")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be at least 2 for batch statistics")
        if self.episode_len < 1:
            raise ConfigurationError("episode_len must be >= 1")
        if self.inner_optimizer not in ("adam", "sgd"):
            raise ConfigurationError("inner_optimizer must be 'adam' or 'sgd'")
        if self.learn_epochs < 0 or self.adapt_epochs < 0:
            raise ConfigurationError("epoch counts must be non-negative")

    @property
    def smoothness(self) -> SmoothnessContext:
        return SmoothnessContext(sigma=self.uns_sigma, fidelity_weight=self.uns_lambda)

    def adam(self, params, grads, state, frozen=()):
        return BL.adam_update(params, grads, state, self.lr, self.beta1, self.beta2, self.adam_eps, frozen)


@dataclass
class PhaseRecord:
    phase: str
    epoch: int
    split: str
    loss: float
    psnr: float
    seconds: float


LOG_FIELDS = ["phase", "epoch", "split", "loss", "psnr", "seconds"]


def write_log(records: Sequence[PhaseRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in records:
            w.writerow([r.phase, r.epoch, r.split, f"{r.loss:.8f}", f"{r.psnr:.6f}", f"{r.seconds:.3f}"])


@dataclass
class Batch:
    low: np.ndarray
    gt: Optional[np.ndarray]
    noisy: Optional[np.ndarray] = None  # per-image flag, used by the denoiser loss

    def __len__(self) -> int:
        return self.low.shape[0]


def make_batch(pairs, noisy: bool = False) -> Batch:
    gt = stack_gt(pairs) if all(p.gt is not None for p in pairs) else None
    return Batch(stack_low(pairs), gt, np.full(len(pairs), noisy))


def concat_batches(batches: Sequence[Batch]) -> Batch:
    gts = [b.gt for b in batches]
    gt = None if any(g is None for g in gts) else np.concatenate(gts)
    return Batch(np.concatenate([b.low for b in batches]), gt, np.concatenate([b.noisy for b in batches]))


# ------------------------------------------------------------------ objectives

def brightening_loss(y, gt, x: T.Tensor, ctx: SmoothnessContext) -> T.Tensor:
    """Supervised MSE on the reflectance when a reference exists, else the unsupervised loss."""
    if gt is not None:
        return supervised_loss(N.reflectance(y, x), gt)
    return unsupervised_loss(x, y, ctx)


def network_objective(ctx: SmoothnessContext, enc_training=True, dec_training=True, stats_out=None):
    """f(u, v; batch) with u the encoder map and v the decoder map."""

    def objective(u, v, batch: Batch) -> T.Tensor:
        x = N.estimate_illumination(batch.low, u, v, enc_training, dec_training, stats_out)
        return brightening_loss(batch.low, batch.gt, x, ctx)

    return objective


def meta_objectives(u, ctx: SmoothnessContext, prox_weight: float, stats_out=None):
    """(H, h) for the meta-initialization problem: upper = meta-init, lower = decoder.

    h adds a proximal pull of the decoder toward the meta-initialization, which
    is what couples the two; H only sees the decoder.
    """
    base = network_objective(ctx, stats_out=stats_out)

    def upper(v_meta, v, batch):
        return base(u, v, batch)

    def lower(v_meta, v, batch):
        loss = base(u, v, batch)
        prox = None
        for k, p in v.items():
            if isinstance(p, T.Tensor) and not N.is_buffer(k):
                term = T.tsum(T.square(T.sub(p, v_meta[k])))
                prox = term if prox is None else T.add(prox, term)
        return T.add(loss, T.mul(prox, 0.5 * prox_weight)) if prox is not None else loss

    return upper, lower


def _index_rows(t: T.Tensor, mask: np.ndarray) -> T.Tensor:
    idx = np.flatnonzero(mask)
    if idx.size == t.shape[0]:
        return t
    # contiguous runs stay on basic slicing
    if np.all(np.diff(idx) == 1):
        return t[int(idx[0]):int(idx[-1]) + 1]
    return T.concat([t[int(i):int(i) + 1] for i in idx], axis=0)


def denoiser_objective(z: np.ndarray, batch: Batch):
    """Split-group reconstruction loss of the denoiser on fixed reflectances ``z``."""
    noisy = batch.noisy.astype(bool)

    def objective(g, _unused, _batch):
        out, _ = N.denoise(z, g)
        a = _index_rows(out, noisy) if noisy.any() else None
        b = _index_rows(out, ~noisy) if (~noisy).any() else None
        return adaptive_denoise_loss(
            a, batch.gt[noisy] if a is not None else None, b, batch.gt[~noisy] if b is not None else None
        )

    return objective


# ------------------------------------------------------------------ evaluation

def evaluate(u, v, g, batch: Batch, ctx: SmoothnessContext, chunk: int = 16) -> tuple:
    """(brightening loss, mean PSNR of the final output) in inference mode."""
    losses, scores, sizes = [], [], []
    for s in range(0, len(batch), chunk):
        y = batch.low[s:s + chunk]
        gt = None if batch.gt is None else batch.gt[s:s + chunk]
        res = N.run_pipeline(y, u, v, g, False, False)
        losses.append(brightening_loss(y, gt, res.illumination, ctx).item())
        sizes.append(len(y))
        if gt is not None:
            scores += [psnr(np.clip(o, 0, 1), t) for o, t in zip(res.output.data, gt)]
    loss = float(np.average(losses, weights=sizes))
    score = float(np.mean(scores)) if scores else math.nan
    return loss, score


def _denoiser_update(u, v, g, batch: Batch, cfg: BilevelConfig, state: BL.AdamState) -> tuple:
    z = N.run_pipeline(batch.low, u, v, None, True, True).reflectance.data
    loss, grads, _ = BL.value_and_grad(denoiser_objective(z, batch), g, {}, batch, wrt=("upper",))
    grads = BL.clip_by_global_norm(grads, cfg.clip_norm)
    return cfg.adam(g, grads, state), loss


def _commit_stats(params: dict, stats: dict) -> None:
    for k, val in stats.items():
        if k in params:
            params[k] = val


# ------------------------------------------------------------------ learn

@dataclass
class LearnResult:
    partition: N.ParameterPartition
    records: list = field(default_factory=list)


def _epoch_batches(pools: Sequence[list], batch_size: int, rng: np.random.Generator):
    """Mixed minibatches drawing an equal share from every pool."""
    share = max(1, batch_size // len(pools))
    orders = [rng.permutation(len(p)) for p in pools]
    steps = max(math.ceil(len(p) / share) for p in pools)
    for s in range(steps):
        chosen = []
        for pool, order in zip(pools, orders):
            idx = [(s * share + j) % len(pool) for j in range(share)]
            chosen.append([pool[order[i]] for i in idx])
        yield chosen


def learn_phase(
    datasets: Sequence[SceneDataset],
    mode: str = "BL",
    cfg: Optional[BilevelConfig] = None,
    init: Optional[N.ParameterPartition] = None,
    on_epoch: Optional[Callable[[PhaseRecord, N.ParameterPartition], None]] = None,
) -> LearnResult:
    cfg = cfg or BilevelConfig()
    if mode not in ("BL", "RBL"):
        raise ConfigurationError(f"learning phase runs in BL or RBL mode, not {mode!r}")
    learnable = [d for d in datasets if d.spec.learnable]
    if len(learnable) < 2:
        raise ConfigurationError("learning needs at least two scenes flagged learnable")
    if not any(d.noisy for d in learnable) or all(d.noisy for d in learnable):
        raise ConfigurationError("learning needs at least one noisy and one clean learnable scene")
    if any(not d.spec.paired for d in learnable):
        raise ConfigurationError("learning scenes must be paired")

    part = init.copy() if init is not None else N.init_partition(stream(cfg.seed, "init"), denoiser_width=cfg.denoiser_width)
    if mode == "RBL" and part.meta_init is None:
        part.meta_init = N.copy_params(part.decoder)
    u, v, g = part.encoder, part.decoder, part.denoiser
    v_meta = part.meta_init if mode == "RBL" else None
    ctx = cfg.smoothness
    records: list = []
    if cfg.learn_epochs == 0:
        return LearnResult(part, records)

    rng = stream(cfg.seed, "batching:learn")
    st_u, st_v, st_meta, st_g = BL.AdamState(), BL.AdamState(), BL.AdamState(), BL.AdamState()
    tr_pools = [d.learn_tr for d in learnable]
    val_pools = [d.learn_val for d in learnable]
    val_all = concat_batches([make_batch(d.learn_val, d.noisy) for d in learnable])
    F = network_objective(ctx)
    step = 0

    for epoch in range(1, cfg.learn_epochs + 1):
        t0 = time.perf_counter()
        tr_losses = []
        for chosen in _epoch_batches(tr_pools, cfg.batch_size, rng):
            tr = concat_batches([make_batch(c, d.noisy) for c, d in zip(chosen, learnable)])
            val_pick = [[pool[int(i)] for i in rng.choice(len(pool), size=len(c), replace=len(c) > len(pool))]
                        for pool, c in zip(val_pools, chosen)]
            val = concat_batches([make_batch(c, d.noisy) for c, d in zip(val_pick, learnable)])

            if v_meta is not None and step % cfg.episode_len == 0:
                v = N.copy_params(v_meta)
                st_v = BL.AdamState()

            # (i) inner step on the decoder; this forward also refreshes BN statistics
            stats: dict = {}
            if v_meta is not None:
                _, h_stats = meta_objectives(u, ctx, cfg.prox_weight, stats_out=stats)
                loss_tr, _, gv = BL.value_and_grad(h_stats, v_meta, v, tr, wrt=("lower",))
            else:
                loss_tr, _, gv = BL.value_and_grad(network_objective(ctx, stats_out=stats), u, v, tr, wrt=("lower",))
            if not all(np.all(np.isfinite(x)) for x in gv.values()):
                raise BL.DivergedStepError(f"non-finite decoder gradient at learn step {step}")
            gv = BL.clip_by_global_norm(gv, cfg.clip_norm)
            v_prime = BL.axpy(v, gv, -cfg.xi)
            v_next = v_prime if cfg.inner_optimizer == "sgd" else cfg.adam(v, gv, st_v)
            _commit_stats(v_next, stats)
            tr_losses.append(loss_tr)

            # (ii) outer steps, both evaluated at the pre-step point
            hg = BL.bl_hypergradient(u, v, F, F, tr, val, cfg.xi, cfg.eps, cfg.eps_scale, v_prime=v_prime)
            if v_meta is not None:
                H, h = meta_objectives(u, ctx, cfg.prox_weight)
                gm = BL.rbl_hypergradient(v_meta, v, H, h, tr, val, cfg.xi, cfg.eps, cfg.eps_scale, v_prime=v_prime)
                v_meta = cfg.adam(v_meta, BL.clip_by_global_norm(gm, cfg.clip_norm), st_meta)
                # running statistics follow the decoder they were measured on
                _commit_stats(v_meta, {k: v_next[k] for k in v_next if N.is_buffer(k)})
            u = cfg.adam(u, BL.clip_by_global_norm(hg, cfg.clip_norm), st_u)
            _commit_stats(u, stats)
            v = v_next

            g, _ = _denoiser_update(u, v, g, tr, cfg, st_g)
            step += 1

        seconds = time.perf_counter() - t0
        rec_tr = PhaseRecord("learn", epoch, "tr", float(np.mean(tr_losses)), math.nan, seconds)
        val_loss, val_psnr = evaluate(u, v, g, val_all, ctx)
        rec_val = PhaseRecord("learn", epoch, "val", val_loss, val_psnr, seconds)
        records += [rec_tr, rec_val]
        log.info("learn %s epoch %d: tr %.5f val %.5f psnr %.2f (%.1fs)", mode, epoch, rec_tr.loss, val_loss, val_psnr, seconds)
        if on_epoch:
            on_epoch(rec_val, N.ParameterPartition(u, v, g, v_meta))

    part = N.ParameterPartition(u, v, g, v_meta)
    return LearnResult(part, records)


# ------------------------------------------------------------------ adapt

@dataclass
class AdaptResult:
    partition: N.ParameterPartition
    records: list = field(default_factory=list)
    encoder_frozen: Optional[bool] = None


def adapt_phase(
    learned: Optional[N.ParameterPartition],
    dataset: SceneDataset,
    cfg: Optional[BilevelConfig] = None,
    decoder_init: str = "random",
    mode: str = "BL",
    epochs: Optional[int] = None,
    on_epoch: Optional[Callable[[PhaseRecord, N.ParameterPartition], None]] = None,
) -> AdaptResult:
    """Fit the scene-specific parts on ``dataset.adapt_tr``.

    BL/RBL: the encoder from ``learned`` is frozen (parameters and, unless
    ``cfg.freeze_bn_stats`` is off, its running statistics). ``decoder_init``
    is ``"random"``, ``"meta"`` (the learned meta-initialization) or
    ``"learned"`` (continue from the decoder fitted during learning).
    naive: every part starts from a fresh random init and is trained.
    """
    cfg = cfg or BilevelConfig()
    epochs = cfg.adapt_epochs if epochs is None else epochs
    if mode not in MODES:
        raise ConfigurationError(f"unknown mode {mode!r}")
    scene = dataset.scene_id
    init_rng = stream(cfg.seed, f"adapt-init:{scene}")
    naive = mode == "naive"

    if naive:
        fresh = N.init_partition(stream(cfg.seed, f"naive-init:{scene}"), denoiser_width=cfg.denoiser_width)
        u, v, g = fresh.encoder, fresh.decoder, fresh.denoiser
        frozen: set = set()
    else:
        if learned is None:
            raise ConfigurationError("adaptation needs learned encoder parameters")
        u = N.copy_params(learned.encoder)
        g = N.copy_params(learned.denoiser)
        if decoder_init == "meta":
            if learned.meta_init is None:
                raise ConfigurationError("decoder_init='meta' needs a meta-initialization (learn with RBL)")
            v = N.copy_params(learned.meta_init)
        elif decoder_init == "learned":
            v = N.copy_params(learned.decoder)
        elif decoder_init == "random":
            v = N.init_decoder(init_rng)
        else:
            raise ConfigurationError(f"decoder_init must be one of {', '.join(DECODER_INITS)}, got {decoder_init!r}")
        frozen = set(N.trainable_names(u))
        if cfg.freeze_bn_stats:
            frozen |= {k for k in u if N.is_buffer(k)}

    enc_before = N.checksum({k: u[k] for k in N.trainable_names(u)})
    enc_train_mode = naive or not cfg.freeze_bn_stats
    train_denoiser = naive or cfg.finetune_denoiser
    ctx = cfg.smoothness
    rng = stream(cfg.seed, f"batching:adapt:{scene}")
    st_enc, st_dec, st_g = BL.AdamState(), BL.AdamState(), BL.AdamState()
    val = make_batch(dataset.adapt_val, dataset.noisy)
    records: list = []

    def snapshot():
        return N.ParameterPartition(u, v, g, learned.meta_init if learned is not None else None)

    def log_epoch(epoch, tr_loss, seconds):
        val_loss, val_psnr = evaluate(u, v, g, val, ctx)
        if tr_loss is not None:
            records.append(PhaseRecord(f"adapt-{mode}", epoch, "tr", tr_loss, math.nan, seconds))
        rec = PhaseRecord(f"adapt-{mode}", epoch, "val", val_loss, val_psnr, seconds)
        records.append(rec)
        log.info("adapt %s %s epoch %d: val %.5f psnr %.2f", mode, scene, epoch, val_loss, val_psnr)
        if on_epoch:
            on_epoch(rec, snapshot())

    log_epoch(0, None, 0.0)
    pool = dataset.adapt_tr
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(pool))
        losses = []
        for s in range(0, len(pool), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            if len(idx) < 2:
                continue
            batch = make_batch([pool[i] for i in idx], dataset.noisy)
            stats: dict = {}
            obj = network_objective(ctx, enc_training=enc_train_mode, dec_training=True, stats_out=stats)
            wrt = ("upper", "lower") if naive else ("lower",)
            loss, gu, gv = BL.value_and_grad(obj, u, v, batch, wrt=wrt)
            if naive:
                both = BL.clip_by_global_norm({**gu, **gv}, cfg.clip_norm)
                u = cfg.adam(u, {k: both[k] for k in gu}, st_enc)
                v = cfg.adam(v, {k: both[k] for k in gv}, st_dec)
            else:
                v = cfg.adam(v, BL.clip_by_global_norm(gv, cfg.clip_norm), st_dec, frozen=frozen)
            _commit_stats(v, stats)
            if enc_train_mode:
                _commit_stats(u, stats)
            if train_denoiser and batch.gt is not None:
                g, _ = _denoiser_update(u, v, g, batch, cfg, st_g)
            losses.append(loss)
        log_epoch(epoch, float(np.mean(losses)) if losses else math.nan, time.perf_counter() - t0)

    frozen_ok = None
    if not naive:
        frozen_ok = N.checksum({k: u[k] for k in N.trainable_names(u)}) == enc_before
    return AdaptResult(snapshot(), records, frozen_ok)


# ------------------------------------------------------------------ test

def test_phase(
    partition: N.ParameterPartition,
    dataset: SceneDataset,
    use_denoiser: bool = True,
    dump_dir=None,
    chunk: int = 16,
) -> MetricReport:
    """Enhance every test image and score it; outputs are scored after 8-bit quantization."""
    report = MetricReport()
    pairs = dataset.test
    g = partition.denoiser if use_denoiser else None
    for s in range(0, len(pairs), chunk):
        part = pairs[s:s + chunk]
        y = stack_low(part)
        res = N.run_pipeline(y, partition.encoder, partition.decoder, g, False, False)
        for i, pair in enumerate(part):
            out = np.round(np.clip(res.output.data[i], 0, 1) * 255.0) / 255.0
            report.add(pair.id, out, pair.low, pair.gt)
            if dump_dir is not None:
                d = Path(dump_dir)
                save_image(pair.low, d / f"{pair.id}_input.png")
                save_image(res.illumination.data[i], d / f"{pair.id}_illumination.png")
                save_image(np.clip(res.reflectance.data[i], 0, 1), d / f"{pair.id}_reflectance.png")
                if res.noise is not None:
                    n = res.noise.data[i]
                    span = float(n.max() - n.min())
                    save_image((n - n.min()) / span if span > 0 else np.zeros_like(n), d / f"{pair.id}_noise.png")
                save_image(out, d / f"{pair.id}_output.png")
    return report
