"""Cyclical stochastic-gradient MCMC (momentum form) with snapshot collection."""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import model as M
from . import tensor as T

log = logging.getLogger(__name__)

EXPLORATION = "exploration"
SAMPLING = "sampling"


class NumericalError(RuntimeError):
    """Non-finite gradients or losses during sampling."""


@dataclass(frozen=True)
class SamplerConfig:
    cycles: int = 2
    epochs_per_cycle: int = 30
    lr0: float = 0.1
    alpha: float = 0.9
    exploration_fraction: float = 0.8
    snapshots_per_cycle: int = 4
    prior_precision: float = 5e-4
    batch_size: int = 8
    # "scaled": noise variance 2*alpha*lr'/N (posterior tempered by 1/N, the
    # cyclical SG-MCMC reference default); "unit": 2*alpha*lr'.
    temperature: str = "scaled"
    noise: bool = True
    # "schedule": S evenly spaced snapshots per sampling phase;
    # "best_val": a single snapshot at the best validation-Dice epoch.
    selection: str = "schedule"

    def __post_init__(self):
        if not 0 < self.exploration_fraction < 1:
            raise ValueError("exploration_fraction must lie in (0, 1)")
        if self.snapshots_per_cycle < 1:
            raise ValueError("snapshots_per_cycle must be >= 1")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.cycles < 1 or self.epochs_per_cycle < 1 or self.batch_size < 1:
            raise ValueError("cycles, epochs_per_cycle and batch_size must be >= 1")
        if self.prior_precision < 0:
            raise ValueError("prior_precision must be >= 0")
        if self.temperature not in ("scaled", "unit"):
            raise ValueError(f"unknown temperature convention {self.temperature!r}")
        if self.selection not in ("schedule", "best_val"):
            raise ValueError(f"unknown snapshot selection {self.selection!r}")
        if self.selection == "schedule" and self.snapshots_per_cycle > len(self.sampling_epochs()):
            raise ValueError("more snapshots per cycle than sampling epochs")

    def phase(self, epoch_in_cycle: int) -> str:
        if epoch_in_cycle / self.epochs_per_cycle < self.exploration_fraction:
            return EXPLORATION
        return SAMPLING

    def sampling_epochs(self) -> list[int]:
        """Epoch-in-cycle indices of the sampling phase."""
        return [e for e in range(self.epochs_per_cycle) if self.phase(e) == SAMPLING]

    def snapshot_epochs(self) -> list[int]:
        """Epoch-in-cycle indices at which snapshots are captured.

        Evenly spread over the sampling phase with the final epoch included.
        """
        span = self.sampling_epochs()
        s = self.snapshots_per_cycle
        return [span[math.ceil((i + 1) * len(span) / s) - 1] for i in range(s)]


@dataclass
class Snapshot:
    params: M.ModelParams
    cycle: int
    epoch: int
    lr: float


@dataclass
class PosteriorEnsemble:
    arch: M.ArchConfig
    snapshots: list[Snapshot] = field(default_factory=list)

    def __len__(self):
        return len(self.snapshots)

    @property
    def M(self) -> int:
        return len(self.snapshots)

    def params(self) -> list[M.ModelParams]:
        return [s.params for s in self.snapshots]

    def upto_cycle(self, cycle: int) -> PosteriorEnsemble:
        """Snapshots captured in cycles strictly before ``cycle``."""
        return PosteriorEnsemble(self.arch, [s for s in self.snapshots if s.cycle < cycle])

    @property
    def id(self) -> str:
        h = hashlib.sha1()
        for snap in self.snapshots:
            for k, v in snap.params.items():
                h.update(k.encode())
                h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()[:12]


def cyclical_lr(step: int, total_steps: int, cycles: int, lr0: float) -> float:
    """Cosine step size restarting at ``lr0`` at the start of every cycle."""
    period = math.ceil(total_steps / cycles)
    return lr0 / 2 * (math.cos(math.pi * (step % period) / period) + 1)


def sgmcmc_step(params, momenta, grads, lr: float, alpha: float, n_train: int,
                prior_precision: float, phase: str, rng: np.random.Generator,
                temperature: str = "scaled", noise: bool = True):
    """One momentum SG-MCMC update; returns new (params, momenta) dicts.

    ``grads`` are gradients of the mean batch loss.  The potential gradient is
    N * g + lambda * w; with lr' = lr / N the update is
    v <- (1 - alpha) v - lr' grad_U + noise and w <- w + v.  Noise is only
    injected in the sampling phase.
    """
    lr_u = lr / n_train
    if temperature == "scaled":
        noise_var = 2 * alpha * lr_u / n_train
    else:
        noise_var = 2 * alpha * lr_u
    add_noise = noise and phase == SAMPLING
    new_p, new_v = {}, {}
    for k, w in params.items():
        g = grads[k]
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {k!r}; consider a gradient clip")
        g_u = n_train * g + prior_precision * w
        v = (1 - alpha) * momenta[k] - lr_u * g_u
        if add_noise:
            v = v + math.sqrt(noise_var) * rng.standard_normal(w.shape)
        v = v.astype(w.dtype, copy=False)
        new_v[k] = v
        new_p[k] = w + v
    return new_p, new_v


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class StepContext:
    """What a loss function may look at besides the predictions."""
    images: np.ndarray
    labels: np.ndarray
    indices: np.ndarray
    cycle: int
    epoch: int
    ensemble: PosteriorEnsemble


@dataclass
class EpochRecord:
    epoch: int
    cycle: int
    phase: str
    lr: float
    mean_loss: float
    snapshots: int
    val_dice: float = float("nan")
    max_abs_grad: float = 0.0


@dataclass
class TrainingLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    step_max_grad: list[float] = field(default_factory=list)
    best_val_epoch: int = -1
    best_val_dice: float = float("nan")

    COLUMNS = ("epoch", "cycle", "phase", "lr", "mean_loss", "snapshots_so_far",
               "val_dice", "max_abs_grad")

    def to_csv(self) -> str:
        lines = [",".join(self.COLUMNS)]
        for r in self.epochs:
            lines.append(f"{r.epoch},{r.cycle},{r.phase},{r.lr!r},{r.mean_loss!r},"
                         f"{r.snapshots},{r.val_dice!r},{r.max_abs_grad!r}")
        lines.append(f"# best_val_epoch={self.best_val_epoch} "
                     f"best_val_dice={self.best_val_dice!r}")
        return "\n".join(lines) + "\n"


def plain_ce(probs, ctx: StepContext):
    return T.nll_mean(probs, ctx.labels)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train(arch: M.ArchConfig, images: np.ndarray, labels: np.ndarray,
          config: SamplerConfig, seed: int, loss_fn: Callable = plain_ce,
          grad_clip: float | None = None, val: tuple | None = None,
          val_score: Callable | None = None, init: M.ModelParams | None = None,
          on_epoch: Callable | None = None):
    """Run cyclical SG-MCMC and return (PosteriorEnsemble, TrainingLog).

    images: [N, C, H, W] float32 in [0, 1]; labels: [N, H, W] in {0, 1}.
    ``val`` is an optional (images, labels) pair scored each epoch with
    ``val_score(params, images, labels) -> float``.
    """
    from .losses import clip_gradients

    n_train = len(images)
    if n_train == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    params = init if init is not None else M.init_params(arch, seed)
    params = {k: v.astype(np.float32) for k, v in params.items()}
    momenta = {k: np.zeros_like(v) for k, v in params.items()}

    steps_per_epoch = math.ceil(n_train / config.batch_size)
    total_steps = config.cycles * config.epochs_per_cycle * steps_per_epoch
    capture = set(config.snapshot_epochs()) if config.selection == "schedule" else set()
    ensemble = PosteriorEnsemble(arch)
    history = TrainingLog()
    best_params = None
    step = 0

    for cycle in range(1, config.cycles + 1):
        for e in range(config.epochs_per_cycle):
            epoch = (cycle - 1) * config.epochs_per_cycle + e
            phase = config.phase(e)
            epoch_lr = cyclical_lr(step, total_steps, config.cycles, config.lr0)
            losses, epoch_max = [], 0.0
            for idx in _batches(n_train, config.batch_size, rng):
                lr = cyclical_lr(step, total_steps, config.cycles, config.lr0)
                ctx = StepContext(images[idx], labels[idx], idx, cycle, epoch, ensemble)
                tape = T.Tape()
                vs = {k: tape.var(v) for k, v in params.items()}
                loss = loss_fn(M.forward(vs, ctx.images, arch), ctx)
                tape.backward(loss)
                grads = {k: v.grad for k, v in vs.items()}
                if grad_clip is not None:
                    grads = clip_gradients(grads, grad_clip)
                gmax = max(float(np.max(np.abs(g))) for g in grads.values())
                history.step_max_grad.append(gmax)
                epoch_max = max(epoch_max, gmax)
                params, momenta = sgmcmc_step(
                    params, momenta, grads, lr, config.alpha, n_train,
                    config.prior_precision, phase, rng, config.temperature, config.noise)
                losses.append(float(T._value(loss)))
                step += 1
            losses = np.asarray(losses)
            if not np.any(np.isfinite(losses)):
                raise NumericalError(f"loss non-finite for all of epoch {epoch}; "
                                     "check the gradient clip setting")

            if e in capture:
                ensemble.snapshots.append(Snapshot(
                    {k: v.copy() for k, v in params.items()}, cycle, epoch, lr))

            rec = EpochRecord(epoch, cycle, phase, epoch_lr, float(np.mean(losses)),
                              len(ensemble), max_abs_grad=epoch_max)
            if val is not None and val_score is not None:
                rec.val_dice = float(val_score(params, *val))
                if not history.best_val_dice >= rec.val_dice:
                    history.best_val_dice = rec.val_dice
                    history.best_val_epoch = epoch
                    best_params = {k: v.copy() for k, v in params.items()}
            history.epochs.append(rec)
            log.debug("epoch %d cycle %d %s lr=%.4g loss=%.4f val_dice=%.4f",
                      epoch, cycle, phase, epoch_lr, rec.mean_loss, rec.val_dice)
            if on_epoch is not None:
                on_epoch(rec)

    if config.selection == "best_val":
        chosen, at = (best_params, history.best_val_epoch) if best_params is not None \
            else (params, history.epochs[-1].epoch)
        rec = history.epochs[at]
        ensemble.snapshots = [Snapshot(chosen, rec.cycle, rec.epoch, rec.lr)]
    return ensemble, history


# ---------------------------------------------------------------------------
# toy Gaussian oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToyConfig:
    lr: float = 0.02
    alpha: float = 0.9
    noise: bool = True
    samples: int = 5000
    burn_in: int = 2000
    thin: int = 20
    seed: int = 0


@dataclass
class ToyResult:
    mean: np.ndarray
    cov: np.ndarray
    target_mean: np.ndarray
    target_cov: np.ndarray
    mean_ok: bool
    cov_ok: bool

    @property
    def passed(self) -> bool:
        return self.mean_ok and self.cov_ok

    def report(self) -> str:
        fmt = lambda a: np.array2string(np.asarray(a), precision=4, separator=", ")
        lines = [
            f"target mean     {fmt(self.target_mean)}",
            f"empirical mean  {fmt(self.mean)}  [{'ok' if self.mean_ok else 'FAIL'}]",
            f"target cov      {fmt(self.target_cov.ravel())}",
            f"empirical cov   {fmt(self.cov.ravel())}  [{'ok' if self.cov_ok else 'FAIL'}]",
        ]
        if not self.cov_ok:
            lines.append("covariance outside 15% relative (0.05 absolute floor): "
                         f"variances {fmt(np.diag(self.cov))} vs {fmt(np.diag(self.target_cov))}")
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


def toy_sampler_check(mean, cov, config: ToyConfig = ToyConfig()) -> ToyResult:
    """Sample U(x) = 1/2 (x-m)^T cov^-1 (x-m) with exact gradients and N = 1."""
    m = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    if cov.shape != (2, 2) or not np.allclose(cov, cov.T):
        raise ValueError("covariance must be a symmetric 2x2 matrix")
    if np.any(np.linalg.eigvalsh(cov) <= 0):
        raise ValueError("covariance must be positive definite")
    prec = np.linalg.inv(cov)
    rng = np.random.default_rng(config.seed)

    params = {"x": np.zeros(2)}
    momenta = {"x": np.zeros(2)}
    draws = np.empty((config.samples, 2))
    total = config.burn_in + config.samples * config.thin
    for k in range(total):
        grads = {"x": prec @ (params["x"] - m)}
        params, momenta = sgmcmc_step(params, momenta, grads, config.lr, config.alpha,
                                      1, 0.0, SAMPLING, rng, noise=config.noise)
        j = k - config.burn_in
        if j >= 0 and j % config.thin == 0:
            draws[j // config.thin] = params["x"]

    emp_mean = draws.mean(axis=0)
    emp_cov = np.cov(draws.T, bias=True)
    mean_ok = bool(np.max(np.abs(emp_mean - m)) < 0.1 * math.sqrt(np.max(np.diag(cov))))
    tol = np.maximum(0.15 * np.abs(cov), 0.05)
    cov_ok = bool(np.all(np.abs(emp_cov - cov) <= tol))
    return ToyResult(emp_mean, emp_cov, m, cov, mean_ok, cov_ok)


def sgd_config(config: SamplerConfig) -> SamplerConfig:
    """The deterministic baseline: momentum fully decayed, no noise, best-val pick."""
    return replace(config, alpha=1.0, noise=False, snapshots_per_cycle=1, selection="best_val")
