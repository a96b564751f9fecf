"""Training/evaluation plumbing shared by the command-line entry points."""
from __future__ import annotations

import contextlib
import logging
from pathlib import Path

import numpy as np

from . import checkpoint, config as cfg, losses, metrics, predictive, synth
from . import model as M
from . import sampler as S

log = logging.getLogger(__name__)

CHECKPOINT = "checkpoint.bseg"
TRAIN_LOG = "train_log.csv"
EFFECTIVE_CONFIG = "config.txt"


@contextlib.contextmanager
def reproducible(enabled: bool = True):
    """Force single-threaded BLAS so reductions run in a fixed order."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=1):
        yield


def holdout(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded (train_idx, val_idx) split holding out ``fraction`` of n items."""
    perm = np.random.default_rng([seed, 20]).permutation(n)
    n_val = max(1, int(round(fraction * n)))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def mean_dice(masks, labels) -> float:
    return float(np.mean([metrics.evaluate(p, g).dice for p, g in zip(masks, labels)]))


def dice_scorer(arch: M.ArchConfig, batch: int = 32):
    def score(params, images, labels):
        masks = np.concatenate([M.predict_mask(M.forward(params, images[i:i + batch], arch))
                                for i in range(0, len(images), batch)])
        return mean_dice(masks, labels)
    return score


def ensemble_dice(ensemble, images, labels) -> float:
    return mean_dice([r.mask for r in predictive.predict(ensemble, images)], labels)


def train_experiment(config: cfg.ExperimentConfig, on_epoch=None):
    """Train one method variant on the corpus train split.

    Returns (ensemble, TrainingLog, info dict).
    """
    images, labels, _ = synth.load_split(config.data_root, "train")
    tr, va = holdout(len(images), config.val_fraction, config.seed)
    arch = config.arch
    if images.shape[1:] != (arch.input_channels, arch.side, arch.side):
        raise cfg.ConfigError(f"corpus images {images.shape[1:]} do not match arch "
                              f"({arch.input_channels}, {arch.side}, {arch.side})")

    if config.weighted:
        loss_fn = losses.UncertaintyWeightedLoss(config.loss, images[tr])
    else:
        loss_fn = S.plain_ce
    ensemble, history = S.train(
        arch, images[tr], labels[tr], config.effective_sampler(), config.seed,
        loss_fn=loss_fn, grad_clip=config.effective_clip(),
        val=(images[va], labels[va]), val_score=dice_scorer(arch), on_epoch=on_epoch)
    info = {
        "final_val_dice": ensemble_dice(ensemble, images[va], labels[va]),
        "n_train": len(tr), "n_val": len(va),
        "sigma_max": getattr(loss_fn, "sigma_max", 0.0),
        "sigma_min": getattr(loss_fn, "sigma_min", 0.0),
    }
    return ensemble, history, info


def write_training_outputs(out_dir, config, ensemble, history, info) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(out / CHECKPOINT, ensemble, config.method, config.seed)
    text = history.to_csv()
    text += f"# final_val_dice={info['final_val_dice']!r} snapshots={len(ensemble)}\n"
    (out / TRAIN_LOG).write_text(text)
    (out / EFFECTIVE_CONFIG).write_text(cfg.emit(config))


def evaluate_split(ensemble, images, labels, split: str):
    """(SplitReport, per-image MetricRecords) for one split."""
    results = predictive.predict(ensemble, images)
    records = [metrics.evaluate(r.mask, g) for r, g in zip(results, labels)]
    return metrics.aggregate(records, split), records


def per_image_csv(rows) -> str:
    lines = ["split,item," + ",".join(metrics.METRICS) + ",empty_gt"]
    for split, item, rec in rows:
        vals = ",".join(f"{v:.6f}" for v in rec.values())
        lines.append(f"{split},{item},{vals},{int(rec.empty_gt)}")
    return "\n".join(lines) + "\n"


def read_final_val_dice(log_path) -> float:
    for line in Path(log_path).read_text().splitlines():
        if line.startswith("# final_val_dice="):
            return float(line.split()[1].split("=", 1)[1])
    raise ValueError(f"{log_path}: no final_val_dice footer")
